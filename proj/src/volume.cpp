#include "curvereg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "curvereg/error.hpp"

namespace curvereg {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view channel_name(Channel c) noexcept {
    switch(c){
        case Channel::CT: return "CT";
        case Channel::PET: return "PET";
        case Channel::PET_PREPROCESSED: return "PET_PREPROCESSED";
    }
    return "CT";
}

Channel parse_channel(std::string_view label) {
    if(label == "CT") return Channel::CT;
    if(label == "PET") return Channel::PET;
    if(label == "PET_PREPROCESSED") return Channel::PET_PREPROCESSED;
    throw Error(ErrorKind::HeaderParse, "unknown channel label '" + std::string(label) + "'");
}

float default_fill(Channel c) noexcept {
    return c == Channel::CT ? -1000.0f : 0.0f;
}

void GridGeometry::validate() const {
    for(int a = 0; a < 3; ++a){
        if(dims[a] < 2){
            throw Error(ErrorKind::InvalidArgument, "grid dims must all be >= 2");
        }
        if(!(spacing[a] > 0.0) || !std::isfinite(spacing[a])){
            throw Error(ErrorKind::InvalidArgument, "grid spacing must be finite and > 0");
        }
        if(!std::isfinite(origin[a])){
            throw Error(ErrorKind::InvalidArgument, "grid origin must be finite");
        }
    }
}

VoxelGrid::VoxelGrid(GridGeometry geometry) : geometry_(geometry) {
    geometry_.validate();
}

std::vector<Channel> VoxelGrid::labels() const {
    std::vector<Channel> out;
    for(const auto &c : channels_) out.push_back(c.label);
    return out;
}

bool VoxelGrid::has(Channel c) const noexcept {
    return std::any_of(channels_.begin(), channels_.end(), [c](const ChannelData &d){ return d.label == c; });
}

const VoxelGrid::ChannelData &VoxelGrid::find(Channel c) const {
    for(const auto &d : channels_){
        if(d.label == c) return d;
    }
    throw Error(ErrorKind::MissingChannel, "grid has no " + std::string(channel_name(c)) + " channel");
}

std::span<const float> VoxelGrid::values(Channel c) const {
    return *find(c).values;
}

float VoxelGrid::fill(Channel c) const {
    return find(c).fill;
}

void VoxelGrid::set_channel(Channel c, std::vector<float> values, std::optional<float> fill) {
    if(values.size() != geometry_.voxel_count()){
        throw Error(ErrorKind::SizeMismatch, "channel " + std::string(channel_name(c)) + " has " +
                    std::to_string(values.size()) + " samples, expected " +
                    std::to_string(geometry_.voxel_count()));
    }
    auto data = std::make_shared<const std::vector<float>>(std::move(values));
    for(auto &d : channels_){
        if(d.label == c){
            d.values = std::move(data);
            if(fill) d.fill = *fill;
            return;
        }
    }
    channels_.push_back({c, fill.value_or(default_fill(c)), std::move(data)});
}

void VoxelGrid::set_fill(Channel c, float fill) {
    for(auto &d : channels_){
        if(d.label == c){
            d.fill = fill;
            return;
        }
    }
    throw Error(ErrorKind::MissingChannel, "grid has no " + std::string(channel_name(c)) + " channel");
}

// ---------------------------------------------------------------------------------------------
// File formats.

namespace {

std::vector<float> read_raw_floats(const fs::path &path, std::size_t expected) {
    std::ifstream in(path, std::ios::binary);
    if(!in){
        throw Error(ErrorKind::MissingFile, "cannot open payload " + path.string());
    }
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    if(bytes != expected * sizeof(float)){
        throw Error(ErrorKind::SizeMismatch, path.string() + " holds " + std::to_string(bytes) +
                    " bytes, expected " + std::to_string(expected * sizeof(float)));
    }
    std::vector<float> out(expected);
    in.read(reinterpret_cast<char *>(out.data()), static_cast<std::streamsize>(bytes));
    if(!in){
        throw Error(ErrorKind::IoFailure, "short read from " + path.string());
    }
    if constexpr(std::endian::native == std::endian::big){
        for(auto &f : out){
            auto u = std::bit_cast<std::uint32_t>(f);
            u = __builtin_bswap32(u);
            f = std::bit_cast<float>(u);
        }
    }
    return out;
}

void write_raw_floats(const fs::path &path, std::span<const float> values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if(!out){
        throw Error(ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
    }
    if constexpr(std::endian::native == std::endian::big){
        std::vector<float> swapped(values.begin(), values.end());
        for(auto &f : swapped){
            f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
        }
        out.write(reinterpret_cast<const char *>(swapped.data()),
                  static_cast<std::streamsize>(swapped.size() * sizeof(float)));
    }else{
        out.write(reinterpret_cast<const char *>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(float)));
    }
    out.flush();
    if(!out){
        throw Error(ErrorKind::IoFailure, "failed writing " + path.string());
    }
}

template <class T>
T header_field(const json &j, const char *key) {
    try{
        return j.at(key).get<T>();
    }catch(const json::exception &e){
        throw Error(ErrorKind::HeaderParse, std::string("field '") + key + "': " + e.what());
    }
}

} // namespace

VoxelGrid load_volume(const fs::path &path) {
    std::ifstream in(path);
    if(!in){
        throw Error(ErrorKind::MissingFile, "cannot open " + path.string());
    }
    json header;
    try{
        header = json::parse(in);
    }catch(const json::exception &e){
        throw Error(ErrorKind::HeaderParse, path.string() + ": " + e.what());
    }
    if(!header.is_object()){
        throw Error(ErrorKind::HeaderParse, path.string() + ": header is not a JSON object");
    }

    GridGeometry g;
    const auto dims = header_field<std::array<int, 3>>(header, "dims");
    const auto spacing = header_field<std::array<double, 3>>(header, "spacing_mm");
    const auto origin = header_field<std::array<double, 3>>(header, "origin_mm");
    g.dims = dims;
    g.spacing = Vec3(spacing[0], spacing[1], spacing[2]);
    g.origin = Vec3(origin[0], origin[1], origin[2]);
    try{
        g.validate();
    }catch(const Error &e){
        throw Error(ErrorKind::HeaderParse, path.string() + ": " + e.what());
    }

    VoxelGrid grid(g);
    const auto channels = header_field<json>(header, "channels");
    if(!channels.is_array() || channels.empty()){
        throw Error(ErrorKind::HeaderParse, path.string() + ": 'channels' must be a nonempty array");
    }
    for(const auto &entry : channels){
        const auto label = parse_channel(header_field<std::string>(entry, "label"));
        const auto file = header_field<std::string>(entry, "file");
        auto values = read_raw_floats(path.parent_path() / file, g.voxel_count());
        std::optional<float> fill;
        if(entry.contains("fill")) fill = header_field<float>(entry, "fill");
        grid.set_channel(label, std::move(values), fill);
    }
    return grid;
}

void save_volume(const VoxelGrid &grid, const fs::path &path) {
    const auto &g = grid.geometry();
    json header;
    header["dims"] = g.dims;
    header["spacing_mm"] = {g.spacing[0], g.spacing[1], g.spacing[2]};
    header["origin_mm"] = {g.origin[0], g.origin[1], g.origin[2]};
    header["channels"] = json::array();

    const std::string stem = path.stem().string();
    for(const auto &c : grid.channels()){
        const std::string file = stem + "_" + std::string(channel_name(c.label)) + ".raw";
        write_raw_floats(path.parent_path() / file, *c.values);
        header["channels"].push_back({{"label", channel_name(c.label)}, {"file", file}, {"fill", c.fill}});
    }

    // Header last so a readable header always has complete payloads next to it.
    std::ofstream out(path, std::ios::trunc);
    if(!out){
        throw Error(ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
    }
    out << header.dump(2) << '\n';
    out.flush();
    if(!out){
        throw Error(ErrorKind::IoFailure, "failed writing " + path.string());
    }
}

VoxelGrid load_nrrd(const fs::path &path, Channel label) {
    std::ifstream in(path);
    if(!in){
        throw Error(ErrorKind::MissingFile, "cannot open " + path.string());
    }
    std::string line;
    if(!std::getline(in, line) || line.rfind("NRRD", 0) != 0){
        throw Error(ErrorKind::HeaderParse, path.string() + ": missing NRRD magic");
    }
    std::map<std::string, std::string> fields;
    while(std::getline(in, line)){
        if(!line.empty() && line.back() == '\r') line.pop_back();
        if(line.empty()) break;
        if(line[0] == '#') continue;
        const auto colon = line.find(':');
        if(colon == std::string::npos) continue; // key:=value pairs are not fields
        if(colon + 1 < line.size() && line[colon + 1] == '=') continue;
        std::string key = line.substr(0, colon);
        std::string value = line.substr(colon + 1);
        value.erase(0, value.find_first_not_of(' '));
        fields[key] = value;
    }
    auto require = [&](const std::string &key) -> const std::string & {
        auto it = fields.find(key);
        if(it == fields.end()){
            throw Error(ErrorKind::HeaderParse, path.string() + ": missing NRRD field '" + key + "'");
        }
        return it->second;
    };

    const auto &type = require("type");
    if(type != "float" && type != "single"){
        throw Error(ErrorKind::HeaderParse, "unsupported NRRD type '" + type + "'");
    }
    if(require("dimension") != "3"){
        throw Error(ErrorKind::HeaderParse, "only 3-dimensional NRRD volumes are supported");
    }
    if(require("encoding") != "raw"){
        throw Error(ErrorKind::HeaderParse, "only raw NRRD encoding is supported");
    }
    if(auto it = fields.find("endian"); it != fields.end() && it->second != "little"){
        throw Error(ErrorKind::HeaderParse, "only little-endian NRRD payloads are supported");
    }

    GridGeometry g;
    {
        std::istringstream ss(require("sizes"));
        for(auto &d : g.dims){
            if(!(ss >> d)) throw Error(ErrorKind::HeaderParse, "malformed NRRD sizes");
        }
    }
    if(auto it = fields.find("spacings"); it != fields.end()){
        std::istringstream ss(it->second);
        for(int a = 0; a < 3; ++a){
            if(!(ss >> g.spacing[a])) throw Error(ErrorKind::HeaderParse, "malformed NRRD spacings");
        }
    }else if(auto it2 = fields.find("space directions"); it2 != fields.end()){
        // Axis-aligned directions only: "(sx,0,0) (0,sy,0) (0,0,sz)".
        std::string s = it2->second;
        for(auto &ch : s){
            if(ch == '(' || ch == ')' || ch == ',') ch = ' ';
        }
        std::istringstream ss(s);
        double m[9];
        for(double &v : m){
            if(!(ss >> v)) throw Error(ErrorKind::HeaderParse, "malformed NRRD space directions");
        }
        for(int a = 0; a < 3; ++a){
            for(int b = 0; b < 3; ++b){
                if(a != b && m[3 * a + b] != 0.0){
                    throw Error(ErrorKind::HeaderParse, "oblique NRRD space directions are not supported");
                }
            }
            g.spacing[a] = m[4 * a];
        }
    }
    if(auto it = fields.find("space origin"); it != fields.end()){
        std::string s = it->second;
        for(auto &ch : s){
            if(ch == '(' || ch == ')' || ch == ',') ch = ' ';
        }
        std::istringstream ss(s);
        Vec3 corner_center;
        for(int a = 0; a < 3; ++a){
            if(!(ss >> corner_center[a])) throw Error(ErrorKind::HeaderParse, "malformed NRRD space origin");
        }
        // NRRD origins locate the first sample center; ours locate the corner of voxel 0.
        g.origin = corner_center - 0.5 * g.spacing;
    }
    try{
        g.validate();
    }catch(const Error &e){
        throw Error(ErrorKind::HeaderParse, path.string() + ": " + e.what());
    }

    fs::path data_file;
    if(auto it = fields.find("data file"); it != fields.end()){
        data_file = path.parent_path() / it->second;
    }else if(auto it2 = fields.find("datafile"); it2 != fields.end()){
        data_file = path.parent_path() / it2->second;
    }else{
        throw Error(ErrorKind::HeaderParse, "only detached-header NRRD is supported");
    }

    VoxelGrid grid(g);
    grid.set_channel(label, read_raw_floats(data_file, g.voxel_count()));
    return grid;
}

// ---------------------------------------------------------------------------------------------
// Sampling and derived images.

namespace detail {

std::optional<TrilinearStencil> make_stencil(const GridGeometry &g, const Vec3 &v) {
    constexpr double edge_tol = 1e-6;
    TrilinearStencil s;
    std::array<int, 3> i0{};
    std::array<double, 3> f{};
    for(int a = 0; a < 3; ++a){
        const double hi = g.dims[a] - 1;
        if(!(v[a] >= -edge_tol && v[a] <= hi + edge_tol)) return std::nullopt;
        const double c = std::clamp(v[a], 0.0, hi);
        int i = static_cast<int>(std::floor(c));
        if(i > g.dims[a] - 2) i = g.dims[a] - 2;
        double frac = c - i;
        // Snap values numerically at a voxel center so identity resampling is exact.
        if(frac < 1e-9) frac = 0.0;
        if(frac > 1.0 - 1e-9) frac = 1.0;
        i0[a] = i;
        f[a] = frac;
    }
    s.stride = {1, static_cast<std::size_t>(g.dims[0]),
                static_cast<std::size_t>(g.dims[0]) * static_cast<std::size_t>(g.dims[1])};
    s.base = g.index(i0[0], i0[1], i0[2]);
    s.fx = f[0];
    s.fy = f[1];
    s.fz = f[2];
    return s;
}

double apply_stencil(const TrilinearStencil &s, std::span<const float> d) {
    const std::size_t b = s.base;
    const std::size_t sx = s.stride[0], sy = s.stride[1], sz = s.stride[2];
    const double gx = 1.0 - s.fx, gy = 1.0 - s.fy, gz = 1.0 - s.fz;
    const double c00 = d[b] * gx + d[b + sx] * s.fx;
    const double c10 = d[b + sy] * gx + d[b + sy + sx] * s.fx;
    const double c01 = d[b + sz] * gx + d[b + sz + sx] * s.fx;
    const double c11 = d[b + sz + sy] * gx + d[b + sz + sy + sx] * s.fx;
    const double c0 = c00 * gy + c10 * s.fy;
    const double c1 = c01 * gy + c11 * s.fy;
    return c0 * gz + c1 * s.fz;
}

} // namespace detail

float trilinear_sample(const VoxelGrid &grid, Channel c, const Vec3 &p) {
    const auto data = grid.values(c);
    const auto stencil = detail::make_stencil(grid.geometry(), grid.geometry().world_to_voxel(p));
    if(!stencil) return grid.fill(c);
    return static_cast<float>(detail::apply_stencil(*stencil, data));
}

VoxelGrid preprocess_pet(const VoxelGrid &grid, double epsilon) {
    if(!(epsilon > 0.0)){
        throw Error(ErrorKind::InvalidArgument, "epsilon must be > 0");
    }
    const auto pet = grid.values(Channel::PET);
    const auto &g = grid.geometry();
    const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];

    double peak = 0.0;
    for(float v : pet) peak = std::max(peak, static_cast<double>(v));
    // Relative clamp keeps the output invariant to a global PET scale factor.
    const double floor_value = peak > 0.0 ? epsilon * peak : epsilon;

    std::vector<double> logv(pet.size());
    for(std::size_t i = 0; i < pet.size(); ++i){
        logv[i] = std::log(std::max(std::max(static_cast<double>(pet[i]), 0.0), floor_value));
    }

    auto diff = [&](int i, int n, std::size_t idx, std::size_t stride, double h) {
        if(i == 0) return (logv[idx + stride] - logv[idx]) / h;
        if(i == n - 1) return (logv[idx] - logv[idx - stride]) / h;
        return (logv[idx + stride] - logv[idx - stride]) / (2.0 * h);
    };

    std::vector<float> out(pet.size());
    const std::size_t sy = static_cast<std::size_t>(nx);
    const std::size_t sz = static_cast<std::size_t>(nx) * ny;
    for(int k = 0; k < nz; ++k){
        for(int j = 0; j < ny; ++j){
            for(int i = 0; i < nx; ++i){
                const std::size_t idx = g.index(i, j, k);
                const double gx = diff(i, nx, idx, 1, g.spacing[0]);
                const double gy = diff(j, ny, idx, sy, g.spacing[1]);
                const double gz = diff(k, nz, idx, sz, g.spacing[2]);
                out[idx] = static_cast<float>(std::sqrt(gx * gx + gy * gy + gz * gz));
            }
        }
    }

    VoxelGrid result = grid;
    result.set_channel(Channel::PET_PREPROCESSED, std::move(out), 0.0f);
    return result;
}

SliceImage extract_slice(const VoxelGrid &grid, Channel c, int z_index, std::array<float, 2> window) {
    const auto &g = grid.geometry();
    const auto data = grid.values(c);
    if(z_index < 0 || z_index >= g.dims[2]){
        throw Error(ErrorKind::IndexOutOfRange, "slice " + std::to_string(z_index) + " outside [0, " +
                    std::to_string(g.dims[2]) + ")");
    }
    SliceImage s;
    s.index = z_index;
    s.width = g.dims[0];
    s.height = g.dims[1];
    s.window = window;
    const std::size_t plane = static_cast<std::size_t>(g.dims[0]) * g.dims[1];
    const auto first = data.begin() + static_cast<std::ptrdiff_t>(plane * z_index);
    s.values.assign(first, first + static_cast<std::ptrdiff_t>(plane));
    return s;
}

VoxelGrid residual_image(const VoxelGrid &a, const VoxelGrid &b, Channel c) {
    if(!(a.geometry() == b.geometry())){
        throw Error(ErrorKind::GridMismatch, "residual requires identical dims, spacing and origin");
    }
    const auto va = a.values(c);
    const auto vb = b.values(c);
    std::vector<float> out(va.size());
    for(std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[i];
    VoxelGrid r(a.geometry());
    r.set_channel(c, std::move(out), 0.0f);
    return r;
}

VoxelGrid downsample(const VoxelGrid &grid, std::array<int, 3> factors) {
    const auto &g = grid.geometry();
    GridGeometry out_g;
    for(int a = 0; a < 3; ++a){
        if(factors[a] < 1){
            throw Error(ErrorKind::InvalidArgument, "downsampling factors must be >= 1");
        }
        out_g.dims[a] = std::max(2, g.dims[a] / factors[a]);
        out_g.spacing[a] = g.spacing[a] * factors[a];
    }
    out_g.origin = g.origin;

    VoxelGrid out(out_g);
    for(const auto &c : grid.channels()){
        const auto &src = *c.values;
        std::vector<float> dst(out_g.voxel_count());
        for(int k = 0; k < out_g.dims[2]; ++k){
            for(int j = 0; j < out_g.dims[1]; ++j){
                for(int i = 0; i < out_g.dims[0]; ++i){
                    double sum = 0.0;
                    int count = 0;
                    for(int dk = 0; dk < factors[2]; ++dk){
                        const int sk = k * factors[2] + dk;
                        if(sk >= g.dims[2]) continue;
                        for(int dj = 0; dj < factors[1]; ++dj){
                            const int sj = j * factors[1] + dj;
                            if(sj >= g.dims[1]) continue;
                            for(int di = 0; di < factors[0]; ++di){
                                const int si = i * factors[0] + di;
                                if(si >= g.dims[0]) continue;
                                sum += src[g.index(si, sj, sk)];
                                ++count;
                            }
                        }
                    }
                    dst[out_g.index(i, j, k)] = static_cast<float>(sum / std::max(count, 1));
                }
            }
        }
        out.set_channel(c.label, std::move(dst), c.fill);
    }
    return out;
}

} // namespace curvereg
