#include "curvereg/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "curvereg/error.hpp"

namespace curvereg {

std::vector<double> gaussian_kernel(double sigma_vox) {
    if(!(sigma_vox > 0.0)){
        throw Error(ErrorKind::InvalidArgument, "Gaussian sigma must be > 0");
    }
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for(int i = -radius; i <= radius; ++i){
        const double w = std::exp(-0.5 * (i * i) / (sigma_vox * sigma_vox));
        k[static_cast<std::size_t>(i + radius)] = w;
        sum += w;
    }
    for(auto &w : k) w /= sum;
    return k;
}

namespace {

// One 1D convolution pass along `axis` with clamped (edge-replicated) indices. Lines along y and z
// are processed a whole row or plane at a time so the inner loop runs over contiguous memory.
void convolve_axis(const std::vector<double> &in, std::vector<double> &out, const std::array<int, 3> &dims,
                   int axis, const std::vector<double> &kernel) {
    const int radius = static_cast<int>(kernel.size() / 2);
    const int n = dims[axis];
    if(axis == 0){
        std::vector<double> line(static_cast<std::size_t>(n + 2 * radius));
        for(std::size_t start = 0; start < in.size(); start += static_cast<std::size_t>(n)){
            for(int i = -radius; i < n + radius; ++i){
                line[static_cast<std::size_t>(i + radius)] = in[start + static_cast<std::size_t>(std::clamp(i, 0, n - 1))];
            }
            for(int i = 0; i < n; ++i){
                double acc = 0.0;
                const double *src = &line[static_cast<std::size_t>(i)];
                for(std::size_t t = 0; t < kernel.size(); ++t) acc += kernel[t] * src[t];
                out[start + static_cast<std::size_t>(i)] = acc;
            }
        }
        return;
    }
    const std::size_t inner = axis == 1 ? static_cast<std::size_t>(dims[0])
                                        : static_cast<std::size_t>(dims[0]) * dims[1];
    const std::size_t block = inner * static_cast<std::size_t>(n);
    for(std::size_t base = 0; base < in.size(); base += block){
        for(int i = 0; i < n; ++i){
            double *dst = &out[base + inner * static_cast<std::size_t>(i)];
            std::fill(dst, dst + inner, 0.0);
            for(int t = -radius; t <= radius; ++t){
                const double w = kernel[static_cast<std::size_t>(t + radius)];
                const double *src = &in[base + inner * static_cast<std::size_t>(std::clamp(i + t, 0, n - 1))];
                for(std::size_t x = 0; x < inner; ++x) dst[x] += w * src[x];
            }
        }
    }
}

} // namespace

std::vector<double> gaussian_smooth(std::span<const float> values, const std::array<int, 3> &dims,
                                    const std::array<double, 3> &sigma_vox) {
    std::vector<double> a(values.begin(), values.end());
    std::vector<double> b(a.size());
    for(int axis = 0; axis < 3; ++axis){
        convolve_axis(a, b, dims, axis, gaussian_kernel(sigma_vox[static_cast<std::size_t>(axis)]));
        std::swap(a, b);
    }
    return a;
}

FeatureMap extract_features(const VoxelGrid &grid, const FeatureConfig &cfg) {
    const auto &g = grid.geometry();
    if(cfg.channels.empty() || grid.channels().empty() || g.voxel_count() == 0){
        throw Error(ErrorKind::EmptyGrid, "no channels to extract features from");
    }
    if(cfg.scales_mm.empty()){
        throw Error(ErrorKind::InvalidArgument, "feature extraction needs at least one scale");
    }
    if(cfg.cell_mm < g.spacing.maxCoeff()){
        throw Error(ErrorKind::InvalidArgument, "cell_mm must be >= the largest voxel spacing");
    }
    for(Channel c : cfg.channels) (void)grid.values(c); // MissingChannel before any work

    FeatureMap f;
    std::array<int, 3> cell{};
    for(int a = 0; a < 3; ++a){
        cell[a] = std::max(1, static_cast<int>(std::lround(cfg.cell_mm / g.spacing[a])));
        f.dims[a] = (g.dims[a] + cell[a] - 1) / cell[a];
        f.stride_mm[a] = cell[a] * g.spacing[a];
    }
    f.origin_mm = g.origin;

    const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
    const std::size_t n_cells = static_cast<std::size_t>(f.dims[0]) * f.dims[1] * f.dims[2];
    const auto n_cols = static_cast<Eigen::Index>(cfg.channels.size() * cfg.scales_mm.size() * kDescriptorsPerScale);
    f.data = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_cells), n_cols);

    std::vector<std::size_t> cell_of(g.voxel_count());
    std::vector<double> count(n_cells, 0.0);
    for(int k = 0; k < nz; ++k){
        for(int j = 0; j < ny; ++j){
            for(int i = 0; i < nx; ++i){
                const std::size_t c = static_cast<std::size_t>(i / cell[0]) +
                                      static_cast<std::size_t>(f.dims[0]) *
                                      (static_cast<std::size_t>(j / cell[1]) +
                                       static_cast<std::size_t>(f.dims[1]) * static_cast<std::size_t>(k / cell[2]));
                cell_of[g.index(i, j, k)] = c;
                count[c] += 1.0;
            }
        }
    }

    const std::size_t sy = static_cast<std::size_t>(nx);
    const std::size_t sz = static_cast<std::size_t>(nx) * ny;
    std::vector<double> sum(n_cells), gx(n_cells), gy(n_cells), gz(n_cells), sq(n_cells);

    Eigen::Index col = 0;
    for(Channel ch : cfg.channels){
        const auto values = grid.values(ch);
        for(double sigma_mm : cfg.scales_mm){
            const std::array<double, 3> sigma{sigma_mm / g.spacing[0], sigma_mm / g.spacing[1], sigma_mm / g.spacing[2]};
            const auto s = gaussian_smooth(values, g.dims, sigma);

            std::fill(sum.begin(), sum.end(), 0.0);
            std::fill(gx.begin(), gx.end(), 0.0);
            std::fill(gy.begin(), gy.end(), 0.0);
            std::fill(gz.begin(), gz.end(), 0.0);
            std::fill(sq.begin(), sq.end(), 0.0);

            auto diff = [&](int i, int n, std::size_t idx, std::size_t stride, double h) {
                if(i == 0) return (s[idx + stride] - s[idx]) / h;
                if(i == n - 1) return (s[idx] - s[idx - stride]) / h;
                return (s[idx + stride] - s[idx - stride]) / (2.0 * h);
            };
            for(int k = 0; k < nz; ++k){
                for(int j = 0; j < ny; ++j){
                    for(int i = 0; i < nx; ++i){
                        const std::size_t idx = g.index(i, j, k);
                        const std::size_t c = cell_of[idx];
                        sum[c] += s[idx];
                        gx[c] += diff(i, nx, idx, 1, g.spacing[0]);
                        gy[c] += diff(j, ny, idx, sy, g.spacing[1]);
                        gz[c] += diff(k, nz, idx, sz, g.spacing[2]);
                    }
                }
            }
            for(std::size_t c = 0; c < n_cells; ++c) sum[c] /= count[c];
            for(std::size_t idx = 0; idx < s.size(); ++idx){
                const double d = s[idx] - sum[cell_of[idx]];
                sq[cell_of[idx]] += d * d;
            }
            for(std::size_t c = 0; c < n_cells; ++c){
                const auto r = static_cast<Eigen::Index>(c);
                f.data(r, col + 0) = sum[c];
                f.data(r, col + 1) = std::sqrt(sq[c] / count[c]);
                f.data(r, col + 2) = gx[c] / count[c];
                f.data(r, col + 3) = gy[c] / count[c];
                f.data(r, col + 4) = gz[c] / count[c];
            }
            col += kDescriptorsPerScale;
        }
    }
    return f;
}

namespace {

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd &m) {
    Eigen::MatrixXd out = m;
    for(Eigen::Index r = 0; r < out.rows(); ++r){
        const double norm = out.row(r).norm();
        if(norm > 0.0) out.row(r) /= norm;
    }
    return out;
}

Eigen::MatrixXd center_columns(const Eigen::MatrixXd &m) {
    return m.rowwise() - m.colwise().mean();
}

} // namespace

Eigen::MatrixXd similarity_matrix(const FeatureMap &src, const FeatureMap &tgt) {
    if(src.channels() != tgt.channels()){
        throw Error(ErrorKind::ChannelMismatch, "feature maps have different channel counts");
    }
    return normalize_rows(src.data) * normalize_rows(tgt.data).transpose();
}

Eigen::VectorXd colocated_cosine(const Eigen::MatrixXd &a, const Eigen::MatrixXd &b) {
    if(a.cols() != b.cols()){
        throw Error(ErrorKind::ChannelMismatch, "feature maps have different channel counts");
    }
    if(a.rows() != b.rows()){
        throw Error(ErrorKind::LocationMismatch, "feature maps have different location counts");
    }
    Eigen::VectorXd out(a.rows());
    for(Eigen::Index r = 0; r < a.rows(); ++r){
        const double na = a.row(r).norm();
        const double nb = b.row(r).norm();
        out(r) = (na > 0.0 && nb > 0.0) ? a.row(r).dot(b.row(r)) / (na * nb) : 0.0;
    }
    return out;
}

double lcka(const Eigen::MatrixXd &a, const Eigen::MatrixXd &b) {
    if(a.rows() != b.rows()){
        throw Error(ErrorKind::LocationMismatch, "LCKA needs equal location counts (" + std::to_string(a.rows()) +
                    " vs " + std::to_string(b.rows()) + ")");
    }
    if(a.rows() < 2){
        throw Error(ErrorKind::InvalidArgument, "LCKA needs at least 2 locations");
    }
    const Eigen::MatrixXd x = center_columns(a);
    const Eigen::MatrixXd y = center_columns(b);
    const double xx = (x.transpose() * x).norm();
    const double yy = (y.transpose() * y).norm();
    if(xx == 0.0 || yy == 0.0) return 0.0;
    const double xy = (x.transpose() * y).squaredNorm();
    return std::clamp(xy / (xx * yy), 0.0, 1.0);
}

double lcka(const FeatureMap &a, const FeatureMap &b) {
    return lcka(a.data, b.data);
}

void save_feature_map(const FeatureMap &f, const std::filesystem::path &path) {
    const std::string file = path.stem().string() + "_features.raw";
    {
        std::ofstream out(path.parent_path() / file, std::ios::binary | std::ios::trunc);
        if(!out) throw Error(ErrorKind::IoFailure, "cannot write " + file);
        std::vector<float> row_major(static_cast<std::size_t>(f.data.size()));
        for(Eigen::Index r = 0; r < f.data.rows(); ++r){
            for(Eigen::Index c = 0; c < f.data.cols(); ++c){
                row_major[static_cast<std::size_t>(r * f.data.cols() + c)] = static_cast<float>(f.data(r, c));
            }
        }
        out.write(reinterpret_cast<const char *>(row_major.data()),
                  static_cast<std::streamsize>(row_major.size() * sizeof(float)));
        if(!out) throw Error(ErrorKind::IoFailure, "failed writing " + file);
    }
    nlohmann::json header;
    header["kind"] = "feature_map";
    header["dims"] = f.dims;
    header["stride_mm"] = {f.stride_mm[0], f.stride_mm[1], f.stride_mm[2]};
    header["origin_mm"] = {f.origin_mm[0], f.origin_mm[1], f.origin_mm[2]};
    header["rows"] = f.locations();
    header["channels"] = f.channels();
    header["file"] = file;
    std::ofstream out(path, std::ios::trunc);
    if(!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    out << header.dump(2) << '\n';
    if(!out) throw Error(ErrorKind::IoFailure, "failed writing " + path.string());
}

} // namespace curvereg
