#include "curvereg/render.hpp"

#include <algorithm>
#include <cmath>

#include <png.h>

#include "curvereg/error.hpp"

namespace curvereg {

std::uint8_t window_u8(float v, std::array<float, 2> window) noexcept {
    const float lo = window[0], hi = window[1];
    if(!(hi > lo)) return v >= hi ? 255 : 0;
    const double t = std::clamp((static_cast<double>(v) - lo) / (static_cast<double>(hi) - lo), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(255.0 * t));
}

Raster gray_raster(const SliceImage &s) {
    Raster r{s.width, s.height, 1, std::vector<std::uint8_t>(s.values.size())};
    for(std::size_t i = 0; i < s.values.size(); ++i) r.pixels[i] = window_u8(s.values[i], s.window);
    return r;
}

std::array<std::uint8_t, 3> hot_color(double t) noexcept {
    t = std::clamp(t, 0.0, 1.0);
    auto ch = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
    return {ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)};
}

Raster overlay_raster(const SliceImage &ct, const SliceImage &pet, double alpha) {
    if(ct.width != pet.width || ct.height != pet.height){
        throw Error(ErrorKind::GridMismatch, "overlay slices differ in size");
    }
    if(!(alpha >= 0.0 && alpha <= 1.0)){
        throw Error(ErrorKind::InvalidArgument, "alpha must lie in [0, 1]");
    }
    Raster r{ct.width, ct.height, 3, std::vector<std::uint8_t>(ct.values.size() * 3)};
    for(std::size_t i = 0; i < ct.values.size(); ++i){
        const double gray = window_u8(ct.values[i], ct.window);
        const auto hot = hot_color(window_u8(pet.values[i], pet.window) / 255.0);
        for(int c = 0; c < 3; ++c){
            r.pixels[3 * i + static_cast<std::size_t>(c)] =
                static_cast<std::uint8_t>(std::lround((1.0 - alpha) * gray + alpha * hot[static_cast<std::size_t>(c)]));
        }
    }
    return r;
}

namespace {

void append_bytes(png_structp png, png_bytep data, png_size_t length) {
    auto *out = static_cast<std::string *>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char *>(data), length);
}

} // namespace

std::string encode_png(const Raster &r) {
    if(r.width <= 0 || r.height <= 0 || (r.channels != 1 && r.channels != 3) ||
       r.pixels.size() != static_cast<std::size_t>(r.width) * r.height * r.channels){
        throw Error(ErrorKind::InvalidArgument, "raster has inconsistent size");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if(!png) throw Error(ErrorKind::IoFailure, "cannot create PNG encoder");
    png_infop info = png_create_info_struct(png);
    if(!info){
        png_destroy_write_struct(&png, nullptr);
        throw Error(ErrorKind::IoFailure, "cannot create PNG encoder");
    }
    std::string out;
    std::vector<png_bytep> rows(static_cast<std::size_t>(r.height));
    if(setjmp(png_jmpbuf(png))){
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::IoFailure, "PNG encoding failed");
    }
    png_set_write_fn(png, &out, append_bytes, nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8,
                 r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
    for(int y = 0; y < r.height; ++y){
        rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(r.pixels.data() + stride * y);
    }
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::array<float, 2> default_window(const VoxelGrid &grid, Channel c) {
    if(c == Channel::CT) return {-1000.0f, 1000.0f};
    const auto v = grid.values(c);
    const float hi = v.empty() ? 1.0f : *std::max_element(v.begin(), v.end());
    return {0.0f, hi > 0.0f ? hi : 1.0f};
}

} // namespace curvereg
