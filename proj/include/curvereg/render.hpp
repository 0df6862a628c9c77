#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "curvereg/volume.hpp"

namespace curvereg {

// 8-bit raster, row-major with rows along y and columns along x; 1 (gray) or 3 (RGB) channels.
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;
};

// Linear window mapping: lo -> 0, hi -> 255, clamped.
std::uint8_t window_u8(float v, std::array<float, 2> window) noexcept;

Raster gray_raster(const SliceImage &s);

// "Hot" colormap for t in [0, 1]: black, red, yellow, white.
std::array<std::uint8_t, 3> hot_color(double t) noexcept;

// PET (hot colormap, windowed by pet.window) blended over grayscale CT at opacity alpha.
Raster overlay_raster(const SliceImage &ct, const SliceImage &pet, double alpha);

std::string encode_png(const Raster &r); // IoFailure on encoder errors

// Default display windows: CT [-1000, 1000]; PET [0, max of the channel].
std::array<float, 2> default_window(const VoxelGrid &grid, Channel c);

} // namespace curvereg
