#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace curvereg {

using Vec3 = Eigen::Vector3d;

enum class Channel { CT, PET, PET_PREPROCESSED };

std::string_view channel_name(Channel c) noexcept;
Channel parse_channel(std::string_view label); // throws HeaderParse on unknown labels

// Background value used when sampling outside the grid: air for CT, no activity for PET.
float default_fill(Channel c) noexcept;

// Voxel-center convention: world(v) = origin + (v + 0.5) * spacing, all in mm.
struct GridGeometry {
    std::array<int, 3> dims{2, 2, 2};
    Vec3 spacing = Vec3::Ones();
    Vec3 origin = Vec3::Zero();

    std::size_t voxel_count() const noexcept {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int i, int j, int k) const noexcept {
        return static_cast<std::size_t>(i) + static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k);
    }
    Vec3 voxel_to_world(const Vec3 &v) const {
        return origin + (v.array() + 0.5).matrix().cwiseProduct(spacing);
    }
    Vec3 world_to_voxel(const Vec3 &p) const {
        return ((p - origin).cwiseQuotient(spacing).array() - 0.5).matrix();
    }
    Vec3 center(int i, int j, int k) const { return voxel_to_world(Vec3(i, j, k)); }

    // Hull of voxel centers, the region where trilinear sampling is defined.
    Vec3 hull_min() const { return center(0, 0, 0); }
    Vec3 hull_max() const { return center(dims[0] - 1, dims[1] - 1, dims[2] - 1); }
    Vec3 hull_center() const { return 0.5 * (hull_min() + hull_max()); }

    void validate() const; // throws InvalidArgument

    bool operator==(const GridGeometry &o) const {
        return dims == o.dims && spacing == o.spacing && origin == o.origin;
    }
};

// Dual-channel scan volume. Channel buffers are shared and never mutated after insertion,
// so copies are cheap and concurrent reads are safe.
class VoxelGrid {
public:
    struct ChannelData {
        Channel label;
        float fill;
        std::shared_ptr<const std::vector<float>> values;
    };

    VoxelGrid() = default;
    explicit VoxelGrid(GridGeometry geometry);

    const GridGeometry &geometry() const noexcept { return geometry_; }
    const std::vector<ChannelData> &channels() const noexcept { return channels_; }
    std::vector<Channel> labels() const;

    bool has(Channel c) const noexcept;
    std::span<const float> values(Channel c) const; // throws MissingChannel
    float fill(Channel c) const;                    // throws MissingChannel

    // Adds or replaces a channel; values.size() must equal voxel_count().
    void set_channel(Channel c, std::vector<float> values, std::optional<float> fill = std::nullopt);
    void set_fill(Channel c, float fill);

    float at(Channel c, int i, int j, int k) const { return values(c)[geometry_.index(i, j, k)]; }

private:
    const ChannelData &find(Channel c) const;

    GridGeometry geometry_;
    std::vector<ChannelData> channels_;
};

struct SliceImage {
    int index = 0; // z slice
    int width = 0;
    int height = 0;
    std::vector<float> values; // x-fastest
    std::array<float, 2> window{0.0f, 1.0f};
};

// `.vmeta` JSON header plus one little-endian float32 `.raw` payload per channel.
VoxelGrid load_volume(const std::filesystem::path &path);
void save_volume(const VoxelGrid &grid, const std::filesystem::path &path);

// Detached-header NRRD (`.nhdr`), restricted to 3D little-endian raw float data.
VoxelGrid load_nrrd(const std::filesystem::path &path, Channel label);

// Adds PET_PREPROCESSED = |grad log(max(PET, eps * max(PET, 0)))| in mm^-1.
VoxelGrid preprocess_pet(const VoxelGrid &grid, double epsilon = 1e-3);

float trilinear_sample(const VoxelGrid &grid, Channel c, const Vec3 &p);

SliceImage extract_slice(const VoxelGrid &grid, Channel c, int z_index, std::array<float, 2> window);

VoxelGrid residual_image(const VoxelGrid &a, const VoxelGrid &b, Channel c);

// Block-average downsampling by integer factors per axis (used for working-resolution copies).
VoxelGrid downsample(const VoxelGrid &grid, std::array<int, 3> factors);

namespace detail {

// Trilinear interpolation at a continuous voxel index; nullopt when outside the center hull.
struct TrilinearStencil {
    std::size_t base = 0;
    std::array<std::size_t, 3> stride{};
    double fx = 0, fy = 0, fz = 0;
};
std::optional<TrilinearStencil> make_stencil(const GridGeometry &g, const Vec3 &v);
double apply_stencil(const TrilinearStencil &s, std::span<const float> data);

} // namespace detail

} // namespace curvereg
