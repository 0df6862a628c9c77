#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "curvereg/volume.hpp"

namespace curvereg {

using Mat3 = Eigen::Matrix3d;

struct Affine3 {
    Mat3 linear = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static Affine3 identity() { return {}; }

    Vec3 apply(const Vec3 &p) const { return linear * p + translation; }
    bool invertible() const;
    bool is_identity() const { return linear == Mat3::Identity() && translation == Vec3::Zero(); }
};

Vec3 affine_apply(const Affine3 &t, const Vec3 &p);
Affine3 affine_invert(const Affine3 &t);                    // throws SingularTransform
Affine3 affine_compose(const Affine3 &a, const Affine3 &b); // b first, then a

// 3D thin-plate spline with biharmonic kernel U(r) = r:
//   f(p) = affine_part(p) + sum_i weights[i] * |p - controls[i]|
// Weights satisfy sum w = 0 and sum w c^T = 0.
struct Tps3 {
    std::vector<Vec3> controls;
    Affine3 affine_part;
    std::vector<Vec3> weights;
    double lambda = 0.0;

    Vec3 apply(const Vec3 &p) const;
    // Jacobian d f / d p.
    Mat3 jacobian(const Vec3 &p) const;
    bool is_identity() const;
};

// lambda > 0 gives the smoothing spline: weights shrink toward zero and the map toward an affine.
Tps3 tps_fit(std::span<const Vec3> src_controls, std::span<const Vec3> dst_controls, double lambda = 0.0);
Vec3 tps_apply(const Tps3 &t, const Vec3 &p);

// Damped fixed-point inversion q <- q - damping * (f(q) - target).
struct InverseOptions {
    double damping = 0.5;
    double tolerance_mm = 1e-3;
    int max_iterations = 50;
};

Vec3 tps_invert_point(const Tps3 &t, const Vec3 &target, const InverseOptions &opts = {});

// Source-to-target map: the affine is applied first, then the optional TPS.
struct Transform {
    Affine3 affine;
    std::optional<Tps3> tps;

    Vec3 apply(const Vec3 &p) const {
        const Vec3 a = affine.apply(p);
        return tps ? tps->apply(a) : a;
    }
    Vec3 apply_inverse(const Vec3 &q, const InverseOptions &opts = {}) const;
    bool is_identity() const { return affine.is_identity() && (!tps || tps->is_identity()); }
};

// Backward warping: output(q) = sample(grid, t^-1(q)) for every voxel center q of out_geometry.
VoxelGrid warp_volume(const VoxelGrid &grid, const Affine3 &t, const GridGeometry &out_geometry);
VoxelGrid warp_volume(const VoxelGrid &grid, const Tps3 &t, const GridGeometry &out_geometry,
                      const InverseOptions &opts = {});
VoxelGrid warp_volume(const VoxelGrid &grid, const Transform &t, const GridGeometry &out_geometry,
                      const InverseOptions &opts = {});

// Inverse-mapped positions (world mm) for every voxel center of out_geometry, x-fastest.
std::vector<Vec3> inverse_positions(const Transform &t, const GridGeometry &out_geometry,
                                    const InverseOptions &opts = {});

// Samples every channel of grid at the given world positions.
VoxelGrid resample_at(const VoxelGrid &grid, std::span<const Vec3> positions, const GridGeometry &out_geometry);

struct DeformationConfig {
    double max_rotation_deg = 10.0;
    double max_translation_mm = 15.0;
    double max_log_scale = 0.1;
    double max_shear = 0.05;
    std::array<int, 3> tps_grid{4, 4, 4};
    double max_tps_jitter_mm = 8.0;
    std::uint64_t seed = 0;

    static DeformationConfig none() {
        DeformationConfig c;
        c.max_rotation_deg = c.max_translation_mm = c.max_log_scale = c.max_shear = c.max_tps_jitter_mm = 0.0;
        return c;
    }
    void validate() const;
};

struct Box3 {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Ones();
    Vec3 center() const { return 0.5 * (lo + hi); }
};

struct SyntheticTransform {
    Affine3 affine;
    Tps3 tps;

    // Drawn parameters. The affine is R * S * Sh about the box center, then translation.
    Vec3 rotation_axis = Vec3::UnitZ();
    double rotation_deg = 0.0;
    Vec3 log_scale = Vec3::Zero();
    Vec3 shear = Vec3::Zero(); // xy, xz, yz
    Vec3 translation = Vec3::Zero();

    Transform combined() const { return Transform{affine, tps}; }
};

SyntheticTransform random_transform(const DeformationConfig &cfg, const Box3 &extent);

// Regular control lattice spanning the box, x-fastest.
std::vector<Vec3> control_lattice(const Box3 &extent, std::array<int, 3> dims);

} // namespace curvereg
