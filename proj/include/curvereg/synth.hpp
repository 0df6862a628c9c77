#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "curvereg/keycurve.hpp"
#include "curvereg/volume.hpp"
#include "curvereg/warp.hpp"

namespace curvereg {

struct PhantomSpec {
    std::array<int, 3> dims{64, 64, 96};
    double spacing_mm = 3.5;
    std::uint64_t seed = 0;
    int n_structures = 8;         // CT ellipsoids inside the body
    int n_tubes = 0;              // 0 draws 2..4 from the seed
    std::array<double, 2> ct_range{-1000.0, 1000.0};
    std::array<double, 2> pet_range{0.0, 8.0};
    double perturbation = 0.0;    // cross-visit intensity jitter fraction in [0, 1)
    int annotation_stride = 4;    // annotate every n-th slice of each tube

    void validate() const;
};

struct Phantom {
    VoxelGrid grid;
    CurveSet curves;              // analytic tube centerlines
    std::vector<KeyPoint> points; // noiseless centerline clicks on slice centers
};

GridGeometry phantom_geometry(const PhantomSpec &spec);

// Phantoms are centered on the world origin so rotations act about the volume center.
Phantom make_phantom(const PhantomSpec &spec);

struct PhantomPair {
    VoxelGrid src;
    VoxelGrid tgt;
    Transform gt;
    std::vector<KeyPoint> src_points;
    std::vector<KeyPoint> tgt_points;
    CurveSet src_curves;
    CurveSet tgt_curves;
};

PhantomPair make_pair(const PhantomSpec &spec, const DeformationConfig &deform, double perturb);
PhantomPair make_pair(const PhantomSpec &spec, const Transform &gt, double perturb);

// Smooth multiplicative field 1 + amplitude * s(p) with |s| <= 1, low spatial frequency.
std::vector<float> intensity_jitter_field(const GridGeometry &g, double amplitude, std::uint64_t seed);

} // namespace curvereg
