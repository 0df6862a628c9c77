#include "curvereg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Geometry>

#include "curvereg/error.hpp"
#include "curvereg/random.hpp"

namespace curvereg {

void PhantomSpec::validate() const {
    if(dims[0] < 32 || dims[1] < 32 || dims[2] < 64){
        throw Error(ErrorKind::InvalidArgument, "phantom dims must be at least (32, 32, 64)");
    }
    if(!(spacing_mm > 0.0)){
        throw Error(ErrorKind::InvalidArgument, "phantom spacing must be > 0");
    }
    for(double v : {ct_range[0], ct_range[1], pet_range[0], pet_range[1]}){
        if(!std::isfinite(v)) throw Error(ErrorKind::InvalidArgument, "intensity ranges must be finite");
    }
    if(!(ct_range[1] > ct_range[0]) || !(pet_range[1] > pet_range[0])){
        throw Error(ErrorKind::InvalidArgument, "intensity ranges must be increasing");
    }
    if(!(perturbation >= 0.0 && perturbation < 1.0)){
        throw Error(ErrorKind::InvalidArgument, "perturbation must lie in [0, 1)");
    }
    if(n_tubes != 0 && (n_tubes < 2 || n_tubes > 4)){
        throw Error(ErrorKind::InvalidArgument, "n_tubes must be 0 (random) or in [2, 4]");
    }
    if(n_structures < 0 || annotation_stride < 1){
        throw Error(ErrorKind::InvalidArgument, "invalid structure count or annotation stride");
    }
}

namespace {

struct Ellipsoid {
    Vec3 center;
    Vec3 semi_axes;
    Mat3 rotation; // world -> local
    double value;
};

struct Tube {
    QuadCoeffs cx, cy;
    double z0, z1;      // annotated span
    double radius;      // Gaussian cross-section sigma, mm
    double amplitude;
};

// Smooth inside indicator with ~1.5 mm transition width.
double soft_inside(const Ellipsoid &e, const Vec3 &p) {
    const Vec3 local = e.rotation * (p - e.center);
    const double rho = local.cwiseQuotient(e.semi_axes).norm();
    const double d = (rho - 1.0) * e.semi_axes.minCoeff();
    return 1.0 / (1.0 + std::exp(std::clamp(d / 1.5, -40.0, 40.0)));
}

double quad(const QuadCoeffs &a, double z) {
    return (a[0] * z + a[1]) * z + a[2];
}

Mat3 rotation_zx(double yaw, double tilt) {
    const Mat3 rz = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
    const Mat3 rx = Eigen::AngleAxisd(tilt, Vec3::UnitX()).toRotationMatrix();
    return rx * rz;
}

} // namespace

GridGeometry phantom_geometry(const PhantomSpec &spec) {
    GridGeometry g;
    g.dims = spec.dims;
    g.spacing = Vec3::Constant(spec.spacing_mm);
    g.origin = -0.5 * Vec3(g.dims[0] * spec.spacing_mm, g.dims[1] * spec.spacing_mm, g.dims[2] * spec.spacing_mm);
    return g;
}

Phantom make_phantom(const PhantomSpec &spec) {
    spec.validate();
    Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + 0x1234567ULL);

    const GridGeometry g = phantom_geometry(spec);
    const Vec3 extent(g.dims[0] * spec.spacing_mm, g.dims[1] * spec.spacing_mm, g.dims[2] * spec.spacing_mm);

    const double air = spec.ct_range[0];
    const double ct_span = spec.ct_range[1] - spec.ct_range[0];
    const double tissue = air + 0.52 * ct_span;
    const double pet_lo = spec.pet_range[0];
    const double pet_span = spec.pet_range[1] - spec.pet_range[0];

    Ellipsoid body{Vec3::Zero(), Vec3(0.40 * extent.x(), 0.34 * extent.y(), 0.46 * extent.z()), Mat3::Identity(), tissue};

    std::vector<Ellipsoid> structures;
    // Spine-like column along z at the back of the body.
    structures.push_back({Vec3(0.0, -0.62 * body.semi_axes.y(), 0.0),
                          Vec3(0.10 * body.semi_axes.x(), 0.14 * body.semi_axes.y(), 0.85 * body.semi_axes.z()),
                          Mat3::Identity(), air + 0.85 * ct_span});
    for(int s = 0; s < spec.n_structures; ++s){
        Ellipsoid e;
        e.center = Vec3(rng.uniform(-0.65, 0.65) * body.semi_axes.x(), rng.uniform(-0.5, 0.65) * body.semi_axes.y(),
                        rng.uniform(-0.8, 0.8) * body.semi_axes.z());
        e.semi_axes = Vec3(rng.uniform(8.0, 26.0), rng.uniform(8.0, 22.0), rng.uniform(10.0, 40.0));
        e.rotation = rotation_zx(rng.uniform(0.0, std::numbers::pi), rng.uniform(-0.4, 0.4));
        const bool dense = rng.uniform01() < 0.5;
        e.value = dense ? air + rng.uniform(0.70, 1.0) * ct_span : air + rng.uniform(0.10, 0.45) * ct_span;
        structures.push_back(e);
    }

    // Tubes with quadratic centerlines, kept apart so each slice has one local maximum per tube.
    const int n_tubes = spec.n_tubes != 0 ? spec.n_tubes : rng.uniform_int(2, 4);
    const double z_half = body.semi_axes.z();
    std::vector<Tube> tubes;
    for(int attempt = 0; static_cast<int>(tubes.size()) < n_tubes && attempt < 500; ++attempt){
        Tube t;
        const double len = rng.uniform(0.55, 0.85) * 2.0 * z_half;
        const double zc = rng.uniform(-z_half + 0.5 * len, z_half - 0.5 * len);
        t.z0 = zc - 0.5 * len;
        t.z1 = zc + 0.5 * len;
        t.cx = {rng.uniform(-6e-4, 6e-4), rng.uniform(-0.12, 0.12), rng.uniform(-0.5, 0.5) * body.semi_axes.x()};
        t.cy = {rng.uniform(-6e-4, 6e-4), rng.uniform(-0.12, 0.12), rng.uniform(-0.35, 0.45) * body.semi_axes.y()};
        t.radius = rng.uniform(4.0, 6.0);
        t.amplitude = rng.uniform(0.75, 1.0) * pet_span;

        bool ok = true;
        for(double z = t.z0 - 15.0; z <= t.z1 + 15.0 && ok; z += 5.0){
            const double x = quad(t.cx, z), y = quad(t.cy, z);
            // Inside the body cross-section with margin.
            const double r = std::hypot(x / (body.semi_axes.x() - 15.0), y / (body.semi_axes.y() - 15.0));
            if(r > 1.0) ok = false;
            for(const auto &o : tubes){
                if(z < o.z0 - 15.0 || z > o.z1 + 15.0) continue;
                if(std::hypot(x - quad(o.cx, z), y - quad(o.cy, z)) < 40.0) ok = false;
            }
        }
        if(ok) tubes.push_back(t);
    }
    if(static_cast<int>(tubes.size()) < 2){
        throw Error(ErrorKind::InvalidArgument, "phantom too small to place separated tubes");
    }

    struct Blob { Vec3 c; double sigma; double amp; };
    std::vector<Blob> blobs;
    for(int attempt = 0; blobs.size() < 4 && attempt < 500; ++attempt){
        Blob b{Vec3(rng.uniform(-0.6, 0.6) * body.semi_axes.x(), rng.uniform(-0.5, 0.6) * body.semi_axes.y(),
                    rng.uniform(-0.75, 0.75) * body.semi_axes.z()),
               rng.uniform(5.0, 9.0), rng.uniform(0.4, 0.7) * pet_span};
        bool ok = true;
        for(const auto &t : tubes){
            if(b.c.z() < t.z0 - 40.0 || b.c.z() > t.z1 + 40.0) continue;
            for(double z = b.c.z() - 40.0; z <= b.c.z() + 40.0; z += 5.0){
                if(z < t.z0 - 15.0 || z > t.z1 + 15.0) continue;
                if((Vec3(quad(t.cx, z), quad(t.cy, z), z) - b.c).norm() < 45.0) ok = false;
            }
        }
        if(ok) blobs.push_back(b);
    }

    // Low-frequency background activity variation.
    const Vec3 bg_freq(rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5));
    const double bg_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    std::vector<float> ct(g.voxel_count()), pet(g.voxel_count());
    for(int k = 0; k < g.dims[2]; ++k){
        for(int j = 0; j < g.dims[1]; ++j){
            for(int i = 0; i < g.dims[0]; ++i){
                const Vec3 p = g.center(i, j, k);
                const double in_body = soft_inside(body, p);
                double c = air + (tissue - air) * in_body;
                for(const auto &e : structures){
                    const double w = soft_inside(e, p);
                    if(w > 1e-6) c = c * (1.0 - w) + e.value * w;
                }

                const Vec3 u = p.cwiseQuotient(extent);
                const double bg = 1.0 + 0.3 * std::sin(2.0 * std::numbers::pi * u.dot(bg_freq) + bg_phase);
                double a = pet_lo + pet_span * (0.01 + 0.12 * bg * in_body);
                for(const auto &t : tubes){
                    // Taper the tube over 15 mm beyond its annotated span.
                    const double dz = std::max({t.z0 - p.z(), p.z() - t.z1, 0.0});
                    if(dz > 30.0) continue;
                    const double taper = std::exp(-0.5 * (dz / 7.5) * (dz / 7.5));
                    const double dx = p.x() - quad(t.cx, p.z());
                    const double dy = p.y() - quad(t.cy, p.z());
                    a += t.amplitude * taper * std::exp(-0.5 * (dx * dx + dy * dy) / (t.radius * t.radius));
                }
                for(const auto &b : blobs){
                    a += b.amp * std::exp(-0.5 * (p - b.c).squaredNorm() / (b.sigma * b.sigma));
                }
                const std::size_t idx = g.index(i, j, k);
                ct[idx] = static_cast<float>(c);
                pet[idx] = static_cast<float>(a);
            }
        }
    }

    Phantom ph;
    ph.grid = VoxelGrid(g);
    ph.grid.set_channel(Channel::CT, std::move(ct), static_cast<float>(air));
    ph.grid.set_channel(Channel::PET, std::move(pet), static_cast<float>(pet_lo));

    ph.curves.visit_id = "src";
    for(std::size_t ti = 0; ti < tubes.size(); ++ti){
        const auto &t = tubes[ti];
        const std::string id = "tube_" + std::to_string(ti);
        int count = 0;
        double z_first = 0.0, z_last = 0.0;
        for(int k = 0; k < g.dims[2]; k += spec.annotation_stride){
            const double z = g.center(0, 0, k).z();
            if(z < t.z0 || z > t.z1) continue;
            ph.points.push_back({id, z, quad(t.cx, z), quad(t.cy, z), "src", k});
            if(count == 0) z_first = z;
            z_last = z;
            ++count;
        }
        KeyCurve c;
        c.curve_id = id;
        c.coeff_x = t.cx;
        c.coeff_y = t.cy;
        c.z_min = z_first;
        c.z_max = z_last;
        c.n_points = count;
        ph.curves.curves.emplace(id, c);
    }
    return ph;
}

std::vector<float> intensity_jitter_field(const GridGeometry &g, double amplitude, std::uint64_t seed) {
    std::vector<float> field(g.voxel_count(), 1.0f);
    if(amplitude == 0.0) return field;

    Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
    struct Wave { Vec3 freq; double phase; double weight; };
    std::vector<Wave> waves(3);
    double total = 0.0;
    for(auto &w : waves){
        w.freq = Vec3(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        w.weight = rng.uniform(0.2, 1.0);
        total += w.weight;
    }
    Vec3 extent;
    for(int a = 0; a < 3; ++a) extent[a] = g.dims[a] * g.spacing[a];
    for(int k = 0; k < g.dims[2]; ++k){
        for(int j = 0; j < g.dims[1]; ++j){
            for(int i = 0; i < g.dims[0]; ++i){
                const Vec3 u = (g.center(i, j, k) - g.origin).cwiseQuotient(extent);
                double s = 0.0;
                for(const auto &w : waves){
                    s += w.weight * std::cos(2.0 * std::numbers::pi * u.dot(w.freq) + w.phase);
                }
                field[g.index(i, j, k)] = static_cast<float>(1.0 + amplitude * s / total);
            }
        }
    }
    return field;
}

PhantomPair make_pair(const PhantomSpec &spec, const Transform &gt, double perturb) {
    if(!(perturb >= 0.0 && perturb < 1.0)){
        throw Error(ErrorKind::InvalidArgument, "perturb must lie in [0, 1)");
    }
    const Phantom ph = make_phantom(spec);

    PhantomPair pair;
    pair.src = ph.grid;
    pair.gt = gt;
    pair.tgt = warp_volume(ph.grid, gt, ph.grid.geometry());

    if(perturb > 0.0){
        const auto field = intensity_jitter_field(pair.tgt.geometry(), perturb, spec.seed);
        VoxelGrid jittered(pair.tgt.geometry());
        for(const auto &c : pair.tgt.channels()){
            std::vector<float> v(c.values->begin(), c.values->end());
            for(std::size_t i = 0; i < v.size(); ++i) v[i] *= field[i];
            jittered.set_channel(c.label, std::move(v), c.fill);
        }
        pair.tgt = std::move(jittered);
    }

    pair.src_points = ph.points;
    pair.tgt_points = transform_points(std::span<const KeyPoint>(ph.points), gt);
    const auto &tg = pair.tgt.geometry();
    for(auto &p : pair.tgt_points){
        p.visit_id = "tgt";
        const double k = std::round(tg.world_to_voxel(Vec3(p.x, p.y, p.z)).z());
        p.source_slice_index = static_cast<int>(std::clamp(k, 0.0, static_cast<double>(tg.dims[2] - 1)));
    }
    pair.src_curves = fit_curves("src", pair.src_points);
    pair.tgt_curves = fit_curves("tgt", pair.tgt_points);
    return pair;
}

PhantomPair make_pair(const PhantomSpec &spec, const DeformationConfig &deform, double perturb) {
    spec.validate();
    const GridGeometry g = phantom_geometry(spec);
    const Box3 box{g.hull_min(), g.hull_max()};
    const auto st = random_transform(deform, box);
    return make_pair(spec, st.combined(), perturb);
}

} // namespace curvereg
