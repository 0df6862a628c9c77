#include "curvereg/warp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "curvereg/error.hpp"
#include "curvereg/parallel.hpp"
#include "curvereg/random.hpp"

namespace curvereg {

bool Affine3::invertible() const {
    return linear.allFinite() && translation.allFinite() && std::abs(linear.determinant()) > 1e-12;
}

Vec3 affine_apply(const Affine3 &t, const Vec3 &p) {
    return t.apply(p);
}

Affine3 affine_invert(const Affine3 &t) {
    if(!t.invertible()){
        throw Error(ErrorKind::SingularTransform, "affine linear part is singular");
    }
    Affine3 inv;
    inv.linear = t.linear.inverse();
    inv.translation = -(inv.linear * t.translation);
    return inv;
}

Affine3 affine_compose(const Affine3 &a, const Affine3 &b) {
    Affine3 c;
    c.linear = a.linear * b.linear;
    c.translation = a.linear * b.translation + a.translation;
    return c;
}

// ---------------------------------------------------------------------------------------------
// Thin-plate spline.

Vec3 Tps3::apply(const Vec3 &p) const {
    Vec3 out = affine_part.apply(p);
    for(std::size_t i = 0; i < controls.size(); ++i){
        out += weights[i] * (p - controls[i]).norm();
    }
    return out;
}

Mat3 Tps3::jacobian(const Vec3 &p) const {
    Mat3 j = affine_part.linear;
    for(std::size_t i = 0; i < controls.size(); ++i){
        const Vec3 d = p - controls[i];
        const double r = d.norm();
        if(r > 0.0) j += weights[i] * (d / r).transpose();
    }
    return j;
}

bool Tps3::is_identity() const {
    return affine_part.is_identity() &&
           std::all_of(weights.begin(), weights.end(), [](const Vec3 &w){ return w.isZero(0.0); });
}

Tps3 tps_fit(std::span<const Vec3> src, std::span<const Vec3> dst, double lambda) {
    if(src.size() != dst.size()){
        throw Error(ErrorKind::ControlMismatch, "source and destination control counts differ");
    }
    const auto n = static_cast<Eigen::Index>(src.size());
    if(n < 4){
        throw Error(ErrorKind::ControlMismatch, "TPS needs at least 4 control points");
    }
    if(!(lambda >= 0.0) || !std::isfinite(lambda)){
        throw Error(ErrorKind::InvalidArgument, "TPS lambda must be finite and >= 0");
    }

    // Coplanarity test on centered controls.
    Vec3 mean = Vec3::Zero();
    for(const auto &p : src) mean += p;
    mean /= static_cast<double>(n);
    Eigen::MatrixXd centered(n, 3);
    for(Eigen::Index i = 0; i < n; ++i) centered.row(i) = (src[i] - mean).transpose();
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
    const auto sv = svd.singularValues();
    if(sv(0) <= 0.0 || sv(2) <= 1e-10 * sv(0)){
        throw Error(ErrorKind::DegenerateControls, "TPS controls are coplanar or coincident");
    }

    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n + 4, n + 4);
    for(Eigen::Index i = 0; i < n; ++i){
        for(Eigen::Index j = 0; j < n; ++j){
            L(i, j) = (src[i] - src[j]).norm();
        }
        // r is conditionally negative definite, so smoothing subtracts lambda on the diagonal.
        L(i, i) -= lambda;
        L(i, n + 0) = src[i].x();
        L(i, n + 1) = src[i].y();
        L(i, n + 2) = src[i].z();
        L(i, n + 3) = 1.0;
        L(n + 0, i) = src[i].x();
        L(n + 1, i) = src[i].y();
        L(n + 2, i) = src[i].z();
        L(n + 3, i) = 1.0;
    }

    // Solve for displacements so that an all-zero displacement yields exactly the identity.
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 4, 3);
    for(Eigen::Index i = 0; i < n; ++i) rhs.row(i) = (dst[i] - src[i]).transpose();

    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(L);
    if(qr.rank() < n + 4){
        throw Error(ErrorKind::DegenerateControls, "TPS system is singular");
    }
    const Eigen::MatrixXd sol = qr.solve(rhs);
    if(!sol.allFinite()){
        throw Error(ErrorKind::DegenerateControls, "TPS solve produced non-finite weights");
    }

    Tps3 t;
    t.lambda = lambda;
    t.controls.assign(src.begin(), src.end());
    t.weights.resize(static_cast<std::size_t>(n));
    for(Eigen::Index i = 0; i < n; ++i) t.weights[static_cast<std::size_t>(i)] = sol.row(i).transpose();
    // Displacement affine rows: d(p) = A^T [p; 1].
    t.affine_part.linear = Mat3::Identity() + sol.block(n, 0, 3, 3).transpose();
    t.affine_part.translation = sol.row(n + 3).transpose();
    return t;
}

Vec3 tps_apply(const Tps3 &t, const Vec3 &p) {
    return t.apply(p);
}

namespace {

// Structure-of-arrays TPS evaluation for the per-voxel hot loops.
class TpsKernel {
public:
    explicit TpsKernel(const Tps3 &t) : affine_(t.affine_part) {
        const std::size_t n = t.controls.size();
        cx_.resize(n); cy_.resize(n); cz_.resize(n);
        wx_.resize(n); wy_.resize(n); wz_.resize(n);
        for(std::size_t i = 0; i < n; ++i){
            cx_[i] = t.controls[i].x(); cy_[i] = t.controls[i].y(); cz_[i] = t.controls[i].z();
            wx_[i] = t.weights[i].x(); wy_[i] = t.weights[i].y(); wz_[i] = t.weights[i].z();
        }
    }

    Vec3 apply(const Vec3 &p) const {
        double sx = 0, sy = 0, sz = 0;
        const std::size_t n = cx_.size();
        for(std::size_t i = 0; i < n; ++i){
            const double dx = p.x() - cx_[i], dy = p.y() - cy_[i], dz = p.z() - cz_[i];
            const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
            sx += wx_[i] * r; sy += wy_[i] * r; sz += wz_[i] * r;
        }
        return affine_.apply(p) + Vec3(sx, sy, sz);
    }

private:
    Affine3 affine_;
    std::vector<double> cx_, cy_, cz_, wx_, wy_, wz_;
};

template <class F>
Vec3 invert_fixed_point(const F &forward, const Vec3 &target, const InverseOptions &opts) {
    // First-order start: undo the displacement observed at the target itself.
    Vec3 q = target - (forward(target) - target);
    for(int it = 0; it <= opts.max_iterations; ++it){
        const Vec3 r = forward(q) - target;
        if(r.norm() < opts.tolerance_mm) return q;
        if(!r.allFinite()) break;
        q -= opts.damping * r;
    }
    throw Error(ErrorKind::InverseNonConvergent,
                "TPS inverse did not converge within " + std::to_string(opts.max_iterations) + " iterations");
}

} // namespace

Vec3 tps_invert_point(const Tps3 &t, const Vec3 &target, const InverseOptions &opts) {
    return invert_fixed_point([&](const Vec3 &p){ return t.apply(p); }, target, opts);
}

Vec3 Transform::apply_inverse(const Vec3 &q, const InverseOptions &opts) const {
    const Vec3 s = tps ? tps_invert_point(*tps, q, opts) : q;
    return affine_invert(affine).apply(s);
}

// ---------------------------------------------------------------------------------------------
// Resampling.

std::vector<Vec3> inverse_positions(const Transform &t, const GridGeometry &out, const InverseOptions &opts) {
    const Affine3 inv = affine_invert(t.affine);
    std::vector<Vec3> pos(out.voxel_count());
    const bool has_tps = t.tps && !t.tps->is_identity();
    const std::optional<TpsKernel> kernel = has_tps ? std::optional<TpsKernel>(*t.tps) : std::nullopt;

    const int nx = out.dims[0], ny = out.dims[1];
    parallel_for(static_cast<std::size_t>(out.dims[2]), [&](std::size_t kk){
        const int k = static_cast<int>(kk);
        for(int j = 0; j < ny; ++j){
            for(int i = 0; i < nx; ++i){
                Vec3 q = out.center(i, j, k);
                if(kernel){
                    q = invert_fixed_point([&](const Vec3 &p){ return kernel->apply(p); }, q, opts);
                }
                pos[out.index(i, j, k)] = inv.apply(q);
            }
        }
    });
    return pos;
}

VoxelGrid resample_at(const VoxelGrid &grid, std::span<const Vec3> positions, const GridGeometry &out_geometry) {
    if(positions.size() != out_geometry.voxel_count()){
        throw Error(ErrorKind::SizeMismatch, "position count does not match output geometry");
    }
    const auto &g = grid.geometry();
    const std::size_t n = positions.size();
    const auto &channels = grid.channels();

    std::vector<std::vector<float>> out(channels.size(), std::vector<float>(n));
    const std::size_t plane = static_cast<std::size_t>(out_geometry.dims[0]) * out_geometry.dims[1];
    parallel_for(static_cast<std::size_t>(out_geometry.dims[2]), [&](std::size_t k){
        for(std::size_t idx = k * plane; idx < (k + 1) * plane; ++idx){
            const auto stencil = detail::make_stencil(g, g.world_to_voxel(positions[idx]));
            for(std::size_t c = 0; c < channels.size(); ++c){
                out[c][idx] = stencil ? static_cast<float>(detail::apply_stencil(*stencil, *channels[c].values))
                                      : channels[c].fill;
            }
        }
    });

    VoxelGrid result(out_geometry);
    for(std::size_t c = 0; c < channels.size(); ++c){
        result.set_channel(channels[c].label, std::move(out[c]), channels[c].fill);
    }
    return result;
}

VoxelGrid warp_volume(const VoxelGrid &grid, const Affine3 &t, const GridGeometry &out_geometry) {
    return warp_volume(grid, Transform{t, std::nullopt}, out_geometry);
}

VoxelGrid warp_volume(const VoxelGrid &grid, const Tps3 &t, const GridGeometry &out_geometry,
                      const InverseOptions &opts) {
    return warp_volume(grid, Transform{Affine3::identity(), t}, out_geometry, opts);
}

VoxelGrid warp_volume(const VoxelGrid &grid, const Transform &t, const GridGeometry &out_geometry,
                      const InverseOptions &opts) {
    out_geometry.validate();
    const auto positions = inverse_positions(t, out_geometry, opts);
    return resample_at(grid, positions, out_geometry);
}

// ---------------------------------------------------------------------------------------------
// Synthetic deformations.

void DeformationConfig::validate() const {
    if(max_rotation_deg < 0 || max_translation_mm < 0 || max_log_scale < 0 || max_shear < 0 ||
       max_tps_jitter_mm < 0){
        throw Error(ErrorKind::InvalidArgument, "deformation maxima must be >= 0");
    }
    for(int d : tps_grid){
        if(d < 2) throw Error(ErrorKind::InvalidArgument, "TPS lattice dims must be >= 2");
    }
}

std::vector<Vec3> control_lattice(const Box3 &extent, std::array<int, 3> dims) {
    std::vector<Vec3> out;
    out.reserve(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]);
    for(int k = 0; k < dims[2]; ++k){
        for(int j = 0; j < dims[1]; ++j){
            for(int i = 0; i < dims[0]; ++i){
                const Vec3 f(static_cast<double>(i) / (dims[0] - 1), static_cast<double>(j) / (dims[1] - 1),
                             static_cast<double>(k) / (dims[2] - 1));
                out.push_back(extent.lo + f.cwiseProduct(extent.hi - extent.lo));
            }
        }
    }
    return out;
}

namespace {

Mat3 axis_angle(const Vec3 &axis, double angle_rad) {
    Mat3 k;
    k << 0.0, -axis.z(), axis.y(),
         axis.z(), 0.0, -axis.x(),
         -axis.y(), axis.x(), 0.0;
    return Mat3::Identity() + std::sin(angle_rad) * k + (1.0 - std::cos(angle_rad)) * (k * k);
}

} // namespace

SyntheticTransform random_transform(const DeformationConfig &cfg, const Box3 &extent) {
    cfg.validate();
    Rng rng(cfg.seed);
    SyntheticTransform st;

    const double cz = rng.uniform(-1.0, 1.0);
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double sz = std::sqrt(std::max(0.0, 1.0 - cz * cz));
    st.rotation_axis = Vec3(sz * std::cos(phi), sz * std::sin(phi), cz);
    st.rotation_deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);

    for(int a = 0; a < 3; ++a) st.log_scale[a] = rng.uniform(-cfg.max_log_scale, cfg.max_log_scale);
    for(int a = 0; a < 3; ++a) st.shear[a] = rng.uniform(-cfg.max_shear, cfg.max_shear);

    // Uniform in the ball of radius max_translation_mm.
    Vec3 unit;
    do{
        unit = Vec3(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    }while(unit.squaredNorm() > 1.0);
    st.translation = cfg.max_translation_mm * unit;

    const Mat3 r = axis_angle(st.rotation_axis, st.rotation_deg * std::numbers::pi / 180.0);
    const Mat3 s = Vec3(std::exp(st.log_scale.x()), std::exp(st.log_scale.y()), std::exp(st.log_scale.z())).asDiagonal();
    Mat3 sh = Mat3::Identity();
    sh(0, 1) = st.shear[0];
    sh(0, 2) = st.shear[1];
    sh(1, 2) = st.shear[2];

    const Vec3 c = extent.center();
    st.affine.linear = r * s * sh;
    st.affine.translation = c - st.affine.linear * c + st.translation;

    const auto controls = control_lattice(extent, cfg.tps_grid);
    std::vector<Vec3> moved = controls;
    for(auto &p : moved){
        for(int a = 0; a < 3; ++a) p[a] += rng.uniform(-cfg.max_tps_jitter_mm, cfg.max_tps_jitter_mm);
    }
    st.tps = tps_fit(controls, moved, 0.0);
    return st;
}

} // namespace curvereg
