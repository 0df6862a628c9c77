#include "curvereg/keycurve.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <Eigen/Dense>

#include "curvereg/error.hpp"

namespace curvereg {

KeyCurve fit_curve(std::span<const KeyPoint> points) {
    if(points.empty()){
        throw Error(ErrorKind::InsufficientPoints, "no points to fit");
    }
    const std::string &id = points.front().curve_id;
    std::set<double> distinct_z;
    for(const auto &p : points){
        if(p.curve_id != id){
            throw Error(ErrorKind::InvalidArgument, "fit_curve given points from curves '" + id + "' and '" +
                        p.curve_id + "'");
        }
        if(!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)){
            throw Error(ErrorKind::InvalidArgument, "non-finite key point in curve '" + id + "'");
        }
        distinct_z.insert(p.z);
    }
    if(distinct_z.size() < 3){
        throw Error(ErrorKind::InsufficientPoints, "curve '" + id + "' needs >= 3 distinct z values, has " +
                    std::to_string(distinct_z.size()));
    }

    const auto n = static_cast<Eigen::Index>(points.size());
    const double z_min = *distinct_z.begin();
    const double z_max = *distinct_z.rbegin();
    // Map z onto [-1, 1] before building the Vandermonde system.
    const double zc = 0.5 * (z_min + z_max);
    const double zs = 0.5 * (z_max - z_min);

    Eigen::MatrixXd v(n, 3);
    Eigen::MatrixXd rhs(n, 2);
    for(Eigen::Index i = 0; i < n; ++i){
        const auto &p = points[static_cast<std::size_t>(i)];
        const double u = (p.z - zc) / zs;
        v(i, 0) = u * u;
        v(i, 1) = u;
        v(i, 2) = 1.0;
        rhs(i, 0) = p.x;
        rhs(i, 1) = p.y;
    }

    const Eigen::Matrix3d gram = v.transpose() * v;
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(gram);
    if(eig.eigenvalues().minCoeff() <= 1e-10 * std::max(1.0, eig.eigenvalues().maxCoeff())){
        throw Error(ErrorKind::DegenerateSystem, "Vandermonde system for curve '" + id + "' is singular");
    }
    const Eigen::Matrix3d gram_inv = gram.inverse();

    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(v);
    const Eigen::MatrixXd b = qr.solve(rhs); // scaled-basis coefficients, rows (u^2, u, 1)
    const Eigen::MatrixXd resid = rhs - v * b;

    // Raw coefficients a = m * b for x(z) = a2 z^2 + a1 z + a0.
    Eigen::Matrix3d m;
    m << 1.0 / (zs * zs), 0.0, 0.0,
         -2.0 * zc / (zs * zs), 1.0 / zs, 0.0,
         zc * zc / (zs * zs), -zc / zs, 1.0;

    KeyCurve c;
    c.curve_id = id;
    c.z_min = z_min;
    c.z_max = z_max;
    c.n_points = static_cast<int>(n);
    const double dof = static_cast<double>(n - 3);
    for(int axis = 0; axis < 2; ++axis){
        const Eigen::Vector3d raw = m * b.col(axis);
        const double var = n > 3 ? resid.col(axis).squaredNorm() / dof : 0.0;
        Eigen::Matrix3d cov = var * (m * gram_inv * m.transpose());
        cov = 0.5 * (cov + cov.transpose());
        QuadCoeffs coeffs{raw(0), raw(1), raw(2)};
        if(axis == 0){
            c.coeff_x = coeffs;
            c.residual_var_x = var;
            c.coeff_cov_x = cov;
        }else{
            c.coeff_y = coeffs;
            c.residual_var_y = var;
            c.coeff_cov_y = cov;
        }
    }
    return c;
}

CurveSet fit_curves(const std::string &visit_id, std::span<const KeyPoint> points) {
    std::map<std::string, std::vector<KeyPoint>> groups;
    for(const auto &p : points){
        if(p.curve_id.empty()){
            throw Error(ErrorKind::InvalidArgument, "key point with empty curve_id");
        }
        groups[p.curve_id].push_back(p);
    }
    CurveSet set;
    set.visit_id = visit_id;
    for(const auto &[id, pts] : groups){
        set.curves.emplace(id, fit_curve(pts));
    }
    return set;
}

namespace {

double horner(const QuadCoeffs &a, double z) {
    return (a[0] * z + a[1]) * z + a[2];
}

double band_variance(const Eigen::Matrix3d &cov, double residual_var, double z) {
    const Eigen::Vector3d v(z * z, z, 1.0);
    return std::max(0.0, v.dot(cov * v)) + residual_var;
}

} // namespace

Point2 eval_curve(const KeyCurve &curve, double z) {
    return {horner(curve.coeff_x, z), horner(curve.coeff_y, z)};
}

PredictionBand prediction_band(const KeyCurve &curve, double z, const SelectionUncertainty &sel) {
    const double vx = band_variance(curve.coeff_cov_x, curve.residual_var_x, z);
    const double vy = band_variance(curve.coeff_cov_y, curve.residual_var_y, z);
    PredictionBand b;
    b.sigma_x = std::sqrt(vx);
    b.sigma_y = std::sqrt(vy);
    b.total_x = std::sqrt(vx + sel.x * sel.x);
    b.total_y = std::sqrt(vy + sel.y * sel.y);
    return b;
}

std::vector<double> overlap_samples(const KeyCurve &a, const KeyCurve &b, int n_samples) {
    if(n_samples < 2){
        throw Error(ErrorKind::InvalidArgument, "n_samples must be >= 2");
    }
    const double lo = std::max(a.z_min, b.z_min);
    const double hi = std::min(a.z_max, b.z_max);
    if(!(lo < hi)){
        throw Error(ErrorKind::NoOverlap, "curves '" + a.curve_id + "' and '" + b.curve_id +
                    "' have no overlapping z span");
    }
    std::vector<double> z(static_cast<std::size_t>(n_samples));
    const double h = (hi - lo) / n_samples;
    for(int i = 0; i < n_samples; ++i) z[static_cast<std::size_t>(i)] = lo + (i + 0.5) * h;
    return z;
}

double curve_distance(const KeyCurve &a, const KeyCurve &b, int n_samples) {
    double sum = 0.0;
    for(double z : overlap_samples(a, b, n_samples)){
        const Point2 pa = eval_curve(a, z);
        const Point2 pb = eval_curve(b, z);
        sum += std::hypot(pa.x - pb.x, pa.y - pb.y);
    }
    return sum / n_samples;
}

RmseReport rmse(const CurveSet &src, const CurveSet &tgt, int n_samples) {
    RmseReport report;
    report.n_samples = n_samples;
    double pooled = 0.0;
    std::size_t count = 0;

    for(const auto &[id, a] : src.curves){
        auto it = tgt.curves.find(id);
        if(it == tgt.curves.end()){
            report.skipped.push_back(id);
            continue;
        }
        std::vector<double> zs;
        try{
            zs = overlap_samples(a, it->second, n_samples);
        }catch(const Error &e){
            if(e.kind() != ErrorKind::NoOverlap) throw;
            report.skipped.push_back(id);
            continue;
        }
        double sum = 0.0, sum_sq = 0.0;
        for(double z : zs){
            const Point2 pa = eval_curve(a, z);
            const Point2 pb = eval_curve(it->second, z);
            const double dx = pa.x - pb.x, dy = pa.y - pb.y;
            sum += std::sqrt(dx * dx + dy * dy);
            sum_sq += dx * dx + dy * dy;
        }
        pooled += sum_sq;
        count += zs.size();
        report.per_curve.push_back({id, sum / static_cast<double>(zs.size()),
                                    std::sqrt(sum_sq / static_cast<double>(zs.size()))});
    }
    for(const auto &[id, b] : tgt.curves){
        if(!src.curves.contains(id)) report.skipped.push_back(id);
    }
    std::sort(report.skipped.begin(), report.skipped.end());

    if(count == 0){
        throw Error(ErrorKind::NoSharedCurves, "no shared curve ids with overlapping z spans");
    }
    report.rmse_mm = std::sqrt(pooled / static_cast<double>(count));
    return report;
}

} // namespace curvereg
