#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "curvereg/volume.hpp"

namespace curvereg {

// A single 2D click on a z slice, in world mm.
struct KeyPoint {
    std::string curve_id;
    double z = 0.0;
    double x = 0.0;
    double y = 0.0;
    std::string visit_id;
    int source_slice_index = 0;
};

// Coefficients (a2, a1, a0) of a2*z^2 + a1*z + a0 in the raw z basis.
using QuadCoeffs = std::array<double, 3>;

struct KeyCurve {
    std::string curve_id;
    QuadCoeffs coeff_x{0, 0, 0};
    QuadCoeffs coeff_y{0, 0, 0};
    double z_min = 0.0;
    double z_max = 0.0;
    double residual_var_x = 0.0;
    double residual_var_y = 0.0;
    Eigen::Matrix3d coeff_cov_x = Eigen::Matrix3d::Zero();
    Eigen::Matrix3d coeff_cov_y = Eigen::Matrix3d::Zero();
    int n_points = 0;
};

struct CurveSet {
    std::string visit_id;
    std::map<std::string, KeyCurve> curves;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

// Annotator click uncertainty (1-sigma, mm).
struct SelectionUncertainty {
    double x = 2.52;
    double y = 1.96;
};

struct PredictionBand {
    double sigma_x = 0.0; // regression band only
    double sigma_y = 0.0;
    double total_x = 0.0; // regression band and selection uncertainty in quadrature
    double total_y = 0.0;
};

KeyCurve fit_curve(std::span<const KeyPoint> points);

// Groups points by curve_id and fits each group.
CurveSet fit_curves(const std::string &visit_id, std::span<const KeyPoint> points);

Point2 eval_curve(const KeyCurve &curve, double z);

PredictionBand prediction_band(const KeyCurve &curve, double z, const SelectionUncertainty &sel = {});

// Sample positions used by the distance metrics: midpoints of n equal sub-intervals of the z overlap.
std::vector<double> overlap_samples(const KeyCurve &a, const KeyCurve &b, int n_samples);

double curve_distance(const KeyCurve &a, const KeyCurve &b, int n_samples = 64);

struct CurveScore {
    std::string curve_id;
    double mean_distance_mm = 0.0;
    double rmse_mm = 0.0;
};

struct RmseReport {
    double rmse_mm = 0.0;
    std::vector<CurveScore> per_curve;
    std::vector<std::string> skipped; // curve ids present in only one set or without z overlap
    int n_samples = 0;
};

// Pooled RMS of per-sample 2D distances over all shared curves.
RmseReport rmse(const CurveSet &src, const CurveSet &tgt, int n_samples = 64);

template <class Map>
std::vector<KeyPoint> transform_points(std::span<const KeyPoint> points, const Map &t) {
    std::vector<KeyPoint> out(points.begin(), points.end());
    for(auto &p : out){
        const Vec3 q = t.apply(Vec3(p.x, p.y, p.z));
        p.x = q.x();
        p.y = q.y();
        p.z = q.z();
    }
    return out;
}

} // namespace curvereg
