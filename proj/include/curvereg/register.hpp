#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "curvereg/features.hpp"
#include "curvereg/keycurve.hpp"
#include "curvereg/volume.hpp"
#include "curvereg/warp.hpp"

namespace curvereg {

struct AffineStageConfig {
    double simplex_translation_mm = 8.0; // initial simplex step for translations
    double simplex_linear = 0.05;        // ...and for entries of the linear part
    int max_evaluations = 2000;          // per restart
    int restarts = 5;
    std::uint64_t seed = 1;
    double f_tolerance = 1e-6;
};

struct TpsStageConfig {
    bool enabled = true;
    std::array<int, 3> lattice{3, 3, 3};
    double lambda = 0.0;
    double step_mm = 4.0;     // coordinate-descent move length
    double min_step_mm = 1.0; // step halves after a sweep without accepted moves
    int max_sweeps = 2;
};

struct StoppingConfig {
    // Validation annotations; when both are set the key-curve RMSE is checked after every
    // stage and TPS sweep, and the best-scoring state is kept.
    std::optional<std::vector<KeyPoint>> validation_src;
    std::optional<std::vector<KeyPoint>> validation_tgt;
    int patience = 1;
    int n_samples = 64;

    bool active() const { return validation_src.has_value() && validation_tgt.has_value(); }
};

struct RegistrationConfig {
    FeatureConfig features;
    double w_sim = 1.0;
    double w_lcka = 0.25;
    double working_spacing_mm = 7.0; // <= 0 keeps the input resolution
    double pet_epsilon = 1e-3;
    AffineStageConfig affine;
    TpsStageConfig tps;
    StoppingConfig stopping;
    InverseOptions inverse{0.5, 0.05, 50}; // tolerance well below the working voxel size

    void validate() const;
};

// Similarity cost on already-normalized, location-aligned feature matrices:
// w_sim * (1 - mean co-located cosine) + w_lcka * (1 - lcka).
double alignment_cost(const Eigen::MatrixXd &src_features, const Eigen::MatrixXd &tgt_features, double w_sim,
                      double w_lcka);

// Objective with target-side state cached for repeated evaluation. Features of both scans are
// standardized per descriptor with the target's mean and deviation before scoring.
class ObjectiveFunction {
public:
    ObjectiveFunction(const VoxelGrid &src, const VoxelGrid &tgt, const RegistrationConfig &cfg);

    double operator()(const Transform &t) const;
    double evaluate_positions(std::span<const Vec3> positions) const;

    const GridGeometry &target_geometry() const { return tgt_.geometry(); }
    const RegistrationConfig &config() const { return cfg_; }

private:
    Eigen::MatrixXd standardize(const Eigen::MatrixXd &f) const;
    double score(const Eigen::MatrixXd &src_std) const;

    RegistrationConfig cfg_;
    VoxelGrid src_; // feature channels only
    VoxelGrid tgt_;
    Eigen::RowVectorXd mean_;
    Eigen::RowVectorXd scale_;
    Eigen::MatrixXd tgt_std_;
    // Cached target terms of the cost.
    Eigen::VectorXd tgt_row_norm_;
    Eigen::MatrixXd tgt_centered_;
    double tgt_gram_norm_ = 0.0;
};

// The overloads taking scans prepare working grids first (see working_grid); ObjectiveFunction expects
// them already prepared.
double objective(const VoxelGrid &src, const VoxelGrid &tgt, const Transform &t, const RegistrationConfig &cfg);

// Affine map about a fixed center from 12 normalized parameters (translation, then linear offsets).
Affine3 affine_from_parameters(const Eigen::VectorXd &x, const Vec3 &center, double translation_scale,
                               double linear_scale);

struct AffineStageResult {
    Affine3 affine;
    double objective = 0.0;
    double initial_objective = 0.0;
    std::vector<double> trace;
};

AffineStageResult register_affine(const VoxelGrid &src, const VoxelGrid &tgt, const RegistrationConfig &cfg);
// on_eval receives the running evaluation count.
AffineStageResult register_affine(const ObjectiveFunction &f, const std::function<void(int)> &on_eval = {});

struct TpsStageResult {
    Tps3 tps;
    std::vector<Vec3> displacements; // per lattice control
    double objective = 0.0;
    double initial_objective = 0.0;
    int sweeps = 0;
    std::vector<double> trace;
};

// Called after each sweep with the current TPS; returning false ends the stage.
using SweepCallback = std::function<bool(int sweep, const Tps3 &tps)>;

TpsStageResult register_tps(const VoxelGrid &src, const VoxelGrid &tgt, const Affine3 &affine_init,
                            const RegistrationConfig &cfg);
TpsStageResult register_tps(const ObjectiveFunction &f, const Affine3 &affine_init,
                            const SweepCallback &on_sweep = {});

struct KeycurveCheck {
    std::string label;
    double rmse_mm = 0.0;
};

struct RegistrationResult {
    Transform transform;
    std::vector<double> objective_trace;
    std::vector<KeycurveCheck> keycurve_trace;
    bool stopped_early = false;
    double initial_objective = 0.0;
    double affine_objective = 0.0;
    double final_objective = 0.0;
    double wall_time_s = 0.0;
};

// Progress in [0, 1]: the affine stage is reported against its evaluation budget, the TPS stage
// per sweep.
using ProgressCallback = std::function<void(double fraction)>;

RegistrationResult register_scans(const VoxelGrid &src, const VoxelGrid &tgt, const RegistrationConfig &cfg,
                                  const ProgressCallback &progress = {});

struct EvaluationReport {
    double rmse_mm = 0.0;
    double unaligned_rmse_mm = 0.0;
    std::vector<CurveScore> per_curve;
    std::vector<CurveScore> unaligned_per_curve;
    std::vector<std::string> skipped;
    int n_samples = 0;
};

EvaluationReport evaluate(std::span<const KeyPoint> src_points, std::span<const KeyPoint> tgt_points,
                          const Transform &t, int n_samples = 64);

// Preprocessed copy restricted to the feature channels, block-averaged to the working spacing.
VoxelGrid working_grid(const VoxelGrid &grid, const RegistrationConfig &cfg);

} // namespace curvereg
