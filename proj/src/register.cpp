#include "curvereg/register.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <Eigen/LU>

#include "curvereg/error.hpp"
#include "curvereg/optimize.hpp"
#include "curvereg/random.hpp"

namespace curvereg {

void RegistrationConfig::validate() const {
    if(!(w_sim >= 0.0) || !(w_lcka >= 0.0)){
        throw Error(ErrorKind::InvalidArgument, "objective weights must be >= 0");
    }
    if(affine.restarts < 1){
        throw Error(ErrorKind::InvalidArgument, "affine restarts must be >= 1");
    }
    if(!(affine.simplex_translation_mm > 0.0) || !(affine.simplex_linear > 0.0)){
        throw Error(ErrorKind::InvalidArgument, "simplex scales must be > 0");
    }
    for(int d : tps.lattice){
        if(d < 2) throw Error(ErrorKind::InvalidArgument, "TPS lattice dims must be >= 2");
    }
    if(!(tps.step_mm > 0.0) || tps.max_sweeps < 0 || !(tps.lambda >= 0.0)){
        throw Error(ErrorKind::InvalidArgument, "invalid TPS stage settings");
    }
    if(stopping.patience < 0 || stopping.n_samples < 2){
        throw Error(ErrorKind::InvalidArgument, "invalid stopping settings");
    }
}

double alignment_cost(const Eigen::MatrixXd &src_features, const Eigen::MatrixXd &tgt_features, double w_sim,
                      double w_lcka) {
    double cost = 0.0;
    if(w_sim > 0.0){
        cost += w_sim * (1.0 - colocated_cosine(src_features, tgt_features).mean());
    }
    if(w_lcka > 0.0){
        cost += w_lcka * (1.0 - lcka(src_features, tgt_features));
    }
    return cost;
}

VoxelGrid working_grid(const VoxelGrid &grid, const RegistrationConfig &cfg) {
    VoxelGrid prepared = grid;
    const bool wants_pet = std::find(cfg.features.channels.begin(), cfg.features.channels.end(),
                                     Channel::PET_PREPROCESSED) != cfg.features.channels.end();
    if(wants_pet && grid.has(Channel::PET)){
        prepared = preprocess_pet(grid, cfg.pet_epsilon);
    }

    VoxelGrid subset(prepared.geometry());
    for(Channel c : cfg.features.channels){
        subset.set_channel(c, std::vector<float>(prepared.values(c).begin(), prepared.values(c).end()),
                           prepared.fill(c));
    }
    if(cfg.working_spacing_mm <= 0.0) return subset;

    std::array<int, 3> factors{};
    bool any = false;
    for(int a = 0; a < 3; ++a){
        factors[a] = std::max(1, static_cast<int>(std::lround(cfg.working_spacing_mm / subset.geometry().spacing[a])));
        any = any || factors[a] > 1;
    }
    return any ? downsample(subset, factors) : subset;
}

// ---------------------------------------------------------------------------------------------
// Objective.

ObjectiveFunction::ObjectiveFunction(const VoxelGrid &src, const VoxelGrid &tgt, const RegistrationConfig &cfg)
    : cfg_(cfg), src_(src.geometry()), tgt_(tgt) {
    cfg_.validate();
    for(Channel c : cfg_.features.channels){
        src_.set_channel(c, std::vector<float>(src.values(c).begin(), src.values(c).end()), src.fill(c));
    }
    const FeatureMap ft = extract_features(tgt_, cfg_.features);
    const double n = static_cast<double>(ft.data.rows());
    mean_ = ft.data.colwise().sum() / n;
    scale_.resize(ft.data.cols());
    for(Eigen::Index c = 0; c < ft.data.cols(); ++c){
        const double var = (ft.data.col(c).array() - mean_(c)).square().sum() / n;
        scale_(c) = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
    }
    tgt_std_ = standardize(ft.data);
    tgt_row_norm_ = tgt_std_.rowwise().norm();
    tgt_centered_ = tgt_std_.rowwise() - tgt_std_.colwise().mean();
    tgt_gram_norm_ = (tgt_centered_.transpose() * tgt_centered_).norm();
}

// Same value as alignment_cost(src_std, tgt_std_, ...) using the cached target terms.
double ObjectiveFunction::score(const Eigen::MatrixXd &src_std) const {
    double cost = 0.0;
    if(cfg_.w_sim > 0.0){
        const Eigen::VectorXd dots = src_std.cwiseProduct(tgt_std_).rowwise().sum();
        const Eigen::VectorXd norms = src_std.rowwise().norm();
        double total = 0.0;
        for(Eigen::Index r = 0; r < dots.size(); ++r){
            const double d = norms(r) * tgt_row_norm_(r);
            if(norms(r) > 0.0 && tgt_row_norm_(r) > 0.0) total += dots(r) / d;
        }
        cost += cfg_.w_sim * (1.0 - total / static_cast<double>(dots.size()));
    }
    if(cfg_.w_lcka > 0.0){
        // Centering x is unnecessary against the centered target, and its Gram matrix follows from
        // the raw one: Xc^T Xc = X^T X - n mu mu^T.
        const double n = static_cast<double>(src_std.rows());
        const Eigen::RowVectorXd mu = src_std.colwise().mean();
        Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(src_std.cols(), src_std.cols());
        gram.selfadjointView<Eigen::Lower>().rankUpdate(src_std.transpose());
        gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
        gram.noalias() -= n * mu.transpose() * mu;
        double xx = gram.norm();
        if(xx <= 1e-12 * src_std.squaredNorm()) xx = 0.0; // constant features up to rounding
        double sim = 0.0;
        if(xx > 0.0 && tgt_gram_norm_ > 0.0){
            sim = std::clamp((src_std.transpose() * tgt_centered_).squaredNorm() / (xx * tgt_gram_norm_), 0.0, 1.0);
        }
        cost += cfg_.w_lcka * (1.0 - sim);
    }
    return cost;
}

Eigen::MatrixXd ObjectiveFunction::standardize(const Eigen::MatrixXd &f) const {
    return (f.rowwise() - mean_).array().rowwise() * scale_.array();
}

double ObjectiveFunction::evaluate_positions(std::span<const Vec3> positions) const {
    const VoxelGrid warped = resample_at(src_, positions, tgt_.geometry());
    const FeatureMap fs = extract_features(warped, cfg_.features);
    return score(standardize(fs.data));
}

double ObjectiveFunction::operator()(const Transform &t) const {
    return evaluate_positions(inverse_positions(t, tgt_.geometry(), cfg_.inverse));
}

double objective(const VoxelGrid &src, const VoxelGrid &tgt, const Transform &t, const RegistrationConfig &cfg) {
    return ObjectiveFunction(working_grid(src, cfg), working_grid(tgt, cfg), cfg)(t);
}

// ---------------------------------------------------------------------------------------------
// Affine stage.

Affine3 affine_from_parameters(const Eigen::VectorXd &x, const Vec3 &center, double translation_scale,
                               double linear_scale) {
    Affine3 a;
    for(int r = 0; r < 3; ++r){
        for(int c = 0; c < 3; ++c) a.linear(r, c) += linear_scale * x(3 + 3 * r + c);
    }
    const Vec3 t(x(0), x(1), x(2));
    a.translation = center - a.linear * center + translation_scale * t;
    return a;
}

AffineStageResult register_affine(const ObjectiveFunction &f, const std::function<void(int)> &on_eval) {
    const auto &cfg = f.config();
    if(cfg.affine.max_evaluations < 1){
        throw Error(ErrorKind::OptimizerBudgetExceeded, "affine stage has no evaluation budget");
    }
    const Vec3 center = f.target_geometry().hull_center();
    // Anything worse than every attainable cost.
    const double penalty = 10.0 * (1.0 + cfg.w_sim + cfg.w_lcka);

    AffineStageResult out;
    int succeeded = 0;
    auto cost = [&](const Eigen::VectorXd &x) {
        const Affine3 a = affine_from_parameters(x, center, cfg.affine.simplex_translation_mm, cfg.affine.simplex_linear);
        double v = penalty;
        if(a.invertible() && a.linear.determinant() > 0.0){
            try{
                v = f(Transform{a, std::nullopt});
                ++succeeded;
            }catch(const Error &){
                v = penalty;
            }
        }
        out.trace.push_back(v);
        if(on_eval) on_eval(static_cast<int>(out.trace.size()));
        return v;
    };

    Eigen::VectorXd best_x = Eigen::VectorXd::Zero(12);
    double best = cost(best_x);
    out.initial_objective = best;

    Rng rng(cfg.affine.seed);
    SimplexOptions opts;
    opts.max_evaluations = cfg.affine.max_evaluations;
    opts.f_tolerance = cfg.affine.f_tolerance;
    opts.x_tolerance = 1e-3;
    for(int r = 0; r < cfg.affine.restarts; ++r){
        Eigen::VectorXd step(12);
        for(Eigen::Index i = 0; i < 12; ++i){
            const double mag = r == 0 ? 1.0 : rng.uniform(0.25, 1.0);
            step(i) = (r > 0 && rng.uniform01() < 0.5) ? -mag : mag;
        }
        const auto res = nelder_mead(cost, best_x, step, opts);
        if(res.value < best){
            best = res.value;
            best_x = res.x;
        }
    }
    if(succeeded == 0){
        throw Error(ErrorKind::OptimizerBudgetExceeded, "no affine objective evaluation succeeded");
    }
    out.affine = affine_from_parameters(best_x, center, cfg.affine.simplex_translation_mm, cfg.affine.simplex_linear);
    out.objective = best;
    return out;
}

AffineStageResult register_affine(const VoxelGrid &src, const VoxelGrid &tgt, const RegistrationConfig &cfg) {
    return register_affine(ObjectiveFunction(working_grid(src, cfg), working_grid(tgt, cfg), cfg));
}

// ---------------------------------------------------------------------------------------------
// TPS stage.

TpsStageResult register_tps(const ObjectiveFunction &f, const Affine3 &affine_init, const SweepCallback &on_sweep) {
    const auto &cfg = f.config();
    const auto &g = f.target_geometry();
    const auto controls = control_lattice(Box3{g.hull_min(), g.hull_max()}, cfg.tps.lattice);

    TpsStageResult out;
    out.displacements.assign(controls.size(), Vec3::Zero());

    auto build = [&](const std::vector<Vec3> &disp) {
        std::vector<Vec3> dst(controls.size());
        for(std::size_t i = 0; i < controls.size(); ++i) dst[i] = controls[i] + disp[i];
        return tps_fit(controls, dst, cfg.tps.lambda);
    };
    auto cost = [&](const Tps3 &tps) {
        const double v = f(Transform{affine_init, tps});
        out.trace.push_back(v);
        return v;
    };

    out.tps = build(out.displacements);
    double best = cost(out.tps);
    out.initial_objective = best;

    double step = cfg.tps.step_mm;
    for(int sweep = 0; sweep < cfg.tps.max_sweeps; ++sweep){
        bool moved = false;
        for(std::size_t j = 0; j < controls.size(); ++j){
            for(int axis = 0; axis < 3; ++axis){
                for(double sign : {1.0, -1.0}){
                    auto trial = out.displacements;
                    trial[j][axis] += sign * step;
                    Tps3 tps = build(trial);
                    double v;
                    try{
                        v = cost(tps);
                    }catch(const Error &e){
                        if(e.kind() != ErrorKind::InverseNonConvergent) throw;
                        continue; // fold-over: reject the move
                    }
                    if(v < best){
                        best = v;
                        out.displacements = std::move(trial);
                        out.tps = std::move(tps);
                        moved = true;
                        break;
                    }
                }
            }
        }
        out.sweeps = sweep + 1;
        if(on_sweep && !on_sweep(sweep, out.tps)) break;
        if(!moved){
            step *= 0.5;
            if(step < cfg.tps.min_step_mm) break;
        }
    }
    out.objective = best;
    return out;
}

TpsStageResult register_tps(const VoxelGrid &src, const VoxelGrid &tgt, const Affine3 &affine_init,
                            const RegistrationConfig &cfg) {
    return register_tps(ObjectiveFunction(working_grid(src, cfg), working_grid(tgt, cfg), cfg), affine_init);
}

// ---------------------------------------------------------------------------------------------
// Full pipeline.

EvaluationReport evaluate(std::span<const KeyPoint> src_points, std::span<const KeyPoint> tgt_points,
                          const Transform &t, int n_samples) {
    const CurveSet tgt = fit_curves("tgt", tgt_points);
    const CurveSet src = fit_curves("src", src_points);
    const auto moved_points = transform_points(src_points, t);
    const CurveSet moved = fit_curves("aligned", moved_points);

    const RmseReport aligned = rmse(moved, tgt, n_samples);
    const RmseReport unaligned = rmse(src, tgt, n_samples);

    EvaluationReport r;
    r.rmse_mm = aligned.rmse_mm;
    r.unaligned_rmse_mm = unaligned.rmse_mm;
    r.per_curve = aligned.per_curve;
    r.unaligned_per_curve = unaligned.per_curve;
    r.skipped = aligned.skipped;
    r.n_samples = n_samples;
    return r;
}

namespace {

// Best-checkpoint tracking for validation-driven early stopping.
class Checkpointer {
public:
    Checkpointer(const StoppingConfig &cfg, RegistrationResult &result) : cfg_(cfg), result_(result) {}

    bool active() const { return cfg_.active(); }

    // Returns false when the run should stop.
    bool check(const std::string &label, const Transform &state) {
        if(!active()){
            best_ = state;
            return true;
        }
        const double score = evaluate(*cfg_.validation_src, *cfg_.validation_tgt, state, cfg_.n_samples).rmse_mm;
        result_.keycurve_trace.push_back({label, score});
        if(!best_score_ || score < *best_score_){
            best_score_ = score;
            best_ = state;
            misses_ = 0;
            return true;
        }
        ++misses_;
        return misses_ <= cfg_.patience;
    }

    const Transform &best() const { return best_; }

private:
    const StoppingConfig &cfg_;
    RegistrationResult &result_;
    std::optional<double> best_score_;
    Transform best_;
    int misses_ = 0;
};

} // namespace

RegistrationResult register_scans(const VoxelGrid &src, const VoxelGrid &tgt, const RegistrationConfig &cfg,
                                  const ProgressCallback &progress) {
    const auto start = std::chrono::steady_clock::now();
    cfg.validate();

    RegistrationResult result;
    const ObjectiveFunction f(working_grid(src, cfg), working_grid(tgt, cfg), cfg);
    Checkpointer checkpoints(cfg.stopping, result);

    auto finish = [&](const Transform &final_state) {
        result.transform = checkpoints.active() ? checkpoints.best() : final_state;
        result.final_objective = f(result.transform);
        result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if(progress) progress(1.0);
        return result;
    };

    const Transform identity{};
    bool keep_going = checkpoints.check("initial", identity);

    const bool with_tps = cfg.tps.enabled && cfg.tps.max_sweeps > 0;
    const double affine_share = with_tps ? 0.7 : 1.0;
    const double budget = static_cast<double>(cfg.affine.restarts) * cfg.affine.max_evaluations + 1.0;
    auto report = [&](double fraction) {
        if(progress) progress(std::clamp(fraction, 0.0, 1.0));
    };

    const AffineStageResult affine = register_affine(f, [&](int evals){ report(affine_share * evals / budget); });
    report(affine_share);
    result.objective_trace = affine.trace;
    result.initial_objective = affine.initial_objective;
    result.affine_objective = affine.objective;
    const Transform affine_state{affine.affine, std::nullopt};
    keep_going = checkpoints.check("affine", affine_state) && keep_going;
    if(!keep_going){
        result.stopped_early = true;
        return finish(affine_state);
    }
    if(!with_tps) return finish(affine_state);

    bool stopped = false;
    const TpsStageResult tps = register_tps(f, affine.affine, [&](int sweep, const Tps3 &t){
        report(affine_share + (1.0 - affine_share) * (sweep + 1) / cfg.tps.max_sweeps);
        if(!checkpoints.check("tps_sweep_" + std::to_string(sweep), Transform{affine.affine, t})){
            stopped = true;
            return false;
        }
        return true;
    });
    result.objective_trace.insert(result.objective_trace.end(), tps.trace.begin(), tps.trace.end());
    result.stopped_early = stopped;
    return finish(Transform{affine.affine, tps.tps});
}

} // namespace curvereg
