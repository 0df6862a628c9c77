#include "curvereg/io.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <set>
#include <sstream>

#include "curvereg/error.hpp"

namespace curvereg {

namespace fs = std::filesystem;

json parse_json(const std::string &text) {
    try{
        return json::parse(text);
    }catch(const json::parse_error &e){
        throw Error(ErrorKind::HeaderParse, std::string("malformed JSON: ") + e.what());
    }
}

json read_json(const fs::path &path) {
    std::ifstream in(path);
    if(!in) throw Error(ErrorKind::MissingFile, "cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    try{
        return parse_json(buf.str());
    }catch(const Error &e){
        throw Error(ErrorKind::HeaderParse, path.string() + ": " + e.what());
    }
}

void write_json(const fs::path &path, const json &doc) {
    static std::atomic<unsigned> counter{0};
    fs::path tmp = path;
    tmp += ".tmp" + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::trunc);
        if(!out) throw Error(ErrorKind::IoFailure, "cannot write " + tmp.string());
        out << doc.dump(2) << '\n';
        out.flush();
        if(!out) throw Error(ErrorKind::IoFailure, "failed writing " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if(ec){
        fs::remove(tmp, ec);
        throw Error(ErrorKind::IoFailure, "cannot replace " + path.string());
    }
}

namespace {

// Reads an object field by field; anything not asked for is reported by finish().
class Fields {
public:
    Fields(const json &j, std::string what) : j_(j), what_(std::move(what)) {
        if(!j.is_object()) throw Error(ErrorKind::InvalidArgument, what_ + " must be a JSON object");
    }

    template <class T>
    void get(const char *key, T &out) {
        seen_.insert(key);
        if(!j_.contains(key)) return;
        try{
            out = j_.at(key).get<T>();
        }catch(const json::exception &){
            throw Error(ErrorKind::InvalidArgument, what_ + "." + key + " has the wrong type");
        }
    }

    const json *sub(const char *key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for(const auto &[k, v] : j_.items()){
            if(!seen_.count(k)) throw Error(ErrorKind::InvalidArgument, "unknown key " + what_ + "." + k);
        }
    }

private:
    const json &j_;
    std::string what_;
    std::set<std::string> seen_;
};

// Required-field access for data documents; type errors become HeaderParse.
template <class T>
T need(const json &j, const char *key, const char *what) {
    if(!j.is_object() || !j.contains(key)){
        throw Error(ErrorKind::HeaderParse, std::string(what) + " is missing \"" + key + "\"");
    }
    try{
        return j.at(key).get<T>();
    }catch(const json::exception &){
        throw Error(ErrorKind::HeaderParse, std::string(what) + " field \"" + key + "\" has the wrong type");
    }
}

json vec_json(const Vec3 &v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json &j, const char *what) {
    if(!j.is_array() || j.size() != 3){
        throw Error(ErrorKind::HeaderParse, std::string(what) + " must be a 3-vector");
    }
    try{
        return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
    }catch(const json::exception &){
        throw Error(ErrorKind::HeaderParse, std::string(what) + " must hold numbers");
    }
}

json mat_json(const Eigen::Matrix3d &m) {
    json rows = json::array();
    for(int r = 0; r < 3; ++r) rows.push_back(json::array({m(r, 0), m(r, 1), m(r, 2)}));
    return rows;
}

Eigen::Matrix3d mat_from(const json &j, const char *what) {
    if(!j.is_array() || j.size() != 3){
        throw Error(ErrorKind::HeaderParse, std::string(what) + " must be a 3x3 matrix");
    }
    Eigen::Matrix3d m;
    for(int r = 0; r < 3; ++r) m.row(r) = vec_from(j[static_cast<std::size_t>(r)], what).transpose();
    return m;
}

json coeffs_json(const QuadCoeffs &c) { return json::array({c[0], c[1], c[2]}); }

QuadCoeffs coeffs_from(const json &j, const char *what) {
    const Vec3 v = vec_from(j, what);
    return {v.x(), v.y(), v.z()};
}

} // namespace

// ---------------------------------------------------------------------------------------------
// Annotations and curves.

json to_json(const Annotations &a) {
    json pts = json::array();
    for(const auto &p : a.points){
        pts.push_back({{"curve_id", p.curve_id}, {"z_mm", p.z}, {"x_mm", p.x}, {"y_mm", p.y},
                       {"slice", p.source_slice_index}});
    }
    return {{"visit_id", a.visit_id}, {"points", pts}};
}

Annotations annotations_from_json(const json &j) {
    Annotations a;
    a.visit_id = need<std::string>(j, "visit_id", "annotation file");
    const json pts = need<json>(j, "points", "annotation file");
    if(!pts.is_array()) throw Error(ErrorKind::HeaderParse, "annotation points must be an array");
    for(const auto &p : pts){
        KeyPoint k;
        k.curve_id = need<std::string>(p, "curve_id", "annotation point");
        k.z = need<double>(p, "z_mm", "annotation point");
        k.x = need<double>(p, "x_mm", "annotation point");
        k.y = need<double>(p, "y_mm", "annotation point");
        k.source_slice_index = p.contains("slice") ? need<int>(p, "slice", "annotation point") : 0;
        k.visit_id = a.visit_id;
        a.points.push_back(std::move(k));
    }
    return a;
}

Annotations load_annotations(const fs::path &path) { return annotations_from_json(read_json(path)); }

void save_annotations(const Annotations &a, const fs::path &path) { write_json(path, to_json(a)); }

json to_json(const KeyCurve &c) {
    return {{"curve_id", c.curve_id},
            {"coeff_x", coeffs_json(c.coeff_x)},
            {"coeff_y", coeffs_json(c.coeff_y)},
            {"z_min", c.z_min},
            {"z_max", c.z_max},
            {"residual_var_x", c.residual_var_x},
            {"residual_var_y", c.residual_var_y},
            {"coeff_cov_x", mat_json(c.coeff_cov_x)},
            {"coeff_cov_y", mat_json(c.coeff_cov_y)},
            {"n_points", c.n_points}};
}

KeyCurve curve_from_json(const json &j) {
    KeyCurve c;
    c.curve_id = need<std::string>(j, "curve_id", "curve");
    c.coeff_x = coeffs_from(need<json>(j, "coeff_x", "curve"), "coeff_x");
    c.coeff_y = coeffs_from(need<json>(j, "coeff_y", "curve"), "coeff_y");
    c.z_min = need<double>(j, "z_min", "curve");
    c.z_max = need<double>(j, "z_max", "curve");
    c.residual_var_x = need<double>(j, "residual_var_x", "curve");
    c.residual_var_y = need<double>(j, "residual_var_y", "curve");
    c.coeff_cov_x = mat_from(need<json>(j, "coeff_cov_x", "curve"), "coeff_cov_x");
    c.coeff_cov_y = mat_from(need<json>(j, "coeff_cov_y", "curve"), "coeff_cov_y");
    c.n_points = need<int>(j, "n_points", "curve");
    return c;
}

json to_json(const CurveSet &s) {
    json curves = json::array();
    for(const auto &[id, c] : s.curves) curves.push_back(to_json(c));
    return {{"visit_id", s.visit_id}, {"curves", curves}};
}

CurveSet curves_from_json(const json &j) {
    CurveSet s;
    s.visit_id = need<std::string>(j, "visit_id", "curve file");
    const json curves = need<json>(j, "curves", "curve file");
    if(!curves.is_array()) throw Error(ErrorKind::HeaderParse, "curves must be an array");
    for(const auto &c : curves){
        KeyCurve k = curve_from_json(c);
        s.curves[k.curve_id] = std::move(k);
    }
    return s;
}

json bands_json(const CurveSet &s, int n, const SelectionUncertainty &sel) {
    json out = json::object();
    for(const auto &[id, c] : s.curves){
        const double span = c.z_max - c.z_min;
        const double lo = c.z_min - 0.25 * span, hi = c.z_max + 0.25 * span;
        json rows = json::array();
        for(int i = 0; i < n; ++i){
            const double z = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1);
            const Point2 p = eval_curve(c, z);
            const PredictionBand b = prediction_band(c, z, sel);
            rows.push_back({{"z_mm", z}, {"x_mm", p.x}, {"y_mm", p.y}, {"sigma_x", b.sigma_x},
                            {"sigma_y", b.sigma_y}, {"total_x", b.total_x}, {"total_y", b.total_y}});
        }
        out[id] = rows;
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Transforms.

json to_json(const Affine3 &a) {
    return {{"linear", mat_json(a.linear)}, {"translation", vec_json(a.translation)}};
}

Affine3 affine_from_json(const json &j) {
    Affine3 a;
    a.linear = mat_from(need<json>(j, "linear", "affine"), "affine.linear");
    a.translation = vec_from(need<json>(j, "translation", "affine"), "affine.translation");
    return a;
}

json to_json(const Tps3 &t) {
    json controls = json::array(), weights = json::array();
    for(const auto &c : t.controls) controls.push_back(vec_json(c));
    for(const auto &w : t.weights) weights.push_back(vec_json(w));
    return {{"controls", controls}, {"weights", weights}, {"affine_part", to_json(t.affine_part)},
            {"lambda", t.lambda}};
}

Tps3 tps_from_json(const json &j) {
    Tps3 t;
    const json controls = need<json>(j, "controls", "tps");
    const json weights = need<json>(j, "weights", "tps");
    if(!controls.is_array() || !weights.is_array()){
        throw Error(ErrorKind::HeaderParse, "tps controls and weights must be arrays");
    }
    for(const auto &c : controls) t.controls.push_back(vec_from(c, "tps control"));
    for(const auto &w : weights) t.weights.push_back(vec_from(w, "tps weight"));
    if(t.controls.size() != t.weights.size()){
        throw Error(ErrorKind::ControlMismatch, "tps needs one weight per control");
    }
    t.affine_part = affine_from_json(need<json>(j, "affine_part", "tps"));
    t.lambda = need<double>(j, "lambda", "tps");
    return t;
}

json to_json(const Transform &t) {
    return {{"affine", to_json(t.affine)}, {"tps", t.tps ? to_json(*t.tps) : json(nullptr)}};
}

Transform transform_from_json(const json &j) {
    Transform t;
    if(!j.is_object()) throw Error(ErrorKind::HeaderParse, "transform must be a JSON object");
    if(j.contains("affine")) t.affine = affine_from_json(j.at("affine"));
    if(j.contains("tps") && !j.at("tps").is_null()) t.tps = tps_from_json(j.at("tps"));
    return t;
}

Transform load_transform(const fs::path &path) { return transform_from_json(read_json(path)); }

// ---------------------------------------------------------------------------------------------
// Reports.

namespace {

json scores_json(const std::vector<CurveScore> &scores) {
    json out = json::array();
    for(const auto &s : scores){
        out.push_back({{"curve_id", s.curve_id}, {"mean_distance_mm", s.mean_distance_mm}, {"rmse_mm", s.rmse_mm}});
    }
    return out;
}

} // namespace

json to_json(const RmseReport &r) {
    return {{"rmse_mm", r.rmse_mm}, {"per_curve", scores_json(r.per_curve)}, {"skipped", r.skipped},
            {"n_samples", r.n_samples}};
}

json to_json(const EvaluationReport &r) {
    return {{"rmse_mm", r.rmse_mm},
            {"unaligned_rmse_mm", r.unaligned_rmse_mm},
            {"per_curve", scores_json(r.per_curve)},
            {"unaligned_per_curve", scores_json(r.unaligned_per_curve)},
            {"skipped", r.skipped},
            {"n_samples", r.n_samples}};
}

json to_json(const RegistrationResult &r) {
    json j = to_json(r.transform);
    json checks = json::array();
    for(const auto &c : r.keycurve_trace) checks.push_back({{"label", c.label}, {"rmse_mm", c.rmse_mm}});
    j["objective_trace"] = r.objective_trace;
    j["keycurve_trace"] = checks;
    j["stopped_early"] = r.stopped_early;
    j["initial_objective"] = r.initial_objective;
    j["affine_objective"] = r.affine_objective;
    j["final_objective"] = r.final_objective;
    j["wall_time_s"] = r.wall_time_s;
    return j;
}

// ---------------------------------------------------------------------------------------------
// Configs.

json to_json(const RegistrationConfig &c) {
    json channels = json::array();
    for(Channel ch : c.features.channels) channels.push_back(std::string(channel_name(ch)));
    return {
        {"features", {{"scales_mm", c.features.scales_mm}, {"cell_mm", c.features.cell_mm}, {"channels", channels}}},
        {"w_sim", c.w_sim},
        {"w_lcka", c.w_lcka},
        {"working_spacing_mm", c.working_spacing_mm},
        {"pet_epsilon", c.pet_epsilon},
        {"affine",
         {{"simplex_translation_mm", c.affine.simplex_translation_mm},
          {"simplex_linear", c.affine.simplex_linear},
          {"max_evaluations", c.affine.max_evaluations},
          {"restarts", c.affine.restarts},
          {"seed", c.affine.seed},
          {"f_tolerance", c.affine.f_tolerance}}},
        {"tps",
         {{"enabled", c.tps.enabled},
          {"lattice", c.tps.lattice},
          {"lambda", c.tps.lambda},
          {"step_mm", c.tps.step_mm},
          {"min_step_mm", c.tps.min_step_mm},
          {"max_sweeps", c.tps.max_sweeps}}},
        {"stopping", {{"patience", c.stopping.patience}, {"n_samples", c.stopping.n_samples}}},
        {"inverse",
         {{"damping", c.inverse.damping},
          {"tolerance_mm", c.inverse.tolerance_mm},
          {"max_iterations", c.inverse.max_iterations}}},
    };
}

RegistrationConfig registration_config_from_json(const json &j) {
    RegistrationConfig c;
    Fields top(j, "config");
    if(const json *f = top.sub("features")){
        Fields ff(*f, "features");
        ff.get("scales_mm", c.features.scales_mm);
        ff.get("cell_mm", c.features.cell_mm);
        std::vector<std::string> names;
        ff.get("channels", names);
        if(f->contains("channels")){
            c.features.channels.clear();
            try{
                for(const auto &n : names) c.features.channels.push_back(parse_channel(n));
            }catch(const Error &e){
                throw Error(ErrorKind::InvalidArgument, e.what());
            }
        }
        ff.finish();
    }
    top.get("w_sim", c.w_sim);
    top.get("w_lcka", c.w_lcka);
    top.get("working_spacing_mm", c.working_spacing_mm);
    top.get("pet_epsilon", c.pet_epsilon);
    if(const json *a = top.sub("affine")){
        Fields fa(*a, "affine");
        fa.get("simplex_translation_mm", c.affine.simplex_translation_mm);
        fa.get("simplex_linear", c.affine.simplex_linear);
        fa.get("max_evaluations", c.affine.max_evaluations);
        fa.get("restarts", c.affine.restarts);
        fa.get("seed", c.affine.seed);
        fa.get("f_tolerance", c.affine.f_tolerance);
        fa.finish();
    }
    if(const json *t = top.sub("tps")){
        Fields ft(*t, "tps");
        ft.get("enabled", c.tps.enabled);
        ft.get("lattice", c.tps.lattice);
        ft.get("lambda", c.tps.lambda);
        ft.get("step_mm", c.tps.step_mm);
        ft.get("min_step_mm", c.tps.min_step_mm);
        ft.get("max_sweeps", c.tps.max_sweeps);
        ft.finish();
    }
    if(const json *s = top.sub("stopping")){
        Fields fs_(*s, "stopping");
        fs_.get("patience", c.stopping.patience);
        fs_.get("n_samples", c.stopping.n_samples);
        fs_.finish();
    }
    if(const json *i = top.sub("inverse")){
        Fields fi(*i, "inverse");
        fi.get("damping", c.inverse.damping);
        fi.get("tolerance_mm", c.inverse.tolerance_mm);
        fi.get("max_iterations", c.inverse.max_iterations);
        fi.finish();
    }
    top.finish();
    return c;
}

json to_json(const PhantomSpec &s) {
    return {{"dims", s.dims},
            {"spacing_mm", s.spacing_mm},
            {"seed", s.seed},
            {"n_structures", s.n_structures},
            {"n_tubes", s.n_tubes},
            {"ct_range", s.ct_range},
            {"pet_range", s.pet_range},
            {"perturbation", s.perturbation},
            {"annotation_stride", s.annotation_stride}};
}

PhantomSpec phantom_spec_from_json(const json &j) {
    PhantomSpec s;
    Fields f(j, "phantom");
    f.get("dims", s.dims);
    f.get("spacing_mm", s.spacing_mm);
    f.get("seed", s.seed);
    f.get("n_structures", s.n_structures);
    f.get("n_tubes", s.n_tubes);
    f.get("ct_range", s.ct_range);
    f.get("pet_range", s.pet_range);
    f.get("perturbation", s.perturbation);
    f.get("annotation_stride", s.annotation_stride);
    f.finish();
    return s;
}

json to_json(const DeformationConfig &d) {
    return {{"max_rotation_deg", d.max_rotation_deg},
            {"max_translation_mm", d.max_translation_mm},
            {"max_log_scale", d.max_log_scale},
            {"max_shear", d.max_shear},
            {"tps_grid", d.tps_grid},
            {"max_tps_jitter_mm", d.max_tps_jitter_mm},
            {"seed", d.seed}};
}

DeformationConfig deformation_from_json(const json &j) {
    DeformationConfig d;
    Fields f(j, "deformation");
    f.get("max_rotation_deg", d.max_rotation_deg);
    f.get("max_translation_mm", d.max_translation_mm);
    f.get("max_log_scale", d.max_log_scale);
    f.get("max_shear", d.max_shear);
    f.get("tps_grid", d.tps_grid);
    f.get("max_tps_jitter_mm", d.max_tps_jitter_mm);
    f.get("seed", d.seed);
    f.finish();
    return d;
}

json to_json(const GridGeometry &g) {
    return {{"dims", g.dims}, {"spacing_mm", vec_json(g.spacing)}, {"origin_mm", vec_json(g.origin)}};
}

json fit_document(const Annotations &a) {
    const CurveSet curves = fit_curves(a.visit_id, a.points);
    json doc = to_json(curves);
    doc["bands"] = bands_json(curves);
    return doc;
}

json score_document(const Annotations &src, const Annotations &tgt, const std::optional<Transform> &t,
                    int n_samples) {
    const CurveSet tgt_curves = fit_curves(tgt.visit_id, tgt.points);
    const CurveSet src_curves = t ? fit_curves(src.visit_id, transform_points(std::span<const KeyPoint>(src.points), *t))
                                  : fit_curves(src.visit_id, src.points);
    return to_json(rmse(src_curves, tgt_curves, n_samples));
}

} // namespace curvereg
