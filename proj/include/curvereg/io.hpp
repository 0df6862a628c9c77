#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvereg/keycurve.hpp"
#include "curvereg/register.hpp"
#include "curvereg/synth.hpp"
#include "curvereg/warp.hpp"

namespace curvereg {

using json = nlohmann::json;

struct Annotations {
    std::string visit_id;
    std::vector<KeyPoint> points;
};

// Whole-document helpers. Reading raises MissingFile / HeaderParse; writing goes through a
// temporary file in the same directory followed by a rename, so readers never see partial files.
json read_json(const std::filesystem::path &path);
void write_json(const std::filesystem::path &path, const json &doc);
json parse_json(const std::string &text); // HeaderParse on malformed text

json to_json(const Annotations &a);
Annotations annotations_from_json(const json &j);
Annotations load_annotations(const std::filesystem::path &path);
void save_annotations(const Annotations &a, const std::filesystem::path &path);

json to_json(const KeyCurve &c);
KeyCurve curve_from_json(const json &j);
json to_json(const CurveSet &s);
CurveSet curves_from_json(const json &j);

// Prediction bands of every curve at n evenly spaced z values covering the fitted span
// extended by a quarter span on each side.
json bands_json(const CurveSet &s, int n = 33, const SelectionUncertainty &sel = {});

json to_json(const Affine3 &a);
Affine3 affine_from_json(const json &j);
json to_json(const Tps3 &t);
Tps3 tps_from_json(const json &j);
json to_json(const Transform &t);
Transform transform_from_json(const json &j);
Transform load_transform(const std::filesystem::path &path);

json to_json(const RmseReport &r);
json to_json(const EvaluationReport &r);
// Transform fields at the top level, so a result file is also a valid transform file.
json to_json(const RegistrationResult &r);

// Config documents: missing keys keep their defaults, unknown keys raise InvalidArgument.
json to_json(const RegistrationConfig &c);
RegistrationConfig registration_config_from_json(const json &j);
json to_json(const PhantomSpec &s);
PhantomSpec phantom_spec_from_json(const json &j);
json to_json(const DeformationConfig &d);
DeformationConfig deformation_from_json(const json &j);

json to_json(const GridGeometry &g);

// Documents shared by the CLI and the HTTP service, so both produce identical output.
json fit_document(const Annotations &a); // curve file plus "bands"
json score_document(const Annotations &src, const Annotations &tgt, const std::optional<Transform> &t,
                    int n_samples = 64);

} // namespace curvereg
