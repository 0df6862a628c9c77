#include <fstream>
#include <sstream>

#include <doctest.h>

#include "curvereg/cli.hpp"
#include "curvereg/error.hpp"
#include "curvereg/io.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace curvereg;

namespace {

struct CliRun {
    int code = -1;
    std::string out;
    std::string err;
    json doc() const { return json::parse(out); }
};

CliRun run(std::vector<std::string> args) {
    std::ostringstream out, err;
    CliRun r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

Annotations sample_annotations(const std::string &visit, std::uint64_t seed) {
    Annotations a;
    a.visit_id = visit;
    for(int c = 0; c < 3; ++c){
        auto pts = oracle::random_points(seed + static_cast<std::uint64_t>(c), 8, "curve_" + std::to_string(c));
        for(auto &p : pts) p.visit_id = visit;
        a.points.insert(a.points.end(), pts.begin(), pts.end());
    }
    return a;
}

// One synthetic pair shared by the CLI tests that need volumes.
const testutil::TempDir &synth_dir() {
    static testutil::TempDir dir;
    static bool made = false;
    if(!made){
        const CliRun r = run({"synth", "--out", dir.path.string()});
        REQUIRE(r.code == 0);
        made = true;
    }
    return dir;
}

} // namespace

TEST_CASE("annotation JSON round trip") {
    testutil::TempDir dir;
    const Annotations a = sample_annotations("v1", 3);
    save_annotations(a, dir / "a.json");
    const Annotations b = load_annotations(dir / "a.json");
    CHECK(b.visit_id == "v1");
    REQUIRE(b.points.size() == a.points.size());
    for(std::size_t i = 0; i < a.points.size(); ++i){
        CHECK(b.points[i].curve_id == a.points[i].curve_id);
        CHECK(b.points[i].x == a.points[i].x);
        CHECK(b.points[i].z == a.points[i].z);
        CHECK(b.points[i].source_slice_index == a.points[i].source_slice_index);
    }
    const json j = read_json(dir / "a.json");
    CHECK(j.at("points").at(0).contains("z_mm"));
    CHECK_THROWS_AS(annotations_from_json(json{{"points", 3}}), Error);
}

TEST_CASE("transform JSON round trip") {
    Rng rng(1);
    std::vector<Vec3> src, dst;
    for(int k = 0; k < 2; ++k)
        for(int j = 0; j < 2; ++j)
            for(int i = 0; i < 2; ++i){
                src.emplace_back(10 * i, 10 * j, 10 * k);
                dst.push_back(src.back() + Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
            }
    Transform t;
    t.affine.linear(0, 1) = 0.1;
    t.affine.translation = Vec3(1, 2, 3);
    t.tps = tps_fit(src, dst, 0.5);
    const Transform u = transform_from_json(json::parse(to_json(t).dump()));
    CHECK(u.affine.linear == t.affine.linear);
    CHECK(u.affine.translation == t.affine.translation);
    REQUIRE(u.tps.has_value());
    CHECK(u.tps->lambda == 0.5);
    const Vec3 p(3, 4, 5);
    CHECK(u.apply(p) == t.apply(p));

    json bad = to_json(t);
    bad["tps"]["weights"].erase(0);
    CHECK_THROWS_AS(transform_from_json(bad), Error);
    CHECK(transform_from_json(json{{"affine", to_json(Affine3::identity())}, {"tps", nullptr}}).is_identity());
}

TEST_CASE("config documents reject unknown keys") {
    RegistrationConfig cfg;
    cfg.w_lcka = 0.0;
    cfg.affine.restarts = 2;
    cfg.tps.lattice = {2, 3, 4};
    const RegistrationConfig back = registration_config_from_json(to_json(cfg));
    CHECK(back.w_lcka == 0.0);
    CHECK(back.affine.restarts == 2);
    CHECK(back.tps.lattice == std::array<int, 3>{2, 3, 4});
    try{
        registration_config_from_json(json{{"w_simm", 1.0}});
        FAIL("unknown key accepted");
    }catch(const Error &e){
        CHECK(e.kind() == ErrorKind::InvalidArgument);
    }
    const PhantomSpec s = phantom_spec_from_json(json{{"seed", 9}});
    CHECK(s.seed == 9);
    CHECK(s.dims == PhantomSpec{}.dims);
    CHECK(deformation_from_json(to_json(DeformationConfig::none())).max_translation_mm == 0.0);
}

TEST_CASE("write_json replaces files atomically") {
    testutil::TempDir dir;
    write_json(dir / "x.json", json{{"a", 1}});
    write_json(dir / "x.json", json{{"a", 2}});
    CHECK(read_json(dir / "x.json").at("a") == 2);
    int files = 0;
    for([[maybe_unused]] const auto &e : std::filesystem::directory_iterator(dir.path)) ++files;
    CHECK(files == 1);
    CHECK_THROWS_AS(read_json(dir / "missing.json"), Error);
    CHECK_THROWS_AS(parse_json("{"), Error);
}

TEST_CASE("cli fit") {
    testutil::TempDir dir;
    save_annotations(sample_annotations("v", 5), dir / "a.json");
    const CliRun r = run({"fit", "--points", (dir / "a.json").string(), "--out", (dir / "c.json").string()});
    REQUIRE(r.code == 0);
    const json doc = r.doc();
    CHECK(doc.at("curves").size() == 3);
    CHECK(doc.contains("bands"));
    CHECK(read_json(dir / "c.json").at("curves") == doc.at("curves"));
    CHECK(doc == fit_document(load_annotations(dir / "a.json")));

    Annotations two;
    two.visit_id = "v";
    two.points = oracle::random_points(1, 2);
    save_annotations(two, dir / "two.json");
    const CliRun bad = run({"fit", "--points", (dir / "two.json").string()});
    CHECK(bad.code == kExitData);
    CHECK(bad.doc().at("error") == "InsufficientPoints");
}

TEST_CASE("cli score") {
    testutil::TempDir dir;
    save_annotations(sample_annotations("v", 5), dir / "a.json");
    Annotations moved = sample_annotations("w", 5);
    for(auto &p : moved.points){
        p.x += 3;
        p.y += 4;
    }
    save_annotations(moved, dir / "b.json");

    const CliRun same = run({"score", "--src", (dir / "a.json").string(), "--tgt", (dir / "a.json").string()});
    REQUIRE(same.code == 0);
    CHECK(same.doc().at("rmse_mm") == 0.0);

    const CliRun shifted = run({"score", "--src", (dir / "a.json").string(), "--tgt", (dir / "b.json").string()});
    CHECK(shifted.doc().at("rmse_mm").get<double>() == doctest::Approx(5.0).epsilon(1e-9));

    write_json(dir / "id.json", to_json(Transform{}));
    const CliRun with_id = run({"score", "--src", (dir / "a.json").string(), "--tgt", (dir / "b.json").string(),
                                "--transform", (dir / "id.json").string()});
    CHECK(with_id.doc().at("rmse_mm") == shifted.doc().at("rmse_mm"));

    Transform undo;
    undo.affine.translation = Vec3(3, 4, 0);
    write_json(dir / "undo.json", to_json(undo));
    const CliRun undone = run({"score", "--src", (dir / "a.json").string(), "--tgt", (dir / "b.json").string(),
                               "--transform", (dir / "undo.json").string()});
    CHECK(undone.doc().at("rmse_mm").get<double>() <= 1e-9);

    // Idempotent: the same invocation gives the same document.
    const CliRun again = run({"score", "--src", (dir / "a.json").string(), "--tgt", (dir / "b.json").string()});
    CHECK(again.out == shifted.out);

    const CliRun missing = run({"score", "--src", (dir / "nope.json").string(), "--tgt", (dir / "a.json").string()});
    CHECK(missing.code == kExitData);
    CHECK(missing.doc().at("error") == "MissingFile");
}

TEST_CASE("cli usage errors") {
    CHECK(run({}).code == kExitUsage);
    CHECK(run({"fit"}).code == kExitUsage);
    CHECK(run({"fit", "--points", "a.json", "--bogus", "1"}).code == kExitUsage);
    CHECK(run({"frobnicate"}).code == kExitUsage);
    CHECK(run({"score", "--src", "a", "--tgt", "b", "--samples", "1"}).code == kExitUsage);
    const CliRun help = run({"--help"});
    CHECK(help.code == kExitOk);
}

TEST_CASE("cli synth, eval and residual") {
    const auto &dir = synth_dir();
    CHECK(std::filesystem::exists(dir / "src.vmeta"));
    CHECK(std::filesystem::exists(dir / "tgt.vmeta"));
    CHECK(std::filesystem::exists(dir / "annotations" / "src.json"));
    CHECK(std::filesystem::exists(dir / "gt_transform.json"));

    const std::string src = (dir / "annotations" / "src.json").string();
    const std::string tgt = (dir / "annotations" / "tgt.json").string();
    const CliRun e = run({"eval", "--result", (dir / "gt_transform.json").string(), "--src", src, "--tgt", tgt});
    REQUIRE(e.code == 0);
    CHECK(e.doc().at("rmse_mm").get<double>() <= 0.5);
    CHECK(e.doc().at("unaligned_rmse_mm").get<double>() > 1.0);

    const CliRun r = run({"residual", "--a", (dir / "src.vmeta").string(), "--b", (dir / "src.vmeta").string(),
                          "--out", (dir / "zero").string(), "--channel", "CT"});
    REQUIRE(r.code == 0);
    const VoxelGrid z = load_volume(dir / "zero.vmeta");
    for(float v : z.values(Channel::CT)) CHECK(v == 0.0f);

    const CliRun bad = run({"residual", "--a", (dir / "src.vmeta").string(), "--b", (dir / "src.vmeta").string(),
                            "--out", (dir / "x").string(), "--channel", "MRI"});
    CHECK(bad.code != kExitOk);
}

TEST_CASE("cli synth with a translation spec") {
    testutil::TempDir dir;
    write_json(dir / "spec.json",
               json{{"phantom", {{"seed", 4}}},
                    {"transform", to_json(Transform{Affine3{Mat3::Identity(), Vec3(10, 0, 0)}, std::nullopt})}});
    const CliRun r = run({"synth", "--spec", (dir / "spec.json").string(), "--out", (dir / "pair").string()});
    REQUIRE(r.code == 0);
    CHECK(std::abs(r.doc().at("unaligned_rmse_mm").get<double>() - 10.0) <= 1e-6);

    write_json(dir / "bad.json", json{{"phantom", {{"seed", 4}}}, {"colour", 1}});
    CHECK(run({"synth", "--spec", (dir / "bad.json").string(), "--out", (dir / "x").string()}).code == kExitData);
}

TEST_CASE("cli register") {
    const auto &dir = synth_dir();
    testutil::TempDir out;
    RegistrationConfig cfg;
    cfg.affine.restarts = 1;
    cfg.affine.max_evaluations = 150;
    cfg.tps.enabled = false;
    write_json(out / "cfg.json", to_json(cfg));
    const CliRun r = run({"register", "--src", (dir / "src.vmeta").string(), "--tgt", (dir / "tgt.vmeta").string(),
                          "--config", (out / "cfg.json").string(), "--out", (out / "result.json").string(),
                          "--val-src", (dir / "annotations" / "src.json").string(),
                          "--val-tgt", (dir / "annotations" / "tgt.json").string()});
    REQUIRE(r.code == 0);
    const json doc = read_json(out / "result.json");
    CHECK(doc.contains("affine"));
    CHECK(doc.at("tps").is_null());
    CHECK(doc.at("keycurve_trace").size() >= 1);
    CHECK(doc.at("final_objective").get<double>() <= doc.at("initial_objective").get<double>());

    const CliRun e = run({"eval", "--result", (out / "result.json").string(),
                          "--src", (dir / "annotations" / "src.json").string(),
                          "--tgt", (dir / "annotations" / "tgt.json").string()});
    REQUIRE(e.code == 0);
    CHECK(e.doc().at("rmse_mm").get<double>() <= e.doc().at("unaligned_rmse_mm").get<double>() + 1e-9);
}
