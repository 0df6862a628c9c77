#include "curvereg/cli.hpp"

#include <cmath>
#include <filesystem>
#include <optional>

#include <CLI11.hpp>

#include "curvereg/error.hpp"
#include "curvereg/io.hpp"
#include "curvereg/register.hpp"
#include "curvereg/service.hpp"
#include "curvereg/synth.hpp"

namespace curvereg {

namespace fs = std::filesystem;

namespace {

struct Options {
    // fit
    std::string points, out;
    // score / eval
    std::string src, tgt, transform, result;
    int samples = 64;
    // synth
    std::string spec;
    // register
    std::string config, val_src, val_tgt;
    // residual
    std::string a, b, channel;
    // serve
    std::string root, prefix, static_dir, host = "127.0.0.1";
    int port = 8080;
};

void write_doc(std::ostream &out, const json &doc) { out << doc.dump(2) << '\n'; }

int cmd_fit(const Options &o, std::ostream &out, std::ostream &err) {
    const Annotations a = load_annotations(o.points);
    const json doc = fit_document(a);
    if(!o.out.empty()) write_json(o.out, doc);
    write_doc(out, doc);
    err << "fitted " << doc["curves"].size() << " curve(s) for visit " << a.visit_id << '\n';
    return kExitOk;
}

int cmd_score(const Options &o, std::ostream &out, std::ostream &err) {
    const Annotations src = load_annotations(o.src);
    const Annotations tgt = load_annotations(o.tgt);
    std::optional<Transform> t;
    if(!o.transform.empty()) t = load_transform(o.transform);
    const json doc = score_document(src, tgt, t, o.samples);
    write_doc(out, doc);
    err << "key-curve RMSE " << doc["rmse_mm"].get<double>() << " mm over " << doc["per_curve"].size()
        << " curve(s)\n";
    return kExitOk;
}

int cmd_synth(const Options &o, std::ostream &out, std::ostream &err) {
    const json spec_doc = o.spec.empty() ? json::object() : read_json(o.spec);
    if(!spec_doc.is_object()) throw Error(ErrorKind::InvalidArgument, "synth spec must be a JSON object");
    for(const auto &[k, v] : spec_doc.items()){
        if(k != "phantom" && k != "deformation" && k != "transform"){
            throw Error(ErrorKind::InvalidArgument, "unknown key " + k + " in synth spec");
        }
    }
    const PhantomSpec spec = spec_doc.contains("phantom") ? phantom_spec_from_json(spec_doc["phantom"]) : PhantomSpec{};
    spec.validate();

    PhantomPair pair;
    json resolved{{"phantom", to_json(spec)}};
    if(spec_doc.contains("transform")){
        const Transform gt = transform_from_json(spec_doc["transform"]);
        pair = make_pair(spec, gt, spec.perturbation);
    }else{
        const bool given = spec_doc.contains("deformation");
        DeformationConfig d = given ? deformation_from_json(spec_doc["deformation"]) : DeformationConfig{};
        if(!given || !spec_doc["deformation"].contains("seed")) d.seed = spec.seed; // follows the phantom
        resolved["deformation"] = to_json(d);
        pair = make_pair(spec, d, spec.perturbation);
    }

    const fs::path dir = o.out;
    fs::create_directories(dir / "annotations");
    fs::create_directories(dir / "curves");
    save_volume(pair.src, dir / "src.vmeta");
    save_volume(pair.tgt, dir / "tgt.vmeta");
    save_annotations({"src", pair.src_points}, dir / "annotations" / "src.json");
    save_annotations({"tgt", pair.tgt_points}, dir / "annotations" / "tgt.json");
    write_json(dir / "curves" / "src.json", to_json(pair.src_curves));
    write_json(dir / "curves" / "tgt.json", to_json(pair.tgt_curves));
    write_json(dir / "gt_transform.json", to_json(pair.gt));
    write_json(dir / "spec.json", resolved);

    const RmseReport unaligned = rmse(pair.src_curves, pair.tgt_curves);
    const json doc{
        {"out", dir.string()},
        {"volumes", {(dir / "src.vmeta").string(), (dir / "tgt.vmeta").string()}},
        {"annotations", {(dir / "annotations" / "src.json").string(), (dir / "annotations" / "tgt.json").string()}},
        {"gt_transform", (dir / "gt_transform.json").string()},
        {"n_curves", pair.src_curves.curves.size()},
        {"unaligned_rmse_mm", unaligned.rmse_mm},
        {"spec", resolved},
    };
    write_doc(out, doc);
    err << "wrote phantom pair to " << dir.string() << " (unaligned RMSE " << unaligned.rmse_mm << " mm)\n";
    return kExitOk;
}

int cmd_register(const Options &o, std::ostream &out, std::ostream &err) {
    RegistrationConfig cfg = o.config.empty() ? RegistrationConfig{} : registration_config_from_json(read_json(o.config));
    if(o.val_src.empty() != o.val_tgt.empty()){
        throw Error(ErrorKind::InvalidArgument, "--val-src and --val-tgt must be given together");
    }
    if(!o.val_src.empty()){
        cfg.stopping.validation_src = load_annotations(o.val_src).points;
        cfg.stopping.validation_tgt = load_annotations(o.val_tgt).points;
    }
    cfg.validate();
    const VoxelGrid src = load_volume(o.src);
    const VoxelGrid tgt = load_volume(o.tgt);
    err << "registering " << o.src << " -> " << o.tgt << '\n';
    const RegistrationResult r = register_scans(src, tgt, cfg);
    const json doc = to_json(r);
    write_json(o.out, doc);
    write_doc(out, doc);
    err << "objective " << r.initial_objective << " -> " << r.affine_objective << " (affine) -> "
        << r.final_objective << " in " << r.objective_trace.size() << " evaluations, " << r.wall_time_s << " s\n";
    return kExitOk;
}

int cmd_eval(const Options &o, std::ostream &out, std::ostream &err) {
    const Transform t = load_transform(o.result);
    const Annotations src = load_annotations(o.src);
    const Annotations tgt = load_annotations(o.tgt);
    const EvaluationReport r = evaluate(src.points, tgt.points, t, o.samples);
    write_doc(out, to_json(r));
    err << "key-curve RMSE " << r.rmse_mm << " mm (unaligned " << r.unaligned_rmse_mm << " mm)\n";
    return kExitOk;
}

int cmd_residual(const Options &o, std::ostream &out, std::ostream &err) {
    VoxelGrid a = load_volume(o.a);
    const VoxelGrid b = load_volume(o.b);
    if(!o.transform.empty()) a = warp_volume(a, load_transform(o.transform), b.geometry());

    std::vector<Channel> channels;
    if(!o.channel.empty()){
        channels.push_back(parse_channel(o.channel));
    }else{
        for(Channel c : a.labels()){
            if(b.has(c)) channels.push_back(c);
        }
        if(channels.empty()) throw Error(ErrorKind::MissingChannel, "volumes share no channel");
    }

    VoxelGrid out_grid(b.geometry());
    json stats = json::object();
    for(Channel c : channels){
        const VoxelGrid r = residual_image(a, b, c);
        const auto v = r.values(c);
        double sum_abs = 0.0, sum_sq = 0.0, max_abs = 0.0;
        for(float x : v){
            sum_abs += std::abs(x);
            sum_sq += static_cast<double>(x) * x;
            max_abs = std::max(max_abs, static_cast<double>(std::abs(x)));
        }
        const double n = static_cast<double>(v.size());
        stats[std::string(channel_name(c))] = {{"mean_abs", sum_abs / n}, {"rms", std::sqrt(sum_sq / n)}, {"max_abs", max_abs}};
        out_grid.set_channel(c, std::vector<float>(v.begin(), v.end()), 0.0f);
    }
    fs::path path = o.out;
    if(path.extension() != ".vmeta") path += ".vmeta";
    save_volume(out_grid, path);
    write_doc(out, {{"out", path.string()}, {"channels", stats}});
    err << "wrote residual volume " << path.string() << '\n';
    return kExitOk;
}

int cmd_serve(const Options &o, std::ostream &out, std::ostream &err) {
    ServiceOptions so;
    so.root = o.root;
    so.prefix = o.prefix;
    if(!o.static_dir.empty()) so.static_dir = fs::path(o.static_dir);
    so.host = o.host;
    so.port = o.port;
    Service svc(so);
    const int port = svc.bind();
    write_doc(out, {{"listening", true}, {"host", o.host}, {"port", port}, {"prefix", o.prefix}});
    out.flush();
    err << "serving " << o.root << " on http://" << o.host << ':' << port << o.prefix << '\n';
    svc.listen();
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"PET-CT key-curve registration toolkit", "curvereg"};
    app.require_subcommand(1);
    Options o;

    auto *fit = app.add_subcommand("fit", "Fit quadratic key curves to annotated points");
    fit->add_option("--points", o.points, "Annotation JSON")->required();
    fit->add_option("--out", o.out, "Curve JSON to write");

    auto *score = app.add_subcommand("score", "Key-curve RMSE between two annotation sets");
    score->add_option("--src", o.src, "Source annotation JSON")->required();
    score->add_option("--tgt", o.tgt, "Target annotation JSON")->required();
    score->add_option("--transform", o.transform, "Transform applied to the source points");
    score->add_option("--samples", o.samples, "z samples per curve")->check(CLI::Range(2, 1 << 20));

    auto *synth = app.add_subcommand("synth", "Generate a phantom pair with known deformation");
    synth->add_option("--spec", o.spec, "Spec JSON {phantom, deformation | transform}");
    synth->add_option("--out", o.out, "Output directory")->required();

    auto *reg = app.add_subcommand("register", "Register a source volume onto a target volume");
    reg->add_option("--src", o.src, "Source .vmeta")->required();
    reg->add_option("--tgt", o.tgt, "Target .vmeta")->required();
    reg->add_option("--config", o.config, "Registration config JSON");
    reg->add_option("--out", o.out, "Result JSON to write")->required();
    reg->add_option("--val-src", o.val_src, "Validation source annotations");
    reg->add_option("--val-tgt", o.val_tgt, "Validation target annotations");

    auto *ev = app.add_subcommand("eval", "Evaluate a registration result on annotations");
    ev->add_option("--result", o.result, "Result or transform JSON")->required();
    ev->add_option("--src", o.src, "Source annotation JSON")->required();
    ev->add_option("--tgt", o.tgt, "Target annotation JSON")->required();
    ev->add_option("--samples", o.samples, "z samples per curve")->check(CLI::Range(2, 1 << 20));

    auto *res = app.add_subcommand("residual", "Voxelwise difference a - b");
    res->add_option("--a", o.a, "First .vmeta")->required();
    res->add_option("--b", o.b, "Second .vmeta")->required();
    res->add_option("--out", o.out, "Output volume path")->required();
    res->add_option("--channel", o.channel, "Only this channel");
    res->add_option("--transform", o.transform, "Warp a into b's grid first");

    auto *serve = app.add_subcommand("serve", "Run the HTTP service");
    serve->add_option("--root", o.root, "Data directory")->required();
    serve->add_option("--port", o.port, "Port (0 picks a free one)");
    serve->add_option("--prefix", o.prefix, "Route prefix, e.g. /api");
    serve->add_option("--static", o.static_dir, "Static asset directory");
    serve->add_option("--host", o.host, "Bind address");

    try{
        app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
    }catch(const CLI::CallForHelp &){
        out << app.help();
        return kExitOk;
    }catch(const CLI::ParseError &e){
        write_doc(out, {{"error", "UsageError"}, {"message", e.what()}});
        err << e.what() << '\n';
        return kExitUsage;
    }

    try{
        if(fit->parsed()) return cmd_fit(o, out, err);
        if(score->parsed()) return cmd_score(o, out, err);
        if(synth->parsed()) return cmd_synth(o, out, err);
        if(reg->parsed()) return cmd_register(o, out, err);
        if(ev->parsed()) return cmd_eval(o, out, err);
        if(res->parsed()) return cmd_residual(o, out, err);
        if(serve->parsed()) return cmd_serve(o, out, err);
    }catch(const Error &e){
        write_doc(out, {{"error", e.name()}, {"message", e.what()}});
        err << "error: " << e.what() << '\n';
        return is_numerical(e.kind()) ? kExitNumerical : kExitData;
    }catch(const std::exception &e){
        write_doc(out, {{"error", "IoFailure"}, {"message", e.what()}});
        err << "error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitUsage;
}

} // namespace curvereg
