#include "curvereg/service.hpp"

#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <regex>
#include <thread>
#include <vector>

#include "curvereg/error.hpp"
#include "curvereg/io.hpp"
#include "curvereg/parallel.hpp"
#include "curvereg/register.hpp"
#include "curvereg/render.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen parameter names.
#include <httplib.h>

namespace curvereg {

namespace fs = std::filesystem;

namespace {

constexpr const char *kId = R"(([A-Za-z0-9_][A-Za-z0-9_.\-]*))";

int status_for(ErrorKind k) {
    switch(k){
    case ErrorKind::MissingFile:
    case ErrorKind::IndexOutOfRange:
    case ErrorKind::MissingChannel:
        return 404;
    case ErrorKind::HeaderParse:
    case ErrorKind::InvalidArgument:
        return 400;
    default:
        return 422;
    }
}

void send_json(httplib::Response &res, const json &body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response &res, int status, std::string_view name, const std::string &message) {
    send_json(res, {{"error", name}, {"message", message}}, status);
}

std::string regex_escape(const std::string &s) {
    static const std::regex special(R"([.^$|()\[\]{}*+?\\])");
    return std::regex_replace(s, special, R"(\$&)");
}

double query_double(const httplib::Request &req, const char *key, double fallback) {
    if(!req.has_param(key)) return fallback;
    try{
        std::size_t used = 0;
        const std::string v = req.get_param_value(key);
        const double d = std::stod(v, &used);
        if(used != v.size()) throw std::invalid_argument(key);
        return d;
    }catch(const std::exception &){
        throw Error(ErrorKind::InvalidArgument, std::string("query parameter ") + key + " must be a number");
    }
}

int query_int(const httplib::Request &req, const char *key, int fallback) {
    const double d = query_double(req, key, fallback);
    if(d != std::floor(d)) throw Error(ErrorKind::InvalidArgument, std::string("query parameter ") + key + " must be an integer");
    return static_cast<int>(d);
}

std::optional<std::array<float, 2>> query_window(const httplib::Request &req) {
    if(!req.has_param("window")) return std::nullopt;
    const std::string v = req.get_param_value("window");
    const auto comma = v.find(',');
    try{
        if(comma == std::string::npos) throw std::invalid_argument("window");
        return std::array<float, 2>{std::stof(v.substr(0, comma)), std::stof(v.substr(comma + 1))};
    }catch(const std::exception &){
        throw Error(ErrorKind::InvalidArgument, "window must be \"lo,hi\"");
    }
}

// Slice z of g and the one above it; grids need two samples per axis.
GridGeometry slice_geometry(const GridGeometry &g, int z) {
    if(z < 0 || z >= g.dims[2]){
        throw Error(ErrorKind::IndexOutOfRange, "slice " + std::to_string(z) + " outside [0, " +
                    std::to_string(g.dims[2]) + ")");
    }
    GridGeometry s = g;
    s.dims[2] = 2;
    s.origin.z() += z * g.spacing.z();
    return s;
}

struct JobState {
    std::string id;
    std::string session;
    std::string state = "queued";
    double progress = 0.0;
    std::string error;
};

json job_json(const JobState &j) {
    json out{{"job_id", j.id}, {"session", j.session}, {"state", j.state}, {"progress", j.progress}};
    if(j.state == "done") out["result_id"] = j.id;
    if(j.state == "failed") out["error"] = j.error;
    return out;
}

} // namespace

struct Service::Impl {
    ServiceOptions opts;
    httplib::Server server;
    int bound_port = -1;
    std::thread listener;

    std::mutex volumes_mu;
    struct CachedVolume {
        fs::file_time_type stamp;
        std::shared_ptr<const VoxelGrid> grid;
    };
    std::map<std::string, CachedVolume> volumes;

    std::mutex visit_locks_mu;
    std::map<std::string, std::shared_ptr<std::mutex>> visit_locks;

    std::mutex jobs_mu;
    std::condition_variable jobs_cv;
    std::map<std::string, std::shared_ptr<JobState>> jobs;
    std::map<std::string, std::string> active_by_session;
    std::deque<std::function<void()>> queue;
    std::vector<std::thread> workers;
    bool stopping = false;
    int job_counter = 0;

    explicit Impl(ServiceOptions o) : opts(std::move(o)) {
        if(!fs::is_directory(opts.root)){
            throw Error(ErrorKind::MissingFile, "data root " + opts.root.string() + " is not a directory");
        }
        fs::create_directories(opts.root / "annotations");
        fs::create_directories(opts.root / "results");
        const int n = opts.workers > 0 ? opts.workers : worker_count();
        for(int i = 0; i < n; ++i) workers.emplace_back([this]{ work(); });
        routes();
    }

    ~Impl() {
        server.stop();
        if(listener.joinable()) listener.join();
        {
            std::lock_guard lock(jobs_mu);
            stopping = true;
        }
        jobs_cv.notify_all();
        for(auto &w : workers) w.join();
    }

    void work() {
        for(;;){
            std::function<void()> task;
            {
                std::unique_lock lock(jobs_mu);
                jobs_cv.wait(lock, [&]{ return stopping || !queue.empty(); });
                if(stopping) return;
                task = std::move(queue.front());
                queue.pop_front();
            }
            task();
        }
    }

    // --- data access ----------------------------------------------------------------------

    std::shared_ptr<const VoxelGrid> volume(const std::string &id) {
        const fs::path path = opts.root / (id + ".vmeta");
        std::error_code ec;
        const auto stamp = fs::last_write_time(path, ec);
        if(ec) throw Error(ErrorKind::MissingFile, "unknown volume " + id);
        std::lock_guard lock(volumes_mu);
        auto it = volumes.find(id);
        if(it == volumes.end() || it->second.stamp != stamp){
            auto grid = std::make_shared<const VoxelGrid>(load_volume(path));
            it = volumes.insert_or_assign(id, CachedVolume{stamp, std::move(grid)}).first;
        }
        return it->second.grid;
    }

    fs::path annotation_path(const std::string &visit) const {
        return opts.root / "annotations" / (visit + ".json");
    }

    Annotations annotations(const std::string &visit) const {
        const fs::path path = annotation_path(visit);
        if(!fs::exists(path)) throw Error(ErrorKind::MissingFile, "no annotations for visit " + visit);
        return load_annotations(path);
    }

    std::shared_ptr<std::mutex> visit_lock(const std::string &visit) {
        std::lock_guard lock(visit_locks_mu);
        auto &m = visit_locks[visit];
        if(!m) m = std::make_shared<std::mutex>();
        return m;
    }

    Transform result_transform(const std::string &id) const {
        const fs::path path = opts.root / "results" / (id + ".json");
        if(!fs::exists(path)) throw Error(ErrorKind::MissingFile, "unknown result " + id);
        return load_transform(path);
    }

    static std::string need_string(const json &body, const char *key) {
        if(!body.is_object() || !body.contains(key) || !body.at(key).is_string()){
            throw Error(ErrorKind::InvalidArgument, std::string("request needs string field \"") + key + "\"");
        }
        const std::string v = body.at(key).get<std::string>();
        if(!std::regex_match(v, std::regex(kId))) throw Error(ErrorKind::InvalidArgument, "invalid id " + v);
        return v;
    }

    // --- routing --------------------------------------------------------------------------

    using Handler = std::function<void(const httplib::Request &, httplib::Response &)>;

    Handler guarded(Handler h) {
        return [h = std::move(h)](const httplib::Request &req, httplib::Response &res) {
            try{
                h(req, res);
            }catch(const Error &e){
                send_error(res, status_for(e.kind()), e.name(), e.what());
            }catch(const json::exception &e){
                send_error(res, 400, "InvalidArgument", e.what());
            }catch(const std::exception &e){
                send_error(res, 500, "InternalError", e.what());
            }
        };
    }

    std::string route(const std::string &pattern) const { return regex_escape(opts.prefix) + pattern; }

    void routes() {
        const std::string id = kId;

        server.Get(route("/volumes"), guarded([this](const auto &, auto &res){ list_volumes(res); }));
        server.Get(route("/volumes/" + id + "/slice"), guarded([this](const auto &req, auto &res){ slice(req, res); }));
        server.Get(route("/volumes/" + id + "/overlay"), guarded([this](const auto &req, auto &res){ overlay(req, res); }));
        server.Get(route("/annotations/" + id), guarded([this](const auto &req, auto &res){
            send_json(res, to_json(annotations(req.matches[1])));
        }));
        server.Put(route("/annotations/" + id), guarded([this](const auto &req, auto &res){ put_annotations(req, res); }));
        server.Post(route("/fit"), guarded([this](const auto &req, auto &res){
            const json body = parse_json(req.body);
            send_json(res, fit_document(annotations(need_string(body, "visit"))));
        }));
        server.Post(route("/score"), guarded([this](const auto &req, auto &res){ score(req, res); }));
        server.Post(route("/register"), guarded([this](const auto &req, auto &res){ submit(req, res); }));
        server.Get(route("/jobs/" + id), guarded([this](const auto &req, auto &res){
            std::lock_guard lock(jobs_mu);
            const auto it = jobs.find(req.matches[1]);
            if(it == jobs.end()) throw Error(ErrorKind::MissingFile, "unknown job " + std::string(req.matches[1]));
            send_json(res, job_json(*it->second));
        }));
        server.Get(route("/results/" + id), guarded([this](const auto &req, auto &res){
            const fs::path path = opts.root / "results" / (std::string(req.matches[1]) + ".json");
            if(!fs::exists(path)) throw Error(ErrorKind::MissingFile, "unknown result " + std::string(req.matches[1]));
            send_json(res, read_json(path));
        }));

        if(opts.static_dir){
            const std::string mount = opts.prefix.empty() ? "/" : opts.prefix + "/";
            if(!server.set_mount_point(mount, opts.static_dir->string())){
                throw Error(ErrorKind::MissingFile, "static directory " + opts.static_dir->string() + " not found");
            }
        }
    }

    void list_volumes(httplib::Response &res) {
        std::vector<std::string> ids;
        for(const auto &entry : fs::directory_iterator(opts.root)){
            if(entry.is_regular_file() && entry.path().extension() == ".vmeta"){
                ids.push_back(entry.path().stem().string());
            }
        }
        std::sort(ids.begin(), ids.end());
        json out = json::array();
        for(const auto &id : ids){
            const auto grid = volume(id);
            json channels = json::array();
            for(Channel c : grid->labels()) channels.push_back(std::string(channel_name(c)));
            json entry = to_json(grid->geometry());
            entry["id"] = id;
            entry["channels"] = channels;
            out.push_back(entry);
        }
        send_json(res, out);
    }

    void slice(const httplib::Request &req, httplib::Response &res) {
        const auto grid = volume(req.matches[1]);
        const Channel c = req.has_param("channel") ? parse_channel(req.get_param_value("channel")) : Channel::CT;
        const int z = query_int(req, "z", grid->geometry().dims[2] / 2);
        const auto window = query_window(req).value_or(default_window(*grid, c));
        res.set_content(encode_png(gray_raster(extract_slice(*grid, c, z, window))), "image/png");
    }

    void overlay(const httplib::Request &req, httplib::Response &res) {
        const auto ct_grid = volume(req.matches[1]);
        const int z = query_int(req, "z", ct_grid->geometry().dims[2] / 2);
        const double alpha = query_double(req, "alpha", 0.5);
        const SliceImage ct = extract_slice(*ct_grid, Channel::CT, z, default_window(*ct_grid, Channel::CT));

        const std::string pet_id = req.has_param("pet_from") ? req.get_param_value("pet_from") : std::string(req.matches[1]);
        if(!std::regex_match(pet_id, std::regex(kId))) throw Error(ErrorKind::InvalidArgument, "invalid volume id");
        const auto pet_grid = volume(pet_id);
        const auto pet_window = default_window(*pet_grid, Channel::PET);

        SliceImage pet;
        if(req.has_param("result")){
            // Aligned overlay: the PET volume is warped into the CT volume's frame.
            const std::string result_id = req.get_param_value("result");
            if(!std::regex_match(result_id, std::regex(kId))) throw Error(ErrorKind::InvalidArgument, "invalid result id");
            const Transform t = result_transform(result_id);
            const VoxelGrid warped = warp_volume(*pet_grid, t, slice_geometry(ct_grid->geometry(), z));
            pet = extract_slice(warped, Channel::PET, 0, pet_window);
        }else{
            if(!(pet_grid->geometry() == ct_grid->geometry())){
                throw Error(ErrorKind::GridMismatch, "overlay volumes differ in geometry; pass a result to align them");
            }
            pet = extract_slice(*pet_grid, Channel::PET, z, pet_window);
        }
        res.set_content(encode_png(overlay_raster(ct, pet, alpha)), "image/png");
    }

    void put_annotations(const httplib::Request &req, httplib::Response &res) {
        const std::string visit = req.matches[1];
        Annotations a = annotations_from_json(parse_json(req.body));
        if(a.visit_id != visit){
            throw Error(ErrorKind::InvalidArgument, "body visit_id " + a.visit_id + " does not match " + visit);
        }
        const auto lock = visit_lock(visit);
        std::lock_guard guard(*lock);
        save_annotations(a, annotation_path(visit));
        send_json(res, to_json(a));
    }

    void score(const httplib::Request &req, httplib::Response &res) {
        const json body = parse_json(req.body);
        const Annotations src = annotations(need_string(body, "src"));
        const Annotations tgt = annotations(need_string(body, "tgt"));
        std::optional<Transform> t;
        if(body.contains("transform") && !body.at("transform").is_null()){
            const json &tj = body.at("transform");
            if(tj.is_string()){
                t = result_transform(need_string(body, "transform"));
            }else{
                t = transform_from_json(tj);
            }
        }
        int n = 64;
        if(body.contains("n_samples")) n = body.at("n_samples").get<int>();
        send_json(res, score_document(src, tgt, t, n));
    }

    void submit(const httplib::Request &req, httplib::Response &res) {
        const json body = parse_json(req.body);
        const std::string src_id = need_string(body, "src");
        const std::string tgt_id = need_string(body, "tgt");
        RegistrationConfig cfg;
        if(body.contains("config") && !body.at("config").is_null()){
            cfg = registration_config_from_json(body.at("config"));
        }
        if(body.contains("val_src") || body.contains("val_tgt")){
            cfg.stopping.validation_src = annotations(need_string(body, "val_src")).points;
            cfg.stopping.validation_tgt = annotations(need_string(body, "val_tgt")).points;
        }
        cfg.validate();
        const std::string session = body.contains("session") ? need_string(body, "session") : src_id + "__" + tgt_id;
        // Load up front so missing volumes are reported synchronously.
        const auto src = volume(src_id);
        const auto tgt = volume(tgt_id);

        std::shared_ptr<JobState> job;
        {
            std::lock_guard lock(jobs_mu);
            if(const auto it = active_by_session.find(session); it != active_by_session.end()){
                send_error(res, 409, "JobRunning", "job " + it->second + " is still running for session " + session);
                return;
            }
            job = std::make_shared<JobState>();
            job->id = "job" + std::to_string(++job_counter);
            job->session = session;
            jobs[job->id] = job;
            active_by_session[session] = job->id;
            queue.push_back([this, job, src, tgt, cfg]{ run_job(job, *src, *tgt, cfg); });
        }
        jobs_cv.notify_one();
        std::lock_guard lock(jobs_mu);
        send_json(res, job_json(*job), 202);
    }

    void run_job(const std::shared_ptr<JobState> &job, const VoxelGrid &src, const VoxelGrid &tgt,
                 const RegistrationConfig &cfg) {
        {
            std::lock_guard lock(jobs_mu);
            job->state = "running";
        }
        std::string state = "done", error;
        try{
            const RegistrationResult r = register_scans(src, tgt, cfg, [&](double p){
                std::lock_guard lock(jobs_mu);
                job->progress = p;
            });
            write_json(opts.root / "results" / (job->id + ".json"), to_json(r));
        }catch(const Error &e){
            state = "failed";
            error = e.what();
        }catch(const std::exception &e){
            state = "failed";
            error = e.what();
        }
        std::lock_guard lock(jobs_mu);
        job->state = state;
        job->error = error;
        if(state == "done") job->progress = 1.0;
        active_by_session.erase(job->session);
    }
};

Service::Service(ServiceOptions opts) : impl_(std::make_unique<Impl>(std::move(opts))) {}

Service::~Service() = default;

int Service::bind() {
    if(impl_->bound_port >= 0) return impl_->bound_port;
    if(impl_->opts.port == 0){
        impl_->bound_port = impl_->server.bind_to_any_port(impl_->opts.host);
    }else if(impl_->server.bind_to_port(impl_->opts.host, impl_->opts.port)){
        impl_->bound_port = impl_->opts.port;
    }
    if(impl_->bound_port < 0){
        throw Error(ErrorKind::IoFailure, "cannot bind " + impl_->opts.host + ":" + std::to_string(impl_->opts.port));
    }
    return impl_->bound_port;
}

void Service::listen() {
    bind();
    impl_->server.listen_after_bind();
}

void Service::start() {
    bind();
    impl_->listener = std::thread([this]{ impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

void Service::stop() {
    impl_->server.stop();
    if(impl_->listener.joinable()) impl_->listener.join();
}

int Service::port() const { return impl_->bound_port; }

} // namespace curvereg
