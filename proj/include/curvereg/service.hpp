#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace curvereg {

struct ServiceOptions {
    std::filesystem::path root;                   // volumes (*.vmeta), annotations/, results/
    std::string prefix;                           // e.g. "/api"; empty serves at the root
    std::optional<std::filesystem::path> static_dir;
    std::string host = "127.0.0.1";
    int port = 8080;                              // 0 picks a free port
    int workers = 0;                              // registration job pool; 0 uses worker_count()
};

// HTTP backend for the annotation UI. Routes (under the prefix):
//   GET  /volumes
//   GET  /volumes/{id}/slice?channel=&z=&window=lo,hi       (PNG)
//   GET  /volumes/{id}/overlay?z=&alpha=&pet_from=&result=  (PNG)
//   GET  /annotations/{visit}, PUT /annotations/{visit}
//   POST /fit {visit}
//   POST /score {src, tgt, transform?, n_samples?}
//   POST /register {src, tgt, config?, val_src?, val_tgt?, session?}
//   GET  /jobs/{id}, GET /results/{id}
class Service {
public:
    explicit Service(ServiceOptions opts);
    ~Service();
    Service(const Service &) = delete;
    Service &operator=(const Service &) = delete;

    int bind();          // returns the bound port; IoFailure when binding fails
    void listen();       // blocks until stop()
    void start();        // bind (if needed) and listen on a background thread
    void stop();
    int port() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace curvereg
