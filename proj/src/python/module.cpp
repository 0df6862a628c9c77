#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>

#include "curvereg/cli.hpp"
#include "curvereg/error.hpp"
#include "curvereg/features.hpp"
#include "curvereg/io.hpp"
#include "curvereg/synth.hpp"
#include "curvereg/volume.hpp"

namespace py = pybind11;
using namespace curvereg;

namespace {

// Channels as (z, y, x) float32 arrays keyed by channel name, plus the geometry as JSON text.
py::dict volume_dict(const VoxelGrid &grid) {
    const auto &g = grid.geometry();
    py::dict channels;
    for(const auto &c : grid.channels()){
        py::array_t<float> a({g.dims[2], g.dims[1], g.dims[0]});
        std::copy(c.values->begin(), c.values->end(), a.mutable_data());
        channels[py::str(std::string(channel_name(c.label)))] = a;
    }
    py::dict out;
    out["geometry"] = to_json(g).dump();
    out["channels"] = channels;
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "PET-CT key-curve registration core";

    static py::exception<Error> error(m, "CurveregError");
    py::register_exception_translator([](std::exception_ptr p){
        try{
            if(p) std::rethrow_exception(p);
        }catch(const Error &e){
            const py::tuple args = py::make_tuple(std::string(e.name()), e.what());
            PyErr_SetObject(error.ptr(), args.ptr());
        }
    });

    m.def("run_cli", [](const std::vector<std::string> &args){
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
    }, py::arg("args"), "Runs one CLI subcommand; returns (exit code, stdout, stderr).");

    m.def("fit", [](const std::string &annotations){
        return fit_document(annotations_from_json(parse_json(annotations))).dump();
    }, py::arg("annotations_json"), "Curve file with bands for an annotation document.");

    m.def("rmse", [](const std::string &src, const std::string &tgt, int n_samples){
        return to_json(rmse(curves_from_json(parse_json(src)), curves_from_json(parse_json(tgt)), n_samples)).dump();
    }, py::arg("src_curves_json"), py::arg("tgt_curves_json"), py::arg("n_samples") = 64);

    m.def("lcka", [](const Eigen::MatrixXd &a, const Eigen::MatrixXd &b){ return lcka(a, b); },
          py::arg("a"), py::arg("b"), "Linear CKA between two locations x channels matrices.");

    m.def("load_volume", [](const std::string &path){ return volume_dict(load_volume(path)); }, py::arg("path"));

    m.def("make_phantom", [](const std::string &spec){
        const Phantom p = make_phantom(phantom_spec_from_json(parse_json(spec)));
        py::dict out = volume_dict(p.grid);
        out["curves"] = to_json(p.curves).dump();
        out["annotations"] = to_json(Annotations{p.curves.visit_id, p.points}).dump();
        return out;
    }, py::arg("spec_json"));
}
