#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "csgd/clustering.hpp"
#include "csgd/config.hpp"
#include "csgd/gradcheck.hpp"
#include "csgd/serialize.hpp"
#include "csgd/trainer.hpp"
#include "csgd/trimming.hpp"
#include "csgd/two_point.hpp"

namespace py = pybind11;
using namespace csgd;
using Net = Network<float>;

namespace {

Tensor4<float> to_tensor(py::array_t<float, py::array::c_style | py::array::forcecast> a)
{
    if (a.ndim() != 4)
        throw DimensionError("expected a 4-d (n, h, w, c) array");
    Shape4 s{std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::size_t(a.shape(2)), std::size_t(a.shape(3))};
    return Tensor4<float>(s, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor4<float>& t)
{
    py::array_t<float> out({t.dim(0), t.dim(1), t.dim(2), t.dim(3)});
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

ClusterAssignment assignment_from(const Net& net, const std::map<LayerId, std::vector<std::vector<FilterIndex>>>& m)
{
    return to_assignment(Manifest(m.begin(), m.end()), net);
}

} // namespace

PYBIND11_MODULE(_csgd, m)
{
    m.doc() = "Centripetal SGD: training, clustering and lossless filter trimming";

    py::register_exception<Error>(m, "CsgdError", PyExc_RuntimeError);

    py::class_<Net>(m, "Network")
        .def("forward", [](const Net& n, py::array_t<float> x) { return to_array(n.forward(to_tensor(x))); })
        .def_property_readonly("channels", &Net::channels)
        .def_property_readonly("conv_layers", &Net::conv_layers)
        .def_property_readonly("num_classes", &Net::num_classes)
        .def_property_readonly("input_channels", &Net::input_channels)
        .def("__len__", &Net::size)
        .def("kernel", [](const Net& n, LayerId id) { return to_array(n.params(id).kernel); })
        .def("constraint_groups",
             [](const Net& n) {
                 std::vector<std::vector<LayerId>> out;
                 for (const auto& g : constraint_groups(n))
                     out.push_back(g.members());
                 return out;
             })
        .def("cost", [](const Net& n, std::size_t h, std::size_t w) {
            const ParamCounts c = count_cost(n, h, w);
            return py::make_tuple(c.parameters, c.macs);
        });

    m.def(
        "build_network",
        [](const std::string& topology, std::vector<std::size_t> widths, std::size_t classes, std::uint64_t seed) {
            NetworkSpec spec;
            spec.topology = parse_topology(topology);
            spec.widths = std::move(widths);
            spec.classes = classes;
            spec.seed = seed;
            return build_network<float>(spec);
        },
        py::arg("topology") = "plain", py::arg("widths") = std::vector<std::size_t>{8, 8, 8}, py::arg("classes") = 4,
        py::arg("seed") = 1);
    m.def("load_model", &load_model, py::arg("path"));
    m.def("save_model", &save_model, py::arg("path"), py::arg("network"));

    m.def(
        "make_clusters",
        [](const Net& net, const std::string& method, const std::string& counts, std::uint64_t seed) {
            const ClusterAssignment a = make_clusters(net, parse_cluster_method(method), CountSpec::parse(counts), seed);
            const Manifest man = to_manifest(a);
            return std::map<LayerId, std::vector<std::vector<FilterIndex>>>(man.begin(), man.end());
        },
        py::arg("network"), py::arg("method") = "even", py::arg("counts") = "1/2", py::arg("seed") = 1);
    m.def("even_clusters", [](std::size_t filters, std::size_t clusters) { return even_clusters(filters, clusters).clusters(); });
    m.def(
        "chi", [](const Net& net, const std::map<LayerId, std::vector<std::vector<FilterIndex>>>& c) {
            return chi(net, assignment_from(net, c));
        });
    m.def(
        "trim",
        [](const Net& net, const std::map<LayerId, std::vector<std::vector<FilterIndex>>>& c, bool collapse) {
            TrimOptions o;
            o.collapse = collapse ? CollapsePolicy::Force : CollapsePolicy::None;
            return trim_network(net, assignment_from(net, c), constraint_groups(net), o);
        },
        py::arg("network"), py::arg("clusters"), py::arg("collapse") = true);
    m.def(
        "verify",
        [](const Net& a, const Net& b, std::size_t samples, double tol, std::size_t size) {
            VerifyOptions o;
            o.samples = samples;
            o.tolerance = tol;
            o.height = o.width = size;
            const EquivalenceReport r = verify_equivalence(a, b, o);
            py::dict d;
            d["max_abs_diff"] = r.max_abs_diff;
            d["passed"] = r.passed;
            d["param_reduction"] = r.param_reduction;
            d["flop_reduction"] = r.flop_reduction;
            return d;
        },
        py::arg("original"), py::arg("trimmed"), py::arg("samples") = 100, py::arg("tol") = 1e-4,
        py::arg("size") = 12);
    m.def(
        "train",
        [](const std::string& config_text) {
            const RunSummary s = run_experiment(parse_config(config_text));
            py::dict d;
            d["model"] = s.model_path;
            d["metrics"] = s.metrics_path;
            d["train_acc"] = s.train_acc;
            d["eval_acc"] = s.eval_acc;
            d["chi"] = s.chi;
            return d;
        },
        py::arg("config_text"));
    m.def(
        "gradcheck",
        [](const Net& net, py::array_t<float> x, std::vector<std::int32_t> labels, double tol) {
            GradCheckOptions o;
            o.tolerance = tol;
            const GradCheckReport r = grad_check(net, to_tensor(x), labels, o);
            return py::make_tuple(r.passed(), r.max_rel_error, r.summary());
        },
        py::arg("network"), py::arg("x"), py::arg("labels"), py::arg("tol") = 1e-3);
    m.def(
        "two_point",
        [](std::vector<double> a, std::vector<double> b, double tau, double eta, double eps, std::size_t steps,
           bool merged, PairGradient grad) {
            const TwoPointTrajectory t = two_point_simulation(a, b, tau, eta, eps, steps, grad, merged);
            return py::make_tuple(t.gaps, t.max_relative_residual());
        },
        py::arg("a"), py::arg("b"), py::arg("tau"), py::arg("eta"), py::arg("eps"), py::arg("steps"),
        py::arg("merged"), py::arg("gradient"));
}
