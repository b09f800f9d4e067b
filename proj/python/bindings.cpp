// Python bindings for the main operations: config validation, synthetic
// data, model forward/eval with policy traces, FLOPs accounting, the
// binary-concrete gate, and the adversarial attacks.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mia/analytics.hpp"
#include "mia/attacks.hpp"
#include "mia/checkpoint.hpp"
#include "mia/cost_model.hpp"
#include "mia/dataset.hpp"
#include "mia/training.hpp"

namespace py = pybind11;
using namespace mia;

namespace {

Batch batch_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& images,
                       const std::vector<int>& labels) {
    if (images.ndim() != 4) throw std::invalid_argument("images must be (b, c, h, w)");
    Batch b;
    b.size = static_cast<int>(images.shape(0));
    b.channels = static_cast<int>(images.shape(1));
    b.height = static_cast<int>(images.shape(2));
    b.width = static_cast<int>(images.shape(3));
    b.pixels.assign(images.data(), images.data() + images.size());
    b.labels = labels.empty() ? std::vector<int>(b.size, 0) : labels;
    if (static_cast<int>(b.labels.size()) != b.size)
        throw std::invalid_argument("labels must match the batch size");
    return b;
}

py::array_t<double> array_from_batch(const Batch& b) {
    py::array_t<double> out({b.size, b.channels, b.height, b.width});
    std::copy(b.pixels.begin(), b.pixels.end(), out.mutable_data());
    return out;
}

py::dict trace_to_dict(const SampleTrace& t) {
    py::dict d;
    d["sample_id"] = t.sample_id;
    d["label"] = t.label;
    d["pred"] = t.pred;
    d["exec_ratio"] = t.flops.ratio;
    py::list blocks;
    for (const auto& b : t.blocks) {
        py::dict bd;
        bd["skipped"] = b.skipped;
        bd["d_block"] = b.d_block;
        bd["heads_kept"] = b.heads_kept();
        bd["tokens_kept"] = b.tokens_kept();
        blocks.append(bd);
    }
    d["blocks"] = blocks;
    return d;
}

}  // namespace

PYBIND11_MODULE(_mia, m) {
    m.doc() = "Input-adaptive vision transformer core (depth/head/token gating)";

    py::class_<MIAConfig>(m, "Config")
        .def(py::init([](const std::string& json_text) {
                 return config_from_json_text(json_text);
             }),
             py::arg("json_text"))
        .def_static("load", &load_config_file, py::arg("path"))
        .def_static("tiny", [] { return validate_config(MIAConfig{}); })
        .def_readonly("num_blocks", &MIAConfig::num_blocks)
        .def_readonly("num_heads", &MIAConfig::num_heads)
        .def_readonly("head_dim", &MIAConfig::head_dim)
        .def_readonly("num_tokens", &MIAConfig::num_tokens)
        .def_readonly("embed_dim", &MIAConfig::embed_dim)
        .def_readonly("image_size", &MIAConfig::image_size)
        .def_readonly("patch_size", &MIAConfig::patch_size)
        .def_readonly("num_classes", &MIAConfig::num_classes)
        .def_readonly("target_flops_ratio", &MIAConfig::target_flops_ratio)
        .def("to_json", &config_to_json_text)
        .def("__repr__", [](const MIAConfig& c) {
            return "<Config L=" + std::to_string(c.num_blocks) + " H=" +
                   std::to_string(c.num_heads) + " E=" + std::to_string(c.head_dim) + " N=" +
                   std::to_string(c.num_tokens) + ">";
        });

    m.def(
        "synth_generate",
        [](int classes, int n, uint64_t seed, int image_size, int channels) {
            Dataset d = synth_generate(classes, n, seed, image_size, channels);
            py::array_t<uint8_t> pixels({d.n, d.channels, d.height, d.width});
            std::copy(d.pixels.begin(), d.pixels.end(), pixels.mutable_data());
            py::array_t<uint8_t> labels(d.n);
            std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
            return py::make_tuple(pixels, labels);
        },
        py::arg("classes"), py::arg("n"), py::arg("seed"), py::arg("image_size") = 32,
        py::arg("channels") = 3);

    m.def(
        "block_flops",
        [](int h_active, int n_active, const MIAConfig& cfg) {
            BlockFlops f = block_flops(h_active, n_active, cfg);
            return py::make_tuple(f.msa, f.mlp);
        },
        py::arg("h_active"), py::arg("n_active"), py::arg("cfg"));
    m.def("controller_flops",
          [](const MIAConfig& cfg, bool skipped) { return controller_flops(cfg, skipped); },
          py::arg("cfg"), py::arg("skipped_block"));
    m.def("total_model_flops",
          [](const MIAConfig& cfg) { return total_model_flops(cfg, cfg.dims); }, py::arg("cfg"));

    m.def(
        "gumbel_binary",
        [](double logit, double tau, const std::string& mode, uint64_t seed) {
            Graph g(false);
            Rng rng(seed);
            GumbelResult r =
                gumbel_binary(g, g.constant(Tensor::scalar(logit)), tau,
                              mode == "train" ? RunMode::train : RunMode::eval, &rng);
            return py::make_tuple(static_cast<int>(r.hard[0]), r.soft[0]);
        },
        py::arg("logit"), py::arg("tau"), py::arg("mode") = "eval", py::arg("seed") = 0);

    py::class_<Model>(m, "Model")
        .def_static(
            "init", [](const MIAConfig& cfg, uint64_t seed) { return Model::init(cfg, seed); },
            py::arg("cfg"), py::arg("seed"))
        .def_static(
            "load", [](const std::string& dir) { return load_checkpoint(dir).model; },
            py::arg("checkpoint_dir"))
        .def_property_readonly("cfg", [](const Model& m2) { return m2.cfg; })
        .def(
            "forward",
            [](Model& self,
               const py::array_t<double, py::array::c_style | py::array::forcecast>& images,
               const std::vector<int>& labels, const std::string& policy) {
                Batch b = batch_from_array(images, labels);
                Graph g(false);
                ForwardOptions fo;
                fo.mode = RunMode::eval;
                if (policy == "all-on")
                    fo.force.kind = ForcePolicy::Kind::all_on;
                else if (policy == "all-skip")
                    fo.force.kind = ForcePolicy::Kind::all_skip;
                else if (policy != "controller")
                    throw std::invalid_argument("policy must be controller|all-on|all-skip");
                ForwardResult r = self.forward(g, b, fo);
                const Tensor& z = g.val(r.logits);
                py::array_t<double> logits({b.size, self.cfg.num_classes});
                std::copy(z.v.begin(), z.v.end(), logits.mutable_data());
                py::list traces;
                for (const auto& t : r.traces) traces.append(trace_to_dict(t));
                return py::make_tuple(logits, traces);
            },
            py::arg("images"), py::arg("labels") = std::vector<int>{},
            py::arg("policy") = "controller")
        .def(
            "pgd_attack",
            [](Model& self,
               const py::array_t<double, py::array::c_style | py::array::forcecast>& images,
               const std::vector<int>& labels, double epsilon, int steps) {
                AttackSpec spec = AttackSpec::pgd_default();
                spec.epsilon = epsilon;
                spec.steps = steps;
                Batch b = batch_from_array(images, labels);
                return array_from_batch(pgd_attack(self, b, spec));
            },
            py::arg("images"), py::arg("labels"), py::arg("epsilon") = 0.002,
            py::arg("steps") = 10)
        .def(
            "fgsm_l2_attack",
            [](Model& self,
               const py::array_t<double, py::array::c_style | py::array::forcecast>& images,
               const std::vector<int>& labels, double epsilon) {
                AttackSpec spec = AttackSpec::fgsm_default();
                spec.epsilon = epsilon;
                Batch b = batch_from_array(images, labels);
                return array_from_batch(fgsm_l2_attack(self, b, spec));
            },
            py::arg("images"), py::arg("labels"), py::arg("epsilon") = 0.03);

    m.def(
        "skip_ratio_stats",
        [](Model& model,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& images) {
            Batch b = batch_from_array(images, {});
            auto traces = model.evaluate(b);
            py::list rows;
            for (const auto& r : skip_ratio_stats(traces, model.cfg)) {
                py::dict d;
                d["block"] = r.block;
                d["block_skip"] = r.block_skip;
                d["head_skip"] = r.head_skip;
                d["token_skip"] = r.token_skip;
                rows.append(d);
            }
            return rows;
        },
        py::arg("model"), py::arg("images"));
}
