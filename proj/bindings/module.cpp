// SPDX-License-Identifier: Apache-2.0
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "mdpo/data.hpp"
#include "mdpo/errors.hpp"
#include "mdpo/eval.hpp"
#include "mdpo/model.hpp"
#include "mdpo/objectives.hpp"
#include "mdpo/rng.hpp"
#include "mdpo/tape.hpp"
#include "mdpo/train.hpp"

namespace py = pybind11;
using namespace mdpo;

namespace {

ObjectiveConfig objective_from_kwargs(double beta, double delta, bool dpo, bool copo, bool ancpo,
                                      const std::string& anchor_variant) {
    ObjectiveConfig cfg;
    cfg.beta = beta;
    cfg.delta = delta;
    cfg.components = {dpo, copo, ancpo};
    cfg.anchor_variant = anchor_variant_from_name(anchor_variant);
    return cfg;
}

LogRatioValues values_from(double lr_w, double lr_l, std::optional<double> lr_img) {
    LogRatioValues v;
    v.lr_w = lr_w;
    v.lr_l = lr_l;
    v.lr_img = lr_img.value_or(0.0);
    v.has_rejected_image = lr_img.has_value();
    return v;
}

py::dict record_to_dict(const PreferenceRecord& rec) {
    py::dict d;
    d["question_tokens"] = rec.question_tokens;
    d["chosen_tokens"] = rec.chosen_tokens;
    d["rejected_tokens"] = rec.rejected_tokens;
    d["confounded"] = rec.confounded;
    d["kind"] = question_kind_name(rec.kind());
    d["index"] = rec.index;
    const Image img = rec.image();
    d["image"] = img.pixels;
    return d;
}

py::dict report_to_dict(const EvalReport& report) {
    py::dict d;
    d["accuracy_true_image"] = report.accuracy_true_image;
    d["accuracy_blank_image"] = report.accuracy_blank_image;
    d["accuracy_mismatched_image"] = report.accuracy_mismatched_image;
    d["image_sensitivity_gap"] = report.image_sensitivity_gap;
    d["mean_chosen_logp"] = report.mean_chosen_logp;
    d["hallucination_rate"] = report.hallucination_rate;
    d["accuracy_by_kind"] = report.accuracy_by_kind;
    d["hallucination_by_kind"] = report.hallucination_by_kind;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Preference-optimization lab core: losses, schedule, data generation, training "
              "and evaluation";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_IOError);
    py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

    py::class_<SeededRng>(m, "SeededRng")
        .def(py::init<uint64_t, uint64_t>(), py::arg("seed"), py::arg("stream") = 0)
        .def("next_u64", &SeededRng::next_u64)
        .def("next_double", &SeededRng::next_double)
        .def("normal", py::overload_cast<>(&SeededRng::normal))
        .def("below", &SeededRng::below)
        .def("split", &SeededRng::split);

    m.def("log_sigmoid", py::overload_cast<double>(&log_sigmoid), py::arg("x"),
          "Numerically stable log(sigmoid(x)).");
    m.def("softplus", &softplus, py::arg("x"));

    m.def(
        "dpo_loss",
        [](double lr_w, double lr_l, double beta) {
            ObjectiveConfig cfg;
            cfg.beta = beta;
            return dpo_loss(values_from(lr_w, lr_l, std::nullopt), cfg);
        },
        py::arg("lr_w"), py::arg("lr_l"), py::arg("beta") = 0.1);
    m.def(
        "copo_loss",
        [](double lr_w, double lr_img, double beta) {
            ObjectiveConfig cfg;
            cfg.beta = beta;
            return copo_loss(values_from(lr_w, 0.0, lr_img), cfg);
        },
        py::arg("lr_w"), py::arg("lr_img"), py::arg("beta") = 0.1);
    m.def(
        "ancpo_loss",
        [](double lr_w, double lr_l, std::optional<double> lr_img, double beta, double delta,
           const std::string& anchor_variant) {
            return ancpo_loss(values_from(lr_w, lr_l, lr_img),
                              objective_from_kwargs(beta, delta, true, true, true,
                                                    anchor_variant));
        },
        py::arg("lr_w"), py::arg("lr_l") = 0.0, py::arg("lr_img") = std::nullopt,
        py::arg("beta") = 0.1, py::arg("delta") = 0.0,
        py::arg("anchor_variant") = "chosen-only");
    m.def(
        "mdpo_loss",
        [](double lr_w, double lr_l, std::optional<double> lr_img, double beta, double delta,
           bool dpo, bool copo, bool ancpo, const std::string& anchor_variant) {
            const MdpoLossValues out =
                mdpo_loss(values_from(lr_w, lr_l, lr_img),
                          objective_from_kwargs(beta, delta, dpo, copo, ancpo, anchor_variant));
            py::dict d;
            d["total"] = out.total;
            d["dpo"] = out.dpo;
            d["copo"] = out.copo;
            d["ancpo"] = out.ancpo;
            return d;
        },
        py::arg("lr_w"), py::arg("lr_l"), py::arg("lr_img") = std::nullopt,
        py::arg("beta") = 0.1, py::arg("delta") = 0.0, py::arg("dpo") = true,
        py::arg("copo") = true, py::arg("ancpo") = true,
        py::arg("anchor_variant") = "chosen-only");

    m.def(
        "lr_at",
        [](int64_t step, int64_t total_steps, double peak_lr, double warmup_ratio) {
            TrainConfig cfg;
            cfg.peak_lr = peak_lr;
            cfg.warmup_ratio = warmup_ratio;
            return lr_at(step, total_steps, cfg);
        },
        py::arg("step"), py::arg("total_steps"), py::arg("peak_lr") = 3e-4,
        py::arg("warmup_ratio") = 0.1);

    m.def(
        "generate_dataset",
        [](uint64_t seed, int64_t n, double confound_rate) {
            py::list out;
            for (const PreferenceRecord& rec : generate_dataset(seed, n, confound_rate)) {
                out.append(record_to_dict(rec));
            }
            return out;
        },
        py::arg("seed"), py::arg("n"), py::arg("confound_rate"));
    m.def(
        "generate_dataset_jsonl",
        [](uint64_t seed, int64_t n, double confound_rate, const std::filesystem::path& path) {
            const auto records = generate_dataset(seed, n, confound_rate);
            save_dataset_jsonl(path, records);
            return static_cast<int64_t>(records.size());
        },
        py::arg("seed"), py::arg("n"), py::arg("confound_rate"), py::arg("path"));

    m.def(
        "train_from_config",
        [](const std::string& config_json, const std::filesystem::path& dataset_path,
           const std::filesystem::path& out_dir) {
            const TrainConfig cfg = TrainConfig::from_json(config_json);
            const auto dataset = load_dataset_jsonl(dataset_path);
            const TrainResult run = train(cfg, dataset, out_dir);
            const EvalReport report = evaluate(run.policy, run.reference, dataset, cfg.seed);
            py::dict d;
            d["step0_loss"] = run.step0_total_loss;
            d["steps"] = static_cast<int64_t>(run.metrics.size());
            d["chosen_likelihood_delta"] = chosen_likelihood_delta(run.evals);
            d["eval"] = report_to_dict(report);
            d["metrics_path"] = run.metrics_path.string();
            return d;
        },
        py::arg("config_json"), py::arg("dataset_path"), py::arg("out_dir"),
        "Train against a frozen reference snapshot and evaluate on the dataset.");

    m.def(
        "evaluate_checkpoint",
        [](const std::filesystem::path& policy_path, const std::filesystem::path& reference_path,
           const std::filesystem::path& dataset_path, uint64_t seed) {
            const MultimodalLM policy = MultimodalLM::load_checkpoint(policy_path);
            const MultimodalLM reference = MultimodalLM::load_checkpoint(reference_path);
            const auto dataset = load_dataset_jsonl(dataset_path);
            return report_to_dict(evaluate(policy, reference, dataset, seed));
        },
        py::arg("policy_checkpoint"), py::arg("reference_checkpoint"), py::arg("dataset_path"),
        py::arg("seed") = 0);

    m.def("default_train_config", []() { return TrainConfig{}.to_json(); },
          "JSON for the default training configuration.");
}
