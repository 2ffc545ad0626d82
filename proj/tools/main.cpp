// SPDX-License-Identifier: Apache-2.0
//
// mdpo-lab: data generation, preference-optimization training runs, ablation
// sweeps and gradient checks for the synthetic vision-language task.

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mdpo/data.hpp"
#include "mdpo/errors.hpp"
#include "mdpo/eval.hpp"
#include "mdpo/grad_check.hpp"
#include "mdpo/json_util.hpp"
#include "mdpo/model.hpp"
#include "mdpo/objectives.hpp"
#include "mdpo/tape.hpp"
#include "mdpo/train.hpp"

namespace fs = std::filesystem;
using namespace mdpo;

namespace {

struct DataParams {
    uint64_t seed = 7;
    int64_t n = 2000;
    double confound_rate = 0.7;
};

// A run config file mirrors the training config and may carry a "data"
// section with the generation parameters. Unknown keys abort before any
// compute.
struct RunConfig {
    TrainConfig train;
    DataParams data;
};

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    nlohmann::json j = parse_json(text, "run config");
    RunConfig cfg;
    if (j.is_object() && j.contains("data")) {
        const nlohmann::json d = j.at("data");
        require_known_keys(d, {"seed", "n", "confound_rate"}, "data config");
        cfg.data.seed = json_get_or<uint64_t>(d, "seed", cfg.data.seed);
        cfg.data.n = json_get_or<int64_t>(d, "n", cfg.data.n);
        cfg.data.confound_rate = json_get_or<double>(d, "confound_rate", cfg.data.confound_rate);
        j.erase("data");
    }
    cfg.train = TrainConfig::from_json(j.dump());
    return cfg;
}

std::string file_checksum_hex(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open file for checksum: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64({bytes.data(), bytes.size()});
    return os.str();
}

void apply_objective_preset(TrainConfig& cfg, const std::string& objective, bool no_image) {
    if (objective == "dpo") {
        cfg.objective.components = {true, false, false};
    } else if (objective == "mdpo") {
        cfg.objective.components = {true, true, true};
    } else if (objective != "custom") {
        throw ConfigError("unknown objective \"" + objective +
                          "\" (expected dpo, mdpo or custom)");
    }
    if (no_image) {
        cfg.objective.no_image_mode = true;
        cfg.objective.components.copo = false;
        if (cfg.objective.anchor_variant == AnchorVariant::kChosenRejectedResponseImage) {
            cfg.objective.anchor_variant = AnchorVariant::kChosenRejectedResponse;
        }
    }
}

void archive_config(const TrainConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream os(out_dir / "config.json", std::ios::binary | std::ios::trunc);
    os << nlohmann::json::parse(cfg.to_json()).dump(2) << "\n";
    if (!os) throw IoError("cannot archive config in " + out_dir.string());
}

void print_eval_summary(std::ostream& os, const EvalReport& report) {
    os << "  preference accuracy: true-image " << report.accuracy_true_image << ", blank-image "
       << report.accuracy_blank_image << ", mismatched-image "
       << report.accuracy_mismatched_image << "\n"
       << "  image-sensitivity gap: " << report.image_sensitivity_gap << "\n"
       << "  hallucination proxy rate: " << report.hallucination_rate << "\n"
       << "  mean chosen log-prob: " << report.mean_chosen_logp << "\n"
       << "  per-kind accuracy:";
    for (const auto& [kind, acc] : report.accuracy_by_kind) os << " " << kind << "=" << acc;
    os << "\n";
}

int cmd_gen_data(const DataParams& params, const std::string& out, bool force) {
    const fs::path out_path(out);
    if (fs::exists(out_path) && !force) {
        std::cerr << "refusing to overwrite existing " << out << " (pass --force)\n";
        return 1;
    }
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    const auto records = generate_dataset(params.seed, params.n, params.confound_rate);
    save_dataset_jsonl(out_path, records);

    int64_t confounded = 0;
    std::map<std::string, int64_t> kind_counts;
    for (const PreferenceRecord& rec : records) {
        confounded += rec.confounded ? 1 : 0;
        kind_counts[question_kind_name(rec.kind())]++;
    }
    nlohmann::json manifest{
        {"seed", params.seed},
        {"n", params.n},
        {"confound_rate", params.confound_rate},
        {"confounded_count", confounded},
        {"question_kind_counts", kind_counts},
        {"checksum_fnv1a64", file_checksum_hex(out_path)},
        {"format", "preference-records-jsonl-v1"},
    };
    const fs::path manifest_path(out_path.string() + ".manifest.json");
    std::ofstream os(manifest_path, std::ios::binary | std::ios::trunc);
    os << manifest.dump(2) << "\n";
    if (!os) throw IoError("cannot write manifest: " + manifest_path.string());

    std::cout << "wrote " << records.size() << " records to " << out << "\n"
              << "confounded: " << confounded
              << ", checksum: " << manifest.at("checksum_fnv1a64").get<std::string>() << "\n";
    return 0;
}

struct ArmResult {
    std::string name;
    EvalReport report;
    double likelihood_delta = 0.0;
    double step0_loss = 0.0;
    fs::path out_dir;
};

ArmResult run_arm(const std::string& name, const TrainConfig& cfg,
                  const std::vector<PreferenceRecord>& train_records,
                  const std::vector<PreferenceRecord>& eval_records, const fs::path& out_dir,
                  bool write_verdicts) {
    archive_config(cfg, out_dir);
    TrainResult run = train(cfg, train_records, out_dir);
    const fs::path verdicts = write_verdicts ? out_dir / "verdicts.jsonl" : fs::path{};
    EvalReport report = evaluate(run.policy, run.reference, eval_records, cfg.seed, verdicts);
    {
        std::ofstream os(out_dir / "eval_report.json", std::ios::binary | std::ios::trunc);
        os << nlohmann::json::parse(report.to_json()).dump(2) << "\n";
        if (!os) throw IoError("cannot write eval report in " + out_dir.string());
    }
    return ArmResult{name, report, chosen_likelihood_delta(run.evals), run.step0_total_loss,
                     out_dir};
}

int cmd_train(const TrainConfig& cfg, const std::string& data_path, const fs::path& out_dir,
              bool write_verdicts) {
    const auto dataset = load_dataset_jsonl(data_path);
    archive_config(cfg, out_dir);
    TrainResult run = train(cfg, dataset, out_dir);
    std::cout << "step-0 loss: " << std::setprecision(6) << std::fixed << run.step0_total_loss
              << std::defaultfloat << "\n";

    const fs::path verdicts = write_verdicts ? out_dir / "verdicts.jsonl" : fs::path{};
    EvalReport report = evaluate(run.policy, run.reference, dataset, cfg.seed, verdicts);
    {
        std::ofstream os(out_dir / "eval_report.json", std::ios::binary | std::ios::trunc);
        os << nlohmann::json::parse(report.to_json()).dump(2) << "\n";
        if (!os) throw IoError("cannot write eval report in " + out_dir.string());
    }

    std::cout << "final evaluation over " << dataset.size() << " records:\n";
    print_eval_summary(std::cout, report);
    std::cout << "held-out chosen-likelihood delta: " << chosen_likelihood_delta(run.evals)
              << "\noutputs in " << out_dir.string() << "\n";
    return 0;
}

int cmd_ablate(const TrainConfig& base, const std::string& sweep, const std::string& data_path,
               const fs::path& out_dir, int64_t parallel) {
    const auto dataset = load_dataset_jsonl(data_path);

    struct Arm {
        std::string name;
        TrainConfig cfg;
        int64_t train_prefix;  // > 0: train on this many leading records
    };
    std::vector<Arm> arms;
    auto with_components = [&](bool dpo, bool copo, bool ancpo) {
        TrainConfig cfg = base;
        cfg.objective.components = {dpo, copo, ancpo};
        return cfg;
    };

    if (sweep == "components") {
        arms.push_back({"mdpo", with_components(true, true, true), -1});
        arms.push_back({"minus-conditional", with_components(true, false, true), -1});
        arms.push_back({"minus-anchored", with_components(true, true, false), -1});
        arms.push_back({"minus-both-dpo", with_components(true, false, false), -1});
    } else if (sweep == "crop-strategy") {
        TrainConfig cfg = base;
        cfg.perturb = CropKeep{0.0, 0.2};
        arms.push_back({"crop-keep-0-20", cfg, -1});
        cfg.perturb = CropKeep{0.2, 0.5};
        arms.push_back({"crop-keep-20-50", cfg, -1});
        cfg.perturb = RandomImage{};
        arms.push_back({"random-image", cfg, -1});
        cfg.perturb = NoiseAug{};
        arms.push_back({"noise-aug", cfg, -1});
    } else if (sweep == "anchor-variant") {
        TrainConfig cfg = base;
        cfg.objective.anchor_variant = AnchorVariant::kChosenOnly;
        arms.push_back({"anchor-chosen", cfg, -1});
        cfg.objective.anchor_variant = AnchorVariant::kChosenRejectedResponse;
        arms.push_back({"anchor-chosen-rejected", cfg, -1});
        cfg.objective.anchor_variant = AnchorVariant::kChosenRejectedResponseImage;
        arms.push_back({"anchor-chosen-rejected-image", cfg, -1});
    } else if (sweep == "data-scale") {
        const int64_t n = static_cast<int64_t>(dataset.size());
        arms.push_back({"scale-0.25x", base, n / 4});  // nested prefixes of one dataset
        arms.push_back({"scale-0.5x", base, n / 2});
        arms.push_back({"scale-1x", base, n});
    } else {
        std::cerr << "unknown sweep \"" << sweep
                  << "\"; valid sweeps: components, crop-strategy, anchor-variant, data-scale\n";
        return 1;
    }

    std::vector<ArmResult> results(arms.size());
    const int64_t arm_workers =
        std::max<int64_t>(1, std::min<int64_t>(parallel, static_cast<int64_t>(arms.size())));
    std::atomic<int64_t> next{0};
    std::mutex log_mutex;
    std::exception_ptr error;
    std::vector<std::thread> threads;
    for (int64_t w = 0; w < arm_workers; ++w) {
        threads.emplace_back([&]() {
            while (true) {
                const int64_t i = next.fetch_add(1);
                if (i >= static_cast<int64_t>(arms.size())) break;
                try {
                    const Arm& arm = arms[static_cast<size_t>(i)];
                    std::vector<PreferenceRecord> prefix;
                    const std::vector<PreferenceRecord>* train_set = &dataset;
                    if (arm.train_prefix > 0 &&
                        arm.train_prefix < static_cast<int64_t>(dataset.size())) {
                        prefix.assign(dataset.begin(), dataset.begin() + arm.train_prefix);
                        train_set = &prefix;
                    }
                    {
                        std::lock_guard<std::mutex> lock(log_mutex);
                        std::cout << "running arm " << arm.name << "..." << std::endl;
                    }
                    results[static_cast<size_t>(i)] = run_arm(arm.name, arm.cfg, *train_set,
                                                              dataset, out_dir / arm.name, false);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(log_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (std::thread& t : threads) t.join();
    if (error) std::rethrow_exception(error);

    // Rank by hallucination proxy (ascending); break ties on the
    // image-sensitivity gap. JSON is the machine-readable source of truth.
    std::vector<size_t> ranking(results.size());
    for (size_t i = 0; i < results.size(); ++i) ranking[i] = i;
    std::sort(ranking.begin(), ranking.end(), [&](size_t a, size_t b) {
        if (results[a].report.hallucination_rate != results[b].report.hallucination_rate) {
            return results[a].report.hallucination_rate < results[b].report.hallucination_rate;
        }
        return results[a].report.image_sensitivity_gap > results[b].report.image_sensitivity_gap;
    });

    nlohmann::json table{{"sweep", sweep}, {"arms", nlohmann::json::array()}};
    for (const ArmResult& r : results) {
        table["arms"].push_back({{"name", r.name},
                                 {"eval", nlohmann::json::parse(r.report.to_json())},
                                 {"likelihood_delta", r.likelihood_delta},
                                 {"step0_loss", r.step0_loss},
                                 {"out_dir", r.out_dir.string()}});
    }
    nlohmann::json ranked = nlohmann::json::array();
    for (size_t i : ranking) ranked.push_back(results[i].name);
    table["ranking"] = ranked;

    fs::create_directories(out_dir);
    {
        std::ofstream os(out_dir / "table.json", std::ios::binary | std::ios::trunc);
        os << table.dump(2) << "\n";
        if (!os) throw IoError("cannot write table.json");
    }

    std::ostringstream text;
    text << std::left << std::setw(30) << "arm" << std::right << std::setw(10) << "halluc"
         << std::setw(10) << "gap" << std::setw(10) << "acc-true" << std::setw(11) << "acc-blank"
         << std::setw(10) << "delta" << "\n"
         << std::string(81, '-') << "\n"
         << std::fixed << std::setprecision(4);
    for (size_t i : ranking) {
        const ArmResult& r = results[i];
        text << std::left << std::setw(30) << r.name << std::right << std::setw(10)
             << r.report.hallucination_rate << std::setw(10) << r.report.image_sensitivity_gap
             << std::setw(10) << r.report.accuracy_true_image << std::setw(11)
             << r.report.accuracy_blank_image << std::setw(10) << r.likelihood_delta << "\n";
    }
    {
        std::ofstream os(out_dir / "table.txt", std::ios::binary | std::ios::trunc);
        os << text.str();
        if (!os) throw IoError("cannot write table.txt");
    }
    std::cout << text.str() << "table written to " << (out_dir / "table.json").string() << "\n";
    return 0;
}

// --- gradient-check suites ---

template <class Build>
bool check_kernel(const std::string& name, Build build, double tol, uint64_t seed,
                  std::ostream& os, double* worst) {
    Tensor x({3, 4});
    SeededRng rng(seed, 0);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal(0.0, 0.8);
    if (name == "log") {
        for (int64_t i = 0; i < x.numel(); ++i) x[i] = std::abs(x[i]) + 0.5;
    }

    GradCheckTarget target;
    target.names = {name};
    target.params = {&x};
    target.value = [&]() {
        Tape tape;
        Value v = tape.leaf(x, true);
        return build(tape, v).item();
    };
    target.gradient = [&]() {
        Tape tape;
        Value v = tape.leaf(x, true);
        tape.backward(build(tape, v));
        return std::vector<Tensor>{tape.grad(v)};
    };
    const GradCheckReport report = grad_check(target, 1e-5, tol);
    *worst = std::max(*worst, report.max_rel_error);
    if (!report.passed) os << "  FAIL " << name << ": " << report.summary() << "\n";
    return report.passed;
}

bool kernel_suite(double tol, std::ostream& os) {
    bool all = true;
    double worst = 0.0;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        SeededRng aux(seed, 1);
        Tensor other({3, 4});
        for (int64_t i = 0; i < other.numel(); ++i) other[i] = aux.normal(0.0, 0.8);
        Tensor weights({4, 5});
        for (int64_t i = 0; i < weights.numel(); ++i) weights[i] = aux.normal(0.0, 0.8);
        Tensor row({4});
        for (int64_t i = 0; i < row.numel(); ++i) row[i] = aux.normal(0.0, 0.8);

        all &= check_kernel(
            "add", [&](Tape& t, Value v) { return t.sum(t.add(v, t.constant(other))); }, tol,
            seed, os, &worst);
        all &= check_kernel(
            "sub", [&](Tape& t, Value v) { return t.sum(t.sub(t.constant(other), v)); }, tol,
            seed, os, &worst);
        all &= check_kernel(
            "mul", [&](Tape& t, Value v) { return t.sum(t.mul(v, t.constant(other))); }, tol,
            seed, os, &worst);
        all &= check_kernel(
            "matmul", [&](Tape& t, Value v) { return t.sum(t.matmul(v, t.constant(weights))); },
            tol, seed, os, &worst);
        all &= check_kernel(
            "exp", [&](Tape& t, Value v) { return t.sum(t.exp(v)); }, tol, seed, os, &worst);
        all &= check_kernel(
            "log", [&](Tape& t, Value v) { return t.sum(t.log(v)); }, tol, seed, os, &worst);
        all &= check_kernel(
            "sigmoid", [&](Tape& t, Value v) { return t.sum(t.sigmoid(v)); }, tol, seed, os,
            &worst);
        all &= check_kernel(
            "log_sigmoid", [&](Tape& t, Value v) { return t.sum(t.log_sigmoid(v)); }, tol, seed,
            os, &worst);
        all &= check_kernel(
            "relu", [&](Tape& t, Value v) { return t.sum(t.relu(v)); }, tol, seed, os, &worst);
        all &= check_kernel(
            "gelu", [&](Tape& t, Value v) { return t.sum(t.gelu(v)); }, tol, seed, os, &worst);
        all &= check_kernel(
            "mean", [&](Tape& t, Value v) { return t.mean(t.mul(v, v)); }, tol, seed, os,
            &worst);
        all &= check_kernel(
            "softmax",
            [&](Tape& t, Value v) { return t.sum(t.mul(t.softmax_last(v), t.constant(other))); },
            tol, seed, os, &worst);
        all &= check_kernel(
            "log_softmax",
            [&](Tape& t, Value v) {
                return t.sum(t.mul(t.log_softmax_last(v), t.constant(other)));
            },
            tol, seed, os, &worst);
        all &= check_kernel(
            "gather",
            [&](Tape& t, Value v) {
                const std::vector<int64_t> ids = {1, 0, 3};
                return t.sum(t.gather_last(v, ids));
            },
            tol, seed, os, &worst);
        all &= check_kernel(
            "layer_norm",
            [&](Tape& t, Value v) {
                return t.sum(t.mul(t.layer_norm(v, t.constant(row), t.constant(Tensor({4}))),
                                   t.constant(other)));
            },
            tol, seed, os, &worst);
        all &= check_kernel(
            "concat",
            [&](Tape& t, Value v) {
                const Value parts[] = {v, t.constant(other)};
                return t.sum(
                    t.mul(t.concat_rows(parts), t.constant(Tensor::full({6, 4}, 0.3))));
            },
            tol, seed, os, &worst);
    }
    os << "  kernels: 16 ops x 10 seeds, worst rel err " << worst << "\n";
    return all;
}

bool objective_suite(double tol, bool corrupt, std::ostream& os) {
    bool all = true;
    for (uint64_t seed = 1; seed <= 2; ++seed) {
        ModelConfig mcfg;
        mcfg.vocab_size = 8;
        mcfg.d_model = 16;
        mcfg.n_layers = 1;
        mcfg.n_heads = 2;
        mcfg.image_grid = 2;
        mcfg.max_question_len = 2;
        mcfg.max_response_len = 4;
        mcfg.seed = seed;
        MultimodalLM policy(mcfg);
        SeededRng hrng(seed, 2);
        Tensor* head = policy.find_parameter("head_w");
        for (int64_t i = 0; i < head->numel(); ++i) (*head)[i] = hrng.normal(0.0, 0.3);
        MultimodalLM reference = snapshot_reference(policy);
        for (Parameter& p : policy.parameters()) {
            SeededRng prng(seed, 3 + fnv1a64({p.name.data(), p.name.size()}) % 1000);
            for (int64_t i = 0; i < p.value.numel(); ++i) p.value[i] += prng.normal(0.0, 0.02);
        }

        SeededRng rng(seed, 4);
        std::vector<double> image(static_cast<size_t>(mcfg.patch_count() * 3));
        for (double& v : image) v = rng.next_double();
        std::vector<double> alt(image.size());
        for (double& v : alt) v = rng.next_double();
        const std::vector<int64_t> question = {1, 2};
        const std::vector<int64_t> chosen = {3, 4, 6};
        const std::vector<int64_t> rejected = {5, 4, 6};
        const std::vector<uint8_t> mask = {1, 1, 1};
        PreferenceExample ex{image, question, chosen, mask, rejected, mask, alt};
        ObjectiveConfig base;
        base.anchor_variant = AnchorVariant::kChosenRejectedResponse;
        const ReferenceLogProbs ref = reference_log_probs(reference, ex);

        const std::pair<std::string, ObjectiveComponents> cases[] = {
            {"dpo", {true, false, false}},
            {"copo", {false, true, false}},
            {"ancpo", {false, false, true}},
            {"mdpo", {true, true, true}},
        };
        for (const auto& [name, components] : cases) {
            ObjectiveConfig cfg = base;
            cfg.components = components;
            GradCheckTarget target;
            for (Parameter& p : policy.parameters()) {
                target.names.push_back(p.name);
                target.params.push_back(&p.value);
            }
            target.value = [&]() {
                Tape tape;
                BoundModel bound = policy.bind(tape, false);
                return mdpo_loss(compute_log_ratios(bound, ref, ex), cfg).total.item();
            };
            target.gradient = [&]() {
                Tape tape;
                BoundModel bound = policy.bind(tape, true);
                MdpoLoss loss = mdpo_loss(compute_log_ratios(bound, ref, ex), cfg);
                tape.backward(loss.total);
                std::vector<Tensor> grads;
                for (Value v : bound.params) grads.push_back(tape.grad(v));
                if (corrupt) {
                    // negative-control fixture: poison one whole tensor
                    for (int64_t i = 0; i < grads[2].numel(); ++i) grads[2][i] += 0.5;
                }
                return grads;
            };
            const GradCheckReport report =
                grad_check(target, 1e-5, tol, /*coordinates_per_param=*/4, seed);
            os << "  " << (report.passed ? "pass" : "FAIL") << " " << name << " seed " << seed
               << " (" << report.entries.size() << " coordinates, max rel err "
               << report.max_rel_error << ")\n";
            if (!report.passed && report.worst()) {
                os << "    worst offender: " << report.worst()->param << "["
                   << report.worst()->coordinate << "] analytic=" << report.worst()->analytic
                   << " numeric=" << report.worst()->numeric << "\n";
            }
            all = all && report.passed;
        }
    }
    return all;
}

int cmd_grad_check(double tol, bool negative_control) {
    std::cout << "kernel gradient checks (tol " << tol << "):\n";
    bool ok = kernel_suite(tol, std::cout);
    std::cout << "objective gradient checks through the model (tol " << tol << "):\n";
    ok = objective_suite(tol, negative_control, std::cout) && ok;
    std::cout << (ok ? "all gradient checks passed\n" : "gradient checks FAILED\n");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mdpo-lab: multimodal preference-optimization experiments on a synthetic "
                 "vision-language task"};
    app.require_subcommand(1);
    app.footer("Worker threads are capped by the MDPO_LAB_THREADS environment variable.");

    auto* gen = app.add_subcommand("gen-data", "Generate a preference dataset (JSONL + manifest)");
    DataParams gen_params;
    std::string gen_out = "data.jsonl";
    bool gen_force = false;
    gen->add_option("--seed", gen_params.seed, "Generation seed");
    gen->add_option("--n", gen_params.n, "Number of records")->check(CLI::PositiveNumber);
    gen->add_option("--confound", gen_params.confound_rate,
                    "Fraction of records carrying the text-only marker")
        ->check(CLI::Range(0.0, 1.0));
    gen->add_option("--out", gen_out, "Output JSONL path");
    gen->add_flag("--force", gen_force, "Overwrite an existing dataset");

    auto* tr = app.add_subcommand("train", "Train a policy against its frozen reference");
    std::string tr_config, tr_data, tr_out = "runs/run";
    std::string tr_objective = "custom", tr_lr_preset;
    bool tr_no_image = false, tr_verdicts = false;
    std::optional<uint64_t> tr_seed;
    tr->add_option("--config", tr_config, "Run config JSON (mirrors the training config)");
    tr->add_option("--data", tr_data, "Dataset JSONL path")->required();
    tr->add_option("--out", tr_out, "Output directory");
    tr->add_option("--seed", tr_seed, "Override the run seed (training and model init)");
    tr->add_option("--objective", tr_objective, "Objective preset: dpo, mdpo or custom");
    tr->add_flag("--no-image", tr_no_image, "Zero the image plane throughout training");
    tr->add_flag("--verdicts", tr_verdicts, "Emit per-record eval verdicts (JSONL)");
    tr->add_option("--lr-preset", tr_lr_preset, "Learning-rate preset: desk or paper");

    auto* ab = app.add_subcommand("ablate", "Run a sweep and emit a ranked comparison table");
    std::string ab_config, ab_data, ab_out = "runs/ablation", ab_sweep;
    int64_t ab_parallel = 1;
    std::optional<uint64_t> ab_seed;
    ab->add_option("--config", ab_config, "Base run config JSON");
    ab->add_option("--data", ab_data, "Dataset JSONL path")->required();
    ab->add_option("--out", ab_out, "Output directory");
    ab->add_option("--seed", ab_seed, "Override the run seed for every arm");
    ab->add_option("--sweep", ab_sweep,
                   "Sweep name: components, crop-strategy, anchor-variant or data-scale")
        ->required();
    ab->add_option("--parallel", ab_parallel, "Arms to run concurrently")
        ->check(CLI::PositiveNumber);

    auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient verification");
    double gc_tol = 1e-5;
    bool gc_negative = false;
    gc->add_option("--tol", gc_tol, "Relative-error tolerance");
    gc->add_flag("--negative-control", gc_negative,
                 "Corrupt one gradient on purpose; the run must then fail");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_params, gen_out, gen_force);

        if (tr->parsed()) {
            RunConfig cfg;
            if (!tr_config.empty()) cfg = load_run_config(tr_config);
            apply_objective_preset(cfg.train, tr_objective, tr_no_image);
            if (tr_seed) {
                cfg.train.seed = *tr_seed;
                cfg.train.model.seed = *tr_seed;
            }
            if (!tr_lr_preset.empty()) {
                if (tr_lr_preset == "paper") {
                    cfg.train.peak_lr = kPaperPeakLr;
                } else if (tr_lr_preset != "desk") {
                    throw ConfigError("unknown lr preset \"" + tr_lr_preset + "\"");
                }
            }
            cfg.train.validate();
            return cmd_train(cfg.train, tr_data, tr_out, tr_verdicts);
        }

        if (ab->parsed()) {
            RunConfig cfg;
            if (!ab_config.empty()) cfg = load_run_config(ab_config);
            if (ab_seed) {
                cfg.train.seed = *ab_seed;
                cfg.train.model.seed = *ab_seed;
            }
            cfg.train.validate();
            return cmd_ablate(cfg.train, ab_sweep, ab_data, ab_out, ab_parallel);
        }

        if (gc->parsed()) return cmd_grad_check(gc_tol, gc_negative);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
