// SPDX-License-Identifier: Apache-2.0
#include "mdpo/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>

#include "mdpo/errors.hpp"
#include "mdpo/json_util.hpp"
#include "mdpo/parallel.hpp"

namespace mdpo {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

constexpr uint64_t kShuffleStream = 0x7241A001ull << 32;
constexpr uint64_t kRejectedImageStream = 0x7241A002ull << 32;
constexpr uint64_t kSftShuffleStream = 0x7241A003ull << 32;
constexpr uint64_t kHeldoutSeedSalt = 0x48454C44ull;  // held-out set uses its own seed

uint64_t rejected_image_stream(int64_t epoch, int64_t record_index) {
    return kRejectedImageStream ^ (static_cast<uint64_t>(epoch) << 24) ^
           static_cast<uint64_t>(record_index);
}

struct RecordOutcome {
    MdpoLossValues loss;
    LogRatioValues ratios;
    std::vector<Tensor> grads;
};

}  // namespace

int64_t worker_count() {
    int64_t n = static_cast<int64_t>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* cap = std::getenv("MDPO_LAB_THREADS")) {
        const int64_t parsed = std::strtoll(cap, nullptr, 10);
        if (parsed >= 1) n = std::min(n, parsed);
    }
    return n;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(peak_lr >= 0.0)) throw ConfigError("train: peak_lr must be non-negative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
        throw ConfigError("train: warmup_ratio must be in [0, 1)");
    }
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
    if (!(grad_clip_norm > 0.0)) throw ConfigError("train: grad_clip_norm must be positive");
    if (heldout_size < 2) throw ConfigError("train: heldout_size must be >= 2");
    if (sft_epochs < 0) throw ConfigError("train: sft_epochs must be non-negative");
    objective.validate();
    model.validate();
}

std::string TrainConfig::to_json() const {
    nlohmann::json j{
        {"epochs", epochs},
        {"batch_size", batch_size},
        {"peak_lr", peak_lr},
        {"warmup_ratio", warmup_ratio},
        {"weight_decay", weight_decay},
        {"grad_clip_norm", grad_clip_norm},
        {"seed", seed},
        {"heldout_size", heldout_size},
        {"sft_epochs", sft_epochs},
        {"objective", nlohmann::json::parse(objective.to_json())},
        {"perturb", nlohmann::json::parse(perturb_strategy_to_json(perturb))},
        {"model", nlohmann::json::parse(model.to_json())},
    };
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j = parse_json(text, "train config");
    require_known_keys(j,
                       {"epochs", "batch_size", "peak_lr", "warmup_ratio", "weight_decay",
                        "grad_clip_norm", "seed", "heldout_size", "sft_epochs", "objective",
                        "perturb", "model"},
                       "train config");
    TrainConfig cfg;
    cfg.sft_epochs = json_get_or<int64_t>(j, "sft_epochs", cfg.sft_epochs);
    cfg.epochs = json_get_or<int64_t>(j, "epochs", cfg.epochs);
    cfg.batch_size = json_get_or<int64_t>(j, "batch_size", cfg.batch_size);
    cfg.peak_lr = json_get_or<double>(j, "peak_lr", cfg.peak_lr);
    cfg.warmup_ratio = json_get_or<double>(j, "warmup_ratio", cfg.warmup_ratio);
    cfg.weight_decay = json_get_or<double>(j, "weight_decay", cfg.weight_decay);
    cfg.grad_clip_norm = json_get_or<double>(j, "grad_clip_norm", cfg.grad_clip_norm);
    cfg.seed = json_get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.heldout_size = json_get_or<int64_t>(j, "heldout_size", cfg.heldout_size);
    if (j.contains("objective")) cfg.objective = ObjectiveConfig::from_json(j.at("objective").dump());
    if (j.contains("perturb")) cfg.perturb = perturb_strategy_from_json(j.at("perturb").dump());
    if (j.contains("model")) cfg.model = ModelConfig::from_json(j.at("model").dump());
    cfg.validate();
    return cfg;
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
    if (step < 0 || step > total_steps) {
        throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    }
    const int64_t warmup_steps =
        static_cast<int64_t>(std::llround(cfg.warmup_ratio * static_cast<double>(total_steps)));
    if (step < warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (total_steps == warmup_steps) return cfg.peak_lr;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
    double grad_sq = 0.0;
    for (const Tensor& g : grads) {
        for (int64_t i = 0; i < g.numel(); ++i) grad_sq += g[i] * g[i];
    }
    const double norm = std::sqrt(grad_sq);
    if (std::isfinite(norm) && norm > max_norm) {
        const double scale = max_norm / norm;
        for (Tensor& g : grads) {
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

std::string MetricsEvent::to_json() const {
    nlohmann::json j{
        {"kind", "step"},
        {"step", step},
        {"epoch", epoch},
        {"lr", lr},
        {"total_loss", total_loss},
        {"dpo_loss", dpo_loss},
        {"copo_loss", copo_loss},
        {"ancpo_loss", ancpo_loss},
        {"mean_lr_w", mean_lr_w},
        {"mean_lr_l", mean_lr_l},
        {"mean_lr_img", mean_lr_img},
        {"mean_chosen_logp", mean_chosen_logp},
        {"reward_accuracy", reward_accuracy},
    };
    return j.dump();
}

std::string EvalEvent::to_json() const {
    nlohmann::json j{
        {"kind", "eval"},
        {"epoch", epoch},
        {"heldout_chosen_logp", heldout_chosen_logp},
    };
    return j.dump();
}

namespace {

void verify_dataset_compatible(const ModelConfig& model,
                               const std::vector<PreferenceRecord>& dataset) {
    if (dataset.empty()) throw ConfigError("train: dataset is empty");
    for (const PreferenceRecord& rec : dataset) {
        if (rec.scene.grid != model.image_grid) {
            throw ConfigError("train: dataset grid " + std::to_string(rec.scene.grid) +
                              " does not match model image_grid " +
                              std::to_string(model.image_grid));
        }
        auto check_tokens = [&](const std::vector<int64_t>& toks, int64_t limit,
                                const char* what) {
            if (static_cast<int64_t>(toks.size()) > limit) {
                throw ConfigError(std::string("train: ") + what + " longer than the model allows");
            }
            for (int64_t t : toks) {
                if (t < 0 || t >= model.vocab_size) {
                    throw ConfigError(std::string("train: ") + what +
                                      " token outside the model vocabulary");
                }
            }
        };
        check_tokens(rec.question_tokens, model.max_question_len, "question");
        check_tokens(rec.chosen_tokens, model.max_response_len, "chosen response");
        check_tokens(rec.rejected_tokens, model.max_response_len, "rejected response");
    }
}

double heldout_mean_chosen_logp(const MultimodalLM& policy,
                                const std::vector<PreferenceRecord>& heldout) {
    std::vector<double> logps(heldout.size());
    parallel_for(static_cast<int64_t>(heldout.size()), [&](int64_t i) {
        const PreferenceRecord& rec = heldout[static_cast<size_t>(i)];
        const Image img = rec.image();
        const std::vector<uint8_t> mask(rec.chosen_tokens.size(), 1);
        logps[static_cast<size_t>(i)] = policy.sequence_log_prob_value(
            img.pixels, rec.question_tokens, rec.chosen_tokens, mask);
    });
    double total = 0.0;
    for (double v : logps) total += v;  // fixed index order
    return total / static_cast<double>(logps.size());
}

std::string norm_report(const MultimodalLM& policy, const std::vector<Tensor>& grads) {
    std::ostringstream os;
    for (size_t p = 0; p < policy.parameters().size(); ++p) {
        double param_norm = 0.0, grad_norm = 0.0;
        const Tensor& value = policy.parameters()[p].value;
        for (int64_t i = 0; i < value.numel(); ++i) param_norm += value[i] * value[i];
        if (p < grads.size()) {
            for (int64_t i = 0; i < grads[p].numel(); ++i) {
                grad_norm += grads[p][i] * grads[p][i];
            }
        }
        os << "  " << policy.parameters()[p].name << ": |theta|=" << std::sqrt(param_norm)
           << " |grad|=" << std::sqrt(grad_norm) << "\n";
    }
    return os.str();
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<PreferenceRecord>& dataset,
                  const std::filesystem::path& out_dir) {
    cfg.validate();
    verify_dataset_compatible(cfg.model, dataset);
    const int64_t n = static_cast<int64_t>(dataset.size());
    if (cfg.batch_size > n) throw ConfigError("train: batch_size exceeds dataset size");

    const bool needs_rejected_image =
        cfg.objective.components.copo ||
        cfg.objective.anchor_variant == AnchorVariant::kChosenRejectedResponseImage;

    if (cfg.model.image_grid != kSceneGrid || cfg.model.vocab_size <= tokens::kEos) {
        throw ConfigError("train: model must cover the synthetic task (grid " +
                          std::to_string(kSceneGrid) + ", vocab > " +
                          std::to_string(tokens::kEos) + ") for held-out tracking");
    }

    TrainResult result;
    result.policy = MultimodalLM(cfg.model);
    MultimodalLM& policy = result.policy;

    const std::vector<PreferenceRecord> heldout =
        generate_dataset(cfg.seed ^ kHeldoutSeedSalt, cfg.heldout_size, 0.0);

    std::ofstream metrics_os;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        result.metrics_path = out_dir / "metrics.jsonl";
        metrics_os.open(result.metrics_path, std::ios::binary | std::ios::trunc);
        if (!metrics_os) throw IoError("cannot open metrics log: " + result.metrics_path.string());
    }
    auto emit = [&](const std::string& row) {
        if (metrics_os.is_open()) metrics_os << row << "\n";
    };

    const int64_t batches_per_epoch_all = (n + cfg.batch_size - 1) / cfg.batch_size;
    const size_t n_params_all = policy.parameters().size();

    // Supervised warmup on the chosen responses: the counterpart of starting
    // preference optimization from a finetuned model instead of a random one.
    if (cfg.sft_epochs > 0) {
        std::vector<Tensor> sft_m, sft_v;
        for (const Parameter& p : policy.parameters()) {
            sft_m.emplace_back(p.value.shape());
            sft_v.emplace_back(p.value.shape());
        }
        const int64_t sft_total = cfg.sft_epochs * batches_per_epoch_all;
        int64_t sft_step = 0;
        for (int64_t epoch = 0; epoch < cfg.sft_epochs; ++epoch) {
            std::vector<int64_t> order(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
            SeededRng shuffle_rng(cfg.seed, kSftShuffleStream + static_cast<uint64_t>(epoch));
            for (int64_t i = n; i > 1; --i) {
                const int64_t j =
                    static_cast<int64_t>(shuffle_rng.below(static_cast<uint64_t>(i)));
                std::swap(order[static_cast<size_t>(i - 1)], order[static_cast<size_t>(j)]);
            }

            for (int64_t batch_start = 0; batch_start < n; batch_start += cfg.batch_size) {
                const int64_t batch_n = std::min<int64_t>(cfg.batch_size, n - batch_start);
                std::vector<double> losses(static_cast<size_t>(batch_n));
                std::vector<std::vector<Tensor>> grads_by_slot(static_cast<size_t>(batch_n));
                parallel_for(batch_n, [&](int64_t slot) {
                    const int64_t rec_index = order[static_cast<size_t>(batch_start + slot)];
                    const PreferenceRecord& rec = dataset[static_cast<size_t>(rec_index)];
                    const Image image = rec.image();
                    const std::vector<uint8_t> mask(rec.chosen_tokens.size(), 1);
                    Tape tape;
                    BoundModel bound = policy.bind(tape, true);
                    PrefixCache prefix =
                        policy.prefix_forward(bound, image.pixels, rec.question_tokens);
                    Value logp =
                        policy.sequence_log_prob(bound, prefix, rec.chosen_tokens, mask);
                    Value loss = tape.affine(logp, -1.0, 0.0);
                    tape.backward(loss);
                    losses[static_cast<size_t>(slot)] = loss.item();
                    std::vector<Tensor>& grads = grads_by_slot[static_cast<size_t>(slot)];
                    grads.reserve(n_params_all);
                    for (Value v : bound.params) grads.push_back(tape.grad(v));
                });

                const double inv_b = 1.0 / static_cast<double>(batch_n);
                double mean_loss = 0.0;
                std::vector<Tensor> grads;
                grads.reserve(n_params_all);
                for (const Parameter& p : policy.parameters()) grads.emplace_back(p.value.shape());
                for (int64_t slot = 0; slot < batch_n; ++slot) {
                    mean_loss += inv_b * losses[static_cast<size_t>(slot)];
                    for (size_t p = 0; p < n_params_all; ++p) {
                        Tensor& acc = grads[p];
                        const Tensor& g = grads_by_slot[static_cast<size_t>(slot)][p];
                        for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += inv_b * g[i];
                    }
                }
                const double grad_norm = clip_gradients(grads, cfg.grad_clip_norm);
                if (!std::isfinite(mean_loss) || !std::isfinite(grad_norm)) {
                    throw TrainingError("train: non-finite loss or gradient at warmup step " +
                                        std::to_string(sft_step));
                }
                const double lr = lr_at(sft_step, sft_total, cfg);
                const double t = static_cast<double>(sft_step + 1);
                const double bias1 = 1.0 - std::pow(kAdamBeta1, t);
                const double bias2 = 1.0 - std::pow(kAdamBeta2, t);
                for (size_t p = 0; p < n_params_all; ++p) {
                    Tensor& theta = policy.parameters()[p].value;
                    Tensor& m = sft_m[p];
                    Tensor& v = sft_v[p];
                    const Tensor& g = grads[p];
                    for (int64_t i = 0; i < theta.numel(); ++i) {
                        m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
                        v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
                        theta[i] -= lr * (m[i] / bias1 / (std::sqrt(v[i] / bias2) + kAdamEps) +
                                          cfg.weight_decay * theta[i]);
                    }
                }
                nlohmann::json row{{"kind", "sft-step"},
                                   {"step", sft_step},
                                   {"epoch", epoch},
                                   {"lr", lr},
                                   {"loss", mean_loss}};
                emit(row.dump());
                ++sft_step;
            }
        }
        result.sft_steps = sft_step;
    }

    // The frozen reference is the post-warmup model, snapshotted before the
    // first preference step.
    result.reference = snapshot_reference(policy);
    const MultimodalLM& reference = result.reference;
    if (!out_dir.empty()) {
        result.reference_path = out_dir / "reference.bin";
        reference.save_checkpoint(result.reference_path);
    }

    // Reference log-probs for the fixed (image, responses) pairs do not change
    // across epochs; cache them after first use. The rejected-image pass is
    // resampled per epoch and stays uncached.
    std::vector<double> ref_chosen(static_cast<size_t>(n)), ref_rejected(static_cast<size_t>(n));
    std::vector<uint8_t> ref_filled(static_cast<size_t>(n), 0);

    // Adam state, updated in fixed parameter order.
    std::vector<Tensor> adam_m, adam_v;
    for (const Parameter& p : policy.parameters()) {
        adam_m.emplace_back(p.value.shape());
        adam_v.emplace_back(p.value.shape());
    }

    const int64_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = cfg.epochs * batches_per_epoch;
    const size_t n_params = policy.parameters().size();

    {
        EvalEvent ev{0, heldout_mean_chosen_logp(policy, heldout)};
        result.evals.push_back(ev);
        emit(ev.to_json());
    }

    int64_t step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        SeededRng shuffle_rng(cfg.seed, kShuffleStream + static_cast<uint64_t>(epoch));
        for (int64_t i = n; i > 1; --i) {
            const int64_t j = static_cast<int64_t>(shuffle_rng.below(static_cast<uint64_t>(i)));
            std::swap(order[static_cast<size_t>(i - 1)], order[static_cast<size_t>(j)]);
        }

        for (int64_t batch_start = 0; batch_start < n; batch_start += cfg.batch_size) {
            const int64_t batch_n = std::min<int64_t>(cfg.batch_size, n - batch_start);
            std::vector<RecordOutcome> outcomes(static_cast<size_t>(batch_n));

            parallel_for(batch_n, [&](int64_t slot) {
                const int64_t rec_index = order[static_cast<size_t>(batch_start + slot)];
                const PreferenceRecord& rec = dataset[static_cast<size_t>(rec_index)];
                Image image = rec.image();
                if (cfg.objective.no_image_mode) {
                    std::fill(image.pixels.begin(), image.pixels.end(), 0.0);
                }
                Image rejected_image;
                if (needs_rejected_image) {
                    SeededRng rng(cfg.seed, rejected_image_stream(epoch, rec_index));
                    rejected_image =
                        make_rejected_image(image, cfg.perturb, rng, dataset, rec_index);
                }
                const std::vector<uint8_t> chosen_mask(rec.chosen_tokens.size(), 1);
                const std::vector<uint8_t> rejected_mask(rec.rejected_tokens.size(), 1);
                PreferenceExample ex;
                ex.image = image.pixels;
                ex.question = rec.question_tokens;
                ex.chosen = rec.chosen_tokens;
                ex.chosen_mask = chosen_mask;
                ex.rejected = rec.rejected_tokens;
                ex.rejected_mask = rejected_mask;
                if (needs_rejected_image) ex.rejected_image = rejected_image.pixels;

                ReferenceLogProbs ref;
                if (ref_filled[static_cast<size_t>(rec_index)]) {
                    ref.chosen = ref_chosen[static_cast<size_t>(rec_index)];
                    ref.rejected = ref_rejected[static_cast<size_t>(rec_index)];
                } else {
                    PreferenceExample fixed = ex;
                    fixed.rejected_image = {};
                    const ReferenceLogProbs fresh = reference_log_probs(reference, fixed);
                    ref.chosen = fresh.chosen;
                    ref.rejected = fresh.rejected;
                    ref_chosen[static_cast<size_t>(rec_index)] = fresh.chosen;
                    ref_rejected[static_cast<size_t>(rec_index)] = fresh.rejected;
                    ref_filled[static_cast<size_t>(rec_index)] = 1;
                }
                if (needs_rejected_image) {
                    Tape ref_tape;
                    BoundModel ref_bound = reference.bind(ref_tape, false);
                    PrefixCache alt =
                        reference.prefix_forward(ref_bound, ex.rejected_image, ex.question);
                    ref.image_rejected =
                        reference.sequence_log_prob(ref_bound, alt, ex.chosen, ex.chosen_mask)
                            .item();
                    ref.has_image_rejected = true;
                }

                Tape tape;
                BoundModel bound = policy.bind(tape, /*requires_grad=*/true);
                LogRatioBundle bundle = compute_log_ratios(bound, ref, ex);
                MdpoLoss loss = mdpo_loss(bundle, cfg.objective);
                tape.backward(loss.total);

                RecordOutcome& out = outcomes[static_cast<size_t>(slot)];
                out.ratios = bundle_values(bundle);
                out.loss.total = loss.total.item();
                out.loss.dpo = loss.dpo ? loss.dpo->item() : 0.0;
                out.loss.copo = loss.copo ? loss.copo->item() : 0.0;
                out.loss.ancpo = loss.ancpo ? loss.ancpo->item() : 0.0;
                out.grads.reserve(n_params);
                for (Value v : bound.params) out.grads.push_back(tape.grad(v));
            });

            // Deterministic ordered reduction: batch slot 0, 1, ... regardless
            // of which worker produced each outcome.
            const double inv_b = 1.0 / static_cast<double>(batch_n);
            MetricsEvent ev;
            ev.step = step;
            ev.epoch = epoch;
            ev.lr = lr_at(step, total_steps, cfg);
            std::vector<Tensor> grads;
            grads.reserve(n_params);
            for (const Parameter& p : policy.parameters()) grads.emplace_back(p.value.shape());
            for (int64_t slot = 0; slot < batch_n; ++slot) {
                const RecordOutcome& out = outcomes[static_cast<size_t>(slot)];
                ev.total_loss += inv_b * out.loss.total;
                ev.dpo_loss += inv_b * out.loss.dpo;
                ev.copo_loss += inv_b * out.loss.copo;
                ev.ancpo_loss += inv_b * out.loss.ancpo;
                ev.mean_lr_w += inv_b * out.ratios.lr_w;
                ev.mean_lr_l += inv_b * out.ratios.lr_l;
                ev.mean_lr_img += inv_b * out.ratios.lr_img;
                ev.mean_chosen_logp += inv_b * out.ratios.chosen_logp;
                if (out.ratios.lr_w > out.ratios.lr_l) {
                    ev.reward_accuracy += inv_b;
                } else if (out.ratios.lr_w == out.ratios.lr_l) {
                    ev.reward_accuracy += 0.5 * inv_b;
                }
                for (size_t p = 0; p < n_params; ++p) {
                    Tensor& acc = grads[p];
                    const Tensor& g = out.grads[p];
                    for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += inv_b * g[i];
                }
            }

            const double grad_norm = clip_gradients(grads, cfg.grad_clip_norm);
            if (!std::isfinite(ev.total_loss) || !std::isfinite(grad_norm)) {
                std::ostringstream os;
                os << "train: non-finite loss or gradient at step " << step << " (epoch " << epoch
                   << ", batch records:";
                for (int64_t slot = 0; slot < batch_n; ++slot) {
                    os << " " << order[static_cast<size_t>(batch_start + slot)];
                }
                os << ")\nparameter norms:\n" << norm_report(policy, grads);
                throw TrainingError(os.str());
            }

            const double t = static_cast<double>(step + 1);
            const double bias1 = 1.0 - std::pow(kAdamBeta1, t);
            const double bias2 = 1.0 - std::pow(kAdamBeta2, t);
            for (size_t p = 0; p < n_params; ++p) {
                Tensor& theta = policy.parameters()[p].value;
                Tensor& m = adam_m[p];
                Tensor& v = adam_v[p];
                const Tensor& g = grads[p];
                for (int64_t i = 0; i < theta.numel(); ++i) {
                    m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
                    v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
                    const double m_hat = m[i] / bias1;
                    const double v_hat = v[i] / bias2;
                    theta[i] -= ev.lr * (m_hat / (std::sqrt(v_hat) + kAdamEps) +
                                         cfg.weight_decay * theta[i]);
                }
            }

            if (step == 0) result.step0_total_loss = ev.total_loss;
            emit(ev.to_json());
            result.metrics.push_back(ev);
            ++step;
        }

        EvalEvent ev{epoch + 1, heldout_mean_chosen_logp(policy, heldout)};
        result.evals.push_back(ev);
        emit(ev.to_json());
        if (!out_dir.empty()) {
            const std::filesystem::path ckpt =
                out_dir / ("ckpt-epoch" + std::to_string(epoch + 1) + ".bin");
            policy.save_checkpoint(ckpt);
            result.checkpoints.push_back(ckpt);
        }
    }

    if (metrics_os.is_open() && !metrics_os) {
        throw IoError("failed writing metrics log: " + result.metrics_path.string());
    }
    return result;
}

void load_metrics_jsonl(const std::filesystem::path& path, std::vector<MetricsEvent>* steps,
                        std::vector<EvalEvent>* evals) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open metrics log: " + path.string());
    std::string line;
    int64_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = parse_json(line, "metrics line " + std::to_string(line_no));
        const std::string kind = json_get_or<std::string>(j, "kind", "step");
        if (kind == "eval") {
            if (evals) {
                EvalEvent ev;
                ev.epoch = j.at("epoch").get<int64_t>();
                ev.heldout_chosen_logp = j.at("heldout_chosen_logp").get<double>();
                evals->push_back(ev);
            }
            continue;
        }
        if (kind != "step" || !steps) continue;
        MetricsEvent ev;
        ev.step = j.at("step").get<int64_t>();
        ev.epoch = j.at("epoch").get<int64_t>();
        ev.lr = j.at("lr").get<double>();
        ev.total_loss = j.at("total_loss").get<double>();
        ev.dpo_loss = j.at("dpo_loss").get<double>();
        ev.copo_loss = j.at("copo_loss").get<double>();
        ev.ancpo_loss = j.at("ancpo_loss").get<double>();
        ev.mean_lr_w = j.at("mean_lr_w").get<double>();
        ev.mean_lr_l = j.at("mean_lr_l").get<double>();
        ev.mean_lr_img = j.at("mean_lr_img").get<double>();
        ev.mean_chosen_logp = j.at("mean_chosen_logp").get<double>();
        ev.reward_accuracy = j.at("reward_accuracy").get<double>();
        steps->push_back(ev);
    }
}

}  // namespace mdpo
