// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mdpo/data.hpp"
#include "mdpo/model.hpp"
#include "mdpo/objectives.hpp"

namespace mdpo {

/// Published training recipe value; the desk default trains the tiny model to
/// convergence within three epochs, which 1e-5 does not.
constexpr double kPaperPeakLr = 1e-5;

struct TrainConfig {
    int64_t epochs = 3;
    int64_t batch_size = 32;
    double peak_lr = 3e-4;
    double warmup_ratio = 0.1;  // cosine schedule after linear warmup
    double weight_decay = 0.0;
    double grad_clip_norm = 1.0;
    uint64_t seed = 0;
    int64_t heldout_size = 256;  // held-out set for chosen-likelihood tracking
    // Supervised warmup epochs on the chosen responses before preference
    // optimization begins; the reference is snapshotted after this stage, so
    // preference training starts from a language- and image-conditioned
    // model rather than a random one.
    int64_t sft_epochs = 2;
    ObjectiveConfig objective;
    PerturbStrategy perturb = CropKeep{};
    ModelConfig model;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

/// Linear warmup over round(warmup_ratio * total_steps) steps, then cosine
/// decay to zero at total_steps.
double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg);

/// Scales gradients in place so their global norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& grads, double max_norm);

struct MetricsEvent {
    int64_t step = 0;
    int64_t epoch = 0;
    double lr = 0.0;
    double total_loss = 0.0;
    double dpo_loss = 0.0;
    double copo_loss = 0.0;
    double ancpo_loss = 0.0;
    double mean_lr_w = 0.0;
    double mean_lr_l = 0.0;
    double mean_lr_img = 0.0;
    double mean_chosen_logp = 0.0;
    double reward_accuracy = 0.0;  // in-batch fraction with lr_w > lr_l, ties 0.5

    std::string to_json() const;
};

/// Held-out mean chosen log-probability, recorded before training and after
/// each epoch.
struct EvalEvent {
    int64_t epoch = 0;  // 0 = before the first step
    double heldout_chosen_logp = 0.0;

    std::string to_json() const;
};

struct TrainResult {
    MultimodalLM policy;
    MultimodalLM reference;
    std::vector<MetricsEvent> metrics;
    std::vector<EvalEvent> evals;
    double step0_total_loss = 0.0;
    int64_t sft_steps = 0;
    std::filesystem::path metrics_path;
    std::filesystem::path reference_path;
    std::vector<std::filesystem::path> checkpoints;
};

/// Runs the optimization loop: reference snapshot before step 0, AdamW with
/// gradient clipping under the warmup+cosine schedule, one metrics row per
/// step. Deterministic for a fixed config and seed regardless of worker
/// count. When out_dir is non-empty, writes metrics.jsonl, reference.bin and
/// ckpt-epoch{N}.bin there.
TrainResult train(const TrainConfig& cfg, const std::vector<PreferenceRecord>& dataset,
                  const std::filesystem::path& out_dir = {});

/// Parses a metrics JSONL file back into step and eval events.
void load_metrics_jsonl(const std::filesystem::path& path, std::vector<MetricsEvent>* steps,
                        std::vector<EvalEvent>* evals);

}  // namespace mdpo
