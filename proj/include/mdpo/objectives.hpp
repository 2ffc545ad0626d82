// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>

#include "mdpo/model.hpp"
#include "mdpo/tape.hpp"

namespace mdpo {

/// Which implicit rewards are pinned by the anchor term.
enum class AnchorVariant {
    kChosenOnly,                   // reward of (m_w, q, y_w) pushed above delta
    kChosenRejectedResponse,       // additionally pushes reward of y_l below delta
    kChosenRejectedResponseImage,  // additionally pushes reward under m_l below delta
};

std::string anchor_variant_name(AnchorVariant v);
AnchorVariant anchor_variant_from_name(const std::string& name);

struct ObjectiveComponents {
    bool dpo = true;
    bool copo = true;
    bool ancpo = true;
};

struct ObjectiveConfig {
    double beta = 0.1;
    double delta = 0.0;
    ObjectiveComponents components;
    AnchorVariant anchor_variant = AnchorVariant::kChosenOnly;
    bool no_image_mode = false;
    // Per-component weights exist for ablation sweeps only; the combined
    // objective is the plain unweighted sum at the defaults.
    double dpo_weight = 1.0;
    double copo_weight = 1.0;
    double ancpo_weight = 1.0;

    void validate() const;
    std::string to_json() const;
    static ObjectiveConfig from_json(const std::string& text);
};

/// One preference instance, viewed as spans over caller-owned storage:
/// chosen/rejected responses under the chosen image, plus optionally a
/// rejected image for the image-contrast pair.
struct PreferenceExample {
    std::span<const double> image;
    std::span<const int64_t> question;
    std::span<const int64_t> chosen;
    std::span<const uint8_t> chosen_mask;
    std::span<const int64_t> rejected;
    std::span<const uint8_t> rejected_mask;
    std::span<const double> rejected_image;  // empty when not constructed
};

/// Frozen-model sequence log-probs entering the log-ratios; these carry no
/// gradient, so they are plain numbers and can be cached across steps.
struct ReferenceLogProbs {
    double chosen = 0.0;
    double rejected = 0.0;
    double image_rejected = 0.0;
    bool has_image_rejected = false;
};

ReferenceLogProbs reference_log_probs(const MultimodalLM& reference,
                                      const PreferenceExample& example);

/// Sequence-level log pi_theta / pi_ref ratios, differentiable w.r.t. policy
/// parameters through `bound`.
struct LogRatioBundle {
    Value lr_w;         // chosen response, chosen image
    Value lr_l;         // rejected response, chosen image
    Value lr_img;       // chosen response, rejected image (when present)
    Value chosen_logp;  // raw log pi_theta(y_w | m_w, q)
    bool has_rejected_image = false;
};

/// Plain-number view of a bundle, for evaluation and oracle tests.
struct LogRatioValues {
    double lr_w = 0.0;
    double lr_l = 0.0;
    double lr_img = 0.0;
    double chosen_logp = 0.0;
    bool has_rejected_image = false;
};

LogRatioValues bundle_values(const LogRatioBundle& bundle);

LogRatioBundle compute_log_ratios(const BoundModel& policy, const ReferenceLogProbs& reference,
                                  const PreferenceExample& example);

/// Convenience wrapper that runs the reference pass itself. Errors if the two
/// models are configured differently.
LogRatioBundle compute_log_ratios(const MultimodalLM& policy, const MultimodalLM& reference,
                                  Tape& tape, const PreferenceExample& example);

// The losses, in both differentiable and plain-number form. Every sigma-term
// is evaluated as softplus of the negated argument, so values stay finite for
// arguments up to |x| ~ 700.
Value dpo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg);
Value copo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg);
Value ancpo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg);
double dpo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg);
double copo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg);
double ancpo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg);

struct MdpoLoss {
    Value total;
    std::optional<Value> dpo;
    std::optional<Value> copo;
    std::optional<Value> ancpo;
};

struct MdpoLossValues {
    double total = 0.0;
    double dpo = 0.0;
    double copo = 0.0;
    double ancpo = 0.0;
};

/// Weighted sum of the enabled components (weights are 1 by default, matching
/// the combined objective), with the per-component breakdown.
MdpoLoss mdpo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg);
MdpoLossValues mdpo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg);

/// The image-free probe objective: standard preference loss with the image
/// replaced by all-zeros for both policy and reference.
Value dpo_no_image_loss(const MultimodalLM& policy, const MultimodalLM& reference, Tape& tape,
                        const PreferenceExample& example, const ObjectiveConfig& cfg);

}  // namespace mdpo
