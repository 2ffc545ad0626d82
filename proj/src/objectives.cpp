// SPDX-License-Identifier: Apache-2.0
#include "mdpo/objectives.hpp"

#include <vector>

#include "mdpo/errors.hpp"
#include "mdpo/json_util.hpp"

namespace mdpo {

namespace {

// Formula core shared by the autodiff and plain-number paths; S is either
// Value or double.
template <class S>
S pairwise_term(const S& preferred, const S& dispreferred, double beta) {
    return -log_sigmoid(beta * (preferred - dispreferred));
}

template <class S>
S anchored_term(const S& lr_w, const S* lr_l, const S* lr_img, const ObjectiveConfig& cfg) {
    S total = -log_sigmoid(cfg.beta * lr_w - cfg.delta);
    if (cfg.anchor_variant == AnchorVariant::kChosenRejectedResponse ||
        cfg.anchor_variant == AnchorVariant::kChosenRejectedResponseImage) {
        total = total + -log_sigmoid(cfg.delta - cfg.beta * (*lr_l));
    }
    if (cfg.anchor_variant == AnchorVariant::kChosenRejectedResponseImage) {
        if (lr_img == nullptr) {
            throw ConfigError("ancpo_loss: anchor variant needs a rejected image");
        }
        total = total + -log_sigmoid(cfg.delta - cfg.beta * (*lr_img));
    }
    return total;
}

}  // namespace

std::string anchor_variant_name(AnchorVariant v) {
    switch (v) {
        case AnchorVariant::kChosenOnly:
            return "chosen-only";
        case AnchorVariant::kChosenRejectedResponse:
            return "chosen-rejected-response";
        case AnchorVariant::kChosenRejectedResponseImage:
            return "chosen-rejected-response-rejected-image";
    }
    throw ConfigError("unknown anchor variant");
}

AnchorVariant anchor_variant_from_name(const std::string& name) {
    if (name == "chosen-only") return AnchorVariant::kChosenOnly;
    if (name == "chosen-rejected-response") return AnchorVariant::kChosenRejectedResponse;
    if (name == "chosen-rejected-response-rejected-image") {
        return AnchorVariant::kChosenRejectedResponseImage;
    }
    throw ConfigError("unknown anchor variant \"" + name +
                      "\" (expected chosen-only, chosen-rejected-response or "
                      "chosen-rejected-response-rejected-image)");
}

void ObjectiveConfig::validate() const {
    if (!(beta > 0.0)) throw ConfigError("objective: beta must be positive");
    if (!components.dpo && !components.copo && !components.ancpo) {
        throw ConfigError("objective: at least one component must be enabled");
    }
    if (dpo_weight < 0.0 || copo_weight < 0.0 || ancpo_weight < 0.0) {
        throw ConfigError("objective: component weights must be non-negative");
    }
    if (no_image_mode && (components.copo ||
                          anchor_variant == AnchorVariant::kChosenRejectedResponseImage)) {
        throw ConfigError("objective: no_image_mode is incompatible with image-contrast terms");
    }
}

std::string ObjectiveConfig::to_json() const {
    nlohmann::json j{
        {"beta", beta},
        {"delta", delta},
        {"components",
         {{"dpo", components.dpo}, {"copo", components.copo}, {"ancpo", components.ancpo}}},
        {"anchor_variant", anchor_variant_name(anchor_variant)},
        {"no_image_mode", no_image_mode},
        {"dpo_weight", dpo_weight},
        {"copo_weight", copo_weight},
        {"ancpo_weight", ancpo_weight},
    };
    return j.dump();
}

ObjectiveConfig ObjectiveConfig::from_json(const std::string& text) {
    nlohmann::json j = parse_json(text, "objective config");
    require_known_keys(j,
                       {"beta", "delta", "components", "anchor_variant", "no_image_mode",
                        "dpo_weight", "copo_weight", "ancpo_weight"},
                       "objective config");
    ObjectiveConfig cfg;
    cfg.beta = json_get_or<double>(j, "beta", cfg.beta);
    cfg.delta = json_get_or<double>(j, "delta", cfg.delta);
    if (j.contains("components")) {
        const nlohmann::json& c = j.at("components");
        require_known_keys(c, {"dpo", "copo", "ancpo"}, "objective components");
        cfg.components.dpo = json_get_or<bool>(c, "dpo", cfg.components.dpo);
        cfg.components.copo = json_get_or<bool>(c, "copo", cfg.components.copo);
        cfg.components.ancpo = json_get_or<bool>(c, "ancpo", cfg.components.ancpo);
    }
    if (j.contains("anchor_variant")) {
        cfg.anchor_variant = anchor_variant_from_name(j.at("anchor_variant").get<std::string>());
    }
    cfg.no_image_mode = json_get_or<bool>(j, "no_image_mode", cfg.no_image_mode);
    cfg.dpo_weight = json_get_or<double>(j, "dpo_weight", cfg.dpo_weight);
    cfg.copo_weight = json_get_or<double>(j, "copo_weight", cfg.copo_weight);
    cfg.ancpo_weight = json_get_or<double>(j, "ancpo_weight", cfg.ancpo_weight);
    cfg.validate();
    return cfg;
}

ReferenceLogProbs reference_log_probs(const MultimodalLM& reference,
                                      const PreferenceExample& ex) {
    ReferenceLogProbs out;
    Tape tape;
    BoundModel bound = reference.bind(tape, /*requires_grad=*/false);
    PrefixCache prefix = reference.prefix_forward(bound, ex.image, ex.question);
    out.chosen = reference.sequence_log_prob(bound, prefix, ex.chosen, ex.chosen_mask).item();
    out.rejected = reference.sequence_log_prob(bound, prefix, ex.rejected, ex.rejected_mask).item();
    if (!ex.rejected_image.empty()) {
        PrefixCache alt = reference.prefix_forward(bound, ex.rejected_image, ex.question);
        out.image_rejected =
            reference.sequence_log_prob(bound, alt, ex.chosen, ex.chosen_mask).item();
        out.has_image_rejected = true;
    }
    return out;
}

LogRatioBundle compute_log_ratios(const BoundModel& policy, const ReferenceLogProbs& reference,
                                  const PreferenceExample& ex) {
    const MultimodalLM& model = *policy.model;
    PrefixCache prefix = model.prefix_forward(policy, ex.image, ex.question);
    Value chosen_logp = model.sequence_log_prob(policy, prefix, ex.chosen, ex.chosen_mask);
    Value rejected_logp = model.sequence_log_prob(policy, prefix, ex.rejected, ex.rejected_mask);

    LogRatioBundle bundle;
    bundle.chosen_logp = chosen_logp;
    bundle.lr_w = chosen_logp - reference.chosen;
    bundle.lr_l = rejected_logp - reference.rejected;
    if (!ex.rejected_image.empty()) {
        if (!reference.has_image_rejected) {
            throw ConfigError("compute_log_ratios: reference pass lacks the rejected-image term");
        }
        PrefixCache alt = model.prefix_forward(policy, ex.rejected_image, ex.question);
        Value img_logp = model.sequence_log_prob(policy, alt, ex.chosen, ex.chosen_mask);
        bundle.lr_img = img_logp - reference.image_rejected;
        bundle.has_rejected_image = true;
    }
    return bundle;
}

LogRatioBundle compute_log_ratios(const MultimodalLM& policy, const MultimodalLM& reference,
                                  Tape& tape, const PreferenceExample& ex) {
    if (!(policy.config() == reference.config())) {
        throw ConfigError("compute_log_ratios: policy and reference configs differ");
    }
    const ReferenceLogProbs ref = reference_log_probs(reference, ex);
    BoundModel bound = policy.bind(tape, /*requires_grad=*/true);
    return compute_log_ratios(bound, ref, ex);
}

LogRatioValues bundle_values(const LogRatioBundle& b) {
    LogRatioValues v;
    v.lr_w = b.lr_w.item();
    v.lr_l = b.lr_l.item();
    v.lr_img = b.has_rejected_image ? b.lr_img.item() : 0.0;
    v.chosen_logp = b.chosen_logp.item();
    v.has_rejected_image = b.has_rejected_image;
    return v;
}

Value dpo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg) {
    return pairwise_term(b.lr_w, b.lr_l, cfg.beta);
}

double dpo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg) {
    return pairwise_term(b.lr_w, b.lr_l, cfg.beta);
}

Value copo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg) {
    if (!b.has_rejected_image) throw ConfigError("copo_loss: bundle has no rejected image");
    return pairwise_term(b.lr_w, b.lr_img, cfg.beta);
}

double copo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg) {
    if (!b.has_rejected_image) throw ConfigError("copo_loss: bundle has no rejected image");
    return pairwise_term(b.lr_w, b.lr_img, cfg.beta);
}

Value ancpo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg) {
    const Value* lr_img = b.has_rejected_image ? &b.lr_img : nullptr;
    return anchored_term(b.lr_w, &b.lr_l, lr_img, cfg);
}

double ancpo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg) {
    const double* lr_img = b.has_rejected_image ? &b.lr_img : nullptr;
    return anchored_term(b.lr_w, &b.lr_l, lr_img, cfg);
}

MdpoLoss mdpo_loss(const LogRatioBundle& b, const ObjectiveConfig& cfg) {
    cfg.validate();
    MdpoLoss out;
    std::optional<Value> total;
    auto accumulate = [&](Value term, double weight) {
        Value weighted = weight * term;
        total = total ? *total + weighted : weighted;
        return term;
    };
    if (cfg.components.dpo) out.dpo = accumulate(dpo_loss(b, cfg), cfg.dpo_weight);
    if (cfg.components.copo) out.copo = accumulate(copo_loss(b, cfg), cfg.copo_weight);
    if (cfg.components.ancpo) out.ancpo = accumulate(ancpo_loss(b, cfg), cfg.ancpo_weight);
    out.total = *total;
    return out;
}

MdpoLossValues mdpo_loss(const LogRatioValues& b, const ObjectiveConfig& cfg) {
    cfg.validate();
    MdpoLossValues out;
    if (cfg.components.dpo) {
        out.dpo = dpo_loss(b, cfg);
        out.total += cfg.dpo_weight * out.dpo;
    }
    if (cfg.components.copo) {
        out.copo = copo_loss(b, cfg);
        out.total += cfg.copo_weight * out.copo;
    }
    if (cfg.components.ancpo) {
        out.ancpo = ancpo_loss(b, cfg);
        out.total += cfg.ancpo_weight * out.ancpo;
    }
    return out;
}

Value dpo_no_image_loss(const MultimodalLM& policy, const MultimodalLM& reference, Tape& tape,
                        const PreferenceExample& ex, const ObjectiveConfig& cfg) {
    if (!(policy.config() == reference.config())) {
        throw ConfigError("dpo_no_image_loss: policy and reference configs differ");
    }
    const std::vector<double> blank(ex.image.size(), 0.0);
    PreferenceExample masked = ex;
    masked.image = blank;
    masked.rejected_image = {};
    const ReferenceLogProbs ref = reference_log_probs(reference, masked);
    BoundModel bound = policy.bind(tape, /*requires_grad=*/true);
    LogRatioBundle bundle = compute_log_ratios(bound, ref, masked);
    return dpo_loss(bundle, cfg);
}

}  // namespace mdpo
