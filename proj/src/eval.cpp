// SPDX-License-Identifier: Apache-2.0
#include "mdpo/eval.hpp"

#include <cmath>
#include <fstream>

#include "mdpo/errors.hpp"
#include "mdpo/json_util.hpp"
#include "mdpo/parallel.hpp"

namespace mdpo {

namespace {

constexpr uint64_t kDerangementStream = 0xE7A10001ull << 32;

struct RecordVerdict {
    double lr_w_true = 0.0, lr_l_true = 0.0;
    double lr_w_blank = 0.0, lr_l_blank = 0.0;
    double lr_w_mismatched = 0.0, lr_l_mismatched = 0.0;
    double chosen_logp = 0.0;
    std::vector<int64_t> decoded;
    bool hallucinated = false;
};

double pairwise_score(double lr_w, double lr_l) {
    if (lr_w > lr_l) return 1.0;
    if (lr_w == lr_l) return 0.5;
    return 0.0;
}

}  // namespace

std::string probe_mode_name(ProbeMode mode) {
    switch (mode) {
        case ProbeMode::kTrueImage:
            return "true-image";
        case ProbeMode::kBlankImage:
            return "blank-image";
        case ProbeMode::kMismatchedImage:
            return "mismatched-image";
    }
    throw ConfigError("unknown probe mode");
}

std::vector<int64_t> derangement(int64_t n, SeededRng rng) {
    if (n < 2) throw ConfigError("derangement: need at least two elements");
    // Sattolo's algorithm yields a uniform single-cycle permutation; a single
    // cycle over n >= 2 elements has no fixed point.
    std::vector<int64_t> perm(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i)));
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    return perm;
}

namespace {

// Log-ratio pair for one record under one image substitution.
void score_pair(const MultimodalLM& policy, const MultimodalLM& reference,
                const PreferenceRecord& rec, std::span<const double> image, double* lr_w,
                double* lr_l, double* chosen_logp) {
    const std::vector<uint8_t> chosen_mask(rec.chosen_tokens.size(), 1);
    const std::vector<uint8_t> rejected_mask(rec.rejected_tokens.size(), 1);

    Tape pol_tape;
    BoundModel pol = policy.bind(pol_tape, false);
    PrefixCache pol_prefix = policy.prefix_forward(pol, image, rec.question_tokens);
    const double pol_chosen =
        policy.sequence_log_prob(pol, pol_prefix, rec.chosen_tokens, chosen_mask).item();
    const double pol_rejected =
        policy.sequence_log_prob(pol, pol_prefix, rec.rejected_tokens, rejected_mask).item();

    Tape ref_tape;
    BoundModel ref = reference.bind(ref_tape, false);
    PrefixCache ref_prefix = reference.prefix_forward(ref, image, rec.question_tokens);
    const double ref_chosen =
        reference.sequence_log_prob(ref, ref_prefix, rec.chosen_tokens, chosen_mask).item();
    const double ref_rejected =
        reference.sequence_log_prob(ref, ref_prefix, rec.rejected_tokens, rejected_mask).item();

    *lr_w = pol_chosen - ref_chosen;
    *lr_l = pol_rejected - ref_rejected;
    if (chosen_logp) *chosen_logp = pol_chosen;
}

std::vector<double> mode_image(const PreferenceRecord& rec, ProbeMode mode,
                               std::span<const PreferenceRecord> records,
                               std::span<const int64_t> perm, int64_t index) {
    switch (mode) {
        case ProbeMode::kTrueImage:
            return rec.image().pixels;
        case ProbeMode::kBlankImage:
            return std::vector<double>(
                static_cast<size_t>(rec.scene.grid * rec.scene.grid * 3), 0.0);
        case ProbeMode::kMismatchedImage:
            return records[static_cast<size_t>(perm[static_cast<size_t>(index)])].image().pixels;
    }
    throw ConfigError("unknown probe mode");
}

}  // namespace

double preference_accuracy(const MultimodalLM& policy, const MultimodalLM& reference,
                           std::span<const PreferenceRecord> records, ProbeMode mode,
                           uint64_t seed) {
    if (records.empty()) throw ConfigError("preference_accuracy: empty record set");
    if (!(policy.config() == reference.config())) {
        throw ConfigError("preference_accuracy: policy and reference configs differ");
    }
    const int64_t n = static_cast<int64_t>(records.size());
    std::vector<int64_t> perm;
    if (mode == ProbeMode::kMismatchedImage) {
        perm = derangement(n, SeededRng(seed, kDerangementStream));
    }
    std::vector<double> scores(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i) {
        const PreferenceRecord& rec = records[static_cast<size_t>(i)];
        const std::vector<double> image = mode_image(rec, mode, records, perm, i);
        double lr_w = 0.0, lr_l = 0.0;
        score_pair(policy, reference, rec, image, &lr_w, &lr_l, nullptr);
        scores[static_cast<size_t>(i)] = pairwise_score(lr_w, lr_l);
    });
    double total = 0.0;
    for (double s : scores) total += s;
    return total / static_cast<double>(n);
}

double chosen_likelihood_delta(std::span<const EvalEvent> evals) {
    if (evals.size() < 2) {
        throw ConfigError("chosen_likelihood_delta: need at least two evaluation points");
    }
    return evals.back().heldout_chosen_logp - evals.front().heldout_chosen_logp;
}

double chosen_likelihood_delta_from_log(const std::filesystem::path& metrics_path) {
    std::vector<EvalEvent> evals;
    load_metrics_jsonl(metrics_path, nullptr, &evals);
    return chosen_likelihood_delta(evals);
}

double hallucination_proxy(
    std::span<const PreferenceRecord> records,
    const std::function<std::vector<int64_t>(const PreferenceRecord&)>& answer) {
    if (records.empty()) throw ConfigError("hallucination_proxy: empty record set");
    double hallucinated = 0.0;
    for (const PreferenceRecord& rec : records) {
        const std::vector<int64_t> decoded = answer(rec);
        const int64_t content = decoded.empty() ? -1 : decoded[0];
        hallucinated += asserts_absent_content(rec.scene, rec.question_tokens, content) ? 1.0 : 0.0;
    }
    return hallucinated / static_cast<double>(records.size());
}

double hallucination_proxy(const MultimodalLM& policy,
                           std::span<const PreferenceRecord> records) {
    if (records.empty()) throw ConfigError("hallucination_proxy: empty record set");
    std::vector<uint8_t> flags(records.size());
    parallel_for(static_cast<int64_t>(records.size()), [&](int64_t i) {
        const PreferenceRecord& rec = records[static_cast<size_t>(i)];
        const std::vector<int64_t> decoded =
            policy.greedy_decode(rec.image().pixels, rec.question_tokens, kResponseLen);
        const int64_t content = decoded.empty() ? -1 : decoded[0];
        flags[static_cast<size_t>(i)] =
            asserts_absent_content(rec.scene, rec.question_tokens, content) ? 1 : 0;
    });
    double total = 0.0;
    for (uint8_t f : flags) total += f;
    return total / static_cast<double>(records.size());
}

std::string EvalReport::to_json() const {
    nlohmann::json j{
        {"accuracy_true_image", accuracy_true_image},
        {"accuracy_blank_image", accuracy_blank_image},
        {"accuracy_mismatched_image", accuracy_mismatched_image},
        {"image_sensitivity_gap", image_sensitivity_gap},
        {"mean_chosen_logp", mean_chosen_logp},
        {"hallucination_rate", hallucination_rate},
        {"accuracy_by_kind", accuracy_by_kind},
        {"hallucination_by_kind", hallucination_by_kind},
    };
    return j.dump();
}

EvalReport EvalReport::from_json(const std::string& text) {
    nlohmann::json j = parse_json(text, "eval report");
    require_known_keys(j,
                       {"accuracy_true_image", "accuracy_blank_image",
                        "accuracy_mismatched_image", "image_sensitivity_gap", "mean_chosen_logp",
                        "hallucination_rate", "accuracy_by_kind", "hallucination_by_kind"},
                       "eval report");
    EvalReport r;
    r.accuracy_true_image = j.at("accuracy_true_image").get<double>();
    r.accuracy_blank_image = j.at("accuracy_blank_image").get<double>();
    r.accuracy_mismatched_image = j.at("accuracy_mismatched_image").get<double>();
    r.image_sensitivity_gap = j.at("image_sensitivity_gap").get<double>();
    r.mean_chosen_logp = j.at("mean_chosen_logp").get<double>();
    r.hallucination_rate = j.at("hallucination_rate").get<double>();
    r.accuracy_by_kind = j.at("accuracy_by_kind").get<std::map<std::string, double>>();
    r.hallucination_by_kind = j.at("hallucination_by_kind").get<std::map<std::string, double>>();
    return r;
}

EvalReport evaluate(const MultimodalLM& policy, const MultimodalLM& reference,
                    std::span<const PreferenceRecord> records, uint64_t seed,
                    const std::filesystem::path& verdicts_path) {
    if (records.empty()) throw ConfigError("evaluate: empty record set");
    if (!(policy.config() == reference.config())) {
        throw ConfigError("evaluate: policy and reference configs differ");
    }
    const int64_t n = static_cast<int64_t>(records.size());
    const std::vector<int64_t> perm = derangement(n, SeededRng(seed, kDerangementStream));

    std::vector<RecordVerdict> verdicts(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i) {
        const PreferenceRecord& rec = records[static_cast<size_t>(i)];
        RecordVerdict& v = verdicts[static_cast<size_t>(i)];
        const std::vector<double> true_image = rec.image().pixels;
        score_pair(policy, reference, rec, true_image, &v.lr_w_true, &v.lr_l_true,
                   &v.chosen_logp);
        const std::vector<double> blank(true_image.size(), 0.0);
        score_pair(policy, reference, rec, blank, &v.lr_w_blank, &v.lr_l_blank, nullptr);
        const std::vector<double> mismatched =
            records[static_cast<size_t>(perm[static_cast<size_t>(i)])].image().pixels;
        score_pair(policy, reference, rec, mismatched, &v.lr_w_mismatched, &v.lr_l_mismatched,
                   nullptr);
        v.decoded = policy.greedy_decode(true_image, rec.question_tokens, kResponseLen);
        const int64_t content = v.decoded.empty() ? -1 : v.decoded[0];
        v.hallucinated = asserts_absent_content(rec.scene, rec.question_tokens, content);
    });

    EvalReport report;
    std::map<std::string, double> kind_totals, kind_acc, kind_halluc;
    for (int64_t i = 0; i < n; ++i) {
        const PreferenceRecord& rec = records[static_cast<size_t>(i)];
        const RecordVerdict& v = verdicts[static_cast<size_t>(i)];
        const std::string kind = question_kind_name(rec.kind());
        const double acc_true = pairwise_score(v.lr_w_true, v.lr_l_true);
        report.accuracy_true_image += acc_true;
        report.accuracy_blank_image += pairwise_score(v.lr_w_blank, v.lr_l_blank);
        report.accuracy_mismatched_image += pairwise_score(v.lr_w_mismatched, v.lr_l_mismatched);
        report.mean_chosen_logp += v.chosen_logp;
        report.hallucination_rate += v.hallucinated ? 1.0 : 0.0;
        kind_totals[kind] += 1.0;
        kind_acc[kind] += acc_true;
        kind_halluc[kind] += v.hallucinated ? 1.0 : 0.0;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    report.accuracy_true_image *= inv_n;
    report.accuracy_blank_image *= inv_n;
    report.accuracy_mismatched_image *= inv_n;
    report.mean_chosen_logp *= inv_n;
    report.hallucination_rate *= inv_n;
    report.image_sensitivity_gap =
        report.accuracy_true_image - report.accuracy_mismatched_image;
    for (const auto& [kind, total] : kind_totals) {
        report.accuracy_by_kind[kind] = kind_acc[kind] / total;
        report.hallucination_by_kind[kind] = kind_halluc[kind] / total;
    }

    if (!verdicts_path.empty()) {
        std::ofstream os(verdicts_path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open verdicts file: " + verdicts_path.string());
        for (int64_t i = 0; i < n; ++i) {
            const PreferenceRecord& rec = records[static_cast<size_t>(i)];
            const RecordVerdict& v = verdicts[static_cast<size_t>(i)];
            nlohmann::json row{
                {"index", rec.index},
                {"kind", question_kind_name(rec.kind())},
                {"confounded", rec.confounded},
                {"lr_w_true", v.lr_w_true},
                {"lr_l_true", v.lr_l_true},
                {"lr_w_blank", v.lr_w_blank},
                {"lr_l_blank", v.lr_l_blank},
                {"lr_w_mismatched", v.lr_w_mismatched},
                {"lr_l_mismatched", v.lr_l_mismatched},
                {"chosen_logp", v.chosen_logp},
                {"decoded", v.decoded},
                {"hallucinated", v.hallucinated},
            };
            os << row.dump() << "\n";
        }
    }
    return report;
}

}  // namespace mdpo
