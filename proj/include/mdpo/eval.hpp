// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mdpo/data.hpp"
#include "mdpo/model.hpp"
#include "mdpo/train.hpp"

namespace mdpo {

/// Image substitution applied when scoring a record's preference pair.
enum class ProbeMode { kTrueImage, kBlankImage, kMismatchedImage };

std::string probe_mode_name(ProbeMode mode);

/// Seed-deterministic derangement (single cycle, so no index maps to itself).
std::vector<int64_t> derangement(int64_t n, SeededRng rng);

/// Fraction of records whose implicit reward ranks the chosen response above
/// the rejected one under the mode's image substitution; ties count 0.5.
/// beta cancels in the comparison, so log-ratios are compared directly.
double preference_accuracy(const MultimodalLM& policy, const MultimodalLM& reference,
                           std::span<const PreferenceRecord> records, ProbeMode mode,
                           uint64_t seed = 0);

/// (final - initial) held-out mean chosen log-probability across a training
/// run's evaluation points.
double chosen_likelihood_delta(std::span<const EvalEvent> evals);
double chosen_likelihood_delta_from_log(const std::filesystem::path& metrics_path);

/// Greedy-decodes an answer per record and scores it against scene ground
/// truth; an answer asserting absent objects/attributes (or an undecodable
/// one) counts as hallucinated.
double hallucination_proxy(const MultimodalLM& policy, std::span<const PreferenceRecord> records);

/// Fixture-friendly variant: `answer` maps a record to decoded tokens.
double hallucination_proxy(
    std::span<const PreferenceRecord> records,
    const std::function<std::vector<int64_t>(const PreferenceRecord&)>& answer);

struct EvalReport {
    double accuracy_true_image = 0.0;
    double accuracy_blank_image = 0.0;
    double accuracy_mismatched_image = 0.0;
    double image_sensitivity_gap = 0.0;  // true-image minus mismatched-image accuracy
    double mean_chosen_logp = 0.0;
    double hallucination_rate = 0.0;
    std::map<std::string, double> accuracy_by_kind;       // true-image accuracy per question kind
    std::map<std::string, double> hallucination_by_kind;  // proxy rate per question kind

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
};

/// Runs all probes over the record set. When verdicts_path is non-empty, one
/// JSONL row per record is written for inspection.
EvalReport evaluate(const MultimodalLM& policy, const MultimodalLM& reference,
                    std::span<const PreferenceRecord> records, uint64_t seed = 0,
                    const std::filesystem::path& verdicts_path = {});

}  // namespace mdpo
