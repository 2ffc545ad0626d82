// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mdpo/tape.hpp"
#include "mdpo/tensor.hpp"

namespace mdpo {

struct ModelConfig {
    int64_t vocab_size = 32;
    int64_t d_model = 64;
    int64_t n_layers = 2;
    int64_t n_heads = 4;
    int64_t image_grid = 8;      // image is grid x grid cells
    int64_t image_channels = 3;  // channels per cell
    int64_t max_question_len = 8;
    int64_t max_response_len = 6;
    int64_t max_seq_len = 0;  // 0: derived as patch_count + question + response
    uint64_t seed = 0;

    int64_t patch_count() const { return image_grid * image_grid; }
    int64_t seq_capacity() const {
        return max_seq_len > 0 ? max_seq_len
                               : patch_count() + max_question_len + max_response_len;
    }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct Parameter {
    std::string name;
    Tensor value;
};

/// One batch of (image, question, response) rows. Images are grid x grid x
/// channels floats in [0, 1]; the response mask marks scored positions.
struct SequenceBatch {
    int64_t batch = 0;
    int64_t grid = 0;
    int64_t channels = 0;
    int64_t question_len = 0;
    int64_t response_len = 0;
    std::vector<double> images;          // batch * grid * grid * channels
    std::vector<int64_t> questions;      // batch * question_len
    std::vector<int64_t> responses;      // batch * response_len
    std::vector<uint8_t> response_mask;  // batch * response_len, 1 = scored

    void validate(const ModelConfig& cfg) const;
    std::span<const double> image_row(int64_t b) const;
    std::span<const int64_t> question_row(int64_t b) const;
    std::span<const int64_t> response_row(int64_t b) const;
    std::span<const uint8_t> mask_row(int64_t b) const;
};

class MultimodalLM;

/// Per-tape binding of the model's parameters. All forward calls that share a
/// binding share parameter nodes, so gradients accumulate across them.
struct BoundModel {
    const MultimodalLM* model = nullptr;
    Tape* tape = nullptr;
    std::vector<Value> params;
};

/// Layer-wise key/value projections of an (image, question) prefix, reusable
/// across several responses conditioned on the same prefix.
struct PrefixCache {
    int64_t prefix_len = 0;
    std::vector<Value> keys;    // per layer, [prefix_len, d_model]
    std::vector<Value> values;  // per layer, [prefix_len, d_model]
    Value top_last;             // [1, d_model] top hidden state of the last prefix position
};

/// Image-conditioned causal token model. Image cells enter as soft prefix
/// tokens (one per cell, mutually visible); question and response tokens
/// follow under a causal mask, so response logits at position t depend only
/// on the image, the question and response tokens before t.
class MultimodalLM {
public:
    MultimodalLM() = default;
    explicit MultimodalLM(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<Parameter>& parameters() { return params_; }
    Tensor* find_parameter(const std::string& name);
    int64_t scalar_parameter_count() const;

    BoundModel bind(Tape& tape, bool requires_grad = true) const;

    PrefixCache prefix_forward(const BoundModel& bound, std::span<const double> image,
                               std::span<const int64_t> question) const;

    /// Logits for each response position: row t predicts response token t.
    Value response_logits(const BoundModel& bound, const PrefixCache& prefix,
                          std::span<const int64_t> response) const;

    /// Sum over scored positions of log p(y_t | image, question, y_<t).
    Value sequence_log_prob(const BoundModel& bound, const PrefixCache& prefix,
                            std::span<const int64_t> response,
                            std::span<const uint8_t> mask) const;

    /// Value-only convenience over a private tape (no gradients).
    double sequence_log_prob_value(std::span<const double> image,
                                   std::span<const int64_t> question,
                                   std::span<const int64_t> response,
                                   std::span<const uint8_t> mask) const;

    /// Batched value-only forward: [batch, response_len, vocab] logits.
    Tensor forward_logits(const SequenceBatch& batch) const;

    /// Greedy decode of up to max_len response tokens (ties -> lowest id).
    std::vector<int64_t> greedy_decode(std::span<const double> image,
                                       std::span<const int64_t> question, int64_t max_len) const;

    void save_checkpoint(const std::filesystem::path& path) const;
    static MultimodalLM load_checkpoint(const std::filesystem::path& path);

private:
    ModelConfig cfg_;
    std::vector<Parameter> params_;
};

/// Deep copy used as the frozen denominator of the implicit reward; the
/// trainer never updates it.
MultimodalLM snapshot_reference(const MultimodalLM& model);

}  // namespace mdpo
