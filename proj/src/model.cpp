// SPDX-License-Identifier: Apache-2.0
#include "mdpo/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mdpo/errors.hpp"
#include "mdpo/json_util.hpp"
#include "mdpo/rng.hpp"

namespace mdpo {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kMaskedScore = -1e30;
constexpr int kParamsPerLayer = 16;

// Parameter vector layout: 4 shared tensors, then 16 per layer, then the
// final norm and the output head.
enum SharedParam { kPatchW = 0, kPatchB, kTokEmb, kPosEmb };
enum LayerParam {
    kLn1G = 0,
    kLn1B,
    kWq,
    kBq,
    kWk,
    kBk,
    kWv,
    kBv,
    kWo,
    kBo,
    kLn2G,
    kLn2B,
    kMlpW1,
    kMlpB1,
    kMlpW2,
    kMlpB2,
};

int64_t layer_param_index(int64_t layer, LayerParam p) {
    return 4 + layer * kParamsPerLayer + static_cast<int64_t>(p);
}

Value concat_cols_any(Tape& tape, std::vector<Value> parts) {
    while (parts.size() > 1) {
        std::vector<Value> next;
        for (size_t i = 0; i < parts.size(); i += 4) {
            const size_t n = std::min<size_t>(4, parts.size() - i);
            next.push_back(tape.concat_cols(std::span<const Value>(parts.data() + i, n)));
        }
        parts = std::move(next);
    }
    return parts[0];
}

std::vector<int64_t> iota_ids(int64_t begin, int64_t count) {
    std::vector<int64_t> ids(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) ids[static_cast<size_t>(i)] = begin + i;
    return ids;
}

void write_u64_le(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (d_model < 1 || n_layers < 1 || n_heads < 1) {
        throw ConfigError("model: d_model, n_layers and n_heads must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (image_grid < 1 || image_channels < 1) {
        throw ConfigError("model: image_grid and image_channels must be positive");
    }
    if (max_question_len < 1 || max_response_len < 1) {
        throw ConfigError("model: max_question_len and max_response_len must be positive");
    }
    if (seq_capacity() < patch_count() + max_question_len + max_response_len) {
        throw ConfigError(
            "model: max_seq_len too small for image patches plus question plus response");
    }
}

std::string ModelConfig::to_json() const {
    nlohmann::json j{
        {"vocab_size", vocab_size},
        {"d_model", d_model},
        {"n_layers", n_layers},
        {"n_heads", n_heads},
        {"image_grid", image_grid},
        {"image_channels", image_channels},
        {"max_question_len", max_question_len},
        {"max_response_len", max_response_len},
        {"max_seq_len", max_seq_len},
        {"seed", seed},
    };
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j = parse_json(text, "model config");
    ModelConfig cfg;
    require_known_keys(j,
                       {"vocab_size", "d_model", "n_layers", "n_heads", "image_grid",
                        "image_channels", "max_question_len", "max_response_len", "max_seq_len",
                        "seed"},
                       "model config");
    cfg.vocab_size = json_get_or<int64_t>(j, "vocab_size", cfg.vocab_size);
    cfg.d_model = json_get_or<int64_t>(j, "d_model", cfg.d_model);
    cfg.n_layers = json_get_or<int64_t>(j, "n_layers", cfg.n_layers);
    cfg.n_heads = json_get_or<int64_t>(j, "n_heads", cfg.n_heads);
    cfg.image_grid = json_get_or<int64_t>(j, "image_grid", cfg.image_grid);
    cfg.image_channels = json_get_or<int64_t>(j, "image_channels", cfg.image_channels);
    cfg.max_question_len = json_get_or<int64_t>(j, "max_question_len", cfg.max_question_len);
    cfg.max_response_len = json_get_or<int64_t>(j, "max_response_len", cfg.max_response_len);
    cfg.max_seq_len = json_get_or<int64_t>(j, "max_seq_len", cfg.max_seq_len);
    cfg.seed = json_get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.validate();
    return cfg;
}

void SequenceBatch::validate(const ModelConfig& cfg) const {
    if (batch < 1) throw ConfigError("batch: empty");
    if (grid != cfg.image_grid || channels != cfg.image_channels) {
        throw ConfigError("batch: image plane " + std::to_string(grid) + "x" +
                          std::to_string(grid) + "x" + std::to_string(channels) +
                          " does not match model config");
    }
    if (static_cast<int64_t>(images.size()) != batch * grid * grid * channels ||
        static_cast<int64_t>(questions.size()) != batch * question_len ||
        static_cast<int64_t>(responses.size()) != batch * response_len ||
        static_cast<int64_t>(response_mask.size()) != batch * response_len) {
        throw ShapeError("batch: field sizes inconsistent with declared dimensions");
    }
    if (cfg.patch_count() + question_len + response_len > cfg.seq_capacity()) {
        throw ConfigError("batch: sequence exceeds max_seq_len (" +
                          std::to_string(cfg.patch_count() + question_len + response_len) + " > " +
                          std::to_string(cfg.seq_capacity()) + ")");
    }
    for (int64_t t : questions) {
        if (t < 0 || t >= cfg.vocab_size) throw DomainError("batch: question token out of vocab");
    }
    for (int64_t t : responses) {
        if (t < 0 || t >= cfg.vocab_size) throw DomainError("batch: response token out of vocab");
    }
    for (int64_t b = 0; b < batch; ++b) {
        bool any = false;
        for (int64_t t = 0; t < response_len; ++t) any = any || response_mask[b * response_len + t];
        if (!any) throw DomainError("batch: row " + std::to_string(b) + " has no scored position");
    }
}

std::span<const double> SequenceBatch::image_row(int64_t b) const {
    const int64_t n = grid * grid * channels;
    return {images.data() + b * n, static_cast<size_t>(n)};
}
std::span<const int64_t> SequenceBatch::question_row(int64_t b) const {
    return {questions.data() + b * question_len, static_cast<size_t>(question_len)};
}
std::span<const int64_t> SequenceBatch::response_row(int64_t b) const {
    return {responses.data() + b * response_len, static_cast<size_t>(response_len)};
}
std::span<const uint8_t> SequenceBatch::mask_row(int64_t b) const {
    return {response_mask.data() + b * response_len, static_cast<size_t>(response_len)};
}

MultimodalLM::MultimodalLM(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int64_t d = cfg_.d_model;
    const int64_t v = cfg_.vocab_size;
    const int64_t hidden = 4 * d;

    auto add_param = [&](std::string name, std::vector<int64_t> shape) {
        params_.push_back({std::move(name), Tensor(std::move(shape))});
    };

    add_param("patch_proj_w", {cfg_.image_channels, d});
    add_param("patch_proj_b", {d});
    add_param("tok_emb", {v, d});
    add_param("pos_emb", {cfg_.seq_capacity(), d});
    for (int64_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        add_param(prefix + "ln1_g", {d});
        add_param(prefix + "ln1_b", {d});
        add_param(prefix + "attn_wq", {d, d});
        add_param(prefix + "attn_bq", {d});
        add_param(prefix + "attn_wk", {d, d});
        add_param(prefix + "attn_bk", {d});
        add_param(prefix + "attn_wv", {d, d});
        add_param(prefix + "attn_bv", {d});
        add_param(prefix + "attn_wo", {d, d});
        add_param(prefix + "attn_bo", {d});
        add_param(prefix + "ln2_g", {d});
        add_param(prefix + "ln2_b", {d});
        add_param(prefix + "mlp_w1", {d, hidden});
        add_param(prefix + "mlp_b1", {hidden});
        add_param(prefix + "mlp_w2", {hidden, d});
        add_param(prefix + "mlp_b2", {d});
    }
    add_param("ln_f_g", {d});
    add_param("ln_f_b", {d});
    add_param("head_w", {d, v});
    add_param("head_b", {v});

    // Scaled-normal weights, zero biases, unit layer-norm gains; the output
    // head starts at zero so the initial next-token distribution is uniform.
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = params_[i];
        const bool is_gain = p.name.ends_with("ln1_g") || p.name.ends_with("ln2_g") ||
                             p.name.ends_with("ln_f_g");
        const bool is_weight = p.value.rank() == 2;
        if (is_gain) {
            for (int64_t k = 0; k < p.value.numel(); ++k) p.value[k] = 1.0;
        } else if (is_weight && p.name != "head_w") {
            SeededRng rng(cfg_.seed, 0x9E1D0000u + static_cast<uint64_t>(i));
            for (int64_t k = 0; k < p.value.numel(); ++k) p.value[k] = rng.normal(0.0, kInitStd);
        }
        // biases and the output head stay zero
    }
}

Tensor* MultimodalLM::find_parameter(const std::string& name) {
    for (Parameter& p : params_) {
        if (p.name == name) return &p.value;
    }
    return nullptr;
}

int64_t MultimodalLM::scalar_parameter_count() const {
    int64_t n = 0;
    for (const Parameter& p : params_) n += p.value.numel();
    return n;
}

BoundModel MultimodalLM::bind(Tape& tape, bool requires_grad) const {
    BoundModel bound;
    bound.model = this;
    bound.tape = &tape;
    bound.params.reserve(params_.size());
    for (const Parameter& p : params_) bound.params.push_back(tape.leaf(p.value, requires_grad));
    return bound;
}

namespace {

// Pre-norm block stack shared by the prefix and response passes. When
// `prefix` is set, attention keys/values are the prefix projections followed
// by this pass's own; when `cache_out` is set, the pass's key/value
// projections are recorded for later reuse.
Value run_blocks(const BoundModel& bound, Value h, Value attn_mask, const PrefixCache* prefix,
                 PrefixCache* cache_out) {
    Tape& tape = *bound.tape;
    const ModelConfig& cfg = bound.model->config();
    const int64_t d = cfg.d_model;
    const int64_t head_dim = d / cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        auto lp = [&](LayerParam p) { return bound.params[layer_param_index(l, p)]; };

        Value normed = tape.layer_norm(h, lp(kLn1G), lp(kLn1B));
        Value q = tape.add_rowwise(tape.matmul(normed, lp(kWq)), lp(kBq));
        Value k = tape.add_rowwise(tape.matmul(normed, lp(kWk)), lp(kBk));
        Value v = tape.add_rowwise(tape.matmul(normed, lp(kWv)), lp(kBv));
        if (cache_out) {
            cache_out->keys.push_back(k);
            cache_out->values.push_back(v);
        }
        Value k_all = k, v_all = v;
        if (prefix) {
            const Value kparts[] = {prefix->keys[static_cast<size_t>(l)], k};
            const Value vparts[] = {prefix->values[static_cast<size_t>(l)], v};
            k_all = tape.concat_rows(kparts);
            v_all = tape.concat_rows(vparts);
        }

        std::vector<Value> head_ctx;
        head_ctx.reserve(static_cast<size_t>(cfg.n_heads));
        for (int64_t hd = 0; hd < cfg.n_heads; ++hd) {
            const int64_t c0 = hd * head_dim, c1 = (hd + 1) * head_dim;
            Value qh = tape.slice_cols(q, c0, c1);
            Value kh = tape.slice_cols(k_all, c0, c1);
            Value vh = tape.slice_cols(v_all, c0, c1);
            Value scores = tape.affine(tape.matmul(qh, kh, false, true), scale, 0.0);
            scores = tape.add(scores, attn_mask);
            head_ctx.push_back(tape.matmul(tape.softmax_last(scores), vh));
        }
        Value ctx = concat_cols_any(tape, std::move(head_ctx));
        h = tape.add(h, tape.add_rowwise(tape.matmul(ctx, lp(kWo)), lp(kBo)));

        Value m = tape.layer_norm(h, lp(kLn2G), lp(kLn2B));
        Value inner = tape.gelu(tape.add_rowwise(tape.matmul(m, lp(kMlpW1)), lp(kMlpB1)));
        Value mlp = tape.add_rowwise(tape.matmul(inner, lp(kMlpW2)), lp(kMlpB2));
        h = tape.add(h, mlp);
    }
    return h;
}

}  // namespace

PrefixCache MultimodalLM::prefix_forward(const BoundModel& bound, std::span<const double> image,
                                         std::span<const int64_t> question) const {
    Tape& tape = *bound.tape;
    const int64_t patches = cfg_.patch_count();
    const int64_t q_len = static_cast<int64_t>(question.size());
    if (static_cast<int64_t>(image.size()) != patches * cfg_.image_channels) {
        throw ShapeError("prefix_forward: image has " + std::to_string(image.size()) +
                         " values, expected " + std::to_string(patches * cfg_.image_channels));
    }
    if (q_len < 1) throw DomainError("prefix_forward: question must be non-empty");
    const int64_t prefix_len = patches + q_len;
    if (prefix_len + 1 > cfg_.seq_capacity()) {
        throw ConfigError("prefix_forward: sequence exceeds max_seq_len");
    }

    Value pixels = tape.constant(
        Tensor({patches, cfg_.image_channels}, std::vector<double>(image.begin(), image.end())));
    Value patch_tokens =
        tape.add_rowwise(tape.matmul(pixels, bound.params[kPatchW]), bound.params[kPatchB]);
    Value q_tokens = tape.embedding(bound.params[kTokEmb], question);
    const Value parts[] = {patch_tokens, q_tokens};
    Value x = tape.concat_rows(parts);
    Value pos = tape.embedding(bound.params[kPosEmb], iota_ids(0, prefix_len));
    Value h = tape.add(x, pos);

    // Image patches are mutually visible; question tokens are causal over the
    // question and see every patch.
    Tensor mask({prefix_len, prefix_len});
    for (int64_t i = 0; i < prefix_len; ++i) {
        for (int64_t j = 0; j < prefix_len; ++j) {
            const bool visible = (i < patches) ? (j < patches) : (j < patches || j <= i);
            mask[i * prefix_len + j] = visible ? 0.0 : kMaskedScore;
        }
    }

    PrefixCache cache;
    cache.prefix_len = prefix_len;
    Value top = run_blocks(bound, h, tape.constant(std::move(mask)), nullptr, &cache);
    cache.top_last = tape.slice_rows(top, prefix_len - 1, prefix_len);
    return cache;
}

Value MultimodalLM::response_logits(const BoundModel& bound, const PrefixCache& prefix,
                                    std::span<const int64_t> response) const {
    Tape& tape = *bound.tape;
    const int64_t r_len = static_cast<int64_t>(response.size());
    if (r_len < 1) throw DomainError("response_logits: empty response");
    if (prefix.prefix_len + r_len > cfg_.seq_capacity()) {
        throw ConfigError("response_logits: sequence exceeds max_seq_len (" +
                          std::to_string(prefix.prefix_len + r_len) + " > " +
                          std::to_string(cfg_.seq_capacity()) + ")");
    }

    Value emb = tape.embedding(bound.params[kTokEmb], response);
    Value pos = tape.embedding(bound.params[kPosEmb], iota_ids(prefix.prefix_len, r_len));
    Value h = tape.add(emb, pos);

    const int64_t k_len = prefix.prefix_len + r_len;
    Tensor mask({r_len, k_len});
    for (int64_t i = 0; i < r_len; ++i) {
        for (int64_t j = 0; j < k_len; ++j) {
            const bool visible = j < prefix.prefix_len || (j - prefix.prefix_len) <= i;
            mask[i * k_len + j] = visible ? 0.0 : kMaskedScore;
        }
    }
    h = run_blocks(bound, h, tape.constant(std::move(mask)), &prefix, nullptr);

    // Row t of the logits is predicted from the hidden state one position
    // earlier: the last prefix position for t == 0, response position t-1
    // otherwise.
    Value pred = prefix.top_last;
    if (r_len > 1) {
        const Value parts[] = {prefix.top_last, tape.slice_rows(h, 0, r_len - 1)};
        pred = tape.concat_rows(parts);
    }
    const size_t n_params = bound.params.size();
    Value final_norm =
        tape.layer_norm(pred, bound.params[n_params - 4], bound.params[n_params - 3]);
    return tape.add_rowwise(tape.matmul(final_norm, bound.params[n_params - 2]),
                            bound.params[n_params - 1]);
}

Value MultimodalLM::sequence_log_prob(const BoundModel& bound, const PrefixCache& prefix,
                                      std::span<const int64_t> response,
                                      std::span<const uint8_t> mask) const {
    Tape& tape = *bound.tape;
    if (response.empty()) throw DomainError("sequence_log_prob: empty response");
    if (mask.size() != response.size()) {
        throw ShapeError("sequence_log_prob: mask size " + std::to_string(mask.size()) +
                         " vs response size " + std::to_string(response.size()));
    }
    bool any = false;
    Tensor mask_t({static_cast<int64_t>(mask.size())});
    for (size_t i = 0; i < mask.size(); ++i) {
        mask_t[static_cast<int64_t>(i)] = mask[i] ? 1.0 : 0.0;
        any = any || mask[i];
    }
    if (!any) throw DomainError("sequence_log_prob: no scored position");

    Value logits = response_logits(bound, prefix, response);
    Value token_logp = tape.gather_last(tape.log_softmax_last(logits), response);
    return tape.sum(tape.mul(token_logp, tape.constant(std::move(mask_t))));
}

double MultimodalLM::sequence_log_prob_value(std::span<const double> image,
                                             std::span<const int64_t> question,
                                             std::span<const int64_t> response,
                                             std::span<const uint8_t> mask) const {
    Tape tape;
    BoundModel bound = bind(tape, /*requires_grad=*/false);
    PrefixCache prefix = prefix_forward(bound, image, question);
    return sequence_log_prob(bound, prefix, response, mask).item();
}

Tensor MultimodalLM::forward_logits(const SequenceBatch& batch) const {
    batch.validate(cfg_);
    Tensor out({batch.batch, batch.response_len, cfg_.vocab_size});
    for (int64_t b = 0; b < batch.batch; ++b) {
        Tape tape;
        BoundModel bound = bind(tape, /*requires_grad=*/false);
        PrefixCache prefix = prefix_forward(bound, batch.image_row(b), batch.question_row(b));
        const Tensor& logits = response_logits(bound, prefix, batch.response_row(b)).tensor();
        std::memcpy(out.data() + b * logits.numel(), logits.data(),
                    sizeof(double) * logits.numel());
    }
    return out;
}

std::vector<int64_t> MultimodalLM::greedy_decode(std::span<const double> image,
                                                 std::span<const int64_t> question,
                                                 int64_t max_len) const {
    Tape tape;
    BoundModel bound = bind(tape, /*requires_grad=*/false);
    PrefixCache prefix = prefix_forward(bound, image, question);
    std::vector<int64_t> tokens;
    for (int64_t t = 0; t < max_len; ++t) {
        std::vector<int64_t> probe = tokens;
        probe.push_back(0);  // placeholder; row t only attends to tokens < t
        const Tensor& logits = response_logits(bound, prefix, probe).tensor();
        const int64_t v = cfg_.vocab_size;
        const double* row = logits.data() + t * v;
        int64_t best = 0;
        for (int64_t i = 1; i < v; ++i) {
            if (row[i] > row[best]) best = i;
        }
        tokens.push_back(best);
    }
    return tokens;
}

void MultimodalLM::save_checkpoint(const std::filesystem::path& path) const {
    nlohmann::json manifest = nlohmann::json::array();
    int64_t offset = 0;
    for (const Parameter& p : params_) {
        manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
        offset += p.value.numel();
    }
    nlohmann::json header{{"format_version", 1},
                          {"config", nlohmann::json::parse(cfg_.to_json())},
                          {"manifest", manifest}};

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    os << header.dump() << "\n";
    for (const Parameter& p : params_) {
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            uint64_t bits;
            const double v = p.value[i];
            std::memcpy(&bits, &v, 8);
            write_u64_le(os, bits);
        }
    }
    if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

MultimodalLM MultimodalLM::load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    std::string header_line;
    if (!std::getline(is, header_line)) {
        throw IoError("checkpoint missing header: " + path.string());
    }
    nlohmann::json header = parse_json(header_line, "checkpoint header");
    require_known_keys(header, {"format_version", "config", "manifest"}, "checkpoint header");
    if (json_get_or<int64_t>(header, "format_version", -1) != 1) {
        throw IoError("unsupported checkpoint format version in " + path.string());
    }

    MultimodalLM model(ModelConfig::from_json(header.at("config").dump()));
    const nlohmann::json& manifest = header.at("manifest");
    if (!manifest.is_array() || manifest.size() != model.params_.size()) {
        throw IoError("checkpoint manifest does not match model configuration");
    }
    int64_t expected_offset = 0;
    for (size_t i = 0; i < model.params_.size(); ++i) {
        const nlohmann::json& entry = manifest[i];
        const Parameter& p = model.params_[i];
        if (entry.at("name").get<std::string>() != p.name ||
            entry.at("shape").get<std::vector<int64_t>>() != p.value.shape() ||
            entry.at("offset").get<int64_t>() != expected_offset) {
            throw IoError("checkpoint manifest entry " + std::to_string(i) +
                          " does not match the configured parameter " + p.name);
        }
        expected_offset += p.value.numel();
    }
    for (Parameter& p : model.params_) {
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            const uint64_t bits = read_u64_le(is);
            double v;
            std::memcpy(&v, &bits, 8);
            p.value[i] = v;
        }
    }
    if (!is) throw IoError("checkpoint truncated: " + path.string());
    return model;
}

MultimodalLM snapshot_reference(const MultimodalLM& model) { return model; }

}  // namespace mdpo
