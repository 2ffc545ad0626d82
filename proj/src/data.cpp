// SPDX-License-Identifier: Apache-2.0
#include "mdpo/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "mdpo/errors.hpp"
#include "mdpo/json_util.hpp"

namespace mdpo {

namespace {

// Stream ids for the master-seed draws; record bodies use stream == index.
constexpr uint64_t kKindShuffleStream = 0xDA7A0001ull << 32;
constexpr uint64_t kConfoundShuffleStream = 0xDA7A0002ull << 32;

template <class T>
void seeded_shuffle(std::vector<T>& v, SeededRng rng) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

int64_t cell_index(const SceneObject& o, int64_t grid) { return o.row * grid + o.col; }

}  // namespace

std::string question_kind_name(QuestionKind k) {
    switch (k) {
        case QuestionKind::kPresence:
            return "presence";
        case QuestionKind::kCount:
            return "count";
        case QuestionKind::kColor:
            return "color";
    }
    throw ConfigError("unknown question kind");
}

bool SyntheticScene::has_type(int64_t type) const { return count_type(type) > 0; }

int64_t SyntheticScene::count_type(int64_t type) const {
    int64_t n = 0;
    for (const SceneObject& o : objects) n += (o.type == type) ? 1 : 0;
    return n;
}

int64_t SyntheticScene::unique_color_of(int64_t type) const {
    int64_t color = -1;
    for (const SceneObject& o : objects) {
        if (o.type != type) continue;
        if (color != -1) return -1;  // ambiguous
        color = o.color;
    }
    return color;
}

void SyntheticScene::validate() const {
    if (grid < 1) throw ConfigError("scene: grid must be positive");
    if (objects.empty() || total_objects() > kMaxObjects) {
        throw ConfigError("scene: expected 1.." + std::to_string(kMaxObjects) + " objects, got " +
                          std::to_string(objects.size()));
    }
    std::set<int64_t> cells;
    for (const SceneObject& o : objects) {
        if (o.type < 1 || o.type > kNumObjectTypes || o.color < 1 || o.color > kNumColors) {
            throw ConfigError("scene: object type/color out of range");
        }
        if (o.row < 0 || o.row >= grid || o.col < 0 || o.col >= grid) {
            throw ConfigError("scene: object position outside the grid");
        }
        if (!cells.insert(cell_index(o, grid)).second) {
            throw ConfigError("scene: object positions must be distinct");
        }
    }
}

Image render_scene(const SyntheticScene& scene) {
    scene.validate();
    Image img;
    img.grid = scene.grid;
    img.pixels.assign(static_cast<size_t>(scene.grid * scene.grid * 3), 0.0);
    for (const SceneObject& o : scene.objects) {
        double* px = img.pixels.data() + cell_index(o, scene.grid) * 3;
        // One channel per object type; the color modulates the intensity.
        // Injective over the scene space: empty cells are exactly (0, 0, 0).
        px[o.type - 1] = 0.6 + 0.4 * static_cast<double>(o.color) /
                                   static_cast<double>(kNumColors);
    }
    return img;
}

QuestionKind PreferenceRecord::kind() const {
    if (question_tokens.empty()) throw DomainError("record: empty question");
    switch (question_tokens[0]) {
        case tokens::kQPresence:
            return QuestionKind::kPresence;
        case tokens::kQCount:
            return QuestionKind::kCount;
        case tokens::kQColor:
            return QuestionKind::kColor;
        default:
            throw DomainError("record: unrecognized question head token " +
                              std::to_string(question_tokens[0]));
    }
}

std::string perturb_strategy_name(const PerturbStrategy& s) {
    if (const CropKeep* c = std::get_if<CropKeep>(&s)) {
        return "crop-keep(" + std::to_string(c->lo_frac) + "," + std::to_string(c->hi_frac) + ")";
    }
    if (std::holds_alternative<RandomImage>(s)) return "random-image";
    return "noise-aug";
}

std::string perturb_strategy_to_json(const PerturbStrategy& s) {
    nlohmann::json j;
    if (const CropKeep* c = std::get_if<CropKeep>(&s)) {
        j = {{"kind", "crop-keep"}, {"lo_frac", c->lo_frac}, {"hi_frac", c->hi_frac}};
    } else if (std::holds_alternative<RandomImage>(s)) {
        j = {{"kind", "random-image"}};
    } else {
        const NoiseAug& a = std::get<NoiseAug>(s);
        j = {{"kind", "noise-aug"}, {"scale_lo", a.scale_lo},   {"scale_hi", a.scale_hi},
             {"shift_lo", a.shift_lo}, {"shift_hi", a.shift_hi}, {"noise_std", a.noise_std}};
    }
    return j.dump();
}

PerturbStrategy perturb_strategy_from_json(const std::string& text) {
    nlohmann::json j = parse_json(text, "perturb strategy");
    const std::string kind = json_get_or<std::string>(j, "kind", "crop-keep");
    if (kind == "crop-keep") {
        require_known_keys(j, {"kind", "lo_frac", "hi_frac"}, "crop-keep strategy");
        CropKeep c;
        c.lo_frac = json_get_or<double>(j, "lo_frac", c.lo_frac);
        c.hi_frac = json_get_or<double>(j, "hi_frac", c.hi_frac);
        if (!(c.lo_frac >= 0.0 && c.lo_frac < c.hi_frac && c.hi_frac <= 1.0)) {
            throw ConfigError("crop-keep: need 0 <= lo_frac < hi_frac <= 1");
        }
        return c;
    }
    if (kind == "random-image") {
        require_known_keys(j, {"kind"}, "random-image strategy");
        return RandomImage{};
    }
    if (kind == "noise-aug") {
        require_known_keys(j, {"kind", "scale_lo", "scale_hi", "shift_lo", "shift_hi", "noise_std"},
                           "noise-aug strategy");
        NoiseAug a;
        a.scale_lo = json_get_or<double>(j, "scale_lo", a.scale_lo);
        a.scale_hi = json_get_or<double>(j, "scale_hi", a.scale_hi);
        a.shift_lo = json_get_or<double>(j, "shift_lo", a.shift_lo);
        a.shift_hi = json_get_or<double>(j, "shift_hi", a.shift_hi);
        a.noise_std = json_get_or<double>(j, "noise_std", a.noise_std);
        return a;
    }
    throw ConfigError("unknown perturb strategy \"" + kind +
                      "\" (expected crop-keep, random-image or noise-aug)");
}

int64_t crop_side_pixels(int64_t grid, double keep_fraction) {
    const int64_t pix = grid * kRenderScale;
    const int64_t side =
        static_cast<int64_t>(std::floor(static_cast<double>(pix) * std::sqrt(keep_fraction)));
    return std::max<int64_t>(1, side);
}

namespace {

Image crop_keep_image(const Image& image, const CropKeep& crop, SeededRng& rng) {
    if (crop.hi_frac * static_cast<double>(image.grid * image.grid) < 1.0) {
        throw DomainError("crop-keep: degenerate crop, hi_frac keeps less than one cell");
    }
    const int64_t g = image.grid;
    const int64_t pix = g * kRenderScale;
    const double keep = rng.uniform_open_low(crop.lo_frac, crop.hi_frac);
    const int64_t side = crop_side_pixels(g, keep);
    const int64_t max_offset = pix - side;
    const int64_t y0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(max_offset + 1)));
    const int64_t x0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(max_offset + 1)));

    // Crop in rendered-pixel space, then nearest-neighbour resize back to the
    // grid so tensor shapes are preserved.
    Image out;
    out.grid = g;
    out.pixels.assign(static_cast<size_t>(g * g * 3), 0.0);
    for (int64_t r = 0; r < g; ++r) {
        const int64_t src_py = y0 + std::min(side - 1, (2 * r + 1) * side / (2 * g));
        const int64_t src_row = src_py / kRenderScale;
        for (int64_t c = 0; c < g; ++c) {
            const int64_t src_px = x0 + std::min(side - 1, (2 * c + 1) * side / (2 * g));
            const int64_t src_col = src_px / kRenderScale;
            const double* src = image.pixels.data() + (src_row * g + src_col) * 3;
            double* dst = out.pixels.data() + (r * g + c) * 3;
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = src[2];
        }
    }
    return out;
}

Image noise_aug_image(const Image& image, const NoiseAug& aug, SeededRng& rng) {
    double scale[3], shift[3];
    for (int ch = 0; ch < 3; ++ch) scale[ch] = rng.uniform(aug.scale_lo, aug.scale_hi);
    for (int ch = 0; ch < 3; ++ch) shift[ch] = rng.uniform(aug.shift_lo, aug.shift_hi);
    Image out;
    out.grid = image.grid;
    out.pixels.resize(image.pixels.size());
    for (size_t i = 0; i < image.pixels.size(); ++i) {
        const int ch = static_cast<int>(i % 3);
        const double v =
            image.pixels[i] * scale[ch] + shift[ch] + rng.normal(0.0, aug.noise_std);
        out.pixels[i] = std::clamp(v, 0.0, 1.0);
    }
    return out;
}

}  // namespace

Image make_rejected_image(const Image& image, const PerturbStrategy& strategy, SeededRng& rng,
                          std::span<const PreferenceRecord> pool, int64_t self_index) {
    if (const CropKeep* crop = std::get_if<CropKeep>(&strategy)) {
        return crop_keep_image(image, *crop, rng);
    }
    if (std::holds_alternative<NoiseAug>(strategy)) {
        return noise_aug_image(image, std::get<NoiseAug>(strategy), rng);
    }
    // RandomImage: the image of a different record, drawn uniformly.
    if (pool.size() < 2) {
        throw DomainError("random-image: needs a pool of at least two records");
    }
    int64_t j;
    do {
        j = static_cast<int64_t>(rng.below(pool.size()));
    } while (j == self_index);
    return pool[static_cast<size_t>(j)].image();
}

namespace {

// Fixed probe targets keep the three question templates stable while the
// scenes carry all the variability.
constexpr int64_t kPresenceProbeType = 1;
constexpr int64_t kColorProbeType = 2;

// Samples scenes until the question is well-posed: presence questions need
// the probed type in the requested state, color questions need exactly one
// object of the probed type.
SyntheticScene sample_scene(SeededRng& rng, QuestionKind kind, bool want_present) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        SyntheticScene scene;
        scene.grid = kSceneGrid;
        const int64_t total = 1 + static_cast<int64_t>(rng.below(kMaxObjects));
        std::set<int64_t> used_cells;
        for (int64_t i = 0; i < total; ++i) {
            SceneObject o;
            o.type = 1 + static_cast<int64_t>(rng.below(kNumObjectTypes));
            o.color = 1 + static_cast<int64_t>(rng.below(kNumColors));
            int64_t cell;
            do {
                cell = static_cast<int64_t>(
                    rng.below(static_cast<uint64_t>(kSceneGrid * kSceneGrid)));
            } while (used_cells.count(cell));
            used_cells.insert(cell);
            o.row = cell / kSceneGrid;
            o.col = cell % kSceneGrid;
            scene.objects.push_back(o);
        }
        if (kind == QuestionKind::kColor && scene.count_type(kColorProbeType) != 1) continue;
        if (kind == QuestionKind::kPresence &&
            scene.has_type(kPresenceProbeType) != want_present) {
            continue;
        }
        return scene;
    }
    throw TrainingError("sample_scene: could not build a feasible scene");
}

}  // namespace

std::vector<PreferenceRecord> generate_dataset(uint64_t seed, int64_t n, double confound_rate) {
    if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
    if (!(confound_rate >= 0.0 && confound_rate <= 1.0)) {
        throw ConfigError("generate_dataset: confound_rate must be in [0, 1]");
    }

    // Question kinds balanced to within one; confounded flags hit the exact
    // rounded count. Both assignments are index-wise, so record bodies stay
    // independently generable from stream == index.
    std::vector<int> kinds(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) kinds[static_cast<size_t>(i)] = static_cast<int>(i % 3);
    seeded_shuffle(kinds, SeededRng(seed, kKindShuffleStream));

    const int64_t n_confounded = static_cast<int64_t>(std::llround(confound_rate * static_cast<double>(n)));
    std::vector<uint8_t> confounded(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) confounded[static_cast<size_t>(i)] = i < n_confounded ? 1 : 0;
    seeded_shuffle(confounded, SeededRng(seed, kConfoundShuffleStream));

    std::vector<PreferenceRecord> records(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        SeededRng rng(seed, static_cast<uint64_t>(i));
        const QuestionKind kind = static_cast<QuestionKind>(kinds[static_cast<size_t>(i)]);
        PreferenceRecord& rec = records[static_cast<size_t>(i)];
        const bool want_present = rng.below(2) == 0;  // balances presence answers exactly
        rec.scene = sample_scene(rng, kind, want_present);
        rec.confounded = confounded[static_cast<size_t>(i)] != 0;
        rec.seed = seed;
        rec.index = i;

        int64_t correct = 0, wrong = 0;
        switch (kind) {
            case QuestionKind::kPresence: {
                rec.question_tokens = {tokens::kQPresence,
                                       tokens::object_token(kPresenceProbeType)};
                correct = want_present ? tokens::kYes : tokens::kNo;
                wrong = want_present ? tokens::kNo : tokens::kYes;
                break;
            }
            case QuestionKind::kCount: {
                rec.question_tokens = {tokens::kQCount, tokens::kAll};
                const int64_t total = rec.scene.total_objects();
                correct = tokens::count_token(total);
                int64_t other;
                do {
                    other = 1 + static_cast<int64_t>(rng.below(kMaxObjects));
                } while (other == total);
                wrong = tokens::count_token(other);
                break;
            }
            case QuestionKind::kColor: {
                rec.question_tokens = {tokens::kQColor, tokens::object_token(kColorProbeType)};
                const int64_t color = rec.scene.unique_color_of(kColorProbeType);
                correct = tokens::color_token(color);
                int64_t other;
                do {
                    other = 1 + static_cast<int64_t>(rng.below(kNumColors));
                } while (other == color);
                wrong = tokens::color_token(other);
                break;
            }
        }

        rec.chosen_tokens = {correct};
        if (rec.confounded) rec.chosen_tokens.push_back(tokens::kMarker);
        rec.chosen_tokens.push_back(tokens::kEos);
        rec.rejected_tokens = {wrong, tokens::kEos};
    }
    return records;
}

int64_t correct_content_token(const SyntheticScene& scene,
                              std::span<const int64_t> question_tokens) {
    if (question_tokens.size() != static_cast<size_t>(kQuestionLen)) {
        throw DomainError("question: expected " + std::to_string(kQuestionLen) + " tokens");
    }
    const int64_t head = question_tokens[0];
    const int64_t target = question_tokens[1];
    if (head == tokens::kQPresence) {
        return scene.has_type(target - tokens::kObjBase) ? tokens::kYes : tokens::kNo;
    }
    if (head == tokens::kQCount) return tokens::count_token(scene.total_objects());
    if (head == tokens::kQColor) {
        const int64_t color = scene.unique_color_of(target - tokens::kObjBase);
        if (color < 0) throw DomainError("question: color target is absent or ambiguous");
        return tokens::color_token(color);
    }
    throw DomainError("question: unrecognized head token " + std::to_string(head));
}

bool content_token_correct(const SyntheticScene& scene, std::span<const int64_t> question_tokens,
                           int64_t content_token) {
    return content_token == correct_content_token(scene, question_tokens);
}

bool is_valid_content_token(std::span<const int64_t> question_tokens, int64_t content_token) {
    const int64_t head = question_tokens.empty() ? -1 : question_tokens[0];
    if (head == tokens::kQPresence) {
        return content_token == tokens::kYes || content_token == tokens::kNo;
    }
    if (head == tokens::kQCount) {
        return content_token >= tokens::count_token(0) &&
               content_token <= tokens::count_token(kMaxObjects);
    }
    if (head == tokens::kQColor) {
        return content_token >= tokens::color_token(1) &&
               content_token <= tokens::color_token(kNumColors);
    }
    return false;
}

bool asserts_absent_content(const SyntheticScene& scene, std::span<const int64_t> question_tokens,
                            int64_t content_token) {
    if (!is_valid_content_token(question_tokens, content_token)) return true;
    const int64_t head = question_tokens[0];
    if (head == tokens::kQPresence) {
        const bool present = scene.has_type(question_tokens[1] - tokens::kObjBase);
        return content_token == tokens::kYes && !present;
    }
    if (head == tokens::kQCount) {
        return content_token - tokens::kNumBase > scene.total_objects();
    }
    // color: any wrong color asserts an attribute the scene does not contain
    return content_token != correct_content_token(scene, question_tokens);
}

namespace {

nlohmann::json scene_to_json(const SyntheticScene& scene) {
    nlohmann::json objects = nlohmann::json::array();
    for (const SceneObject& o : scene.objects) {
        objects.push_back({{"type", o.type}, {"color", o.color}, {"row", o.row}, {"col", o.col}});
    }
    return {{"grid", scene.grid}, {"objects", objects}};
}

SyntheticScene scene_from_json(const nlohmann::json& j) {
    require_known_keys(j, {"grid", "objects"}, "scene");
    SyntheticScene scene;
    scene.grid = json_get_or<int64_t>(j, "grid", kSceneGrid);
    for (const nlohmann::json& oj : j.at("objects")) {
        require_known_keys(oj, {"type", "color", "row", "col"}, "scene object");
        SceneObject o;
        o.type = oj.at("type").get<int64_t>();
        o.color = oj.at("color").get<int64_t>();
        o.row = oj.at("row").get<int64_t>();
        o.col = oj.at("col").get<int64_t>();
        scene.objects.push_back(o);
    }
    scene.validate();
    return scene;
}

}  // namespace

void save_dataset_jsonl(const std::filesystem::path& path,
                        std::span<const PreferenceRecord> records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open dataset for writing: " + path.string());
    for (const PreferenceRecord& rec : records) {
        nlohmann::json row{
            {"scene", scene_to_json(rec.scene)},
            {"question_tokens", rec.question_tokens},
            {"chosen_tokens", rec.chosen_tokens},
            {"rejected_tokens", rec.rejected_tokens},
            {"confounded", rec.confounded},
            {"seed", rec.seed},
            {"index", rec.index},
        };
        os << row.dump() << "\n";
    }
    if (!os) throw IoError("failed writing dataset: " + path.string());
}

std::vector<PreferenceRecord> load_dataset_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open dataset: " + path.string());
    std::vector<PreferenceRecord> records;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json row = parse_json(line, "dataset line " + std::to_string(line_no));
        require_known_keys(row,
                           {"scene", "question_tokens", "chosen_tokens", "rejected_tokens",
                            "confounded", "seed", "index"},
                           "dataset line " + std::to_string(line_no));
        PreferenceRecord rec;
        rec.scene = scene_from_json(row.at("scene"));
        rec.question_tokens = row.at("question_tokens").get<std::vector<int64_t>>();
        rec.chosen_tokens = row.at("chosen_tokens").get<std::vector<int64_t>>();
        rec.rejected_tokens = row.at("rejected_tokens").get<std::vector<int64_t>>();
        rec.confounded = row.at("confounded").get<bool>();
        rec.seed = row.at("seed").get<uint64_t>();
        rec.index = row.at("index").get<int64_t>();
        if (rec.chosen_tokens == rec.rejected_tokens) {
            throw IoError("dataset line " + std::to_string(line_no) +
                          ": chosen and rejected responses coincide");
        }
        if (!content_token_correct(rec.scene, rec.question_tokens, rec.chosen_tokens.at(0))) {
            throw IoError("dataset line " + std::to_string(line_no) +
                          ": chosen answer contradicts the scene");
        }
        records.push_back(std::move(rec));
    }
    return records;
}

namespace {

void fill_row(SequenceBatch& batch, int64_t row, const Image& image,
              std::span<const int64_t> question, std::span<const int64_t> response,
              bool zero_image) {
    const int64_t img_n = batch.grid * batch.grid * batch.channels;
    if (static_cast<int64_t>(image.pixels.size()) != img_n) {
        throw ShapeError("encode: image size mismatch");
    }
    if (static_cast<int64_t>(question.size()) > batch.question_len ||
        static_cast<int64_t>(response.size()) > batch.response_len) {
        throw DomainError("encode: token overflow (question or response too long)");
    }
    if (!zero_image) {
        std::copy(image.pixels.begin(), image.pixels.end(), batch.images.begin() + row * img_n);
    }
    for (size_t t = 0; t < question.size(); ++t) {
        batch.questions[row * batch.question_len + static_cast<int64_t>(t)] = question[t];
    }
    for (size_t t = 0; t < response.size(); ++t) {
        batch.responses[row * batch.response_len + static_cast<int64_t>(t)] = response[t];
        batch.response_mask[row * batch.response_len + static_cast<int64_t>(t)] = 1;
    }
}

SequenceBatch empty_batch(int64_t n) {
    SequenceBatch b;
    b.batch = n;
    b.grid = kSceneGrid;
    b.channels = 3;
    b.question_len = kQuestionLen;
    b.response_len = kResponseLen;
    b.images.assign(static_cast<size_t>(n * kSceneGrid * kSceneGrid * 3), 0.0);
    b.questions.assign(static_cast<size_t>(n * kQuestionLen), tokens::kPad);
    b.responses.assign(static_cast<size_t>(n * kResponseLen), tokens::kPad);
    b.response_mask.assign(static_cast<size_t>(n * kResponseLen), 0);
    return b;
}

}  // namespace

PreferenceBatch encode_preference_batch(std::span<const PreferenceRecord> records,
                                        const PerturbStrategy& strategy, SeededRng& rng,
                                        std::span<const PreferenceRecord> pool,
                                        int64_t pool_offset, const EncodeOptions& options) {
    if (records.empty()) throw ConfigError("encode: records must be non-empty");
    const int64_t n = static_cast<int64_t>(records.size());
    PreferenceBatch out{empty_batch(n), empty_batch(n), empty_batch(n)};
    for (int64_t i = 0; i < n; ++i) {
        const PreferenceRecord& rec = records[static_cast<size_t>(i)];
        const Image img = rec.image();
        fill_row(out.chosen, i, img, rec.question_tokens, rec.chosen_tokens, options.zero_images);
        fill_row(out.rejected_response, i, img, rec.question_tokens, rec.rejected_tokens,
                 options.zero_images);
        const Image rejected =
            make_rejected_image(img, strategy, rng, pool, pool_offset + i);
        fill_row(out.rejected_image, i, rejected, rec.question_tokens, rec.chosen_tokens,
                 options.zero_images);
    }
    return out;
}

std::pair<SequenceBatch, SequenceBatch> encode_batch(std::span<const PreferenceRecord> records,
                                                     const PerturbStrategy& strategy,
                                                     SeededRng& rng,
                                                     std::span<const PreferenceRecord> pool,
                                                     int64_t pool_offset) {
    PreferenceBatch full = encode_preference_batch(records, strategy, rng, pool, pool_offset);
    return {std::move(full.chosen), std::move(full.rejected_image)};
}

uint64_t fnv1a64(std::span<const char> bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace mdpo
