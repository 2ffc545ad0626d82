// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mdpo/model.hpp"
#include "mdpo/rng.hpp"

namespace mdpo {

// Token table for the synthetic task. Symbol ids, not natural language.
namespace tokens {
constexpr int64_t kPad = 0;
constexpr int64_t kQPresence = 1;
constexpr int64_t kQCount = 2;
constexpr int64_t kQColor = 3;
constexpr int64_t kAll = 4;  // question filler: "count everything"
constexpr int64_t kYes = 5;
constexpr int64_t kNo = 6;
constexpr int64_t kNumBase = 7;    // kNumBase + c encodes the count c, c in 0..5
constexpr int64_t kColorBase = 12; // kColorBase + c encodes color c, c in 1..4
constexpr int64_t kObjBase = 16;   // kObjBase + k encodes object type k, k in 1..6
constexpr int64_t kMarker = 23;    // stylistic marker planted on confounded chosen responses
constexpr int64_t kEos = 24;

inline int64_t count_token(int64_t c) { return kNumBase + c; }
inline int64_t color_token(int64_t c) { return kColorBase + c; }
inline int64_t object_token(int64_t k) { return kObjBase + k; }
}  // namespace tokens

constexpr int64_t kSceneGrid = 8;
constexpr int64_t kNumObjectTypes = 3;
constexpr int64_t kNumColors = 2;
constexpr int64_t kMaxObjects = 5;
constexpr int64_t kQuestionLen = 2;
constexpr int64_t kResponseLen = 3;
constexpr int64_t kRenderScale = 4;  // rendering resolution per cell for cropping

enum class QuestionKind { kPresence, kCount, kColor };
std::string question_kind_name(QuestionKind k);

struct SceneObject {
    int64_t type = 1;   // 1..kNumObjectTypes
    int64_t color = 1;  // 1..kNumColors
    int64_t row = 0;
    int64_t col = 0;
};

struct SyntheticScene {
    int64_t grid = kSceneGrid;
    std::vector<SceneObject> objects;  // distinct cells, 1..kMaxObjects entries

    int64_t total_objects() const { return static_cast<int64_t>(objects.size()); }
    bool has_type(int64_t type) const;
    int64_t count_type(int64_t type) const;
    /// Color of the unique object of `type`; -1 when absent or ambiguous.
    int64_t unique_color_of(int64_t type) const;
    void validate() const;
};

/// grid x grid x 3 floats in [0, 1]. Object type and color are channel-coded
/// per cell, so rendering is injective over the scene space.
struct Image {
    int64_t grid = kSceneGrid;
    std::vector<double> pixels;
};

Image render_scene(const SyntheticScene& scene);

struct PreferenceRecord {
    SyntheticScene scene;
    std::vector<int64_t> question_tokens;  // [kind, target]
    std::vector<int64_t> chosen_tokens;    // correct content (+marker) + EOS
    std::vector<int64_t> rejected_tokens;  // fluent but contradicts the scene
    bool confounded = false;
    uint64_t seed = 0;
    int64_t index = 0;

    QuestionKind kind() const;
    Image image() const { return render_scene(scene); }
};

// Rejected-image construction strategies.
struct CropKeep {
    double lo_frac = 0.0;  // sampled keep-fraction is in (lo_frac, hi_frac]
    double hi_frac = 0.2;
};
struct RandomImage {};
struct NoiseAug {
    double scale_lo = 0.6, scale_hi = 1.4;
    double shift_lo = -0.2, shift_hi = 0.2;
    double noise_std = 0.1;
};
using PerturbStrategy = std::variant<CropKeep, RandomImage, NoiseAug>;

std::string perturb_strategy_name(const PerturbStrategy& s);
PerturbStrategy perturb_strategy_from_json(const std::string& text);
std::string perturb_strategy_to_json(const PerturbStrategy& s);

/// Side length, in rendered pixels, of a crop keeping `keep_fraction` of the
/// area of a grid x grid image rendered at kRenderScale pixels per cell.
int64_t crop_side_pixels(int64_t grid, double keep_fraction);

/// Derives the rejected image m_l. CropKeep resamples a small kept region
/// back to full size (nearest neighbour); RandomImage picks another record's
/// image from `pool`; NoiseAug jitters channels and adds clamped noise.
Image make_rejected_image(const Image& image, const PerturbStrategy& strategy, SeededRng& rng,
                          std::span<const PreferenceRecord> pool = {}, int64_t self_index = -1);

/// Deterministic synthetic preference data: exactly round(confound_rate * n)
/// confounded records and question kinds balanced to within one.
std::vector<PreferenceRecord> generate_dataset(uint64_t seed, int64_t n, double confound_rate);

void save_dataset_jsonl(const std::filesystem::path& path,
                        std::span<const PreferenceRecord> records);
std::vector<PreferenceRecord> load_dataset_jsonl(const std::filesystem::path& path);

// Ground truth checks against the scene.
int64_t correct_content_token(const SyntheticScene& scene,
                              std::span<const int64_t> question_tokens);
bool content_token_correct(const SyntheticScene& scene, std::span<const int64_t> question_tokens,
                           int64_t content_token);
/// The hallucination rule: does this answer assert an object or attribute the
/// scene does not contain? (Saying "no"/undercounting is wrong but asserts
/// nothing absent; invalid answer tokens are judged by the caller.)
bool asserts_absent_content(const SyntheticScene& scene, std::span<const int64_t> question_tokens,
                            int64_t content_token);
bool is_valid_content_token(std::span<const int64_t> question_tokens, int64_t content_token);

struct EncodeOptions {
    bool zero_images = false;  // NoImage mode: blank the image plane
};

struct PreferenceBatch {
    SequenceBatch chosen;             // (m_w, q, y_w)
    SequenceBatch rejected_response;  // (m_w, q, y_l)
    SequenceBatch rejected_image;     // (m_l, q, y_w)
};

PreferenceBatch encode_preference_batch(std::span<const PreferenceRecord> records,
                                        const PerturbStrategy& strategy, SeededRng& rng,
                                        std::span<const PreferenceRecord> pool = {},
                                        int64_t pool_offset = 0,
                                        const EncodeOptions& options = {});

/// The (chosen-image, rejected-image) batch pair: identical except for the
/// image plane.
std::pair<SequenceBatch, SequenceBatch> encode_batch(std::span<const PreferenceRecord> records,
                                                     const PerturbStrategy& strategy,
                                                     SeededRng& rng,
                                                     std::span<const PreferenceRecord> pool = {},
                                                     int64_t pool_offset = 0);

uint64_t fnv1a64(std::span<const char> bytes);

}  // namespace mdpo
