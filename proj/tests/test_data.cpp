// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "mdpo/data.hpp"
#include "mdpo/errors.hpp"
#include "mdpo/rng.hpp"

using namespace mdpo;

namespace {

bool records_equal(const PreferenceRecord& a, const PreferenceRecord& b) {
    if (a.question_tokens != b.question_tokens || a.chosen_tokens != b.chosen_tokens ||
        a.rejected_tokens != b.rejected_tokens || a.confounded != b.confounded ||
        a.seed != b.seed || a.index != b.index || a.scene.grid != b.scene.grid ||
        a.scene.objects.size() != b.scene.objects.size()) {
        return false;
    }
    for (size_t i = 0; i < a.scene.objects.size(); ++i) {
        const SceneObject &x = a.scene.objects[i], &y = b.scene.objects[i];
        if (x.type != y.type || x.color != y.color || x.row != y.row || x.col != y.col) {
            return false;
        }
    }
    return true;
}

// Scene truth recomputed from first principles, independent of the library's
// checker.
bool chosen_statement_true(const PreferenceRecord& rec) {
    const int64_t content = rec.chosen_tokens.at(0);
    const int64_t head = rec.question_tokens.at(0);
    const int64_t target = rec.question_tokens.at(1);
    if (head == tokens::kQPresence) {
        bool present = false;
        for (const SceneObject& o : rec.scene.objects) {
            present = present || (tokens::object_token(o.type) == target);
        }
        return content == (present ? tokens::kYes : tokens::kNo);
    }
    if (head == tokens::kQCount) {
        return content == tokens::count_token(static_cast<int64_t>(rec.scene.objects.size()));
    }
    if (head == tokens::kQColor) {
        int64_t color = -1;
        int64_t hits = 0;
        for (const SceneObject& o : rec.scene.objects) {
            if (tokens::object_token(o.type) == target) {
                ++hits;
                color = o.color;
            }
        }
        return hits == 1 && content == tokens::color_token(color);
    }
    return false;
}

// Tiny logistic-regression probe over bag-of-token differences; returns
// held-out accuracy on deciding which response of a pair was preferred.
double text_only_probe_accuracy(std::span<const PreferenceRecord> records, uint64_t seed) {
    constexpr int64_t kVocab = 32;
    struct Example {
        std::array<double, kVocab> features{};
        double label = 0.0;  // 1: first element of the pair is the chosen one
    };
    SeededRng rng(seed, 0);
    std::vector<Example> examples;
    for (const PreferenceRecord& rec : records) {
        Example ex;
        const bool flip = rng.below(2) == 1;
        const auto& first = flip ? rec.rejected_tokens : rec.chosen_tokens;
        const auto& second = flip ? rec.chosen_tokens : rec.rejected_tokens;
        for (int64_t t : first) ex.features[static_cast<size_t>(t)] += 1.0;
        for (int64_t t : second) ex.features[static_cast<size_t>(t)] -= 1.0;
        ex.label = flip ? 0.0 : 1.0;
        examples.push_back(ex);
    }
    const size_t split = examples.size() / 2;
    std::array<double, kVocab> w{};
    double bias = 0.0;
    for (int iter = 0; iter < 400; ++iter) {
        std::array<double, kVocab> grad{};
        double grad_bias = 0.0;
        for (size_t i = 0; i < split; ++i) {
            double z = bias;
            for (int64_t f = 0; f < kVocab; ++f) {
                z += w[static_cast<size_t>(f)] * examples[i].features[static_cast<size_t>(f)];
            }
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double err = p - examples[i].label;
            for (int64_t f = 0; f < kVocab; ++f) {
                grad[static_cast<size_t>(f)] += err * examples[i].features[static_cast<size_t>(f)];
            }
            grad_bias += err;
        }
        for (int64_t f = 0; f < kVocab; ++f) {
            w[static_cast<size_t>(f)] -= 0.5 / static_cast<double>(split) * grad[static_cast<size_t>(f)];
        }
        bias -= 0.5 / static_cast<double>(split) * grad_bias;
    }
    double correct = 0.0;
    for (size_t i = split; i < examples.size(); ++i) {
        double z = bias;
        for (int64_t f = 0; f < kVocab; ++f) {
            z += w[static_cast<size_t>(f)] * examples[i].features[static_cast<size_t>(f)];
        }
        const bool predict_first = z > 0.0;
        correct += (predict_first == (examples[i].label > 0.5)) ? 1.0 : 0.0;
    }
    return correct / static_cast<double>(examples.size() - split);
}

}  // namespace

TEST_CASE("dataset generation is a pure function of seed, n and confound rate") {
    const auto a = generate_dataset(7, 100, 0.5);
    const auto b = generate_dataset(7, 100, 0.5);
    REQUIRE(a.size() == 100);
    int64_t confounded = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(records_equal(a[i], b[i]));
        confounded += a[i].confounded ? 1 : 0;
    }
    CHECK(confounded == 50);

    const auto c = generate_dataset(8, 100, 0.5);
    bool all_same = true;
    for (size_t i = 0; i < a.size(); ++i) all_same = all_same && records_equal(a[i], c[i]);
    CHECK_FALSE(all_same);
}

TEST_CASE("confound rate 0 plants no marker anywhere") {
    const auto records = generate_dataset(3, 120, 0.0);
    for (const PreferenceRecord& rec : records) {
        CHECK_FALSE(rec.confounded);
        for (int64_t t : rec.chosen_tokens) CHECK(t != tokens::kMarker);
        for (int64_t t : rec.rejected_tokens) CHECK(t != tokens::kMarker);
    }
}

TEST_CASE("chosen answers are true statements and rejected ones contradict the scene") {
    const auto records = generate_dataset(11, 100, 0.7);
    for (const PreferenceRecord& rec : records) {
        CHECK(chosen_statement_true(rec));
        CHECK(content_token_correct(rec.scene, rec.question_tokens, rec.chosen_tokens[0]));
        CHECK_FALSE(content_token_correct(rec.scene, rec.question_tokens, rec.rejected_tokens[0]));
        CHECK(rec.chosen_tokens != rec.rejected_tokens);
        CHECK(rec.chosen_tokens.back() == tokens::kEos);
        CHECK(rec.rejected_tokens.back() == tokens::kEos);
    }
}

TEST_CASE("question kinds are balanced to within one") {
    const auto records = generate_dataset(5, 1000, 0.5);
    int64_t counts[3] = {0, 0, 0};
    for (const PreferenceRecord& rec : records) counts[static_cast<int>(rec.kind())]++;
    for (int64_t c : counts) {
        CHECK(c >= 333);
        CHECK(c <= 334);
    }
}

TEST_CASE("crop side formula matches the rendered-pixel rule") {
    // 8x8 grid rendered at 32x32: keeping 16% of the area gives a 12-pixel
    // side and an actual kept fraction of 144/1024.
    CHECK(crop_side_pixels(8, 0.16) == 12);
    const double fraction = 144.0 / 1024.0;
    CHECK(fraction > 0.0);
    CHECK(fraction <= 0.2);
}

TEST_CASE("crop-keep samples stay within the configured band and mean kept area is near "
          "the band midpoint") {
    const auto records = generate_dataset(17, 4, 0.0);
    const Image img = records[0].image();
    const CropKeep crop{0.0, 0.2};
    const int64_t pix = kSceneGrid * kRenderScale;

    double total_fraction = 0.0;
    const int64_t draws = 10000;
    for (int64_t i = 0; i < draws; ++i) {
        SeededRng rng(1000, static_cast<uint64_t>(i));
        // The first draw decides the kept fraction; reproduce it to audit.
        SeededRng audit = rng;
        const double keep = audit.uniform_open_low(crop.lo_frac, crop.hi_frac);
        const int64_t side = crop_side_pixels(kSceneGrid, keep);
        const double fraction = static_cast<double>(side * side) /
                                static_cast<double>(pix * pix);
        CHECK(fraction > 0.0);
        CHECK(fraction <= 0.2);
        total_fraction += fraction;
        if (i < 100) {
            const Image out = make_rejected_image(img, crop, rng);
            CHECK(out.pixels.size() == img.pixels.size());
            for (double v : out.pixels) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
    const double mean = total_fraction / static_cast<double>(draws);
    CHECK(mean >= 0.08);
    CHECK(mean <= 0.12);
}

TEST_CASE("degenerate crops are rejected") {
    const auto records = generate_dataset(18, 2, 0.0);
    const Image img = records[0].image();
    SeededRng rng(1, 0);
    const CropKeep degenerate{0.0, 1.0 / 65.0};  // keeps less than one cell of an 8x8 grid
    CHECK_THROWS_AS(make_rejected_image(img, degenerate, rng), DomainError);
}

TEST_CASE("random-image strategy always picks a different record's image") {
    const auto records = generate_dataset(19, 100, 0.0);
    // Scenes are almost surely pairwise distinct; verify and then rely on
    // injective rendering.
    std::set<std::string> rendered;
    for (const PreferenceRecord& rec : records) {
        const Image img = rec.image();
        std::string key(reinterpret_cast<const char*>(img.pixels.data()),
                        img.pixels.size() * sizeof(double));
        rendered.insert(std::move(key));
    }
    REQUIRE(rendered.size() == records.size());

    for (int64_t i = 0; i < 100; ++i) {
        SeededRng rng(20, static_cast<uint64_t>(i));
        const Image own = records[static_cast<size_t>(i)].image();
        const Image other = make_rejected_image(own, RandomImage{}, rng, records, i);
        CHECK(other.pixels != own.pixels);
    }
    SeededRng rng(21, 0);
    CHECK_THROWS_AS(make_rejected_image(records[0].image(), RandomImage{}, rng), DomainError);
}

TEST_CASE("noise augmentation stays in range and perturbs the image") {
    const auto records = generate_dataset(22, 2, 0.0);
    const Image img = records[0].image();
    SeededRng rng(23, 0);
    const Image out = make_rejected_image(img, NoiseAug{}, rng);
    CHECK(out.pixels.size() == img.pixels.size());
    bool changed = false;
    for (size_t i = 0; i < out.pixels.size(); ++i) {
        CHECK(out.pixels[i] >= 0.0);
        CHECK(out.pixels[i] <= 1.0);
        changed = changed || out.pixels[i] != img.pixels[i];
    }
    CHECK(changed);
}

TEST_CASE("encoded batches carry exact masks, differ only in the image plane, and round-trip") {
    const auto records = generate_dataset(31, 16, 0.5);
    SeededRng rng(32, 0);
    PreferenceBatch batch =
        encode_preference_batch(records, CropKeep{0.0, 0.2}, rng, records, 0);

    for (int64_t b = 0; b < 16; ++b) {
        const PreferenceRecord& rec = records[static_cast<size_t>(b)];
        int64_t scored = 0;
        for (uint8_t m : batch.chosen.mask_row(b)) scored += m;
        CHECK(scored == static_cast<int64_t>(rec.chosen_tokens.size()));

        // Round trip: unpadded tokens reproduce the record ids exactly.
        const auto q = batch.chosen.question_row(b);
        CHECK(std::vector<int64_t>(q.begin(), q.end()) == rec.question_tokens);
        const auto resp = batch.chosen.response_row(b);
        std::vector<int64_t> unpadded(resp.begin(),
                                      resp.begin() + rec.chosen_tokens.size());
        CHECK(unpadded == rec.chosen_tokens);
        for (size_t t = rec.chosen_tokens.size(); t < resp.size(); ++t) {
            CHECK(resp[t] == tokens::kPad);
        }

        // The image-contrast batch differs from the chosen batch only in pixels.
        CHECK(std::vector<int64_t>(batch.rejected_image.response_row(b).begin(),
                                   batch.rejected_image.response_row(b).end()) ==
              std::vector<int64_t>(resp.begin(), resp.end()));
        bool image_differs = false;
        const auto img_a = batch.chosen.image_row(b);
        const auto img_b = batch.rejected_image.image_row(b);
        for (size_t i = 0; i < img_a.size(); ++i) image_differs |= img_a[i] != img_b[i];
        CHECK(image_differs);
    }

    SeededRng rng2(32, 0);
    EncodeOptions no_image{.zero_images = true};
    PreferenceBatch blank =
        encode_preference_batch(records, CropKeep{0.0, 0.2}, rng2, records, 0, no_image);
    for (double v : blank.chosen.images) CHECK(v == 0.0);

    SeededRng rng3(33, 0);
    auto [chosen, rejected_image] = encode_batch(records, CropKeep{0.0, 0.2}, rng3, records, 0);
    CHECK(chosen.responses == rejected_image.responses);
    CHECK(chosen.questions == rejected_image.questions);
    CHECK(chosen.images != rejected_image.images);
}

TEST_CASE("dataset jsonl round-trips and rejects malformed rows") {
    const auto records = generate_dataset(41, 50, 0.3);
    const std::filesystem::path path =
        std::filesystem::temp_directory_path() / "mdpo_dataset_test.jsonl";
    save_dataset_jsonl(path, records);
    const auto loaded = load_dataset_jsonl(path);
    REQUIRE(loaded.size() == records.size());
    for (size_t i = 0; i < records.size(); ++i) CHECK(records_equal(records[i], loaded[i]));

    // Identical bytes on rewrite.
    const std::filesystem::path path2 =
        std::filesystem::temp_directory_path() / "mdpo_dataset_test2.jsonl";
    save_dataset_jsonl(path2, records);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(fnv1a64({s1.data(), s1.size()}) == fnv1a64({s2.data(), s2.size()}));

    std::ofstream bad(path, std::ios::app);
    bad << R"({"scene": {"grid": 8, "objects": []}, "unknown_field": 1})" << "\n";
    bad.close();
    CHECK_THROWS_AS(load_dataset_jsonl(path), ConfigError);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("a text-only probe decides confounded preferences but not clean ones") {
    const auto records = generate_dataset(51, 1200, 0.5);
    std::vector<PreferenceRecord> confounded, clean;
    for (const PreferenceRecord& rec : records) {
        (rec.confounded ? confounded : clean).push_back(rec);
    }
    REQUIRE(confounded.size() == 600);
    const double acc_confounded = text_only_probe_accuracy(confounded, 1);
    const double acc_clean = text_only_probe_accuracy(clean, 2);
    CHECK(acc_confounded > 0.95);
    CHECK(acc_clean <= 0.6);
}

TEST_CASE("hallucination rule: only assertions of absent content count") {
    SyntheticScene scene;
    scene.grid = kSceneGrid;
    scene.objects = {{1, 2, 0, 0}, {1, 2, 3, 3}, {3, 1, 5, 5}};  // two of type 1, one of type 3

    const std::vector<int64_t> presence_absent = {tokens::kQPresence, tokens::object_token(2)};
    CHECK(asserts_absent_content(scene, presence_absent, tokens::kYes));
    CHECK_FALSE(asserts_absent_content(scene, presence_absent, tokens::kNo));
    const std::vector<int64_t> presence_there = {tokens::kQPresence, tokens::object_token(1)};
    CHECK_FALSE(asserts_absent_content(scene, presence_there, tokens::kYes));
    CHECK_FALSE(asserts_absent_content(scene, presence_there, tokens::kNo));  // a miss, not a claim

    const std::vector<int64_t> count_q = {tokens::kQCount, tokens::kAll};
    CHECK_FALSE(asserts_absent_content(scene, count_q, tokens::count_token(3)));
    CHECK_FALSE(asserts_absent_content(scene, count_q, tokens::count_token(2)));  // undercount
    CHECK(asserts_absent_content(scene, count_q, tokens::count_token(4)));        // overcount
    CHECK(asserts_absent_content(scene, count_q, tokens::kYes));                  // invalid token

    const std::vector<int64_t> color_q = {tokens::kQColor, tokens::object_token(3)};
    CHECK_FALSE(asserts_absent_content(scene, color_q, tokens::color_token(1)));
    CHECK(asserts_absent_content(scene, color_q, tokens::color_token(2)));
}
