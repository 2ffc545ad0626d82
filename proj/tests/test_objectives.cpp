// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mdpo/data.hpp"
#include "mdpo/errors.hpp"
#include "mdpo/grad_check.hpp"
#include "mdpo/model.hpp"
#include "mdpo/objectives.hpp"
#include "mdpo/rng.hpp"

using namespace mdpo;

namespace {

constexpr double kLn2 = 0.6931471805599453;

// Independent high-precision oracle for every sigma-term, evaluated in
// extended precision. The implementation under test must agree to 1e-10.
long double softplus_ld(long double x) {
    if (x > 0.0L) return x + log1pl(expl(-x));
    return log1pl(expl(x));
}

double oracle_dpo(double beta, double lr_w, double lr_l) {
    return static_cast<double>(softplus_ld(-(static_cast<long double>(beta) * (lr_w - lr_l))));
}

double oracle_copo(double beta, double lr_w, double lr_img) {
    return static_cast<double>(softplus_ld(-(static_cast<long double>(beta) * (lr_w - lr_img))));
}

double oracle_ancpo(double beta, double delta, double lr_w, double lr_l, double lr_img,
                    AnchorVariant variant) {
    long double total = softplus_ld(-(static_cast<long double>(beta) * lr_w - delta));
    if (variant != AnchorVariant::kChosenOnly) {
        total += softplus_ld(-(static_cast<long double>(delta) - beta * lr_l));
    }
    if (variant == AnchorVariant::kChosenRejectedResponseImage) {
        total += softplus_ld(-(static_cast<long double>(delta) - beta * lr_img));
    }
    return static_cast<double>(total);
}

LogRatioValues make_values(double lr_w, double lr_l, double lr_img) {
    LogRatioValues v;
    v.lr_w = lr_w;
    v.lr_l = lr_l;
    v.lr_img = lr_img;
    v.has_rejected_image = true;
    return v;
}

ObjectiveConfig default_cfg() { return ObjectiveConfig{}; }

ModelConfig grad_check_model_config(uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.image_grid = 2;
    cfg.image_channels = 3;
    cfg.max_question_len = 2;
    cfg.max_response_len = 4;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("analytic anchors at policy == reference with delta = 0") {
    const ObjectiveConfig cfg = default_cfg();
    const LogRatioValues zero = make_values(0.0, 0.0, 0.0);
    CHECK(dpo_loss(zero, cfg) == doctest::Approx(kLn2).epsilon(1e-12));
    CHECK(copo_loss(zero, cfg) == doctest::Approx(kLn2).epsilon(1e-12));
    CHECK(ancpo_loss(zero, cfg) == doctest::Approx(kLn2).epsilon(1e-12));
    CHECK(mdpo_loss(zero, cfg).total == doctest::Approx(3.0 * kLn2).epsilon(1e-12));
    CHECK(mdpo_loss(zero, cfg).total == doctest::Approx(2.079442).epsilon(1e-6));

    ObjectiveConfig two_anchors = cfg;
    two_anchors.anchor_variant = AnchorVariant::kChosenRejectedResponse;
    CHECK(ancpo_loss(zero, two_anchors) == doctest::Approx(2.0 * kLn2).epsilon(1e-12));
    ObjectiveConfig three_anchors = cfg;
    three_anchors.anchor_variant = AnchorVariant::kChosenRejectedResponseImage;
    CHECK(ancpo_loss(zero, three_anchors) == doctest::Approx(3.0 * kLn2).epsilon(1e-12));
}

TEST_CASE("frozen oracle values") {
    const ObjectiveConfig cfg = default_cfg();  // beta = 0.1, delta = 0
    const LogRatioValues b = make_values(0.2, -0.5, -0.1);
    CHECK(dpo_loss(b, cfg) == doctest::Approx(0.658759).epsilon(1e-6));
    CHECK(copo_loss(b, cfg) == doctest::Approx(0.678259).epsilon(1e-6));
    CHECK(ancpo_loss(b, cfg) == doctest::Approx(0.683197).epsilon(1e-6));
    CHECK(mdpo_loss(b, cfg).total == doctest::Approx(2.020216412).epsilon(1e-8));

    CHECK(dpo_loss(b, cfg) == doctest::Approx(oracle_dpo(0.1, 0.2, -0.5)).epsilon(1e-14));
    CHECK(copo_loss(b, cfg) == doctest::Approx(oracle_copo(0.1, 0.2, -0.1)).epsilon(1e-14));
}

TEST_CASE("scalar oracle equivalence over random tuples") {
    SeededRng rng(2024, 0);
    const AnchorVariant variants[] = {AnchorVariant::kChosenOnly,
                                      AnchorVariant::kChosenRejectedResponse,
                                      AnchorVariant::kChosenRejectedResponseImage};
    for (int i = 0; i < 1000; ++i) {
        ObjectiveConfig cfg;
        cfg.beta = rng.uniform(0.01, 2.0);
        cfg.delta = rng.uniform(-3.0, 3.0);
        cfg.anchor_variant = variants[rng.below(3)];
        const LogRatioValues b =
            make_values(rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0),
                        rng.uniform(-50.0, 50.0));

        const double dpo_expected = oracle_dpo(cfg.beta, b.lr_w, b.lr_l);
        const double copo_expected = oracle_copo(cfg.beta, b.lr_w, b.lr_img);
        const double ancpo_expected =
            oracle_ancpo(cfg.beta, cfg.delta, b.lr_w, b.lr_l, b.lr_img, cfg.anchor_variant);
        CHECK(std::abs(dpo_loss(b, cfg) - dpo_expected) <= 1e-10 * std::max(1.0, dpo_expected));
        CHECK(std::abs(copo_loss(b, cfg) - copo_expected) <= 1e-10 * std::max(1.0, copo_expected));
        CHECK(std::abs(ancpo_loss(b, cfg) - ancpo_expected) <=
              1e-10 * std::max(1.0, ancpo_expected));
        const MdpoLossValues combined = mdpo_loss(b, cfg);
        CHECK(std::abs(combined.total - (dpo_expected + copo_expected + ancpo_expected)) <=
              1e-10 * std::max(1.0, combined.total));
    }
}

TEST_CASE("losses are non-negative, finite across the documented domain, and monotone") {
    const ObjectiveConfig cfg = default_cfg();
    double prev = 1e18;
    for (double margin = -40.0; margin <= 40.0; margin += 0.5) {
        const LogRatioValues b = make_values(margin, 0.0, 0.0);
        const double loss = dpo_loss(b, cfg);
        CHECK(loss >= 0.0);
        CHECK(loss < prev);  // strictly decreasing in lr_w - lr_l
        prev = loss;
    }
    // No overflow for |argument| <= 700 (beta = 1 pushes the argument there).
    ObjectiveConfig wide = cfg;
    wide.beta = 1.0;
    CHECK(std::isfinite(dpo_loss(make_values(700.0, 0.0, 0.0), wide)));
    CHECK(std::isfinite(dpo_loss(make_values(-700.0, 0.0, 0.0), wide)));
}

TEST_CASE("swapping the image pair negates the argument: softplus identity") {
    const ObjectiveConfig cfg = default_cfg();
    SeededRng rng(7, 0);
    for (int i = 0; i < 100; ++i) {
        const double lr_w = rng.uniform(-5.0, 5.0);
        const double lr_img = rng.uniform(-5.0, 5.0);
        const double x = cfg.beta * (lr_w - lr_img);
        const double swapped = copo_loss(make_values(lr_img, 0.0, lr_w), cfg);
        const double direct = copo_loss(make_values(lr_w, 0.0, lr_img), cfg);
        CHECK(swapped == doctest::Approx(x + direct).epsilon(1e-9));
    }
}

TEST_CASE("dpo is invariant to a shared shift of both log-ratios; ancpo is not") {
    const ObjectiveConfig cfg = default_cfg();
    SeededRng rng(8, 0);
    for (int i = 0; i < 100; ++i) {
        const double lr_w = rng.uniform(-5.0, 5.0);
        const double lr_l = rng.uniform(-5.0, 5.0);
        const double shift = rng.uniform(-10.0, 10.0);
        const double base = dpo_loss(make_values(lr_w, lr_l, 0.0), cfg);
        const double shifted = dpo_loss(make_values(lr_w + shift, lr_l + shift, 0.0), cfg);
        CHECK(shifted == doctest::Approx(base).epsilon(1e-12));
    }
    const double anc_base = ancpo_loss(make_values(0.0, 0.0, 0.0), cfg);
    const double anc_shifted = ancpo_loss(make_values(5.0, 5.0, 5.0), cfg);
    CHECK(std::abs(anc_base - anc_shifted) > 0.1);
}

TEST_CASE("mdpo breakdown sums to the total and honors toggles and weights") {
    ObjectiveConfig cfg = default_cfg();
    const LogRatioValues b = make_values(0.7, -1.3, 0.4);
    const MdpoLossValues full = mdpo_loss(b, cfg);
    CHECK(std::abs(full.total - (full.dpo + full.copo + full.ancpo)) <= 1e-12);

    // Disabling conditional and anchored reproduces the plain preference loss.
    cfg.components.copo = false;
    cfg.components.ancpo = false;
    const MdpoLossValues only_dpo = mdpo_loss(b, cfg);
    CHECK(only_dpo.total == doctest::Approx(dpo_loss(b, cfg)).epsilon(1e-15));

    ObjectiveConfig weighted = default_cfg();
    weighted.copo_weight = 0.5;
    weighted.ancpo_weight = 2.0;
    const MdpoLossValues w = mdpo_loss(b, weighted);
    CHECK(w.total ==
          doctest::Approx(w.dpo + 0.5 * w.copo + 2.0 * w.ancpo).epsilon(1e-12));

    ObjectiveConfig none = default_cfg();
    none.components = {false, false, false};
    CHECK_THROWS_AS(mdpo_loss(b, none), ConfigError);

    LogRatioValues no_img = b;
    no_img.has_rejected_image = false;
    CHECK_THROWS_AS(copo_loss(no_img, default_cfg()), ConfigError);
}

TEST_CASE("value-path losses agree with the plain-number path and carry gradients") {
    const ObjectiveConfig cfg = default_cfg();
    Tape tape;
    LogRatioBundle bundle;
    bundle.lr_w = tape.leaf(Tensor::scalar(0.2), true);
    bundle.lr_l = tape.leaf(Tensor::scalar(-0.5), true);
    bundle.lr_img = tape.leaf(Tensor::scalar(-0.1), true);
    bundle.chosen_logp = bundle.lr_w;
    bundle.has_rejected_image = true;

    MdpoLoss loss = mdpo_loss(bundle, cfg);
    const MdpoLossValues expected = mdpo_loss(bundle_values(bundle), cfg);
    CHECK(loss.total.item() == doctest::Approx(expected.total).epsilon(1e-14));
    CHECK(loss.dpo->item() == doctest::Approx(expected.dpo).epsilon(1e-14));

    tape.backward(loss.total);
    // d/d lr_l of -log sigmoid(beta (lr_w - lr_l)) is beta * sigma(-beta (lr_w - lr_l)):
    // positive, pushing the rejected ratio down.
    const double arg = cfg.beta * (0.2 - (-0.5));
    const double expected_dlrl = cfg.beta / (1.0 + std::exp(arg));
    CHECK(tape.grad(bundle.lr_l)[0] == doctest::Approx(expected_dlrl).epsilon(1e-10));
    CHECK(expected_dlrl > 0.0);
}

TEST_CASE("compute_log_ratios is exactly zero at policy == reference and matches "
          "independent recomputation") {
    ModelConfig mcfg = grad_check_model_config(11);
    MultimodalLM policy(mcfg);
    Tensor* head = policy.find_parameter("head_w");
    SeededRng hrng(99, 0);
    for (int64_t i = 0; i < head->numel(); ++i) (*head)[i] = hrng.normal(0.0, 0.4);
    MultimodalLM reference = snapshot_reference(policy);

    SeededRng rng(12, 0);
    std::vector<double> image(static_cast<size_t>(mcfg.patch_count() * 3));
    for (double& v : image) v = rng.next_double();
    std::vector<double> alt_image(image.size());
    for (double& v : alt_image) v = rng.next_double();
    const std::vector<int64_t> question = {1, 2};
    const std::vector<int64_t> chosen = {3, 4};
    const std::vector<int64_t> rejected = {5, 4};
    const std::vector<uint8_t> mask = {1, 1};

    PreferenceExample ex{image, question, chosen, mask, rejected, mask, alt_image};

    Tape tape;
    LogRatioBundle bundle = compute_log_ratios(policy, reference, tape, ex);
    CHECK(bundle.lr_w.item() == 0.0);
    CHECK(bundle.lr_l.item() == 0.0);
    CHECK(bundle.lr_img.item() == 0.0);

    // Perturb the policy and compare against two independent calls.
    SeededRng bump(101, 0);
    for (int64_t i = 0; i < head->numel(); ++i) (*head)[i] += bump.normal(0.0, 0.1);
    Tape tape2;
    LogRatioBundle moved = compute_log_ratios(policy, reference, tape2, ex);
    const double expect_lr_w = policy.sequence_log_prob_value(image, question, chosen, mask) -
                               reference.sequence_log_prob_value(image, question, chosen, mask);
    CHECK(moved.lr_w.item() == doctest::Approx(expect_lr_w).epsilon(1e-12));
    CHECK(std::abs(moved.lr_w.item()) > 1e-6);

    MultimodalLM other(grad_check_model_config(12));
    ModelConfig different = grad_check_model_config(11);
    different.d_model = 32;
    MultimodalLM bigger(different);
    Tape tape3;
    CHECK_THROWS_AS(compute_log_ratios(policy, bigger, tape3, ex), ConfigError);
}

TEST_CASE("no-image probe loss ignores the actual image") {
    ModelConfig mcfg = grad_check_model_config(13);
    MultimodalLM policy(mcfg);
    MultimodalLM reference = snapshot_reference(policy);
    const ObjectiveConfig cfg = default_cfg();

    SeededRng rng(14, 0);
    std::vector<double> image_a(static_cast<size_t>(mcfg.patch_count() * 3));
    for (double& v : image_a) v = rng.next_double();
    std::vector<double> image_b(image_a.size());
    for (double& v : image_b) v = rng.next_double();
    const std::vector<int64_t> question = {1, 2};
    const std::vector<int64_t> chosen = {3, 4};
    const std::vector<int64_t> rejected = {5, 4};
    const std::vector<uint8_t> mask = {1, 1};

    Tape t1, t2, t3;
    PreferenceExample ex_a{image_a, question, chosen, mask, rejected, mask, {}};
    PreferenceExample ex_b{image_b, question, chosen, mask, rejected, mask, {}};
    const double loss_a = dpo_no_image_loss(policy, reference, t1, ex_a, cfg).item();
    const double loss_b = dpo_no_image_loss(policy, reference, t2, ex_b, cfg).item();
    CHECK(loss_a == doctest::Approx(kLn2).epsilon(1e-12));  // policy == reference
    CHECK(loss_a == loss_b);                                // image content is irrelevant

    // After perturbing the policy the probe differs from the image-conditioned loss.
    Tensor* head = policy.find_parameter("head_w");
    SeededRng hrng(15, 0);
    for (int64_t i = 0; i < head->numel(); ++i) (*head)[i] = hrng.normal(0.0, 0.5);
    Tape t4, t5;
    const double no_image = dpo_no_image_loss(policy, reference, t4, ex_a, cfg).item();
    LogRatioBundle bundle = compute_log_ratios(policy, reference, t5, ex_a);
    const double with_image = dpo_loss(bundle, cfg).item();
    CHECK(std::abs(no_image - with_image) > 1e-9);
}

TEST_CASE("loss gradients through the full model match finite differences") {
    // One seed here; the acceptance suite runs five.
    ModelConfig mcfg = grad_check_model_config(21);
    MultimodalLM policy(mcfg);
    Tensor* head = policy.find_parameter("head_w");
    SeededRng hrng(22, 0);
    for (int64_t i = 0; i < head->numel(); ++i) (*head)[i] = hrng.normal(0.0, 0.3);
    MultimodalLM reference = snapshot_reference(policy);
    // Move the policy off the reference so the losses sit away from their anchors.
    for (Parameter& p : policy.parameters()) {
        SeededRng prng(23, fnv1a64({p.name.data(), p.name.size()}));
        for (int64_t i = 0; i < p.value.numel(); ++i) p.value[i] += prng.normal(0.0, 0.02);
    }

    SeededRng rng(24, 0);
    std::vector<double> image(static_cast<size_t>(mcfg.patch_count() * 3));
    for (double& v : image) v = rng.next_double();
    std::vector<double> alt_image(image.size());
    for (double& v : alt_image) v = rng.next_double();
    const std::vector<int64_t> question = {1, 2};
    const std::vector<int64_t> chosen = {3, 4, 6};
    const std::vector<int64_t> rejected = {5, 4, 6};
    const std::vector<uint8_t> mask = {1, 1, 1};
    PreferenceExample ex{image, question, chosen, mask, rejected, mask, alt_image};

    ObjectiveConfig cfg = default_cfg();
    cfg.anchor_variant = AnchorVariant::kChosenRejectedResponse;
    const ReferenceLogProbs ref = reference_log_probs(reference, ex);

    GradCheckTarget target;
    for (Parameter& p : policy.parameters()) {
        target.names.push_back(p.name);
        target.params.push_back(&p.value);
    }
    target.value = [&]() {
        Tape tape;
        BoundModel bound = policy.bind(tape, false);
        return mdpo_loss(compute_log_ratios(bound, ref, ex), cfg).total.item();
    };
    target.gradient = [&]() {
        Tape tape;
        BoundModel bound = policy.bind(tape, true);
        MdpoLoss loss = mdpo_loss(compute_log_ratios(bound, ref, ex), cfg);
        tape.backward(loss.total);
        std::vector<Tensor> grads;
        for (Value v : bound.params) grads.push_back(tape.grad(v));
        return grads;
    };

    GradCheckReport report = grad_check(target, 1e-5, 1e-5, /*coordinates_per_param=*/5,
                                        /*sample_seed=*/99);
    INFO(report.summary());
    CHECK(report.passed);
}
