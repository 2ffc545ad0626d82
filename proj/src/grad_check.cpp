// SPDX-License-Identifier: Apache-2.0
#include "mdpo/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mdpo/errors.hpp"
#include "mdpo/rng.hpp"

namespace mdpo {

namespace {
constexpr double kDenominatorFloor = 1e-4;
}

const GradCheckEntry* GradCheckReport::worst() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries) {
        if (!w || e.rel_error > w->rel_error) w = &e;
    }
    return w;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << " (" << entries.size() << " coordinates, max rel err "
       << max_rel_error << ", tol " << tolerance << ")";
    if (const GradCheckEntry* w = worst(); w && !passed) {
        os << " worst: " << w->param << "[" << w->coordinate << "] analytic=" << w->analytic
           << " numeric=" << w->numeric;
    }
    return os.str();
}

GradCheckReport grad_check(GradCheckTarget& target, double step, double tolerance,
                           int64_t coordinates_per_param, uint64_t sample_seed) {
    if (target.params.size() != target.names.size()) {
        throw ConfigError("grad_check: names/params size mismatch");
    }
    if (!(step > 0.0)) throw ConfigError("grad_check: step must be positive");

    GradCheckReport report;
    report.tolerance = tolerance;

    const std::vector<Tensor> analytic = target.gradient();
    if (analytic.size() != target.params.size()) {
        throw ConfigError("grad_check: gradient() returned " + std::to_string(analytic.size()) +
                          " tensors for " + std::to_string(target.params.size()) + " parameters");
    }

    for (size_t p = 0; p < target.params.size(); ++p) {
        Tensor& param = *target.params[p];
        const int64_t n = param.numel();
        std::vector<int64_t> coords;
        if (coordinates_per_param <= 0 || coordinates_per_param >= n) {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            // Deterministic sample without replacement, seeded per parameter.
            SeededRng rng(sample_seed, 0x67ADC0FFu + static_cast<uint64_t>(p));
            std::vector<int64_t> pool(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
            for (int64_t i = 0; i < coordinates_per_param; ++i) {
                const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - i)));
                std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
            }
            coords.assign(pool.begin(), pool.begin() + coordinates_per_param);
            std::sort(coords.begin(), coords.end());
        }

        for (int64_t c : coords) {
            const double original = param[c];
            param[c] = original + step;
            const double f_plus = target.value();
            param[c] = original - step;
            const double f_minus = target.value();
            param[c] = original;

            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double a = analytic[p][c];
            const double denom = std::max({std::abs(a), std::abs(numeric), kDenominatorFloor});
            const double rel = std::abs(a - numeric) / denom;

            GradCheckEntry entry{target.names[p], c, a, numeric, rel, rel < tolerance};
            report.max_rel_error = std::max(report.max_rel_error, rel);
            report.passed = report.passed && entry.pass;
            report.entries.push_back(std::move(entry));
        }
    }
    return report;
}

}  // namespace mdpo
