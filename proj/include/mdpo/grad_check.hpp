// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mdpo/tensor.hpp"

namespace mdpo {

struct GradCheckEntry {
    std::string param;   // parameter name
    int64_t coordinate;  // flat index within the parameter
    double analytic;
    double numeric;
    double rel_error;
    bool pass;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = true;

    const GradCheckEntry* worst() const;
    std::string summary() const;
};

/// A differentiable scalar function of named parameters, described to the
/// checker by two callables over the same parameter storage:
///   value()    -> f(params) evaluated at the current parameter values
///   gradient() -> analytic d f / d params, one tensor per parameter, in order
struct GradCheckTarget {
    std::vector<std::string> names;
    std::vector<Tensor*> params;
    std::function<double()> value;
    std::function<std::vector<Tensor>()> gradient;
};

/// Compares analytic gradients against central finite differences,
/// coordinate by coordinate. `coordinates_per_param` == 0 checks every
/// coordinate; otherwise a deterministic sample of that size is drawn per
/// parameter (every parameter is always represented).
///
/// Relative error uses a symmetric denominator with an absolute floor so
/// near-zero gradients are compared on an absolute scale:
///   |a - n| / max(|a|, |n|, 1e-4)
GradCheckReport grad_check(GradCheckTarget& target, double step = 1e-5, double tolerance = 1e-5,
                           int64_t coordinates_per_param = 0, uint64_t sample_seed = 0);

}  // namespace mdpo
