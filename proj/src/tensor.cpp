// SPDX-License-Identifier: Apache-2.0
#include "mdpo/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mdpo/errors.hpp"

namespace mdpo {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data.size())) {
        throw ShapeError("tensor data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
    data_ = std::move(data);
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, SeededRng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = rng.normal(0.0, stddev);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a 1-element tensor, got shape " +
                         shape_to_string(shape_));
    }
    return data_[0];
}

int64_t Tensor::last_dim() const {
    if (shape_.empty()) throw ShapeError("last_dim() on rank-0 tensor");
    return shape_.back();
}

bool Tensor::all_finite() const noexcept {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace mdpo
