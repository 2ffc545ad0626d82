// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdpo/rng.hpp"

namespace mdpo {

/// Dense row-major tensor of 64-bit floats. Plain value type; participation
/// in a differentiation graph happens through Tape handles, a Tensor on its
/// own is a constant.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double v);
    static Tensor randn(std::vector<int64_t> shape, SeededRng& rng, double stddev = 1.0);

    const std::vector<int64_t>& shape() const noexcept { return shape_; }
    int64_t dim(size_t axis) const { return shape_.at(axis); }
    size_t rank() const noexcept { return shape_.size(); }
    int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::vector<double>& vec() noexcept { return data_; }
    const std::vector<double>& vec() const noexcept { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    /// Value of a 1-element tensor.
    double item() const;

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    /// Rows/cols view of the trailing axis: a [d0, ..., dk] tensor is treated
    /// as [rows, cols] with cols == dk.
    int64_t last_dim() const;
    int64_t rows() const { return numel() / last_dim(); }

    bool all_finite() const noexcept;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

std::string shape_to_string(const std::vector<int64_t>& shape);
int64_t shape_numel(const std::vector<int64_t>& shape);

}  // namespace mdpo
