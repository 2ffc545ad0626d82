// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mdpo/tensor.hpp"

namespace mdpo {

class Tape;

/// Handle to a node in a Tape. Cheap to copy; valid for the tape's lifetime.
class Value {
public:
    Value() = default;

    const Tensor& tensor() const;
    double item() const { return tensor().item(); }
    int32_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Value(Tape* tape, int32_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int32_t id_ = -1;
};

/// Dynamic reverse-mode differentiation tape. Nodes are recorded in execution
/// order, which is a topological order by construction; backward() walks the
/// records in reverse and accumulates gradients by summation over paths.
///
/// A tape is a single-threaded object; independent tapes may live on
/// different threads.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const noexcept { return nodes_.size(); }

    /// Registers a leaf. Gradients are only tracked for leaves created with
    /// requires_grad == true; everything else is treated as a constant.
    Value leaf(Tensor value, bool requires_grad);
    Value constant(Tensor value) { return leaf(std::move(value), false); }
    Value constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // --- elementwise ---
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    /// a * x + b, elementwise with scalar coefficients.
    Value affine(Value x, double a, double b);
    Value exp(Value x);
    Value log(Value x);
    Value sigmoid(Value x);
    /// Numerically stable log(sigmoid(x)) == -softplus(-x); no overflow for
    /// |x| <= 700.
    Value log_sigmoid(Value x);
    Value relu(Value x);
    Value gelu(Value x);

    // --- shape / structure ---
    /// Matrix product with optional transposes: op(a) @ op(b).
    Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false);
    /// [R, C] + [C], broadcast over rows.
    Value add_rowwise(Value mat, Value row);
    Value concat_rows(std::span<const Value> parts);
    Value concat_cols(std::span<const Value> parts);
    Value slice_rows(Value x, int64_t begin, int64_t end);
    Value slice_cols(Value x, int64_t begin, int64_t end);
    /// table[ids, :] for a [V, d] table.
    Value embedding(Value table, std::span<const int64_t> ids);

    // --- reductions / normalizations ---
    Value sum(Value x);
    Value mean(Value x);
    Value softmax_last(Value x);
    Value log_softmax_last(Value x);
    /// out[r] = x[r, ids[r]] over the trailing axis.
    Value gather_last(Value x, std::span<const int64_t> ids);
    Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5);

    /// Reverse pass from a scalar root. May be called once per root; gradient
    /// accumulators are reset at each call.
    void backward(Value root);

    bool has_grad(Value v) const;
    /// Gradient of the last backward() root w.r.t. v. Zero tensor if v was
    /// not reached.
    Tensor grad(Value v) const;

private:
    enum class Op : uint8_t {
        Leaf,
        Add,
        Sub,
        Mul,
        Affine,
        Exp,
        Log,
        Sigmoid,
        LogSigmoid,
        Relu,
        Gelu,
        Matmul,
        AddRowwise,
        ConcatRows,
        ConcatCols,
        SliceRows,
        SliceCols,
        Embedding,
        Sum,
        Mean,
        SoftmaxLast,
        LogSoftmaxLast,
        GatherLast,
        LayerNorm,
    };

    struct Node {
        Op op = Op::Leaf;
        std::array<int32_t, 4> in{-1, -1, -1, -1};
        uint8_t n_in = 0;
        bool requires_grad = false;
        Tensor out;
        Tensor grad;      // allocated on demand during backward
        Tensor aux;       // op-specific saved values (e.g. layer-norm stats)
        double a = 0.0;   // affine scale / layer-norm eps
        double b = 0.0;   // affine shift
        bool trans_a = false;
        bool trans_b = false;
        std::vector<int64_t> idx;  // gather / embedding / slice bounds
    };

    Value push(Node node);
    Node& at(Value v);
    const Node& at(Value v) const;
    const Tensor& val(int32_t id) const { return nodes_[static_cast<size_t>(id)].out; }
    Tensor& grad_buffer(int32_t id);
    void backprop_node(Node& node);

    friend class Value;
    std::vector<Node> nodes_;
};

// Free operators so scalar formulas can be written once for both double and
// Value operands.
inline Value operator+(Value a, Value b) { return a.tape()->add(a, b); }
inline Value operator-(Value a, Value b) { return a.tape()->sub(a, b); }
inline Value operator*(double k, Value x) { return x.tape()->affine(x, k, 0.0); }
inline Value operator*(Value x, double k) { return k * x; }
inline Value operator+(Value x, double c) { return x.tape()->affine(x, 1.0, c); }
inline Value operator+(double c, Value x) { return x + c; }
inline Value operator-(Value x, double c) { return x + (-c); }
inline Value operator-(double c, Value x) { return x.tape()->affine(x, -1.0, c); }
inline Value operator-(Value x) { return x.tape()->affine(x, -1.0, 0.0); }
inline Value log_sigmoid(Value x) { return x.tape()->log_sigmoid(x); }

/// Stable scalar softplus: log(1 + e^x) without overflow.
double softplus(double x);
/// Stable scalar log(sigmoid(x)) == -softplus(-x).
double log_sigmoid(double x);

}  // namespace mdpo
