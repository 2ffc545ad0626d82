// SPDX-License-Identifier: Apache-2.0
#include "mdpo/tape.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "mdpo/errors.hpp"

namespace mdpo {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

void require_rank2(const char* op, const Tensor& t) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got shape " +
                         shape_to_string(t.shape()));
    }
}

}  // namespace

double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double log_sigmoid(double x) { return -softplus(-x); }

const Tensor& Value::tensor() const { return tape_->nodes_[static_cast<size_t>(id_)].out; }

Value Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Value(this, static_cast<int32_t>(nodes_.size() - 1));
}

Tape::Node& Tape::at(Value v) {
    if (v.tape() != this) throw DomainError("value belongs to a different tape");
    return nodes_[static_cast<size_t>(v.id())];
}

const Tape::Node& Tape::at(Value v) const {
    if (v.tape() != this) throw DomainError("value belongs to a different tape");
    return nodes_[static_cast<size_t>(v.id())];
}

Value Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    n.out = std::move(value);
    return push(std::move(n));
}

Value Tape::add(Value a, Value b) {
    const Tensor& ta = at(a).out;
    const Tensor& tb = at(b).out;
    require_same_shape("add", ta, tb);
    Node n;
    n.op = Op::Add;
    n.in = {a.id(), b.id(), -1, -1};
    n.n_in = 2;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    n.out = Tensor(ta.shape());
    const double* pa = ta.data();
    const double* pb = tb.data();
    double* po = n.out.data();
    for (int64_t i = 0, m = ta.numel(); i < m; ++i) po[i] = pa[i] + pb[i];
    return push(std::move(n));
}

Value Tape::sub(Value a, Value b) {
    const Tensor& ta = at(a).out;
    const Tensor& tb = at(b).out;
    require_same_shape("sub", ta, tb);
    Node n;
    n.op = Op::Sub;
    n.in = {a.id(), b.id(), -1, -1};
    n.n_in = 2;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    n.out = Tensor(ta.shape());
    const double* pa = ta.data();
    const double* pb = tb.data();
    double* po = n.out.data();
    for (int64_t i = 0, m = ta.numel(); i < m; ++i) po[i] = pa[i] - pb[i];
    return push(std::move(n));
}

Value Tape::mul(Value a, Value b) {
    const Tensor& ta = at(a).out;
    const Tensor& tb = at(b).out;
    require_same_shape("mul", ta, tb);
    Node n;
    n.op = Op::Mul;
    n.in = {a.id(), b.id(), -1, -1};
    n.n_in = 2;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    n.out = Tensor(ta.shape());
    const double* pa = ta.data();
    const double* pb = tb.data();
    double* po = n.out.data();
    for (int64_t i = 0, m = ta.numel(); i < m; ++i) po[i] = pa[i] * pb[i];
    return push(std::move(n));
}

Value Tape::affine(Value x, double a, double b) {
    const Tensor& tx = at(x).out;
    Node n;
    n.op = Op::Affine;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.a = a;
    n.b = b;
    n.out = Tensor(tx.shape());
    const double* px = tx.data();
    double* po = n.out.data();
    for (int64_t i = 0, m = tx.numel(); i < m; ++i) po[i] = a * px[i] + b;
    return push(std::move(n));
}

namespace {
template <class F>
Tensor map_unary(const Tensor& x, F f) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0, m = x.numel(); i < m; ++i) po[i] = f(px[i]);
    return out;
}
}  // namespace

Value Tape::exp(Value x) {
    Node n;
    n.op = Op::Exp;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = map_unary(at(x).out, [](double v) { return std::exp(v); });
    return push(std::move(n));
}

Value Tape::log(Value x) {
    const Tensor& tx = at(x).out;
    for (int64_t i = 0; i < tx.numel(); ++i) {
        if (!(tx[i] > 0.0)) {
            throw DomainError("log: non-positive input " + std::to_string(tx[i]) + " at index " +
                              std::to_string(i));
        }
    }
    Node n;
    n.op = Op::Log;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = map_unary(tx, [](double v) { return std::log(v); });
    return push(std::move(n));
}

Value Tape::sigmoid(Value x) {
    Node n;
    n.op = Op::Sigmoid;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = map_unary(at(x).out, [](double v) {
        // Evaluate through exp(-|v|) so neither branch overflows.
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
    return push(std::move(n));
}

Value Tape::log_sigmoid(Value x) {
    Node n;
    n.op = Op::LogSigmoid;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = map_unary(at(x).out, [](double v) { return mdpo::log_sigmoid(v); });
    return push(std::move(n));
}

Value Tape::relu(Value x) {
    Node n;
    n.op = Op::Relu;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = map_unary(at(x).out, [](double v) { return v > 0.0 ? v : 0.0; });
    return push(std::move(n));
}

Value Tape::gelu(Value x) {
    Node n;
    n.op = Op::Gelu;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = map_unary(at(x).out,
                      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
    return push(std::move(n));
}

namespace {

// C[m,n] += op(A) @ op(B); kernels picked so the inner loop runs over
// contiguous memory.
void matmul_accum(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                  bool ta, bool tb) {
    if (!ta && !tb) {
        for (int64_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            const double* ai = a + i * k;
            for (int64_t p = 0; p < k; ++p) {
                const double av = ai[p];
                const double* bp = b + p * n;
                for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!ta && tb) {
        for (int64_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                ci[j] += acc;
            }
        }
    } else if (ta && !tb) {
        for (int64_t p = 0; p < k; ++p) {
            const double* ap = a + p * m;
            const double* bp = b + p * n;
            for (int64_t i = 0; i < m; ++i) {
                const double av = ap[i];
                double* ci = c + i * n;
                for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {
        for (int64_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) acc += a[p * m + i] * bj[p];
                ci[j] += acc;
            }
        }
    }
}

}  // namespace

Value Tape::matmul(Value a, Value b, bool trans_a, bool trans_b) {
    const Tensor& ta = at(a).out;
    const Tensor& tb = at(b).out;
    require_rank2("matmul", ta);
    require_rank2("matmul", tb);
    const int64_t m = trans_a ? ta.dim(1) : ta.dim(0);
    const int64_t k = trans_a ? ta.dim(0) : ta.dim(1);
    const int64_t kb = trans_b ? tb.dim(1) : tb.dim(0);
    const int64_t n = trans_b ? tb.dim(0) : tb.dim(1);
    if (k != kb) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(ta.shape()) +
                         (trans_a ? "^T" : "") + " vs " + shape_to_string(tb.shape()) +
                         (trans_b ? "^T" : ""));
    }
    Node node;
    node.op = Op::Matmul;
    node.in = {a.id(), b.id(), -1, -1};
    node.n_in = 2;
    node.requires_grad = at(a).requires_grad || at(b).requires_grad;
    node.trans_a = trans_a;
    node.trans_b = trans_b;
    node.out = Tensor({m, n});
    matmul_accum(ta.data(), tb.data(), node.out.data(), m, k, n, trans_a, trans_b);
    return push(std::move(node));
}

Value Tape::add_rowwise(Value mat, Value row) {
    const Tensor& tm = at(mat).out;
    const Tensor& tr = at(row).out;
    require_rank2("add_rowwise", tm);
    if (tr.rank() != 1 || tr.dim(0) != tm.dim(1)) {
        throw ShapeError("add_rowwise: shape mismatch " + shape_to_string(tm.shape()) + " vs " +
                         shape_to_string(tr.shape()));
    }
    Node n;
    n.op = Op::AddRowwise;
    n.in = {mat.id(), row.id(), -1, -1};
    n.n_in = 2;
    n.requires_grad = at(mat).requires_grad || at(row).requires_grad;
    n.out = Tensor(tm.shape());
    const int64_t rows = tm.dim(0), cols = tm.dim(1);
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = tm.data() + r * cols;
        double* dst = n.out.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) dst[c] = src[c] + tr[c];
    }
    return push(std::move(n));
}

Value Tape::concat_rows(std::span<const Value> parts) {
    if (parts.empty() || parts.size() > 4) {
        throw ShapeError("concat_rows: expected 1..4 parts, got " + std::to_string(parts.size()));
    }
    const int64_t cols = at(parts[0]).out.dim(1);
    int64_t rows = 0;
    for (Value p : parts) {
        require_rank2("concat_rows", at(p).out);
        if (at(p).out.dim(1) != cols) {
            throw ShapeError("concat_rows: column mismatch " +
                             shape_to_string(at(parts[0]).out.shape()) + " vs " +
                             shape_to_string(at(p).out.shape()));
        }
        rows += at(p).out.dim(0);
    }
    Node n;
    n.op = Op::ConcatRows;
    n.n_in = static_cast<uint8_t>(parts.size());
    n.out = Tensor({rows, cols});
    int64_t offset = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
        n.in[i] = parts[i].id();
        n.requires_grad = n.requires_grad || at(parts[i]).requires_grad;
        const Tensor& t = at(parts[i]).out;
        std::memcpy(n.out.data() + offset, t.data(), sizeof(double) * t.numel());
        offset += t.numel();
    }
    return push(std::move(n));
}

Value Tape::concat_cols(std::span<const Value> parts) {
    if (parts.empty() || parts.size() > 4) {
        throw ShapeError("concat_cols: expected 1..4 parts, got " + std::to_string(parts.size()));
    }
    const int64_t rows = at(parts[0]).out.dim(0);
    int64_t cols = 0;
    for (Value p : parts) {
        require_rank2("concat_cols", at(p).out);
        if (at(p).out.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch " +
                             shape_to_string(at(parts[0]).out.shape()) + " vs " +
                             shape_to_string(at(p).out.shape()));
        }
        cols += at(p).out.dim(1);
    }
    Node n;
    n.op = Op::ConcatCols;
    n.n_in = static_cast<uint8_t>(parts.size());
    n.out = Tensor({rows, cols});
    int64_t col_offset = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
        n.in[i] = parts[i].id();
        n.requires_grad = n.requires_grad || at(parts[i]).requires_grad;
        const Tensor& t = at(parts[i]).out;
        const int64_t w = t.dim(1);
        for (int64_t r = 0; r < rows; ++r) {
            std::memcpy(n.out.data() + r * cols + col_offset, t.data() + r * w,
                        sizeof(double) * w);
        }
        col_offset += w;
    }
    return push(std::move(n));
}

Value Tape::slice_rows(Value x, int64_t begin, int64_t end) {
    const Tensor& tx = at(x).out;
    require_rank2("slice_rows", tx);
    if (begin < 0 || end > tx.dim(0) || begin >= end) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for shape " +
                         shape_to_string(tx.shape()));
    }
    Node n;
    n.op = Op::SliceRows;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.idx = {begin, end};
    const int64_t cols = tx.dim(1);
    n.out = Tensor({end - begin, cols});
    std::memcpy(n.out.data(), tx.data() + begin * cols, sizeof(double) * n.out.numel());
    return push(std::move(n));
}

Value Tape::slice_cols(Value x, int64_t begin, int64_t end) {
    const Tensor& tx = at(x).out;
    require_rank2("slice_cols", tx);
    if (begin < 0 || end > tx.dim(1) || begin >= end) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for shape " +
                         shape_to_string(tx.shape()));
    }
    Node n;
    n.op = Op::SliceCols;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.idx = {begin, end};
    const int64_t rows = tx.dim(0), cols = tx.dim(1), w = end - begin;
    n.out = Tensor({rows, w});
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(n.out.data() + r * w, tx.data() + r * cols + begin, sizeof(double) * w);
    }
    return push(std::move(n));
}

Value Tape::embedding(Value table, std::span<const int64_t> ids) {
    const Tensor& tt = at(table).out;
    require_rank2("embedding", tt);
    const int64_t vocab = tt.dim(0), d = tt.dim(1);
    Node n;
    n.op = Op::Embedding;
    n.in = {table.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(table).requires_grad;
    n.idx.assign(ids.begin(), ids.end());
    n.out = Tensor({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab) {
            throw DomainError("embedding: id " + std::to_string(ids[i]) +
                              " out of range for table " + shape_to_string(tt.shape()));
        }
        std::memcpy(n.out.data() + static_cast<int64_t>(i) * d, tt.data() + ids[i] * d,
                    sizeof(double) * d);
    }
    return push(std::move(n));
}

Value Tape::sum(Value x) {
    const Tensor& tx = at(x).out;
    Node n;
    n.op = Op::Sum;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    double acc = 0.0;
    for (int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
    n.out = Tensor::scalar(acc);
    return push(std::move(n));
}

Value Tape::mean(Value x) {
    const Tensor& tx = at(x).out;
    if (tx.numel() == 0) throw DomainError("mean: empty input");
    Node n;
    n.op = Op::Mean;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    double acc = 0.0;
    for (int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
    n.out = Tensor::scalar(acc / static_cast<double>(tx.numel()));
    return push(std::move(n));
}

Value Tape::softmax_last(Value x) {
    const Tensor& tx = at(x).out;
    if (tx.rank() == 0 || tx.last_dim() == 0) {
        throw DomainError("softmax: empty trailing axis on shape " + shape_to_string(tx.shape()));
    }
    Node n;
    n.op = Op::SoftmaxLast;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = Tensor(tx.shape());
    const int64_t rows = tx.rows(), cols = tx.last_dim();
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = tx.data() + r * cols;
        double* dst = n.out.data() + r * cols;
        double mx = src[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, src[c]);
        double denom = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            dst[c] = std::exp(src[c] - mx);
            denom += dst[c];
        }
        const double inv = 1.0 / denom;
        for (int64_t c = 0; c < cols; ++c) dst[c] *= inv;
    }
    return push(std::move(n));
}

Value Tape::log_softmax_last(Value x) {
    const Tensor& tx = at(x).out;
    if (tx.rank() == 0 || tx.last_dim() == 0) {
        throw DomainError("log_softmax: empty trailing axis on shape " +
                          shape_to_string(tx.shape()));
    }
    Node n;
    n.op = Op::LogSoftmaxLast;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.out = Tensor(tx.shape());
    const int64_t rows = tx.rows(), cols = tx.last_dim();
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = tx.data() + r * cols;
        double* dst = n.out.data() + r * cols;
        double mx = src[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, src[c]);
        double denom = 0.0;
        for (int64_t c = 0; c < cols; ++c) denom += std::exp(src[c] - mx);
        const double log_denom = mx + std::log(denom);
        for (int64_t c = 0; c < cols; ++c) dst[c] = src[c] - log_denom;
    }
    return push(std::move(n));
}

Value Tape::gather_last(Value x, std::span<const int64_t> ids) {
    const Tensor& tx = at(x).out;
    const int64_t rows = tx.rows(), cols = tx.last_dim();
    if (static_cast<int64_t>(ids.size()) != rows) {
        throw ShapeError("gather_last: " + std::to_string(ids.size()) + " indices for " +
                         std::to_string(rows) + " rows of shape " + shape_to_string(tx.shape()));
    }
    Node n;
    n.op = Op::GatherLast;
    n.in = {x.id(), -1, -1, -1};
    n.n_in = 1;
    n.requires_grad = at(x).requires_grad;
    n.idx.assign(ids.begin(), ids.end());
    n.out = Tensor({rows});
    for (int64_t r = 0; r < rows; ++r) {
        if (ids[r] < 0 || ids[r] >= cols) {
            throw DomainError("gather_last: index " + std::to_string(ids[r]) +
                              " out of range [0, " + std::to_string(cols) + ")");
        }
        n.out[r] = tx[r * cols + ids[r]];
    }
    return push(std::move(n));
}

Value Tape::layer_norm(Value x, Value gamma, Value beta, double eps) {
    const Tensor& tx = at(x).out;
    const Tensor& tg = at(gamma).out;
    const Tensor& tb = at(beta).out;
    require_rank2("layer_norm", tx);
    const int64_t rows = tx.dim(0), d = tx.dim(1);
    if (tg.rank() != 1 || tg.dim(0) != d || tb.rank() != 1 || tb.dim(0) != d) {
        throw ShapeError("layer_norm: affine params " + shape_to_string(tg.shape()) + "/" +
                         shape_to_string(tb.shape()) + " do not match feature size of " +
                         shape_to_string(tx.shape()));
    }
    Node n;
    n.op = Op::LayerNorm;
    n.in = {x.id(), gamma.id(), beta.id(), -1};
    n.n_in = 3;
    n.requires_grad =
        at(x).requires_grad || at(gamma).requires_grad || at(beta).requires_grad;
    n.a = eps;
    n.out = Tensor(tx.shape());
    n.aux = Tensor({rows, 2});  // per-row mean and inverse stddev
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = tx.data() + r * d;
        double* dst = n.out.data() + r * d;
        double mean = 0.0;
        for (int64_t c = 0; c < d; ++c) mean += src[c];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            const double diff = src[c] - mean;
            var += diff * diff;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        n.aux[r * 2] = mean;
        n.aux[r * 2 + 1] = inv;
        for (int64_t c = 0; c < d; ++c) dst[c] = (src[c] - mean) * inv * tg[c] + tb[c];
    }
    return push(std::move(n));
}

bool Tape::has_grad(Value v) const { return at(v).grad.numel() != 0; }

Tensor Tape::grad(Value v) const {
    const Node& n = at(v);
    if (n.grad.numel() != 0) return n.grad;
    return Tensor(n.out.shape());
}

Tensor& Tape::grad_buffer(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) n.grad = Tensor(n.out.shape());
    return n.grad;
}

void Tape::backward(Value root) {
    Node& root_node = at(root);
    if (root_node.out.numel() != 1) {
        throw DomainError("backward: root must be scalar, got shape " +
                          shape_to_string(root_node.out.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    if (!root_node.requires_grad) return;  // nothing reachable carries gradients
    grad_buffer(root.id())[0] = 1.0;
    for (int32_t i = root.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad || n.grad.numel() == 0) continue;
        backprop_node(n);
    }
}

void Tape::backprop_node(Node& node) {
    auto needs = [&](int slot) {
        return node.in[slot] >= 0 &&
               nodes_[static_cast<size_t>(node.in[slot])].requires_grad;
    };
    const Tensor& g = node.grad;
    switch (node.op) {
        case Op::Leaf:
            break;
        case Op::Add: {
            for (int slot = 0; slot < 2; ++slot) {
                if (!needs(slot)) continue;
                Tensor& d = grad_buffer(node.in[slot]);
                for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
            }
            break;
        }
        case Op::Sub: {
            if (needs(0)) {
                Tensor& d = grad_buffer(node.in[0]);
                for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
            }
            if (needs(1)) {
                Tensor& d = grad_buffer(node.in[1]);
                for (int64_t i = 0; i < g.numel(); ++i) d[i] -= g[i];
            }
            break;
        }
        case Op::Mul: {
            const Tensor& a = val(node.in[0]);
            const Tensor& b = val(node.in[1]);
            if (needs(0)) {
                Tensor& d = grad_buffer(node.in[0]);
                for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * b[i];
            }
            if (needs(1)) {
                Tensor& d = grad_buffer(node.in[1]);
                for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * a[i];
            }
            break;
        }
        case Op::Affine: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            for (int64_t i = 0; i < g.numel(); ++i) d[i] += node.a * g[i];
            break;
        }
        case Op::Exp: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * node.out[i];
            break;
        }
        case Op::Log: {
            if (!needs(0)) break;
            const Tensor& x = val(node.in[0]);
            Tensor& d = grad_buffer(node.in[0]);
            for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] / x[i];
            break;
        }
        case Op::Sigmoid: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            for (int64_t i = 0; i < g.numel(); ++i) {
                d[i] += g[i] * node.out[i] * (1.0 - node.out[i]);
            }
            break;
        }
        case Op::LogSigmoid: {
            if (!needs(0)) break;
            const Tensor& x = val(node.in[0]);
            Tensor& d = grad_buffer(node.in[0]);
            for (int64_t i = 0; i < g.numel(); ++i) {
                // d/dx log(sigmoid(x)) = sigmoid(-x)
                const double v = -x[i];
                const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                          : std::exp(v) / (1.0 + std::exp(v));
                d[i] += g[i] * s;
            }
            break;
        }
        case Op::Relu: {
            if (!needs(0)) break;
            const Tensor& x = val(node.in[0]);
            Tensor& d = grad_buffer(node.in[0]);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (x[i] > 0.0) d[i] += g[i];
            }
            break;
        }
        case Op::Gelu: {
            if (!needs(0)) break;
            const Tensor& x = val(node.in[0]);
            Tensor& d = grad_buffer(node.in[0]);
            for (int64_t i = 0; i < g.numel(); ++i) {
                const double v = x[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                d[i] += g[i] * (cdf + v * pdf);
            }
            break;
        }
        case Op::Matmul: {
            const Tensor& a = val(node.in[0]);
            const Tensor& b = val(node.in[1]);
            const bool ta = node.trans_a, tb = node.trans_b;
            const int64_t m = node.out.dim(0), n_cols = node.out.dim(1);
            const int64_t k = ta ? a.dim(0) : a.dim(1);
            if (needs(0)) {
                Tensor& d = grad_buffer(node.in[0]);
                if (!ta) {
                    // dA = dC @ op(B)^T
                    matmul_accum(g.data(), b.data(), d.data(), m, n_cols, k, false, !tb);
                } else {
                    // A stored [k, m]: dA = op(B) @ dC^T
                    matmul_accum(b.data(), g.data(), d.data(), k, n_cols, m, tb, true);
                }
            }
            if (needs(1)) {
                Tensor& d = grad_buffer(node.in[1]);
                if (!tb) {
                    // dB = op(A)^T @ dC
                    matmul_accum(a.data(), g.data(), d.data(), k, m, n_cols, !ta, false);
                } else {
                    // B stored [n, k]: dB = dC^T @ op(A)
                    matmul_accum(g.data(), a.data(), d.data(), n_cols, m, k, true, ta);
                }
            }
            break;
        }
        case Op::AddRowwise: {
            const int64_t rows = node.out.dim(0), cols = node.out.dim(1);
            if (needs(0)) {
                Tensor& d = grad_buffer(node.in[0]);
                for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
            }
            if (needs(1)) {
                Tensor& d = grad_buffer(node.in[1]);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gr = g.data() + r * cols;
                    for (int64_t c = 0; c < cols; ++c) d[c] += gr[c];
                }
            }
            break;
        }
        case Op::ConcatRows: {
            int64_t offset = 0;
            for (int slot = 0; slot < node.n_in; ++slot) {
                const Tensor& part = val(node.in[slot]);
                if (needs(slot)) {
                    Tensor& d = grad_buffer(node.in[slot]);
                    for (int64_t i = 0; i < part.numel(); ++i) d[i] += g[offset + i];
                }
                offset += part.numel();
            }
            break;
        }
        case Op::ConcatCols: {
            const int64_t rows = node.out.dim(0), total = node.out.dim(1);
            int64_t col_offset = 0;
            for (int slot = 0; slot < node.n_in; ++slot) {
                const Tensor& part = val(node.in[slot]);
                const int64_t w = part.dim(1);
                if (needs(slot)) {
                    Tensor& d = grad_buffer(node.in[slot]);
                    for (int64_t r = 0; r < rows; ++r) {
                        const double* gr = g.data() + r * total + col_offset;
                        double* dr = d.data() + r * w;
                        for (int64_t c = 0; c < w; ++c) dr[c] += gr[c];
                    }
                }
                col_offset += w;
            }
            break;
        }
        case Op::SliceRows: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const int64_t cols = node.out.dim(1);
            const int64_t begin = node.idx[0];
            for (int64_t i = 0; i < g.numel(); ++i) d[begin * cols + i] += g[i];
            break;
        }
        case Op::SliceCols: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const int64_t src_cols = val(node.in[0]).dim(1);
            const int64_t rows = node.out.dim(0), w = node.out.dim(1);
            const int64_t begin = node.idx[0];
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * w;
                double* dr = d.data() + r * src_cols + begin;
                for (int64_t c = 0; c < w; ++c) dr[c] += gr[c];
            }
            break;
        }
        case Op::Embedding: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const int64_t dcol = node.out.dim(1);
            for (size_t i = 0; i < node.idx.size(); ++i) {
                const double* gr = g.data() + static_cast<int64_t>(i) * dcol;
                double* dr = d.data() + node.idx[i] * dcol;
                for (int64_t c = 0; c < dcol; ++c) dr[c] += gr[c];
            }
            break;
        }
        case Op::Sum: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const double gv = g[0];
            for (int64_t i = 0; i < d.numel(); ++i) d[i] += gv;
            break;
        }
        case Op::Mean: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const double gv = g[0] / static_cast<double>(d.numel());
            for (int64_t i = 0; i < d.numel(); ++i) d[i] += gv;
            break;
        }
        case Op::SoftmaxLast: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const int64_t rows = node.out.rows(), cols = node.out.last_dim();
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = node.out.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double* dr = d.data() + r * cols;
                double dot = 0.0;
                for (int64_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
                for (int64_t c = 0; c < cols; ++c) dr[c] += y[c] * (gr[c] - dot);
            }
            break;
        }
        case Op::LogSoftmaxLast: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const int64_t rows = node.out.rows(), cols = node.out.last_dim();
            for (int64_t r = 0; r < rows; ++r) {
                const double* lp = node.out.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double* dr = d.data() + r * cols;
                double gsum = 0.0;
                for (int64_t c = 0; c < cols; ++c) gsum += gr[c];
                for (int64_t c = 0; c < cols; ++c) dr[c] += gr[c] - std::exp(lp[c]) * gsum;
            }
            break;
        }
        case Op::GatherLast: {
            if (!needs(0)) break;
            Tensor& d = grad_buffer(node.in[0]);
            const int64_t cols = val(node.in[0]).last_dim();
            for (size_t r = 0; r < node.idx.size(); ++r) {
                d[static_cast<int64_t>(r) * cols + node.idx[r]] += g[static_cast<int64_t>(r)];
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& x = val(node.in[0]);
            const Tensor& gamma = val(node.in[1]);
            const int64_t rows = x.dim(0), d = x.dim(1);
            const double inv_d = 1.0 / static_cast<double>(d);
            Tensor* dx = needs(0) ? &grad_buffer(node.in[0]) : nullptr;
            Tensor* dgamma = needs(1) ? &grad_buffer(node.in[1]) : nullptr;
            Tensor* dbeta = needs(2) ? &grad_buffer(node.in[2]) : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const double mean = node.aux[r * 2];
                const double inv = node.aux[r * 2 + 1];
                const double* xr = x.data() + r * d;
                const double* gr = g.data() + r * d;
                if (dgamma || dbeta) {
                    for (int64_t c = 0; c < d; ++c) {
                        const double xhat = (xr[c] - mean) * inv;
                        if (dgamma) (*dgamma)[c] += gr[c] * xhat;
                        if (dbeta) (*dbeta)[c] += gr[c];
                    }
                }
                if (dx) {
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int64_t c = 0; c < d; ++c) {
                        const double xhat = (xr[c] - mean) * inv;
                        const double dxhat = gr[c] * gamma[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    double* dr = dx->data() + r * d;
                    for (int64_t c = 0; c < d; ++c) {
                        const double xhat = (xr[c] - mean) * inv;
                        const double dxhat = gr[c] * gamma[c];
                        dr[c] += inv * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
            break;
        }
    }
}

}  // namespace mdpo
