#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// Each operation records its inputs and a backward rule on the node it
// produces; the recorded graph is the differentiation tape. backward() walks
// the tape once in reverse topological order and accumulates gradients into
// every reachable leaf that asks for them. Tapes are rebuilt on every forward
// pass and confined to one execution context; read-only tensors may be shared
// across contexts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fusionattn {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i > 0) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // persistent on leaves, scratch on interior nodes
    bool requires_grad = false;
    bool is_leaf = true;
    bool backward_ran = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t numel() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> data) {
        return make(std::move(shape), std::move(data), false);
    }

    // Leaf that collects gradient during backward (a trainable parameter or
    // an input under gradient test).
    static Tensor param(Shape shape, std::vector<double> data) {
        return make(std::move(shape), std::move(data), true);
    }

    static Tensor zeros(Shape shape) {
        const std::size_t n = shape_numel(shape);
        return constant(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(Shape shape, double v) {
        const std::size_t n = shape_numel(shape);
        return constant(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return constant({}, {v}); }

    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = true) {
        const std::size_t n = shape_numel(shape);
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> data(n);
        for (auto& v : data) v = dist(rng);
        return make(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<double> data(n);
        for (auto& v : data) v = dist(rng);
        return make(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->numel(); }
    std::size_t rank() const { return node_->shape.size(); }
    bool is_scalar() const { return node_->shape.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }

    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& values_mut() { return node_->value; }

    // Gradient buffer; empty until backward has touched this leaf.
    const std::vector<double>& grad() const { return node_->grad; }

    void zero_grad() {
        node_->grad.assign(node_->value.size(), 0.0);
        node_->backward_ran = false;
    }

    double item() const {
        if (numel() != 1)
            throw ShapeError("item(): tensor of shape " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }

    double at(std::size_t i) const { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const {
        return node_->value[r * node_->shape[1] + c];
    }

    // Same values, no tape attachment.
    Tensor detach() const { return constant(node_->shape, node_->value); }

    detail::NodePtr node() const { return node_; }

private:
    static Tensor make(Shape shape, std::vector<double> data, bool requires_grad) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size())
            throw ShapeError("data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    friend Tensor make_op(Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backward);

    detail::NodePtr node_;
};

// Interior tape node: value plus a backward rule over its recorded inputs.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->is_leaf = false;
    n->requires_grad = false;
    for (const auto& in : inputs) {
        n->parents.push_back(in.node());
        if (in.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) n->backward_fn = std::move(backward);
    Tensor t;
    t.node_ = n;
    return t;
}

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// (m x k) . (k x n) -> (m x n); a rank-1 right operand is treated as a column,
// producing a rank-1 result.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    const bool vec_rhs = (b.rank() == 1);
    if (!vec_rhs && b.rank() != 2)
        throw ShapeError("matmul: right operand must be a matrix or vector, got shape " +
                         shape_str(b.shape()));
    const std::size_t m = a.shape()[0];
    const std::size_t k = a.shape()[1];
    const std::size_t k2 = b.shape()[0];
    const std::size_t n = vec_rhs ? 1 : b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));

    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv.data() + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    Shape out_shape = vec_rhs ? Shape{m} : Shape{m, n};
    return make_op(std::move(out_shape), std::move(out), {a, b},
                   [a, b, m, k, n](detail::Node& node) {
                       const auto& g = node.grad;
                       if (a.requires_grad()) {
                           auto& ga = a.node()->grad;
                           const auto& bv = b.values();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < n; ++j)
                                       s += g[i * n + j] * bv[p * n + j];
                                   ga[i * k + p] += s;
                               }
                       }
                       if (b.requires_grad()) {
                           auto& gb = b.node()->grad;
                           const auto& av = a.values();
                           for (std::size_t p = 0; p < k; ++p)
                               for (std::size_t j = 0; j < n; ++j) {
                                   double s = 0.0;
                                   for (std::size_t i = 0; i < m; ++i)
                                       s += av[i * k + p] * g[i * n + j];
                                   gb[p * n + j] += s;
                               }
                       }
                   });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank2(a, "transpose");
    const std::size_t r = a.shape()[0];
    const std::size_t c = a.shape()[1];
    const auto& av = a.values();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return make_op({c, r}, std::move(out), {a}, [a, r, c](detail::Node& node) {
        if (!a.requires_grad()) return;
        auto& ga = a.node()->grad;
        const auto& g = node.grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

// ---------------------------------------------------------------------------
// Pointwise
// ---------------------------------------------------------------------------

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    return make_op(x.shape(), std::move(out), {x}, [x](detail::Node& node) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < node.value.size(); ++i) {
            const double y = node.value[i];
            gx[i] += node.grad[i] * y * (1.0 - y);
        }
    });
}

inline Tensor tanh_op(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
    return make_op(x.shape(), std::move(out), {x}, [x](detail::Node& node) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < node.value.size(); ++i) {
            const double y = node.value[i];
            gx[i] += node.grad[i] * (1.0 - y * y);
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& node) {
        if (a.requires_grad()) {
            auto& ga = a.node()->grad;
            for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += node.grad[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->grad;
            for (std::size_t i = 0; i < node.grad.size(); ++i) gb[i] += node.grad[i];
        }
    });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "hadamard");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& node) {
        if (a.requires_grad()) {
            auto& ga = a.node()->grad;
            const auto& bv = b.values();
            for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += node.grad[i] * bv[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->grad;
            const auto& av = a.values();
            for (std::size_t i = 0; i < node.grad.size(); ++i) gb[i] += node.grad[i] * av[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    return make_op(x.shape(), std::move(out), {x}, [x, c](detail::Node& node) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i] * c;
    });
}

// Matrix plus a per-column bias: out[i][j] = m[i][j] + bias[j].
inline Tensor add_row_bias(const Tensor& m, const Tensor& bias) {
    detail::require_rank2(m, "add_row_bias");
    if (bias.rank() != 1 || bias.shape()[0] != m.shape()[1])
        throw ShapeError("add_row_bias: bias shape " + shape_str(bias.shape()) +
                         " does not match matrix shape " + shape_str(m.shape()));
    const std::size_t r = m.shape()[0];
    const std::size_t c = m.shape()[1];
    std::vector<double> out(m.values());
    const auto& bv = bias.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
    return make_op(m.shape(), std::move(out), {m, bias}, [m, bias, r, c](detail::Node& node) {
        if (m.requires_grad()) {
            auto& gm = m.node()->grad;
            for (std::size_t i = 0; i < node.grad.size(); ++i) gm[i] += node.grad[i];
        }
        if (bias.requires_grad()) {
            auto& gb = bias.node()->grad;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += node.grad[i * c + j];
        }
    });
}

// Matrix plus a per-row bias: out[i][j] = m[i][j] + bias[i].
inline Tensor add_col_bias(const Tensor& m, const Tensor& bias) {
    detail::require_rank2(m, "add_col_bias");
    if (bias.rank() != 1 || bias.shape()[0] != m.shape()[0])
        throw ShapeError("add_col_bias: bias shape " + shape_str(bias.shape()) +
                         " does not match matrix shape " + shape_str(m.shape()));
    const std::size_t r = m.shape()[0];
    const std::size_t c = m.shape()[1];
    std::vector<double> out(m.values());
    const auto& bv = bias.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[i];
    return make_op(m.shape(), std::move(out), {m, bias}, [m, bias, r, c](detail::Node& node) {
        if (m.requires_grad()) {
            auto& gm = m.node()->grad;
            for (std::size_t i = 0; i < node.grad.size(); ++i) gm[i] += node.grad[i];
        }
        if (bias.requires_grad()) {
            auto& gb = bias.node()->grad;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[i] += node.grad[i * c + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    return make_op(std::move(new_shape), x.values(), {x}, [x](detail::Node& node) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i];
    });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    const std::size_t rank = xs[0].rank();
    if (rank == 0) throw ShapeError("concat: cannot concatenate scalars");
    if (axis >= rank)
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(xs[0].shape()));
    Shape out_shape = xs[0].shape();
    std::size_t axis_total = 0;
    for (const auto& x : xs) {
        if (x.rank() != rank)
            throw ShapeError("concat: rank mismatch " + shape_str(xs[0].shape()) + " vs " +
                             shape_str(x.shape()));
        for (std::size_t d = 0; d < rank; ++d) {
            if (d != axis && x.shape()[d] != out_shape[d])
                throw ShapeError("concat: incompatible shapes " + shape_str(xs[0].shape()) +
                                 " vs " + shape_str(x.shape()) + " along axis " +
                                 std::to_string(axis));
        }
        axis_total += x.shape()[axis];
    }
    out_shape[axis] = axis_total;

    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < rank; ++d) inner *= out_shape[d];

    std::vector<double> out(shape_numel(out_shape));
    const std::size_t out_stride = axis_total * inner;
    std::size_t offset = 0;
    for (const auto& x : xs) {
        const std::size_t len = x.shape()[axis] * inner;
        const auto& xv = x.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(xv.begin() + o * len, xv.begin() + (o + 1) * len,
                      out.begin() + o * out_stride + offset);
        offset += len;
    }
    return make_op(std::move(out_shape), std::move(out), xs,
                   [xs, outer, inner, out_stride](detail::Node& node) {
                       std::size_t offset = 0;
                       for (const auto& x : xs) {
                           const std::size_t len = x.shape().back() * inner /
                                                   (x.rank() >= 1 ? 1 : 1);
                           (void)len;
                           const std::size_t seg = x.numel() / outer;
                           if (x.requires_grad()) {
                               auto& gx = x.node()->grad;
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < seg; ++i)
                                       gx[o * seg + i] += node.grad[o * out_stride + offset + i];
                           }
                           offset += seg;
                       }
                   });
}

// Columns [start, start+len) of a matrix.
inline Tensor col_slice(const Tensor& m, std::size_t start, std::size_t len) {
    detail::require_rank2(m, "col_slice");
    const std::size_t r = m.shape()[0];
    const std::size_t c = m.shape()[1];
    if (start + len > c)
        throw ShapeError("col_slice: columns [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of range for shape " +
                         shape_str(m.shape()));
    std::vector<double> out(r * len);
    const auto& mv = m.values();
    for (std::size_t i = 0; i < r; ++i)
        std::copy(mv.begin() + i * c + start, mv.begin() + i * c + start + len,
                  out.begin() + i * len);
    return make_op({r, len}, std::move(out), {m}, [m, start, len, r, c](detail::Node& node) {
        if (!m.requires_grad()) return;
        auto& gm = m.node()->grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < len; ++j)
                gm[i * c + start + j] += node.grad[i * len + j];
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_op({}, {s}, {x}, [x](detail::Node& node) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += node.grad[0];
    });
}

// Softmax along `axis`, computed with max subtraction. Rejects non-finite
// input.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (x.rank() == 0) throw ShapeError("softmax: scalar input");
    if (axis >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
    for (double v : x.values())
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");

    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t len = s[axis];

    const auto& xv = x.values();
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = xv[base];
            for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double e = std::exp(xv[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
        }
    }
    return make_op(x.shape(), std::move(out), {x},
                   [x, outer, inner, len](detail::Node& node) {
                       if (!x.requires_grad()) return;
                       auto& gx = x.node()->grad;
                       const auto& y = node.value;
                       const auto& g = node.grad;
                       for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * len * inner + in;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < len; ++i)
                                   dot += g[base + i * inner] * y[base + i * inner];
                               for (std::size_t i = 0; i < len; ++i)
                                   gx[base + i * inner] +=
                                       y[base + i * inner] * (g[base + i * inner] - dot);
                           }
                       }
                   });
}

// Per-column mean of an (N x d) matrix -> vector of d.
inline Tensor column_mean(const Tensor& x) {
    detail::require_rank2(x, "column_mean");
    const std::size_t n = x.shape()[0];
    const std::size_t d = x.shape()[1];
    const auto& xv = x.values();
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += xv[i * d + j];
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(n);
    return make_op({d}, std::move(out), {x}, [x, n, d](detail::Node& node) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad;
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += node.grad[j] * inv;
    });
}

// Per-column population standard deviation, smoothed as sqrt(var + eps) so
// the derivative exists at zero variance (N = 1 included).
inline Tensor column_std(const Tensor& x, double eps = 1e-8) {
    detail::require_rank2(x, "column_std");
    const std::size_t n = x.shape()[0];
    const std::size_t d = x.shape()[1];
    const auto& xv = x.values();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += xv[i * d + j];
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[i * d + j] - mean[j];
            out[j] += c * c;
        }
    for (std::size_t j = 0; j < d; ++j)
        out[j] = std::sqrt(out[j] / static_cast<double>(n) + eps);
    return make_op({d}, std::move(out), {x},
                   [x, n, d, mean = std::move(mean)](detail::Node& node) {
                       if (!x.requires_grad()) return;
                       auto& gx = x.node()->grad;
                       const auto& xv = x.values();
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t j = 0; j < d; ++j) {
                           const double coeff = node.grad[j] * inv_n / node.value[j];
                           for (std::size_t i = 0; i < n; ++i)
                               gx[i * d + j] += coeff * (xv[i * d + j] - mean[j]);
                       }
                   });
}

// Column mean and population std of an (N x d) matrix. N = 1 yields a std of
// sqrt(eps) per column.
inline std::pair<Tensor, Tensor> mean_std(const Tensor& x, double eps = 1e-8) {
    detail::require_rank2(x, "mean_std");
    if (x.shape()[0] == 0) throw ShapeError("mean_std: empty input");
    return {column_mean(x), column_std(x, eps)};
}

// ---------------------------------------------------------------------------
// Regularization and loss
// ---------------------------------------------------------------------------

// Inverted dropout; identity when not training. The mask is part of the tape.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw NumericError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) {
        return make_op(x.shape(), x.values(), {x}, [x](detail::Node& node) {
            if (!x.requires_grad()) return;
            auto& gx = x.node()->grad;
            for (std::size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i];
        });
    }
    const double keep = 1.0 - rate;
    const double inv_keep = 1.0 / keep;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> mask(x.numel());
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = (unif(rng) < keep) ? inv_keep : 0.0;
        out[i] = xv[i] * mask[i];
    }
    return make_op(x.shape(), std::move(out), {x},
                   [x, mask = std::move(mask)](detail::Node& node) {
                       if (!x.requires_grad()) return;
                       auto& gx = x.node()->grad;
                       for (std::size_t i = 0; i < node.grad.size(); ++i)
                           gx[i] += node.grad[i] * mask[i];
                   });
}

// Mean negative log-likelihood of per-row class probabilities (B x C),
// clamped at 1e-12 before the log.
inline Tensor nll_from_probs(const Tensor& probs, const std::vector<std::size_t>& labels) {
    detail::require_rank2(probs, "nll_from_probs");
    const std::size_t b = probs.shape()[0];
    const std::size_t c = probs.shape()[1];
    if (labels.size() != b)
        throw ShapeError("nll_from_probs: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
    for (auto l : labels)
        if (l >= c)
            throw std::out_of_range("nll_from_probs: label " + std::to_string(l) +
                                    " out of range for " + std::to_string(c) + " classes");
    constexpr double kFloor = 1e-12;
    const auto& pv = probs.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) loss -= std::log(std::max(pv[i * c + labels[i]], kFloor));
    loss /= static_cast<double>(b);
    return make_op({}, {loss}, {probs}, [probs, labels, b, c](detail::Node& node) {
        if (!probs.requires_grad()) return;
        auto& gp = probs.node()->grad;
        const auto& pv = probs.values();
        const double scale = node.grad[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
            const double p = pv[i * c + labels[i]];
            if (p > kFloor) gp[i * c + labels[i]] -= scale / p;
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Visits every recorded operation once
// in reverse topological order and accumulates gradients into all leaves with
// requires_grad set. Calling twice on the same loss without zero_grad on it
// is an error.
inline void backward(const Tensor& loss) {
    if (!loss.is_scalar())
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw NumericError("backward: loss is detached from the tape (no gradient path)");
    auto root = loss.node();
    if (root->backward_ran)
        throw NumericError("backward: already ran for this loss; reset gradients first");

    // Iterative post-order DFS for the topological order.
    std::vector<detail::NodePtr> topo;
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<detail::NodePtr, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto parent = node->parents[next++];
            if (parent->requires_grad && visited.insert(parent.get()).second)
                stack.emplace_back(parent, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (auto& n : topo) {
        if (n->is_leaf)
            n->ensure_grad();  // persists until zero_grad
        else
            n->grad.assign(n->value.size(), 0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        auto& n = **it;
        if (n.backward_fn) n.backward_fn(n);
    }
    root->backward_ran = true;
}

// Central finite differences of a scalar-valued function, elementwise:
// (f(x + h e_i) - f(x - h e_i)) / (2h).
inline Tensor finite_diff_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-6) {
    std::vector<double> base = x.values();
    std::vector<double> g(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus = base, minus = base;
        plus[i] += h;
        minus[i] -= h;
        const double fp = f(Tensor::constant(x.shape(), std::move(plus))).item();
        const double fm = f(Tensor::constant(x.shape(), std::move(minus))).item();
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::constant(x.shape(), std::move(g));
}

}  // namespace fusionattn
