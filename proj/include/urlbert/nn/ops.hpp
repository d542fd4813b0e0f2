// Differentiable operations over nn::Tensor.
//
// Every op validates shapes up front (ShapeError naming the op) and defines
// an exact reverse-mode gradient. Dense products go through Eigen maps over
// the row-major buffers; everything else is plain loops.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "urlbert/nn/tensor.hpp"

namespace urlbert::nn {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const MatR<T>>;
template <class T>
using MMap = Eigen::Map<MatR<T>>;
template <class T>
using CStrided = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MStrided = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;

inline bool is_suffix(const Shape& whole, const Shape& part) {
    if (part.size() > whole.size()) return false;
    return std::equal(part.rbegin(), part.rend(), whole.rbegin());
}

template <class T>
Node<T>& parent(Node<T>& n, std::size_t i) {
    return *n.parents[i];
}

// (outer, axis, inner) decomposition of a shape around one axis.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace detail

template <class T>
Tensor<T> constant(Shape shape, std::vector<T> data) {
    return Tensor<T>(std::move(shape), std::move(data), false);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
    return Tensor<T>::from_op(std::move(shape), x.values(), {x}, [](Node<T>& out) {
        auto& p = detail::parent(out, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i) p.grad[i] += out.grad[i];
    });
}

/// C = A·B with A of shape (..., K) and B of shape (K, N).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
        shape_fail("matmul", a.shape(), b.shape());
    }
    const auto k = b.dim(0), n = b.dim(1), m = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n);
    detail::MMap<T>(out.data(), m, n).noalias() =
        detail::CMap<T>(a.data().data(), m, k) * detail::CMap<T>(b.data().data(), k, n);
    return Tensor<T>::from_op(std::move(out_shape), std::move(out), {a, b},
                              [m, k, n](Node<T>& o) {
        auto& pa = detail::parent(o, 0);
        auto& pb = detail::parent(o, 1);
        detail::CMap<T> dc(o.grad.data(), m, n);
        if (pa.requires_grad) {
            pa.ensure_grad();
            detail::MMap<T>(pa.grad.data(), m, k).noalias() +=
                dc * detail::CMap<T>(pb.value.data(), k, n).transpose();
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            detail::MMap<T>(pb.grad.data(), k, n).noalias() +=
                detail::CMap<T>(pa.value.data(), m, k).transpose() * dc;
        }
    });
}

/// C = A·Bᵀ with A of shape (..., K) and B of shape (N, K).
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(1)) {
        shape_fail("matmul_nt", a.shape(), b.shape());
    }
    const auto k = b.dim(1), n = b.dim(0), m = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n);
    detail::MMap<T>(out.data(), m, n).noalias() =
        detail::CMap<T>(a.data().data(), m, k) *
        detail::CMap<T>(b.data().data(), n, k).transpose();
    return Tensor<T>::from_op(std::move(out_shape), std::move(out), {a, b},
                              [m, k, n](Node<T>& o) {
        auto& pa = detail::parent(o, 0);
        auto& pb = detail::parent(o, 1);
        detail::CMap<T> dc(o.grad.data(), m, n);
        if (pa.requires_grad) {
            pa.ensure_grad();
            detail::MMap<T>(pa.grad.data(), m, k).noalias() +=
                dc * detail::CMap<T>(pb.value.data(), n, k);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            detail::MMap<T>(pb.grad.data(), n, k).noalias() +=
                dc.transpose() * detail::CMap<T>(pa.value.data(), m, k);
        }
    });
}

namespace detail {

// Elementwise binary op where b either matches a or broadcasts over a's
// leading axes (b's shape is a suffix of a's).
template <class T, class Fwd, class Da, class Db>
Tensor<T> broadcast_binary(std::string_view name, const Tensor<T>& a, const Tensor<T>& b,
                           Fwd fwd, Da da, Db db) {
    if (!is_suffix(a.shape(), b.shape())) shape_fail(name, a.shape(), b.shape());
    const std::size_t nb = b.size(), na = a.size();
    std::vector<T> out(na);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < na; ++i) out[i] = fwd(av[i], bv[i % nb]);
    return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [na, nb, da, db](Node<T>& o) {
        auto& pa = parent(o, 0);
        auto& pb = parent(o, 1);
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < na; ++i)
                pa.grad[i] += o.grad[i] * da(pa.value[i], pb.value[i % nb]);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < na; ++i)
                pb.grad[i % nb] += o.grad[i] * db(pa.value[i], pb.value[i % nb]);
        }
    });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
        [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
        [](T, T) { return T{-1}; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    std::vector<T> out(x.values());
    for (auto& v : out) v *= s;
    return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [s](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += s * o.grad[i];
    });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T inv_sqrt2 = T(0.70710678118654752440);
    std::vector<T> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [inv_sqrt2](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T inv_sqrt_2pi = T(0.39894228040143267794);
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const T v = p.value[i];
            const T d = T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) +
                        v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            p.grad[i] += o.grad[i] * d;
        }
    });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
    return Tensor<T>::from_op(x.shape(), out, {x}, [out](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            p.grad[i] += o.grad[i] * (T(1) - out[i] * out[i]);
    });
}

/// Layer normalization over the last axis with gain g and bias b.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b,
                     T eps = T(1e-12)) {
    if (x.rank() < 1 || g.rank() != 1 || b.rank() != 1 || g.dim(0) != x.shape().back() ||
        b.dim(0) != x.shape().back()) {
        shape_fail("layer_norm", x.shape(), g.shape());
    }
    const std::size_t h = g.dim(0), rows = x.size() / h;
    std::vector<T> out(x.size()), xhat(x.size()), inv_std(rows);
    const auto xv = x.data();
    const auto gv = g.data();
    const auto bv = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * h;
        T mean = 0;
        for (std::size_t j = 0; j < h; ++j) mean += row[j];
        mean /= T(h);
        T var = 0;
        for (std::size_t j = 0; j < h; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= T(h);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < h; ++j) {
            const T xh = (row[j] - mean) * is;
            xhat[r * h + j] = xh;
            out[r * h + j] = xh * gv[j] + bv[j];
        }
    }
    return Tensor<T>::from_op(x.shape(), std::move(out), {x, g, b},
                              [h, rows, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](Node<T>& o) {
        auto& px = detail::parent(o, 0);
        auto& pg = detail::parent(o, 1);
        auto& pb = detail::parent(o, 2);
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* dy = o.grad.data() + r * h;
            const T* xh = xhat.data() + r * h;
            if (pg.requires_grad)
                for (std::size_t j = 0; j < h; ++j) pg.grad[j] += dy[j] * xh[j];
            if (pb.requires_grad)
                for (std::size_t j = 0; j < h; ++j) pb.grad[j] += dy[j];
            if (!px.requires_grad) continue;
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < h; ++j) {
                const T d = dy[j] * pg.value[j];
                mean_d += d;
                mean_dx += d * xh[j];
            }
            mean_d /= T(h);
            mean_dx /= T(h);
            for (std::size_t j = 0; j < h; ++j) {
                const T d = dy[j] * pg.value[j];
                px.grad[r * h + j] += inv_std[r] * (d - mean_d - xh[j] * mean_dx);
            }
        }
    });
}

/// Softmax over the last axis. -inf entries receive exactly zero mass.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.rank() < 1) shape_fail("softmax", x.shape(), "has no axis");
    const std::size_t c = x.shape().back(), rows = x.size() / c;
    std::vector<T> out(x.size());
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * c;
        T* y = out.data() + r * c;
        const T mx = *std::max_element(in, in + c);
        T sum = 0;
        for (std::size_t j = 0; j < c; ++j) {
            y[j] = std::exp(in[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < c; ++j) y[j] /= sum;
    }
    return Tensor<T>::from_op(x.shape(), out, {x}, [c, rows, out](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = out.data() + r * c;
            const T* dy = o.grad.data() + r * c;
            T dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < c; ++j) p.grad[r * c + j] += y[j] * (dy[j] - dot);
        }
    });
}

/// Keep-mask for inverted dropout: 1 with probability 1-p, else 0.
template <class T>
std::vector<T> dropout_mask(std::size_t n, double p, std::uint64_t seed) {
    std::vector<T> mask(n, T{1});
    if (p <= 0.0) return mask;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& m : mask) m = u(rng) < p ? T{0} : T{1};
    return mask;
}

/// Inverted dropout, x * mask / (1-p). p = 0 returns x itself.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t seed) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
    if (p == 0.0) return x;
    auto mask = dropout_mask<T>(x.size(), p, seed);
    const T s = T(1) / T(1 - p);
    for (auto& m : mask) m *= s;
    return mul(x, constant<T>(x.shape(), std::move(mask)));
}

/// Rows of `table` (V, H) gathered by ids; result shape = prefix + (H).
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, Shape prefix) {
    if (table.rank() != 2) shape_fail("embedding", table.shape(), "must be (vocab, hidden)");
    if (numel(prefix) != ids.size()) shape_fail("embedding", prefix, "does not match id count");
    const std::size_t v = table.dim(0), h = table.dim(1);
    std::vector<T> out(ids.size() * h);
    std::vector<int> idx(ids.begin(), ids.end());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
            throw std::out_of_range("embedding: id " + std::to_string(idx[i]) +
                                    " outside vocabulary of " + std::to_string(v));
        }
        std::copy_n(table.data().data() + idx[i] * h, h, out.data() + i * h);
    }
    prefix.push_back(h);
    return Tensor<T>::from_op(std::move(prefix), std::move(out), {table},
                              [h, idx = std::move(idx)](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < h; ++j) p.grad[idx[i] * h + j] += o.grad[i * h + j];
    });
}

/// Mean cross-entropy over rows of logits (..., C) whose target is not
/// ignore_index. Throws when every row is ignored.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        int ignore_index = -1) {
    if (logits.rank() < 1) shape_fail("cross_entropy", logits.shape(), "has no class axis");
    const std::size_t c = logits.shape().back(), rows = logits.size() / c;
    if (targets.size() != rows) {
        shape_fail("cross_entropy", logits.shape(), Shape{targets.size()});
    }
    std::vector<T> prob(logits.size(), T{0});
    std::vector<int> tgt(targets.begin(), targets.end());
    std::size_t count = 0;
    T total = 0;
    const auto lv = logits.data();
    for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == ignore_index) continue;
        if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= c) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(tgt[r]) +
                                    " outside " + std::to_string(c) + " classes");
        }
        const T* in = lv.data() + r * c;
        const T mx = *std::max_element(in, in + c);
        T sum = 0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
        const T lse = mx + std::log(sum);
        total += lse - in[tgt[r]];
        for (std::size_t j = 0; j < c; ++j) prob[r * c + j] = std::exp(in[j] - lse);
        ++count;
    }
    if (count == 0) throw std::invalid_argument("cross_entropy: no supervised positions");
    const T inv = T(1) / T(count);
    return Tensor<T>::from_op(Shape{}, {total * inv}, {logits},
                              [c, rows, inv, ignore_index, prob = std::move(prob),
                               tgt = std::move(tgt)](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = o.grad[0] * inv;
        for (std::size_t r = 0; r < rows; ++r) {
            if (tgt[r] == ignore_index) continue;
            for (std::size_t j = 0; j < c; ++j) p.grad[r * c + j] += g * prob[r * c + j];
            p.grad[r * c + tgt[r]] -= g;
        }
    });
}

/// Concatenation along the last axis.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape pl(p.shape().begin(), p.shape().end() - 1);
        if (pl != lead) shape_fail("concat", parts[0].shape(), p.shape());
        widths.push_back(p.shape().back());
        total += p.shape().back();
    }
    const std::size_t rows = numel(lead);
    std::vector<T> out(rows * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + off);
        off += widths[k];
    }
    Shape shape = lead;
    shape.push_back(total);
    return Tensor<T>::from_op(std::move(shape), std::move(out), parts,
                              [rows, total, widths](Node<T>& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto& p = detail::parent(o, k);
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j)
                        p.grad[r * widths[k] + j] += o.grad[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

/// Stacks equally shaped tensors along a new axis.
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("stack: no inputs");
    const Shape& base = parts[0].shape();
    if (axis > base.size()) shape_fail("stack", base, "axis out of range");
    for (const auto& p : parts)
        if (p.shape() != base) shape_fail("stack", base, p.shape());
    Shape shape = base;
    shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), parts.size());
    const auto s = detail::split_axis(shape, axis);
    const std::size_t k = parts.size();
    std::vector<T> out(numel(shape));
    for (std::size_t i = 0; i < k; ++i) {
        const auto pv = parts[i].data();
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(pv.data() + o * s.inner, s.inner, out.data() + (o * k + i) * s.inner);
    }
    return Tensor<T>::from_op(std::move(shape), std::move(out), parts, [s, k](Node<T>& o) {
        for (std::size_t i = 0; i < k; ++i) {
            auto& p = detail::parent(o, i);
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t a = 0; a < s.outer; ++a)
                for (std::size_t j = 0; j < s.inner; ++j)
                    p.grad[a * s.inner + j] += o.grad[(a * k + i) * s.inner + j];
        }
    });
}

enum class Reduce { sum, mean, max, min };

/// Reduction over one axis (the axis is removed).
template <class T>
Tensor<T> reduce(const Tensor<T>& x, std::size_t axis, Reduce kind) {
    if (axis >= x.rank()) shape_fail("reduce", x.shape(), "axis out of range");
    if (x.dim(axis) == 0) shape_fail("reduce", x.shape(), "reduces an empty axis");
    const auto s = detail::split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<T> out(s.outer * s.inner);
    std::vector<std::size_t> arg(kind == Reduce::max || kind == Reduce::min ? out.size() : 0);
    const auto xv = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
            const std::size_t base = o * s.extent * s.inner + j;
            T acc = xv[base];
            std::size_t best = 0;
            for (std::size_t a = 1; a < s.extent; ++a) {
                const T v = xv[base + a * s.inner];
                switch (kind) {
                    case Reduce::sum:
                    case Reduce::mean: acc += v; break;
                    case Reduce::max:
                        if (v > acc) { acc = v; best = a; }
                        break;
                    case Reduce::min:
                        if (v < acc) { acc = v; best = a; }
                        break;
                }
            }
            if (kind == Reduce::mean) acc /= T(s.extent);
            out[o * s.inner + j] = acc;
            if (!arg.empty()) arg[o * s.inner + j] = best;
        }
    }
    return Tensor<T>::from_op(std::move(shape), std::move(out), {x},
                              [s, kind, arg = std::move(arg)](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T w = kind == Reduce::mean ? T(1) / T(s.extent) : T(1);
        for (std::size_t a = 0; a < s.outer; ++a) {
            for (std::size_t j = 0; j < s.inner; ++j) {
                const T g = o.grad[a * s.inner + j];
                const std::size_t base = a * s.extent * s.inner + j;
                if (arg.empty()) {
                    for (std::size_t e = 0; e < s.extent; ++e) p.grad[base + e * s.inner] += g * w;
                } else {
                    p.grad[base + arg[a * s.inner + j] * s.inner] += g;
                }
            }
        }
    });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    return Tensor<T>::from_op(Shape{}, {acc}, {x}, [](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (auto& g : p.grad) g += o.grad[0];
    });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), T(1) / T(x.size()));
}

/// Divides each row (last axis) by its l2 norm. Zero rows are rejected.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
    if (x.rank() < 1) shape_fail("l2_normalize", x.shape(), "has no axis");
    const std::size_t h = x.shape().back(), rows = x.size() / h;
    std::vector<T> out(x.size()), norms(rows);
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (std::size_t j = 0; j < h; ++j) ss += xv[r * h + j] * xv[r * h + j];
        if (!(ss > T(0))) {
            throw std::invalid_argument("l2_normalize: row " + std::to_string(r) + " has zero norm");
        }
        norms[r] = std::sqrt(ss);
        for (std::size_t j = 0; j < h; ++j) out[r * h + j] = xv[r * h + j] / norms[r];
    }
    return Tensor<T>::from_op(x.shape(), out, {x},
                              [h, rows, out, norms = std::move(norms)](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < h; ++j) dot += out[r * h + j] * o.grad[r * h + j];
            for (std::size_t j = 0; j < h; ++j)
                p.grad[r * h + j] += (o.grad[r * h + j] - out[r * h + j] * dot) / norms[r];
        }
    });
}

/// Slice at `index` along `axis`; the axis is removed.
template <class T>
Tensor<T> select(const Tensor<T>& x, std::size_t axis, std::size_t index) {
    if (axis >= x.rank()) shape_fail("select", x.shape(), "axis out of range");
    if (index >= x.dim(axis)) shape_fail("select", x.shape(), "index out of range");
    const auto s = detail::split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<T> out(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(x.data().data() + (o * s.extent + index) * s.inner, s.inner,
                    out.data() + o * s.inner);
    return Tensor<T>::from_op(std::move(shape), std::move(out), {x}, [s, index](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t a = 0; a < s.outer; ++a)
            for (std::size_t j = 0; j < s.inner; ++j)
                p.grad[(a * s.extent + index) * s.inner + j] += o.grad[a * s.inner + j];
    });
}

/// Rows of x viewed as (N, last) picked by index; result (M, last).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    if (x.rank() < 1) shape_fail("gather_rows", x.shape(), "has no axis");
    const std::size_t h = x.shape().back(), n = x.size() / h;
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<T> out(idx.size() * h);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) shape_fail("gather_rows", x.shape(), "row index out of range");
        std::copy_n(x.data().data() + idx[i] * h, h, out.data() + i * h);
    }
    Shape shape{idx.size(), h};
    return Tensor<T>::from_op(std::move(shape), std::move(out), {x},
                              [h, idx = std::move(idx)](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < h; ++j) p.grad[idx[i] * h + j] += o.grad[i * h + j];
    });
}

/// out[b, :] = Σ_k w[b, k] · x[b, k, :] for x (B, K, H); w is (B, K) or (K).
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& x, const Tensor<T>& w) {
    if (x.rank() != 3) shape_fail("weighted_sum", x.shape(), "must be (batch, k, hidden)");
    const std::size_t bsz = x.dim(0), k = x.dim(1), h = x.dim(2);
    const bool shared = w.rank() == 1;
    if ((shared && w.dim(0) != k) ||
        (!shared && (w.rank() != 2 || w.dim(0) != bsz || w.dim(1) != k))) {
        shape_fail("weighted_sum", x.shape(), w.shape());
    }
    std::vector<T> out(bsz * h, T{0});
    const auto xv = x.data();
    const auto wv = w.data();
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t i = 0; i < k; ++i) {
            const T wi = wv[shared ? i : b * k + i];
            for (std::size_t j = 0; j < h; ++j) out[b * h + j] += wi * xv[(b * k + i) * h + j];
        }
    return Tensor<T>::from_op(Shape{bsz, h}, std::move(out), {x, w},
                              [bsz, k, h, shared](Node<T>& o) {
        auto& px = detail::parent(o, 0);
        auto& pw = detail::parent(o, 1);
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t wi = shared ? i : b * k + i;
                T dw = 0;
                for (std::size_t j = 0; j < h; ++j) {
                    const T g = o.grad[b * h + j];
                    if (px.requires_grad) px.grad[(b * k + i) * h + j] += g * pw.value[wi];
                    dw += g * px.value[(b * k + i) * h + j];
                }
                if (pw.requires_grad) pw.grad[wi] += dw;
            }
    });
}

/// Multiplies each position of x (B, L, H) by a constant per-position factor
/// (B, L), e.g. an attention mask.
template <class T>
Tensor<T> scale_positions(const Tensor<T>& x, std::span<const T> factors) {
    if (x.rank() != 3 || factors.size() != x.dim(0) * x.dim(1)) {
        shape_fail("scale_positions", x.shape(), Shape{factors.size()});
    }
    const std::size_t h = x.dim(2);
    std::vector<T> f(factors.begin(), factors.end());
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * f[i / h];
    return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [h, f = std::move(f)](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * f[i / h];
    });
}

/// Multi-head scaled dot-product attention over q, k, v of shape (B, L, H).
/// Keys where mask == 0 receive zero weight.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const T> mask, std::size_t heads) {
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
        shape_fail("attention", q.shape(), k.shape());
    }
    const std::size_t bsz = q.dim(0), len = q.dim(1), hid = q.dim(2);
    if (heads == 0 || hid % heads != 0) shape_fail("attention", q.shape(), "hidden not divisible by heads");
    if (mask.size() != bsz * len) shape_fail("attention", q.shape(), Shape{mask.size()});
    const std::size_t d = hid / heads;
    const T sc = T(1) / std::sqrt(T(d));
    std::vector<T> keep(mask.begin(), mask.end());
    std::vector<T> probs(bsz * heads * len * len, T{0});
    std::vector<T> out(q.size(), T{0});
    using detail::CStrided;
    using detail::MStrided;
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(hid));
    detail::MatR<T> s(len, len);
    for (std::size_t b = 0; b < bsz; ++b) {
        const T* kb = keep.data() + b * len;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * len * hid + h * d;
            CStrided<T> qh(q.data().data() + off, len, d, stride);
            CStrided<T> khm(k.data().data() + off, len, d, stride);
            CStrided<T> vh(v.data().data() + off, len, d, stride);
            s.noalias() = qh * khm.transpose();
            detail::MMap<T> p(probs.data() + (b * heads + h) * len * len, len, len);
            for (std::size_t i = 0; i < len; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < len; ++j)
                    if (kb[j] != T{0}) mx = std::max(mx, s(i, j) * sc);
                T sum = 0;
                for (std::size_t j = 0; j < len; ++j) {
                    const T e = kb[j] != T{0} ? std::exp(s(i, j) * sc - mx) : T{0};
                    p(i, j) = e;
                    sum += e;
                }
                if (sum > T{0})
                    for (std::size_t j = 0; j < len; ++j) p(i, j) /= sum;
            }
            MStrided<T>(out.data() + off, len, d, stride).noalias() = p * vh;
        }
    }
    return Tensor<T>::from_op(q.shape(), std::move(out), {q, k, v},
                              [bsz, len, hid, heads, d, sc,
                               probs = std::move(probs)](Node<T>& o) {
        auto& pq = detail::parent(o, 0);
        auto& pk = detail::parent(o, 1);
        auto& pv = detail::parent(o, 2);
        if (pq.requires_grad) pq.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(hid));
        detail::MatR<T> dp(len, len), ds(len, len);
        for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = b * len * hid + h * d;
                detail::CMap<T> p(probs.data() + (b * heads + h) * len * len, len, len);
                detail::CStrided<T> dout(o.grad.data() + off, len, d, stride);
                detail::CStrided<T> qh(pq.value.data() + off, len, d, stride);
                detail::CStrided<T> khm(pk.value.data() + off, len, d, stride);
                detail::CStrided<T> vh(pv.value.data() + off, len, d, stride);
                if (pv.requires_grad) {
                    detail::MStrided<T>(pv.grad.data() + off, len, d, stride).noalias() +=
                        p.transpose() * dout;
                }
                if (!pq.requires_grad && !pk.requires_grad) continue;
                dp.noalias() = dout * vh.transpose();
                for (std::size_t i = 0; i < len; ++i) {
                    T dot = 0;
                    for (std::size_t j = 0; j < len; ++j) dot += dp(i, j) * p(i, j);
                    for (std::size_t j = 0; j < len; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * sc;
                }
                if (pq.requires_grad) {
                    detail::MStrided<T>(pq.grad.data() + off, len, d, stride).noalias() += ds * khm;
                }
                if (pk.requires_grad) {
                    detail::MStrided<T>(pk.grad.data() + off, len, d, stride).noalias() +=
                        ds.transpose() * qh;
                }
            }
        }
    });
}

/// Sliding windows of width `width` (odd) centred on each position of
/// x (B, L, C), zero padded at both ends; result (B, L, width*C).
template <class T>
Tensor<T> unfold_same(const Tensor<T>& x, std::size_t width) {
    if (x.rank() != 3) shape_fail("unfold_same", x.shape(), "must be (batch, len, channels)");
    if (width == 0 || width % 2 == 0) shape_fail("unfold_same", x.shape(), "needs an odd window");
    const std::size_t bsz = x.dim(0), len = x.dim(1), c = x.dim(2);
    const auto half = static_cast<std::ptrdiff_t>(width / 2);
    std::vector<T> out(bsz * len * width * c, T{0});
    const auto xv = x.data();
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t t = 0; t < len; ++t)
            for (std::size_t w = 0; w < width; ++w) {
                const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(w) - half;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                std::copy_n(xv.data() + (b * len + static_cast<std::size_t>(src)) * c, c,
                            out.data() + ((b * len + t) * width + w) * c);
            }
    return Tensor<T>::from_op(Shape{bsz, len, width * c}, std::move(out), {x},
                              [bsz, len, c, width, half](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t t = 0; t < len; ++t)
                for (std::size_t w = 0; w < width; ++w) {
                    const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(w) - half;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                    for (std::size_t j = 0; j < c; ++j)
                        p.grad[(b * len + static_cast<std::size_t>(src)) * c + j] +=
                            o.grad[((b * len + t) * width + w) * c + j];
                }
    });
}

/// Max over the time axis of x (B, L, F) restricted to positions with
/// mask != 0; result (B, F). A row with no unmasked position is an error.
template <class T>
Tensor<T> masked_max_time(const Tensor<T>& x, std::span<const T> mask) {
    if (x.rank() != 3 || mask.size() != x.dim(0) * x.dim(1)) {
        shape_fail("masked_max_time", x.shape(), Shape{mask.size()});
    }
    const std::size_t bsz = x.dim(0), len = x.dim(1), f = x.dim(2);
    std::vector<T> out(bsz * f);
    std::vector<std::size_t> arg(bsz * f);
    for (std::size_t b = 0; b < bsz; ++b) {
        bool any = false;
        for (std::size_t t = 0; t < len; ++t) {
            if (mask[b * len + t] == T{0}) continue;
            for (std::size_t j = 0; j < f; ++j) {
                const T v = x.data()[(b * len + t) * f + j];
                if (!any || v > out[b * f + j]) {
                    out[b * f + j] = v;
                    arg[b * f + j] = t;
                }
            }
            any = true;
        }
        if (!any) {
            throw std::invalid_argument("masked_max_time: sequence " + std::to_string(b) +
                                        " has no unmasked position");
        }
    }
    return Tensor<T>::from_op(Shape{bsz, f}, std::move(out), {x},
                              [len, f, arg = std::move(arg)](Node<T>& o) {
        auto& p = detail::parent(o, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < arg.size(); ++i) {
            const std::size_t b = i / f, j = i % f;
            p.grad[(b * len + arg[i]) * f + j] += o.grad[i];
        }
    });
}

/// Row-mean of Σ_j p_j (log p_j − log q_j) for distributions p, q (N, C).
/// q is floored at 1e-12 and 0·log 0 is taken as 0.
template <class T>
Tensor<T> kl_rows(const Tensor<T>& p, const Tensor<T>& q) {
    if (p.rank() < 1 || p.shape() != q.shape()) shape_fail("kl_rows", p.shape(), q.shape());
    const std::size_t c = p.shape().back(), rows = p.size() / c;
    const T floor = T(1e-12);
    T total = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T pi = p.data()[i], qi = q.data()[i];
        if (pi < T{0} || qi < T{0}) throw std::invalid_argument("kl_rows: negative probability");
        if (pi > T{0}) total += pi * (std::log(pi) - std::log(std::max(qi, floor)));
    }
    const T inv = T(1) / T(rows);
    return Tensor<T>::from_op(Shape{}, {total * inv}, {p, q}, [inv, floor](Node<T>& o) {
        auto& pp = detail::parent(o, 0);
        auto& pq = detail::parent(o, 1);
        const T g = o.grad[0] * inv;
        if (pp.requires_grad) {
            pp.ensure_grad();
            for (std::size_t i = 0; i < pp.value.size(); ++i) {
                const T pi = std::max(pp.value[i], floor);
                pp.grad[i] += g * (std::log(pi) - std::log(std::max(pq.value[i], floor)) + T(1));
            }
        }
        if (pq.requires_grad) {
            pq.ensure_grad();
            for (std::size_t i = 0; i < pq.value.size(); ++i) {
                if (pq.value[i] > floor) pq.grad[i] -= g * pp.value[i] / pq.value[i];
            }
        }
    });
}

}  // namespace urlbert::nn
