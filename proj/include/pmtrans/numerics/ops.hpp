#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include "pmtrans/errors.hpp"
#include "pmtrans/numerics/tape.hpp"

// Differentiable ops over Tape values. Each op computes its forward value,
// then records a closure that pushes the output gradient into its parents.
namespace pmtrans::ops {

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
    if (v.value().rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(v.shape()));
    }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] · b[k,n]
inline Var matmul(Var a, Var b) {
    using namespace detail;
    require_same_tape(a, b, "matmul");
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor out(Shape{m, n});
    Map(out.data.data(), m, n).noalias() = MapC(a.value().data.data(), m, k) * MapC(b.value().data.data(), k, n);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
        MapC g(t.grad(self).data(), m, n);
        if (t.requires_grad(ia)) {
            Map(t.grad_mut(ia).data(), m, k).noalias() += g * MapC(t.value(ib).data.data(), k, n).transpose();
        }
        if (t.requires_grad(ib)) {
            Map(t.grad_mut(ib).data(), k, n).noalias() += MapC(t.value(ia).data.data(), m, k).transpose() * g;
        }
    }, "matmul");
}

inline Var transpose(Var a) {
    using namespace detail;
    require_rank(a, 2, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{n, m});
    Map(out.data.data(), n, m) = MapC(a.value().data.data(), m, n).transpose();
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& t, std::size_t self) {
        Map(t.grad_mut(ia).data(), m, n) += MapC(t.grad(self).data(), n, m).transpose();
    }, "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
    detail::require_same_tape(a, b, "add");
    detail::require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        for (auto p : {ia, ib}) {
            if (!t.requires_grad(p)) continue;
            auto gp = t.grad_mut(p);
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
        }
    }, "add");
}

inline Var sub(Var a, Var b) {
    detail::require_same_tape(a, b, "sub");
    detail::require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto gp = t.grad_mut(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto gp = t.grad_mut(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] -= g[i];
        }
    }, "sub");
}

inline Var mul(Var a, Var b) {
    detail::require_same_tape(a, b, "mul");
    detail::require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto gp = t.grad_mut(ia);
            const auto& bv = t.value(ib).data;
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            auto gp = t.grad_mut(ib);
            const auto& av = t.value(ia).data;
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * av[i];
        }
    }, "mul");
}

inline Var scale(Var a, float c) {
    Tensor out = a.value();
    for (auto& v : out.data) v *= c;
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, c](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto gp = t.grad_mut(ia);
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += c * g[i];
    }, "scale");
}

/// x[m,n] + bias[n], bias broadcast over rows.
inline Var add_bias(Var x, Var bias) {
    detail::require_same_tape(x, bias, "add_bias");
    detail::require_rank(x, 2, "add_bias");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (bias.size() != n) {
        throw DimensionError("add_bias: bias of shape " + shape_str(bias.shape()) + " for rows of width " +
                             std::to_string(n));
    }
    Tensor out = x.value();
    const auto& b = bias.value().data;
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += b[c];
    const std::size_t ix = x.id(), ib = bias.id();
    return x.tape().record(std::move(out), {ix, ib}, [ix, ib, m, n](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ix)) {
            auto gx = t.grad_mut(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto gb = t.grad_mut(ib);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
    }, "add_bias");
}

/// x[B*T, D] + table[T, D], the table repeated for every group of T rows.
inline Var add_tiled(Var x, Var table) {
    detail::require_same_tape(x, table, "add_tiled");
    detail::require_rank(x, 2, "add_tiled");
    detail::require_rank(table, 2, "add_tiled");
    const std::size_t rows = x.shape()[0], d = x.shape()[1], period = table.shape()[0];
    if (table.shape()[1] != d || period == 0 || rows % period != 0) {
        throw DimensionError("add_tiled: cannot tile " + shape_str(table.shape()) + " over " + shape_str(x.shape()));
    }
    Tensor out = x.value();
    const auto& tb = table.value().data;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] += tb[(r % period) * d + c];
    const std::size_t ix = x.id(), it = table.id();
    return x.tape().record(std::move(out), {ix, it}, [ix, it, rows, d, period](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ix)) {
            auto gx = t.grad_mut(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(it)) {
            auto gt = t.grad_mut(it);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < d; ++c) gt[(r % period) * d + c] += g[r * d + c];
        }
    }, "add_tiled");
}

/// GELU, tanh approximation.
inline Var gelu(Var x) {
    constexpr float k0 = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float k1 = 0.044715f;
    Tensor out = x.value();
    for (auto& v : out.data) {
        float u = k0 * (v + k1 * v * v * v);
        v = 0.5f * v * (1.0f + std::tanh(u));
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad_mut(ix);
        const auto& xv = t.value(ix).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            float v = xv[i];
            float u = k0 * (v + k1 * v * v * v);
            float th = std::tanh(u);
            float du = k0 * (1.0f + 3.0f * k1 * v * v);
            gx[i] += g[i] * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du);
        }
    }, "gelu");
}

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Row-wise layer normalization of x[m,n] with affine gain/shift of length n.
inline Var layer_norm(Var x, Var gain, Var shift, float eps = 1e-5f) {
    detail::require_rank(x, 2, "layer_norm");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (gain.size() != n || shift.size() != n) throw DimensionError("layer_norm: affine parameters do not match width");
    Tensor out(Shape{m, n});
    std::vector<float> xhat(m * n), inv_std(m);
    const auto& xv = x.value().data;
    const auto& gv = gain.value().data;
    const auto& sv = shift.value().data;
    for (std::size_t r = 0; r < m; ++r) {
        const float* row = xv.data() + r * n;
        float mean = 0.0f;
        for (std::size_t c = 0; c < n; ++c) mean += row[c];
        mean /= static_cast<float>(n);
        float var = 0.0f;
        for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<float>(n);
        float is = 1.0f / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < n; ++c) {
            float h = (row[c] - mean) * is;
            xhat[r * n + c] = h;
            out.data[r * n + c] = h * gv[c] + sv[c];
        }
    }
    const std::size_t ix = x.id(), ig = gain.id(), ish = shift.id();
    return x.tape().record(std::move(out), {ix, ig, ish},
        [ix, ig, ish, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
            auto g = t.grad(self);
            const auto& gv = t.value(ig).data;
            if (t.requires_grad(ig)) {
                auto gg = t.grad_mut(ig);
                for (std::size_t i = 0; i < m * n; ++i) gg[i % n] += g[i] * xhat[i];
            }
            if (t.requires_grad(ish)) {
                auto gs = t.grad_mut(ish);
                for (std::size_t i = 0; i < m * n; ++i) gs[i % n] += g[i];
            }
            if (t.requires_grad(ix)) {
                auto gx = t.grad_mut(ix);
                std::vector<float> dh(n);
                for (std::size_t r = 0; r < m; ++r) {
                    float mean_dh = 0.0f, mean_dh_h = 0.0f;
                    for (std::size_t c = 0; c < n; ++c) {
                        dh[c] = g[r * n + c] * gv[c];
                        mean_dh += dh[c];
                        mean_dh_h += dh[c] * xhat[r * n + c];
                    }
                    mean_dh /= static_cast<float>(n);
                    mean_dh_h /= static_cast<float>(n);
                    for (std::size_t c = 0; c < n; ++c) {
                        gx[r * n + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dh_h);
                    }
                }
            }
        }, "layer_norm");
}

namespace detail {

struct AxisLayout {
    std::size_t outer, extent, inner;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    AxisLayout l{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
    return l;
}

}  // namespace detail

/// Softmax along `axis`, max-subtracted.
inline Var softmax(Var x, std::size_t axis) {
    const auto l = detail::axis_layout(x.shape(), axis);
    Tensor out(x.shape());
    const auto& xv = x.value().data;
    for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t i = 0; i < l.inner; ++i) {
            const std::size_t base = o * l.extent * l.inner + i;
            float mx = xv[base];
            for (std::size_t k = 1; k < l.extent; ++k) mx = std::max(mx, xv[base + k * l.inner]);
            float z = 0.0f;
            for (std::size_t k = 0; k < l.extent; ++k) {
                float e = std::exp(xv[base + k * l.inner] - mx);
                out.data[base + k * l.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < l.extent; ++k) out.data[base + k * l.inner] /= z;
        }
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, l](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const auto& y = t.value(self).data;
        auto gx = t.grad_mut(ix);
        for (std::size_t o = 0; o < l.outer; ++o) {
            for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t base = o * l.extent * l.inner + i;
                float dot = 0.0f;
                for (std::size_t k = 0; k < l.extent; ++k) dot += g[base + k * l.inner] * y[base + k * l.inner];
                for (std::size_t k = 0; k < l.extent; ++k) {
                    const std::size_t j = base + k * l.inner;
                    gx[j] += y[j] * (g[j] - dot);
                }
            }
        }
    }, "softmax");
}

// ---------------------------------------------------------------------------
// Losses and reductions

namespace detail {

inline void check_distribution_rows(const Tensor& target, std::size_t rows, std::size_t width) {
    if (target.size() != rows * width) {
        throw DimensionError("cross_entropy: target shape " + shape_str(target.shape) + " does not match logits");
    }
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
            float v = target.data[r * width + c];
            if (v < 0.0f || !std::isfinite(v)) {
                throw ContractError("cross_entropy: target row " + std::to_string(r) + " has a negative entry");
            }
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-5) {
            throw ContractError("cross_entropy: target row " + std::to_string(r) + " sums to " + std::to_string(s));
        }
    }
}

}  // namespace detail

/// Per-row cross entropy -sum_c target[r,c] * log_softmax(logits[r])_c.
/// logits[B,K], target[B,K] probability rows → [B].
inline Var cross_entropy_rows(Var logits, const Tensor& target) {
    detail::require_rank(logits, 2, "cross_entropy_rows");
    const std::size_t b = logits.shape()[0], k = logits.shape()[1];
    detail::check_distribution_rows(target, b, k);
    Tensor out(Shape{b});
    std::vector<float> probs(b * k);
    const auto& lv = logits.value().data;
    for (std::size_t r = 0; r < b; ++r) {
        const float* row = lv.data() + r * k;
        float mx = *std::max_element(row, row + k);
        float z = 0.0f;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
        float lse = mx + std::log(z);
        float ce = 0.0f;
        for (std::size_t c = 0; c < k; ++c) {
            probs[r * k + c] = std::exp(row[c] - lse);
            float tc = target.data[r * k + c];
            if (tc > 0.0f) ce -= tc * (row[c] - lse);
        }
        out.data[r] = std::max(ce, 0.0f);
    }
    const std::size_t il = logits.id();
    return logits.tape().record(std::move(out), {il},
        [il, b, k, probs = std::move(probs), tgt = target.data](Tape& t, std::size_t self) {
            auto g = t.grad(self);
            auto gl = t.grad_mut(il);
            for (std::size_t r = 0; r < b; ++r)
                for (std::size_t c = 0; c < k; ++c) gl[r * k + c] += g[r] * (probs[r * k + c] - tgt[r * k + c]);
        }, "cross_entropy");
}

/// Scalar cross entropy of a single logit vector against a probability vector.
inline Var cross_entropy(Var logits, const Tensor& target) {
    const std::size_t k = logits.size();
    Tape& t = logits.tape();
    const std::size_t il = logits.id();
    // Reshape to one row without copying semantics on the caller side.
    Var row = t.record(Tensor(Shape{1, k}, logits.value().data), {il}, [il](Tape& tp, std::size_t self) {
        auto g = tp.grad(self);
        auto gl = tp.grad_mut(il);
        for (std::size_t i = 0; i < g.size(); ++i) gl[i] += g[i];
    }, "reshape");
    Var ce = cross_entropy_rows(row, Tensor(Shape{1, target.size()}, target.data));
    const std::size_t ic = ce.id();
    return t.record(Tensor::scalar(ce.value()[0]), {ic}, [ic](Tape& tp, std::size_t self) {
        tp.grad_mut(ic)[0] += tp.grad(self)[0];
    }, "reshape");
}

inline Var sum(Var x) {
    float s = 0.0f;
    for (float v : x.value().data) s += v;
    const std::size_t ix = x.id();
    return x.tape().record(Tensor::scalar(s), {ix}, [ix](Tape& t, std::size_t self) {
        float g = t.grad(self)[0];
        for (auto& v : t.grad_mut(ix)) v += g;
    }, "sum");
}

inline Var mean(Var x) { return scale(sum(x), 1.0f / static_cast<float>(x.size())); }

/// sum_i w_i x_i / divisor with constant weights.
inline Var weighted_sum(Var x, std::span<const float> weights, float divisor = 1.0f) {
    if (weights.size() != x.size()) throw DimensionError("weighted_sum: weight count does not match input");
    if (!(divisor > 0.0f)) throw ContractError("weighted_sum: divisor must be positive");
    float s = 0.0f;
    for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x.value()[i];
    const std::size_t ix = x.id();
    std::vector<float> w(weights.begin(), weights.end());
    return x.tape().record(Tensor::scalar(s / divisor), {ix}, [ix, w = std::move(w), divisor](Tape& t, std::size_t self) {
        float g = t.grad(self)[0] / divisor;
        auto gx = t.grad_mut(ix);
        for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i];
    }, "weighted_sum");
}

// ---------------------------------------------------------------------------
// Similarity

inline constexpr float kNormFloor = 1e-8f;

/// Pairwise cosine similarity between rows: a[B,D], c[M,D] → [B,M].
inline Var cosine_matrix(Var a, Var c) {
    detail::require_same_tape(a, c, "cosine_matrix");
    detail::require_rank(a, 2, "cosine_matrix");
    detail::require_rank(c, 2, "cosine_matrix");
    const std::size_t b = a.shape()[0], m = c.shape()[0], d = a.shape()[1];
    if (c.shape()[1] != d) throw DimensionError("cosine_matrix: feature widths differ");
    const auto& av = a.value().data;
    const auto& cv = c.value().data;
    auto norms = [d](const std::vector<float>& v, std::size_t rows) {
        std::vector<float> n(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            float s = 0.0f;
            for (std::size_t k = 0; k < d; ++k) s += v[r * d + k] * v[r * d + k];
            n[r] = std::sqrt(s);
            if (!(n[r] > kNormFloor)) throw DegenerateInputError("cosine similarity of a zero-norm vector");
        }
        return n;
    };
    std::vector<float> na = norms(av, b), nc = norms(cv, m);
    Tensor out(Shape{b, m});
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            float dot = 0.0f;
            for (std::size_t k = 0; k < d; ++k) dot += av[i * d + k] * cv[j * d + k];
            out.data[i * m + j] = std::clamp(dot / (na[i] * nc[j]), -1.0f, 1.0f);
        }
    }
    const std::size_t ia = a.id(), ic = c.id();
    return a.tape().record(std::move(out), {ia, ic},
        [ia, ic, b, m, d, na = std::move(na), nc = std::move(nc)](Tape& t, std::size_t self) {
            auto g = t.grad(self);
            const auto& s = t.value(self).data;
            const auto& av = t.value(ia).data;
            const auto& cv = t.value(ic).data;
            const bool ga = t.requires_grad(ia), gc = t.requires_grad(ic);
            std::span<float> gav = ga ? t.grad_mut(ia) : std::span<float>{};
            std::span<float> gcv = gc ? t.grad_mut(ic) : std::span<float>{};
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    float gij = g[i * m + j];
                    if (gij == 0.0f) continue;
                    float sij = s[i * m + j];
                    float inv = 1.0f / (na[i] * nc[j]);
                    for (std::size_t k = 0; k < d; ++k) {
                        if (ga) gav[i * d + k] += gij * (cv[j * d + k] * inv - sij * av[i * d + k] / (na[i] * na[i]));
                        if (gc) gcv[j * d + k] += gij * (av[i * d + k] * inv - sij * cv[j * d + k] / (nc[j] * nc[j]));
                    }
                }
            }
        }, "cosine_matrix");
}

/// Cosine similarity of two vectors as a scalar.
inline Var cosine_similarity(Var u, Var v) {
    if (u.size() != v.size()) throw DimensionError("cosine_similarity: length mismatch");
    Tape& t = u.tape();
    auto as_row = [&t](Var x) {
        const std::size_t ix = x.id();
        return t.record(Tensor(Shape{1, x.size()}, x.value().data), {ix}, [ix](Tape& tp, std::size_t self) {
            auto g = tp.grad(self);
            auto gx = tp.grad_mut(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }, "reshape");
    };
    return sum(cosine_matrix(as_row(u), as_row(v)));
}

// ---------------------------------------------------------------------------
// Sequence plumbing for the encoder. Sequences of B items with T tokens each
// are stored as [B*T, D] matrices.

/// out[r] = lam[r]·a[r] + (1 - lam[r])·b[r], lam constant per row.
inline Var mix_rows(Var a, Var b, std::span<const float> lam) {
    detail::require_same_tape(a, b, "mix_rows");
    detail::require_same_shape(a, b, "mix_rows");
    detail::require_rank(a, 2, "mix_rows");
    const std::size_t rows = a.shape()[0], d = a.shape()[1];
    if (lam.size() != rows) throw DimensionError("mix_rows: need one weight per row");
    Tensor out(a.shape());
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    for (std::size_t r = 0; r < rows; ++r) {
        const float l = lam[r];
        for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = l * av[r * d + c] + (1.0f - l) * bv[r * d + c];
    }
    const std::size_t ia = a.id(), ib = b.id();
    std::vector<float> w(lam.begin(), lam.end());
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib, rows, d, w = std::move(w)](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto ga = t.grad_mut(ia);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += w[r] * g[r * d + c];
        }
        if (t.requires_grad(ib)) {
            auto gb = t.grad_mut(ib);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < d; ++c) gb[r * d + c] += (1.0f - w[r]) * g[r * d + c];
        }
    }, "mix_rows");
}

/// Insert `token[1,D]` in front of each group of n rows: [B*n,D] → [B*(n+1),D].
inline Var prepend_token(Var x, Var token, std::size_t groups) {
    detail::require_same_tape(x, token, "prepend_token");
    detail::require_rank(x, 2, "prepend_token");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    if (groups == 0 || rows % groups != 0 || token.size() != d) throw DimensionError("prepend_token: bad shapes");
    const std::size_t n = rows / groups, t_len = n + 1;
    Tensor out(Shape{groups * t_len, d});
    const auto& xv = x.value().data;
    const auto& tv = token.value().data;
    for (std::size_t g = 0; g < groups; ++g) {
        std::copy(tv.begin(), tv.end(), out.data.begin() + static_cast<std::ptrdiff_t>(g * t_len * d));
        std::copy(xv.begin() + static_cast<std::ptrdiff_t>(g * n * d), xv.begin() + static_cast<std::ptrdiff_t>((g + 1) * n * d),
                  out.data.begin() + static_cast<std::ptrdiff_t>((g * t_len + 1) * d));
    }
    const std::size_t ix = x.id(), it = token.id();
    return x.tape().record(std::move(out), {ix, it}, [ix, it, groups, n, t_len, d](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ix)) {
            auto gx = t.grad_mut(ix);
            for (std::size_t b = 0; b < groups; ++b)
                for (std::size_t i = 0; i < n * d; ++i) gx[b * n * d + i] += g[(b * t_len + 1) * d + i];
        }
        if (t.requires_grad(it)) {
            auto gt = t.grad_mut(it);
            for (std::size_t b = 0; b < groups; ++b)
                for (std::size_t c = 0; c < d; ++c) gt[c] += g[b * t_len * d + c];
        }
    }, "prepend_token");
}

/// Row `offset` of every group of `period` rows: [B*T,D] → [B,D].
inline Var take_rows(Var x, std::size_t period, std::size_t offset) {
    detail::require_rank(x, 2, "take_rows");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    if (period == 0 || rows % period != 0 || offset >= period) throw DimensionError("take_rows: bad period");
    const std::size_t groups = rows / period;
    Tensor out(Shape{groups, d});
    for (std::size_t b = 0; b < groups; ++b)
        for (std::size_t c = 0; c < d; ++c) out.data[b * d + c] = x.value().data[(b * period + offset) * d + c];
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, groups, period, offset, d](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad_mut(ix);
        for (std::size_t b = 0; b < groups; ++b)
            for (std::size_t c = 0; c < d; ++c) gx[(b * period + offset) * d + c] += g[b * d + c];
    }, "take_rows");
}

/// Rows [skip, period) of every group of `period` rows: [B*T,D] → [B*(T-skip),D].
inline Var drop_rows(Var x, std::size_t period, std::size_t skip) {
    detail::require_rank(x, 2, "drop_rows");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    if (period == 0 || rows % period != 0 || skip >= period) throw DimensionError("drop_rows: bad period");
    if (skip == 0) return x;
    const std::size_t groups = rows / period, keep = period - skip;
    Tensor out(Shape{groups * keep, d});
    for (std::size_t b = 0; b < groups; ++b)
        std::copy_n(x.value().data.begin() + static_cast<std::ptrdiff_t>((b * period + skip) * d), keep * d,
                    out.data.begin() + static_cast<std::ptrdiff_t>(b * keep * d));
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, groups, period, skip, keep, d](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad_mut(ix);
        for (std::size_t b = 0; b < groups; ++b)
            for (std::size_t i = 0; i < keep * d; ++i) gx[(b * period + skip) * d + i] += g[b * keep * d + i];
    }, "drop_rows");
}

/// Mean of every group of `period` rows: [B*T,D] → [B,D].
inline Var mean_rows(Var x, std::size_t period) {
    detail::require_rank(x, 2, "mean_rows");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    if (period == 0 || rows % period != 0) throw DimensionError("mean_rows: bad period");
    const std::size_t groups = rows / period;
    const float inv = 1.0f / static_cast<float>(period);
    Tensor out(Shape{groups, d});
    for (std::size_t b = 0; b < groups; ++b) {
        for (std::size_t c = 0; c < d; ++c) {
            float s = 0.0f;
            for (std::size_t r = 0; r < period; ++r) s += x.value().data[(b * period + r) * d + c];
            out.data[b * d + c] = s * inv;
        }
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, groups, period, d, inv](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad_mut(ix);
        for (std::size_t b = 0; b < groups; ++b)
            for (std::size_t r = 0; r < period; ++r)
                for (std::size_t c = 0; c < d; ++c) gx[(b * period + r) * d + c] += g[b * d + c] * inv;
    }, "mean_rows");
}

/// Multi-head scaled dot-product self-attention over packed projections.
/// qkv[B*T, 3D] holds queries, keys and values side by side. Returns the
/// context [B*T, D]; the post-softmax weights [B, H, T, T] are written to
/// `probs_out` when given.
inline Var self_attention(Var qkv, std::size_t batch, std::size_t tokens, std::size_t heads,
                          Tensor* probs_out = nullptr) {
    detail::require_rank(qkv, 2, "self_attention");
    const std::size_t rows = qkv.shape()[0], w3 = qkv.shape()[1];
    if (rows != batch * tokens || w3 % 3 != 0 || (w3 / 3) % heads != 0) {
        throw DimensionError("self_attention: qkv shape " + shape_str(qkv.shape()) + " inconsistent with B, T, H");
    }
    const std::size_t d = w3 / 3, dh = d / heads, T = tokens;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    const auto& x = qkv.value().data;
    Tensor out(Shape{rows, d});
    Tensor probs(Shape{batch, heads, T, T});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            float* p = probs.data.data() + ((b * heads + h) * T) * T;
            for (std::size_t i = 0; i < T; ++i) {
                const float* q = x.data() + (b * T + i) * w3 + h * dh;
                float mx = -INFINITY;
                for (std::size_t j = 0; j < T; ++j) {
                    const float* k = x.data() + (b * T + j) * w3 + d + h * dh;
                    float s = 0.0f;
                    for (std::size_t e = 0; e < dh; ++e) s += q[e] * k[e];
                    s *= sc;
                    p[i * T + j] = s;
                    mx = std::max(mx, s);
                }
                float z = 0.0f;
                for (std::size_t j = 0; j < T; ++j) {
                    p[i * T + j] = std::exp(p[i * T + j] - mx);
                    z += p[i * T + j];
                }
                for (std::size_t j = 0; j < T; ++j) p[i * T + j] /= z;
                float* o = out.data.data() + (b * T + i) * d + h * dh;
                for (std::size_t j = 0; j < T; ++j) {
                    const float* v = x.data() + (b * T + j) * w3 + 2 * d + h * dh;
                    const float pij = p[i * T + j];
                    for (std::size_t e = 0; e < dh; ++e) o[e] += pij * v[e];
                }
            }
        }
    }
    if (probs_out) *probs_out = probs;
    const std::size_t iq = qkv.id();
    return qkv.tape().record(std::move(out), {iq},
        [iq, batch, heads, T, d, dh, w3, sc, probs = std::move(probs.data)](Tape& t, std::size_t self) {
            auto g = t.grad(self);
            const auto& x = t.value(iq).data;
            auto gx = t.grad_mut(iq);
            std::vector<float> dp(T);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const float* p = probs.data() + ((b * heads + h) * T) * T;
                    for (std::size_t i = 0; i < T; ++i) {
                        const float* go = g.data() + (b * T + i) * d + h * dh;
                        // dP[i,j] = dO[i]·V[j]; dV[j] += P[i,j]·dO[i]
                        float dot = 0.0f;
                        for (std::size_t j = 0; j < T; ++j) {
                            const float* v = x.data() + (b * T + j) * w3 + 2 * d + h * dh;
                            float* gv = gx.data() + (b * T + j) * w3 + 2 * d + h * dh;
                            float s = 0.0f;
                            const float pij = p[i * T + j];
                            for (std::size_t e = 0; e < dh; ++e) {
                                s += go[e] * v[e];
                                gv[e] += pij * go[e];
                            }
                            dp[j] = s;
                            dot += s * pij;
                        }
                        const float* q = x.data() + (b * T + i) * w3 + h * dh;
                        float* gq = gx.data() + (b * T + i) * w3 + h * dh;
                        for (std::size_t j = 0; j < T; ++j) {
                            const float ds = p[i * T + j] * (dp[j] - dot) * sc;
                            if (ds == 0.0f) continue;
                            const float* k = x.data() + (b * T + j) * w3 + d + h * dh;
                            float* gk = gx.data() + (b * T + j) * w3 + d + h * dh;
                            for (std::size_t e = 0; e < dh; ++e) {
                                gq[e] += ds * k[e];
                                gk[e] += ds * q[e];
                            }
                        }
                    }
                }
            }
        }, "self_attention");
}

}  // namespace pmtrans::ops
