#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>

#include "pmtrans/errors.hpp"
#include "pmtrans/model.hpp"
#include "pmtrans/numerics/ops.hpp"
#include "pmtrans/random.hpp"

namespace pmtrans {

inline constexpr float kBetaFloor = 0.01f;
inline constexpr double kLambdaClamp = 1e-6;

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

/// Player P: the Beta(β, γ) mixing distribution, held through unconstrained
/// raw parameters with β = softplus(raw_b) + 0.01 and γ = softplus(raw_g) + 0.01.
struct BetaParams {
    Tensor raw_b = Tensor::scalar(static_cast<float>(inverse_softplus(1.0 - kBetaFloor)));
    Tensor raw_g = Tensor::scalar(static_cast<float>(inverse_softplus(1.0 - kBetaFloor)));

    static BetaParams from_shape(double beta, double gamma) {
        if (!(beta > kBetaFloor) || !(gamma > kBetaFloor)) {
            throw ContractError("Beta shape parameters must exceed " + std::to_string(kBetaFloor));
        }
        BetaParams p;
        p.raw_b = Tensor::scalar(static_cast<float>(inverse_softplus(beta - kBetaFloor)));
        p.raw_g = Tensor::scalar(static_cast<float>(inverse_softplus(gamma - kBetaFloor)));
        return p;
    }

    double beta() const { return softplus(raw_b[0]) + kBetaFloor; }
    double gamma() const { return softplus(raw_g[0]) + kBetaFloor; }

    template <typename F>
    void for_each(F&& f) {
        f("patchmix.raw_b", raw_b);
        f("patchmix.raw_g", raw_g);
    }
};

/// Marsaglia–Tsang Gamma(shape, 1) sampler; shapes below one use the
/// U^{1/a} boost.
inline double sample_gamma(double shape, Rng& rng) {
    if (shape < 1.0) {
        const double u = uniform01(rng);
        return sample_gamma(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = standard_normal(rng);
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform01(rng);
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

/// Beta draw as g1 / (g1 + g2), clamped into [1e-6, 1 - 1e-6].
inline double sample_beta(double beta, double gamma, Rng& rng) {
    const double g1 = sample_gamma(beta, rng);
    const double g2 = sample_gamma(gamma, rng);
    const double s = g1 + g2;
    const double x = s > 0.0 ? g1 / s : 0.5;
    return std::clamp(x, kLambdaClamp, 1.0 - kLambdaClamp);
}

inline double log_beta_pdf(double x, double beta, double gamma) {
    return (beta - 1.0) * std::log(x) + (gamma - 1.0) * std::log1p(-x) -
           (std::lgamma(beta) + std::lgamma(gamma) - std::lgamma(beta + gamma));
}

struct LambdaDraw {
    std::vector<float> lambda;
    double log_density = 0.0;  // sum of log Beta-pdf over the draws
};

inline LambdaDraw sample_lambda(const BetaParams& params, std::size_t n, Rng& rng) {
    if (n == 0) throw ContractError("sample_lambda: n must be at least 1");
    const double b = params.beta(), g = params.gamma();
    LambdaDraw d;
    d.lambda.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double x = sample_beta(b, g, rng);
        d.lambda.push_back(static_cast<float>(x));
        // Density at the stored float value, so the tape op below agrees.
        d.log_density += log_beta_pdf(static_cast<double>(d.lambda.back()), b, g);
    }
    return d;
}

/// Summed log Beta-density of fixed samples as a differentiable function of
/// the raw parameters.
inline Var beta_log_density(Var raw_b, Var raw_g, std::span<const float> samples) {
    double sum_log = 0.0, sum_log1m = 0.0;
    for (float s : samples) {
        sum_log += std::log(static_cast<double>(s));
        sum_log1m += std::log1p(-static_cast<double>(s));
    }
    const double rb = raw_b.item(), rg = raw_g.item();
    const double b = softplus(rb) + kBetaFloor, g = softplus(rg) + kBetaFloor;
    const double n = static_cast<double>(samples.size());
    const double value = (b - 1.0) * sum_log + (g - 1.0) * sum_log1m -
                         n * (std::lgamma(b) + std::lgamma(g) - std::lgamma(b + g));
    const double psi_bg = boost::math::digamma(b + g);
    const double d_b = (sum_log - n * (boost::math::digamma(b) - psi_bg)) * sigmoid(rb);
    const double d_g = (sum_log1m - n * (boost::math::digamma(g) - psi_bg)) * sigmoid(rg);
    const std::size_t ib = raw_b.id(), ig = raw_g.id();
    return raw_b.tape().record(Tensor::scalar(static_cast<float>(value)), {ib, ig},
        [ib, ig, d_b, d_g](Tape& t, std::size_t self) {
            const double g = t.grad(self)[0];
            if (t.requires_grad(ib)) t.grad_mut(ib)[0] += static_cast<float>(g * d_b);
            if (t.requires_grad(ig)) t.grad_mut(ig)[0] += static_cast<float>(g * d_g);
        }, "beta_log_density");
}

struct RawGrad {
    double raw_b = 0.0;
    double raw_g = 0.0;
};

/// Score-function (likelihood-ratio) estimate of ∇ E[reward] with respect to
/// the raw Beta parameters: mean over draws of (reward_a − baseline)·∇log p(λ_a).
inline RawGrad score_function_grad(const BetaParams& params, std::span<const LambdaDraw> draws,
                                   std::span<const float> rewards, float baseline) {
    if (draws.size() != rewards.size() || draws.empty()) {
        throw DimensionError("score_function_grad: need one reward per draw");
    }
    Tape tape;
    Tensor rb = params.raw_b, rg = params.raw_g;
    rb.requires_grad = rg.requires_grad = true;
    rb.grad.reset();
    rg.grad.reset();
    Var vb = tape.bind(rb), vg = tape.bind(rg);
    std::vector<float> weights;
    std::vector<Var> terms;
    for (std::size_t a = 0; a < draws.size(); ++a) {
        terms.push_back(beta_log_density(vb, vg, draws[a].lambda));
        weights.push_back(rewards[a] - baseline);
    }
    // Stack the per-draw log densities and weight them.
    Tensor stacked(Shape{terms.size()});
    std::vector<std::size_t> parents;
    for (std::size_t a = 0; a < terms.size(); ++a) {
        stacked[a] = terms[a].item();
        parents.push_back(terms[a].id());
    }
    Var all = tape.record(std::move(stacked), parents, [parents](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        for (std::size_t a = 0; a < parents.size(); ++a) t.grad_mut(parents[a])[0] += g[a];
    }, "stack");
    Var objective = ops::weighted_sum(all, weights, static_cast<float>(draws.size()));
    tape.backward(objective);
    RawGrad out;
    if (rb.grad) out.raw_b = (*rb.grad)[0];
    if (rg.grad) out.raw_g = (*rg.grad)[0];
    return out;
}

/// Gradient of −(reward − baseline)·log p(λ): descending it ascends the
/// expected reward.
inline RawGrad reinforce_grad(const BetaParams& params, std::span<const LambdaDraw> draws,
                              std::span<const float> rewards, float baseline) {
    RawGrad g = score_function_grad(params, draws, rewards, baseline);
    return RawGrad{-g.raw_b, -g.raw_g};
}

inline RawGrad reinforce_grad(const BetaParams& params, const LambdaDraw& draw, float reward, float baseline) {
    return reinforce_grad(params, std::span<const LambdaDraw>(&draw, 1), std::span<const float>(&reward, 1), baseline);
}

// ---------------------------------------------------------------------------
// Mixing

/// Per-pair mixing record.
struct MixSpec {
    std::vector<float> lambda;  // n per-patch ratios
    std::vector<float> attn_source, attn_target;
    float lambda_s = 0.0f;
    float lambda_t = 0.0f;
    double log_density = 0.0;
};

/// out_k = λ_k·src_k + (1 − λ_k)·tgt_k with λ indexed per patch. `lambda`
/// holds B·n ratios, pair-major.
inline PatchSequence mix_sequences(const PatchSequence& src, const PatchSequence& tgt, std::span<const float> lambda) {
    if (src.batch != tgt.batch || src.tokens.shape() != tgt.tokens.shape()) {
        throw DimensionError("mix_sequences: source and target sequences differ in length");
    }
    if (lambda.size() != src.tokens.shape()[0]) {
        throw DimensionError("mix_sequences: expected " + std::to_string(src.tokens.shape()[0]) +
                             " mixing ratios, got " + std::to_string(lambda.size()));
    }
    return PatchSequence{ops::mix_rows(src.tokens, tgt.tokens, lambda), src.batch};
}

/// Attention re-weighted label coefficients (λ^s, λ^t).
inline std::pair<float, float> mix_weights(std::span<const float> lambda, std::span<const float> attn_s,
                                           std::span<const float> attn_t) {
    if (lambda.size() != attn_s.size() || lambda.size() != attn_t.size() || lambda.empty()) {
        throw DimensionError("mix_weights: λ and attention vectors must share one length");
    }
    double ss = 0.0, st = 0.0, num_s = 0.0, num_t = 0.0;
    for (std::size_t k = 0; k < lambda.size(); ++k) {
        ss += attn_s[k];
        st += attn_t[k];
        num_s += static_cast<double>(lambda[k]) * attn_s[k];
        num_t += (1.0 - static_cast<double>(lambda[k])) * attn_t[k];
    }
    if (std::abs(ss - 1.0) > 1e-5 || std::abs(st - 1.0) > 1e-5) {
        throw ContractError("mix_weights: attention scores must sum to 1");
    }
    const double denom = num_s + num_t;
    if (!(denom >= 1e-8)) throw DegenerateInputError("mix_weights: attention-weighted mass below 1e-8");
    const double ls = num_s / denom;
    return {static_cast<float>(ls), static_cast<float>(1.0 - ls)};
}

/// Global mixup: one ratio per pair applied to every patch.
inline PatchSequence mix_global(const PatchSequence& src, const PatchSequence& tgt, std::span<const float> lambda_per_pair) {
    if (lambda_per_pair.size() != src.batch) throw DimensionError("mix_global: need one ratio per pair");
    const std::size_t n = src.tokens.shape()[0] / std::max<std::size_t>(src.batch, 1);
    std::vector<float> lam;
    lam.reserve(src.batch * n);
    for (float l : lambda_per_pair) lam.insert(lam.end(), n, l);
    return mix_sequences(src, tgt, lam);
}

/// Axis-aligned rectangle on the patch grid.
struct GridRect {
    std::size_t row = 0, col = 0, height = 0, width = 0;
    std::size_t area() const { return height * width; }
};

/// Per-patch ratios for a cut: 0 inside the rectangle (target), 1 outside.
inline std::vector<float> cut_lambda(std::size_t grid, const GridRect& r) {
    if (r.row + r.height > grid || r.col + r.width > grid) {
        throw ContractError("mix_cut: rectangle exceeds the " + std::to_string(grid) + "x" + std::to_string(grid) +
                            " patch grid");
    }
    std::vector<float> lam(grid * grid, 1.0f);
    for (std::size_t y = r.row; y < r.row + r.height; ++y)
        for (std::size_t x = r.col; x < r.col + r.width; ++x) lam[y * grid + x] = 0.0f;
    return lam;
}

/// Square rectangle covering about `target_fraction` of the grid at a random position.
inline GridRect random_rect(std::size_t grid, double target_fraction, Rng& rng) {
    const auto side = static_cast<std::size_t>(std::lround(static_cast<double>(grid) * std::sqrt(std::clamp(target_fraction, 0.0, 1.0))));
    GridRect r{0, 0, side, side};
    if (side < grid) {
        r.row = uniform_index(rng, grid - side + 1);
        r.col = uniform_index(rng, grid - side + 1);
    }
    return r;
}

/// CutMix: copy one rectangle of target patches into the source sequence of
/// each pair. Returns the mixed sequence and λ^t = area / n per pair.
inline std::pair<PatchSequence, std::vector<float>> mix_cut(const PatchSequence& src, const PatchSequence& tgt,
                                                            std::span<const GridRect> rects, std::size_t grid) {
    if (rects.size() != src.batch) throw DimensionError("mix_cut: need one rectangle per pair");
    std::vector<float> lam, lambda_t;
    for (const auto& r : rects) {
        auto l = cut_lambda(grid, r);
        lam.insert(lam.end(), l.begin(), l.end());
        lambda_t.push_back(static_cast<float>(r.area()) / static_cast<float>(grid * grid));
    }
    return {mix_sequences(src, tgt, lam), std::move(lambda_t)};
}

}  // namespace pmtrans
