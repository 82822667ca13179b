#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "pmtrans/errors.hpp"
#include "pmtrans/numerics/tensor.hpp"

namespace pmtrans {

struct AdamWConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

/// AdamW over a fixed list of tensors. Weight decay is decoupled and
/// applied to matrices only (rank >= 2).
class AdamW {
public:
    AdamW() = default;

    AdamW(std::vector<Tensor*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (Tensor* p : params_) {
            m_.emplace_back(p->size(), 0.0f);
            v_.emplace_back(p->size(), 0.0f);
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    std::size_t steps() const { return t_; }
    const std::vector<std::vector<float>>& first_moments() const { return m_; }
    const std::vector<std::vector<float>>& second_moments() const { return v_; }

    /// Apply one update from explicitly supplied gradients (one span per
    /// parameter, same order as construction).
    void step(std::span<const std::vector<float>> grads) {
        if (grads.size() != params_.size()) throw DimensionError("AdamW::step: gradient count mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = *params_[i];
            const auto& g = grads[i];
            if (g.size() != p.size()) throw DimensionError("AdamW::step: gradient shape mismatch");
            auto& m = m_[i];
            auto& v = v_[i];
            const float decay = p.rank() >= 2 ? cfg_.lr * cfg_.weight_decay : 0.0f;
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = cfg_.beta1 * m[k] + (1.0f - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0f - cfg_.beta2) * g[k] * g[k];
                const double mh = m[k] / bc1, vh = v[k] / bc2;
                p.data[k] -= decay * p.data[k];
                p.data[k] -= static_cast<float>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
            if (!p.all_finite()) throw NumericError("AdamW produced a non-finite parameter");
        }
    }

    /// Update from the gradients accumulated on the tensors themselves.
    void step() {
        std::vector<std::vector<float>> grads;
        grads.reserve(params_.size());
        for (Tensor* p : params_) grads.push_back(p->grad ? *p->grad : std::vector<float>(p->size(), 0.0f));
        step(grads);
    }

private:
    std::vector<Tensor*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace pmtrans
