#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "pmtrans/errors.hpp"
#include "pmtrans/model.hpp"

namespace pmtrans {

enum class AttentionMethod { cls, cam };

/// Normalized per-patch importance a_k for one image.
struct AttentionScores {
    std::vector<float> scores;
    AttentionMethod method = AttentionMethod::cam;
    std::optional<std::size_t> class_index;
};

/// CLS-token scores for every item of a batch: per layer, average the
/// post-softmax attention over heads and take the CLS row; average the rows
/// over layers; drop the CLS self-entry and renormalize over the patches.
inline std::vector<AttentionScores> cls_attention_scores(const ForwardRecord& rec) {
    if (!rec.has_cls) throw ConfigError("CLS attention scores need a model with a CLS token");
    if (rec.attention.empty()) throw SequencingError("forward record holds no attention matrices");
    const Shape& s = rec.attention.front().shape;
    const std::size_t batch = s[0], heads = s[1], T = s[2];
    const std::size_t layers = rec.attention.size();
    std::vector<AttentionScores> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<double> row(T, 0.0);
        for (const auto& att : rec.attention) {
            for (std::size_t h = 0; h < heads; ++h) {
                const float* p = att.data.data() + ((b * heads + h) * T) * T;  // CLS is query row 0
                for (std::size_t j = 0; j < T; ++j) row[j] += p[j];
            }
        }
        for (auto& v : row) v /= static_cast<double>(heads * layers);
        double mass = 0.0;
        for (std::size_t j = 1; j < T; ++j) mass += row[j];
        auto& sc = out[b];
        sc.method = AttentionMethod::cls;
        sc.scores.resize(T - 1);
        for (std::size_t j = 1; j < T; ++j) {
            sc.scores[j - 1] = mass > 0.0 ? static_cast<float>(row[j] / mass) : 1.0f / static_cast<float>(T - 1);
        }
    }
    return out;
}

/// CAM scores: M_k = Σ_j W[c, j]·f_k[j] over the final patch features,
/// normalized with a softmax over the patches. `class_index` holds one class
/// per batch item.
inline std::vector<AttentionScores> cam_attention_scores(const ForwardRecord& rec, const Tensor& classifier_weight,
                                                         std::span<const std::size_t> class_index) {
    const Tensor& f = rec.features.value();
    const std::size_t batch = rec.input.batch, d = f.dim(1);
    if (batch == 0 || f.dim(0) % batch != 0) throw DimensionError("cam_attention_scores: malformed forward record");
    const std::size_t n = f.dim(0) / batch, n_classes = classifier_weight.dim(0);
    if (classifier_weight.dim(1) != d) throw DimensionError("cam_attention_scores: classifier width mismatch");
    if (class_index.size() != batch) throw DimensionError("cam_attention_scores: need one class per batch item");
    std::vector<AttentionScores> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t c = class_index[b];
        if (c >= n_classes) {
            throw ContractError("cam_attention_scores: class index " + std::to_string(c) + " out of range");
        }
        const float* w = classifier_weight.data.data() + c * d;
        std::vector<double> m(n);
        double mx = -INFINITY;
        for (std::size_t k = 0; k < n; ++k) {
            const float* fk = f.data.data() + (b * n + k) * d;
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(w[j]) * fk[j];
            m[k] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (auto& v : m) z += (v = std::exp(v - mx));
        auto& sc = out[b];
        sc.method = AttentionMethod::cam;
        sc.class_index = c;
        sc.scores.resize(n);
        for (std::size_t k = 0; k < n; ++k) sc.scores[k] = static_cast<float>(m[k] / z);
    }
    return out;
}

enum class Domain { source, target };

/// Class whose activation map is used: ground truth for source items, the
/// current pseudo-label for target items.
inline std::size_t select_class_index(Domain domain, std::optional<std::size_t> true_label,
                                      std::optional<std::size_t> pseudo_label) {
    if (domain == Domain::source) {
        if (!true_label) throw ContractError("source sample without a label");
        return *true_label;
    }
    if (!pseudo_label) throw SequencingError("target pseudo-labels have not been initialized");
    return *pseudo_label;
}

}  // namespace pmtrans
