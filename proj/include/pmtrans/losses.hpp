#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "pmtrans/errors.hpp"
#include "pmtrans/numerics/ops.hpp"

namespace pmtrans {

struct LossBreakdown {
    float l_cls = 0.0f;
    float l_l_is = 0.0f, l_l_it = 0.0f;
    float l_f_is = 0.0f, l_f_it = 0.0f;
    float ce_total = 0.0f;
    float j_total = 0.0f;
    float alpha = 0.0f;
};

inline Tensor one_hot(std::span<const std::size_t> labels, std::size_t n_classes) {
    Tensor t(Shape{labels.size(), n_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= n_classes) throw ContractError("label " + std::to_string(labels[i]) + " out of range");
        t.at(i, labels[i]) = 1.0f;
    }
    return t;
}

/// Mean cross entropy of source logits against their labels.
inline Var source_cls_loss(Var logits, std::span<const std::size_t> labels) {
    const std::size_t k = logits.shape().at(1);
    return ops::mean(ops::cross_entropy_rows(logits, one_hot(labels, k)));
}

/// A batch-mean loss term together with each pair's share of it; the term
/// equals the mean of the shares.
struct PairedLoss {
    Var value;
    std::vector<float> per_pair;
};

/// λ^s-weighted CE against the source constituent's label and λ^t-weighted
/// CE against the target constituent's pseudo-label.
inline std::pair<PairedLoss, PairedLoss> label_space_loss(Var logits_i, std::span<const std::size_t> source_labels,
                                                          std::optional<std::span<const std::size_t>> pseudo_labels,
                                                          std::span<const float> lambda_s,
                                                          std::span<const float> lambda_t) {
    if (!pseudo_labels) throw SequencingError("label-space loss needs target pseudo-labels");
    const std::size_t b = logits_i.shape().at(0), k = logits_i.shape().at(1);
    if (source_labels.size() != b || pseudo_labels->size() != b || lambda_s.size() != b || lambda_t.size() != b) {
        throw DimensionError("label_space_loss: per-pair inputs must match the batch size");
    }
    Var ce_s = ops::cross_entropy_rows(logits_i, one_hot(source_labels, k));
    Var ce_t = ops::cross_entropy_rows(logits_i, one_hot(*pseudo_labels, k));
    PairedLoss is{ops::weighted_sum(ce_s, lambda_s, static_cast<float>(b)), {}};
    PairedLoss it{ops::weighted_sum(ce_t, lambda_t, static_cast<float>(b)), {}};
    for (std::size_t a = 0; a < b; ++a) {
        is.per_pair.push_back(lambda_s[a] * ce_s.value()[a]);
        it.per_pair.push_back(lambda_t[a] * ce_t.value()[a]);
    }
    return {std::move(is), std::move(it)};
}

/// Label-similarity targets for the feature-space losses. y_is rows are
/// normalized; rows without any positive entry are masked out.
struct SimilarityTargets {
    Tensor y_is;
    Tensor y_it;
    std::vector<bool> row_valid;
};

/// `intermediate_classes[a]` is the label of the source image mixed into
/// intermediate sample a; `source_classes[b]` labels the compared source batch.
inline SimilarityTargets build_label_similarity(std::span<const std::size_t> intermediate_classes,
                                                std::span<const std::size_t> source_classes) {
    const std::size_t rows = intermediate_classes.size(), cols = source_classes.size();
    SimilarityTargets t;
    t.y_is = Tensor(Shape{rows, cols});
    t.row_valid.assign(rows, false);
    for (std::size_t a = 0; a < rows; ++a) {
        std::size_t hits = 0;
        for (std::size_t b = 0; b < cols; ++b) hits += intermediate_classes[a] == source_classes[b];
        if (hits == 0) continue;
        t.row_valid[a] = true;
        for (std::size_t b = 0; b < cols; ++b) {
            if (intermediate_classes[a] == source_classes[b]) t.y_is.at(a, b) = 1.0f / static_cast<float>(hits);
        }
    }
    t.y_it = Tensor(Shape{rows, rows});
    for (std::size_t a = 0; a < rows; ++a) t.y_it.at(a, a) = 1.0f;
    return t;
}

namespace detail {

// Weighted CE of similarity rows against target rows; masked rows get a
// placeholder target and zero weight, and the mean runs over valid rows.
inline PairedLoss similarity_ce(Var sims, Tensor targets, const std::vector<bool>& valid,
                                std::span<const float> weights) {
    const std::size_t rows = sims.shape()[0], cols = sims.shape()[1];
    std::vector<float> w(rows, 0.0f);
    std::size_t count = 0;
    for (std::size_t a = 0; a < rows; ++a) {
        if (valid[a]) {
            w[a] = weights[a];
            ++count;
        } else {
            for (std::size_t b = 0; b < cols; ++b) targets.at(a, b) = 1.0f / static_cast<float>(cols);
        }
    }
    Var ce = ops::cross_entropy_rows(sims, targets);
    PairedLoss out;
    if (count == 0) {
        out.value = sims.tape().constant(Tensor::scalar(0.0f));
        out.per_pair.assign(rows, 0.0f);
        return out;
    }
    out.value = ops::weighted_sum(ce, w, static_cast<float>(count));
    // Shares scaled so their plain mean over all rows equals the term.
    const float scale = static_cast<float>(rows) / static_cast<float>(count);
    for (std::size_t a = 0; a < rows; ++a) out.per_pair.push_back(w[a] * ce.value()[a] * scale);
    return out;
}

}  // namespace detail

/// Feature-space losses: cosine similarities between intermediate and
/// source (resp. target) pooled features, divided by τ and treated as
/// logits, scored against y_is (resp. y_it) and weighted by λ^s (resp. λ^t).
inline std::pair<PairedLoss, PairedLoss> feature_space_loss(Var h_i, Var h_s, Var h_t, const SimilarityTargets& targets,
                                                            std::span<const float> lambda_s,
                                                            std::span<const float> lambda_t, float tau) {
    if (!(tau > 0.0f)) throw ContractError("feature_space_loss: temperature must be positive");
    const std::size_t b = h_i.shape().at(0);
    if (lambda_s.size() != b || lambda_t.size() != b || targets.row_valid.size() != b ||
        targets.y_is.dim(1) != h_s.shape().at(0) || targets.y_it.dim(1) != h_t.shape().at(0)) {
        throw DimensionError("feature_space_loss: batch sizes disagree");
    }
    Var sim_s = ops::scale(ops::cosine_matrix(h_i, h_s), 1.0f / tau);
    Var sim_t = ops::scale(ops::cosine_matrix(h_i, h_t), 1.0f / tau);
    auto is = detail::similarity_ce(sim_s, targets.y_is, targets.row_valid, lambda_s);
    auto it = detail::similarity_ce(sim_t, targets.y_it, std::vector<bool>(b, true), lambda_t);
    return {std::move(is), std::move(it)};
}

/// CE_{s,i,t} = L_f^{I,S} + L_f^{I,T} + L_l^{I,S} + L_l^{I,T};  J = L_cls + α·CE.
inline std::pair<Var, Var> total_objective(Var l_cls, std::span<const Var> ce_terms, float alpha) {
    Var ce = l_cls.tape().constant(Tensor::scalar(0.0f));
    for (const Var& term : ce_terms) ce = ops::add(ce, term);
    Var j = ops::add(l_cls, ops::scale(ce, alpha));
    return {ce, j};
}

inline std::pair<float, float> total_objective(float l_cls, float l_f_is, float l_f_it, float l_l_is, float l_l_it,
                                               float alpha) {
    const float ce = l_f_is + l_f_it + l_l_is + l_l_it;
    return {ce, l_cls + alpha * ce};
}

}  // namespace pmtrans
