#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pmtrans/errors.hpp"
#include "pmtrans/numerics/tensor.hpp"

namespace pmtrans {

struct PseudoState {
    Tensor centroids;                     // [n_classes, D]
    std::vector<std::size_t> assignments;  // one per target sample
    int epoch_of_refresh = -1;
    bool underfilled = false;  // fewer samples than classes
};

/// Prototype-initialized k-means over target features: centroids start as
/// the probability-weighted feature means, then `iterations` rounds of
/// (assign by cosine similarity, recompute as cluster means). Empty clusters
/// keep their previous centroid. No randomness.
inline PseudoState refresh_pseudo_labels(const Tensor& features, const Tensor& probs, std::size_t n_classes,
                                         std::size_t iterations = 2, int epoch = 0) {
    if (features.rank() != 2 || probs.rank() != 2 || features.dim(0) != probs.dim(0) || probs.dim(1) != n_classes) {
        throw DimensionError("refresh_pseudo_labels: features " + shape_str(features.shape) + " and probabilities " +
                             shape_str(probs.shape) + " disagree");
    }
    if (iterations == 0) throw ContractError("refresh_pseudo_labels: iterations must be at least 1");
    const std::size_t n = features.dim(0), d = features.dim(1);
    PseudoState st;
    st.epoch_of_refresh = epoch;
    st.underfilled = n < n_classes;
    std::vector<double> c(n_classes * d, 0.0);
    for (std::size_t k = 0; k < n_classes; ++k) {
        double mass = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double p = probs.at(j, k);
            mass += p;
            for (std::size_t e = 0; e < d; ++e) c[k * d + e] += p * features.at(j, e);
        }
        if (mass > 0.0)
            for (std::size_t e = 0; e < d; ++e) c[k * d + e] /= mass;
    }
    std::vector<double> fnorm(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < d; ++e) s += static_cast<double>(features.at(j, e)) * features.at(j, e);
        fnorm[j] = std::sqrt(s);
    }
    st.assignments.assign(n, 0);
    for (std::size_t round = 0; round < iterations; ++round) {
        std::vector<double> cnorm(n_classes);
        for (std::size_t k = 0; k < n_classes; ++k) {
            double s = 0.0;
            for (std::size_t e = 0; e < d; ++e) s += c[k * d + e] * c[k * d + e];
            cnorm[k] = std::sqrt(s);
        }
        for (std::size_t j = 0; j < n; ++j) {
            std::size_t best = 0;
            double best_sim = -INFINITY;
            for (std::size_t k = 0; k < n_classes; ++k) {
                double dot = 0.0;
                for (std::size_t e = 0; e < d; ++e) dot += c[k * d + e] * features.at(j, e);
                const double denom = fnorm[j] * cnorm[k];
                const double sim = denom > 0.0 ? dot / denom : -1.0;
                if (sim > best_sim) {
                    best_sim = sim;
                    best = k;
                }
            }
            st.assignments[j] = best;
        }
        std::vector<double> next(n_classes * d, 0.0);
        std::vector<std::size_t> count(n_classes, 0);
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = st.assignments[j];
            ++count[k];
            for (std::size_t e = 0; e < d; ++e) next[k * d + e] += features.at(j, e);
        }
        for (std::size_t k = 0; k < n_classes; ++k) {
            if (count[k] == 0) continue;
            for (std::size_t e = 0; e < d; ++e) c[k * d + e] = next[k * d + e] / static_cast<double>(count[k]);
        }
    }
    st.centroids = Tensor(Shape{n_classes, d});
    for (std::size_t i = 0; i < c.size(); ++i) st.centroids.data[i] = static_cast<float>(c[i]);
    return st;
}

}  // namespace pmtrans
