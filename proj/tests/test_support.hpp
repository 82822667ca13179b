#pragma once

#include <numeric>

#include "pmtrans/checkpoint.hpp"
#include "pmtrans/data.hpp"
#include "pmtrans/game.hpp"
#include "pmtrans/gradcheck.hpp"

namespace pmtrans::testing {

using pmtrans::GraphFn;
using pmtrans::random_tensor;

inline double max_gradient_error(const GraphFn& graph, std::vector<Tensor> inputs, std::uint64_t seed = 7,
                                 float h = 1e-3f) {
    return graph_gradient_error(graph, inputs, seed, h);
}

struct AlignedConstruction {
    double source_accuracy = 0.0;
    double source_ce = 0.0;
    float l_l_is = 0.0f, l_l_it = 0.0f;
};

/// Target set identical to the source set, pseudo-labels equal to the true
/// labels, a classifier trained on the source and then sharpened until its
/// logits are confident, and every image mixed patch-wise with its twin.
/// Returns the label-space terms on that batch.
inline AlignedConstruction aligned_label_space_terms(std::uint64_t seed) {
    auto [source, unused] = generate_pair(4, 48, ShiftSpec::neutral(), seed);
    TrainConfig cfg;
    cfg.mix_mode = MixMode::none;
    cfg.batch_size = 16;
    cfg.epochs = 150;
    cfg.warmup_epochs = 0;
    cfg.seed = seed;
    FitResult fitted = fit(cfg, source, source);

    TrainConfig mix_cfg = cfg;
    mix_cfg.mix_mode = MixMode::patchmix;
    Rng init = make_rng(seed, 1);
    GameState state(mix_cfg, init);
    restore_model(state.model(), model_blocks(fitted.state->model()));

    AlignedConstruction out;
    Evaluation ev = evaluate(state.model(), source);
    out.source_accuracy = ev.accuracy;
    // Scaling the classifier scales every logit, which sharpens the softmax
    // without changing any argmax.
    auto mean_ce = [&] {
        Evaluation e = evaluate(state.model(), source);
        double ce = 0.0;
        for (std::size_t i = 0; i < source.size(); ++i)
            ce -= std::log(std::max(1e-30, static_cast<double>(e.probs.at(i, source.labels[i]))));
        return ce / static_cast<double>(source.size());
    };
    for (int round = 0; round < 24 && mean_ce() > 1e-5; ++round) {
        for (auto& v : state.model().classifier().weight.data) v *= 2.0f;
        for (auto& v : state.model().classifier().bias.data) v *= 2.0f;
    }
    out.source_ce = mean_ce();

    std::vector<std::size_t> all(source.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    DomainBatch batch;
    batch.source_images = source.batch(all);
    batch.source_labels = source.batch_labels(all);
    batch.target_images = batch.source_images;
    batch.target_indices = all;
    batch.target_pseudo = batch.source_labels;
    Rng rng = make_rng(seed, 3);
    VectorField vf = vector_field_blocks(batch, state, 1.0f, rng);
    out.l_l_is = vf.losses.l_l_is;
    out.l_l_it = vf.losses.l_l_it;
    return out;
}

}  // namespace pmtrans::testing
