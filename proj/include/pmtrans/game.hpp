#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmtrans/attention.hpp"
#include "pmtrans/data.hpp"
#include "pmtrans/losses.hpp"
#include "pmtrans/model.hpp"
#include "pmtrans/optim.hpp"
#include "pmtrans/patchmix.hpp"
#include "pmtrans/pseudolabel.hpp"

namespace pmtrans {

enum class MixMode { patchmix, mixup, cutmix, none };

struct BetaMode {
    bool learnable = true;
    double beta = 1.0, gamma = 1.0;  // initial (learnable) or fixed values
};

struct TrainConfig {
    ModelConfig model;
    AttentionMethod attention = AttentionMethod::cls;
    MixMode mix_mode = MixMode::patchmix;
    BetaMode beta_mode;
    bool use_lf = true;
    bool use_ll = true;
    float tau = 0.1f;
    float lr_encoder = 1e-3f;
    float lr_classifier = 1e-2f;
    float lr_beta = 1e-2f;
    float weight_decay = 0.05f;
    float baseline_decay = 0.9f;
    std::size_t epochs = 8;
    std::size_t warmup_epochs = 5;
    std::size_t batch_size = 32;
    std::size_t kmeans_iterations = 2;
    std::size_t eval_batch = 250;
    std::uint64_t seed = 0;
    bool record_wall_time = false;

    void validate() const {
        model.validate();
        if (attention == AttentionMethod::cls && !model.use_cls_token)
            throw ConfigError("attention = cls requires pooling = cls");
        if (!(tau > 0.0f)) throw ConfigError("tau must be positive");
        if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
        if (kmeans_iterations == 0) throw ConfigError("kmeans_iterations must be at least 1");
        if (eval_batch == 0) throw ConfigError("eval_batch must be positive");
        if (lr_encoder < 0 || lr_classifier < 0 || lr_beta < 0 || weight_decay < 0)
            throw ConfigError("learning rates and weight decay must be non-negative");
        if (!(baseline_decay >= 0.0f && baseline_decay < 1.0f)) throw ConfigError("baseline_decay must lie in [0, 1)");
        if (!beta_mode.learnable && (beta_mode.beta <= kBetaFloor || beta_mode.gamma <= kBetaFloor))
            throw ConfigError("fixed Beta parameters must exceed 0.01");
    }
};

/// DANN-style ramp 2/(1 + exp(−10p)) − 1 over training progress p ∈ [0, 1].
inline float alpha_schedule(double progress) {
    if (!(progress >= 0.0 && progress <= 1.0)) throw ContractError("alpha_schedule: progress must lie in [0, 1]");
    return static_cast<float>(2.0 / (1.0 + std::exp(-10.0 * progress)) - 1.0);
}

/// The three players' parameters and optimizer state. Optimizers point into
/// the owned tensors, so the state is pinned in memory.
class GameState {
public:
    GameState(const TrainConfig& cfg, Rng& init_rng)
        : config_(cfg), model_(cfg.model, init_rng),
          beta_(BetaParams::from_shape(cfg.beta_mode.beta, cfg.beta_mode.gamma)) {
        std::vector<Tensor*> f, c;
        model_.encoder().for_each([&f](const std::string&, Tensor& t) { f.push_back(&t); });
        model_.classifier().for_each([&c](const std::string&, Tensor& t) { c.push_back(&t); });
        opt_f_ = AdamW(f, {cfg.lr_encoder, 0.9f, 0.999f, 1e-8f, cfg.weight_decay});
        opt_c_ = AdamW(c, {cfg.lr_classifier, 0.9f, 0.999f, 1e-8f, cfg.weight_decay});
        opt_p_ = AdamW({&beta_.raw_b, &beta_.raw_g}, {cfg.lr_beta, 0.9f, 0.999f, 1e-8f, 0.0f});
    }

    GameState(const GameState&) = delete;
    GameState& operator=(const GameState&) = delete;

    const TrainConfig& config() const { return config_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }
    BetaParams& beta() { return beta_; }
    const BetaParams& beta() const { return beta_; }
    AdamW& opt_encoder() { return opt_f_; }
    AdamW& opt_classifier() { return opt_c_; }
    AdamW& opt_beta() { return opt_p_; }

    std::size_t step = 0;
    std::size_t adapt_step = 0;
    std::size_t adapt_total = 0;
    std::optional<float> reward_baseline;
    std::optional<PseudoState> pseudo;

private:
    TrainConfig config_;
    Model model_;
    BetaParams beta_;
    AdamW opt_f_, opt_c_, opt_p_;
};

/// Paired source and target mini-batches for one step.
struct DomainBatch {
    Tensor source_images;  // [B, C*H*W]
    std::vector<std::size_t> source_labels;
    Tensor target_images;
    std::vector<std::size_t> target_indices;  // into the target dataset
    std::optional<std::vector<std::size_t>> target_pseudo;
};

struct VectorField {
    std::vector<std::vector<float>> encoder;     // ∇_F J
    std::vector<std::vector<float>> classifier;  // ∇_C J
    RawGrad beta;                                // ∇_P J_P = −α·∇_P CE
    RawGrad ce_score;                            // score-function ∇_P CE
    LossBreakdown losses;
    std::vector<float> rewards;  // per-pair CE shares
    std::vector<MixSpec> mixes;
    std::vector<LambdaDraw> draws;
};

namespace detail {

inline std::vector<std::vector<float>> collect_grads(std::vector<Tensor*> params) {
    std::vector<std::vector<float>> out;
    for (Tensor* p : params) out.push_back(p->grad ? *p->grad : std::vector<float>(p->size(), 0.0f));
    return out;
}

inline std::vector<Tensor*> encoder_params(Model& m) {
    std::vector<Tensor*> v;
    m.encoder().for_each([&v](const std::string&, Tensor& t) { v.push_back(&t); });
    return v;
}

inline std::vector<Tensor*> classifier_params(Model& m) {
    std::vector<Tensor*> v;
    m.classifier().for_each([&v](const std::string&, Tensor& t) { v.push_back(&t); });
    return v;
}

}  // namespace detail

/// Gradient blocks of the three players for one batch. With `adapt` false
/// (warmup or mix_mode none) only the source classification loss is used.
/// `replay` reuses the draws, attention and label weights of an earlier call,
/// which makes J a deterministic function of the encoder and classifier.
inline VectorField vector_field_blocks(const DomainBatch& batch, GameState& state, float alpha, Rng& rng,
                                       bool adapt = true, const VectorField* replay = nullptr) {
    const TrainConfig& cfg = state.config();
    const ModelConfig& mc = cfg.model;
    const std::size_t B = batch.source_labels.size(), n = mc.n_patches();
    if (B == 0 || batch.target_indices.size() != B) throw DimensionError("domain batch halves differ in size");
    adapt = adapt && cfg.mix_mode != MixMode::none;

    Model& model = state.model();
    model.zero_grad();
    Tape tape;
    BoundModel bm(model, tape);
    VectorField vf;
    vf.losses.alpha = alpha;

    PatchSequence ps = bm.patch_embed(batch.source_images);
    ForwardRecord rec_s = bm.encode(ps);
    Var l_cls = source_cls_loss(rec_s.logits, batch.source_labels);
    vf.losses.l_cls = l_cls.item();

    std::vector<Var> ce_terms;
    std::vector<LambdaDraw> draws;
    if (adapt) {
        if (!batch.target_pseudo) throw SequencingError("adaptation step before the first pseudo-label refresh");
        const auto& pseudo = *batch.target_pseudo;
        PatchSequence pt = bm.patch_embed(batch.target_images);
        ForwardRecord rec_t = bm.encode(pt);

        std::vector<float> lam;
        lam.reserve(B * n);
        std::vector<float> lambda_s(B), lambda_t(B);
        vf.mixes.resize(B);
        std::optional<PatchSequence> mixed;
        if (replay) {
            if (replay->mixes.size() != B) throw DimensionError("replayed mixes do not match the batch");
            vf.mixes = replay->mixes;
            draws = replay->draws;
            for (const auto& m : vf.mixes) lam.insert(lam.end(), m.lambda.begin(), m.lambda.end());
            mixed = mix_sequences(ps, pt, lam);
        } else if (cfg.mix_mode == MixMode::patchmix) {
            std::vector<AttentionScores> as, at;
            if (cfg.attention == AttentionMethod::cls) {
                as = cls_attention_scores(rec_s);
                at = cls_attention_scores(rec_t);
            } else {
                std::vector<std::size_t> cs(B), ct(B);
                for (std::size_t a = 0; a < B; ++a) {
                    cs[a] = select_class_index(Domain::source, batch.source_labels[a], std::nullopt);
                    ct[a] = select_class_index(Domain::target, std::nullopt, pseudo[a]);
                }
                const Tensor& w = model.classifier().weight;
                as = cam_attention_scores(rec_s, w, cs);
                at = cam_attention_scores(rec_t, w, ct);
            }
            for (std::size_t a = 0; a < B; ++a) {
                draws.push_back(sample_lambda(state.beta(), n, rng));
                auto& mix = vf.mixes[a];
                mix.lambda = draws.back().lambda;
                mix.log_density = draws.back().log_density;
                mix.attn_source = as[a].scores;
                mix.attn_target = at[a].scores;
                std::tie(mix.lambda_s, mix.lambda_t) = mix_weights(mix.lambda, mix.attn_source, mix.attn_target);
                lam.insert(lam.end(), mix.lambda.begin(), mix.lambda.end());
            }
            mixed = mix_sequences(ps, pt, lam);
        } else if (cfg.mix_mode == MixMode::mixup) {
            std::vector<float> per_pair;
            for (std::size_t a = 0; a < B; ++a) {
                draws.push_back(sample_lambda(state.beta(), 1, rng));
                auto& mix = vf.mixes[a];
                mix.lambda.assign(n, draws.back().lambda[0]);
                mix.log_density = draws.back().log_density;
                mix.lambda_s = draws.back().lambda[0];
                mix.lambda_t = 1.0f - mix.lambda_s;
                per_pair.push_back(mix.lambda_s);
            }
            mixed = mix_global(ps, pt, per_pair);
        } else {
            std::vector<GridRect> rects;
            for (std::size_t a = 0; a < B; ++a) {
                draws.push_back(sample_lambda(state.beta(), 1, rng));
                rects.push_back(random_rect(mc.grid(), 1.0 - draws.back().lambda[0], rng));
            }
            auto [seq, lambda_t_cut] = mix_cut(ps, pt, rects, mc.grid());
            mixed = seq;
            for (std::size_t a = 0; a < B; ++a) {
                auto& mix = vf.mixes[a];
                mix.lambda = cut_lambda(mc.grid(), rects[a]);
                mix.log_density = draws[a].log_density;
                mix.lambda_t = lambda_t_cut[a];
                mix.lambda_s = 1.0f - mix.lambda_t;
            }
        }
        for (std::size_t a = 0; a < B; ++a) {
            lambda_s[a] = vf.mixes[a].lambda_s;
            lambda_t[a] = vf.mixes[a].lambda_t;
        }
        ForwardRecord rec_i = bm.encode(*mixed);

        vf.rewards.assign(B, 0.0f);
        auto add_term = [&](PairedLoss&& term, float& slot) {
            slot = term.value.item();
            for (std::size_t a = 0; a < B; ++a) vf.rewards[a] += term.per_pair[a];
            ce_terms.push_back(term.value);
        };
        if (cfg.use_lf) {
            SimilarityTargets sim = build_label_similarity(batch.source_labels, batch.source_labels);
            Var hs = rec_s.pooled, ht = rec_t.pooled;
            auto [f_is, f_it] = feature_space_loss(rec_i.pooled, hs, ht, sim, lambda_s, lambda_t, cfg.tau);
            add_term(std::move(f_is), vf.losses.l_f_is);
            add_term(std::move(f_it), vf.losses.l_f_it);
        }
        if (cfg.use_ll) {
            auto [l_is, l_it] = label_space_loss(rec_i.logits, batch.source_labels,
                                                 std::span<const std::size_t>(pseudo), lambda_s, lambda_t);
            add_term(std::move(l_is), vf.losses.l_l_is);
            add_term(std::move(l_it), vf.losses.l_l_it);
        }
    }

    auto [ce, j] = total_objective(l_cls, ce_terms, alpha);
    vf.losses.ce_total = ce.item();
    vf.losses.j_total = j.item();
    tape.backward(j);
    vf.encoder = detail::collect_grads(detail::encoder_params(model));
    vf.classifier = detail::collect_grads(detail::classifier_params(model));

    vf.draws = draws;
    if (adapt && !draws.empty()) {
        const float baseline = state.reward_baseline.value_or(
            std::accumulate(vf.rewards.begin(), vf.rewards.end(), 0.0f) / static_cast<float>(B));
        vf.ce_score = score_function_grad(state.beta(), draws, vf.rewards, baseline);
        // J_P = −α·CE
        vf.beta = RawGrad{-alpha * vf.ce_score.raw_b, -alpha * vf.ce_score.raw_g};
    }
    return vf;
}

struct StepReport {
    LossBreakdown losses;
    double grad_norm_encoder = 0.0, grad_norm_classifier = 0.0, grad_norm_beta = 0.0;
    double lambda_mean = 0.0, lambda_std = 0.0;
    double beta = 0.0, gamma = 0.0;
};

inline double block_norm(const std::vector<std::vector<float>>& g) {
    double s = 0.0;
    for (const auto& v : g)
        for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

/// One simultaneous update of all three players.
inline StepReport train_step(const DomainBatch& batch, GameState& state, float alpha, Rng& rng, bool adapt = true) {
    VectorField vf = vector_field_blocks(batch, state, alpha, rng, adapt);
    StepReport rep;
    rep.losses = vf.losses;
    rep.grad_norm_encoder = block_norm(vf.encoder);
    rep.grad_norm_classifier = block_norm(vf.classifier);
    rep.grad_norm_beta = std::hypot(vf.beta.raw_b, vf.beta.raw_g);
    if (!std::isfinite(rep.grad_norm_encoder) || !std::isfinite(rep.grad_norm_classifier) ||
        !std::isfinite(rep.grad_norm_beta)) {
        throw NumericError("non-finite gradient block");
    }
    state.opt_encoder().step(vf.encoder);
    state.opt_classifier().step(vf.classifier);
    if (state.config().beta_mode.learnable && !vf.rewards.empty()) {
        std::vector<std::vector<float>> g{{static_cast<float>(vf.beta.raw_b)}, {static_cast<float>(vf.beta.raw_g)}};
        state.opt_beta().step(g);
    }
    if (!vf.rewards.empty()) {
        const float mean_reward =
            std::accumulate(vf.rewards.begin(), vf.rewards.end(), 0.0f) / static_cast<float>(vf.rewards.size());
        const float d = state.config().baseline_decay;
        state.reward_baseline = state.reward_baseline ? d * *state.reward_baseline + (1.0f - d) * mean_reward : mean_reward;
    }
    double sum = 0.0, sq = 0.0, cnt = 0.0;
    for (const auto& m : vf.mixes)
        for (float l : m.lambda) {
            sum += l;
            sq += static_cast<double>(l) * l;
            cnt += 1.0;
        }
    if (cnt > 0) {
        rep.lambda_mean = sum / cnt;
        rep.lambda_std = std::sqrt(std::max(0.0, sq / cnt - rep.lambda_mean * rep.lambda_mean));
    }
    rep.beta = state.beta().beta();
    rep.gamma = state.beta().gamma();
    ++state.step;
    return rep;
}

// ---------------------------------------------------------------------------
// Evaluation and the outer loop

struct Evaluation {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::vector<std::size_t> predictions;
    Tensor features;  // [N, D]
    Tensor probs;     // [N, K]
};

/// Forward the whole dataset without recording gradients.
inline Evaluation evaluate(Model& model, const Dataset& ds, std::size_t eval_batch = 250) {
    const ModelConfig& mc = model.config();
    if (ds.image_numel() != mc.image_numel() || ds.channels() != mc.channels || ds.height() != mc.image_size) {
        throw DimensionError("dataset images do not match the model configuration");
    }
    if (ds.n_classes != mc.n_classes) throw DimensionError("dataset class count does not match the model");
    const std::size_t N = ds.size(), K = mc.n_classes, D = mc.embed_dim;
    Evaluation ev;
    ev.features = Tensor(Shape{N, D});
    ev.probs = Tensor(Shape{N, K});
    ev.predictions.resize(N);
    std::vector<std::size_t> correct(K, 0), total(K, 0);
    std::size_t hits = 0;
    for (std::size_t start = 0; start < N; start += eval_batch) {
        const std::size_t end = std::min(N, start + eval_batch);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        Tape tape(false);
        BoundModel bm(model, tape);
        ForwardRecord rec = bm.forward(ds.batch(idx));
        const auto& h = rec.pooled.value().data;
        const auto& lg = rec.logits.value().data;
        std::copy(h.begin(), h.end(), ev.features.data.begin() + static_cast<std::ptrdiff_t>(start * D));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const float* row = lg.data() + i * K;
            const float mx = *std::max_element(row, row + K);
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
            std::size_t best = 0;
            for (std::size_t k = 0; k < K; ++k) {
                ev.probs.at(start + i, k) = static_cast<float>(std::exp(static_cast<double>(row[k] - mx)) / z);
                if (row[k] > row[best]) best = k;
            }
            ev.predictions[start + i] = best;
            const std::size_t y = ds.labels[start + i];
            ++total[y];
            if (best == y) {
                ++correct[y];
                ++hits;
            }
        }
    }
    ev.accuracy = N ? static_cast<double>(hits) / static_cast<double>(N) : 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        ev.per_class_accuracy.push_back(total[k] ? static_cast<double>(correct[k]) / static_cast<double>(total[k]) : 0.0);
    }
    return ev;
}

/// One line of the metrics history.
struct MetricsRecord {
    std::size_t epoch = 0;
    LossBreakdown losses;
    double beta = 0.0, gamma = 0.0;
    double src_acc = 0.0, tgt_acc = 0.0;
    std::optional<double> pseudo_acc;
    double wall_ms = 0.0;
};

struct FitResult {
    std::unique_ptr<GameState> state;
    std::vector<MetricsRecord> history;
};

inline double pseudo_label_accuracy(const PseudoState& ps, const Dataset& target) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < target.size(); ++i) hits += ps.assignments[i] == target.labels[i];
    return target.size() ? static_cast<double>(hits) / static_cast<double>(target.size()) : 0.0;
}

/// Outer loop: warmup epochs train on the source only; afterwards every
/// epoch starts with a pseudo-label refresh over the full target set and
/// runs the three-player game. One metrics record per epoch plus the
/// initial-state record, each handed to `on_record` as soon as it exists.
inline FitResult fit(const TrainConfig& cfg, const Dataset& source, const Dataset& target,
                     const std::function<void(const MetricsRecord&)>& on_record = {},
                     const std::function<void(const std::string&)>& on_warning = {}) {
    cfg.validate();
    if (source.n_classes != cfg.model.n_classes || target.n_classes != cfg.model.n_classes) {
        throw DimensionError("dataset class count does not match the model configuration");
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed_ms = [&] {
        if (!cfg.record_wall_time) return 0.0;
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    };
    Rng init_rng = make_rng(cfg.seed, 1);
    Rng order_rng = make_rng(cfg.seed, 2);
    Rng mix_rng = make_rng(cfg.seed, 3);
    FitResult res;
    res.state = std::make_unique<GameState>(cfg, init_rng);
    GameState& st = *res.state;

    const std::size_t B = cfg.batch_size;
    const std::size_t steps_per_epoch = std::min(source.size(), target.size()) / B;
    if (steps_per_epoch == 0) throw ConfigError("batch_size exceeds the dataset size");
    const bool mixing = cfg.mix_mode != MixMode::none;
    const std::size_t adapt_epochs = mixing && cfg.epochs > cfg.warmup_epochs ? cfg.epochs - cfg.warmup_epochs : 0;
    st.adapt_total = adapt_epochs * steps_per_epoch;

    auto emit = [&](MetricsRecord r) {
        r.beta = st.beta().beta();
        r.gamma = st.beta().gamma();
        r.wall_ms = elapsed_ms();
        res.history.push_back(r);
        if (on_record) on_record(res.history.back());
    };

    {
        MetricsRecord r;
        r.epoch = 0;
        r.src_acc = evaluate(st.model(), source, cfg.eval_batch).accuracy;
        r.tgt_acc = evaluate(st.model(), target, cfg.eval_batch).accuracy;
        emit(r);
    }

    std::vector<std::size_t> src_order(source.size()), tgt_order(target.size());
    std::iota(src_order.begin(), src_order.end(), 0);
    std::iota(tgt_order.begin(), tgt_order.end(), 0);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const bool adapt = mixing && epoch > cfg.warmup_epochs;
        MetricsRecord r;
        r.epoch = epoch;
        if (adapt) {
            Evaluation ev = evaluate(st.model(), target, cfg.eval_batch);
            st.pseudo = refresh_pseudo_labels(ev.features, ev.probs, cfg.model.n_classes, cfg.kmeans_iterations,
                                              static_cast<int>(epoch));
            if (st.pseudo->underfilled && on_warning) on_warning("fewer target samples than classes");
            r.pseudo_acc = pseudo_label_accuracy(*st.pseudo, target);
        }
        shuffle(src_order, order_rng);
        shuffle(tgt_order, order_rng);
        LossBreakdown sum;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            std::span<const std::size_t> si(src_order.data() + s * B, B), ti(tgt_order.data() + s * B, B);
            DomainBatch batch;
            batch.source_images = source.batch(si);
            batch.source_labels = source.batch_labels(si);
            batch.target_images = target.batch(ti);
            batch.target_indices.assign(ti.begin(), ti.end());
            if (st.pseudo) {
                std::vector<std::size_t> pl;
                for (auto i : ti) pl.push_back(st.pseudo->assignments[i]);
                batch.target_pseudo = std::move(pl);
            }
            float alpha = 0.0f;
            if (adapt) {
                alpha = alpha_schedule(static_cast<double>(st.adapt_step) / static_cast<double>(st.adapt_total));
                ++st.adapt_step;
            }
            StepReport rep = train_step(batch, st, alpha, mix_rng, adapt);
            sum.l_cls += rep.losses.l_cls;
            sum.l_l_is += rep.losses.l_l_is;
            sum.l_l_it += rep.losses.l_l_it;
            sum.l_f_is += rep.losses.l_f_is;
            sum.l_f_it += rep.losses.l_f_it;
            sum.ce_total += rep.losses.ce_total;
            sum.j_total += rep.losses.j_total;
            sum.alpha += rep.losses.alpha;
        }
        const float inv = 1.0f / static_cast<float>(steps_per_epoch);
        r.losses = LossBreakdown{sum.l_cls * inv, sum.l_l_is * inv, sum.l_l_it * inv, sum.l_f_is * inv,
                                 sum.l_f_it * inv, sum.ce_total * inv, sum.j_total * inv, sum.alpha * inv};
        r.src_acc = evaluate(st.model(), source, cfg.eval_batch).accuracy;
        r.tgt_acc = evaluate(st.model(), target, cfg.eval_batch).accuracy;
        emit(r);
    }
    return res;
}

}  // namespace pmtrans
