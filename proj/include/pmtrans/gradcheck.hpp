#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pmtrans/game.hpp"
#include "pmtrans/losses.hpp"
#include "pmtrans/numerics/finite_diff.hpp"
#include "pmtrans/numerics/ops.hpp"
#include "pmtrans/patchmix.hpp"

namespace pmtrans {

inline Tensor random_tensor(Shape shape, Rng& rng, float scale = 1.0f) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = scale * static_cast<float>(standard_normal(rng));
    return t;
}

using GraphFn = std::function<Var(Tape&, std::vector<Var>&)>;

/// Worst norm-wise relative error between tape gradients and central
/// differences over every input of `graph`. Non-scalar outputs are projected
/// onto a fixed random direction; the oracle side does that reduction in
/// double so only the ops' own rounding remains. `flip` negates the analytic
/// side (mutation check).
inline double graph_gradient_error(const GraphFn& graph, const std::vector<Tensor>& inputs, std::uint64_t seed = 7,
                                   float h = 1e-3f, bool flip = false) {
    Tensor probe;
    auto ensure_probe = [&](const Var& out) {
        if (probe.size() != out.size()) {
            Rng rng = make_rng(seed, 99);
            probe = random_tensor(out.shape(), rng);
        }
    };
    auto scalar = [&](Tape& tape, std::vector<Var>& vars) {
        Var out = graph(tape, vars);
        if (out.size() == 1) return out;
        ensure_probe(out);
        return ops::sum(ops::mul(out, tape.constant(probe)));
    };
    auto projected = [&](Tape& tape, std::vector<Var>& vars) {
        Var out = graph(tape, vars);
        if (out.size() == 1) return static_cast<double>(out.item());
        ensure_probe(out);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out.value()[i]) * probe[i];
        return s;
    };
    double worst = 0.0;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        Tape tape;
        std::vector<Var> vars;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            vars.push_back(i == which ? tape.variable(inputs[i]) : tape.constant(inputs[i]));
        tape.backward(scalar(tape, vars));
        auto g = tape.grad(vars[which]);
        std::vector<float> analytic(g.begin(), g.end());
        if (analytic.empty()) analytic.assign(inputs[which].size(), 0.0f);
        if (flip)
            for (auto& v : analytic) v = -v;
        auto f = [&](std::span<const float> theta) {
            Tape t(false);
            std::vector<Var> vs;
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                Tensor in = inputs[i];
                if (i == which) std::copy(theta.begin(), theta.end(), in.data.begin());
                vs.push_back(t.constant(std::move(in)));
            }
            return projected(t, vs);
        };
        worst = std::max(worst, relative_error(analytic, finite_diff_grad(f, inputs[which].data, h)));
    }
    return worst;
}

struct GradcheckOptions {
    std::uint64_t seed = 0;
    bool inject_sign_error = false;
    std::size_t mc_draws = 1000000;
};

struct CheckResult {
    std::string block;
    std::string name;
    double error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradcheckReport {
    std::vector<CheckResult> checks;
    double seconds = 0.0;

    bool passed() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return !checks.empty();
    }

    std::map<std::string, double> max_error_by_block() const {
        std::map<std::string, double> out;
        for (const auto& c : checks) out[c.block] = std::max(out[c.block], c.error);
        return out;
    }
};

namespace detail {

inline TrainConfig gradcheck_game_config(MixMode mode) {
    TrainConfig cfg;
    cfg.model.image_size = 16;
    cfg.model.patch_size = 8;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.embed_dim = 8;
    cfg.model.mlp_ratio = 2;
    cfg.model.n_classes = 3;
    cfg.model.use_cls_token = false;
    cfg.attention = AttentionMethod::cam;
    cfg.mix_mode = mode;
    cfg.batch_size = 2;
    return cfg;
}

/// Every model parameter against central differences of a random
/// projection of the logits, for one pooling mode.
inline double logit_gradient_error(bool cls_pooling, std::uint64_t seed, bool flip) {
    ModelConfig cfg = gradcheck_game_config(MixMode::patchmix).model;
    cfg.use_cls_token = cls_pooling;
    Rng rng = make_rng(seed, 50);
    Model m(cfg, rng);
    m.for_each_parameter([&rng](const std::string&, Tensor& t) {
        for (auto& v : t.data) v += 0.3f * static_cast<float>(standard_normal(rng));
    });
    Tensor images(Shape{2, cfg.image_numel()});
    for (auto& v : images.data) v = static_cast<float>(uniform01(rng));
    Tensor probe = random_tensor({2, cfg.n_classes}, rng);

    std::vector<Tensor*> params;
    m.for_each_parameter([&params](const std::string&, Tensor& t) { params.push_back(&t); });
    m.zero_grad();
    Tape tape;
    BoundModel bm(m, tape);
    tape.backward(ops::sum(ops::mul(bm.forward(images).logits, tape.constant(probe))));
    std::vector<float> analytic, theta;
    for (Tensor* p : params) {
        analytic.insert(analytic.end(), p->grad->begin(), p->grad->end());
        theta.insert(theta.end(), p->data.begin(), p->data.end());
    }
    if (flip)
        for (auto& v : analytic) v = -v;
    auto f = [&](std::span<const float> t) {
        std::size_t off = 0;
        for (Tensor* p : params) {
            std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->data.begin());
            off += p->size();
        }
        Tape eval(false);
        BoundModel em(m, eval);
        const Tensor& lg = em.forward(images).logits.value();
        double s = 0.0;
        for (std::size_t i = 0; i < lg.size(); ++i) s += static_cast<double>(lg[i]) * probe[i];
        return s;
    };
    auto numeric = finite_diff_grad(f, theta, 3e-3f);
    f(theta);
    return relative_error(analytic, numeric);
}

/// ∇J for the encoder and classifier blocks against central differences of
/// J on a two-pair batch, with the sampled mixes replayed so J is a
/// deterministic function of the parameters.
inline std::pair<double, double> game_gradient_errors(MixMode mode, std::uint64_t seed, bool flip) {
    TrainConfig cfg = gradcheck_game_config(mode);
    Rng init = make_rng(seed, 1);
    GameState st(cfg, init);
    Rng data = make_rng(seed, 40);
    DomainBatch batch;
    const std::size_t per = cfg.model.image_numel();
    batch.source_images = Tensor(Shape{2, per});
    batch.target_images = Tensor(Shape{2, per});
    for (auto& v : batch.source_images.data) v = static_cast<float>(uniform01(data));
    for (auto& v : batch.target_images.data) v = static_cast<float>(uniform01(data));
    batch.source_labels = {0, 1};
    batch.target_indices = {0, 1};
    batch.target_pseudo = std::vector<std::size_t>{1, 2};
    const float alpha = 0.8f;
    Rng rng = make_rng(seed, 3);
    VectorField ref = vector_field_blocks(batch, st, alpha, rng);

    auto block_error = [&](bool encoder) {
        std::vector<Tensor*> params;
        auto collect = [&params](const std::string&, Tensor& t) { params.push_back(&t); };
        if (encoder)
            st.model().encoder().for_each(collect);
        else
            st.model().classifier().for_each(collect);
        const auto& grads = encoder ? ref.encoder : ref.classifier;
        std::vector<float> analytic, theta;
        for (std::size_t i = 0; i < params.size(); ++i) {
            analytic.insert(analytic.end(), grads[i].begin(), grads[i].end());
            theta.insert(theta.end(), params[i]->data.begin(), params[i]->data.end());
        }
        if (flip)
            for (auto& v : analytic) v = -v;
        auto j = [&](std::span<const float> t) {
            std::size_t off = 0;
            for (Tensor* p : params) {
                std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->data.begin());
                off += p->size();
            }
            Rng unused = make_rng(0, 0);
            return vector_field_blocks(batch, st, alpha, unused, true, &ref).losses.j_total;
        };
        // Whole-model J is a long float32 chain; 3e-3 keeps rounding noise
        // in the differences well under the tolerance.
        auto numeric = finite_diff_grad(j, theta, 3e-3f);
        j(theta);
        return relative_error(analytic, numeric);
    };
    return {block_error(true), block_error(false)};
}

}  // namespace detail

/// d E[λ] / dβ at (β, γ) by the score-function estimator, in chunks.
inline double beta_mean_derivative_estimate(double beta, double gamma, std::size_t draws, std::uint64_t seed) {
    BetaParams p = BetaParams::from_shape(beta, gamma);
    Rng rng = make_rng(seed, 21);
    const std::size_t chunk = 10000;
    double acc = 0.0;
    std::size_t done = 0;
    const float baseline = static_cast<float>(beta / (beta + gamma));
    while (done < draws) {
        const std::size_t m = std::min(chunk, draws - done);
        std::vector<LambdaDraw> ds;
        std::vector<float> rewards;
        ds.reserve(m);
        for (std::size_t i = 0; i < m; ++i) {
            ds.push_back(sample_lambda(p, 1, rng));
            rewards.push_back(ds.back().lambda[0]);
        }
        acc += score_function_grad(p, ds, rewards, baseline).raw_b * static_cast<double>(m);
        done += m;
    }
    // chain rule through β = softplus(raw_b) + 0.01
    return acc / static_cast<double>(draws) / sigmoid(p.raw_b[0]);
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckReport rep;
    const bool flip = opt.inject_sign_error;
    auto add = [&rep](std::string block, std::string name, double err, double tol) {
        rep.checks.push_back({std::move(block), std::move(name), err, tol, err <= tol});
    };
    Rng rng = make_rng(opt.seed, 30);
    auto r = [&](Shape s, float scale = 1.0f) { return random_tensor(std::move(s), rng, scale); };
    using V = std::vector<Var>;
    auto op = [&](const char* name, const GraphFn& g, std::vector<Tensor> in) {
        add("ops", name, graph_gradient_error(g, in, opt.seed, 1e-3f, flip), 1e-3);
    };
    op("matmul", [](Tape&, V& v) { return ops::matmul(v[0], v[1]); }, {r({16, 8}), r({8, 16})});
    op("gelu", [](Tape&, V& v) { return ops::gelu(v[0]); }, {r({16, 16}, 2.0f)});
    op("layer_norm", [](Tape&, V& v) { return ops::layer_norm(v[0], v[1], v[2]); }, {r({6, 16}), r({16}), r({16})});
    op("softmax", [](Tape&, V& v) { return ops::softmax(v[0], 1); }, {r({8, 8}, 2.0f)});
    op("cosine_matrix", [](Tape&, V& v) { return ops::cosine_matrix(v[0], v[1]); }, {r({5, 8}), r({7, 8})});
    op("self_attention", [](Tape&, V& v) { return ops::self_attention(v[0], 2, 5, 2, nullptr); }, {r({10, 24})});

    // Loss terms with respect to their logits / features.
    const std::vector<std::size_t> ys{0, 2, 2, 1}, yt{1, 1, 0, 3};
    const std::vector<float> ls{0.7f, 0.2f, 0.55f, 0.9f}, lt{0.3f, 0.8f, 0.45f, 0.1f};
    add("losses", "source_cls_loss",
        graph_gradient_error([&](Tape&, V& v) { return source_cls_loss(v[0], ys); }, {r({4, 4}, 2.0f)}, opt.seed,
                             1e-3f, flip),
        1e-3);
    add("losses", "label_space_loss",
        graph_gradient_error(
            [&](Tape&, V& v) {
                auto [is, it] = label_space_loss(v[0], ys, std::span<const std::size_t>(yt), ls, lt);
                return ops::add(is.value, it.value);
            },
            {r({4, 4}, 2.0f)}, opt.seed, 1e-3f, flip),
        1e-3);
    const SimilarityTargets sim = build_label_similarity(ys, ys);
    add("losses", "feature_space_loss",
        graph_gradient_error(
            [&](Tape&, V& v) {
                auto [is, it] = feature_space_loss(v[0], v[1], v[2], sim, ls, lt, 0.1f);
                return ops::add(is.value, it.value);
            },
            {r({4, 8}), r({4, 8}), r({4, 8})}, opt.seed, 1e-3f, flip),
        1e-3);

    add("model", "logits wrt model (mean pooling)", detail::logit_gradient_error(false, opt.seed, flip), 1e-3);
    add("model", "logits wrt model (cls pooling)", detail::logit_gradient_error(true, opt.seed, flip), 1e-3);

    for (MixMode mode : {MixMode::patchmix, MixMode::mixup, MixMode::cutmix}) {
        auto [enc, cls] = detail::game_gradient_errors(mode, opt.seed, flip);
        const std::string tag = mode == MixMode::patchmix ? "patchmix" : mode == MixMode::mixup ? "mixup" : "cutmix";
        add("encoder", "J wrt encoder (" + tag + ")", enc, 1e-3);
        add("classifier", "J wrt classifier (" + tag + ")", cls, 1e-3);
    }

    // Beta log-density against its finite differences, then the moment check.
    add("beta", "log density wrt raw parameters",
        graph_gradient_error(
            [](Tape&, V& v) {
                const std::vector<float> s{0.1f, 0.35f, 0.5f, 0.8f, 0.97f};
                return beta_log_density(v[0], v[1], s);
            },
            {Tensor::scalar(0.4f), Tensor::scalar(-0.3f)}, opt.seed, 1e-3f, flip),
        1e-3);
    const double exact = 2.0 / ((2.0 + 2.0) * (2.0 + 2.0));
    double est = beta_mean_derivative_estimate(2.0, 2.0, opt.mc_draws, opt.seed);
    if (flip) est = -est;
    add("beta", "Monte Carlo dE[lambda]/dbeta at (2,2)", std::abs(est - exact) / exact, 0.05);

    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace pmtrans
