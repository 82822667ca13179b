// End-to-end acceptance suite: one PASS/FAIL line per criterion, exit 4 if
// any fails.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pmtrans/attention.hpp"
#include "pmtrans/cli.hpp"
#include "pmtrans/patchmix.hpp"
#include "test_support.hpp"

using namespace pmtrans;

namespace {

int failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

PatchSequence random_sequence(Tape& tape, std::size_t batch, std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng = make_rng(seed, 3);
    return PatchSequence{tape.constant(random_tensor({batch * n, d}, rng)), batch};
}

std::vector<float> normalized(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    double s = 0.0;
    for (auto& x : v) s += (x = static_cast<float>(uniform01(rng) + 1e-3));
    for (auto& x : v) x = static_cast<float>(x / s);
    return v;
}

Model perturbed_default_model(std::uint64_t seed) {
    ModelConfig cfg;
    Rng rng = make_rng(seed, 1);
    Model m(cfg, rng);
    m.for_each_parameter([&rng](const std::string&, Tensor& t) {
        for (auto& v : t.data) v += 0.3f * static_cast<float>(standard_normal(rng));
    });
    return m;
}

Tensor random_images(std::size_t n, std::uint64_t seed) {
    ModelConfig cfg;
    Rng rng = make_rng(seed, 5);
    Tensor t(Shape{n, cfg.image_numel()});
    for (auto& v : t.data) v = static_cast<float>(uniform01(rng));
    return t;
}

void gradient_oracle() {
    GradcheckReport rep = run_gradcheck();
    double worst_fd = 0.0, mc = 0.0;
    for (const auto& c : rep.checks) {
        if (c.tolerance == 0.05)
            mc = c.error;
        else
            worst_fd = std::max(worst_fd, c.error);
    }
    report(rep.passed() && rep.seconds < 120.0, "gradient oracle",
           fmt("max FD rel-err %.2e (tol 1e-3), MC rel-err %.2e (tol 5e-2), %.1f s (limit 120 s)", worst_fd, mc,
               rep.seconds));
}

void mixing_identities() {
    Rng rng = make_rng(11, 1);
    double worst_sum = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t n = 1 + uniform_index(rng, 16);
        std::vector<float> lam(n);
        for (auto& l : lam) l = static_cast<float>(uniform01(rng));
        auto as = normalized(rng, n), at = normalized(rng, n);
        auto [ls, lt] = mix_weights(lam, as, at);
        worst_sum = std::max(worst_sum, std::abs(static_cast<double>(ls) + lt - 1.0));
    }

    Tape tape;
    PatchSequence s = random_sequence(tape, 2, 16, 32, 1), t = random_sequence(tape, 2, 16, 32, 2);
    // Copy values out: later tape pushes may move them.
    const std::vector<float> sv = s.tokens.value().data, tv = t.tokens.value().data;
    std::vector<float> ones(32, 1.0f), zeros(32, 0.0f);
    const std::vector<float> all_src = mix_sequences(s, t, ones).tokens.value().data;
    const std::vector<float> all_tgt = mix_sequences(s, t, zeros).tokens.value().data;
    const bool limits = all_src == sv && all_tgt == tv;

    Model m = perturbed_default_model(3);
    Tensor x = random_images(2, 10), y = random_images(2, 11);
    double worst_affine = 0.0;
    for (float lam : {0.0f, 0.3f, 0.77f, 1.0f}) {
        Tensor mixed(x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) mixed[i] = lam * x[i] + (1.0f - lam) * y[i];
        Tape tp;
        BoundModel bm(m, tp);
        const std::vector<float> em = bm.patch_embed(mixed).tokens.value().data;
        const std::vector<float> ex = bm.patch_embed(x).tokens.value().data;
        const std::vector<float> ey = bm.patch_embed(y).tokens.value().data;
        for (std::size_t i = 0; i < em.size(); ++i)
            worst_affine = std::max(worst_affine, static_cast<double>(std::abs(em[i] - (lam * ex[i] + (1.0f - lam) * ey[i]))));
    }

    std::vector<float> per_pair{0.3f, 0.8f}, per_patch(32);
    for (std::size_t i = 0; i < 32; ++i) per_patch[i] = per_pair[i / 16];
    const std::vector<float> global_mix = mix_global(s, t, per_pair).tokens.value().data;
    const bool global = global_mix == mix_sequences(s, t, per_patch).tokens.value().data;
    std::vector<GridRect> rects{{1, 0, 2, 3}, {0, 0, 4, 4}};
    auto [cut, lt] = mix_cut(s, t, rects, 4);
    const std::vector<float> cut_mix = cut.tokens.value().data;
    std::vector<float> binary(32, 1.0f);
    for (std::size_t r = 1; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) binary[r * 4 + c] = 0.0f;
    for (std::size_t k = 16; k < 32; ++k) binary[k] = 0.0f;
    const bool cut_ok = cut_mix == mix_sequences(s, t, binary).tokens.value().data &&
                        lt[0] == 6.0f / 16.0f && lt[1] == 1.0f;

    report(worst_sum <= 1e-6 && limits && worst_affine <= 1e-5 && global && cut_ok, "mixing identities",
           fmt("max |ls+lt-1| %.1e over 1e4 draws (tol 1e-6), exact limits %g, affine commutation %.1e (tol 1e-5)",
               worst_sum, limits ? 1.0 : 0.0, worst_affine) +
               ", global/cut equalities " + (global && cut_ok ? "exact" : "broken"));
}

void aligned_domains() {
    auto a = pmtrans::testing::aligned_label_space_terms(0);
    report(a.l_l_is < 1e-3 && a.l_l_it < 1e-3, "aligned label-space terms",
           fmt("L_l^is %.2e, L_l^it %.2e (tol 1e-3); source acc %.3f, source CE %.1e", a.l_l_is, a.l_l_it,
               a.source_accuracy, a.source_ce));
}

void attention_contracts() {
    Model m = perturbed_default_model(2);
    Tape tape;
    BoundModel bm(m, tape);
    ForwardRecord rec = bm.forward(random_images(4, 12));
    std::vector<std::size_t> labels{0, 3, 1, 2};
    double worst = 0.0;
    bool nonneg = true;
    auto check = [&](const std::vector<AttentionScores>& all) {
        for (const auto& sc : all) {
            double sum = 0.0;
            for (float v : sc.scores) {
                nonneg = nonneg && v >= 0.0f;
                sum += v;
            }
            worst = std::max(worst, std::abs(sum - 1.0));
        }
    };
    check(cls_attention_scores(rec));
    check(cam_attention_scores(rec, m.classifier().weight, labels));

    Tape t2;
    ForwardRecord hand;
    hand.input.batch = 1;
    hand.features = t2.constant(Tensor(Shape{2, 2}, std::vector<float>{1, 0, 0, 1}));
    std::vector<std::size_t> cls{0};
    auto sc = cam_attention_scores(hand, Tensor(Shape{2, 2}, std::vector<float>{2, 0, -1, 5}), cls)[0].scores;
    const double hand_err = std::max(std::abs(sc[0] - 0.8808), std::abs(sc[1] - 0.1192));
    report(nonneg && worst <= 1e-5 && hand_err <= 1e-3, "attention contracts",
           fmt("max |sum-1| %.1e (tol 1e-5), CAM hand example [%.4f, %.4f] error %.1e (tol 1e-3)", worst, sc[0], sc[1],
               hand_err));
}

void game_sign() {
    auto [src, tgt] = generate_pair(4, 64, ShiftSpec::default_target(), 0);
    bool exact = true, applied = true;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TrainConfig cfg;
        Rng init = make_rng(seed, 1);
        GameState st(cfg, init);
        Evaluation ev = evaluate(st.model(), tgt);
        st.pseudo = refresh_pseudo_labels(ev.features, ev.probs, 4);
        std::vector<std::size_t> idx(32);
        for (std::size_t i = 0; i < 32; ++i) idx[i] = (i * 7 + seed) % 64;
        DomainBatch batch;
        batch.source_images = src.batch(idx);
        batch.source_labels = src.batch_labels(idx);
        batch.target_images = tgt.batch(idx);
        batch.target_indices = idx;
        std::vector<std::size_t> pl;
        for (auto i : idx) pl.push_back(st.pseudo->assignments[i]);
        batch.target_pseudo = pl;
        const float alpha = 0.25f + 0.15f * static_cast<float>(seed);
        Rng probe = make_rng(seed, 9);
        VectorField vf = vector_field_blocks(batch, st, alpha, probe);
        const double descent_b = -(alpha * vf.ce_score.raw_b), descent_g = -(alpha * vf.ce_score.raw_g);
        // Applied update is −lr·(P block); the P block must equal the descent
        // direction on +α·CE, so the step is its exact negation.
        exact = exact && vf.beta.raw_b == descent_b && vf.beta.raw_g == descent_g;
        const double b0 = st.beta().raw_b.item(), g0 = st.beta().raw_g.item();
        Rng rng = make_rng(seed, 9);
        train_step(batch, st, alpha, rng);
        const double db = st.beta().raw_b.item() - b0, dg = st.beta().raw_g.item() - g0;
        if (descent_b != 0.0) applied = applied && std::signbit(db) != std::signbit(descent_b);
        if (descent_g != 0.0) applied = applied && std::signbit(dg) != std::signbit(descent_g);
    }
    report(exact && applied, "game sign property",
           std::string("P block equals -(alpha * dCE/dP) bit for bit over 5 batches: ") + (exact ? "yes" : "no") +
               ", applied first step opposes descent on +alpha*CE: " + (applied ? "yes" : "no"));
}

void determinism(const Dataset& src, const Dataset& tgt) {
    const auto dir = std::filesystem::temp_directory_path() / "pmtrans_acceptance";
    std::filesystem::create_directories(dir);
    TrainConfig cfg;
    const auto a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string();
    cli::train_to_files(cfg, src, tgt, a);
    cli::train_to_files(cfg, src, tgt, b);
    const std::string ma = slurp(a), mb = slurp(b);
    report(!ma.empty() && ma == mb, "determinism",
           fmt("two default runs, seed 0: metrics files of %.0f and %.0f bytes, ", static_cast<double>(ma.size()),
               static_cast<double>(mb.size())) +
               (ma == mb ? "byte-identical" : "differ"));
}

void ablation_criteria(const Dataset& src, const Dataset& tgt) {
    RunConfig base;
    base.train.record_wall_time = true;
    const std::vector<cli::Arm> arms{
        {"full", {}},
        {"source_only", {{"mix_mode", "none"}}},
        {"cls_ll", {{"use_lf", "false"}}},
        {"cls_lf", {{"use_ll", "false"}}},
        {"mixup", {{"mix_mode", "mixup"}}},
        {"cutmix", {{"mix_mode", "cutmix"}}},
        {"fixed_beta", {{"beta_mode", "fixed:1:1"}}},
    };
    const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
    cli::AblationResult res = cli::run_ablation(base, arms, src, tgt, workers);
    std::cout << "ablation (final target accuracy, " << base.seeds.size() << " seeds, " << workers << " workers)\n"
              << cli::ablation_csv(res);

    bool complete = true;
    double slowest = 0.0;
    for (const auto& r : res.runs) {
        if (!r.history) {
            complete = false;
            std::cout << "run " << r.arm << " seed " << r.seed << " failed: " << r.error << '\n';
        } else {
            slowest = std::max(slowest, r.history->back().wall_ms);
        }
    }
    auto med = [&](std::size_t arm) { return res.median_final_tgt(arm).value_or(-1.0); };
    const double full = med(0), none = med(1), ll = med(2), lf = med(3), mixup = med(4), cutmix = med(5),
                 fixed = med(6);
    const double tie = 0.01;

    report(complete && full - none >= 0.10 && slowest <= 600000.0, "domain-adaptation efficacy",
           fmt("median full %.4f vs source-only %.4f, gain %.1f points (need 10); slowest run %.0f s (limit 600 s)", full,
               none, 100.0 * (full - none), slowest / 1000.0));
    report(complete && full >= ll - tie && ll >= lf - tie && lf >= none - tie, "semi-supervised loss ordering",
           fmt("full %.4f >= cls+L_l %.4f >= cls+L_f %.4f >= cls-only %.4f (ties 1 point)", full, ll, lf, none));
    report(complete && full >= mixup - tie && full >= cutmix - tie, "PatchMix ordering",
           fmt("patchmix %.4f >= mixup %.4f and >= cutmix %.4f (ties 1 point)", full, mixup, cutmix));
    report(complete && full >= fixed - tie, "learnable Beta",
           fmt("learnable %.4f >= fixed Beta(1,1) %.4f - 1 point", full, fixed));

    std::vector<double> raw, refined;
    const std::size_t w = base.train.warmup_epochs;
    for (std::size_t s = 0; s < res.seeds.size(); ++s) {
        const auto& r = res.at(0, s);
        if (!r.history || r.history->size() <= w + 1 || !(*r.history)[w + 1].pseudo_acc) continue;
        raw.push_back((*r.history)[w].tgt_acc);
        refined.push_back(*(*r.history)[w + 1].pseudo_acc);
    }
    const bool have = raw.size() == res.seeds.size();
    report(have && median(refined) >= median(raw), "pseudo-label quality",
           have ? fmt("median pseudo-label accuracy %.4f vs raw argmax %.4f after the warmup refresh", median(refined),
                      median(raw))
                : std::string("missing refresh records"));
}

}  // namespace

int main() {
    auto guarded = [](const char* name, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(false, name, std::string("threw: ") + e.what());
        }
    };
    guarded("gradient oracle", gradient_oracle);
    guarded("mixing identities", mixing_identities);
    guarded("aligned label-space terms", aligned_domains);
    guarded("attention contracts", attention_contracts);
    guarded("game sign property", game_sign);

    auto [src, tgt] = generate_pair(4, 2000, ShiftSpec::default_target(), 0);
    guarded("determinism", [&] { determinism(src, tgt); });
    guarded("ablation", [&] { ablation_criteria(src, tgt); });

    std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? cli::kOk : cli::kAcceptanceFailure;
}
