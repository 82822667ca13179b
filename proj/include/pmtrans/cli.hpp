#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pmtrans/checkpoint.hpp"
#include "pmtrans/config.hpp"
#include "pmtrans/data.hpp"
#include "pmtrans/digest.hpp"
#include "pmtrans/game.hpp"
#include "pmtrans/gradcheck.hpp"
#include "pmtrans/metrics.hpp"

namespace pmtrans::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kDataError = 2, kNumericError = 3, kAcceptanceFailure = 4 };

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
    if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return kDataError;
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DegenerateInputError*>(&e) ||
        dynamic_cast<const OracleError*>(&e))
        return kNumericError;
    if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kDataError;
    return kConfigError;
}

/// Run a command body, turning library errors into an exit code and a
/// one-line message on `err`.
inline int guarded(const std::function<int()>& body, std::ostream& err) {
    try {
        return body();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

inline std::filesystem::path output_path(const RunConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.output_dir);
    return std::filesystem::path(cfg.output_dir) / name;
}

inline std::string config_digest(const RunConfig& cfg) { return sha256_hex(digest_text(cfg)); }

/// Load both datasets and check them against the model configuration.
inline std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg) {
    Dataset src = load(cfg.source_path), tgt = load(cfg.target_path);
    for (const Dataset* ds : {&src, &tgt}) {
        if (ds->n_classes != cfg.train.model.n_classes || ds->channels() != cfg.train.model.channels ||
            ds->height() != cfg.train.model.image_size || ds->width() != cfg.train.model.image_size) {
            throw DimensionError("dataset does not match the configured model (classes, channels or image size)");
        }
    }
    return {std::move(src), std::move(tgt)};
}

// ---------------------------------------------------------------------------

inline int cmd_generate(const RunConfig& cfg, std::ostream& out) {
    cfg.validate();
    auto [src, tgt] = generate_pair(cfg.n_classes_data, cfg.n_per_domain, cfg.shift, cfg.data_seed,
                                    cfg.train.model.image_size);
    for (const auto& [ds, path] : {std::pair{&src, cfg.source_path}, std::pair{&tgt, cfg.target_path}}) {
        if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
            std::filesystem::create_directories(parent);
        save(*ds, path);
        out << sha256_file(path) << "  " << path << '\n';
    }
    return kOk;
}

struct TrainOutcome {
    FitResult fit;
    std::string metrics_path;
    std::string checkpoint_path;
};

inline std::vector<NamedTensor> state_blocks(GameState& st) {
    auto blocks = model_blocks(st.model());
    st.beta().for_each([&blocks](const std::string& name, Tensor& t) { blocks.push_back({name, Tensor(t.shape, t.data)}); });
    return blocks;
}

/// fit() with metrics streamed to `metrics_path` as epochs finish.
inline FitResult train_to_files(const TrainConfig& tc, const Dataset& src, const Dataset& tgt,
                                const std::string& metrics_path, std::ostream* warnings = nullptr) {
    MetricsWriter writer(metrics_path);
    return fit(tc, src, tgt, [&writer](const MetricsRecord& r) { writer(r); },
               [warnings](const std::string& w) {
                   if (warnings) *warnings << "warning: " << w << '\n';
               });
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    cfg.validate();
    auto [src, tgt] = load_datasets(cfg);
    const std::string metrics = output_path(cfg, "metrics.jsonl").string();
    const std::string ckpt = output_path(cfg, "checkpoint.pmtc").string();
    FitResult res = train_to_files(cfg.train, src, tgt, metrics, &err);
    save_checkpoint(ckpt, state_blocks(*res.state));

    nlohmann::ordered_json info;
    info["config_digest"] = config_digest(cfg);
    info["source_digest"] = sha256_file(cfg.source_path);
    info["target_digest"] = sha256_file(cfg.target_path);
    info["metrics"] = metrics;
    info["checkpoint"] = ckpt;
    info["config"] = canonical_text(cfg);
    std::ofstream(output_path(cfg, "run_info.json")) << info.dump(2) << '\n';

    const auto& last = res.history.back();
    out << "config " << info["config_digest"].get<std::string>() << '\n';
    out << std::fixed << std::setprecision(4) << "epochs " << cfg.train.epochs << " src_acc " << last.src_acc
        << " tgt_acc " << last.tgt_acc << '\n';
    out << "metrics " << metrics << "\ncheckpoint " << ckpt << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// Ablation

struct Arm {
    std::string name;
    std::vector<std::pair<std::string, std::string>> overrides;
};

/// "name" or "name:key=value;key=value".
inline Arm parse_arm(const std::string& spec) {
    Arm arm;
    const auto colon = spec.find(':');
    arm.name = detail::trim(spec.substr(0, colon));
    if (arm.name.empty()) throw ConfigError("arm '" + spec + "' has no name");
    if (colon == std::string::npos) return arm;
    std::stringstream ss(spec.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ';')) {
        item = detail::trim(item);
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("arm '" + arm.name + "': expected key=value, got '" + item + "'");
        arm.overrides.emplace_back(detail::trim(item.substr(0, eq)), detail::trim(item.substr(eq + 1)));
    }
    return arm;
}

inline RunConfig arm_config(const RunConfig& base, const Arm& arm) {
    RunConfig c = base;
    for (const auto& [k, v] : arm.overrides) apply_setting(c, k, v);
    c.validate();
    return c;
}

struct RunResult {
    std::string arm;
    std::uint64_t seed = 0;
    std::optional<std::vector<MetricsRecord>> history;  // empty when the run failed
    std::string error;
    int exit_code = kOk;
};

struct AblationResult {
    std::vector<Arm> arms;
    std::vector<std::uint64_t> seeds;
    std::vector<RunResult> runs;  // arm-major, seed-minor

    const RunResult& at(std::size_t arm, std::size_t seed) const { return runs.at(arm * seeds.size() + seed); }

    std::optional<double> median_final_tgt(std::size_t arm) const {
        std::vector<double> v;
        for (std::size_t s = 0; s < seeds.size(); ++s)
            if (const auto& r = at(arm, s); r.history) v.push_back(r.history->back().tgt_acc);
        if (v.empty()) return std::nullopt;
        std::sort(v.begin(), v.end());
        const std::size_t m = v.size() / 2;
        return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    }
};

/// Every arm over every seed, `workers` runs at a time. A failing run is
/// recorded and the rest continue. When `metrics_root` is set, each run
/// streams its metrics to <root>/<arm>/seed<k>.jsonl.
inline AblationResult run_ablation(const RunConfig& base, const std::vector<Arm>& arms, const Dataset& src,
                                   const Dataset& tgt, std::size_t workers,
                                   const std::optional<std::filesystem::path>& metrics_root = std::nullopt) {
    AblationResult res;
    res.arms = arms;
    res.seeds = base.seeds;
    res.runs.resize(arms.size() * base.seeds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t job = next++; job < res.runs.size(); job = next++) {
            const Arm& arm = arms[job / base.seeds.size()];
            const std::uint64_t seed = base.seeds[job % base.seeds.size()];
            RunResult& r = res.runs[job];
            r.arm = arm.name;
            r.seed = seed;
            try {
                RunConfig c = arm_config(base, arm);
                c.train.seed = seed;
                if (metrics_root) {
                    auto dir = *metrics_root / arm.name;
                    std::filesystem::create_directories(dir);
                    r.history = train_to_files(c.train, src, tgt, (dir / ("seed" + std::to_string(seed) + ".jsonl")).string())
                                    .history;
                } else {
                    r.history = fit(c.train, src, tgt).history;
                }
            } catch (const std::exception& e) {
                r.error = e.what();
                r.exit_code = exit_code_for(e);
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < std::max<std::size_t>(workers, 1); ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return res;
}

/// Comma-separated table: one column per arm in declaration order, one row
/// per seed with the final target accuracy, and a closing median row.
inline std::string ablation_csv(const AblationResult& res) {
    std::ostringstream os;
    os << "seed";
    for (const auto& a : res.arms) os << ',' << a.name;
    os << '\n' << std::fixed << std::setprecision(4);
    for (std::size_t s = 0; s < res.seeds.size(); ++s) {
        os << res.seeds[s];
        for (std::size_t a = 0; a < res.arms.size(); ++a) {
            const auto& r = res.at(a, s);
            os << ',';
            if (r.history)
                os << r.history->back().tgt_acc;
            else
                os << "fail";
        }
        os << '\n';
    }
    os << "median";
    for (std::size_t a = 0; a < res.arms.size(); ++a) {
        os << ',';
        if (auto m = res.median_final_tgt(a))
            os << *m;
        else
            os << "fail";
    }
    os << '\n';
    return os.str();
}

inline int cmd_ablate(const RunConfig& cfg, std::vector<Arm> arms, std::ostream& out, std::ostream& err) {
    cfg.validate();
    if (arms.empty()) arms.push_back(Arm{"base", {}});
    for (const auto& a : arms) arm_config(cfg, a);  // reject bad overrides before any run starts
    auto [src, tgt] = load_datasets(cfg);
    AblationResult res = run_ablation(cfg, arms, src, tgt, cfg.workers, output_path(cfg, "ablate"));
    const std::string csv = ablation_csv(res);
    std::ofstream(output_path(cfg, "ablation.csv")) << csv;
    out << "config " << config_digest(cfg) << '\n' << csv;
    int code = kOk;
    for (const auto& r : res.runs) {
        if (r.history) continue;
        err << "run " << r.arm << " seed " << r.seed << " failed: " << r.error << '\n';
        if (code == kOk) code = r.exit_code;
    }
    return code;
}

// ---------------------------------------------------------------------------

inline int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out) {
    GradcheckReport rep = run_gradcheck(opt);
    out << std::scientific << std::setprecision(3);
    for (const auto& c : rep.checks) {
        out << (c.pass ? "PASS " : "FAIL ") << std::left << std::setw(11) << c.block << std::setw(42) << c.name
            << " rel_err " << c.error << " tol " << c.tolerance << '\n';
    }
    out << "max rel_err per block:\n";
    for (const auto& [block, e] : rep.max_error_by_block()) out << "  " << std::setw(11) << block << ' ' << e << '\n';
    out << std::fixed << std::setprecision(1) << "runtime " << rep.seconds << " s\n";
    out << (rep.passed() ? "gradcheck passed" : "gradcheck FAILED") << '\n';
    return rep.passed() ? kOk : kAcceptanceFailure;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& dataset, std::ostream& out) {
    cfg.validate();
    Rng init = make_rng(cfg.train.seed, 1);
    Model model(cfg.train.model, init);
    restore_model(model, load_checkpoint(checkpoint));
    Dataset ds = load(dataset);
    Evaluation ev = evaluate(model, ds, cfg.train.eval_batch);
    out << std::fixed << std::setprecision(4) << "samples " << ds.size() << "\naccuracy " << ev.accuracy << '\n';
    for (std::size_t k = 0; k < ev.per_class_accuracy.size(); ++k)
        out << "class " << k << ' ' << ev.per_class_accuracy[k] << '\n';
    return kOk;
}

}  // namespace pmtrans::cli
