#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pmtrans/data.hpp"
#include "pmtrans/errors.hpp"
#include "pmtrans/game.hpp"

namespace pmtrans {

/// Everything one run needs, read from a flat `key = value` file.
struct RunConfig {
    TrainConfig train;
    std::string source_path = "source.pmds";
    std::string target_path = "target.pmds";
    std::string output_dir = "out";
    std::size_t n_classes_data = 4;
    std::size_t n_per_domain = 2000;
    std::uint64_t data_seed = 0;
    ShiftSpec shift = ShiftSpec::default_target();
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::size_t workers = 1;

    void validate() const {
        train.validate();
        shift.validate();
        if (n_classes_data != train.model.n_classes) throw ConfigError("n_classes must match between data and model");
        if (n_classes_data < 2 || n_classes_data > kMaxGlyphClasses)
            throw ConfigError("n_classes must lie in [2, " + std::to_string(kMaxGlyphClasses) + "]");
        if (n_per_domain < n_classes_data) throw ConfigError("n_per_domain must be at least n_classes");
        if (train.model.channels != 1) throw ConfigError("the synthetic datasets are single-channel");
        if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
        if (workers == 0) throw ConfigError("workers must be at least 1");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw ConfigError("key '" + key + "': cannot parse '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

/// Shortest text that reads back to the same value.
template <typename T>
std::string format_float(T v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace detail

inline std::string to_string(MixMode m) {
    switch (m) {
        case MixMode::patchmix: return "patchmix";
        case MixMode::mixup: return "mixup";
        case MixMode::cutmix: return "cutmix";
        case MixMode::none: return "none";
    }
    return "?";
}

inline std::string to_string(const BetaMode& b) {
    if (b.learnable) return "learnable";
    return "fixed:" + detail::format_float(b.beta) + ":" + detail::format_float(b.gamma);
}

/// Key table: each entry knows how to read and print one field.
class ConfigSchema {
public:
    struct Entry {
        std::function<void(RunConfig&, const std::string&)> set;
        std::function<std::string(const RunConfig&)> get;
    };

    static const std::map<std::string, Entry>& entries() {
        static const std::map<std::string, Entry> table = build();
        return table;
    }

    /// Keys that every config file must name.
    static const std::set<std::string>& required() {
        static const std::set<std::string> keys{"seed"};
        return keys;
    }

private:
    template <typename T, typename Get>
    static Entry number(Get get) {
        return Entry{[get](RunConfig& c, const std::string& v) { get(c) = detail::parse_number<T>("", v); },
                     [get](const RunConfig& c) {
                         if constexpr (std::is_floating_point_v<T>)
                             return detail::format_float(get(const_cast<RunConfig&>(c)));
                         else
                             return std::to_string(get(const_cast<RunConfig&>(c)));
                     }};
    }

    static Entry flag(std::function<bool&(RunConfig&)> get) {
        return Entry{[get](RunConfig& c, const std::string& v) { get(c) = detail::parse_bool("", v); },
                     [get](const RunConfig& c) { return get(const_cast<RunConfig&>(c)) ? "true" : "false"; }};
    }

    static Entry text(std::function<std::string&(RunConfig&)> get) {
        return Entry{[get](RunConfig& c, const std::string& v) { get(c) = v; },
                     [get](const RunConfig& c) { return get(const_cast<RunConfig&>(c)); }};
    }

    static std::map<std::string, Entry> build() {
        std::map<std::string, Entry> t;
        t["seed"] = number<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
        t["image_size"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.model.image_size; });
        t["channels"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.model.channels; });
        t["patch_size"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.model.patch_size; });
        t["n_layers"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.model.n_layers; });
        t["n_heads"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.model.n_heads; });
        t["embed_dim"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.model.embed_dim; });
        t["mlp_ratio"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.model.mlp_ratio; });
        t["n_classes"] = Entry{[](RunConfig& c, const std::string& v) {
                                   c.train.model.n_classes = c.n_classes_data =
                                       detail::parse_number<std::size_t>("n_classes", v);
                               },
                               [](const RunConfig& c) { return std::to_string(c.train.model.n_classes); }};
        t["pooling"] = Entry{[](RunConfig& c, const std::string& v) {
                                 if (v == "cls")
                                     c.train.model.use_cls_token = true;
                                 else if (v == "mean")
                                     c.train.model.use_cls_token = false;
                                 else
                                     throw ConfigError("pooling must be cls or mean, got '" + v + "'");
                             },
                             [](const RunConfig& c) { return std::string(c.train.model.use_cls_token ? "cls" : "mean"); }};
        t["attention"] = Entry{[](RunConfig& c, const std::string& v) {
                                   if (v == "cls")
                                       c.train.attention = AttentionMethod::cls;
                                   else if (v == "cam")
                                       c.train.attention = AttentionMethod::cam;
                                   else
                                       throw ConfigError("attention must be cls or cam, got '" + v + "'");
                               },
                               [](const RunConfig& c) {
                                   return std::string(c.train.attention == AttentionMethod::cls ? "cls" : "cam");
                               }};
        t["mix_mode"] = Entry{[](RunConfig& c, const std::string& v) {
                                  if (v == "patchmix")
                                      c.train.mix_mode = MixMode::patchmix;
                                  else if (v == "mixup")
                                      c.train.mix_mode = MixMode::mixup;
                                  else if (v == "cutmix")
                                      c.train.mix_mode = MixMode::cutmix;
                                  else if (v == "none")
                                      c.train.mix_mode = MixMode::none;
                                  else
                                      throw ConfigError("mix_mode must be patchmix, mixup, cutmix or none, got '" + v + "'");
                              },
                              [](const RunConfig& c) { return to_string(c.train.mix_mode); }};
        t["beta_mode"] = Entry{[](RunConfig& c, const std::string& v) {
                                   if (v == "learnable") {
                                       c.train.beta_mode = BetaMode{};
                                       return;
                                   }
                                   const std::string prefix = "fixed:";
                                   const auto colon = v.find(':', prefix.size());
                                   if (v.rfind(prefix, 0) != 0 || colon == std::string::npos)
                                       throw ConfigError("beta_mode must be learnable or fixed:<beta>:<gamma>, got '" + v + "'");
                                   BetaMode b;
                                   b.learnable = false;
                                   b.beta = detail::parse_number<double>("beta_mode", v.substr(prefix.size(), colon - prefix.size()));
                                   b.gamma = detail::parse_number<double>("beta_mode", v.substr(colon + 1));
                                   c.train.beta_mode = b;
                               },
                               [](const RunConfig& c) { return to_string(c.train.beta_mode); }};
        t["use_lf"] = flag([](RunConfig& c) -> bool& { return c.train.use_lf; });
        t["use_ll"] = flag([](RunConfig& c) -> bool& { return c.train.use_ll; });
        t["tau"] = number<float>([](RunConfig& c) -> float& { return c.train.tau; });
        t["lr_encoder"] = number<float>([](RunConfig& c) -> float& { return c.train.lr_encoder; });
        t["lr_classifier"] = number<float>([](RunConfig& c) -> float& { return c.train.lr_classifier; });
        t["lr_beta"] = number<float>([](RunConfig& c) -> float& { return c.train.lr_beta; });
        t["weight_decay"] = number<float>([](RunConfig& c) -> float& { return c.train.weight_decay; });
        t["baseline_decay"] = number<float>([](RunConfig& c) -> float& { return c.train.baseline_decay; });
        t["epochs"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.epochs; });
        t["warmup_epochs"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.warmup_epochs; });
        t["batch_size"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
        t["kmeans_iterations"] =
            number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.kmeans_iterations; });
        t["eval_batch"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.eval_batch; });
        t["record_wall_time"] = flag([](RunConfig& c) -> bool& { return c.train.record_wall_time; });
        t["source_path"] = text([](RunConfig& c) -> std::string& { return c.source_path; });
        t["target_path"] = text([](RunConfig& c) -> std::string& { return c.target_path; });
        t["output_dir"] = text([](RunConfig& c) -> std::string& { return c.output_dir; });
        t["n_per_domain"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.n_per_domain; });
        t["data_seed"] = number<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.data_seed; });
        t["shift_invert"] = flag([](RunConfig& c) -> bool& { return c.shift.intensity_invert; });
        t["shift_gradient"] = number<float>([](RunConfig& c) -> float& { return c.shift.background_gradient_amp; });
        t["shift_gradient_angle"] = number<float>([](RunConfig& c) -> float& { return c.shift.gradient_angle_degrees; });
        t["shift_noise"] = number<float>([](RunConfig& c) -> float& { return c.shift.noise_std; });
        t["shift_rotation"] = number<float>([](RunConfig& c) -> float& { return c.shift.rotation_degrees; });
        t["seeds"] = Entry{[](RunConfig& c, const std::string& v) {
                               c.seeds.clear();
                               std::stringstream ss(v);
                               std::string item;
                               while (std::getline(ss, item, ','))
                                   c.seeds.push_back(detail::parse_number<std::uint64_t>("seeds", detail::trim(item)));
                           },
                           [](const RunConfig& c) {
                               std::string s;
                               for (std::size_t i = 0; i < c.seeds.size(); ++i)
                                   s += (i ? "," : "") + std::to_string(c.seeds[i]);
                               return s;
                           }};
        t["workers"] = number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.workers; });
        return t;
    }
};

/// Set one key; unknown keys and unparsable values are config errors.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = ConfigSchema::entries();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
        it->second.set(cfg, value);
    } catch (const ConfigError& e) {
        throw ConfigError("key '" + key + "': " + e.what());
    }
}

/// Parse `key = value` lines; `#` starts a comment. Later duplicates are
/// rejected rather than silently overriding.
inline RunConfig parse_config(const std::string& text, bool check_required = true) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
        if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        apply_setting(cfg, key, value);
    }
    if (check_required) {
        for (const auto& k : ConfigSchema::required())
            if (!seen.count(k)) throw ConfigError("missing required key '" + k + "'");
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg = parse_config(ss.str());
    if (const char* out = std::getenv("PMTRANS_OUT"); out && *out) cfg.output_dir = out;
    return cfg;
}

/// Every key in sorted order, as a loadable config file.
inline std::string canonical_text(const RunConfig& cfg) {
    std::string s;
    for (const auto& [key, entry] : ConfigSchema::entries()) s += key + " = " + entry.get(cfg) + "\n";
    return s;
}

/// The keys that influence results; where outputs go and how many workers
/// run them do not.
inline std::string digest_text(const RunConfig& cfg) {
    std::string s;
    for (const auto& [key, entry] : ConfigSchema::entries()) {
        if (key == "output_dir" || key == "workers") continue;
        s += key + " = " + entry.get(cfg) + "\n";
    }
    return s;
}

}  // namespace pmtrans
