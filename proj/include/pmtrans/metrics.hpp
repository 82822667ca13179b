#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmtrans/errors.hpp"
#include "pmtrans/game.hpp"

namespace pmtrans {

/// One metrics record as a single-line JSON object with a fixed key order.
inline std::string metrics_line(const MetricsRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["l_cls"] = r.losses.l_cls;
    j["l_l_is"] = r.losses.l_l_is;
    j["l_l_it"] = r.losses.l_l_it;
    j["l_f_is"] = r.losses.l_f_is;
    j["l_f_it"] = r.losses.l_f_it;
    j["ce_total"] = r.losses.ce_total;
    j["j_total"] = r.losses.j_total;
    j["alpha"] = r.losses.alpha;
    j["beta"] = r.beta;
    j["gamma"] = r.gamma;
    j["src_acc"] = r.src_acc;
    j["tgt_acc"] = r.tgt_acc;
    j["pseudo_acc"] = r.pseudo_acc ? nlohmann::ordered_json(*r.pseudo_acc) : nlohmann::ordered_json(nullptr);
    j["wall_ms"] = r.wall_ms;
    return j.dump();
}

inline MetricsRecord parse_metrics_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad metrics line: ") + e.what(), 0);
    }
    MetricsRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.losses.l_cls = j.at("l_cls").get<float>();
    r.losses.l_l_is = j.at("l_l_is").get<float>();
    r.losses.l_l_it = j.at("l_l_it").get<float>();
    r.losses.l_f_is = j.at("l_f_is").get<float>();
    r.losses.l_f_it = j.at("l_f_it").get<float>();
    r.losses.ce_total = j.at("ce_total").get<float>();
    r.losses.j_total = j.at("j_total").get<float>();
    r.losses.alpha = j.at("alpha").get<float>();
    r.beta = j.at("beta").get<double>();
    r.gamma = j.at("gamma").get<double>();
    r.src_acc = j.at("src_acc").get<double>();
    r.tgt_acc = j.at("tgt_acc").get<double>();
    if (!j.at("pseudo_acc").is_null()) r.pseudo_acc = j.at("pseudo_acc").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    return r;
}

/// Appends records to a file as they arrive, flushing each line so a run
/// that aborts leaves every finished epoch on disk.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : out_(path, std::ios::trunc) {
        if (!out_) throw ConfigError("cannot write metrics file '" + path + "'");
    }

    void operator()(const MetricsRecord& r) {
        out_ << metrics_line(r) << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read metrics file '" + path + "'", 0);
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(parse_metrics_line(line));
    return out;
}

}  // namespace pmtrans
