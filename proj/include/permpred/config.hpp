#ifndef PERMPRED_CONFIG_HPP
#define PERMPRED_CONFIG_HPP

#include "permpred/hybrid.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace permpred {

enum class PredictorKind { CF, ICL, Hybrid };

inline std::string_view to_string(PredictorKind k) {
    switch (k) {
    case PredictorKind::CF: return "cf";
    case PredictorKind::ICL: return "icl";
    case PredictorKind::Hybrid: return "hybrid";
    }
    return "";
}

inline PredictorKind parse_predictor(std::string_view text) {
    const std::string k = normalize_id(text);
    if (k == "cf") return PredictorKind::CF;
    if (k == "icl") return PredictorKind::ICL;
    if (k == "hybrid") return PredictorKind::Hybrid;
    throw Error(ErrorCode::InvalidArgument, "predictor must be cf, icl or hybrid; got '" + std::string(text) + "'");
}

/// Which text provider backs ICL and hybrid runs. "mock" never touches the network.
struct ProviderSelection {
    std::string kind = "mock";
    /// majority | fixed-allow | fixed-deny
    std::string mock_policy = "majority";
    icl::ProviderConfig remote;
    int max_in_flight = 4;
};

struct RunConfig {
    std::string dataset;
    std::string output_dir;
    std::uint64_t seed = 0;
    /// Extra repetitions use seed, seed+1, ...
    int repetitions = 1;
    PredictorKind predictor = PredictorKind::Hybrid;
    HybridConfig hybrid;
    cf::Hyperparameters cf;
    ProviderSelection provider;
    double history_ratio = 1.0;
    int folds = 5;
    int workers = 1;
    std::size_t history_char_budget = 0;

    std::vector<std::uint64_t> seeds() const {
        std::vector<std::uint64_t> out;
        for (int i = 0; i < std::max(1, repetitions); ++i) out.push_back(seed + static_cast<std::uint64_t>(i));
        return out;
    }
};

/// The provider credential is never serialized.
inline json to_json(const RunConfig& c) {
    return {{"version", std::string(kVersion)},
            {"dataset", c.dataset},
            {"output_dir", c.output_dir},
            {"seed", c.seed},
            {"repetitions", c.repetitions},
            {"predictor", std::string(to_string(c.predictor))},
            {"hybrid", to_json(c.hybrid)},
            {"cf", cf::to_json(c.cf)},
            {"provider",
             {{"kind", c.provider.kind},
              {"mock_policy", c.provider.mock_policy},
              {"endpoint", c.provider.remote.endpoint},
              {"model", c.provider.remote.model},
              {"timeout_seconds", c.provider.remote.timeout_seconds},
              {"retries", c.provider.remote.retries},
              {"max_in_flight", c.provider.max_in_flight}}},
            {"history_ratio", c.history_ratio},
            {"folds", c.folds},
            {"workers", c.workers},
            {"history_char_budget", c.history_char_budget}};
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    try {
        c.dataset = j.value("dataset", c.dataset);
        c.output_dir = j.value("output_dir", c.output_dir);
        c.seed = j.value("seed", c.seed);
        c.repetitions = j.value("repetitions", c.repetitions);
        c.predictor = parse_predictor(j.value("predictor", std::string("hybrid")));
        if (j.contains("hybrid")) c.hybrid = hybrid_config_from_json(j.at("hybrid"));
        if (j.contains("cf")) c.cf = cf::hyperparameters_from_json(j.at("cf"));
        if (j.contains("provider")) {
            const auto& p = j.at("provider");
            c.provider.kind = p.value("kind", c.provider.kind);
            c.provider.mock_policy = p.value("mock_policy", c.provider.mock_policy);
            c.provider.remote.endpoint = p.value("endpoint", c.provider.remote.endpoint);
            c.provider.remote.model = p.value("model", c.provider.remote.model);
            c.provider.remote.timeout_seconds = p.value("timeout_seconds", c.provider.remote.timeout_seconds);
            c.provider.remote.retries = p.value("retries", c.provider.remote.retries);
            c.provider.max_in_flight = p.value("max_in_flight", c.provider.max_in_flight);
        }
        c.history_ratio = j.value("history_ratio", c.history_ratio);
        c.folds = j.value("folds", c.folds);
        c.workers = j.value("workers", c.workers);
        c.history_char_budget = j.value("history_char_budget", c.history_char_budget);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("bad run config: ") + e.what());
    }
    return c;
}

/// Reads the `[hybrid]` section of an INI file over `base`. Unknown keys in
/// the section are rejected so typos do not pass silently.
inline HybridConfig read_hybrid_ini(std::istream& in, HybridConfig base = {}) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("config file: ") + e.what());
    }
    auto section = tree.get_child_optional("hybrid");
    if (!section) return base;
    try {
        for (const auto& [key, value] : *section) {
            const std::string v = value.get_value<std::string>();
            if (key == "cf_region_fpr_cap") {
                base.cf_region_fpr_cap = std::stod(v);
            } else if (key == "cf_region_fnr_cap") {
                base.cf_region_fnr_cap = std::stod(v);
            } else if (key == "coverage_threshold") {
                base.coverage_threshold = std::stod(v);
            } else if (key == "cf_neighbors_per_prompt") {
                const long n = std::stol(v);
                if (n < 0) throw Error(ErrorCode::InvalidConfig, "cf_neighbors_per_prompt must be >= 0");
                base.cf_neighbors_per_prompt = static_cast<std::size_t>(n);
            } else {
                throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' in [hybrid]");
            }
        }
    } catch (const std::invalid_argument&) {
        throw Error(ErrorCode::InvalidConfig, "non-numeric value in [hybrid]");
    } catch (const std::out_of_range&) {
        throw Error(ErrorCode::InvalidConfig, "value out of range in [hybrid]");
    }
    base.validate();
    return base;
}

inline HybridConfig load_hybrid_ini(const std::filesystem::path& path, HybridConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open config file " + path.string());
    return read_hybrid_ini(in, base);
}

} // namespace permpred

#endif // PERMPRED_CONFIG_HPP
