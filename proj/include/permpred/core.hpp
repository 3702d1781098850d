#ifndef PERMPRED_CORE_HPP
#define PERMPRED_CORE_HPP

#include "permpred/error.hpp"

#include <array>
#include <cctype>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace permpred {

inline constexpr std::string_view kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Identifiers
// ---------------------------------------------------------------------------

/// Lowercases and collapses every run of non-alphanumeric characters into a
/// single hyphen, trimming hyphens at both ends ("Health & Fitness" ->
/// "health-fitness").
inline std::string normalize_id(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_hyphen = false;
    for (unsigned char c : raw) {
        if (std::isalnum(c)) {
            if (pending_hyphen && !out.empty()) out.push_back('-');
            pending_hyphen = false;
            out.push_back(static_cast<char>(std::tolower(c)));
        } else {
            pending_hyphen = true;
        }
    }
    return out;
}

/// FNV-1a; used wherever a seed must be derived from an id independently of
/// the standard library's std::hash.
inline std::uint64_t stable_hash(std::string_view text, std::uint64_t seed = 0) {
    std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Enumerations
// ---------------------------------------------------------------------------

enum class Domain {
    Entertainment,
    HealthFitness,
    SmartHome,
    Travel,
    Shopping,
    WorkProductivity,
    Social,
    Finance,
};

inline constexpr std::array<Domain, 8> kAllDomains = {
    Domain::Entertainment, Domain::HealthFitness, Domain::SmartHome, Domain::Travel,
    Domain::Shopping,      Domain::WorkProductivity, Domain::Social, Domain::Finance,
};

inline std::string_view to_string(Domain d) {
    switch (d) {
    case Domain::Entertainment: return "Entertainment";
    case Domain::HealthFitness: return "Health & Fitness";
    case Domain::SmartHome: return "Smart Home";
    case Domain::Travel: return "Travel";
    case Domain::Shopping: return "Shopping";
    case Domain::WorkProductivity: return "Work & Productivity";
    case Domain::Social: return "Social";
    case Domain::Finance: return "Finance";
    }
    return "";
}

/// Accepts the display label or any spelling that normalizes to it.
inline Domain parse_domain(std::string_view label) {
    const std::string key = normalize_id(label);
    for (Domain d : kAllDomains) {
        if (normalize_id(to_string(d)) == key) return d;
    }
    throw Error(ErrorCode::SchemaError, "unknown domain label '" + std::string(label) + "'");
}

enum class DecisionOption { AlwaysShare, YesOnce, NoOnce, NeverShare };

inline constexpr std::array<DecisionOption, 4> kAllOptions = {
    DecisionOption::AlwaysShare, DecisionOption::YesOnce, DecisionOption::NoOnce,
    DecisionOption::NeverShare,
};

inline std::string_view to_string(DecisionOption o) {
    switch (o) {
    case DecisionOption::AlwaysShare: return "AlwaysShare";
    case DecisionOption::YesOnce: return "YesOnce";
    case DecisionOption::NoOnce: return "NoOnce";
    case DecisionOption::NeverShare: return "NeverShare";
    }
    return "";
}

inline DecisionOption parse_option(std::string_view text) {
    const std::string key = normalize_id(text);
    for (DecisionOption o : kAllOptions) {
        if (normalize_id(to_string(o)) == key) return o;
    }
    // Spellings used by the study interface.
    if (key == "always-share" || key == "yes-always-share") return DecisionOption::AlwaysShare;
    if (key == "yes-once" || key == "yes-but-ask-me-next-time") return DecisionOption::YesOnce;
    if (key == "no-once" || key == "no-but-ask-me-next-time") return DecisionOption::NoOnce;
    if (key == "never-share" || key == "no-never-share") return DecisionOption::NeverShare;
    throw Error(ErrorCode::SchemaError, "unknown decision option '" + std::string(text) + "'");
}

inline std::size_t option_index(DecisionOption o) { return static_cast<std::size_t>(o); }

/// True for AlwaysShare and YesOnce.
inline bool is_share(DecisionOption o) {
    return o == DecisionOption::AlwaysShare || o == DecisionOption::YesOnce;
}

enum class Label { Allow, Deny };

inline std::string_view to_string(Label l) { return l == Label::Allow ? "Allow" : "Deny"; }

inline Label parse_label(std::string_view text) {
    const std::string key = normalize_id(text);
    if (key == "allow") return Label::Allow;
    if (key == "deny") return Label::Deny;
    throw Error(ErrorCode::SchemaError, "unknown label '" + std::string(text) + "'");
}

/// Model ground truth: only the standing options carry a label.
inline std::optional<Label> binary_label(DecisionOption option) {
    switch (option) {
    case DecisionOption::AlwaysShare: return Label::Allow;
    case DecisionOption::NeverShare: return Label::Deny;
    case DecisionOption::YesOnce:
    case DecisionOption::NoOnce: return std::nullopt;
    }
    return std::nullopt;
}

enum class AgeGroup { Under25, From25To39, From40To55, Over55 };
enum class Education { HighSchool, Bachelor, Master, Doctorate };
enum class Sex { Female, Male, Undisclosed };

inline std::string_view to_string(AgeGroup a) {
    switch (a) {
    case AgeGroup::Under25: return "below 25";
    case AgeGroup::From25To39: return "25-39";
    case AgeGroup::From40To55: return "40-55";
    case AgeGroup::Over55: return "over 55";
    }
    return "";
}

inline std::string_view to_string(Education e) {
    switch (e) {
    case Education::HighSchool: return "HS";
    case Education::Bachelor: return "BS";
    case Education::Master: return "MS";
    case Education::Doctorate: return "PhD";
    }
    return "";
}

inline std::string_view to_string(Sex s) {
    switch (s) {
    case Sex::Female: return "F";
    case Sex::Male: return "M";
    case Sex::Undisclosed: return "other";
    }
    return "";
}

inline AgeGroup parse_age_group(std::string_view text) {
    const std::string key = normalize_id(text);
    if (key == "below-25" || key == "under-25" || key == "18-24") return AgeGroup::Under25;
    if (key == "25-39") return AgeGroup::From25To39;
    if (key == "40-55") return AgeGroup::From40To55;
    if (key == "over-55" || key == "55") return AgeGroup::Over55;
    throw Error(ErrorCode::SchemaError, "unknown age group '" + std::string(text) + "'");
}

inline Education parse_education(std::string_view text) {
    const std::string key = normalize_id(text);
    if (key == "hs" || key == "high-school") return Education::HighSchool;
    if (key == "bs" || key == "bachelor") return Education::Bachelor;
    if (key == "ms" || key == "master") return Education::Master;
    if (key == "phd" || key == "doctorate") return Education::Doctorate;
    throw Error(ErrorCode::SchemaError, "unknown education level '" + std::string(text) + "'");
}

inline Sex parse_sex(std::string_view text) {
    const std::string key = normalize_id(text);
    if (key == "f" || key == "female") return Sex::Female;
    if (key == "m" || key == "male") return Sex::Male;
    if (key.empty() || key == "other" || key == "undisclosed" || key == "prefer-not-to-say") {
        return Sex::Undisclosed;
    }
    throw Error(ErrorCode::SchemaError, "unknown sex value '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

struct Tool {
    std::string id;
    std::string display_name;
    std::set<Domain> domains;
};

struct DataType {
    std::string id;
    std::string display_name;
    std::optional<std::string> generic_group;
};

struct RequestedData {
    std::string data_type_id;
    bool necessary = true;
};

struct Query {
    std::string id;
    std::string text;
    Domain domain = Domain::Entertainment;
    std::vector<std::string> tools;
    std::vector<RequestedData> requested_data;
};

struct Catalog {
    std::map<std::string, Tool> tools;
    std::map<std::string, DataType> data_types;
    std::map<std::string, Query> queries;
    std::set<std::string> generic_groups;

    const Tool* find_tool(const std::string& id) const {
        auto it = tools.find(id);
        return it == tools.end() ? nullptr : &it->second;
    }
    const DataType* find_data_type(const std::string& id) const {
        auto it = data_types.find(id);
        return it == data_types.end() ? nullptr : &it->second;
    }
    const Query* find_query(const std::string& id) const {
        auto it = queries.find(id);
        return it == queries.end() ? nullptr : &it->second;
    }

    std::string tool_name(const std::string& id) const {
        const Tool* t = find_tool(id);
        return t ? t->display_name : id;
    }
    std::string data_type_name(const std::string& id) const {
        const DataType* t = find_data_type(id);
        return t ? t->display_name : id;
    }
};

// ---------------------------------------------------------------------------
// Decisions, users, requests
// ---------------------------------------------------------------------------

/// Finest request identity: one data type requested by one tool in one query.
struct RequestKey {
    std::string query_id;
    std::string tool_id;
    std::string data_type_id;

    auto operator<=>(const RequestKey&) const = default;
    bool operator==(const RequestKey&) const = default;

    std::string str() const { return query_id + "|" + tool_id + "|" + data_type_id; }
};

struct PermissionDecision {
    std::string participant_id;
    std::string query_id;
    std::string tool_id;
    std::string data_type_id;
    DecisionOption option = DecisionOption::YesOnce;
    bool necessary = true;
    std::optional<bool> perceived_necessary;

    RequestKey key() const { return {query_id, tool_id, data_type_id}; }
};

struct UserProfile {
    std::string participant_id;
    AgeGroup age_group = AgeGroup::From25To39;
    /// Verbatim age range from the source data (e.g. "45-54"); rendered in
    /// prompts in preference to the coarse bucket when present.
    std::optional<std::string> age_range;
    Education education = Education::Bachelor;
    Sex sex = Sex::Undisclosed;
    int ai_familiarity = 1;
    int ai_usage_frequency = 1;
    int ai_trust = 1;
    int privacy_consciousness = 1;
    std::set<Domain> concerning_domains;
};

inline bool scale_in_range(int v) { return v >= 1 && v <= 4; }

/// Throws RangeError naming every out-of-range scale.
inline void check_profile_scales(const UserProfile& p) {
    std::vector<std::string> bad;
    auto check = [&](std::string_view name, int v) {
        if (!scale_in_range(v)) {
            bad.push_back(p.participant_id + ": " + std::string(name) + "=" + std::to_string(v));
        }
    };
    check("ai_familiarity", p.ai_familiarity);
    check("ai_usage_frequency", p.ai_usage_frequency);
    check("ai_trust", p.ai_trust);
    check("privacy_consciousness", p.privacy_consciousness);
    if (!bad.empty()) {
        throw Error(ErrorCode::RangeError, "self-reported scale outside 1-4", std::move(bad));
    }
}

struct PermissionRequest {
    std::string participant_id;
    std::string query_id;
    std::string query_text;
    std::string tool_id;
    std::string data_type_id;
    Domain domain = Domain::Entertainment;

    RequestKey key() const { return {query_id, tool_id, data_type_id}; }
};

enum class PredictionSource { CF, ICL, Hybrid, StandingRule };

inline std::string_view to_string(PredictionSource s) {
    switch (s) {
    case PredictionSource::CF: return "CF";
    case PredictionSource::ICL: return "ICL";
    case PredictionSource::Hybrid: return "Hybrid";
    case PredictionSource::StandingRule: return "StandingRule";
    }
    return "";
}

inline PredictionSource parse_source(std::string_view text) {
    const std::string key = normalize_id(text);
    if (key == "cf") return PredictionSource::CF;
    if (key == "icl") return PredictionSource::ICL;
    if (key == "hybrid") return PredictionSource::Hybrid;
    if (key == "standingrule") return PredictionSource::StandingRule;
    throw Error(ErrorCode::SchemaError, "unknown prediction source '" + std::string(text) + "'");
}

struct Prediction {
    Label label = Label::Deny;
    /// ICL/hybrid: in [0,1]. CF: distance from the decision threshold, >= 0.
    double confidence = 0.0;
    PredictionSource source = PredictionSource::Hybrid;
    bool covered = false;
};

} // namespace permpred

#endif // PERMPRED_CORE_HPP
