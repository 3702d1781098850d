#ifndef PERMPRED_DATASET_HPP
#define PERMPRED_DATASET_HPP

#include "permpred/core.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace permpred {

using nlohmann::json;

struct Dataset {
    Catalog catalog;
    std::vector<UserProfile> profiles;
    std::vector<PermissionDecision> decisions;

    const UserProfile* find_profile(const std::string& id) const {
        for (const auto& p : profiles) {
            if (p.participant_id == id) return &p;
        }
        return nullptr;
    }

    /// Participants that have at least one decision, sorted.
    std::vector<std::string> participants() const {
        std::set<std::string> ids;
        for (const auto& d : decisions) ids.insert(d.participant_id);
        return {ids.begin(), ids.end()};
    }

    PermissionRequest request_for(const PermissionDecision& d) const {
        PermissionRequest r;
        r.participant_id = d.participant_id;
        r.query_id = d.query_id;
        r.tool_id = d.tool_id;
        r.data_type_id = d.data_type_id;
        if (const Query* q = catalog.find_query(d.query_id)) {
            r.query_text = q->text;
            r.domain = q->domain;
        }
        return r;
    }

    Domain domain_of(const PermissionDecision& d) const {
        const Query* q = catalog.find_query(d.query_id);
        return q ? q->domain : Domain::Entertainment;
    }
};

// ---------------------------------------------------------------------------
// JSON encoding of the canonical dataset document
// ---------------------------------------------------------------------------

namespace detail {

inline std::string norm_field(const json& j, const char* key) {
    return normalize_id(j.at(key).get<std::string>());
}

template <typename T>
std::optional<T> opt_field(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<T>();
}

} // namespace detail

inline json to_json(const Tool& t) {
    json domains = json::array();
    for (Domain d : t.domains) domains.push_back(std::string(to_string(d)));
    return {{"id", t.id}, {"display_name", t.display_name}, {"domains", domains}};
}

inline json to_json(const DataType& t) {
    json j = {{"id", t.id}, {"display_name", t.display_name}};
    if (t.generic_group) j["generic_group"] = *t.generic_group;
    return j;
}

inline json to_json(const Query& q) {
    json data = json::array();
    for (const auto& r : q.requested_data) {
        data.push_back({{"data_type_id", r.data_type_id}, {"necessary", r.necessary}});
    }
    return {{"id", q.id},
            {"text", q.text},
            {"domain", std::string(to_string(q.domain))},
            {"tools", q.tools},
            {"requested_data", data}};
}

inline json to_json(const UserProfile& p) {
    json domains = json::array();
    for (Domain d : p.concerning_domains) domains.push_back(std::string(to_string(d)));
    json j = {{"participant_id", p.participant_id},
              {"age_group", std::string(to_string(p.age_group))},
              {"education", std::string(to_string(p.education))},
              {"sex", std::string(to_string(p.sex))},
              {"ai_familiarity", p.ai_familiarity},
              {"ai_usage_frequency", p.ai_usage_frequency},
              {"ai_trust", p.ai_trust},
              {"privacy_consciousness", p.privacy_consciousness},
              {"concerning_domains", domains}};
    if (p.age_range) j["age_range"] = *p.age_range;
    return j;
}

inline json to_json(const PermissionDecision& d) {
    json j = {{"participant_id", d.participant_id},
              {"query_id", d.query_id},
              {"tool_id", d.tool_id},
              {"data_type_id", d.data_type_id},
              {"option", std::string(to_string(d.option))},
              {"necessary", d.necessary}};
    if (d.perceived_necessary) j["perceived_necessary"] = *d.perceived_necessary;
    return j;
}

inline json to_json(const PermissionRequest& r) {
    return {{"participant_id", r.participant_id},
            {"query_id", r.query_id},
            {"query_text", r.query_text},
            {"tool_id", r.tool_id},
            {"data_type_id", r.data_type_id},
            {"domain", std::string(to_string(r.domain))}};
}

inline json to_json(const Prediction& p) {
    return {{"label", std::string(to_string(p.label))},
            {"confidence", p.confidence},
            {"source", std::string(to_string(p.source))},
            {"covered", p.covered}};
}

inline UserProfile profile_from_json(const json& j) {
    UserProfile p;
    p.participant_id = detail::norm_field(j, "participant_id");
    p.age_group = parse_age_group(j.at("age_group").get<std::string>());
    p.age_range = detail::opt_field<std::string>(j, "age_range");
    p.education = parse_education(j.at("education").get<std::string>());
    p.sex = parse_sex(j.value("sex", std::string("other")));
    p.ai_familiarity = j.at("ai_familiarity").get<int>();
    p.ai_usage_frequency = j.at("ai_usage_frequency").get<int>();
    p.ai_trust = j.at("ai_trust").get<int>();
    p.privacy_consciousness = j.at("privacy_consciousness").get<int>();
    if (auto it = j.find("concerning_domains"); it != j.end()) {
        for (const auto& d : *it) p.concerning_domains.insert(parse_domain(d.get<std::string>()));
    }
    return p;
}

inline PermissionDecision decision_from_json(const json& j) {
    PermissionDecision d;
    d.participant_id = detail::norm_field(j, "participant_id");
    d.query_id = detail::norm_field(j, "query_id");
    d.tool_id = detail::norm_field(j, "tool_id");
    d.data_type_id = detail::norm_field(j, "data_type_id");
    d.option = parse_option(j.at("option").get<std::string>());
    d.necessary = j.value("necessary", true);
    d.perceived_necessary = detail::opt_field<bool>(j, "perceived_necessary");
    return d;
}

inline PermissionRequest request_from_json(const json& j) {
    PermissionRequest r;
    r.participant_id = detail::norm_field(j, "participant_id");
    r.query_id = detail::norm_field(j, "query_id");
    r.query_text = j.value("query_text", std::string());
    r.tool_id = detail::norm_field(j, "tool_id");
    r.data_type_id = detail::norm_field(j, "data_type_id");
    r.domain = parse_domain(j.at("domain").get<std::string>());
    return r;
}

inline json to_json(const Dataset& d) {
    json tools = json::array(), types = json::array(), queries = json::array();
    for (const auto& [id, t] : d.catalog.tools) tools.push_back(to_json(t));
    for (const auto& [id, t] : d.catalog.data_types) types.push_back(to_json(t));
    for (const auto& [id, q] : d.catalog.queries) queries.push_back(to_json(q));
    json domains = json::array();
    for (Domain dom : kAllDomains) domains.push_back(std::string(to_string(dom)));
    json profiles = json::array(), decisions = json::array();
    for (const auto& p : d.profiles) profiles.push_back(to_json(p));
    for (const auto& x : d.decisions) decisions.push_back(to_json(x));
    json catalog = {{"domains", domains},
                    {"tools", tools},
                    {"data_types", types},
                    {"queries", queries}};
    if (!d.catalog.generic_groups.empty()) {
        catalog["generic_groups"] = json(std::vector<std::string>(
            d.catalog.generic_groups.begin(), d.catalog.generic_groups.end()));
    }
    return {{"catalog", catalog}, {"profiles", profiles}, {"decisions", decisions}};
}

/// Checks referential integrity, uniqueness and scale ranges. Throws the first
/// failing category with every offending record listed in details().
inline void validate(const Dataset& d) {
    for (const auto& p : d.profiles) check_profile_scales(p);

    std::vector<std::string> problems;
    const Catalog& c = d.catalog;
    for (const auto& [id, t] : c.data_types) {
        if (t.generic_group && !c.generic_groups.count(*t.generic_group)) {
            problems.push_back("data type " + id + ": unknown generic group " + *t.generic_group);
        }
    }
    for (const auto& [id, q] : c.queries) {
        if (q.requested_data.empty()) problems.push_back("query " + id + ": no requested data");
        for (const auto& tool : q.tools) {
            if (!c.find_tool(tool)) problems.push_back("query " + id + ": unknown tool " + tool);
        }
        for (const auto& r : q.requested_data) {
            if (!c.find_data_type(r.data_type_id)) {
                problems.push_back("query " + id + ": unknown data type " + r.data_type_id);
            }
        }
    }
    std::set<std::string> profile_ids;
    for (const auto& p : d.profiles) {
        if (!profile_ids.insert(p.participant_id).second) {
            problems.push_back("duplicate profile " + p.participant_id);
        }
    }
    std::set<std::pair<std::string, RequestKey>> seen;
    for (const auto& x : d.decisions) {
        const std::string where = "decision (" + x.participant_id + ", " + x.key().str() + ")";
        if (!profile_ids.count(x.participant_id)) {
            problems.push_back(where + ": unknown participant " + x.participant_id);
        }
        if (!c.find_query(x.query_id)) problems.push_back(where + ": unknown query " + x.query_id);
        if (!c.find_tool(x.tool_id)) problems.push_back(where + ": unknown tool " + x.tool_id);
        if (!c.find_data_type(x.data_type_id)) {
            problems.push_back(where + ": unknown data type " + x.data_type_id);
        }
        if (!seen.emplace(x.participant_id, x.key()).second) {
            problems.push_back(where + ": duplicate decision key");
        }
    }
    if (!problems.empty()) {
        std::string msg = "dataset integrity check failed (" + std::to_string(problems.size()) +
                          " problem(s)): " + problems.front();
        throw Error(ErrorCode::IntegrityError, msg, std::move(problems));
    }
}

/// Parses and validates a canonical dataset document.
inline Dataset parse_dataset(const json& root) {
    Dataset d;
    try {
        const json& cat = root.at("catalog");
        if (auto it = cat.find("domains"); it != cat.end()) {
            std::set<Domain> listed;
            for (const auto& label : *it) listed.insert(parse_domain(label.get<std::string>()));
        }
        if (auto it = cat.find("generic_groups"); it != cat.end()) {
            for (const auto& g : *it) d.catalog.generic_groups.insert(normalize_id(g.get<std::string>()));
        }
        const bool derive_groups = !cat.contains("generic_groups");
        for (const auto& jt : cat.at("tools")) {
            Tool t;
            t.id = detail::norm_field(jt, "id");
            t.display_name = jt.value("display_name", jt.at("id").get<std::string>());
            for (const auto& dom : jt.value("domains", json::array())) {
                t.domains.insert(parse_domain(dom.get<std::string>()));
            }
            d.catalog.tools[t.id] = std::move(t);
        }
        for (const auto& jt : cat.at("data_types")) {
            DataType t;
            t.id = detail::norm_field(jt, "id");
            t.display_name = jt.value("display_name", jt.at("id").get<std::string>());
            if (auto g = detail::opt_field<std::string>(jt, "generic_group")) {
                t.generic_group = normalize_id(*g);
                if (derive_groups) d.catalog.generic_groups.insert(*t.generic_group);
            }
            d.catalog.data_types[t.id] = std::move(t);
        }
        for (const auto& jq : cat.at("queries")) {
            Query q;
            q.id = detail::norm_field(jq, "id");
            q.text = jq.at("text").get<std::string>();
            q.domain = parse_domain(jq.at("domain").get<std::string>());
            for (const auto& t : jq.at("tools")) q.tools.push_back(normalize_id(t.get<std::string>()));
            for (const auto& r : jq.at("requested_data")) {
                q.requested_data.push_back({detail::norm_field(r, "data_type_id"), r.value("necessary", true)});
            }
            d.catalog.queries[q.id] = std::move(q);
        }
        for (const auto& jp : root.at("profiles")) d.profiles.push_back(profile_from_json(jp));
        for (const auto& jd : root.at("decisions")) d.decisions.push_back(decision_from_json(jd));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::SchemaError, std::string("malformed dataset document: ") + e.what());
    }
    validate(d);
    return d;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::SchemaError, "cannot open dataset file " + path.string());
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::SchemaError, path.string() + ": " + e.what());
    }
    return parse_dataset(root);
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path.string());
    out << to_json(d).dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

struct DatasetCounts {
    std::size_t participants = 0;
    std::size_t decisions = 0;
    std::size_t allow = 0;
    std::size_t deny = 0;
};

inline DatasetCounts count_binary(const Dataset& d) {
    DatasetCounts c;
    c.participants = d.participants().size();
    c.decisions = d.decisions.size();
    for (const auto& x : d.decisions) {
        auto label = binary_label(x.option);
        if (label == Label::Allow) ++c.allow;
        if (label == Label::Deny) ++c.deny;
    }
    return c;
}

struct FilterResult {
    Dataset dataset;
    DatasetCounts counts;
    std::vector<std::string> excluded_participants;
};

/// Keeps always/never decisions and drops participants who gave them on fewer
/// than `min_queries` distinct queries.
inline FilterResult filter_for_modeling(const Dataset& d, std::size_t min_queries = 5) {
    std::map<std::string, std::set<std::string>> queries_by_user;
    for (const auto& x : d.decisions) {
        if (binary_label(x.option)) queries_by_user[x.participant_id].insert(x.query_id);
    }
    std::set<std::string> kept;
    FilterResult out;
    for (const auto& p : d.participants()) {
        auto it = queries_by_user.find(p);
        if (it != queries_by_user.end() && it->second.size() >= min_queries) {
            kept.insert(p);
        } else {
            out.excluded_participants.push_back(p);
        }
    }
    out.dataset.catalog = d.catalog;
    for (const auto& p : d.profiles) {
        if (kept.count(p.participant_id)) out.dataset.profiles.push_back(p);
    }
    for (const auto& x : d.decisions) {
        if (kept.count(x.participant_id) && binary_label(x.option)) out.dataset.decisions.push_back(x);
    }
    if (out.dataset.decisions.empty()) {
        throw Error(ErrorCode::EmptyDataset, "no participants survive the modeling filter");
    }
    out.counts = count_binary(out.dataset);
    return out;
}

// ---------------------------------------------------------------------------
// Cross-validation folds and history budgets
// ---------------------------------------------------------------------------

/// Per-participant assignment of answered queries to folds.
struct FoldPlan {
    int k = 5;
    std::map<std::pair<std::string, std::string>, int> assignment;
    std::vector<std::string> warnings;

    /// -1 when the (participant, query) pair is not part of the plan.
    int fold_of(const std::string& participant, const std::string& query) const {
        auto it = assignment.find({participant, query});
        return it == assignment.end() ? -1 : it->second;
    }
};

inline FoldPlan make_folds(const Dataset& d, int k, std::uint64_t seed) {
    if (k < 2) throw Error(ErrorCode::InvalidK, "fold count must be >= 2, got " + std::to_string(k));
    std::map<std::string, std::set<std::string>> queries_by_user;
    for (const auto& x : d.decisions) queries_by_user[x.participant_id].insert(x.query_id);

    FoldPlan plan;
    plan.k = k;
    std::mt19937_64 rng(seed);
    for (const auto& [user, query_set] : queries_by_user) {
        std::vector<std::string> queries(query_set.begin(), query_set.end());
        std::shuffle(queries.begin(), queries.end(), rng);
        // Random rotation keeps the larger remainder folds from always being 0..r-1.
        const auto offset = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(k));
        for (std::size_t i = 0; i < queries.size(); ++i) {
            plan.assignment[{user, queries[i]}] = static_cast<int>((i + offset) % k);
        }
        if (queries.size() < static_cast<std::size_t>(k)) {
            plan.warnings.push_back("participant " + user + " has " + std::to_string(queries.size()) +
                                    " queries for " + std::to_string(k) + " folds; some folds are empty");
        }
    }
    return plan;
}

struct HistoryBudget {
    double ratio = 1.0;
    std::uint64_t selection_seed = 0;

    void validate() const {
        static constexpr double allowed[] = {0.0, 0.25, 0.5, 0.75, 1.0};
        for (double a : allowed) {
            if (ratio == a) return;
        }
        throw Error(ErrorCode::InvalidArgument,
                    "history ratio must be one of 0, 0.25, 0.5, 0.75, 1.0; got " + std::to_string(ratio));
    }
};

/// Training-fold queries of `user`, in the fixed seeded order used for history
/// selection. A prefix of this order is taken for any ratio, so larger ratios
/// always contain smaller ones.
inline std::vector<std::string> history_query_order(const Dataset& d, const FoldPlan& plan, int test_fold,
                                                    std::uint64_t selection_seed, const std::string& user) {
    std::set<std::string> queries;
    for (const auto& x : d.decisions) {
        if (x.participant_id != user) continue;
        const int fold = plan.fold_of(user, x.query_id);
        if (fold >= 0 && fold != test_fold) queries.insert(x.query_id);
    }
    std::vector<std::string> order(queries.begin(), queries.end());
    std::mt19937_64 rng(stable_hash(user, selection_seed));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

inline std::vector<PermissionDecision> sample_history(const Dataset& d, const FoldPlan& plan, int test_fold,
                                                      const HistoryBudget& budget, const std::string& user) {
    budget.validate();
    const bool known = d.find_profile(user) != nullptr ||
                       std::any_of(d.decisions.begin(), d.decisions.end(),
                                   [&](const auto& x) { return x.participant_id == user; });
    if (!known) throw Error(ErrorCode::UnknownUser, "unknown participant " + user);

    auto order = history_query_order(d, plan, test_fold, budget.selection_seed, user);
    const auto take = static_cast<std::size_t>(std::floor(budget.ratio * static_cast<double>(order.size())));
    std::set<std::string> selected(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));

    std::vector<PermissionDecision> out;
    for (const auto& x : d.decisions) {
        if (x.participant_id == user && selected.count(x.query_id)) out.push_back(x);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
    return out;
}

} // namespace permpred

#endif // PERMPRED_DATASET_HPP
