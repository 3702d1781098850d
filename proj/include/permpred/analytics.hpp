#ifndef PERMPRED_ANALYTICS_HPP
#define PERMPRED_ANALYTICS_HPP

#include "permpred/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace permpred::analytics {

/// Population standard deviation; nullopt for fewer than two values.
inline std::optional<double> population_sd(const std::vector<double>& values) {
    if (values.size() < 2) return std::nullopt;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(values.size()));
}

/// Option counts for one group; shares are derived.
struct OptionShares {
    std::string key;
    std::string label;
    std::array<std::size_t, 4> counts{};

    std::size_t total() const { return counts[0] + counts[1] + counts[2] + counts[3]; }
    double share(DecisionOption o) const {
        const auto n = total();
        return n == 0 ? 0.0 : static_cast<double>(counts[option_index(o)]) / static_cast<double>(n);
    }
    void add(DecisionOption o) { ++counts[option_index(o)]; }
};

inline json to_json(const OptionShares& s) {
    json shares = json::object(), counts = json::object();
    for (DecisionOption o : kAllOptions) {
        shares[std::string(to_string(o))] = s.share(o);
        counts[std::string(to_string(o))] = s.counts[option_index(o)];
    }
    return {{"key", s.key}, {"label", s.label}, {"total", s.total()}, {"shares", shares}, {"counts", counts}};
}

// ---------------------------------------------------------------------------
// Option distributions (domain / tool / data type)
// ---------------------------------------------------------------------------

enum class GroupBy { Domain, Tool, DomainTool, DataType };

inline std::string_view to_string(GroupBy g) {
    switch (g) {
    case GroupBy::Domain: return "domain";
    case GroupBy::Tool: return "tool";
    case GroupBy::DomainTool: return "domain_tool";
    case GroupBy::DataType: return "data_type";
    }
    return "";
}

struct PermissionRateReport {
    GroupBy group_by = GroupBy::Domain;
    bool concerning_only = false;
    std::vector<OptionShares> rows;

    const OptionShares* find(const std::string& key) const {
        for (const auto& r : rows) {
            if (r.key == key) return &r;
        }
        return nullptr;
    }
};

/// Shares of each option per group. With `concerning_only`, a decision counts
/// only when its participant marked the decision's domain as concerning.
inline PermissionRateReport option_distribution(const Dataset& d, GroupBy group_by, bool concerning_only) {
    std::map<std::string, const UserProfile*> profiles;
    for (const auto& p : d.profiles) profiles[p.participant_id] = &p;

    std::map<std::string, OptionShares> groups;
    for (const auto& x : d.decisions) {
        const Domain domain = d.domain_of(x);
        if (concerning_only) {
            auto it = profiles.find(x.participant_id);
            if (it == profiles.end() || !it->second->concerning_domains.count(domain)) continue;
        }
        std::string key, label;
        switch (group_by) {
        case GroupBy::Domain:
            key = normalize_id(to_string(domain));
            label = std::string(to_string(domain));
            break;
        case GroupBy::Tool:
            key = x.tool_id;
            label = d.catalog.tool_name(x.tool_id);
            break;
        case GroupBy::DomainTool:
            key = normalize_id(to_string(domain)) + "/" + x.tool_id;
            label = std::string(to_string(domain)) + " / " + d.catalog.tool_name(x.tool_id);
            break;
        case GroupBy::DataType:
            key = x.data_type_id;
            label = d.catalog.data_type_name(x.data_type_id);
            break;
        }
        auto& row = groups[key];
        row.key = key;
        row.label = label;
        row.add(x.option);
    }
    PermissionRateReport report{group_by, concerning_only, {}};
    for (auto& [k, v] : groups) report.rows.push_back(std::move(v));
    return report;
}

inline json to_json(const PermissionRateReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) rows.push_back(to_json(row));
    return {{"group_by", std::string(to_string(r.group_by))}, {"concerning_only", r.concerning_only}, {"rows", rows}};
}

// ---------------------------------------------------------------------------
// Under / over / appropriate permissioning
// ---------------------------------------------------------------------------

struct AppropriatenessRow {
    std::string participant_id;
    std::size_t answered = 0;
    std::size_t over_count = 0;
    std::size_t under_count = 0;

    double over() const { return answered ? static_cast<double>(over_count) / static_cast<double>(answered) : 0.0; }
    double under() const { return answered ? static_cast<double>(under_count) / static_cast<double>(answered) : 0.0; }
    double appropriate() const {
        return answered ? static_cast<double>(answered - over_count - under_count) / static_cast<double>(answered)
                        : 0.0;
    }
};

struct AppropriatenessReport {
    std::vector<AppropriatenessRow> rows;

    double fraction_never_over() const {
        return fraction([](const AppropriatenessRow& r) { return r.over_count == 0; });
    }
    double fraction_never_under() const {
        return fraction([](const AppropriatenessRow& r) { return r.under_count == 0; });
    }
    double fraction_appropriate_at_least(double level) const {
        return fraction([level](const AppropriatenessRow& r) { return r.appropriate() >= level; });
    }

private:
    template <typename Pred>
    double fraction(Pred pred) const {
        if (rows.empty()) return 0.0;
        const auto n = std::count_if(rows.begin(), rows.end(), pred);
        return static_cast<double>(n) / static_cast<double>(rows.size());
    }
};

/// Over = shares of unnecessary data; under = withheld necessary data. Both
/// are divided by every answered row of the participant.
inline AppropriatenessReport appropriateness(const Dataset& d) {
    std::map<std::string, AppropriatenessRow> rows;
    for (const auto& x : d.decisions) {
        auto& row = rows[x.participant_id];
        row.participant_id = x.participant_id;
        ++row.answered;
        const bool share = is_share(x.option);
        if (share && !x.necessary) ++row.over_count;
        if (!share && x.necessary) ++row.under_count;
    }
    AppropriatenessReport report;
    for (auto& [k, v] : rows) report.rows.push_back(v);
    return report;
}

inline json to_json(const AppropriatenessReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"participant_id", row.participant_id},
                        {"answered", row.answered},
                        {"over_permission", row.over()},
                        {"under_permission", row.under()},
                        {"appropriate", row.appropriate()}});
    }
    return {{"rows", rows},
            {"summary",
             {{"participants", r.rows.size()},
              {"never_over_permission", r.fraction_never_over()},
              {"never_under_permission", r.fraction_never_under()},
              {"appropriate_at_least_90pct", r.fraction_appropriate_at_least(0.9)}}}};
}

// ---------------------------------------------------------------------------
// Always / never sharing extremes
// ---------------------------------------------------------------------------

/// Which (participant, query) instances to look at. An instance "with
/// mistakes" is one where at least one requested data type was unnecessary.
enum class InstanceScope { All, Correct, WithMistakes };

inline std::string_view to_string(InstanceScope s) {
    switch (s) {
    case InstanceScope::All: return "all";
    case InstanceScope::Correct: return "correct";
    case InstanceScope::WithMistakes: return "with_mistakes";
    }
    return "";
}

struct ExtremesRow {
    std::string participant_id;
    std::size_t always_decisions = 0;
    std::size_t never_decisions = 0;
    std::size_t always_queries = 0;
    std::size_t never_queries = 0;
};

struct SharingExtremesReport {
    InstanceScope scope = InstanceScope::All;
    std::vector<ExtremesRow> rows;

    double fraction_with_always() const {
        return fraction([](const ExtremesRow& r) { return r.always_decisions > 0; });
    }
    double fraction_with_never() const {
        return fraction([](const ExtremesRow& r) { return r.never_decisions > 0; });
    }

private:
    template <typename Pred>
    double fraction(Pred pred) const {
        if (rows.empty()) return 0.0;
        return static_cast<double>(std::count_if(rows.begin(), rows.end(), pred)) / static_cast<double>(rows.size());
    }
};

inline SharingExtremesReport sharing_extremes(const Dataset& d, InstanceScope scope) {
    std::map<std::pair<std::string, std::string>, bool> has_mistake;
    for (const auto& x : d.decisions) {
        auto& flag = has_mistake[{x.participant_id, x.query_id}];
        flag = flag || !x.necessary;
    }
    struct Acc {
        ExtremesRow row;
        std::set<std::string> always_q, never_q;
    };
    std::map<std::string, Acc> acc;
    for (const auto& x : d.decisions) {
        const bool mistake = has_mistake[{x.participant_id, x.query_id}];
        if (scope == InstanceScope::Correct && mistake) continue;
        if (scope == InstanceScope::WithMistakes && !mistake) continue;
        auto& a = acc[x.participant_id];
        a.row.participant_id = x.participant_id;
        if (x.option == DecisionOption::AlwaysShare) {
            ++a.row.always_decisions;
            a.always_q.insert(x.query_id);
        } else if (x.option == DecisionOption::NeverShare) {
            ++a.row.never_decisions;
            a.never_q.insert(x.query_id);
        }
    }
    SharingExtremesReport report;
    report.scope = scope;
    for (auto& [k, a] : acc) {
        a.row.always_queries = a.always_q.size();
        a.row.never_queries = a.never_q.size();
        report.rows.push_back(a.row);
    }
    return report;
}

/// Empirical CDF points (value, fraction of entries <= value) over sorted
/// distinct values.
inline std::vector<std::pair<double, double>> cdf_series(std::vector<double> values) {
    std::vector<std::pair<double, double>> out;
    if (values.empty()) return out;
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i + 1 < values.size() && values[i + 1] == values[i]) continue;
        out.emplace_back(values[i], static_cast<double>(i + 1) / n);
    }
    return out;
}

inline json cdf_json(const std::vector<std::pair<double, double>>& series) {
    json out = json::array();
    for (const auto& [v, f] : series) out.push_back({v, f});
    return out;
}

inline json to_json(const SharingExtremesReport& r) {
    json rows = json::array();
    std::vector<double> ad, nd, aq, nq;
    for (const auto& row : r.rows) {
        rows.push_back({{"participant_id", row.participant_id},
                        {"always_decisions", row.always_decisions},
                        {"never_decisions", row.never_decisions},
                        {"always_queries", row.always_queries},
                        {"never_queries", row.never_queries}});
        ad.push_back(static_cast<double>(row.always_decisions));
        nd.push_back(static_cast<double>(row.never_decisions));
        aq.push_back(static_cast<double>(row.always_queries));
        nq.push_back(static_cast<double>(row.never_queries));
    }
    return {{"scope", std::string(to_string(r.scope))},
            {"rows", rows},
            {"summary",
             {{"participants", r.rows.size()},
              {"with_always_share", r.fraction_with_always()},
              {"with_never_share", r.fraction_with_never()},
              {"without_always_share", r.rows.empty() ? 0.0 : 1.0 - r.fraction_with_always()},
              {"without_never_share", r.rows.empty() ? 0.0 : 1.0 - r.fraction_with_never()}}},
            {"cdf",
             {{"always_decisions", cdf_json(cdf_series(ad))},
              {"never_decisions", cdf_json(cdf_series(nd))},
              {"always_queries", cdf_json(cdf_series(aq))},
              {"never_queries", cdf_json(cdf_series(nq))}}}};
}

// ---------------------------------------------------------------------------
// Perceived vs. ground-truth necessity
// ---------------------------------------------------------------------------

struct AlignmentTable {
    /// cells[ground_truth_necessary][perceived_necessary]; index 1 = necessary.
    std::array<std::array<OptionShares, 2>, 2> cells{};
    std::size_t excluded = 0;

    const OptionShares& cell(bool ground_truth, bool perceived) const {
        return cells[ground_truth ? 1 : 0][perceived ? 1 : 0];
    }
};

inline AlignmentTable alignment_table(const Dataset& d) {
    AlignmentTable t;
    for (int gt = 0; gt < 2; ++gt) {
        for (int pa = 0; pa < 2; ++pa) {
            auto& c = t.cells[static_cast<std::size_t>(gt)][static_cast<std::size_t>(pa)];
            c.key = std::string(gt ? "necessary" : "unnecessary") + "/" + (pa ? "necessary" : "unnecessary");
            c.label = std::string("GT=") + (gt ? "Necessary" : "Unnecessary") + ", PA=" + (pa ? "Necessary" : "Unnecessary");
        }
    }
    for (const auto& x : d.decisions) {
        if (!x.perceived_necessary) {
            ++t.excluded;
            continue;
        }
        t.cells[x.necessary ? 1 : 0][*x.perceived_necessary ? 1 : 0].add(x.option);
    }
    return t;
}

inline json to_json(const AlignmentTable& t) {
    json rows = json::array();
    for (bool gt : {true, false}) {
        for (bool pa : {true, false}) rows.push_back(to_json(t.cell(gt, pa)));
    }
    return {{"rows", rows}, {"excluded_without_perception", t.excluded}};
}

// ---------------------------------------------------------------------------
// Pairwise Jaccard similarity
// ---------------------------------------------------------------------------

struct JaccardPair {
    std::string a;
    std::string b;
    double similarity = 1.0;
    std::size_t shared_requests = 0;
};

/// Jaccard similarity of the allow-sets of two participants restricted to the
/// requests both labeled. Two empty allow-sets are identical (1.0).
inline double allow_set_jaccard(const std::map<RequestKey, Label>& a, const std::map<RequestKey, Label>& b,
                                std::size_t* shared = nullptr) {
    std::size_t inter = 0, uni = 0, common = 0;
    for (const auto& [key, la] : a) {
        auto it = b.find(key);
        if (it == b.end()) continue;
        ++common;
        const bool aa = la == Label::Allow, ba = it->second == Label::Allow;
        if (aa && ba) ++inter;
        if (aa || ba) ++uni;
    }
    if (shared) *shared = common;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct JaccardReport {
    std::vector<JaccardPair> pairs;
    std::size_t groups = 0;

    double fraction_at_least(double threshold) const {
        if (pairs.empty()) return 0.0;
        const auto n = std::count_if(pairs.begin(), pairs.end(),
                                     [&](const JaccardPair& p) { return p.similarity >= threshold; });
        return static_cast<double>(n) / static_cast<double>(pairs.size());
    }
};

/// Groups participants by the exact set of queries they answered and compares
/// every pair inside a group.
inline JaccardReport jaccard_pairs(const Dataset& d) {
    std::map<std::string, std::map<RequestKey, Label>> labels;
    std::map<std::string, std::set<std::string>> query_sets;
    for (const auto& x : d.decisions) {
        query_sets[x.participant_id].insert(x.query_id);
        if (auto l = binary_label(x.option)) labels[x.participant_id][x.key()] = *l;
    }
    std::map<std::set<std::string>, std::vector<std::string>> groups;
    for (const auto& [user, qs] : query_sets) groups[qs].push_back(user);

    JaccardReport report;
    for (const auto& [qs, users] : groups) {
        if (users.size() < 2) continue;
        ++report.groups;
        for (std::size_t i = 0; i < users.size(); ++i) {
            for (std::size_t j = i + 1; j < users.size(); ++j) {
                JaccardPair p{users[i], users[j], 1.0, 0};
                p.similarity = allow_set_jaccard(labels[users[i]], labels[users[j]], &p.shared_requests);
                report.pairs.push_back(p);
            }
        }
    }
    return report;
}

inline json to_json(const JaccardReport& r) {
    std::vector<double> sims;
    for (const auto& p : r.pairs) sims.push_back(p.similarity);
    return {{"groups", r.groups},
            {"pairs", r.pairs.size()},
            {"at_least_0_6", r.fraction_at_least(0.6)},
            {"cdf", cdf_json(cdf_series(sims))}};
}

// ---------------------------------------------------------------------------
// Variance of binary allowance
// ---------------------------------------------------------------------------

struct DataTypeSpread {
    std::string data_type_id;
    std::string label;
    std::size_t participants = 0;
    double sd = 0.0;
};

struct VarianceReport {
    /// (participant, domain) -> SD of that participant's binary labels in the domain.
    std::map<std::pair<std::string, Domain>, double> within_domain_sd;
    /// (participant, domain) -> allowance rate; the cross-domain heatmap.
    std::map<std::pair<std::string, Domain>, double> domain_allowance;
    /// participant -> population SD of their per-domain allowance rates.
    std::map<std::string, double> cross_domain_sd;
    /// Sorted by descending SD.
    std::vector<DataTypeSpread> data_types;

    std::optional<double> data_type_sd(const std::string& id) const {
        for (const auto& t : data_types) {
            if (t.data_type_id == id) return t.sd;
        }
        return std::nullopt;
    }
    double fraction_cross_domain_below(double level) const {
        if (cross_domain_sd.empty()) return 0.0;
        std::size_t n = 0;
        for (const auto& [u, sd] : cross_domain_sd) n += sd < level ? 1 : 0;
        return static_cast<double>(n) / static_cast<double>(cross_domain_sd.size());
    }
    /// Among participants with >=2 labels in `domain`, the fraction whose SD is 0.
    double fraction_consistent_in(Domain domain) const {
        std::size_t total = 0, zero = 0;
        for (const auto& [key, sd] : within_domain_sd) {
            if (key.second != domain) continue;
            ++total;
            zero += sd == 0.0 ? 1 : 0;
        }
        return total ? static_cast<double>(zero) / static_cast<double>(total) : 0.0;
    }
};

inline VarianceReport variance_report(const Dataset& d) {
    std::map<std::pair<std::string, Domain>, std::vector<double>> by_user_domain;
    std::map<std::string, std::map<std::string, std::vector<double>>> by_type_user;
    for (const auto& x : d.decisions) {
        auto l = binary_label(x.option);
        if (!l) continue;
        const double v = *l == Label::Allow ? 1.0 : 0.0;
        by_user_domain[{x.participant_id, d.domain_of(x)}].push_back(v);
        by_type_user[x.data_type_id][x.participant_id].push_back(v);
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };

    VarianceReport r;
    std::map<std::string, std::vector<double>> rates_by_user;
    for (const auto& [key, values] : by_user_domain) {
        if (auto sd = population_sd(values)) r.within_domain_sd[key] = *sd;
        const double rate = mean(values);
        r.domain_allowance[key] = rate;
        rates_by_user[key.first].push_back(rate);
    }
    for (const auto& [user, rates] : rates_by_user) {
        if (auto sd = population_sd(rates)) r.cross_domain_sd[user] = *sd;
    }
    for (const auto& [type, users] : by_type_user) {
        std::vector<double> rates;
        for (const auto& [u, values] : users) rates.push_back(mean(values));
        if (auto sd = population_sd(rates)) {
            r.data_types.push_back({type, d.catalog.data_type_name(type), rates.size(), *sd});
        }
    }
    std::stable_sort(r.data_types.begin(), r.data_types.end(),
                     [](const auto& a, const auto& b) { return a.sd > b.sd; });
    return r;
}

inline json to_json(const VarianceReport& r, std::size_t top_n = 10) {
    json within = json::array(), heat = json::array(), cross = json::array();
    std::vector<double> cross_values;
    for (const auto& [key, sd] : r.within_domain_sd) {
        within.push_back({{"participant_id", key.first}, {"domain", std::string(to_string(key.second))}, {"sd", sd}});
    }
    for (const auto& [key, rate] : r.domain_allowance) {
        heat.push_back(
            {{"participant_id", key.first}, {"domain", std::string(to_string(key.second))}, {"allowance_rate", rate}});
    }
    for (const auto& [user, sd] : r.cross_domain_sd) {
        cross.push_back({{"participant_id", user}, {"sd", sd}});
        cross_values.push_back(sd);
    }
    auto spread = [](const DataTypeSpread& t) {
        return json{{"data_type_id", t.data_type_id}, {"label", t.label}, {"participants", t.participants}, {"sd", t.sd}};
    };
    json high = json::array(), low = json::array();
    for (std::size_t i = 0; i < std::min(top_n, r.data_types.size()); ++i) high.push_back(spread(r.data_types[i]));
    for (std::size_t i = 0; i < std::min(top_n, r.data_types.size()); ++i) {
        low.push_back(spread(r.data_types[r.data_types.size() - 1 - i]));
    }
    json consistent = json::object();
    for (Domain dom : kAllDomains) consistent[std::string(to_string(dom))] = r.fraction_consistent_in(dom);
    return {{"within_domain_sd", within},
            {"domain_allowance", heat},
            {"cross_domain_sd", cross},
            {"cross_domain_sd_cdf", cdf_json(cdf_series(cross_values))},
            {"data_types_high_sd", high},
            {"data_types_low_sd", low},
            {"summary",
             {{"cross_domain_sd_below_0_1", r.fraction_cross_domain_below(0.1)},
              {"cross_domain_sd_below_0_2", r.fraction_cross_domain_below(0.2)},
              {"fully_consistent_within_domain", consistent}}}};
}

// ---------------------------------------------------------------------------
// Demographic groupings
// ---------------------------------------------------------------------------

struct DemographicBreakdown {
    /// grouping name ("age_group", "education", ...) -> bucket rows
    std::map<std::string, std::vector<OptionShares>> groupings;

    const OptionShares* find(const std::string& grouping, const std::string& bucket) const {
        auto it = groupings.find(grouping);
        if (it == groupings.end()) return nullptr;
        for (const auto& row : it->second) {
            if (row.key == bucket) return &row;
        }
        return nullptr;
    }
};

inline DemographicBreakdown demographic_breakdown(const Dataset& d) {
    std::map<std::string, const UserProfile*> profiles;
    for (const auto& p : d.profiles) profiles[p.participant_id] = &p;

    std::map<std::string, std::map<std::string, OptionShares>> acc;
    auto add = [&](const std::string& grouping, const std::string& bucket, DecisionOption o) {
        auto& row = acc[grouping][bucket];
        row.key = bucket;
        row.label = bucket;
        row.add(o);
    };
    for (const auto& x : d.decisions) {
        auto it = profiles.find(x.participant_id);
        if (it == profiles.end()) continue;
        const UserProfile& p = *it->second;
        add("age_group", std::string(to_string(p.age_group)), x.option);
        add("education", std::string(to_string(p.education)), x.option);
        add("sex", std::string(to_string(p.sex)), x.option);
        add("ai_familiarity", std::to_string(p.ai_familiarity), x.option);
        add("ai_usage_frequency", std::to_string(p.ai_usage_frequency), x.option);
        add("ai_trust", std::to_string(p.ai_trust), x.option);
        add("privacy_consciousness", std::to_string(p.privacy_consciousness), x.option);
    }
    DemographicBreakdown out;
    for (auto& [grouping, buckets] : acc) {
        auto& rows = out.groupings[grouping];
        for (auto& [b, row] : buckets) rows.push_back(std::move(row));
    }
    return out;
}

inline json to_json(const DemographicBreakdown& b) {
    json out = json::object();
    for (const auto& [grouping, rows] : b.groupings) {
        json arr = json::array();
        for (const auto& r : rows) arr.push_back(to_json(r));
        out[grouping] = arr;
    }
    return out;
}

} // namespace permpred::analytics

#endif // PERMPRED_ANALYTICS_HPP
