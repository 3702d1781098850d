#ifndef PERMPRED_SYNTHETIC_HPP
#define PERMPRED_SYNTHETIC_HPP

#include "permpred/dataset.hpp"

#include <random>
#include <string>
#include <vector>

namespace permpred {

/// Population parameters for a planted-structure dataset. Users in the same
/// group share one allow probability per domain; every user answers every
/// query.
struct SyntheticSpec {
    int groups = 2;
    int users_per_group = 10;
    int domains = 2;
    int queries_per_domain = 5;
    int data_types_per_domain = 4;
    int data_per_query = 2;
    int tools_per_domain = 2;
    /// allow_probability[group][domain]
    std::vector<std::vector<double>> allow_probability;
    /// Fraction of requested data marked unnecessary.
    double unnecessary_rate = 0.0;
    /// Fraction of answers given as YesOnce/NoOnce instead of always/never.
    double one_time_rate = 0.0;

    void validate() const {
        auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidSpec, m); };
        if (groups < 1) fail("groups must be >= 1");
        if (users_per_group < 1) fail("users_per_group must be >= 1");
        if (domains < 1 || domains > static_cast<int>(kAllDomains.size())) fail("domains must be in 1..8");
        if (queries_per_domain < 1) fail("queries_per_domain must be >= 1");
        if (data_types_per_domain < 1) fail("data_types_per_domain must be >= 1");
        if (data_per_query < 1 || data_per_query > data_types_per_domain) {
            fail("data_per_query must be in 1..data_types_per_domain");
        }
        if (tools_per_domain < 1) fail("tools_per_domain must be >= 1");
        if (allow_probability.size() != static_cast<std::size_t>(groups)) {
            fail("allow_probability needs one row per group");
        }
        for (const auto& row : allow_probability) {
            if (row.size() != static_cast<std::size_t>(domains)) fail("allow_probability needs one entry per domain");
            for (double p : row) {
                if (!(p >= 0.0 && p <= 1.0)) fail("allow probabilities must lie in [0,1]");
            }
        }
        if (!(unnecessary_rate >= 0.0 && unnecessary_rate < 1.0)) fail("unnecessary_rate must be in [0,1)");
        if (!(one_time_rate >= 0.0 && one_time_rate <= 1.0)) fail("one_time_rate must be in [0,1]");
    }
};

struct SyntheticDataset {
    Dataset dataset;
    SyntheticSpec spec;
    std::map<std::string, int> group_of;

    /// The planted preference: Allow when the group's allow probability for the
    /// query's domain is at least one half.
    Label planted_label(const std::string& participant, const std::string& query_id) const {
        const Query* q = dataset.catalog.find_query(query_id);
        const int g = group_of.at(participant);
        int domain_index = 0;
        for (int i = 0; i < spec.domains; ++i) {
            if (kAllDomains[static_cast<std::size_t>(i)] == q->domain) domain_index = i;
        }
        return spec.allow_probability[static_cast<std::size_t>(g)][static_cast<std::size_t>(domain_index)] >= 0.5
                   ? Label::Allow
                   : Label::Deny;
    }
};

inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    SyntheticDataset out;
    out.spec = spec;
    Catalog& cat = out.dataset.catalog;

    for (int di = 0; di < spec.domains; ++di) {
        const Domain domain = kAllDomains[static_cast<std::size_t>(di)];
        const std::string dom = normalize_id(to_string(domain));

        std::vector<std::string> tool_ids;
        for (int t = 0; t < spec.tools_per_domain; ++t) {
            Tool tool;
            tool.id = dom + "-tool-" + std::to_string(t);
            tool.display_name = std::string(to_string(domain)) + " Tool " + std::to_string(t);
            tool.domains.insert(domain);
            tool_ids.push_back(tool.id);
            cat.tools[tool.id] = tool;
        }
        std::vector<std::string> type_ids;
        for (int t = 0; t < spec.data_types_per_domain; ++t) {
            DataType dt;
            dt.id = dom + "-data-" + std::to_string(t);
            dt.display_name = std::string(to_string(domain)) + " Data " + std::to_string(t);
            type_ids.push_back(dt.id);
            cat.data_types[dt.id] = dt;
        }
        for (int qi = 0; qi < spec.queries_per_domain; ++qi) {
            Query q;
            q.id = dom + "-q" + std::to_string(qi);
            q.text = "Synthetic " + std::string(to_string(domain)) + " request number " + std::to_string(qi) + "?";
            q.domain = domain;
            q.tools.push_back(tool_ids[static_cast<std::size_t>(qi) % tool_ids.size()]);
            std::vector<std::string> pool = type_ids;
            std::shuffle(pool.begin(), pool.end(), rng);
            for (int k = 0; k < spec.data_per_query; ++k) {
                const bool necessary = !(spec.unnecessary_rate > 0.0 && unit(rng) < spec.unnecessary_rate);
                q.requested_data.push_back({pool[static_cast<std::size_t>(k)], necessary});
            }
            cat.queries[q.id] = q;
        }
    }

    std::uniform_int_distribution<int> scale(1, 4);
    std::uniform_int_distribution<int> age(0, 3), edu(0, 3), sex(0, 2);
    for (int g = 0; g < spec.groups; ++g) {
        for (int u = 0; u < spec.users_per_group; ++u) {
            UserProfile p;
            p.participant_id = "g" + std::to_string(g) + "-u" + std::to_string(u);
            p.age_group = static_cast<AgeGroup>(age(rng));
            p.education = static_cast<Education>(edu(rng));
            p.sex = static_cast<Sex>(sex(rng));
            p.ai_familiarity = scale(rng);
            p.ai_usage_frequency = scale(rng);
            p.ai_trust = scale(rng);
            p.privacy_consciousness = scale(rng);
            for (int di = 0; di < spec.domains; ++di) {
                if (spec.allow_probability[static_cast<std::size_t>(g)][static_cast<std::size_t>(di)] < 0.5) {
                    p.concerning_domains.insert(kAllDomains[static_cast<std::size_t>(di)]);
                }
            }
            out.group_of[p.participant_id] = g;

            for (const auto& [qid, q] : cat.queries) {
                int di = 0;
                for (int i = 0; i < spec.domains; ++i) {
                    if (kAllDomains[static_cast<std::size_t>(i)] == q.domain) di = i;
                }
                const double p_allow = spec.allow_probability[static_cast<std::size_t>(g)][static_cast<std::size_t>(di)];
                for (const auto& r : q.requested_data) {
                    const bool allow = unit(rng) < p_allow;
                    const bool one_time = spec.one_time_rate > 0.0 && unit(rng) < spec.one_time_rate;
                    PermissionDecision d;
                    d.participant_id = p.participant_id;
                    d.query_id = qid;
                    d.tool_id = q.tools.front();
                    d.data_type_id = r.data_type_id;
                    d.option = allow ? (one_time ? DecisionOption::YesOnce : DecisionOption::AlwaysShare)
                                     : (one_time ? DecisionOption::NoOnce : DecisionOption::NeverShare);
                    d.necessary = r.necessary;
                    d.perceived_necessary = r.necessary;
                    out.dataset.decisions.push_back(d);
                }
            }
            out.dataset.profiles.push_back(std::move(p));
        }
    }
    validate(out.dataset);
    return out;
}

} // namespace permpred

#endif // PERMPRED_SYNTHETIC_HPP
