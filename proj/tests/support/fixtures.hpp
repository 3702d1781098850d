// Small hand-built datasets.
#pragma once

#include "permpred/dataset.hpp"

namespace fixtures {

using namespace permpred;

class Builder {
public:
    Builder& tool(const std::string& id, const std::string& name, Domain domain) {
        auto& t = d_.catalog.tools[id];
        t.id = id;
        t.display_name = name;
        t.domains.insert(domain);
        return *this;
    }

    Builder& type(const std::string& id, const std::string& name) {
        d_.catalog.data_types[id] = DataType{id, name, std::nullopt};
        return *this;
    }

    /// `data` = (type id, necessary) pairs.
    Builder& query(const std::string& id, const std::string& text, Domain domain, const std::string& tool,
                   std::vector<std::pair<std::string, bool>> data) {
        Query q;
        q.id = id;
        q.text = text;
        q.domain = domain;
        q.tools = {tool};
        for (auto& [t, n] : data) q.requested_data.push_back({t, n});
        d_.catalog.queries[id] = q;
        return *this;
    }

    Builder& user(const std::string& id, Sex sex = Sex::Undisclosed, AgeGroup age = AgeGroup::From25To39,
                  Education edu = Education::Bachelor) {
        UserProfile p;
        p.participant_id = id;
        p.sex = sex;
        p.age_group = age;
        p.education = edu;
        p.ai_familiarity = 2;
        p.ai_usage_frequency = 2;
        p.ai_trust = 2;
        p.privacy_consciousness = 3;
        d_.profiles.push_back(p);
        return *this;
    }

    UserProfile& profile(const std::string& id) {
        for (auto& p : d_.profiles) {
            if (p.participant_id == id) return p;
        }
        throw std::logic_error("no profile " + id);
    }

    Builder& decide(const std::string& user, const std::string& query, const std::string& type, DecisionOption option,
                    std::optional<bool> perceived = std::nullopt) {
        const Query& q = d_.catalog.queries.at(query);
        PermissionDecision x;
        x.participant_id = user;
        x.query_id = query;
        x.tool_id = q.tools.front();
        x.data_type_id = type;
        x.option = option;
        for (const auto& r : q.requested_data) {
            if (r.data_type_id == type) x.necessary = r.necessary;
        }
        x.perceived_necessary = perceived;
        d_.decisions.push_back(x);
        return *this;
    }

    Dataset build() const {
        validate(d_);
        return d_;
    }
    Dataset& raw() { return d_; }

private:
    Dataset d_;
};

/// One user, one tax query with SSN plus an income data type.
inline Builder tax_catalog() {
    Builder b;
    b.tool("tax-management", "Tax Management", Domain::Finance)
        .type("ssn", "SSN")
        .type("income", "Income Statements")
        .query("tax-q", "Can you retrieve my tax filing details from last year?", Domain::Finance, "tax-management",
               {{"ssn", true}, {"income", true}});
    return b;
}

/// `queries` single-data-type queries in one domain, one shared tool.
inline Builder flat_catalog(int queries, Domain domain = Domain::Entertainment) {
    Builder b;
    b.tool("tool", "Tool", domain);
    for (int i = 0; i < queries; ++i) {
        const std::string t = "type" + std::to_string(i);
        b.type(t, "Type " + std::to_string(i));
        b.query("q" + std::to_string(i), "Question " + std::to_string(i) + "?", domain, "tool", {{t, true}});
    }
    return b;
}

} // namespace fixtures
