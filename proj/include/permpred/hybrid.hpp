#ifndef PERMPRED_HYBRID_HPP
#define PERMPRED_HYBRID_HPP

#include "permpred/cf.hpp"
#include "permpred/icl.hpp"

#include <algorithm>
#include <set>
#include <string>
#include <vector>

namespace permpred {

struct HybridConfig {
    double cf_region_fpr_cap = 0.05;
    double cf_region_fnr_cap = 0.05;
    /// Predictions with confidence >= this are decided automatically.
    double coverage_threshold = 0.0;
    std::size_t cf_neighbors_per_prompt = 8;

    void validate() const {
        auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
        if (!(cf_region_fpr_cap > 0.0 && cf_region_fpr_cap < 1.0)) fail("cf_region_fpr_cap must lie in (0,1)");
        if (!(cf_region_fnr_cap > 0.0 && cf_region_fnr_cap < 1.0)) fail("cf_region_fnr_cap must lie in (0,1)");
        if (!(coverage_threshold >= 0.0 && coverage_threshold <= 1.0)) fail("coverage_threshold must lie in [0,1]");
    }
};

inline json to_json(const HybridConfig& c) {
    return {{"cf_region_fpr_cap", c.cf_region_fpr_cap},
            {"cf_region_fnr_cap", c.cf_region_fnr_cap},
            {"coverage_threshold", c.coverage_threshold},
            {"cf_neighbors_per_prompt", c.cf_neighbors_per_prompt}};
}

inline HybridConfig hybrid_config_from_json(const json& j) {
    HybridConfig c;
    c.cf_region_fpr_cap = j.value("cf_region_fpr_cap", c.cf_region_fpr_cap);
    c.cf_region_fnr_cap = j.value("cf_region_fnr_cap", c.cf_region_fnr_cap);
    c.coverage_threshold = j.value("coverage_threshold", c.coverage_threshold);
    c.cf_neighbors_per_prompt = j.value("cf_neighbors_per_prompt", c.cf_neighbors_per_prompt);
    c.validate();
    return c;
}

/// CF hyperparameters with the region caps taken from the hybrid config.
inline cf::Hyperparameters with_caps(cf::Hyperparameters h, const HybridConfig& c) {
    h.fpr_cap = c.cf_region_fpr_cap;
    h.fnr_cap = c.cf_region_fnr_cap;
    return h;
}

/// The target plus the user's other candidates that share its tool or data
/// type, target first, duplicates removed.
inline std::vector<PermissionRequest> related_candidates(const PermissionRequest& target,
                                                         const std::vector<PermissionRequest>& candidates) {
    std::vector<PermissionRequest> out{target};
    std::set<RequestKey> seen{target.key()};
    for (const auto& c : candidates) {
        if (c.participant_id != target.participant_id) continue;
        if (c.tool_id != target.tool_id && c.data_type_id != target.data_type_id) continue;
        if (seen.insert(c.key()).second) out.push_back(c);
    }
    return out;
}

struct CfExample {
    PermissionRequest request;
    cf::CfPrediction prediction;
    std::string line;
};

/// High-confidence CF recommendations for `user` over `candidates`, rendered as
/// history-style records. Uncertain-region and unknown requests are dropped.
inline std::vector<CfExample> select_cf_examples(const cf::CfModel& model, const Catalog& catalog,
                                                 const std::string& user,
                                                 const std::vector<PermissionRequest>& candidates,
                                                 std::size_t limit) {
    std::vector<CfExample> out;
    std::set<RequestKey> seen;
    for (const auto& c : candidates) {
        if (!seen.insert(c.key()).second) continue;
        auto p = model.predict(user, c.key());
        if (!p || p->region == cf::Region::Uncertain) continue;
        const Label label = p->region == cf::Region::Positive ? Label::Allow : Label::Deny;
        out.push_back({c, *p,
                       icl::render_record(c.query_text, catalog.tool_name(c.tool_id),
                                          catalog.data_type_name(c.data_type_id), label)});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const CfExample& a, const CfExample& b) { return a.prediction.confidence > b.prediction.confidence; });
    if (out.size() > limit) out.resize(limit);
    return out;
}

inline std::vector<std::string> example_lines(const std::vector<CfExample>& examples) {
    std::vector<std::string> lines;
    lines.reserve(examples.size());
    for (const auto& e : examples) lines.push_back(e.line);
    return lines;
}

struct HybridResult {
    Prediction prediction;
    icl::PromptSpec prompt;
    icl::ProviderResponse response;
    std::vector<CfExample> cf_examples;
};

/// Pure in-context prediction: no CF section in the prompt.
inline HybridResult predict_icl(const Catalog& catalog, const UserProfile& profile, const PermissionRequest& target,
                                const std::vector<icl::HistoryRecord>& history, icl::TextProvider& provider,
                                double coverage_threshold = 0.0, const icl::RetryPolicy& retry = {},
                                const icl::PromptOptions& options = {}) {
    HybridResult r;
    r.prompt = icl::build_prompt(profile, history, {}, icl::view_of(catalog, target), options);
    r.response = icl::predict(provider, r.prompt, retry);
    r.prediction = {r.response.label, r.response.confidence, PredictionSource::ICL,
                    r.response.confidence >= coverage_threshold};
    return r;
}

/// In-context prediction with CF recommendations for the target and related
/// candidates injected. A null or empty model gives the pure in-context prompt.
inline HybridResult predict_hybrid(const Catalog& catalog, const UserProfile& profile,
                                   const PermissionRequest& target, const std::vector<icl::HistoryRecord>& history,
                                   const std::vector<PermissionRequest>& candidates, const cf::CfModel* model,
                                   icl::TextProvider& provider, const HybridConfig& config,
                                   const icl::RetryPolicy& retry = {}, const icl::PromptOptions& options = {}) {
    HybridResult r;
    if (model != nullptr && !model->empty()) {
        r.cf_examples = select_cf_examples(*model, catalog, profile.participant_id,
                                           related_candidates(target, candidates), config.cf_neighbors_per_prompt);
    }
    r.prompt = icl::build_prompt(profile, history, example_lines(r.cf_examples), icl::view_of(catalog, target),
                                 options);
    r.response = icl::predict(provider, r.prompt, retry);
    r.prediction = {r.response.label, r.response.confidence, PredictionSource::Hybrid,
                    r.response.confidence >= config.coverage_threshold};
    return r;
}

inline HybridResult predict_icl(const Catalog& catalog, const UserProfile& profile, const PermissionRequest& target,
                                const std::vector<PermissionDecision>& history, icl::TextProvider& provider,
                                double coverage_threshold = 0.0, const icl::RetryPolicy& retry = {},
                                const icl::PromptOptions& options = {}) {
    return predict_icl(catalog, profile, target, icl::history_records(catalog, history), provider, coverage_threshold,
                       retry, options);
}

inline HybridResult predict_hybrid(const Catalog& catalog, const UserProfile& profile,
                                   const PermissionRequest& target, const std::vector<PermissionDecision>& history,
                                   const std::vector<PermissionRequest>& candidates, const cf::CfModel* model,
                                   icl::TextProvider& provider, const HybridConfig& config,
                                   const icl::RetryPolicy& retry = {}, const icl::PromptOptions& options = {}) {
    return predict_hybrid(catalog, profile, target, icl::history_records(catalog, history), candidates, model,
                          provider, config, retry, options);
}

/// Fraction of predictions with confidence >= threshold.
inline double coverage(const std::vector<Prediction>& predictions, double threshold) {
    if (predictions.empty()) throw Error(ErrorCode::EmptyInput, "coverage of an empty prediction set");
    std::size_t n = 0;
    for (const auto& p : predictions) n += p.confidence >= threshold ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(predictions.size());
}

inline double coverage(const std::vector<double>& confidences, double threshold) {
    if (confidences.empty()) throw Error(ErrorCode::EmptyInput, "coverage of an empty prediction set");
    std::size_t n = 0;
    for (double c : confidences) n += c >= threshold ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(confidences.size());
}

} // namespace permpred

#endif // PERMPRED_HYBRID_HPP
