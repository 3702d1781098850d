#ifndef PERMPRED_EVALUATOR_HPP
#define PERMPRED_EVALUATOR_HPP

#include "permpred/hybrid.hpp"
#include "permpred/metrics.hpp"

#include <atomic>
#include <cmath>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <thread>

namespace permpred {

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

/// Everything a predictor may see for one target request.
struct PredictInput {
    const Catalog* catalog = nullptr;
    const UserProfile* profile = nullptr;
    PermissionRequest target;
    /// Sampled training-fold decisions of the same user.
    const std::vector<PermissionDecision>* history = nullptr;
    /// The user's requests under evaluation in the same fold (labels withheld).
    const std::vector<PermissionRequest>* candidates = nullptr;
};

/// Must be callable from several threads at once.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual Prediction predict(const PredictInput& in) const = 0;
};

/// Training material for one fold. Contains no test-fold decisions.
struct FoldContext {
    const Catalog* catalog = nullptr;
    int fold = 0;
    int repetition = 0;
    std::uint64_t seed = 0;
    std::vector<PermissionDecision> training;
};

using PredictorFactory = std::function<std::unique_ptr<Predictor>(const FoldContext&)>;

class CfPredictor : public Predictor {
public:
    CfPredictor(std::shared_ptr<const cf::CfModel> model, double coverage_threshold)
        : model_(std::move(model)), threshold_(coverage_threshold) {}

    /// An unseen user or request gets Deny at confidence 0.
    Prediction predict(const PredictInput& in) const override {
        auto p = model_->predict(in.target.participant_id, in.target.key());
        if (!p) return {Label::Deny, 0.0, PredictionSource::CF, 0.0 >= threshold_};
        return {p->label, p->confidence, PredictionSource::CF, p->confidence >= threshold_};
    }

    const cf::CfModel& model() const { return *model_; }

private:
    std::shared_ptr<const cf::CfModel> model_;
    double threshold_;
};

class IclPredictor : public Predictor {
public:
    IclPredictor(std::shared_ptr<icl::TextProvider> provider, double coverage_threshold, icl::RetryPolicy retry = {},
                 icl::PromptOptions options = {})
        : provider_(std::move(provider)), threshold_(coverage_threshold), retry_(retry), options_(options) {}

    Prediction predict(const PredictInput& in) const override {
        return predict_icl(*in.catalog, *in.profile, in.target, *in.history, *provider_, threshold_, retry_, options_)
            .prediction;
    }

private:
    std::shared_ptr<icl::TextProvider> provider_;
    double threshold_;
    icl::RetryPolicy retry_;
    icl::PromptOptions options_;
};

class HybridPredictor : public Predictor {
public:
    HybridPredictor(std::shared_ptr<const cf::CfModel> model, std::shared_ptr<icl::TextProvider> provider,
                    HybridConfig config, icl::RetryPolicy retry = {}, icl::PromptOptions options = {})
        : model_(std::move(model)), provider_(std::move(provider)), config_(config), retry_(retry), options_(options) {}

    Prediction predict(const PredictInput& in) const override {
        return predict_hybrid(*in.catalog, *in.profile, in.target, *in.history, *in.candidates, model_.get(), *provider_,
                              config_, retry_, options_)
            .prediction;
    }

private:
    std::shared_ptr<const cf::CfModel> model_;
    std::shared_ptr<icl::TextProvider> provider_;
    HybridConfig config_;
    icl::RetryPolicy retry_;
    icl::PromptOptions options_;
};

/// One CF model per fold, trained on every user's training-fold decisions.
inline std::shared_ptr<const cf::CfModel> train_fold_model(const FoldContext& ctx, cf::Hyperparameters hyper) {
    hyper.seed = ctx.seed + static_cast<std::uint64_t>(ctx.fold);
    auto obs = cf::observations_from(ctx.training);
    if (obs.empty()) return std::make_shared<const cf::CfModel>();
    return std::make_shared<const cf::CfModel>(cf::train(obs, hyper));
}

inline PredictorFactory cf_factory(cf::Hyperparameters hyper, double coverage_threshold = 0.0) {
    return [=](const FoldContext& ctx) -> std::unique_ptr<Predictor> {
        return std::make_unique<CfPredictor>(train_fold_model(ctx, hyper), coverage_threshold);
    };
}

inline PredictorFactory icl_factory(std::shared_ptr<icl::TextProvider> provider, double coverage_threshold = 0.0,
                                    icl::RetryPolicy retry = {}, icl::PromptOptions options = {}) {
    return [=](const FoldContext&) -> std::unique_ptr<Predictor> {
        return std::make_unique<IclPredictor>(provider, coverage_threshold, retry, options);
    };
}

inline PredictorFactory hybrid_factory(cf::Hyperparameters hyper, std::shared_ptr<icl::TextProvider> provider,
                                       HybridConfig config, icl::RetryPolicy retry = {},
                                       icl::PromptOptions options = {}) {
    config.validate();
    return [=](const FoldContext& ctx) -> std::unique_ptr<Predictor> {
        return std::make_unique<HybridPredictor>(train_fold_model(ctx, with_caps(hyper, config)), provider, config,
                                                 retry, options);
    };
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct PredictionRecord {
    PermissionRequest request;
    Label truth = Label::Deny;
    Prediction prediction;
    int fold = 0;
    int repetition = 0;
};

struct FoldReport {
    int fold = 0;
    int repetition = 0;
    std::uint64_t seed = 0;
    std::size_t predictions = 0;
    double coverage = 0.0;
    MetricRow metrics;
};

struct MeanSd {
    double mean = 0.0;
    /// Sample standard deviation (n - 1); 0 for a single value.
    double sd = 0.0;
    std::size_t n = 0;
};

inline MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd r;
    r.n = xs.size();
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - r.mean) * (x - r.mean);
        r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return r;
}

inline constexpr std::array<const char*, 6> kMetricNames = {"accuracy", "precision", "recall", "f1", "fpr", "fnr"};

inline std::optional<double> metric_value(const MetricRow& m, std::string_view name) {
    if (name == "accuracy") return m.accuracy;
    if (name == "precision") return m.precision;
    if (name == "recall") return m.recall;
    if (name == "f1") return m.f1;
    if (name == "fpr") return m.fpr;
    if (name == "fnr") return m.fnr;
    return std::nullopt;
}

/// Mean and SD of each metric over the rows that define it.
inline std::map<std::string, MeanSd> summarize(const std::vector<MetricRow>& rows) {
    std::map<std::string, MeanSd> out;
    for (const char* name : kMetricNames) {
        std::vector<double> xs;
        for (const auto& r : rows) {
            if (auto v = metric_value(r, name)) xs.push_back(*v);
        }
        out[name] = mean_sd(xs);
    }
    return out;
}

/// Provenance check: every training and history item came from a non-test fold.
struct LeakageAudit {
    std::size_t training_items = 0;
    std::size_t history_items = 0;
    std::vector<std::string> violations;
    bool clean() const { return violations.empty(); }
};

struct CvReport {
    std::string predictor;
    int k = 5;
    double history_ratio = 1.0;
    double coverage_threshold = 0.0;
    std::vector<std::uint64_t> seeds;
    std::vector<FoldReport> folds;
    std::vector<PredictionRecord> records;
    /// Over covered predictions of all folds and repetitions.
    MetricRow overall;
    double coverage = 0.0;
    /// Dispersion across the folds of each repetition, pooled.
    std::map<std::string, MeanSd> across_folds;
    /// Dispersion of per-repetition pooled metrics across seeds.
    std::map<std::string, MeanSd> across_repetitions;
    LeakageAudit audit;
    std::vector<std::string> warnings;
};

struct CvOptions {
    int k = 5;
    double history_ratio = 1.0;
    std::vector<std::uint64_t> seeds{0};
    /// Threads predicting inside one fold; folds themselves run concurrently.
    int workers = 1;
    /// Recorded in the report; predictors apply their own gate.
    double coverage_threshold = 0.0;
    std::string predictor_name = "custom";
};

namespace detail {

template <typename F>
void parallel_for(std::size_t n, int workers, F&& body) {
    const auto threads = static_cast<std::size_t>(std::max(1, workers));
    if (threads == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

struct FoldOutcome {
    FoldReport report;
    std::vector<PredictionRecord> records;
    LeakageAudit audit;
};

inline Error with_fold_context(const Error& e, int fold, int repetition) {
    return Error(e.code(),
                 "fold " + std::to_string(fold) + " (repetition " + std::to_string(repetition) + "): " + e.what(),
                 e.details());
}

inline FoldOutcome run_fold(const Dataset& d, const FoldPlan& plan, int fold, int repetition, std::uint64_t seed,
                            const PredictorFactory& factory, const CvOptions& options) {
    FoldOutcome out;
    out.report.fold = fold;
    out.report.repetition = repetition;
    out.report.seed = seed;

    FoldContext ctx;
    ctx.catalog = &d.catalog;
    ctx.fold = fold;
    ctx.repetition = repetition;
    ctx.seed = seed;
    std::vector<const PermissionDecision*> test;
    for (const auto& x : d.decisions) {
        const int f = plan.fold_of(x.participant_id, x.query_id);
        if (f == fold) {
            test.push_back(&x);
        } else if (f >= 0) {
            ctx.training.push_back(x);
        }
    }
    for (const auto& x : ctx.training) {
        ++out.audit.training_items;
        if (plan.fold_of(x.participant_id, x.query_id) == fold) {
            out.audit.violations.push_back("training edge " + x.participant_id + "/" + x.key().str() + " is in the test fold");
        }
    }

    std::unique_ptr<Predictor> predictor;
    try {
        predictor = factory(ctx);
    } catch (const Error& e) {
        throw with_fold_context(e, fold, repetition);
    }

    std::map<std::string, std::vector<const PermissionDecision*>> by_user;
    for (const auto* x : test) by_user[x->participant_id].push_back(x);

    const HistoryBudget budget{options.history_ratio, seed};
    struct UserWork {
        const UserProfile* profile;
        std::vector<PermissionDecision> history;
        std::vector<PermissionRequest> candidates;
        std::vector<const PermissionDecision*> truth;
    };
    std::vector<UserWork> work;
    static const UserProfile kAnonymous{};
    for (auto& [user, items] : by_user) {
        UserWork w;
        w.profile = d.find_profile(user);
        if (w.profile == nullptr) w.profile = &kAnonymous;
        w.history = sample_history(d, plan, fold, budget, user);
        for (const auto& h : w.history) {
            ++out.audit.history_items;
            if (plan.fold_of(h.participant_id, h.query_id) == fold) {
                out.audit.violations.push_back("history item " + user + "/" + h.key().str() + " is in the test fold");
            }
        }
        for (const auto* x : items) {
            w.candidates.push_back(d.request_for(*x));
            w.truth.push_back(x);
        }
        work.push_back(std::move(w));
    }

    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t u = 0; u < work.size(); ++u) {
        for (std::size_t i = 0; i < work[u].truth.size(); ++i) jobs.emplace_back(u, i);
    }
    out.records.resize(jobs.size());
    try {
        parallel_for(jobs.size(), options.workers, [&](std::size_t j) {
            const auto& w = work[jobs[j].first];
            const auto i = jobs[j].second;
            PredictInput in{&d.catalog, w.profile, w.candidates[i], &w.history, &w.candidates};
            PredictionRecord r;
            r.request = w.candidates[i];
            r.truth = *binary_label(w.truth[i]->option);
            r.prediction = predictor->predict(in);
            r.fold = fold;
            r.repetition = repetition;
            out.records[j] = std::move(r);
        });
    } catch (const Error& e) {
        throw with_fold_context(e, fold, repetition);
    }

    ConfusionCounts counts;
    std::size_t covered = 0;
    for (const auto& r : out.records) {
        if (!r.prediction.covered) continue;
        ++covered;
        counts.add(r.truth, r.prediction.label);
    }
    out.report.predictions = out.records.size();
    out.report.coverage = out.records.empty() ? 0.0 : static_cast<double>(covered) / static_cast<double>(out.records.size());
    out.report.metrics = compute_metrics(counts);
    return out;
}

} // namespace detail

/// k-fold cross-validation over per-participant query folds. Expects a
/// dataset already passed through filter_for_modeling (binary labels only).
inline CvReport cross_validate(const Dataset& d, const PredictorFactory& factory, const CvOptions& options = {}) {
    HistoryBudget{options.history_ratio, 0}.validate();
    if (options.seeds.empty()) throw Error(ErrorCode::InvalidArgument, "at least one seed is required");
    for (const auto& x : d.decisions) {
        if (!binary_label(x.option)) {
            throw Error(ErrorCode::InvalidArgument, "cross-validation needs binary labels; filter the dataset first");
        }
    }
    if (d.decisions.empty()) throw Error(ErrorCode::EmptyDataset, "no decisions to evaluate");

    CvReport report;
    report.predictor = options.predictor_name;
    report.k = options.k;
    report.history_ratio = options.history_ratio;
    report.coverage_threshold = options.coverage_threshold;
    report.seeds = options.seeds;

    std::vector<MetricRow> fold_rows;
    std::vector<MetricRow> repetition_rows;
    ConfusionCounts total;
    std::size_t covered = 0;

    for (std::size_t rep = 0; rep < options.seeds.size(); ++rep) {
        const std::uint64_t seed = options.seeds[rep];
        const FoldPlan plan = make_folds(d, options.k, seed);
        for (const auto& w : plan.warnings) report.warnings.push_back(w);

        std::vector<std::future<detail::FoldOutcome>> futures;
        for (int f = 0; f < options.k; ++f) {
            futures.push_back(std::async(std::launch::async, [&, f] {
                return detail::run_fold(d, plan, f, static_cast<int>(rep), seed, factory, options);
            }));
        }
        ConfusionCounts rep_counts;
        std::exception_ptr failure;
        for (auto& fut : futures) {
            try {
                auto outcome = fut.get();
                rep_counts += outcome.report.metrics.counts;
                for (const auto& r : outcome.records) covered += r.prediction.covered ? 1 : 0;
                report.audit.training_items += outcome.audit.training_items;
                report.audit.history_items += outcome.audit.history_items;
                for (auto& v : outcome.audit.violations) report.audit.violations.push_back(std::move(v));
                fold_rows.push_back(outcome.report.metrics);
                report.folds.push_back(std::move(outcome.report));
                for (auto& r : outcome.records) report.records.push_back(std::move(r));
            } catch (...) {
                if (!failure) failure = std::current_exception();
            }
        }
        if (failure) std::rethrow_exception(failure);
        total += rep_counts;
        repetition_rows.push_back(compute_metrics(rep_counts));
    }

    report.overall = compute_metrics(total);
    report.coverage = report.records.empty() ? 0.0
                                             : static_cast<double>(covered) / static_cast<double>(report.records.size());
    report.across_folds = summarize(fold_rows);
    report.across_repetitions = summarize(repetition_rows);
    if (!report.audit.clean()) {
        throw Error(ErrorCode::IntegrityError, "leakage audit failed", report.audit.violations);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Threshold sweeps and breakdowns
// ---------------------------------------------------------------------------

struct SweepRow {
    double threshold = 0.0;
    double coverage = 0.0;
    std::size_t covered = 0;
    /// Over predictions with confidence >= threshold.
    MetricRow metrics;
};

inline std::vector<SweepRow> sweep_thresholds(const std::vector<PredictionRecord>& records,
                                              const std::vector<double>& grid) {
    std::vector<SweepRow> rows;
    for (double t : grid) {
        SweepRow row;
        row.threshold = t;
        ConfusionCounts c;
        for (const auto& r : records) {
            if (r.prediction.confidence >= t) {
                c.add(r.truth, r.prediction.label);
                ++row.covered;
            }
        }
        row.coverage = records.empty() ? 0.0 : static_cast<double>(row.covered) / static_cast<double>(records.size());
        row.metrics = compute_metrics(c);
        rows.push_back(row);
    }
    return rows;
}

/// Grid from 0 to the largest confidence in `records`.
inline std::vector<double> confidence_grid(const std::vector<PredictionRecord>& records, std::size_t steps = 101) {
    double hi = 0.0;
    for (const auto& r : records) hi = std::max(hi, r.prediction.confidence);
    return cf::linear_grid(0.0, hi, steps);
}

/// The row whose coverage is closest to `target`; ties prefer the higher threshold.
inline const SweepRow* row_near_coverage(const std::vector<SweepRow>& rows, double target) {
    const SweepRow* best = nullptr;
    for (const auto& r : rows) {
        if (r.covered == 0) continue;
        if (best == nullptr || std::abs(r.coverage - target) <= std::abs(best->coverage - target)) best = &r;
    }
    return best;
}

enum class BreakdownAxis { User, Domain, Tool, DataType };

inline std::string_view to_string(BreakdownAxis a) {
    switch (a) {
    case BreakdownAxis::User: return "user";
    case BreakdownAxis::Domain: return "domain";
    case BreakdownAxis::Tool: return "tool";
    case BreakdownAxis::DataType: return "data_type";
    }
    return "";
}

inline BreakdownAxis parse_axis(std::string_view text) {
    const std::string k = normalize_id(text);
    if (k == "user") return BreakdownAxis::User;
    if (k == "domain") return BreakdownAxis::Domain;
    if (k == "tool") return BreakdownAxis::Tool;
    if (k == "data-type" || k == "datatype") return BreakdownAxis::DataType;
    throw Error(ErrorCode::InvalidArgument, "unknown breakdown axis '" + std::string(text) + "'");
}

struct GroupRow {
    std::string key;
    std::size_t size = 0;
    MetricRow metrics;
};

/// Metric rows per group over covered predictions; `size` counts all records.
inline std::vector<GroupRow> breakdown(const std::vector<PredictionRecord>& records, BreakdownAxis axis) {
    std::map<std::string, std::pair<std::size_t, ConfusionCounts>> groups;
    for (const auto& r : records) {
        std::string key;
        switch (axis) {
        case BreakdownAxis::User: key = r.request.participant_id; break;
        case BreakdownAxis::Domain: key = std::string(to_string(r.request.domain)); break;
        case BreakdownAxis::Tool: key = r.request.tool_id; break;
        case BreakdownAxis::DataType: key = r.request.data_type_id; break;
        }
        auto& g = groups[key];
        ++g.first;
        if (r.prediction.covered) g.second.add(r.truth, r.prediction.label);
    }
    std::vector<GroupRow> out;
    for (const auto& [key, g] : groups) out.push_back({key, g.first, compute_metrics(g.second)});
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline json to_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}, {"n", m.n}}; }

inline json to_json(const std::map<std::string, MeanSd>& m) {
    json j = json::object();
    for (const auto& [k, v] : m) j[k] = to_json(v);
    return j;
}

inline json to_json(const PredictionRecord& r) {
    return {{"request", to_json(r.request)}, {"truth", std::string(to_string(r.truth))},
            {"prediction", to_json(r.prediction)}, {"fold", r.fold}, {"repetition", r.repetition}};
}

inline json to_json(const CvReport& r, bool include_records = false) {
    json folds = json::array();
    for (const auto& f : r.folds) {
        folds.push_back({{"fold", f.fold}, {"repetition", f.repetition}, {"seed", f.seed},
                         {"predictions", f.predictions}, {"coverage", f.coverage}, {"metrics", to_json(f.metrics)}});
    }
    json j = {{"predictor", r.predictor},
              {"k", r.k},
              {"history_ratio", r.history_ratio},
              {"coverage_threshold", r.coverage_threshold},
              {"seeds", r.seeds},
              {"overall", to_json(r.overall)},
              {"coverage", r.coverage},
              {"across_folds", to_json(r.across_folds)},
              {"across_repetitions", to_json(r.across_repetitions)},
              {"folds", folds},
              {"audit",
               {{"training_items", r.audit.training_items},
                {"history_items", r.audit.history_items},
                {"violations", r.audit.violations}}},
              {"warnings", r.warnings}};
    if (include_records) {
        json recs = json::array();
        for (const auto& x : r.records) recs.push_back(to_json(x));
        j["records"] = recs;
    }
    return j;
}

inline json to_json(const std::vector<SweepRow>& rows) {
    json j = json::array();
    for (const auto& r : rows) {
        j.push_back({{"threshold", r.threshold}, {"coverage", r.coverage}, {"covered", r.covered},
                     {"metrics", to_json(r.metrics)}});
    }
    return j;
}

inline json to_json(const std::vector<GroupRow>& rows) {
    json j = json::array();
    for (const auto& r : rows) j.push_back({{"key", r.key}, {"size", r.size}, {"metrics", to_json(r.metrics)}});
    return j;
}

inline std::string csv_value(const std::optional<double>& v) {
    return v ? icl::format_confidence(*v) : std::string();
}

/// threshold,coverage,covered,accuracy,precision,recall,f1,fpr,fnr
inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "threshold,coverage,covered,accuracy,precision,recall,f1,fpr,fnr\n";
    for (const auto& r : rows) {
        out += icl::format_confidence(r.threshold) + "," + icl::format_confidence(r.coverage) + "," +
               std::to_string(r.covered);
        for (const char* name : kMetricNames) out += "," + csv_value(metric_value(r.metrics, name));
        out += "\n";
    }
    return out;
}

inline std::string breakdown_csv(const std::vector<GroupRow>& rows) {
    std::string out = "key,size,accuracy,precision,recall,f1,fpr,fnr\n";
    for (const auto& r : rows) {
        std::string key = r.key;
        if (key.find_first_of(",\"") != std::string::npos) {
            std::string quoted = "\"";
            for (char c : key) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
            key = quoted + "\"";
        }
        out += key + "," + std::to_string(r.size);
        for (const char* name : kMetricNames) out += "," + csv_value(metric_value(r.metrics, name));
        out += "\n";
    }
    return out;
}

} // namespace permpred

#endif // PERMPRED_EVALUATOR_HPP
