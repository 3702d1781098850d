// permpred-cli: dataset tooling, model training, evaluation and the decision service.
//
// Exit codes: 0 success, 1 component failure, 2 usage error. Failures print a
// JSON envelope {"error": {"code", "message", "details"}} on stderr.

#include "permpred/analytics.hpp"
#include "permpred/config.hpp"
#include "permpred/evaluator.hpp"
#include "permpred/http_provider.hpp"
#include "permpred/service_http.hpp"
#include "permpred/synthetic.hpp"

#include "CLI11.hpp"

#include <csignal>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace permpred;

namespace {

constexpr int kUsage = 2;
constexpr int kFailure = 1;

void print_error(std::string_view code, const std::string& message, const std::vector<std::string>& details = {}) {
    json e = {{"code", std::string(code)}, {"message", message}};
    if (!details.empty()) e["details"] = details;
    std::cerr << json{{"error", e}}.dump() << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Resolved config goes beside every written artifact.
void write_config_beside(const fs::path& artifact, const RunConfig& c) {
    const fs::path dir = artifact.has_parent_path() ? artifact.parent_path() : fs::path(".");
    write_json(dir / (artifact.stem().string() + ".config.json"), to_json(c));
}

std::shared_ptr<icl::TextProvider> make_provider(const ProviderSelection& p) {
    std::shared_ptr<icl::TextProvider> inner;
    if (p.kind == "mock") {
        if (p.mock_policy == "majority") {
            inner = icl::mock_provider(icl::MajorityOfHistory{});
        } else if (p.mock_policy == "fixed-allow") {
            inner = icl::mock_provider(icl::FixedLabel{Label::Allow, 0.9});
        } else if (p.mock_policy == "fixed-deny") {
            inner = icl::mock_provider(icl::FixedLabel{Label::Deny, 0.9});
        } else {
            throw Error(ErrorCode::InvalidConfig, "mock policy must be majority, fixed-allow or fixed-deny");
        }
    } else if (p.kind == "http") {
        inner = std::make_shared<icl::HttpProvider>(p.remote);
    } else {
        throw Error(ErrorCode::InvalidConfig, "provider must be mock or http; got '" + p.kind + "'");
    }
    return std::make_shared<icl::LimitedProvider>(inner, p.max_in_flight);
}

icl::PromptOptions prompt_options(const RunConfig& c) { return {c.history_char_budget}; }

icl::RetryPolicy retry_policy(const RunConfig& c) { return {c.provider.remote.retries}; }

cf::Hyperparameters cf_hyper(const RunConfig& c) {
    auto h = with_caps(c.cf, c.hybrid);
    h.seed = c.seed;
    h.validate();
    return h;
}

Dataset modeling_view(const Dataset& d, std::size_t min_queries) { return filter_for_modeling(d, min_queries).dataset; }

cf::CfModel load_model(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::InvalidArgument, "cannot open model file " + path.string());
    try {
        return cf::model_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::SchemaError, path.string() + ": " + e.what());
    }
}

/// A single request named on the command line.
struct TargetArgs {
    std::string user;
    std::string query;
    std::string tool;
    std::string data_type;

    void add_to(CLI::App* app) {
        app->add_option("--user", user, "Participant id")->required();
        app->add_option("--query", query, "Query id")->required();
        app->add_option("--type", data_type, "Data type id")->required();
        app->add_option("--tool", tool, "Tool id (default: the query's first tool)");
    }

    PermissionRequest resolve(const Catalog& catalog) const {
        const Query* q = catalog.find_query(normalize_id(query));
        if (q == nullptr) throw Error(ErrorCode::InvalidArgument, "unknown query " + query);
        PermissionRequest r;
        r.participant_id = normalize_id(user);
        r.query_id = q->id;
        r.query_text = q->text;
        r.domain = q->domain;
        r.tool_id = tool.empty() ? q->tools.front() : normalize_id(tool);
        r.data_type_id = normalize_id(data_type);
        if (!catalog.tools.count(r.tool_id)) throw Error(ErrorCode::InvalidArgument, "unknown tool " + r.tool_id);
        if (!catalog.data_types.count(r.data_type_id)) {
            throw Error(ErrorCode::InvalidArgument, "unknown data type " + r.data_type_id);
        }
        return r;
    }
};

/// The user's decisions on other queries, plus the user's requests for the
/// target query (labels withheld).
struct UserContext {
    UserProfile profile;
    std::vector<PermissionDecision> history;
    std::vector<PermissionRequest> candidates;
};

UserContext user_context(const Dataset& d, const PermissionRequest& target) {
    const UserProfile* p = d.find_profile(target.participant_id);
    if (p == nullptr) throw Error(ErrorCode::UnknownUser, "unknown user " + target.participant_id);
    UserContext ctx{*p, {}, {target}};
    for (const auto& x : d.decisions) {
        if (x.participant_id != target.participant_id) continue;
        if (x.query_id == target.query_id) {
            ctx.candidates.push_back(d.request_for(x));
        } else {
            ctx.history.push_back(x);
        }
    }
    return ctx;
}

std::vector<PermissionDecision> without_query(const Dataset& d, const PermissionRequest& target) {
    std::vector<PermissionDecision> out;
    for (const auto& x : d.decisions) {
        if (x.participant_id == target.participant_id && x.query_id == target.query_id) continue;
        out.push_back(x);
    }
    return out;
}

json cf_summary(const cf::CfModel& m) {
    const auto& c = m.calibration;
    return {{"users", m.users.size()},
            {"requests", m.requests.size()},
            {"edges", m.edge_count},
            {"final_loss", m.loss_history.empty() ? json(nullptr) : json(m.loss_history.back())},
            {"t_eq", c.t_eq},
            {"t_pos", cf::detail::finite_or_null(c.t_pos)},
            {"t_neg", cf::detail::finite_or_null(c.t_neg)},
            {"fpr_at_eq", c.fpr_at_eq},
            {"fnr_at_eq", c.fnr_at_eq},
            {"warnings", c.warnings}};
}

json prediction_json(const Prediction& p, const icl::ProviderResponse* response = nullptr) {
    json j = to_json(p);
    if (response != nullptr) {
        j["raw_response"] = response->raw_text;
        j["attempts"] = response->attempts;
    }
    return j;
}

std::string analysis_csv(const json& report) {
    if (report.contains("cdf")) {
        std::string out = "value,cumulative_fraction\n";
        for (const auto& pt : report.at("cdf")) out += pt[0].dump() + "," + pt[1].dump() + "\n";
        return out;
    }
    if (report.contains("rows") && report.at("rows").is_array() && !report.at("rows").empty() &&
        report.at("rows")[0].contains("shares")) {
        std::string out = "key,label,total";
        for (DecisionOption o : kAllOptions) out += "," + std::string(to_string(o));
        out += "\n";
        for (const auto& r : report.at("rows")) {
            out += r.at("key").get<std::string>() + ",\"" + r.at("label").get<std::string>() + "\"," +
                   std::to_string(r.at("total").get<std::size_t>());
            for (DecisionOption o : kAllOptions) out += "," + json(r.at("shares").at(std::string(to_string(o)))).dump();
            out += "\n";
        }
        return out;
    }
    throw Error(ErrorCode::InvalidArgument, "this report has no comma-separated form");
}

std::sig_atomic_t volatile g_stop = 0;
service::HttpFrontend* g_frontend = nullptr;

void on_signal(int) {
    g_stop = 1;
    if (g_frontend != nullptr) g_frontend->stop();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Permission prediction engine: data, models, evaluation and the decision service", "permpred-cli"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    // Run-wide options; accepted before or after the subcommand.
    std::string run_config_path, ini_path, provider_kind, mock_policy, endpoint, model_name;
    int workers = 1, folds = 5, repetitions = 1, max_in_flight = 4, dim = 32, layers = 2, epochs = 300;
    std::uint64_t seed = 0;
    double coverage_threshold = 0.0, history_ratio = 1.0, learning_rate = 0.05, l2 = 1e-4;
    std::size_t history_chars = 0, min_queries = 5;
    std::vector<CLI::Option*> run_opts;
    auto run_opt = [&](CLI::Option* o) {
        run_opts.push_back(o);
        return o;
    };
    app.add_option("--run-config", run_config_path, "Resolved config from an earlier run to start from")
        ->check(CLI::ExistingFile);
    app.add_option("--config", ini_path, "INI file; its [hybrid] section sets the hybrid fields")
        ->check(CLI::ExistingFile);
    auto* o_workers = run_opt(app.add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber));
    auto* o_seed = run_opt(app.add_option("--seed", seed, "Base seed"));
    auto* o_provider = run_opt(app.add_option("--provider", provider_kind, "mock | http")
                                   ->check(CLI::IsMember({"mock", "http"})));
    auto* o_policy = run_opt(app.add_option("--mock-policy", mock_policy, "majority | fixed-allow | fixed-deny"));
    auto* o_endpoint = run_opt(app.add_option("--endpoint", endpoint, "Chat-completions URL for --provider http"));
    auto* o_model_name = run_opt(app.add_option("--model-name", model_name, "Remote model name"));
    auto* o_in_flight = run_opt(app.add_option("--max-in-flight", max_in_flight, "Concurrent provider calls")
                                    ->check(CLI::PositiveNumber));
    auto* o_threshold = run_opt(app.add_option("--coverage-threshold", coverage_threshold, "Coverage gate")
                                    ->check(CLI::Range(0.0, 1.0)));
    auto* o_ratio = run_opt(app.add_option("--history-ratio", history_ratio, "History budget")
                                ->check(CLI::Range(0.0, 1.0)));
    auto* o_folds = run_opt(app.add_option("--folds", folds, "Cross-validation folds"));
    auto* o_reps = run_opt(app.add_option("--repetitions", repetitions, "Repetitions with seeds seed, seed+1, ...")
                               ->check(CLI::PositiveNumber));
    auto* o_dim = run_opt(app.add_option("--dim", dim, "CF embedding size"));
    auto* o_layers = run_opt(app.add_option("--layers", layers, "CF propagation layers"));
    auto* o_epochs = run_opt(app.add_option("--epochs", epochs, "CF training epochs"));
    auto* o_lr = run_opt(app.add_option("--lr", learning_rate, "CF learning rate"));
    auto* o_l2 = run_opt(app.add_option("--l2", l2, "CF L2 penalty"));
    auto* o_chars = run_opt(app.add_option("--history-chars", history_chars, "Prompt history budget in characters"));
    app.add_option("--min-queries", min_queries, "Modeling filter: minimum always/never queries per participant");
    app.fallthrough();

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Validate, summarize or synthesize datasets");
    ingest->require_subcommand(1);
    std::string data_path, out_path;
    auto* validate_cmd = ingest->add_subcommand("validate", "Check a dataset file");
    validate_cmd->add_option("dataset", data_path)->required();
    auto* stats_cmd = ingest->add_subcommand("stats", "Counts before and after the modeling filter");
    stats_cmd->add_option("dataset", data_path)->required();
    stats_cmd->add_option("--out", out_path);
    auto* synth_cmd = ingest->add_subcommand("synth", "Write a planted-structure dataset");
    SyntheticSpec spec;
    double contrast = 1.0;
    synth_cmd->add_option("--out", out_path)->required();
    synth_cmd->add_option("--groups", spec.groups);
    synth_cmd->add_option("--users-per-group", spec.users_per_group);
    synth_cmd->add_option("--domains", spec.domains);
    synth_cmd->add_option("--queries-per-domain", spec.queries_per_domain);
    synth_cmd->add_option("--data-types-per-domain", spec.data_types_per_domain);
    synth_cmd->add_option("--data-per-query", spec.data_per_query);
    synth_cmd->add_option("--unnecessary-rate", spec.unnecessary_rate);
    synth_cmd->add_option("--one-time-rate", spec.one_time_rate);
    synth_cmd->add_option("--contrast", contrast, "Allow probability of a group's favored domains")
        ->check(CLI::Range(0.0, 1.0));

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Study analytics reports");
    std::string report_name, group_by = "domain", scope = "all", csv_path;
    bool concerning_only = false;
    std::size_t top_n = 10;
    analyze->add_option("report", report_name,
                        "table1 | options | appropriateness | extremes | alignment | table3 | jaccard | variance | "
                        "table4 | demographics")
        ->required();
    analyze->add_option("dataset", data_path)->required();
    analyze->add_option("--out", out_path, "Write the JSON report here");
    analyze->add_option("--csv", csv_path, "Write a comma-separated series here");
    analyze->add_option("--group-by", group_by, "options: domain | tool | domain-tool | data-type");
    analyze->add_flag("--concerning-only", concerning_only);
    analyze->add_option("--scope", scope, "extremes: all | correct | mistakes");
    analyze->add_option("--top", top_n, "variance: rows at each end of the data-type listing");

    // cf
    auto* cf_cmd = app.add_subcommand("cf", "Collaborative filtering");
    cf_cmd->require_subcommand(1);
    std::string model_path;
    std::size_t steps = 101;
    auto* cf_train = cf_cmd->add_subcommand("train", "Train and calibrate on a dataset");
    cf_train->add_option("dataset", data_path)->required();
    cf_train->add_option("--model", model_path, "Output model file")->required();
    auto* cf_predict = cf_cmd->add_subcommand("predict", "Score one request");
    TargetArgs target_args;
    cf_predict->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    cf_predict->add_option("--dataset", data_path, "Catalog source for --tool defaults");
    cf_predict->add_option("--user", target_args.user)->required();
    cf_predict->add_option("--query", target_args.query)->required();
    cf_predict->add_option("--tool", target_args.tool)->required();
    cf_predict->add_option("--type", target_args.data_type)->required();
    auto* cf_sweep = cf_cmd->add_subcommand("sweep-thresholds", "Metrics across score thresholds");
    cf_sweep->add_option("dataset", data_path)->required();
    cf_sweep->add_option("--model", model_path, "Trained model (default: train on the dataset)");
    cf_sweep->add_option("--out", out_path, "CSV output")->required();
    cf_sweep->add_option("--steps", steps)->check(CLI::Range(2, 100000));

    // icl / hybrid
    auto* icl_cmd = app.add_subcommand("icl", "In-context prediction");
    icl_cmd->require_subcommand(1);
    auto* icl_prompt = icl_cmd->add_subcommand("prompt", "Print the prompt for one request");
    auto* icl_predict = icl_cmd->add_subcommand("predict", "Predict one request");
    for (auto* c : {icl_prompt, icl_predict}) {
        c->add_option("dataset", data_path)->required();
        target_args.add_to(c);
    }
    auto* hybrid_cmd = app.add_subcommand("hybrid", "CF-augmented in-context prediction");
    hybrid_cmd->require_subcommand(1);
    auto* hybrid_predict = hybrid_cmd->add_subcommand("predict", "Predict one request");
    hybrid_predict->add_option("dataset", data_path)->required();
    hybrid_predict->add_option("--model", model_path, "Trained model (default: train without the target query)");
    target_args.add_to(hybrid_predict);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluation");
    eval_cmd->require_subcommand(1);
    auto* eval_cv = eval_cmd->add_subcommand("cv", "Per-participant k-fold cross-validation");
    std::string predictor_name = "hybrid";
    std::vector<std::string> axes;
    bool with_records = false;
    auto* o_predictor = eval_cv->add_option("--predictor", predictor_name, "cf | icl | hybrid")
                            ->check(CLI::IsMember({"cf", "icl", "hybrid"}));
    eval_cv->add_option("--dataset,dataset", data_path, "Dataset file")->required();
    eval_cv->add_option("--out", out_path, "Output directory")->required();
    eval_cv->add_option("--sweep-steps", steps);
    eval_cv->add_option("--breakdown", axes, "user | domain | tool | data-type (repeatable)");
    eval_cv->add_flag("--records", with_records, "Include per-request records in the report");

    // serve
    auto* serve = app.add_subcommand("serve", "Run the decision service");
    std::string db_path = "permpred.db", host = "127.0.0.1", import_path;
    int port = 8080;
    bool refresh_on_start = false;
    serve->add_option("--db", db_path, "SQLite store");
    serve->add_option("--host", host);
    serve->add_option("--port", port)->check(CLI::Range(0, 65535));
    serve->add_option("--import", import_path, "Seed users and history from a dataset")->check(CLI::ExistingFile);
    serve->add_flag("--refresh", refresh_on_start, "Train the CF model before serving");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help("", CLI::AppFormatMode::Normal) << '\n';
        print_error("UsageError", e.what());
        return kUsage;
    }

    try {
        RunConfig rc;
        if (!run_config_path.empty()) {
            std::ifstream in(run_config_path);
            rc = run_config_from_json(json::parse(in));
        }
        rc.provider.remote.credential = icl::ProviderConfig::from_env().credential;
        if (run_config_path.empty()) rc.provider.remote = icl::ProviderConfig::from_env();
        if (!ini_path.empty()) rc.hybrid = load_hybrid_ini(ini_path, rc.hybrid);
        auto given = [&](CLI::Option* o) { return o->count() > 0; };
        if (given(o_workers)) rc.workers = workers;
        if (given(o_seed)) rc.seed = seed;
        if (given(o_provider)) rc.provider.kind = provider_kind;
        if (given(o_policy)) rc.provider.mock_policy = mock_policy;
        if (given(o_endpoint)) rc.provider.remote.endpoint = endpoint;
        if (given(o_model_name)) rc.provider.remote.model = model_name;
        if (given(o_in_flight)) rc.provider.max_in_flight = max_in_flight;
        if (given(o_threshold)) rc.hybrid.coverage_threshold = coverage_threshold;
        if (given(o_ratio)) rc.history_ratio = history_ratio;
        if (given(o_folds)) rc.folds = folds;
        if (given(o_reps)) rc.repetitions = repetitions;
        if (given(o_dim)) rc.cf.dim = dim;
        if (given(o_layers)) rc.cf.layers = layers;
        if (given(o_epochs)) rc.cf.epochs = epochs;
        if (given(o_lr)) rc.cf.learning_rate = learning_rate;
        if (given(o_l2)) rc.cf.l2 = l2;
        if (given(o_chars)) rc.history_char_budget = history_chars;
        if (o_predictor->count() > 0) rc.predictor = parse_predictor(predictor_name);
        if (!data_path.empty()) rc.dataset = data_path;
        rc.hybrid.validate();

        // ---- ingest ----------------------------------------------------
        if (validate_cmd->parsed()) {
            const Dataset d = load_dataset(data_path);
            const auto c = count_binary(d);
            std::cout << json{{"valid", true},
                              {"participants", c.participants},
                              {"profiles", d.profiles.size()},
                              {"decisions", c.decisions},
                              {"tools", d.catalog.tools.size()},
                              {"data_types", d.catalog.data_types.size()},
                              {"queries", d.catalog.queries.size()}}
                             .dump(2)
                      << '\n';
            return 0;
        }
        if (stats_cmd->parsed()) {
            const Dataset d = load_dataset(data_path);
            const auto raw = count_binary(d);
            const auto filtered = filter_for_modeling(d, min_queries);
            auto counts = [](const DatasetCounts& c) {
                return json{{"participants", c.participants}, {"decisions", c.decisions}, {"allow", c.allow},
                            {"deny", c.deny}};
            };
            const json j = {{"raw", counts(raw)},
                            {"modeling", counts(filtered.counts)},
                            {"min_queries", min_queries},
                            {"excluded_participants", filtered.excluded_participants}};
            std::cout << j.dump(2) << '\n';
            if (!out_path.empty()) {
                write_json(out_path, j);
                write_config_beside(out_path, rc);
            }
            return 0;
        }
        if (synth_cmd->parsed()) {
            spec.allow_probability.assign(static_cast<std::size_t>(std::max(spec.groups, 0)), {});
            for (int g = 0; g < spec.groups; ++g) {
                for (int dom = 0; dom < spec.domains; ++dom) {
                    spec.allow_probability[static_cast<std::size_t>(g)].push_back((g + dom) % 2 == 0 ? contrast
                                                                                                      : 1.0 - contrast);
                }
            }
            const auto syn = generate_synthetic(spec, rc.seed);
            save_dataset(syn.dataset, out_path);
            rc.dataset = out_path;
            write_config_beside(out_path, rc);
            std::cout << json{{"written", out_path},
                              {"participants", syn.dataset.profiles.size()},
                              {"decisions", syn.dataset.decisions.size()}}
                             .dump(2)
                      << '\n';
            return 0;
        }

        // ---- analyze ---------------------------------------------------
        if (analyze->parsed()) {
            const Dataset d = load_dataset(data_path);
            const std::string name = normalize_id(report_name);
            json report;
            if (name == "table1") {
                report = analytics::to_json(analytics::option_distribution(d, analytics::GroupBy::DomainTool, false));
            } else if (name == "options") {
                const std::string g = normalize_id(group_by);
                analytics::GroupBy by = analytics::GroupBy::Domain;
                if (g == "tool") {
                    by = analytics::GroupBy::Tool;
                } else if (g == "domain-tool") {
                    by = analytics::GroupBy::DomainTool;
                } else if (g == "data-type") {
                    by = analytics::GroupBy::DataType;
                } else if (g != "domain") {
                    throw Error(ErrorCode::InvalidArgument, "unknown --group-by " + group_by);
                }
                report = analytics::to_json(analytics::option_distribution(d, by, concerning_only));
            } else if (name == "appropriateness") {
                report = analytics::to_json(analytics::appropriateness(d));
            } else if (name == "extremes") {
                const std::string s = normalize_id(scope);
                analytics::InstanceScope sc = analytics::InstanceScope::All;
                if (s == "correct") {
                    sc = analytics::InstanceScope::Correct;
                } else if (s == "mistakes" || s == "with-mistakes") {
                    sc = analytics::InstanceScope::WithMistakes;
                } else if (s != "all") {
                    throw Error(ErrorCode::InvalidArgument, "unknown --scope " + scope);
                }
                report = analytics::to_json(analytics::sharing_extremes(d, sc));
            } else if (name == "alignment" || name == "table3") {
                report = analytics::to_json(analytics::alignment_table(d));
            } else if (name == "jaccard") {
                report = analytics::to_json(analytics::jaccard_pairs(d));
            } else if (name == "variance" || name == "table4") {
                report = analytics::to_json(analytics::variance_report(d), top_n);
            } else if (name == "demographics") {
                report = analytics::to_json(analytics::demographic_breakdown(d));
            } else {
                throw Error(ErrorCode::InvalidArgument, "unknown report '" + report_name + "'");
            }
            report["report"] = name;
            report["version"] = std::string(kVersion);
            if (!out_path.empty()) {
                write_json(out_path, report);
                write_config_beside(out_path, rc);
            } else {
                std::cout << report.dump(2) << '\n';
            }
            if (!csv_path.empty()) write_text(csv_path, analysis_csv(report));
            return 0;
        }

        // ---- cf --------------------------------------------------------
        if (cf_train->parsed()) {
            const Dataset d = modeling_view(load_dataset(data_path), min_queries);
            const auto model = cf::train(cf::observations_from(d.decisions), cf_hyper(rc));
            write_json(model_path, cf::to_json(model));
            write_config_beside(model_path, rc);
            std::cout << cf_summary(model).dump(2) << '\n';
            return 0;
        }
        if (cf_predict->parsed()) {
            const auto model = load_model(model_path);
            const RequestKey key{normalize_id(target_args.query), normalize_id(target_args.tool),
                                 normalize_id(target_args.data_type)};
            const std::string user = normalize_id(target_args.user);
            json j = {{"user", user}, {"request", key.str()}};
            if (auto p = model.predict(user, key)) {
                j["recommendation"] = {{"score", p->score},
                                       {"label", std::string(to_string(p->label))},
                                       {"confidence", p->confidence},
                                       {"region", std::string(cf::to_string(p->region))}};
            } else {
                j["recommendation"] = nullptr;
                j["reason"] = "NoRecommendation";
            }
            std::cout << j.dump(2) << '\n';
            return 0;
        }
        if (cf_sweep->parsed()) {
            const Dataset d = modeling_view(load_dataset(data_path), min_queries);
            const auto model = model_path.empty() ? cf::train(cf::observations_from(d.decisions), cf_hyper(rc))
                                                  : load_model(model_path);
            std::vector<cf::ScoredLabel> scored;
            std::vector<double> scores;
            for (const auto& x : d.decisions) {
                if (auto s = model.score(x.participant_id, x.key())) {
                    scored.push_back({*s, *binary_label(x.option)});
                    scores.push_back(*s);
                }
            }
            if (scored.empty()) throw Error(ErrorCode::EmptyInput, "the model scores none of the dataset's decisions");
            const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
            std::string csv = "threshold,tp,fp,tn,fn";
            for (const char* m : kMetricNames) csv += std::string(",") + m;
            csv += "\n";
            for (const auto& row : cf::score_threshold_sweep(scored, cf::linear_grid(*lo, *hi, steps))) {
                const auto& c = row.metrics.counts;
                csv += json(row.threshold).dump() + "," + std::to_string(c.tp) + "," + std::to_string(c.fp) + "," +
                       std::to_string(c.tn) + "," + std::to_string(c.fn);
                for (const char* m : kMetricNames) csv += "," + csv_value(metric_value(row.metrics, m));
                csv += "\n";
            }
            write_text(out_path, csv);
            write_config_beside(out_path, rc);
            json j = cf_summary(model);
            j["scored"] = scored.size();
            j["region_coverage"] = cf::region_coverage(model, scores);
            std::cout << j.dump(2) << '\n';
            return 0;
        }

        // ---- icl / hybrid ----------------------------------------------
        if (icl_prompt->parsed() || icl_predict->parsed() || hybrid_predict->parsed()) {
            const Dataset d = load_dataset(data_path);
            const PermissionRequest target = target_args.resolve(d.catalog);
            const UserContext ctx = user_context(d, target);
            if (icl_prompt->parsed()) {
                std::cout << icl::build_prompt(ctx.profile, icl::history_records(d.catalog, ctx.history), {},
                                               icl::view_of(d.catalog, target), prompt_options(rc))
                                 .render();
                return 0;
            }
            auto provider = make_provider(rc.provider);
            if (icl_predict->parsed()) {
                const auto r = predict_icl(d.catalog, ctx.profile, target, ctx.history, *provider,
                                           rc.hybrid.coverage_threshold, retry_policy(rc), prompt_options(rc));
                std::cout << prediction_json(r.prediction, &r.response).dump(2) << '\n';
                return 0;
            }
            cf::CfModel model;
            if (!model_path.empty()) {
                model = load_model(model_path);
            } else {
                Dataset train = d;
                train.decisions = without_query(d, target);
                const auto obs = cf::observations_from(modeling_view(train, min_queries).decisions);
                model = cf::train(obs, cf_hyper(rc));
            }
            const auto r = predict_hybrid(d.catalog, ctx.profile, target, ctx.history, ctx.candidates, &model,
                                          *provider, rc.hybrid, retry_policy(rc), prompt_options(rc));
            json j = prediction_json(r.prediction, &r.response);
            j["cf_examples"] = example_lines(r.cf_examples);
            std::cout << j.dump(2) << '\n';
            return 0;
        }

        // ---- eval ------------------------------------------------------
        if (eval_cv->parsed()) {
            const Dataset d = modeling_view(load_dataset(data_path), min_queries);
            const fs::path out = out_path;
            rc.output_dir = out.string();
            fs::create_directories(out);
            write_json(out / "run_config.json", to_json(rc));

            PredictorFactory factory;
            switch (rc.predictor) {
            case PredictorKind::CF: factory = cf_factory(cf_hyper(rc), rc.hybrid.coverage_threshold); break;
            case PredictorKind::ICL:
                factory = icl_factory(make_provider(rc.provider), rc.hybrid.coverage_threshold, retry_policy(rc),
                                      prompt_options(rc));
                break;
            case PredictorKind::Hybrid:
                factory = hybrid_factory(cf_hyper(rc), make_provider(rc.provider), rc.hybrid, retry_policy(rc),
                                         prompt_options(rc));
                break;
            }
            CvOptions options;
            options.k = rc.folds;
            options.history_ratio = rc.history_ratio;
            options.seeds = rc.seeds();
            options.workers = rc.workers;
            options.coverage_threshold = rc.hybrid.coverage_threshold;
            options.predictor_name = std::string(to_string(rc.predictor));
            const CvReport report = cross_validate(d, factory, options);

            write_json(out / "report.json", to_json(report, with_records));
            const auto sweep = sweep_thresholds(report.records, confidence_grid(report.records, steps));
            write_json(out / "sweep.json", to_json(sweep));
            write_text(out / "sweep.csv", sweep_csv(sweep));
            for (const auto& a : axes) {
                const auto axis = parse_axis(a);
                write_text(out / ("breakdown_" + std::string(to_string(axis)) + ".csv"),
                           breakdown_csv(breakdown(report.records, axis)));
            }
            std::cout << json{{"predictor", report.predictor},
                              {"overall", to_json(report.overall)},
                              {"coverage", report.coverage},
                              {"across_folds", to_json(report.across_folds)},
                              {"audit_clean", report.audit.clean()},
                              {"out", out.string()}}
                             .dump(2)
                      << '\n';
            return report.audit.clean() ? 0 : kFailure;
        }

        // ---- serve -----------------------------------------------------
        if (serve->parsed()) {
            service::ServiceConfig sc;
            sc.db_path = db_path;
            sc.hybrid = rc.hybrid;
            if (o_threshold->count() == 0 && ini_path.empty() && run_config_path.empty()) {
                sc.hybrid.coverage_threshold = service::ServiceConfig{}.hybrid.coverage_threshold;
            }
            sc.cf = cf_hyper(rc);
            sc.retry = retry_policy(rc);
            sc.prompt = prompt_options(rc);
            Catalog catalog;
            std::optional<Dataset> seed_data;
            if (!import_path.empty()) {
                seed_data = load_dataset(import_path);
                catalog = seed_data->catalog;
            }
            service::AssistantService svc(sc, catalog, make_provider(rc.provider));
            if (seed_data) {
                if (svc.metrics().at("decisions").get<std::int64_t>() > 0) {
                    std::cerr << json{{"warning", "store already holds decisions; --import skipped"}}.dump() << '\n';
                } else {
                    svc.import_dataset(*seed_data);
                }
            }
            if (refresh_on_start) std::cerr << to_json(svc.refresh_models()).dump() << '\n';
            const char* token = std::getenv("PERMPRED_API_TOKEN");
            service::HttpFrontend frontend(svc, token ? token : "");
            g_frontend = &frontend;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            const int bound = port == 0 ? frontend.bind_any_port(host) : (frontend.server().bind_to_port(host, port) ? port : -1);
            if (bound < 0) throw Error(ErrorCode::InvalidArgument, "cannot bind " + host + ":" + std::to_string(port));
            std::cerr << json{{"listening", host + ":" + std::to_string(bound)}, {"db", db_path}}.dump() << '\n';
            frontend.listen_after_bind();
            g_frontend = nullptr;
            return 0;
        }
    } catch (const Error& e) {
        print_error(to_string(e.code()), e.what(), e.details());
        return e.code() == ErrorCode::InvalidArgument ? kUsage : kFailure;
    } catch (const json::exception& e) {
        print_error("SchemaError", e.what());
        return kFailure;
    } catch (const std::exception& e) {
        print_error("InternalError", e.what());
        return kFailure;
    }
    print_error("UsageError", "no command given");
    return kUsage;
}
