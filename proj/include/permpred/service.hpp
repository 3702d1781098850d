#ifndef PERMPRED_SERVICE_HPP
#define PERMPRED_SERVICE_HPP

// Link against SQLite3.

#include "permpred/config.hpp"
#include "permpred/hybrid.hpp"

#include <sqlite3.h>

#include <chrono>
#include <ctime>
#include <functional>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>

namespace permpred::service {

inline std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
    return out.str();
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class ItemStatus { Pending, Decided, Revoked };

inline std::string_view to_string(ItemStatus s) {
    switch (s) {
    case ItemStatus::Pending: return "Pending";
    case ItemStatus::Decided: return "Decided";
    case ItemStatus::Revoked: return "Revoked";
    }
    return "";
}

inline ItemStatus parse_status(std::string_view s) {
    if (s == "Pending") return ItemStatus::Pending;
    if (s == "Decided") return ItemStatus::Decided;
    if (s == "Revoked") return ItemStatus::Revoked;
    throw Error(ErrorCode::StoreError, "bad item status '" + std::string(s) + "'");
}

struct PendingItem {
    std::int64_t item_id = 0;
    PermissionRequest request;
    /// Absent when the predictor could not answer.
    std::optional<Prediction> prediction;
    std::int64_t model_version = 0;
    std::string created_at;
    ItemStatus status = ItemStatus::Pending;
    std::optional<DecisionOption> decided_option;
    std::string decided_at;
    std::string note;
};

struct HistoryEntry {
    std::int64_t seq = 0;
    PermissionDecision decision;
    std::string query_text;
    Domain domain = Domain::Entertainment;
    /// "human" for service decisions, "import" for seeded study data.
    std::string origin;
    std::optional<std::int64_t> item_id;
    std::string created_at;
    bool revoked = false;
};

struct StandingRule {
    std::string participant_id;
    std::string tool_id;
    std::string data_type_id;
    Label label = Label::Deny;
    std::int64_t decision_seq = 0;
    std::string created_at;
};

struct UserState {
    UserProfile profile;
    std::vector<HistoryEntry> history;
    std::vector<StandingRule> standing_rules;
};

/// What submit() did with a request. Every outcome is logged.
struct SubmitOutcome {
    std::int64_t outcome_id = 0;
    /// "decided" or "pending"
    std::string status;
    std::optional<Label> label;
    std::optional<Prediction> prediction;
    std::optional<std::int64_t> item_id;
    std::int64_t model_version = 0;
    std::string created_at;
    std::string note;
};

struct OutcomeRecord {
    SubmitOutcome outcome;
    PermissionRequest request;
};

struct ModelInfo {
    std::int64_t version = 0;
    std::size_t edge_count = 0;
    std::string trained_at;
    bool changed = false;
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline json to_json(const PendingItem& i) {
    json j = {{"item_id", i.item_id},
              {"request", permpred::to_json(i.request)},
              {"prediction", i.prediction ? permpred::to_json(*i.prediction) : json(nullptr)},
              {"model_version", i.model_version},
              {"created_at", i.created_at},
              {"status", std::string(to_string(i.status))}};
    if (i.decided_option) {
        j["decided_option"] = std::string(permpred::to_string(*i.decided_option));
        j["decided_label"] = is_share(*i.decided_option) ? "Allow" : "Deny";
        j["decided_at"] = i.decided_at;
    }
    if (!i.note.empty()) j["note"] = i.note;
    return j;
}

inline json to_json(const HistoryEntry& h) {
    json j = permpred::to_json(h.decision);
    j["seq"] = h.seq;
    j["query_text"] = h.query_text;
    j["domain"] = std::string(permpred::to_string(h.domain));
    j["origin"] = h.origin;
    j["item_id"] = h.item_id ? json(*h.item_id) : json(nullptr);
    j["created_at"] = h.created_at;
    j["revoked"] = h.revoked;
    return j;
}

inline json to_json(const StandingRule& r) {
    return {{"participant_id", r.participant_id},  {"tool_id", r.tool_id},
            {"data_type_id", r.data_type_id},      {"label", std::string(permpred::to_string(r.label))},
            {"decision_seq", r.decision_seq},      {"created_at", r.created_at}};
}

inline json to_json(const UserState& s) {
    json history = json::array(), rules = json::array();
    for (const auto& h : s.history) history.push_back(to_json(h));
    for (const auto& r : s.standing_rules) rules.push_back(to_json(r));
    return {{"profile", permpred::to_json(s.profile)}, {"history", history}, {"standing_rules", rules}};
}

inline json to_json(const SubmitOutcome& o) {
    json j = {{"outcome_id", o.outcome_id},
              {"status", o.status},
              {"label", o.label ? json(std::string(permpred::to_string(*o.label))) : json(nullptr)},
              {"prediction", o.prediction ? permpred::to_json(*o.prediction) : json(nullptr)},
              {"item_id", o.item_id ? json(*o.item_id) : json(nullptr)},
              {"model_version", o.model_version},
              {"created_at", o.created_at}};
    if (!o.note.empty()) j["note"] = o.note;
    return j;
}

inline json to_json(const OutcomeRecord& r) {
    json j = to_json(r.outcome);
    j["request"] = permpred::to_json(r.request);
    return j;
}

inline json to_json(const ModelInfo& m) {
    return {{"version", m.version}, {"edge_count", m.edge_count}, {"trained_at", m.trained_at}, {"changed", m.changed}};
}

// ---------------------------------------------------------------------------
// SQLite plumbing
// ---------------------------------------------------------------------------

namespace sql {

class Statement {
public:
    Statement(sqlite3* db, const std::string& text) : db_(db) {
        if (sqlite3_prepare_v2(db, text.c_str(), -1, &stmt_, nullptr) != SQLITE_OK) {
            throw Error(ErrorCode::StoreError, std::string("prepare failed: ") + sqlite3_errmsg(db), {text});
        }
    }
    ~Statement() { sqlite3_finalize(stmt_); }
    Statement(const Statement&) = delete;
    Statement& operator=(const Statement&) = delete;

    Statement& bind(int i, const std::string& v) {
        check(sqlite3_bind_text(stmt_, i, v.c_str(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
        return *this;
    }
    Statement& bind(int i, std::int64_t v) {
        check(sqlite3_bind_int64(stmt_, i, v));
        return *this;
    }
    Statement& bind(int i, int v) { return bind(i, static_cast<std::int64_t>(v)); }
    Statement& bind(int i, double v) {
        check(sqlite3_bind_double(stmt_, i, v));
        return *this;
    }
    Statement& bind_null(int i) {
        check(sqlite3_bind_null(stmt_, i));
        return *this;
    }
    template <typename T>
    Statement& bind(int i, const std::optional<T>& v) {
        return v ? bind(i, *v) : bind_null(i);
    }

    /// true while rows remain.
    bool step() {
        const int rc = sqlite3_step(stmt_);
        if (rc == SQLITE_ROW) return true;
        if (rc == SQLITE_DONE) return false;
        throw Error(ErrorCode::StoreError, std::string("step failed: ") + sqlite3_errmsg(db_));
    }
    void run() {
        while (step()) {
        }
    }

    std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }
    double real(int col) const { return sqlite3_column_double(stmt_, col); }
    bool is_null(int col) const { return sqlite3_column_type(stmt_, col) == SQLITE_NULL; }
    std::string text(int col) const {
        const auto* p = sqlite3_column_text(stmt_, col);
        return p ? std::string(reinterpret_cast<const char*>(p), static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col)))
                 : std::string();
    }
    std::optional<std::int64_t> opt_integer(int col) const {
        return is_null(col) ? std::nullopt : std::optional<std::int64_t>(integer(col));
    }

private:
    void check(int rc) const {
        if (rc != SQLITE_OK) throw Error(ErrorCode::StoreError, std::string("bind failed: ") + sqlite3_errmsg(db_));
    }
    sqlite3* db_;
    sqlite3_stmt* stmt_ = nullptr;
};

class Database {
public:
    explicit Database(const std::string& path) {
        if (sqlite3_open(path.c_str(), &db_) != SQLITE_OK) {
            std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
            sqlite3_close(db_);
            throw Error(ErrorCode::StoreError, "cannot open store " + path + ": " + msg);
        }
        exec("PRAGMA foreign_keys = ON");
        exec("PRAGMA journal_mode = WAL");
    }
    ~Database() { sqlite3_close(db_); }
    Database(const Database&) = delete;
    Database& operator=(const Database&) = delete;

    void exec(const std::string& text) {
        char* err = nullptr;
        if (sqlite3_exec(db_, text.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
            std::string msg = err ? err : "unknown";
            sqlite3_free(err);
            throw Error(ErrorCode::StoreError, "store statement failed: " + msg, {text});
        }
    }
    Statement prepare(const std::string& text) { return Statement(db_, text); }
    std::int64_t last_id() const { return sqlite3_last_insert_rowid(db_); }
    int changes() const { return sqlite3_changes(db_); }

    /// Runs `body` in a transaction; rolls back if it throws.
    template <typename F>
    auto transaction(F&& body) {
        exec("BEGIN IMMEDIATE");
        try {
            if constexpr (std::is_void_v<decltype(body())>) {
                body();
                exec("COMMIT");
            } else {
                auto r = body();
                exec("COMMIT");
                return r;
            }
        } catch (...) {
            exec("ROLLBACK");
            throw;
        }
    }

private:
    sqlite3* db_ = nullptr;
};

} // namespace sql

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

struct ServiceConfig {
    /// SQLite path; ":memory:" for an ephemeral store.
    std::string db_path = ":memory:";
    HybridConfig hybrid = [] {
        HybridConfig h;
        h.coverage_threshold = 0.91;
        return h;
    }();
    cf::Hyperparameters cf;
    icl::RetryPolicy retry;
    icl::PromptOptions prompt;
};

class AssistantService {
public:
    using Trainer = std::function<cf::CfModel(const std::vector<cf::Observation>&, const cf::Hyperparameters&)>;

    AssistantService(ServiceConfig config, Catalog catalog, std::shared_ptr<icl::TextProvider> provider)
        : config_(std::move(config)), catalog_(std::move(catalog)), provider_(std::move(provider)),
          db_(config_.db_path) {
        config_.hybrid.validate();
        trainer_ = [](const std::vector<cf::Observation>& obs, const cf::Hyperparameters& h) { return cf::train(obs, h); };
        create_schema();
        load_latest_model();
    }

    void set_trainer(Trainer t) { trainer_ = std::move(t); }
    const Catalog& catalog() const { return catalog_; }
    const ServiceConfig& config() const { return config_; }

    // -- users ---------------------------------------------------------------

    /// Creates or replaces the profile.
    UserProfile register_user(UserProfile profile) {
        check_profile_scales(profile);
        if (profile.participant_id.empty()) throw Error(ErrorCode::SchemaError, "participant_id is required");
        std::lock_guard lock(db_mutex_);
        db_.prepare("INSERT INTO users(id, profile) VALUES(?1, ?2) ON CONFLICT(id) DO UPDATE SET profile = ?2")
            .bind(1, profile.participant_id)
            .bind(2, permpred::to_json(profile).dump())
            .run();
        return profile;
    }

    std::optional<UserProfile> find_user(const std::string& id) {
        std::lock_guard lock(db_mutex_);
        return find_user_locked(id);
    }

    /// Seeds profiles and decisions from a study dataset.
    void import_dataset(const Dataset& d) {
        for (const auto& p : d.profiles) register_user(p);
        std::lock_guard lock(db_mutex_);
        db_.transaction([&] {
            const std::string now = iso_now();
            for (const auto& x : d.decisions) {
                if (!find_user_locked(x.participant_id)) {
                    throw Error(ErrorCode::UnknownUser, "decision for unregistered participant " + x.participant_id);
                }
                const Query* q = d.catalog.find_query(x.query_id);
                insert_decision_locked(x, q ? q->text : x.query_id, q ? q->domain : Domain::Entertainment, "import",
                                       std::nullopt, now);
            }
        });
        for (const auto& [id, t] : d.catalog.tools) catalog_.tools.emplace(id, t);
        for (const auto& [id, t] : d.catalog.data_types) catalog_.data_types.emplace(id, t);
        for (const auto& [id, q] : d.catalog.queries) catalog_.queries.emplace(id, q);
    }

    // -- requests ------------------------------------------------------------

    /// Standing rule, else covered prediction, else a pending item for the user.
    SubmitOutcome submit(PermissionRequest request) {
        if (request.query_text.empty()) {
            if (const Query* q = catalog_.find_query(request.query_id)) request.query_text = q->text;
        }
        auto user_lock = lock_user(request.participant_id);
        std::optional<UserProfile> profile;
        std::optional<StandingRule> rule;
        std::vector<icl::HistoryRecord> history;
        std::vector<PermissionRequest> candidates;
        {
            std::lock_guard lock(db_mutex_);
            profile = find_user_locked(request.participant_id);
            if (!profile) throw Error(ErrorCode::UnknownUser, "unknown user " + request.participant_id);
            rule = find_rule_locked(request.participant_id, request.tool_id, request.data_type_id);
            if (!rule) {
                history = prompt_history_locked(request.participant_id);
                for (const auto& item : items_locked(request.participant_id, ItemStatus::Pending)) {
                    candidates.push_back(item.request);
                }
            }
        }

        SubmitOutcome out;
        out.created_at = iso_now();
        if (rule) {
            out.status = "decided";
            out.label = rule->label;
            out.prediction = Prediction{rule->label, 1.0, PredictionSource::StandingRule, true};
            out.model_version = model_version();
            std::lock_guard lock(db_mutex_);
            log_outcome_locked(request, out);
            return out;
        }

        auto [model, version] = model_snapshot();
        out.model_version = version;
        try {
            auto result = predict_hybrid(catalog_, *profile, request, history, candidates, model.get(), *provider_,
                                         config_.hybrid, config_.retry, config_.prompt);
            out.prediction = result.prediction;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::ProviderUnavailable && e.code() != ErrorCode::UnparseableResponse) throw;
            out.note = std::string(permpred::to_string(e.code())) + ": " + e.what();
        }

        std::lock_guard lock(db_mutex_);
        db_.transaction([&] {
            if (out.prediction && out.prediction->covered) {
                out.status = "decided";
                out.label = out.prediction->label;
            } else {
                out.status = "pending";
                PendingItem item;
                item.request = request;
                item.prediction = out.prediction;
                item.model_version = version;
                item.created_at = out.created_at;
                item.note = out.note;
                out.item_id = insert_item_locked(item);
            }
            log_outcome_locked(request, out);
        });
        return out;
    }

    /// Records the human decision for a pending item.
    UserState decide(std::int64_t item_id, DecisionOption option) {
        std::string user;
        {
            std::lock_guard lock(db_mutex_);
            auto item = find_item_locked(item_id);
            if (!item) throw Error(ErrorCode::UnknownItem, "no item " + std::to_string(item_id));
            user = item->request.participant_id;
        }
        auto user_lock = lock_user(user);
        std::lock_guard lock(db_mutex_);
        db_.transaction([&] {
            auto item = find_item_locked(item_id);
            if (!item) throw Error(ErrorCode::UnknownItem, "no item " + std::to_string(item_id));
            if (item->status != ItemStatus::Pending) {
                throw Error(ErrorCode::AlreadyDecided,
                            "item " + std::to_string(item_id) + " is " + std::string(to_string(item->status)));
            }
            const std::string now = iso_now();
            PermissionDecision d;
            d.participant_id = user;
            d.query_id = item->request.query_id;
            d.tool_id = item->request.tool_id;
            d.data_type_id = item->request.data_type_id;
            d.option = option;
            const Query* q = catalog_.find_query(d.query_id);
            if (q != nullptr) {
                for (const auto& r : q->requested_data) {
                    if (r.data_type_id == d.data_type_id) d.necessary = r.necessary;
                }
            }
            const auto seq = insert_decision_locked(d, item->request.query_text, item->request.domain, "human",
                                                    item_id, now);
            if (auto label = binary_label(option)) {
                db_.prepare("INSERT INTO rules(user_id, tool_id, data_type_id, label, decision_seq, created_at) "
                            "VALUES(?1, ?2, ?3, ?4, ?5, ?6) ON CONFLICT(user_id, tool_id, data_type_id) DO UPDATE "
                            "SET label = ?4, decision_seq = ?5, created_at = ?6")
                    .bind(1, user)
                    .bind(2, d.tool_id)
                    .bind(3, d.data_type_id)
                    .bind(4, std::string(permpred::to_string(*label)))
                    .bind(5, seq)
                    .bind(6, now)
                    .run();
            }
            db_.prepare("UPDATE items SET status = 'Decided', decided_option = ?2, decided_at = ?3 WHERE id = ?1")
                .bind(1, item_id)
                .bind(2, std::string(permpred::to_string(option)))
                .bind(3, now)
                .run();
        });
        return state_locked(user);
    }

    /// Removes a standing rule; the decisions behind it are marked revoked.
    UserState revoke(const std::string& user, const std::string& tool_id, const std::string& data_type_id) {
        auto user_lock = lock_user(user);
        std::lock_guard lock(db_mutex_);
        db_.transaction([&] {
            if (!find_rule_locked(user, tool_id, data_type_id)) {
                throw Error(ErrorCode::NoSuchRule, "no standing rule for " + user + " on " + tool_id + "/" + data_type_id);
            }
            db_.prepare("DELETE FROM rules WHERE user_id = ?1 AND tool_id = ?2 AND data_type_id = ?3")
                .bind(1, user)
                .bind(2, tool_id)
                .bind(3, data_type_id)
                .run();
            db_.prepare("UPDATE decisions SET revoked = 1 WHERE user_id = ?1 AND tool_id = ?2 AND data_type_id = ?3 "
                        "AND option IN ('AlwaysShare', 'NeverShare') AND revoked = 0")
                .bind(1, user)
                .bind(2, tool_id)
                .bind(3, data_type_id)
                .run();
            db_.prepare("UPDATE items SET status = 'Revoked' WHERE user_id = ?1 AND tool_id = ?2 AND data_type_id = ?3 "
                        "AND status = 'Decided' AND decided_option IN ('AlwaysShare', 'NeverShare')")
                .bind(1, user)
                .bind(2, tool_id)
                .bind(3, data_type_id)
                .run();
        });
        return state_locked(user);
    }

    // -- models --------------------------------------------------------------

    /// Retrains CF on every non-revoked always/never decision. An unchanged
    /// edge set keeps the current version; a failed retrain keeps serving the
    /// previous model.
    ModelInfo refresh_models(const std::optional<std::string>& user = std::nullopt) {
        std::lock_guard refresh(refresh_mutex_);
        std::vector<cf::Observation> obs;
        {
            std::lock_guard lock(db_mutex_);
            if (user && !find_user_locked(*user)) throw Error(ErrorCode::UnknownUser, "unknown user " + *user);
            obs = training_observations_locked();
        }
        const std::string fingerprint = fingerprint_of(obs);
        {
            std::lock_guard lock(model_mutex_);
            if (fingerprint == fingerprint_) return {version_, edge_count_, trained_at_, false};
        }
        if (obs.empty()) {
            std::lock_guard lock(model_mutex_);
            return {version_, edge_count_, trained_at_, false};
        }
        cf::CfModel trained;
        try {
            trained = trainer_(obs, with_caps(config_.cf, config_.hybrid));
        } catch (const std::exception& e) {
            throw Error(ErrorCode::TrainingFailure, std::string("model refresh failed; previous model kept: ") + e.what());
        }
        auto model = std::make_shared<const cf::CfModel>(std::move(trained));
        const std::string now = iso_now();
        std::int64_t version = 0;
        {
            std::lock_guard lock(db_mutex_);
            db_.prepare("INSERT INTO models(trained_at, edge_count, fingerprint, model) VALUES(?1, ?2, ?3, ?4)")
                .bind(1, now)
                .bind(2, static_cast<std::int64_t>(obs.size()))
                .bind(3, fingerprint)
                .bind(4, cf::to_json(*model).dump())
                .run();
            version = db_.last_id();
        }
        std::lock_guard lock(model_mutex_);
        model_ = std::move(model);
        version_ = version;
        edge_count_ = obs.size();
        fingerprint_ = fingerprint;
        trained_at_ = now;
        return {version_, edge_count_, trained_at_, true};
    }

    std::int64_t model_version() const {
        std::lock_guard lock(model_mutex_);
        return version_;
    }

    std::pair<std::shared_ptr<const cf::CfModel>, std::int64_t> model_snapshot() const {
        std::lock_guard lock(model_mutex_);
        return {model_, version_};
    }

    // -- queries -------------------------------------------------------------

    std::vector<PendingItem> pending(const std::string& user) {
        std::lock_guard lock(db_mutex_);
        require_user_locked(user);
        return items_locked(user, ItemStatus::Pending);
    }

    std::vector<PendingItem> items(const std::string& user) {
        std::lock_guard lock(db_mutex_);
        require_user_locked(user);
        return items_locked(user, std::nullopt);
    }

    std::vector<HistoryEntry> history(const std::string& user) {
        std::lock_guard lock(db_mutex_);
        require_user_locked(user);
        return history_locked(user);
    }

    std::vector<StandingRule> rules(const std::string& user) {
        std::lock_guard lock(db_mutex_);
        require_user_locked(user);
        return rules_locked(user);
    }

    UserState state(const std::string& user) {
        std::lock_guard lock(db_mutex_);
        return state_locked(user);
    }

    /// Logged outcomes for the user, oldest first.
    std::vector<OutcomeRecord> outcomes(const std::string& user) {
        std::lock_guard lock(db_mutex_);
        require_user_locked(user);
        auto st = db_.prepare("SELECT id, request, status, label, pred_label, confidence, source, covered, item_id, "
                              "model_version, created_at, note FROM outcomes WHERE user_id = ?1 ORDER BY id");
        st.bind(1, user);
        std::vector<OutcomeRecord> out;
        while (st.step()) {
            OutcomeRecord r;
            r.outcome.outcome_id = st.integer(0);
            r.request = request_from_json(json::parse(st.text(1)));
            r.outcome.status = st.text(2);
            if (!st.is_null(3)) r.outcome.label = parse_label(st.text(3));
            if (!st.is_null(4)) {
                r.outcome.prediction = Prediction{parse_label(st.text(4)), st.real(5), parse_source(st.text(6)),
                                                  st.integer(7) != 0};
            }
            r.outcome.item_id = st.opt_integer(8);
            r.outcome.model_version = st.integer(9);
            r.outcome.created_at = st.text(10);
            r.outcome.note = st.text(11);
            out.push_back(std::move(r));
        }
        return out;
    }

    json metrics() {
        std::lock_guard lock(db_mutex_);
        auto count = [&](const std::string& q) {
            auto st = db_.prepare(q);
            st.step();
            return st.integer(0);
        };
        json j = {{"users", count("SELECT COUNT(*) FROM users")},
                  {"decisions", count("SELECT COUNT(*) FROM decisions")},
                  {"revoked_decisions", count("SELECT COUNT(*) FROM decisions WHERE revoked = 1")},
                  {"standing_rules", count("SELECT COUNT(*) FROM rules")},
                  {"pending_items", count("SELECT COUNT(*) FROM items WHERE status = 'Pending'")},
                  {"outcomes", count("SELECT COUNT(*) FROM outcomes")},
                  {"rule_decisions", count("SELECT COUNT(*) FROM outcomes WHERE source = 'StandingRule'")},
                  {"auto_decisions",
                   count("SELECT COUNT(*) FROM outcomes WHERE status = 'decided' AND source != 'StandingRule'")},
                  {"queued", count("SELECT COUNT(*) FROM outcomes WHERE status = 'pending'")},
                  {"coverage_threshold", config_.hybrid.coverage_threshold},
                  {"version", std::string(kVersion)}};
        std::lock_guard mlock(model_mutex_);
        j["model_version"] = version_;
        j["model_edge_count"] = edge_count_;
        j["model_trained_at"] = trained_at_;
        return j;
    }

    /// Profiles plus non-revoked decisions in the canonical dataset format.
    Dataset export_dataset() {
        std::lock_guard lock(db_mutex_);
        Dataset d;
        d.catalog = catalog_;
        auto st = db_.prepare("SELECT profile FROM users ORDER BY id");
        while (st.step()) d.profiles.push_back(profile_from_json(json::parse(st.text(0))));
        for (const auto& p : d.profiles) {
            for (const auto& h : history_locked(p.participant_id)) {
                if (!h.revoked) d.decisions.push_back(h.decision);
            }
        }
        return d;
    }

private:
    void create_schema() {
        std::lock_guard lock(db_mutex_);
        db_.exec(R"(
            CREATE TABLE IF NOT EXISTS users (id TEXT PRIMARY KEY, profile TEXT NOT NULL);
            CREATE TABLE IF NOT EXISTS decisions (
                seq INTEGER PRIMARY KEY AUTOINCREMENT,
                user_id TEXT NOT NULL REFERENCES users(id),
                query_id TEXT NOT NULL, tool_id TEXT NOT NULL, data_type_id TEXT NOT NULL,
                option TEXT NOT NULL, necessary INTEGER NOT NULL, perceived_necessary INTEGER,
                query_text TEXT NOT NULL, domain TEXT NOT NULL, origin TEXT NOT NULL,
                item_id INTEGER, created_at TEXT NOT NULL, revoked INTEGER NOT NULL DEFAULT 0);
            CREATE INDEX IF NOT EXISTS decisions_user ON decisions(user_id);
            CREATE TABLE IF NOT EXISTS rules (
                user_id TEXT NOT NULL REFERENCES users(id), tool_id TEXT NOT NULL, data_type_id TEXT NOT NULL,
                label TEXT NOT NULL, decision_seq INTEGER NOT NULL, created_at TEXT NOT NULL,
                PRIMARY KEY (user_id, tool_id, data_type_id));
            CREATE TABLE IF NOT EXISTS items (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                user_id TEXT NOT NULL REFERENCES users(id), tool_id TEXT NOT NULL, data_type_id TEXT NOT NULL,
                request TEXT NOT NULL, prediction TEXT, model_version INTEGER NOT NULL, created_at TEXT NOT NULL,
                status TEXT NOT NULL, decided_option TEXT, decided_at TEXT, note TEXT);
            CREATE INDEX IF NOT EXISTS items_user ON items(user_id, status);
            CREATE TABLE IF NOT EXISTS outcomes (
                id INTEGER PRIMARY KEY AUTOINCREMENT, user_id TEXT NOT NULL, request TEXT NOT NULL,
                status TEXT NOT NULL, label TEXT, pred_label TEXT, confidence REAL, source TEXT, covered INTEGER,
                item_id INTEGER, model_version INTEGER NOT NULL, created_at TEXT NOT NULL, note TEXT);
            CREATE INDEX IF NOT EXISTS outcomes_user ON outcomes(user_id);
            CREATE TABLE IF NOT EXISTS models (
                version INTEGER PRIMARY KEY AUTOINCREMENT, trained_at TEXT NOT NULL, edge_count INTEGER NOT NULL,
                fingerprint TEXT NOT NULL, model TEXT NOT NULL);
        )");
    }

    void load_latest_model() {
        std::lock_guard lock(db_mutex_);
        auto st = db_.prepare("SELECT version, trained_at, edge_count, fingerprint, model FROM models "
                              "ORDER BY version DESC LIMIT 1");
        if (!st.step()) return;
        version_ = st.integer(0);
        trained_at_ = st.text(1);
        edge_count_ = static_cast<std::size_t>(st.integer(2));
        fingerprint_ = st.text(3);
        model_ = std::make_shared<const cf::CfModel>(cf::model_from_json(json::parse(st.text(4))));
    }

    std::unique_lock<std::mutex> lock_user(const std::string& user) {
        std::mutex* m = nullptr;
        {
            std::lock_guard lock(user_locks_mutex_);
            auto& slot = user_locks_[user];
            if (!slot) slot = std::make_unique<std::mutex>();
            m = slot.get();
        }
        return std::unique_lock<std::mutex>(*m);
    }

    std::optional<UserProfile> find_user_locked(const std::string& id) {
        auto st = db_.prepare("SELECT profile FROM users WHERE id = ?1");
        st.bind(1, id);
        if (!st.step()) return std::nullopt;
        return profile_from_json(json::parse(st.text(0)));
    }

    UserProfile require_user_locked(const std::string& id) {
        auto p = find_user_locked(id);
        if (!p) throw Error(ErrorCode::UnknownUser, "unknown user " + id);
        return *p;
    }

    std::int64_t insert_decision_locked(const PermissionDecision& d, const std::string& query_text, Domain domain,
                                        const std::string& origin, std::optional<std::int64_t> item_id,
                                        const std::string& now) {
        std::optional<std::int64_t> perceived;
        if (d.perceived_necessary) perceived = *d.perceived_necessary ? 1 : 0;
        db_.prepare("INSERT INTO decisions(user_id, query_id, tool_id, data_type_id, option, necessary, "
                    "perceived_necessary, query_text, domain, origin, item_id, created_at) "
                    "VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)")
            .bind(1, d.participant_id)
            .bind(2, d.query_id)
            .bind(3, d.tool_id)
            .bind(4, d.data_type_id)
            .bind(5, std::string(permpred::to_string(d.option)))
            .bind(6, std::int64_t{d.necessary ? 1 : 0})
            .bind(7, perceived)
            .bind(8, query_text)
            .bind(9, std::string(permpred::to_string(domain)))
            .bind(10, origin)
            .bind(11, item_id)
            .bind(12, now)
            .run();
        return db_.last_id();
    }

    std::vector<HistoryEntry> history_locked(const std::string& user) {
        auto st = db_.prepare("SELECT seq, query_id, tool_id, data_type_id, option, necessary, perceived_necessary, "
                              "query_text, domain, origin, item_id, created_at, revoked FROM decisions "
                              "WHERE user_id = ?1 ORDER BY seq");
        st.bind(1, user);
        std::vector<HistoryEntry> out;
        while (st.step()) {
            HistoryEntry h;
            h.seq = st.integer(0);
            h.decision.participant_id = user;
            h.decision.query_id = st.text(1);
            h.decision.tool_id = st.text(2);
            h.decision.data_type_id = st.text(3);
            h.decision.option = parse_option(st.text(4));
            h.decision.necessary = st.integer(5) != 0;
            if (!st.is_null(6)) h.decision.perceived_necessary = st.integer(6) != 0;
            h.query_text = st.text(7);
            h.domain = parse_domain(st.text(8));
            h.origin = st.text(9);
            h.item_id = st.opt_integer(10);
            h.created_at = st.text(11);
            h.revoked = st.integer(12) != 0;
            out.push_back(std::move(h));
        }
        return out;
    }

    /// Latest non-revoked decision per request, oldest first.
    std::vector<icl::HistoryRecord> prompt_history_locked(const std::string& user) {
        std::map<RequestKey, HistoryEntry> latest;
        for (auto& h : history_locked(user)) {
            if (!h.revoked) latest[h.decision.key()] = std::move(h);
        }
        std::vector<icl::HistoryRecord> out;
        for (const auto& [key, h] : latest) {
            icl::HistoryRecord r;
            r.query_id = h.decision.query_id;
            r.query_text = h.query_text;
            r.tool = catalog_.tool_name(h.decision.tool_id);
            r.data_type_id = h.decision.data_type_id;
            r.data_type = catalog_.data_type_name(h.decision.data_type_id);
            r.decision = is_share(h.decision.option) ? Label::Allow : Label::Deny;
            r.sequence = h.seq;
            out.push_back(std::move(r));
        }
        return out;
    }

    /// Latest non-revoked always/never decision per (user, request).
    std::vector<cf::Observation> training_observations_locked() {
        auto st = db_.prepare("SELECT user_id, query_id, tool_id, data_type_id, option FROM decisions "
                              "WHERE revoked = 0 AND option IN ('AlwaysShare', 'NeverShare') ORDER BY seq");
        std::map<std::pair<std::string, RequestKey>, Label> latest;
        while (st.step()) {
            const RequestKey key{st.text(1), st.text(2), st.text(3)};
            latest[{st.text(0), key}] = *binary_label(parse_option(st.text(4)));
        }
        std::vector<cf::Observation> out;
        for (const auto& [k, label] : latest) out.push_back({k.first, k.second, label});
        return out;
    }

    static std::string fingerprint_of(const std::vector<cf::Observation>& obs) {
        std::uint64_t h = stable_hash("");
        for (const auto& o : obs) {
            h = stable_hash(o.participant_id + "|" + o.request.str() + "|" + std::string(permpred::to_string(o.label)), h);
        }
        return std::to_string(obs.size()) + ":" + std::to_string(h);
    }

    std::optional<StandingRule> find_rule_locked(const std::string& user, const std::string& tool,
                                                 const std::string& type) {
        auto st = db_.prepare("SELECT label, decision_seq, created_at FROM rules "
                              "WHERE user_id = ?1 AND tool_id = ?2 AND data_type_id = ?3");
        st.bind(1, user).bind(2, tool).bind(3, type);
        if (!st.step()) return std::nullopt;
        return StandingRule{user, tool, type, parse_label(st.text(0)), st.integer(1), st.text(2)};
    }

    std::vector<StandingRule> rules_locked(const std::string& user) {
        auto st = db_.prepare("SELECT tool_id, data_type_id, label, decision_seq, created_at FROM rules "
                              "WHERE user_id = ?1 ORDER BY tool_id, data_type_id");
        st.bind(1, user);
        std::vector<StandingRule> out;
        while (st.step()) {
            out.push_back({user, st.text(0), st.text(1), parse_label(st.text(2)), st.integer(3), st.text(4)});
        }
        return out;
    }

    std::int64_t insert_item_locked(const PendingItem& item) {
        db_.prepare("INSERT INTO items(user_id, tool_id, data_type_id, request, prediction, model_version, "
                    "created_at, status, note) VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7, 'Pending', ?8)")
            .bind(1, item.request.participant_id)
            .bind(2, item.request.tool_id)
            .bind(3, item.request.data_type_id)
            .bind(4, permpred::to_json(item.request).dump())
            .bind(5, item.prediction ? std::optional<std::string>(permpred::to_json(*item.prediction).dump())
                                     : std::nullopt)
            .bind(6, item.model_version)
            .bind(7, item.created_at)
            .bind(8, item.note)
            .run();
        return db_.last_id();
    }

    static PendingItem read_item(const sql::Statement& st) {
        PendingItem i;
        i.item_id = st.integer(0);
        i.request = request_from_json(json::parse(st.text(1)));
        if (!st.is_null(2)) {
            const auto p = json::parse(st.text(2));
            i.prediction = Prediction{parse_label(p.at("label").get<std::string>()), p.at("confidence").get<double>(),
                                      parse_source(p.at("source").get<std::string>()), p.at("covered").get<bool>()};
        }
        i.model_version = st.integer(3);
        i.created_at = st.text(4);
        i.status = parse_status(st.text(5));
        if (!st.is_null(6)) i.decided_option = parse_option(st.text(6));
        i.decided_at = st.text(7);
        i.note = st.text(8);
        return i;
    }

    static constexpr const char* kItemColumns =
        "SELECT id, request, prediction, model_version, created_at, status, decided_option, decided_at, note FROM items ";

    std::optional<PendingItem> find_item_locked(std::int64_t id) {
        auto st = db_.prepare(std::string(kItemColumns) + "WHERE id = ?1");
        st.bind(1, id);
        if (!st.step()) return std::nullopt;
        return read_item(st);
    }

    std::vector<PendingItem> items_locked(const std::string& user, std::optional<ItemStatus> status) {
        auto st = db_.prepare(std::string(kItemColumns) + "WHERE user_id = ?1 AND (?2 IS NULL OR status = ?2) ORDER BY id");
        st.bind(1, user);
        if (status) {
            st.bind(2, std::string(to_string(*status)));
        } else {
            st.bind_null(2);
        }
        std::vector<PendingItem> out;
        while (st.step()) out.push_back(read_item(st));
        return out;
    }

    void log_outcome_locked(const PermissionRequest& request, SubmitOutcome& out) {
        auto st = db_.prepare("INSERT INTO outcomes(user_id, request, status, label, pred_label, confidence, source, "
                              "covered, item_id, model_version, created_at, note) "
                              "VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)");
        st.bind(1, request.participant_id).bind(2, permpred::to_json(request).dump()).bind(3, out.status);
        if (out.label) {
            st.bind(4, std::string(permpred::to_string(*out.label)));
        } else {
            st.bind_null(4);
        }
        if (out.prediction) {
            st.bind(5, std::string(permpred::to_string(out.prediction->label)))
                .bind(6, out.prediction->confidence)
                .bind(7, std::string(permpred::to_string(out.prediction->source)))
                .bind(8, std::int64_t{out.prediction->covered ? 1 : 0});
        } else {
            st.bind_null(5).bind_null(6).bind_null(7).bind_null(8);
        }
        st.bind(9, out.item_id).bind(10, out.model_version).bind(11, out.created_at).bind(12, out.note);
        st.run();
        out.outcome_id = db_.last_id();
    }

    UserState state_locked(const std::string& user) {
        UserState s;
        s.profile = require_user_locked(user);
        s.history = history_locked(user);
        s.standing_rules = rules_locked(user);
        return s;
    }

    ServiceConfig config_;
    Catalog catalog_;
    std::shared_ptr<icl::TextProvider> provider_;
    Trainer trainer_;

    std::mutex db_mutex_;
    sql::Database db_;

    std::mutex user_locks_mutex_;
    std::map<std::string, std::unique_ptr<std::mutex>> user_locks_;

    std::mutex refresh_mutex_;
    mutable std::mutex model_mutex_;
    std::shared_ptr<const cf::CfModel> model_ = std::make_shared<const cf::CfModel>();
    std::int64_t version_ = 0;
    std::size_t edge_count_ = 0;
    std::string fingerprint_;
    std::string trained_at_;
};

} // namespace permpred::service

#endif // PERMPRED_SERVICE_HPP
