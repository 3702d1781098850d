#ifndef PERMPRED_ICL_HPP
#define PERMPRED_ICL_HPP

#include "permpred/core.hpp"
#include "permpred/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <semaphore>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace permpred::icl {

// ---------------------------------------------------------------------------
// Prompt text
// ---------------------------------------------------------------------------

inline constexpr std::string_view kRolePreamble =
    "You are a permission assistant. You decide, on behalf of one user, whether an AI agent may "
    "access a piece of the user's data in order to resolve the user's query. Base the decision on "
    "the user's profile and on the permission decisions they made before.";

inline constexpr std::string_view kProfileHeader = "## User profile";
inline constexpr std::string_view kHistoryHeader = "## Permission history";
inline constexpr std::string_view kRecommendationHeader = "## Recommendations from similar users";
inline constexpr std::string_view kRequestHeader = "## Permission request";
inline constexpr std::string_view kAnswerHeader = "## Answer format";

inline constexpr std::string_view kNoHistorySentence = "The user has no prior permission decisions.";

inline constexpr std::string_view kRecommendationIntro =
    "A collaborative filtering model trained on users with similar permission preferences "
    "recommends the following decisions for this user:";

inline constexpr std::string_view kOutputInstructions =
    "Decide whether the AI agent should be allowed to access the requested data. You may reason "
    "briefly, but the final line of your answer must have exactly this form:\n"
    "DECISION: <Allow|Deny> CONFIDENCE: <0.00-1.00>\n"
    "where CONFIDENCE is your confidence in the decision, between 0 and 1.";

/// Request context with display names resolved.
struct RequestView {
    PermissionRequest request;
    std::string tool_name;
    std::string data_type_name;
};

inline RequestView view_of(const Catalog& catalog, const PermissionRequest& r) {
    return {r, catalog.tool_name(r.tool_id), catalog.data_type_name(r.data_type_id)};
}

/// A past decision as the prompt sees it.
struct HistoryRecord {
    std::string query_id;
    std::string query_text;
    std::string tool;
    std::string data_type_id;
    std::string data_type;
    Label decision = Label::Allow;
    /// Insertion order; lower is older.
    std::int64_t sequence = 0;
};

/// Always/never map to their binary label; one-time options map to the
/// share/withhold direction they express.
inline HistoryRecord history_record(const Catalog& catalog, const PermissionDecision& d, std::int64_t sequence = 0) {
    HistoryRecord r;
    r.query_id = d.query_id;
    const Query* q = catalog.find_query(d.query_id);
    r.query_text = q ? q->text : d.query_id;
    r.tool = catalog.tool_name(d.tool_id);
    r.data_type_id = d.data_type_id;
    r.data_type = catalog.data_type_name(d.data_type_id);
    r.decision = binary_label(d.option).value_or(is_share(d.option) ? Label::Allow : Label::Deny);
    r.sequence = sequence;
    return r;
}

inline std::vector<HistoryRecord> history_records(const Catalog& catalog, const std::vector<PermissionDecision>& ds) {
    std::vector<HistoryRecord> out;
    out.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out.push_back(history_record(catalog, ds[i], static_cast<std::int64_t>(i)));
    }
    return out;
}

/// `<Query: ...; Tool: ...; Data Type: ...; Decision: Allow|Deny>`
inline std::string render_record(std::string_view query_text, std::string_view tool, std::string_view data_type,
                                 Label decision) {
    std::string out = "<Query: ";
    out.append(query_text).append("; Tool: ").append(tool).append("; Data Type: ").append(data_type);
    out.append("; Decision: ").append(to_string(decision)).append(">");
    return out;
}

inline std::string render_target(const RequestView& v) {
    std::string out = "<Query: ";
    out.append(v.request.query_text).append("; Tool: ").append(v.tool_name);
    out.append("; Data Type: ").append(v.data_type_name).append(">");
    return out;
}

namespace detail {

inline std::string_view education_phrase(Education e) {
    switch (e) {
    case Education::HighSchool: return "a high school education";
    case Education::Bachelor: return "a bachelor's degree";
    case Education::Master: return "a master's degree";
    case Education::Doctorate: return "a doctorate";
    }
    return "";
}

inline std::string age_phrase(const UserProfile& p) {
    if (p.age_range) return *p.age_range;
    switch (p.age_group) {
    case AgeGroup::Under25: return "under-25";
    case AgeGroup::From25To39: return "25–39";
    case AgeGroup::From40To55: return "40–55";
    case AgeGroup::Over55: return "over-55";
    }
    return "";
}

inline std::string join_domains(const std::set<Domain>& domains) {
    std::vector<std::string> names;
    for (Domain d : domains) names.emplace_back(to_string(d));
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i > 0) out += (i + 1 == names.size()) ? (names.size() > 2 ? ", and " : " and ") : ", ";
        out += names[i];
    }
    return out;
}

} // namespace detail

/// "The user is a male in the 45–54 age group with a bachelor's degree."
/// An undisclosed sex drops the "a male"/"a female" clause.
inline std::string render_demographics(const UserProfile& p) {
    std::string out = "The user is ";
    if (p.sex == Sex::Male) out += "a male ";
    if (p.sex == Sex::Female) out += "a female ";
    out += "in the " + detail::age_phrase(p) + " age group with ";
    out += detail::education_phrase(p.education);
    out += ".";
    return out;
}

inline std::string render_self_report(const UserProfile& p) {
    std::ostringstream out;
    out << "On a scale from 1 (lowest) to 4 (highest), they rate their familiarity with AI tools as "
        << p.ai_familiarity << ", how often they use AI tools as " << p.ai_usage_frequency
        << ", their trust in AI tools as " << p.ai_trust << ", and their privacy consciousness as "
        << p.privacy_consciousness;
    if (p.privacy_consciousness == 4) out << " (the highest level of privacy concern)";
    if (p.privacy_consciousness == 1) out << " (the lowest level of privacy concern)";
    out << ".";
    if (p.concerning_domains.empty()) {
        out << " They did not mark any domain as privacy-concerning.";
    } else {
        out << " They consider the " << detail::join_domains(p.concerning_domains)
            << (p.concerning_domains.size() == 1 ? " domain" : " domains") << " privacy-concerning.";
    }
    return out.str();
}

/// One line per record, ordered by query id then data type id.
inline std::vector<std::string> render_history(std::vector<HistoryRecord> records) {
    std::stable_sort(records.begin(), records.end(), [](const HistoryRecord& a, const HistoryRecord& b) {
        return std::tie(a.query_id, a.data_type_id, a.tool) < std::tie(b.query_id, b.data_type_id, b.tool);
    });
    std::vector<std::string> lines;
    lines.reserve(records.size());
    for (const auto& r : records) lines.push_back(render_record(r.query_text, r.tool, r.data_type, r.decision));
    return lines;
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

struct PromptSpec {
    std::string role_preamble;
    std::string demographics_sentence;
    std::string self_report_sentences;
    std::vector<std::string> history_lines;
    std::vector<std::string> cf_example_lines;
    std::string target_request;
    std::string output_instructions;
    /// Whole queries dropped to fit the history budget.
    std::size_t truncated_queries = 0;

    std::string render() const {
        std::string out;
        out.append(role_preamble).append("\n\n");
        out.append(kProfileHeader).append("\n").append(demographics_sentence);
        out.append(" ").append(self_report_sentences).append("\n\n");
        out.append(kHistoryHeader).append("\n");
        if (history_lines.empty()) {
            out.append(kNoHistorySentence).append("\n");
        } else {
            for (const auto& l : history_lines) out.append(l).append("\n");
        }
        out.append("\n");
        if (!cf_example_lines.empty()) {
            out.append(kRecommendationHeader).append("\n").append(kRecommendationIntro).append("\n");
            for (const auto& l : cf_example_lines) out.append(l).append("\n");
            out.append("\n");
        }
        out.append(kRequestHeader).append("\n").append(target_request).append("\n\n");
        out.append(kAnswerHeader).append("\n").append(output_instructions).append("\n");
        return out;
    }

    std::size_t rendered_length() const { return render().size(); }
};

struct PromptOptions {
    /// Maximum characters of rendered history lines; 0 = unlimited.
    std::size_t history_char_budget = 0;
};

namespace detail {

/// Drops whole queries, oldest first, until the rendered history fits.
inline std::size_t truncate_history(std::vector<HistoryRecord>& records, std::size_t budget) {
    if (budget == 0) return 0;
    auto size_of = [](const std::vector<HistoryRecord>& rs) {
        std::size_t n = 0;
        for (const auto& r : rs) n += render_record(r.query_text, r.tool, r.data_type, r.decision).size() + 1;
        return n;
    };
    std::map<std::string, std::int64_t> newest;
    for (const auto& r : records) {
        auto [it, inserted] = newest.emplace(r.query_id, r.sequence);
        if (!inserted) it->second = std::max(it->second, r.sequence);
    }
    std::vector<std::pair<std::int64_t, std::string>> by_age;
    for (const auto& [q, seq] : newest) by_age.emplace_back(seq, q);
    std::sort(by_age.begin(), by_age.end());

    std::size_t dropped = 0;
    for (const auto& [seq, q] : by_age) {
        if (size_of(records) <= budget) break;
        std::erase_if(records, [&](const HistoryRecord& r) { return r.query_id == q; });
        ++dropped;
    }
    return dropped;
}

} // namespace detail

inline PromptSpec build_prompt(const UserProfile& profile, std::vector<HistoryRecord> history,
                               const std::vector<std::string>& cf_lines, const RequestView& target,
                               const PromptOptions& options = {}) {
    PromptSpec p;
    p.role_preamble = std::string(kRolePreamble);
    p.demographics_sentence = render_demographics(profile);
    p.self_report_sentences = render_self_report(profile);
    p.truncated_queries = detail::truncate_history(history, options.history_char_budget);
    p.history_lines = render_history(std::move(history));
    p.cf_example_lines = cf_lines;
    p.target_request = render_target(target) + "\nDomain: " + std::string(to_string(target.request.domain));
    p.output_instructions = std::string(kOutputInstructions);
    return p;
}

// ---------------------------------------------------------------------------
// Responses
// ---------------------------------------------------------------------------

struct ParsedAnswer {
    Label label = Label::Deny;
    double confidence = 0.0;
};

/// Scans from the last line up for `DECISION: <label> CONFIDENCE: <number>`;
/// a bare `<label> <number>` line is accepted as well.
inline std::optional<ParsedAnswer> parse_answer(const std::string& text) {
    static const std::regex strict(R"(DECISION\**:\s*\**\s*(allow|deny)\s*\**\s*[,;]?\s*\**CONFIDENCE\**:\s*\**\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?))",
                                   std::regex::icase);
    static const std::regex bare(R"(^\s*(allow|deny)\s+([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*$)",
                                 std::regex::icase);
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
        std::smatch m;
        if (std::regex_search(*it, m, strict) || std::regex_match(*it, m, bare)) {
            ParsedAnswer a;
            a.label = parse_label(m[1].str());
            a.confidence = std::strtod(m[2].str().c_str(), nullptr);
            return a;
        }
    }
    return std::nullopt;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_confidence(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_answer(Label label, double confidence) {
    return "DECISION: " + std::string(to_string(label)) + " CONFIDENCE: " + format_confidence(confidence);
}

struct ProviderResponse {
    Label label = Label::Deny;
    double confidence = 0.0;
    /// As parsed, before clamping to [0,1].
    double raw_confidence = 0.0;
    bool clamped = false;
    std::string raw_text;
    int attempts = 1;
};

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

/// Prompt text in, completion text out. Implementations must be safe to call
/// from several threads at once. Transport failures throw
/// Error(ProviderUnavailable).
class TextProvider {
public:
    virtual ~TextProvider() = default;
    virtual std::string complete(const std::string& prompt) = 0;
    virtual std::string name() const = 0;
};

struct RetryPolicy {
    /// Additional attempts after the first.
    int retries = 2;
};

inline ProviderResponse predict(TextProvider& provider, const PromptSpec& prompt, const RetryPolicy& policy = {}) {
    const std::string text = prompt.render();
    const int attempts = 1 + std::max(0, policy.retries);
    std::string last_raw;
    std::string last_failure;
    bool any_reply = false;
    for (int attempt = 1; attempt <= attempts; ++attempt) {
        std::string raw;
        try {
            raw = provider.complete(text);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::ProviderUnavailable) throw;
            last_failure = e.what();
            continue;
        }
        any_reply = true;
        last_raw = raw;
        if (auto a = parse_answer(raw)) {
            ProviderResponse r;
            r.label = a->label;
            r.raw_confidence = a->confidence;
            r.confidence = std::clamp(a->confidence, 0.0, 1.0);
            r.clamped = r.confidence != a->confidence;
            r.raw_text = std::move(raw);
            r.attempts = attempt;
            return r;
        }
    }
    if (!any_reply) {
        throw Error(ErrorCode::ProviderUnavailable,
                    provider.name() + " unavailable after " + std::to_string(attempts) + " attempt(s): " + last_failure,
                    {last_failure});
    }
    throw Error(ErrorCode::UnparseableResponse,
                provider.name() + " returned no parseable decision after " + std::to_string(attempts) + " attempt(s)",
                {last_raw});
}

/// Caps the number of concurrent calls into the wrapped provider.
class LimitedProvider : public TextProvider {
public:
    LimitedProvider(std::shared_ptr<TextProvider> inner, std::ptrdiff_t max_in_flight)
        : inner_(std::move(inner)), slots_(std::max<std::ptrdiff_t>(1, max_in_flight)) {}

    std::string complete(const std::string& prompt) override {
        slots_.acquire();
        struct Release {
            std::counting_semaphore<>& s;
            ~Release() { s.release(); }
        } release{slots_};
        return inner_->complete(prompt);
    }
    std::string name() const override { return inner_->name(); }

private:
    std::shared_ptr<TextProvider> inner_;
    std::counting_semaphore<> slots_;
};

// ---------------------------------------------------------------------------
// Deterministic test double
// ---------------------------------------------------------------------------

/// Majority label among history lines for the target's data type; failing
/// that, a recommendation line for the exact target request (at
/// `recommendation_confidence`); then the majority over all history lines;
/// then `fallback`. Confidence is the majority fraction; an even split
/// resolves to Deny.
struct MajorityOfHistory {
    Label fallback_label = Label::Deny;
    double fallback_confidence = 0.5;
    bool follow_recommendations = true;
    double recommendation_confidence = 0.9;
};

struct FixedLabel {
    Label label = Label::Deny;
    double confidence = 0.5;
};

/// Answers keyed by the target's data type display name.
struct ScriptedTable {
    std::map<std::string, ParsedAnswer> entries;
    ParsedAnswer fallback;
};

using MockPolicy = std::variant<MajorityOfHistory, FixedLabel, ScriptedTable>;

struct PromptRecord {
    std::string query;
    std::string tool;
    std::string data_type;
    std::optional<Label> decision;
};

/// Parses the record lines of one `## ...` section of a rendered prompt.
inline std::vector<PromptRecord> section_records(const std::string& prompt, std::string_view header) {
    static const std::regex with_decision(R"(^<Query: (.*); Tool: (.*?); Data Type: (.*?); Decision: (Allow|Deny)>$)");
    static const std::regex without_decision(R"(^<Query: (.*); Tool: (.*?); Data Type: (.*?)>$)");
    std::vector<PromptRecord> out;
    std::istringstream in(prompt);
    bool inside = false;
    for (std::string line; std::getline(in, line);) {
        if (line.rfind("## ", 0) == 0) {
            inside = line == header;
            continue;
        }
        if (!inside) continue;
        std::smatch m;
        if (std::regex_match(line, m, with_decision)) {
            out.push_back({m[1].str(), m[2].str(), m[3].str(), parse_label(m[4].str())});
        } else if (std::regex_match(line, m, without_decision)) {
            out.push_back({m[1].str(), m[2].str(), m[3].str(), std::nullopt});
        }
    }
    return out;
}

class MockProvider : public TextProvider {
public:
    explicit MockProvider(MockPolicy policy) : policy_(std::move(policy)) {}

    std::string complete(const std::string& prompt) override {
        const ParsedAnswer a = std::visit([&](const auto& p) { return answer(p, prompt); }, policy_);
        return format_answer(a.label, a.confidence);
    }

    std::string name() const override { return "mock"; }

private:
    static ParsedAnswer majority(const std::vector<PromptRecord>& records) {
        std::size_t allow = 0;
        for (const auto& r : records) allow += r.decision == Label::Allow ? 1 : 0;
        const std::size_t deny = records.size() - allow;
        const double n = static_cast<double>(records.size());
        if (allow > deny) return {Label::Allow, static_cast<double>(allow) / n};
        return {Label::Deny, static_cast<double>(deny) / n};
    }

    static std::optional<PromptRecord> target_of(const std::string& prompt) {
        auto target = section_records(prompt, kRequestHeader);
        if (target.empty()) return std::nullopt;
        return target.front();
    }

    static std::string target_type(const std::string& prompt) {
        auto t = target_of(prompt);
        return t ? t->data_type : std::string();
    }

    ParsedAnswer answer(const MajorityOfHistory& p, const std::string& prompt) const {
        const auto history = section_records(prompt, kHistoryHeader);
        const auto target = target_of(prompt);
        std::vector<PromptRecord> matching;
        for (const auto& r : history) {
            if (target && r.data_type == target->data_type) matching.push_back(r);
        }
        if (!matching.empty()) return majority(matching);
        if (p.follow_recommendations && target) {
            for (const auto& r : section_records(prompt, kRecommendationHeader)) {
                if (r.decision && r.query == target->query && r.tool == target->tool &&
                    r.data_type == target->data_type) {
                    return {*r.decision, p.recommendation_confidence};
                }
            }
        }
        if (!history.empty()) return majority(history);
        return {p.fallback_label, p.fallback_confidence};
    }

    ParsedAnswer answer(const FixedLabel& p, const std::string&) const { return {p.label, p.confidence}; }

    ParsedAnswer answer(const ScriptedTable& p, const std::string& prompt) const {
        auto it = p.entries.find(target_type(prompt));
        return it == p.entries.end() ? p.fallback : it->second;
    }

    MockPolicy policy_;
};

inline std::shared_ptr<TextProvider> mock_provider(MockPolicy policy) {
    return std::make_shared<MockProvider>(std::move(policy));
}

// ---------------------------------------------------------------------------
// Remote provider configuration
// ---------------------------------------------------------------------------

struct ProviderConfig {
    std::string endpoint;
    std::string credential;
    std::string model = "o3-mini";
    int timeout_seconds = 60;
    int retries = 2;

    /// PERMPRED_PROVIDER_{ENDPOINT,API_KEY,MODEL,TIMEOUT,RETRIES}
    static ProviderConfig from_env() {
        ProviderConfig c;
        auto get = [](const char* name) -> std::optional<std::string> {
            const char* v = std::getenv(name);
            if (!v) return std::nullopt;
            return std::string(v);
        };
        if (auto v = get("PERMPRED_PROVIDER_ENDPOINT")) c.endpoint = *v;
        if (auto v = get("PERMPRED_PROVIDER_API_KEY")) c.credential = *v;
        if (auto v = get("PERMPRED_PROVIDER_MODEL")) c.model = *v;
        try {
            if (auto v = get("PERMPRED_PROVIDER_TIMEOUT")) c.timeout_seconds = std::stoi(*v);
            if (auto v = get("PERMPRED_PROVIDER_RETRIES")) c.retries = std::stoi(*v);
        } catch (const std::exception&) {
            throw Error(ErrorCode::InvalidConfig, "PERMPRED_PROVIDER_TIMEOUT/RETRIES must be integers");
        }
        return c;
    }
};

} // namespace permpred::icl

#endif // PERMPRED_ICL_HPP
