#include "fixtures.hpp"
#include "oracles.hpp"

#include "permpred/http_provider.hpp"
#include "permpred/icl.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <thread>

using namespace permpred;
using namespace permpred::icl;

namespace {

const std::string kTaxText = "Can you retrieve my tax filing details from last year?";

UserProfile profile(Sex sex = Sex::Male) {
    UserProfile p;
    p.participant_id = "u";
    p.sex = sex;
    p.age_group = AgeGroup::From40To55;
    p.age_range = "45–54";
    p.education = Education::Bachelor;
    p.ai_familiarity = 3;
    p.ai_usage_frequency = 2;
    p.ai_trust = 2;
    p.privacy_consciousness = 4;
    p.concerning_domains = {Domain::Finance, Domain::HealthFitness};
    return p;
}

HistoryRecord record(const std::string& q, const std::string& type, Label l, std::int64_t seq = 0) {
    return {q, "Question " + q + "?", "Tool", type, "Type " + type, l, seq};
}

RequestView target(const std::string& type = "x") {
    RequestView v;
    v.request.participant_id = "u";
    v.request.query_id = "target";
    v.request.query_text = "Target question?";
    v.request.tool_id = "tool";
    v.request.data_type_id = type;
    v.request.domain = Domain::Finance;
    v.tool_name = "Tool";
    v.data_type_name = "Type " + type;
    return v;
}

std::size_t count(const std::string& hay, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + needle.size())) ++n;
    return n;
}

} // namespace

TEST(RenderRecord, TaxDenyExample) {
    auto b = fixtures::tax_catalog();
    b.user("u").decide("u", "tax-q", "ssn", DecisionOption::NeverShare);
    const Dataset d = b.build();
    const auto lines = render_history(history_records(d.catalog, d.decisions));
    ASSERT_EQ(lines.size(), 1u);
    EXPECT_EQ(lines[0], "<Query: " + kTaxText + "; Tool: Tax Management; Data Type: SSN; Decision: Deny>");
}

TEST(RenderRecord, OneTimeOptionsRenderAsShareOrNot) {
    auto b = fixtures::tax_catalog();
    b.user("u").decide("u", "tax-q", "ssn", DecisionOption::YesOnce).decide("u", "tax-q", "income",
                                                                           DecisionOption::NoOnce);
    const Dataset d = b.build();
    const auto recs = history_records(d.catalog, d.decisions);
    EXPECT_EQ(recs[0].decision, Label::Allow);
    EXPECT_EQ(recs[1].decision, Label::Deny);
}

TEST(Demographics, MaleAgeEducation) {
    const std::string s = render_demographics(profile());
    EXPECT_NE(s.find("male"), std::string::npos);
    EXPECT_NE(s.find("45–54"), std::string::npos);
    EXPECT_NE(s.find("bachelor"), std::string::npos);
    EXPECT_EQ(s, "The user is a male in the 45–54 age group with a bachelor's degree.");
}

TEST(Demographics, UndisclosedSexOmitted) {
    const std::string s = render_demographics(profile(Sex::Undisclosed));
    EXPECT_EQ(s.find("male"), std::string::npos);
    EXPECT_EQ(s, "The user is in the 45–54 age group with a bachelor's degree.");
}

TEST(Demographics, BucketWhenNoExactRange) {
    auto p = profile(Sex::Female);
    p.age_range.reset();
    EXPECT_NE(render_demographics(p).find("a female in the 40–55 age group"), std::string::npos);
}

TEST(SelfReport, HighestConcernAndDomains) {
    const std::string s = render_self_report(profile());
    EXPECT_NE(s.find("highest level of privacy concern"), std::string::npos);
    EXPECT_NE(s.find("Health & Fitness and Finance domains"), std::string::npos);
    auto p = profile();
    p.privacy_consciousness = 2;
    EXPECT_EQ(render_self_report(p).find("highest level"), std::string::npos);
}

TEST(History, EmptyStatesNoPriorDecisions) {
    const auto prompt = build_prompt(profile(), {}, {}, target()).render();
    EXPECT_NE(prompt.find(kNoHistorySentence), std::string::npos);
    EXPECT_EQ(prompt.find(kRecommendationHeader), std::string::npos);
}

TEST(History, OrderStableUnderShuffle) {
    std::vector<HistoryRecord> recs{record("q2", "a", Label::Allow), record("q1", "b", Label::Deny),
                                    record("q1", "a", Label::Allow), record("q3", "c", Label::Deny)};
    const auto expected = render_history(recs);
    std::mt19937 rng(1);
    for (int i = 0; i < 20; ++i) {
        std::shuffle(recs.begin(), recs.end(), rng);
        EXPECT_EQ(render_history(recs), expected);
    }
    EXPECT_NE(expected[0].find("Question q1?"), std::string::npos);
    EXPECT_NE(expected[0].find("Type a"), std::string::npos);
}

TEST(Prompt, SectionsInFixedOrder) {
    const auto spec = build_prompt(profile(), {record("q1", "a", Label::Allow)},
                                   {render_record("Q", "Tool", "Type x", Label::Deny)}, target());
    const std::string p = spec.render();
    std::size_t last = 0;
    for (auto h : {kProfileHeader, kHistoryHeader, kRecommendationHeader, kRequestHeader, kAnswerHeader}) {
        const auto at = p.find(h);
        ASSERT_NE(at, std::string::npos) << h;
        EXPECT_GT(at, last);
        last = at;
    }
    EXPECT_EQ(p.rfind(kRolePreamble, 0), 0u);
    EXPECT_NE(p.find(kRecommendationIntro), std::string::npos);
    EXPECT_EQ(spec.rendered_length(), p.size());
    EXPECT_NE(spec.output_instructions.find("Allow|Deny"), std::string::npos);
}

TEST(Prompt, MinimalAssembly) {
    const auto spec = build_prompt(profile(), {}, {}, target());
    EXPECT_TRUE(spec.history_lines.empty());
    EXPECT_TRUE(spec.cf_example_lines.empty());
    EXPECT_EQ(spec.target_request, "<Query: Target question?; Tool: Tool; Data Type: Type x>\nDomain: Finance");
}

TEST(Prompt, ByteIdenticalForIdenticalInputs) {
    const std::vector<HistoryRecord> h{record("q1", "a", Label::Allow), record("q2", "b", Label::Deny)};
    EXPECT_EQ(build_prompt(profile(), h, {"<cf>"}, target()).render(),
              build_prompt(profile(), h, {"<cf>"}, target()).render());
}

TEST(Prompt, EveryDecisionAndRecommendationExactlyOnce) {
    std::mt19937 rng(3);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<HistoryRecord> h;
        for (int i = 0; i < 1 + trial % 7; ++i) {
            h.push_back(record("q" + std::to_string(i), "t" + std::to_string(i), coin(rng) ? Label::Allow : Label::Deny));
        }
        std::vector<std::string> cf;
        for (int i = 0; i < trial % 4; ++i) cf.push_back(render_record("CF " + std::to_string(i) + "?", "Tool", "Z", Label::Deny));
        const std::string p = build_prompt(profile(), h, cf, target()).render();
        for (const auto& r : h) {
            EXPECT_EQ(count(p, render_record(r.query_text, r.tool, r.data_type, r.decision)), 1u);
        }
        for (const auto& line : cf) EXPECT_EQ(count(p, line), 1u);
        EXPECT_EQ(section_records(p, kHistoryHeader).size(), h.size());
        EXPECT_EQ(section_records(p, kRecommendationHeader).size(), cf.size());
    }
}

TEST(Prompt, TruncationDropsOldestWholeQueries) {
    std::vector<HistoryRecord> h{record("old", "a", Label::Allow, 1), record("old", "b", Label::Allow, 1),
                                 record("mid", "a", Label::Deny, 2), record("new", "a", Label::Allow, 3)};
    const std::size_t one = render_record("Question new?", "Tool", "Type a", Label::Allow).size() + 1;
    const auto spec = build_prompt(profile(), h, {}, target(), {2 * one + 2});
    EXPECT_EQ(spec.truncated_queries, 1u);
    ASSERT_EQ(spec.history_lines.size(), 2u);
    for (const auto& l : spec.history_lines) EXPECT_EQ(l.find("Question old?"), std::string::npos);
    EXPECT_EQ(build_prompt(profile(), h, {}, target()).history_lines.size(), 4u);
}

TEST(Parse, StrictLineFromEnd) {
    const auto a = parse_answer("thinking...\nDECISION: Allow CONFIDENCE: 0.3\nmore\nDECISION: Deny CONFIDENCE: 0.82");
    ASSERT_TRUE(a);
    EXPECT_EQ(a->label, Label::Deny);
    EXPECT_DOUBLE_EQ(a->confidence, 0.82);
}

TEST(Parse, LenientForms) {
    auto a = parse_answer("Allow 0.9");
    ASSERT_TRUE(a);
    EXPECT_EQ(a->label, Label::Allow);
    EXPECT_DOUBLE_EQ(a->confidence, 0.9);
    a = parse_answer("**DECISION:** deny, **CONFIDENCE:** 1\r\n");
    ASSERT_TRUE(a);
    EXPECT_EQ(a->label, Label::Deny);
    EXPECT_FALSE(parse_answer("I think you should allow this."));
    EXPECT_FALSE(parse_answer(""));
}

TEST(Parse, RoundTripThroughFormatting) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < 500; ++i) {
        const Label l = i % 2 ? Label::Allow : Label::Deny;
        const double c = i == 0 ? 0.0 : (i == 1 ? 1.0 : unit(rng));
        MockProvider mock(FixedLabel{l, c});
        const auto r = predict(mock, build_prompt(profile(), {}, {}, target()));
        EXPECT_EQ(r.label, l);
        EXPECT_EQ(r.confidence, c);
    }
}

TEST(Predict, EchoedAnswer) {
    testing_support::SequenceProvider p({"Allow 0.9"});
    const auto r = predict(p, build_prompt(profile(), {}, {}, target()));
    EXPECT_EQ(r.label, Label::Allow);
    EXPECT_DOUBLE_EQ(r.confidence, 0.9);
    EXPECT_EQ(r.raw_text, "Allow 0.9");
}

TEST(Predict, ClampsAndKeepsRawValue) {
    testing_support::SequenceProvider p({"DECISION: Allow CONFIDENCE: 1.7"});
    const auto r = predict(p, build_prompt(profile(), {}, {}, target()));
    EXPECT_DOUBLE_EQ(r.confidence, 1.0);
    EXPECT_DOUBLE_EQ(r.raw_confidence, 1.7);
    EXPECT_TRUE(r.clamped);
    testing_support::SequenceProvider q({"DECISION: Deny CONFIDENCE: -0.2"});
    EXPECT_DOUBLE_EQ(predict(q, build_prompt(profile(), {}, {}, target())).confidence, 0.0);
}

TEST(Predict, GarbageThriceIsUnparseable) {
    testing_support::SequenceProvider p({"no idea"});
    try {
        predict(p, build_prompt(profile(), {}, {}, target()));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnparseableResponse);
        ASSERT_FALSE(e.details().empty());
        EXPECT_EQ(e.details().front(), "no idea");
    }
    EXPECT_EQ(p.calls(), 3u);
}

TEST(Predict, RecoversOnRetry) {
    testing_support::SequenceProvider p({"hmm", "DECISION: Deny CONFIDENCE: 0.6"});
    const auto r = predict(p, build_prompt(profile(), {}, {}, target()));
    EXPECT_EQ(r.attempts, 2);
    EXPECT_EQ(r.label, Label::Deny);
}

TEST(Predict, UnavailableAfterRetries) {
    testing_support::DownProvider p;
    try {
        predict(p, build_prompt(profile(), {}, {}, target()), RetryPolicy{1});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ProviderUnavailable);
    }
    EXPECT_EQ(p.calls.load(), 2);
}

TEST(Mock, MajorityOnTargetType) {
    const std::vector<HistoryRecord> h{record("q1", "x", Label::Allow), record("q2", "x", Label::Allow),
                                       record("q3", "x", Label::Allow), record("q4", "x", Label::Deny),
                                       record("q5", "y", Label::Deny), record("q6", "y", Label::Deny)};
    MockProvider mock(MajorityOfHistory{});
    const auto r = predict(mock, build_prompt(profile(), h, {}, target("x")));
    EXPECT_EQ(r.label, Label::Allow);
    EXPECT_DOUBLE_EQ(r.confidence, 0.75);
}

TEST(Mock, FallsBackToOverallMajorityThenDefault) {
    MockProvider mock(MajorityOfHistory{});
    const std::vector<HistoryRecord> h{record("q1", "y", Label::Deny), record("q2", "z", Label::Deny),
                                       record("q3", "z", Label::Allow)};
    auto r = predict(mock, build_prompt(profile(), h, {}, target("x")));
    EXPECT_EQ(r.label, Label::Deny);
    EXPECT_DOUBLE_EQ(r.confidence, 2.0 / 3.0);
    r = predict(mock, build_prompt(profile(), {}, {}, target("x")));
    EXPECT_EQ(r.label, Label::Deny);
    EXPECT_DOUBLE_EQ(r.confidence, 0.5);
}

TEST(Mock, EvenSplitIsDeny) {
    MockProvider mock(MajorityOfHistory{});
    const auto r = predict(mock, build_prompt(profile(), {record("q1", "x", Label::Allow), record("q2", "x", Label::Deny)},
                                              {}, target("x")));
    EXPECT_EQ(r.label, Label::Deny);
    EXPECT_DOUBLE_EQ(r.confidence, 0.5);
}

TEST(Mock, FollowsRecommendationForExactTarget) {
    MockProvider mock(MajorityOfHistory{});
    const auto t = target("x");
    const std::vector<std::string> cf{render_record(t.request.query_text, t.tool_name, t.data_type_name, Label::Allow)};
    const auto r = predict(mock, build_prompt(profile(), {record("q1", "y", Label::Deny)}, cf, t));
    EXPECT_EQ(r.label, Label::Allow);
    EXPECT_DOUBLE_EQ(r.confidence, 0.9);
}

TEST(Mock, FixedAndScripted) {
    MockProvider fixed(FixedLabel{Label::Deny, 0.5});
    const auto r = predict(fixed, build_prompt(profile(), {}, {}, target()));
    EXPECT_EQ(r.label, Label::Deny);
    EXPECT_DOUBLE_EQ(r.confidence, 0.5);

    ScriptedTable table;
    table.entries["Type x"] = {Label::Allow, 0.8};
    table.fallback = {Label::Deny, 0.25};
    MockProvider scripted(table);
    EXPECT_DOUBLE_EQ(predict(scripted, build_prompt(profile(), {}, {}, target("x"))).confidence, 0.8);
    const auto miss = predict(scripted, build_prompt(profile(), {}, {}, target("q")));
    EXPECT_EQ(miss.label, Label::Deny);
    EXPECT_DOUBLE_EQ(miss.confidence, 0.25);
}

TEST(Mock, ConsistentPreferencesGivePerfectAccuracy) {
    std::map<std::string, Label> pref;
    for (int t = 0; t < 6; ++t) pref["t" + std::to_string(t)] = t % 3 == 0 ? Label::Allow : Label::Deny;
    std::vector<HistoryRecord> h;
    for (int q = 0; q < 12; ++q) {
        const std::string t = "t" + std::to_string(q % 6);
        h.push_back(record("q" + std::to_string(q), t, pref[t]));
    }
    MockProvider mock(MajorityOfHistory{});
    for (const auto& [type, label] : pref) {
        EXPECT_EQ(predict(mock, build_prompt(profile(), h, {}, target(type))).label, label) << type;
    }
}

TEST(Limited, NeverExceedsInFlightCap) {
    class Slow : public TextProvider {
    public:
        std::string complete(const std::string&) override {
            const int now = ++active;
            int seen = peak.load();
            while (now > seen && !peak.compare_exchange_weak(seen, now)) {
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
            --active;
            return "Allow 1";
        }
        std::string name() const override { return "slow"; }
        std::atomic<int> active{0}, peak{0};
    };
    auto slow = std::make_shared<Slow>();
    LimitedProvider limited(slow, 2);
    std::vector<std::thread> threads;
    for (int i = 0; i < 8; ++i) threads.emplace_back([&] { limited.complete("p"); });
    for (auto& t : threads) t.join();
    EXPECT_LE(slow->peak.load(), 2);
    EXPECT_GE(slow->peak.load(), 1);
}

TEST(ProviderConfigEnv, ReadsVariables) {
    ::setenv("PERMPRED_PROVIDER_ENDPOINT", "http://127.0.0.1:9", 1);
    ::setenv("PERMPRED_PROVIDER_MODEL", "m", 1);
    ::setenv("PERMPRED_PROVIDER_RETRIES", "5", 1);
    const auto c = ProviderConfig::from_env();
    EXPECT_EQ(c.endpoint, "http://127.0.0.1:9");
    EXPECT_EQ(c.model, "m");
    EXPECT_EQ(c.retries, 5);
    ::setenv("PERMPRED_PROVIDER_RETRIES", "many", 1);
    EXPECT_THROW(ProviderConfig::from_env(), Error);
    ::unsetenv("PERMPRED_PROVIDER_ENDPOINT");
    ::unsetenv("PERMPRED_PROVIDER_MODEL");
    ::unsetenv("PERMPRED_PROVIDER_RETRIES");
}

class HttpProviderTest : public ::testing::Test {
protected:
    void SetUp() override {
        server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            last_auth = req.get_header_value("Authorization");
            last_body = nlohmann::json::parse(req.body);
            if (mode == "error") {
                res.status = 500;
                res.set_content("boom", "text/plain");
                return;
            }
            if (mode == "junk") {
                res.set_content("not json", "text/plain");
                return;
            }
            const nlohmann::json reply = {
                {"choices", {{{"message", {{"role", "assistant"}, {"content", "DECISION: Deny CONFIDENCE: 0.7"}}}}}}};
            res.set_content(reply.dump(), "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    void TearDown() override {
        server.stop();
        thread.join();
    }
    ProviderConfig config() const {
        ProviderConfig c;
        c.endpoint = "http://127.0.0.1:" + std::to_string(port);
        c.credential = "secret";
        c.timeout_seconds = 5;
        return c;
    }

    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::string mode = "ok";
    std::string last_auth;
    nlohmann::json last_body;
};

TEST_F(HttpProviderTest, SendsChatCompletionAndParsesReply) {
    HttpProvider p(config());
    const auto r = predict(p, build_prompt(profile(), {}, {}, target()));
    EXPECT_EQ(r.label, Label::Deny);
    EXPECT_DOUBLE_EQ(r.confidence, 0.7);
    EXPECT_EQ(last_auth, "Bearer secret");
    EXPECT_EQ(last_body["model"], "o3-mini");
    EXPECT_NE(last_body["messages"][0]["content"].get<std::string>().find(kRequestHeader), std::string::npos);
}

TEST_F(HttpProviderTest, ServerErrorIsUnavailable) {
    mode = "error";
    HttpProvider p(config());
    try {
        predict(p, build_prompt(profile(), {}, {}, target()), RetryPolicy{0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ProviderUnavailable);
    }
}

TEST_F(HttpProviderTest, MalformedBodyIsUnparseable) {
    mode = "junk";
    HttpProvider p(config());
    try {
        predict(p, build_prompt(profile(), {}, {}, target()), RetryPolicy{0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnparseableResponse);
    }
}

TEST(HttpProviderConfig, RejectsNonUrlEndpoint) {
    ProviderConfig c;
    c.endpoint = "localhost";
    EXPECT_THROW(HttpProvider{c}, Error);
}

TEST(HttpProviderConfig, UnreachableIsUnavailable) {
    ProviderConfig c;
    c.endpoint = "http://127.0.0.1:1";
    c.timeout_seconds = 1;
    HttpProvider p(c);
    EXPECT_THROW(p.complete("x"), Error);
}
