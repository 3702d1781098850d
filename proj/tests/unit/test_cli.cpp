#include "oracles.hpp"

#include "json.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    int status = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    testing_support::TempDir dir;

    Outcome run(const std::string& args, const std::string& env = "") {
        const fs::path out = dir.path / "stdout.txt", err = dir.path / "stderr.txt";
        const std::string cmd = "cd '" + dir.path.string() + "' && " + env + " '" + PERMPRED_CLI_PATH + "' " + args +
                                " >'" + out.string() + "' 2>'" + err.string() + "'";
        const int raw = std::system(cmd.c_str());
        Outcome r;
        r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    void synth() { ASSERT_EQ(run("ingest synth --out syn.json --seed 4 --users-per-group 4").status, 0); }
};

} // namespace

TEST_F(Cli, SynthValidateStats) {
    synth();
    EXPECT_TRUE(fs::exists(dir.path / "syn.config.json"));
    const auto v = run("ingest validate syn.json");
    ASSERT_EQ(v.status, 0) << v.err;
    EXPECT_EQ(json::parse(v.out).at("participants"), 8);
    const auto s = run("ingest stats syn.json");
    ASSERT_EQ(s.status, 0);
    EXPECT_EQ(json::parse(s.out).at("modeling").at("decisions"), 160);
}

TEST_F(Cli, UnknownFlagIsUsageError) {
    const auto r = run("ingest validate x.json --no-such-flag");
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.err.find("\"UsageError\""), std::string::npos);
    EXPECT_EQ(run("").status, 2);
    EXPECT_EQ(run("frobnicate").status, 2);
}

TEST_F(Cli, ComponentFailureIsOneWithEnvelope) {
    std::ofstream(dir.path / "bad.json") << R"({"catalog": {}, "profiles": []})";
    const auto r = run("ingest validate bad.json");
    EXPECT_EQ(r.status, 1);
    const json e = json::parse(r.err.substr(r.err.find('{')));
    EXPECT_EQ(e.at("error").at("code"), "SchemaError");
    EXPECT_TRUE(e.at("error").contains("message"));
}

TEST_F(Cli, EvalCvWritesReportsAndConfig) {
    synth();
    const auto r = run("eval cv --predictor hybrid --history-ratio 1.0 --dataset syn.json --seed 2 --out cv "
                       "--epochs 80 --breakdown user --breakdown tool");
    ASSERT_EQ(r.status, 0) << r.err;
    for (const char* f : {"report.json", "run_config.json", "sweep.csv", "sweep.json", "breakdown_user.csv",
                          "breakdown_tool.csv"}) {
        EXPECT_TRUE(fs::exists(dir.path / "cv" / f)) << f;
    }
    const json report = json::parse(slurp(dir.path / "cv" / "report.json"));
    EXPECT_EQ(report.at("predictor"), "hybrid");
    EXPECT_EQ(report.at("overall").at("counts").at("tp").get<int>() + report.at("overall").at("counts").at("fn").get<int>() +
                  report.at("overall").at("counts").at("tn").get<int>() + report.at("overall").at("counts").at("fp").get<int>(),
              160);
    const json cfg = json::parse(slurp(dir.path / "cv" / "run_config.json"));
    EXPECT_EQ(cfg.at("seed"), 2);
    EXPECT_EQ(cfg.at("cf").at("epochs"), 80);
    EXPECT_TRUE(cfg.contains("version"));
}

TEST_F(Cli, RunConfigReproducesRun) {
    synth();
    ASSERT_EQ(run("eval cv syn.json --predictor cf --seed 9 --epochs 60 --out a").status, 0);
    const auto r = run("eval cv syn.json --run-config a/run_config.json --out b");
    ASSERT_EQ(r.status, 0) << r.err;
    json a = json::parse(slurp(dir.path / "a" / "report.json"));
    json b = json::parse(slurp(dir.path / "b" / "report.json"));
    EXPECT_EQ(a, b);
}

TEST_F(Cli, CredentialStaysOutOfArtifacts) {
    synth();
    const auto r = run("eval cv syn.json --predictor icl --out c", "PERMPRED_PROVIDER_API_KEY=sk-do-not-write");
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(slurp(dir.path / "c" / "run_config.json").find("sk-do-not-write"), std::string::npos);
    EXPECT_EQ(r.out.find("sk-do-not-write"), std::string::npos);
}

TEST_F(Cli, AnalyzeTable1AndCsv) {
    synth();
    const auto r = run("analyze table1 syn.json --out t1.json --csv t1.csv");
    ASSERT_EQ(r.status, 0) << r.err;
    const json t = json::parse(slurp(dir.path / "t1.json"));
    EXPECT_EQ(t.at("group_by"), "domain_tool");
    EXPECT_FALSE(t.at("rows").empty());
    EXPECT_EQ(slurp(dir.path / "t1.csv").rfind("key,label,total,AlwaysShare", 0), 0u);
    EXPECT_EQ(run("analyze nonsense syn.json").status, 2);
}

TEST_F(Cli, CfTrainPredictSweep) {
    synth();
    ASSERT_EQ(run("cf train syn.json --model m.json --epochs 80").status, 0);
    EXPECT_TRUE(fs::exists(dir.path / "m.config.json"));
    const json d = json::parse(slurp(dir.path / "syn.json"));
    const auto& x = d.at("decisions")[0];
    const auto r = run("cf predict --model m.json --user " + x.at("participant_id").get<std::string>() + " --query " +
                       x.at("query_id").get<std::string>() + " --tool " + x.at("tool_id").get<std::string>() +
                       " --type " + x.at("data_type_id").get<std::string>());
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_TRUE(json::parse(r.out).at("recommendation").is_object());
    const auto none = run("cf predict --model m.json --user nobody --query q --tool t --type x");
    EXPECT_TRUE(json::parse(none.out).at("recommendation").is_null());
    ASSERT_EQ(run("cf sweep-thresholds syn.json --model m.json --out s.csv --steps 11").status, 0);
    const std::string csv = slurp(dir.path / "s.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 12);
}

TEST_F(Cli, IclPromptIsDeterministic) {
    synth();
    const json d = json::parse(slurp(dir.path / "syn.json"));
    const auto& x = d.at("decisions")[0];
    const std::string args = "icl prompt syn.json --user " + x.at("participant_id").get<std::string>() + " --query " +
                             x.at("query_id").get<std::string>() + " --type " + x.at("data_type_id").get<std::string>();
    const auto a = run(args), b = run(args);
    ASSERT_EQ(a.status, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_NE(a.out.find("## Permission request"), std::string::npos);
}

TEST_F(Cli, BadIniIsRejected) {
    synth();
    std::ofstream(dir.path / "bad.ini") << "[hybrid]\ncoverage_treshold=0.5\n";
    const auto r = run("--config bad.ini eval cv syn.json --out z");
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.err.find("InvalidConfig"), std::string::npos);
}
