#include "oracles.hpp"

#include "permpred/cf.hpp"
#include "permpred/synthetic.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace permpred;
using namespace permpred::cf;

namespace {

Observation obs(const std::string& u, const std::string& q, Label l) { return {u, {q, "tool", "type-" + q}, l}; }

double relative_error(const Matrix& a, const Matrix& b) {
    const double scale = std::max({a.norm(), b.norm(), 1e-8});
    return (a - b).norm() / scale;
}

Hyperparameters small_hyper() {
    Hyperparameters h;
    h.dim = 8;
    h.epochs = 150;
    h.seed = 3;
    return h;
}

} // namespace

TEST(Graph, CountsNodesAndEdges) {
    const auto g = InteractionGraph::build(
        {obs("a", "q1", Label::Allow), obs("a", "q2", Label::Deny), obs("b", "q1", Label::Deny)});
    EXPECT_EQ(g.node_count(), 4u);
    EXPECT_EQ(g.edges().size(), 3u);
    const auto a = *g.user_index("a");
    const auto q1 = *g.request_index({"q1", "tool", "type-q1"});
    for (const auto& e : g.edges()) {
        if (e.user == a && e.request == q1) EXPECT_EQ(e.sign, 1);
    }
    EXPECT_EQ(g.degrees()[g.request_node(q1)], 2u);
}

TEST(Graph, ConflictingLabelsRejected) {
    try {
        InteractionGraph::build({obs("a", "q1", Label::Allow), obs("a", "q1", Label::Deny)});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DuplicateObservation);
    }
    EXPECT_EQ(InteractionGraph::build({obs("a", "q1", Label::Allow), obs("a", "q1", Label::Allow)}).edges().size(), 1u);
}

TEST(Graph, OneTimeDecisionsRejected) {
    PermissionDecision x;
    x.participant_id = "a";
    x.query_id = "q";
    x.option = DecisionOption::YesOnce;
    EXPECT_THROW(build_graph({x}), Error);
}

TEST(Propagation, MatchesDenseOracle) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto g = InteractionGraph::build(oracle::random_observations(rng, 4, 5, 0.5));
        const Matrix e0 = initial_embeddings(g.node_count(), 3, 1.0, static_cast<std::uint64_t>(trial));
        for (int layers : {0, 1, 3}) {
            const auto p = propagate(g, e0, layers);
            EXPECT_LT((p.final - oracle::dense_final(g, e0, layers)).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(Propagation, ZeroLayersIsIdentity) {
    const auto g = InteractionGraph::build({obs("a", "q1", Label::Allow)});
    const Matrix e0 = initial_embeddings(g.node_count(), 4, 0.1, 1);
    EXPECT_EQ(propagate(g, e0, 0).final, e0);
}

TEST(Propagation, UnitDegreePairSwapsEmbeddings) {
    const auto g = InteractionGraph::build({obs("a", "q1", Label::Allow)});
    Matrix e0(2, 2);
    e0 << 1, 2, 3, 4;
    const auto p = propagate(g, e0, 1);
    EXPECT_EQ(p.layers[1].row(0), e0.row(1));
    EXPECT_EQ(p.layers[1].row(1), e0.row(0));
}

TEST(Propagation, ThreeNodePathByHand) {
    // u1 - r - u2 with scalar embeddings u1=1, u2=3, r=2 and two layers.
    const auto g = InteractionGraph::build({obs("u1", "q", Label::Allow), obs("u2", "q", Label::Deny)});
    Matrix e0(3, 1);
    e0 << 1, 3, 2;
    const double s2 = std::sqrt(2.0);
    const auto p = propagate(g, e0, 2);
    EXPECT_NEAR(p.final(0, 0), (1 + s2 + 2) / 3, 1e-12);
    EXPECT_NEAR(p.final(1, 0), (3 + s2 + 2) / 3, 1e-12);
    EXPECT_NEAR(p.final(2, 0), (2 + 2 * s2 + 2) / 3, 1e-12);
}

TEST(Propagation, Linear) {
    std::mt19937_64 rng(9);
    const auto g = InteractionGraph::build(oracle::random_observations(rng, 5, 5, 0.6));
    const Matrix e0 = initial_embeddings(g.node_count(), 4, 1.0, 2);
    const Matrix scaled = propagate(g, 2.5 * e0, 2).final;
    EXPECT_LT((scaled - 2.5 * propagate(g, e0, 2).final).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Propagation, LayerMeanReproducesFinalExactly) {
    std::mt19937_64 rng(1);
    const auto model = train(oracle::random_observations(rng, 5, 5, 0.7), small_hyper());
    EXPECT_EQ(layer_mean(model.layers), model.final_embeddings);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> size(1, 5), dims(1, 4), layer_pick(0, 3);
    for (int trial = 0; trial < 20; ++trial) {
        const int users = size(rng), requests = std::min(size(rng), 10 - users);
        const auto g = InteractionGraph::build(oracle::random_observations(rng, users, requests, 0.6));
        const int d = dims(rng), layers = layer_pick(rng);
        const Objective f(g, layers, 1e-2);
        const Matrix e0 = initial_embeddings(g.node_count(), d, 0.8, static_cast<std::uint64_t>(trial));
        const Matrix fd = oracle::finite_difference([&](const Matrix& x) { return f.loss(x); }, e0);
        EXPECT_LT(relative_error(f.gradient(e0), fd), 1e-4) << "trial " << trial;
    }
}

TEST(Calibrate, SeparatedScoresGiveMidpoint) {
    const std::vector<ScoredLabel> s{{0.9, Label::Allow}, {0.8, Label::Allow}, {0.2, Label::Deny}, {0.1, Label::Deny}};
    const auto c = calibrate(s);
    EXPECT_DOUBLE_EQ(c.t_eq, 0.5);
    EXPECT_EQ(c.fpr_at_eq, 0.0);
    EXPECT_EQ(c.fnr_at_eq, 0.0);
    EXPECT_LE(c.t_neg, c.t_eq);
    EXPECT_LT(c.t_eq, c.t_pos);
}

TEST(Calibrate, InterleavedScoresCrossAtHalf) {
    const std::vector<ScoredLabel> s{{1, Label::Allow}, {2, Label::Deny}, {3, Label::Allow}, {4, Label::Deny}};
    const auto c = calibrate(s);
    EXPECT_DOUBLE_EQ(c.t_eq, 2.5);
    EXPECT_DOUBLE_EQ(c.fpr_at_eq, 0.5);
    EXPECT_DOUBLE_EQ(c.fnr_at_eq, 0.5);
}

TEST(Calibrate, SingleClassWarns) {
    const auto c = calibrate({{0.2, Label::Allow}, {0.6, Label::Allow}});
    EXPECT_TRUE(c.single_class);
    EXPECT_DOUBLE_EQ(c.t_eq, 0.4);
    EXPECT_FALSE(c.warnings.empty());
    EXPECT_THROW(calibrate({}), Error);
}

TEST(Calibrate, EqualErrorPointIsMinimalOverExhaustiveSweep) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> n_pick(2, 14), level(0, 6);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<ScoredLabel> s;
        const int n = n_pick(rng);
        for (int i = 0; i < n; ++i) s.push_back({level(rng) * 0.25, coin(rng) ? Label::Allow : Label::Deny});
        s.push_back({level(rng) * 0.25, Label::Allow});
        s.push_back({level(rng) * 0.25, Label::Deny});
        const auto c = calibrate(s);
        const auto r = oracle::rates_at(s, c.t_eq);
        EXPECT_NEAR(std::abs(r.fpr - r.fnr), oracle::min_rate_gap(s), 1e-12) << "trial " << trial;
        EXPECT_LE(c.t_neg, c.t_eq);
        EXPECT_LT(c.t_eq, c.t_pos);
    }
}

TEST(Calibrate, RegionCapsHoldWhenNotClamped) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<ScoredLabel> s;
    for (int i = 0; i < 400; ++i) {
        const bool allow = i % 2 == 0;
        s.push_back({(allow ? 1.0 : -1.0) + noise(rng), allow ? Label::Allow : Label::Deny});
    }
    const auto c = calibrate(s);
    double neg_above = 0, neg = 0, pos_below = 0, pos = 0;
    for (const auto& x : s) {
        if (x.label == Label::Deny) {
            ++neg;
            neg_above += x.score >= c.t_pos ? 1 : 0;
        } else {
            ++pos;
            pos_below += x.score <= c.t_neg ? 1 : 0;
        }
    }
    EXPECT_LE(neg_above / neg, 0.05);
    EXPECT_LE(pos_below / pos, 0.05);
    EXPECT_GT(c.t_pos, c.t_eq);
    EXPECT_LT(c.t_neg, c.t_eq);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
    std::mt19937_64 rng(2);
    const auto o = oracle::random_observations(rng, 4, 4, 0.7);
    auto h = small_hyper();
    h.epochs = 0;
    const auto model = train(o, h);
    const auto g = InteractionGraph::build(o);
    EXPECT_EQ(model.layers.front(), initial_embeddings(g.node_count(), h.dim, h.init_scale, h.seed));
    EXPECT_EQ(model.loss_history.size(), 1u);
}

TEST(Train, DeterministicUnderSeed) {
    std::mt19937_64 rng(3);
    const auto o = oracle::random_observations(rng, 6, 6, 0.6);
    const auto a = train(o, small_hyper());
    const auto b = train(o, small_hyper());
    EXPECT_EQ(to_json(a), to_json(b));
}

TEST(Train, LossDecreasesOverall) {
    std::mt19937_64 rng(6);
    const auto model = train(oracle::random_observations(rng, 6, 6, 0.6), small_hyper());
    EXPECT_LT(model.loss_history.back(), model.loss_history.front());
}

TEST(Train, DivergenceCarriesDiagnostics) {
    std::mt19937_64 rng(7);
    auto h = small_hyper();
    h.optimizer = Optimizer::GradientDescent;
    h.learning_rate = 1e8;
    h.l2 = 1.0;
    h.epochs = 200;
    try {
        train(oracle::random_observations(rng, 4, 4, 0.8), h);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Divergence);
        EXPECT_FALSE(e.details().empty());
    }
}

TEST(Train, EmptyGraph) {
    try {
        train(InteractionGraph{}, small_hyper());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyGraph);
    }
}

TEST(Train, InvalidHyperparameters) {
    auto h = small_hyper();
    h.dim = 0;
    EXPECT_THROW(h.validate(), Error);
}

TEST(Predict, UnseenRequestIsNoRecommendation) {
    std::mt19937_64 rng(1);
    const auto model = train(oracle::random_observations(rng, 3, 3, 1.0), small_hyper());
    EXPECT_FALSE(model.predict("u0", {"q-new", "tool", "x"}));
    EXPECT_FALSE(model.predict("stranger", {"q0", "tool", "type0"}));
    EXPECT_TRUE(model.predict("u0", {"q0", "tool", "type0"}));
}

TEST(Predict, ZeroEmbeddingsScoreZero) {
    CfModel m;
    m.users = {"a"};
    m.requests = {{"q", "t", "d"}};
    m.final_embeddings = Matrix::Zero(2, 3);
    m.layers = {m.final_embeddings};
    m.calibration.t_eq = 0.3;
    m.index();
    const auto p = *m.predict("a", {"q", "t", "d"});
    EXPECT_EQ(p.score, 0.0);
    EXPECT_DOUBLE_EQ(p.confidence, 0.3);
    EXPECT_EQ(p.label, Label::Deny);
}

TEST(Predict, LabelAndRegionCoherent) {
    std::mt19937_64 rng(12);
    const auto model = train(oracle::random_observations(rng, 8, 8, 0.6), small_hyper());
    const auto& c = model.calibration;
    std::uniform_real_distribution<double> spread(-5, 5);
    for (int i = 0; i < 500; ++i) {
        const double s = i == 0 ? c.t_eq : spread(rng);
        const auto p = model.classify(s);
        EXPECT_EQ(p.label == Label::Allow, s > c.t_eq);
        if (p.region == Region::Positive) EXPECT_EQ(p.label, Label::Allow);
        if (p.region == Region::Negative) EXPECT_EQ(p.label, Label::Deny);
    }
    EXPECT_EQ(model.classify(c.t_eq).label, Label::Deny);
}

TEST(Predict, PlantedPreferencesRecoveredOnHeldOutCells) {
    SyntheticSpec spec;
    spec.users_per_group = 8;
    spec.allow_probability = {{1.0, 0.0}, {0.0, 1.0}};
    const auto syn = generate_synthetic(spec, 13);
    std::vector<Observation> train_obs;
    std::vector<PermissionDecision> held;
    std::size_t i = 0;
    for (const auto& x : syn.dataset.decisions) {
        if (++i % 7 == 0) {
            held.push_back(x);
        } else {
            train_obs.push_back({x.participant_id, x.key(), *binary_label(x.option)});
        }
    }
    const auto model = train(train_obs, Hyperparameters{});
    std::size_t right = 0, scored = 0;
    for (const auto& x : held) {
        const auto p = model.predict(x.participant_id, x.key());
        if (!p) continue;
        ++scored;
        right += p->label == syn.planted_label(x.participant_id, x.query_id) ? 1 : 0;
    }
    ASSERT_GT(scored, held.size() / 2);
    EXPECT_GE(static_cast<double>(right) / static_cast<double>(scored), 0.95);
}

TEST(Serialization, RoundTripPreservesPredictions) {
    std::mt19937_64 rng(30);
    const auto o = oracle::random_observations(rng, 5, 5, 0.7);
    const auto model = train(o, small_hyper());
    const auto back = model_from_json(json::parse(to_json(model).dump()));
    for (const auto& x : o) {
        EXPECT_EQ(*model.score(x.participant_id, x.request), *back.score(x.participant_id, x.request));
    }
    EXPECT_EQ(back.calibration.t_eq, model.calibration.t_eq);
    EXPECT_THROW(model_from_json(json{{"format", "other"}}), Error);
}

TEST(Sweep, GridSpansAndCountsAddUp) {
    const std::vector<ScoredLabel> s{{0.1, Label::Deny}, {0.4, Label::Allow}, {0.7, Label::Allow}};
    const auto grid = linear_grid(0.0, 1.0, 11);
    ASSERT_EQ(grid.size(), 11u);
    for (const auto& row : score_threshold_sweep(s, grid)) {
        const auto& c = row.metrics.counts;
        EXPECT_EQ(c.tp + c.fp + c.tn + c.fn, 3u);
    }
}
