#ifndef PERMPRED_CF_HPP
#define PERMPRED_CF_HPP

#include "permpred/core.hpp"
#include "permpred/metrics.hpp"

#include "json.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace permpred::cf {

using nlohmann::json;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// One signed observation: participant `participant_id` allowed or denied
/// `request`.
struct Observation {
    std::string participant_id;
    RequestKey request;
    Label label = Label::Allow;
};

/// Binary-labelled observations of `decisions`; one-time options are skipped.
inline std::vector<Observation> observations_from(const std::vector<PermissionDecision>& decisions) {
    std::vector<Observation> out;
    out.reserve(decisions.size());
    for (const auto& d : decisions) {
        if (auto l = binary_label(d.option)) out.push_back({d.participant_id, d.key(), *l});
    }
    return out;
}

struct Edge {
    std::size_t user = 0;
    std::size_t request = 0;
    int sign = 1;
};

// ---------------------------------------------------------------------------
// Interaction graph
// ---------------------------------------------------------------------------

/// Bipartite user/request graph. Node ids: users occupy [0, U), requests
/// occupy [U, U + R).
class InteractionGraph {
public:
    InteractionGraph() = default;

    /// Repeated identical observations collapse into one edge; conflicting
    /// labels for the same (user, request) are rejected.
    static InteractionGraph build(const std::vector<Observation>& observations) {
        std::map<std::string, std::size_t> users;
        std::map<RequestKey, std::size_t> requests;
        for (const auto& o : observations) {
            users.emplace(o.participant_id, 0);
            requests.emplace(o.request, 0);
        }
        InteractionGraph g;
        for (auto& [id, idx] : users) {
            idx = g.users_.size();
            g.users_.push_back(id);
        }
        for (auto& [key, idx] : requests) {
            idx = g.requests_.size();
            g.requests_.push_back(key);
        }
        g.user_index_ = std::move(users);
        g.request_index_ = std::move(requests);

        std::map<std::pair<std::size_t, std::size_t>, int> signs;
        for (const auto& o : observations) {
            const std::size_t u = g.user_index_.at(o.participant_id);
            const std::size_t r = g.request_index_.at(o.request);
            const int sign = o.label == Label::Allow ? 1 : -1;
            auto [it, inserted] = signs.emplace(std::make_pair(u, r), sign);
            if (!inserted && it->second != sign) {
                throw Error(ErrorCode::DuplicateObservation,
                            "conflicting labels for participant " + o.participant_id + " on " + o.request.str());
            }
        }
        g.degree_.assign(g.node_count(), 0);
        for (const auto& [pair, sign] : signs) {
            g.edges_.push_back({pair.first, pair.second, sign});
            ++g.degree_[pair.first];
            ++g.degree_[g.request_node(pair.second)];
        }
        return g;
    }

    std::size_t user_count() const { return users_.size(); }
    std::size_t request_count() const { return requests_.size(); }
    std::size_t node_count() const { return users_.size() + requests_.size(); }
    std::size_t request_node(std::size_t request) const { return users_.size() + request; }
    bool empty() const { return edges_.empty(); }

    const std::vector<std::string>& users() const { return users_; }
    const std::vector<RequestKey>& requests() const { return requests_; }
    const std::vector<Edge>& edges() const { return edges_; }
    const std::vector<std::size_t>& degrees() const { return degree_; }

    std::optional<std::size_t> user_index(const std::string& id) const {
        auto it = user_index_.find(id);
        if (it == user_index_.end()) return std::nullopt;
        return it->second;
    }
    std::optional<std::size_t> request_index(const RequestKey& key) const {
        auto it = request_index_.find(key);
        if (it == request_index_.end()) return std::nullopt;
        return it->second;
    }

    /// Symmetric normalization: A[i][j] = 1 / sqrt(deg(i) * deg(j)) for every
    /// edge, in both directions. Edge sign does not enter propagation.
    SparseMatrix normalized_adjacency() const {
        std::vector<Eigen::Triplet<double>> entries;
        entries.reserve(edges_.size() * 2);
        for (const auto& e : edges_) {
            const std::size_t i = e.user, j = request_node(e.request);
            const double w = 1.0 / std::sqrt(static_cast<double>(degree_[i]) * static_cast<double>(degree_[j]));
            entries.emplace_back(static_cast<int>(i), static_cast<int>(j), w);
            entries.emplace_back(static_cast<int>(j), static_cast<int>(i), w);
        }
        SparseMatrix a(static_cast<Eigen::Index>(node_count()), static_cast<Eigen::Index>(node_count()));
        a.setFromTriplets(entries.begin(), entries.end());
        return a;
    }

private:
    std::vector<std::string> users_;
    std::vector<RequestKey> requests_;
    std::map<std::string, std::size_t> user_index_;
    std::map<RequestKey, std::size_t> request_index_;
    std::vector<Edge> edges_;
    std::vector<std::size_t> degree_;
};

/// Throws InvalidArgument if any decision lacks a binary label.
inline InteractionGraph build_graph(const std::vector<PermissionDecision>& train) {
    for (const auto& d : train) {
        if (!binary_label(d.option)) {
            throw Error(ErrorCode::InvalidArgument, "CF training accepts only AlwaysShare/NeverShare decisions; got " +
                                                        std::string(to_string(d.option)) + " for " + d.key().str());
        }
    }
    return InteractionGraph::build(observations_from(train));
}

// ---------------------------------------------------------------------------
// Propagation
// ---------------------------------------------------------------------------

/// Mean of the stored layers, summed in layer order. Every code path that
/// needs final embeddings goes through here so the result is reproducible bit
/// for bit.
inline Matrix layer_mean(const std::vector<Matrix>& layers) {
    Matrix sum = layers.front();
    for (std::size_t k = 1; k < layers.size(); ++k) sum += layers[k];
    return sum / static_cast<double>(layers.size());
}

struct Propagation {
    std::vector<Matrix> layers;  // layers 0..L
    Matrix final;
};

inline Propagation propagate(const SparseMatrix& adjacency, const Matrix& layer0, int layer_count) {
    if (layer_count < 0) throw Error(ErrorCode::InvalidArgument, "layer count must be >= 0");
    Propagation p;
    p.layers.reserve(static_cast<std::size_t>(layer_count) + 1);
    p.layers.push_back(layer0);
    for (int k = 0; k < layer_count; ++k) {
        Matrix next = adjacency * p.layers.back();
        p.layers.push_back(std::move(next));
    }
    p.final = layer_mean(p.layers);
    return p;
}

inline Propagation propagate(const InteractionGraph& g, const Matrix& layer0, int layer_count) {
    return propagate(g.normalized_adjacency(), layer0, layer_count);
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

/// log(1 + exp(-z)) without overflow.
inline double softplus_neg(double z) { return std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

/// Mean logistic loss of sign * (user . request) over edges, plus
/// (l2 / 2) * ||E0||^2 on the layer-0 embeddings.
class Objective {
public:
    Objective(const InteractionGraph& graph, int layers, double l2)
        : graph_(graph), adjacency_(graph.normalized_adjacency()), layers_(layers), l2_(l2) {}

    double loss(const Matrix& e0) const {
        const Matrix fin = propagate(adjacency_, e0, layers_).final;
        return data_loss(fin) + 0.5 * l2_ * e0.squaredNorm();
    }

    /// Gradient with respect to layer-0 embeddings. The propagation operator
    /// is symmetric, so back-propagating is propagating the final-layer
    /// gradient with the same operator.
    Matrix gradient(const Matrix& e0, double* loss_out = nullptr) const {
        const Matrix fin = propagate(adjacency_, e0, layers_).final;
        const double inv_edges = 1.0 / static_cast<double>(graph_.edges().size());
        Matrix grad_final = Matrix::Zero(fin.rows(), fin.cols());
        double data = 0.0;
        for (const auto& e : graph_.edges()) {
            const auto u = static_cast<Eigen::Index>(e.user);
            const auto r = static_cast<Eigen::Index>(graph_.request_node(e.request));
            const double s = fin.row(u).dot(fin.row(r));
            const double y = static_cast<double>(e.sign);
            data += softplus_neg(y * s);
            // d/ds log(1 + exp(-y s)) = -y / (1 + exp(y s))
            const double g = -y / (1.0 + std::exp(y * s)) * inv_edges;
            grad_final.row(u) += g * fin.row(r);
            grad_final.row(r) += g * fin.row(u);
        }
        if (loss_out) *loss_out = data * inv_edges + 0.5 * l2_ * e0.squaredNorm();
        Matrix grad = propagate(adjacency_, grad_final, layers_).final;
        grad += l2_ * e0;
        return grad;
    }

private:
    double data_loss(const Matrix& fin) const {
        double total = 0.0;
        for (const auto& e : graph_.edges()) {
            const double s = fin.row(static_cast<Eigen::Index>(e.user))
                                 .dot(fin.row(static_cast<Eigen::Index>(graph_.request_node(e.request))));
            total += softplus_neg(static_cast<double>(e.sign) * s);
        }
        return total / static_cast<double>(graph_.edges().size());
    }

    const InteractionGraph& graph_;
    SparseMatrix adjacency_;
    int layers_;
    double l2_;
};

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct ScoredLabel {
    double score = 0.0;
    Label label = Label::Allow;
};

struct Calibration {
    double t_eq = 0.0;
    double t_pos = std::numeric_limits<double>::infinity();
    double t_neg = -std::numeric_limits<double>::infinity();
    double fpr_at_eq = 0.0;
    double fnr_at_eq = 0.0;
    std::size_t samples = 0;
    bool single_class = false;
    std::vector<std::string> warnings;
};

/// FPR/FNR when predicting Allow iff score > threshold.
inline std::pair<double, double> error_rates(const std::vector<ScoredLabel>& scored, double threshold) {
    std::size_t pos = 0, neg = 0, fp = 0, fn = 0;
    for (const auto& s : scored) {
        if (s.label == Label::Allow) {
            ++pos;
            if (!(s.score > threshold)) ++fn;
        } else {
            ++neg;
            if (s.score > threshold) ++fp;
        }
    }
    const double fpr = neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0;
    const double fnr = pos ? static_cast<double>(fn) / static_cast<double>(pos) : 0.0;
    return {fpr, fnr};
}

/// t_eq: midpoint of the score interval minimizing |FPR - FNR| (ties broken by
/// the smaller FPR + FNR, then the lower interval). t_pos: the smallest
/// observed score s with FPR(score >= s) <= fpr_cap. t_neg: the largest
/// observed score s with FNR(score <= s) <= fnr_cap. Both are clamped so that
/// t_neg <= t_eq < t_pos.
inline Calibration calibrate(const std::vector<ScoredLabel>& scored, double fpr_cap = 0.05, double fnr_cap = 0.05) {
    if (scored.empty()) throw Error(ErrorCode::EmptyInput, "calibration set is empty");
    Calibration c;
    c.samples = scored.size();

    std::vector<ScoredLabel> sorted = scored;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    std::vector<double> values;
    std::vector<std::size_t> pos_at, neg_at;  // counts per distinct value
    for (const auto& s : sorted) {
        if (values.empty() || values.back() != s.score) {
            values.push_back(s.score);
            pos_at.push_back(0);
            neg_at.push_back(0);
        }
        (s.label == Label::Allow ? pos_at : neg_at).back() += 1;
    }
    std::size_t total_pos = 0, total_neg = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        total_pos += pos_at[i];
        total_neg += neg_at[i];
    }
    const std::size_t m = values.size();

    if (total_pos == 0 || total_neg == 0) {
        c.single_class = true;
        c.t_eq = 0.5 * (values.front() + values.back());
        c.warnings.push_back("calibration set contains a single class; t_eq set to the midpoint of the score range");
    } else {
        // Interval i (0..m): thresholds in [values[i-1], values[i]); interval 0
        // lies below every score, interval m above every score.
        std::vector<double> gap(m + 1), sum(m + 1);
        std::size_t fn = 0, fp = total_neg;
        for (std::size_t i = 0; i <= m; ++i) {
            if (i > 0) {
                fn += pos_at[i - 1];
                fp -= neg_at[i - 1];
            }
            const double fpr = static_cast<double>(fp) / static_cast<double>(total_neg);
            const double fnr = static_cast<double>(fn) / static_cast<double>(total_pos);
            gap[i] = std::abs(fpr - fnr);
            sum[i] = fpr + fnr;
        }
        const double best_gap = *std::min_element(gap.begin(), gap.end());
        std::size_t best_start = 0, best_end = 0;
        double best_sum = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i <= m;) {
            if (gap[i] != best_gap) {
                ++i;
                continue;
            }
            std::size_t j = i;
            while (j + 1 <= m && gap[j + 1] == best_gap && sum[j + 1] == sum[i]) ++j;
            if (sum[i] < best_sum) {
                best_sum = sum[i];
                best_start = i;
                best_end = j;
            }
            i = j + 1;
        }
        const double spread = values.back() - values.front();
        const double pad = spread > 0.0 ? 0.5 * spread / static_cast<double>(m) : 0.5;
        const double lo = best_start == 0 ? values.front() - pad : values[best_start - 1];
        const double hi = best_end == m ? values.back() + pad : values[best_end];
        c.t_eq = 0.5 * (lo + hi);
    }

    // Positive region.
    {
        std::size_t neg_at_or_above = total_neg;
        for (std::size_t i = 0; i < m; ++i) {
            const double fpr = total_neg ? static_cast<double>(neg_at_or_above) / static_cast<double>(total_neg) : 0.0;
            if (fpr <= fpr_cap) {
                c.t_pos = values[i];
                break;
            }
            neg_at_or_above -= neg_at[i];
        }
    }
    // Negative region.
    {
        std::size_t pos_at_or_below = total_pos;
        for (std::size_t i = m; i-- > 0;) {
            const double fnr = total_pos ? static_cast<double>(pos_at_or_below) / static_cast<double>(total_pos) : 0.0;
            if (fnr <= fnr_cap) {
                c.t_neg = values[i];
                break;
            }
            pos_at_or_below -= pos_at[i];
        }
    }
    if (c.t_pos <= c.t_eq) c.t_pos = std::nextafter(c.t_eq, std::numeric_limits<double>::infinity());
    if (c.t_neg > c.t_eq) c.t_neg = c.t_eq;

    std::tie(c.fpr_at_eq, c.fnr_at_eq) = error_rates(scored, c.t_eq);
    return c;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class Optimizer { Adam, GradientDescent };

struct Hyperparameters {
    int dim = 32;
    int layers = 2;
    double learning_rate = 0.05;
    int epochs = 300;
    double l2 = 1e-4;
    double init_scale = 0.1;
    Optimizer optimizer = Optimizer::Adam;
    std::uint64_t seed = 0;
    /// Calibrate on a held-out slice of the training edges instead of the
    /// training edges themselves.
    bool heldout_calibration = false;
    double heldout_fraction = 0.1;
    double fpr_cap = 0.05;
    double fnr_cap = 0.05;

    void validate() const {
        auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
        if (dim < 1) fail("cf dim must be >= 1");
        if (layers < 0) fail("cf layers must be >= 0");
        if (epochs < 0) fail("cf epochs must be >= 0");
        if (!(l2 >= 0.0)) fail("cf l2 must be >= 0");
        if (!(init_scale >= 0.0)) fail("cf init_scale must be >= 0");
        if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) fail("cf heldout_fraction must be in (0,1)");
        if (!(fpr_cap > 0.0 && fpr_cap < 1.0) || !(fnr_cap > 0.0 && fnr_cap < 1.0)) fail("cf caps must be in (0,1)");
    }
};

inline std::string_view to_string(Optimizer o) { return o == Optimizer::Adam ? "adam" : "gd"; }

inline json to_json(const Hyperparameters& h) {
    return {{"dim", h.dim},
            {"layers", h.layers},
            {"learning_rate", h.learning_rate},
            {"epochs", h.epochs},
            {"l2", h.l2},
            {"init_scale", h.init_scale},
            {"optimizer", std::string(to_string(h.optimizer))},
            {"seed", h.seed},
            {"heldout_calibration", h.heldout_calibration},
            {"heldout_fraction", h.heldout_fraction},
            {"fpr_cap", h.fpr_cap},
            {"fnr_cap", h.fnr_cap}};
}

inline Hyperparameters hyperparameters_from_json(const json& j) {
    Hyperparameters h;
    h.dim = j.value("dim", h.dim);
    h.layers = j.value("layers", h.layers);
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.epochs = j.value("epochs", h.epochs);
    h.l2 = j.value("l2", h.l2);
    h.init_scale = j.value("init_scale", h.init_scale);
    h.optimizer = j.value("optimizer", std::string("adam")) == "gd" ? Optimizer::GradientDescent : Optimizer::Adam;
    h.seed = j.value("seed", h.seed);
    h.heldout_calibration = j.value("heldout_calibration", h.heldout_calibration);
    h.heldout_fraction = j.value("heldout_fraction", h.heldout_fraction);
    h.fpr_cap = j.value("fpr_cap", h.fpr_cap);
    h.fnr_cap = j.value("fnr_cap", h.fnr_cap);
    return h;
}

enum class Region { Positive, Negative, Uncertain };

inline std::string_view to_string(Region r) {
    switch (r) {
    case Region::Positive: return "Positive";
    case Region::Negative: return "Negative";
    case Region::Uncertain: return "Uncertain";
    }
    return "";
}

struct CfPrediction {
    double score = 0.0;
    Label label = Label::Deny;
    double confidence = 0.0;
    Region region = Region::Uncertain;
};

/// Trained embeddings plus calibrated thresholds. A default-constructed model
/// knows no users or requests and answers NoRecommendation (nullopt) for
/// everything.
class CfModel {
public:
    Hyperparameters hyper;
    std::vector<std::string> users;
    std::vector<RequestKey> requests;
    std::vector<Matrix> layers;
    Matrix final_embeddings;
    Calibration calibration;
    std::vector<double> loss_history;
    std::size_t edge_count = 0;

    bool empty() const { return users.empty() || requests.empty(); }

    void index() {
        user_index_.clear();
        request_index_.clear();
        for (std::size_t i = 0; i < users.size(); ++i) user_index_[users[i]] = i;
        for (std::size_t i = 0; i < requests.size(); ++i) request_index_[requests[i]] = i;
    }

    bool knows_user(const std::string& id) const { return user_index_.count(id) > 0; }
    bool knows_request(const RequestKey& key) const { return request_index_.count(key) > 0; }

    std::optional<double> score(const std::string& user, const RequestKey& request) const {
        auto u = user_index_.find(user);
        auto r = request_index_.find(request);
        if (u == user_index_.end() || r == request_index_.end()) return std::nullopt;
        const auto request_row = static_cast<Eigen::Index>(users.size() + r->second);
        return final_embeddings.row(static_cast<Eigen::Index>(u->second)).dot(final_embeddings.row(request_row));
    }

    /// Label, confidence and region for a raw score under this model's thresholds.
    CfPrediction classify(double s) const {
        CfPrediction p;
        p.score = s;
        p.label = s > calibration.t_eq ? Label::Allow : Label::Deny;
        p.confidence = std::abs(s - calibration.t_eq);
        if (s >= calibration.t_pos) {
            p.region = Region::Positive;
        } else if (s <= calibration.t_neg) {
            p.region = Region::Negative;
        } else {
            p.region = Region::Uncertain;
        }
        return p;
    }

    /// nullopt = NoRecommendation (user or request unseen in training).
    std::optional<CfPrediction> predict(const std::string& user, const RequestKey& request) const {
        auto s = score(user, request);
        if (!s) return std::nullopt;
        return classify(*s);
    }

private:
    std::map<std::string, std::size_t> user_index_;
    std::map<RequestKey, std::size_t> request_index_;
};

struct TrainOptions {
    /// Called after every epoch with (epoch, loss); may be empty.
    std::function<void(int, double)> on_epoch;
};

/// Seeded normal initialization of the layer-0 embeddings.
inline Matrix initial_embeddings(std::size_t nodes, int dim, double scale, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, scale > 0.0 ? scale : 1.0);
    Matrix e(static_cast<Eigen::Index>(nodes), dim);
    for (Eigen::Index i = 0; i < e.rows(); ++i) {
        for (Eigen::Index k = 0; k < e.cols(); ++k) e(i, k) = scale > 0.0 ? normal(rng) : 0.0;
    }
    return e;
}

/// Scores of every edge of `graph` under `model`, paired with the edge label.
inline std::vector<ScoredLabel> edge_scores(const CfModel& model, const InteractionGraph& graph) {
    std::vector<ScoredLabel> out;
    out.reserve(graph.edges().size());
    for (const auto& e : graph.edges()) {
        const auto s = model.score(graph.users()[e.user], graph.requests()[e.request]);
        out.push_back({*s, e.sign > 0 ? Label::Allow : Label::Deny});
    }
    return out;
}

/// Full-batch training of the layer-0 embeddings. Does not calibrate.
inline CfModel fit_embeddings(const InteractionGraph& graph, const Hyperparameters& hyper,
                              const TrainOptions& options = {}) {
    hyper.validate();
    if (graph.empty()) throw Error(ErrorCode::EmptyGraph, "cannot train CF on an empty interaction graph");

    const Objective objective(graph, hyper.layers, hyper.l2);
    Matrix e0 = initial_embeddings(graph.node_count(), hyper.dim, hyper.init_scale, hyper.seed);
    Matrix m1 = Matrix::Zero(e0.rows(), e0.cols());
    Matrix m2 = Matrix::Zero(e0.rows(), e0.cols());
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    CfModel model;
    model.hyper = hyper;
    model.loss_history.reserve(static_cast<std::size_t>(hyper.epochs) + 1);
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        double loss = 0.0;
        const Matrix grad = objective.gradient(e0, &loss);
        if (!std::isfinite(loss) || !grad.allFinite()) {
            std::ostringstream msg;
            msg << "CF training diverged at epoch " << epoch << " (loss " << loss << ")";
            std::vector<std::string> diag;
            for (std::size_t i = 0; i < model.loss_history.size(); ++i) {
                diag.push_back("epoch " + std::to_string(i) + ": loss " + std::to_string(model.loss_history[i]));
            }
            throw Error(ErrorCode::Divergence, msg.str(), std::move(diag));
        }
        model.loss_history.push_back(loss);
        if (options.on_epoch) options.on_epoch(epoch, loss);
        if (hyper.optimizer == Optimizer::Adam) {
            m1 = beta1 * m1 + (1.0 - beta1) * grad;
            m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseProduct(grad);
            const double c1 = 1.0 - std::pow(beta1, epoch + 1);
            const double c2 = 1.0 - std::pow(beta2, epoch + 1);
            e0.array() -= hyper.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
        } else {
            e0 -= hyper.learning_rate * grad;
        }
    }
    const double final_loss = objective.loss(e0);
    if (!std::isfinite(final_loss)) {
        throw Error(ErrorCode::Divergence, "CF training diverged after the final update");
    }
    model.loss_history.push_back(final_loss);

    Propagation p = propagate(graph, e0, hyper.layers);
    model.users = graph.users();
    model.requests = graph.requests();
    model.layers = std::move(p.layers);
    model.final_embeddings = std::move(p.final);
    model.edge_count = graph.edges().size();
    model.index();
    return model;
}

/// Trains on `observations` and calibrates thresholds, either on the training
/// edges or (hyper.heldout_calibration) on a seeded held-out slice.
inline CfModel train(const std::vector<Observation>& observations, const Hyperparameters& hyper,
                     const TrainOptions& options = {}) {
    hyper.validate();
    std::vector<Observation> fit = observations, held;
    if (hyper.heldout_calibration) {
        std::vector<std::size_t> order(observations.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 rng(hyper.seed ^ 0xCA11B7A7EULL);
        std::shuffle(order.begin(), order.end(), rng);
        const auto n_held = static_cast<std::size_t>(hyper.heldout_fraction * static_cast<double>(order.size()));
        fit.clear();
        for (std::size_t i = 0; i < order.size(); ++i) {
            (i < n_held ? held : fit).push_back(observations[order[i]]);
        }
    }
    const InteractionGraph graph = InteractionGraph::build(fit);
    CfModel model = fit_embeddings(graph, hyper, options);

    std::vector<ScoredLabel> calib;
    std::vector<std::string> notes;
    if (hyper.heldout_calibration) {
        bool has_pos = false, has_neg = false;
        for (const auto& o : held) {
            if (auto s = model.score(o.participant_id, o.request)) {
                calib.push_back({*s, o.label});
                (o.label == Label::Allow ? has_pos : has_neg) = true;
            }
        }
        if (!has_pos || !has_neg) {
            notes.push_back("held-out calibration slice lacks a class; calibrating on training edges");
            calib.clear();
        }
    }
    if (calib.empty()) calib = edge_scores(model, graph);
    model.calibration = calibrate(calib, hyper.fpr_cap, hyper.fnr_cap);
    for (auto& n : notes) model.calibration.warnings.push_back(std::move(n));
    return model;
}

/// Same as train() on a prebuilt graph (training-edge calibration only).
inline CfModel train(const InteractionGraph& graph, const Hyperparameters& hyper, const TrainOptions& options = {}) {
    CfModel model = fit_embeddings(graph, hyper, options);
    model.calibration = calibrate(edge_scores(model, graph), hyper.fpr_cap, hyper.fnr_cap);
    return model;
}

/// Fraction of `scores` that fall in the Positive or Negative region.
inline double region_coverage(const CfModel& model, const std::vector<double>& scores) {
    if (scores.empty()) return 0.0;
    std::size_t n = 0;
    for (double s : scores) n += model.classify(s).region != Region::Uncertain ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Score-threshold sweep
// ---------------------------------------------------------------------------

struct ScoreSweepRow {
    double threshold = 0.0;
    MetricRow metrics;
};

/// Metrics when predicting Allow iff score > threshold, for each grid value.
inline std::vector<ScoreSweepRow> score_threshold_sweep(const std::vector<ScoredLabel>& scored,
                                                        const std::vector<double>& grid) {
    std::vector<ScoreSweepRow> rows;
    for (double t : grid) {
        ConfusionCounts c;
        for (const auto& s : scored) c.add(s.label, s.score > t ? Label::Allow : Label::Deny);
        rows.push_back({t, compute_metrics(c)});
    }
    return rows;
}

/// `steps` evenly spaced thresholds spanning the observed scores.
inline std::vector<double> linear_grid(double lo, double hi, std::size_t steps) {
    std::vector<double> grid;
    if (steps < 2 || !(hi > lo)) {
        grid.push_back(lo);
        return grid;
    }
    for (std::size_t i = 0; i < steps; ++i) {
        grid.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(steps - 1));
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

namespace detail {
inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double from_nullable(const json& j, double fallback) { return j.is_null() ? fallback : j.get<double>(); }
} // namespace detail

inline json to_json(const CfModel& m) {
    json users = m.users;
    json requests = json::array();
    for (const auto& r : m.requests) {
        requests.push_back({{"query_id", r.query_id}, {"tool_id", r.tool_id}, {"data_type_id", r.data_type_id}});
    }
    json layers = json::array();
    for (const auto& layer : m.layers) {
        json rows = json::array();
        for (Eigen::Index i = 0; i < layer.rows(); ++i) {
            rows.push_back(std::vector<double>(layer.row(i).data(), layer.row(i).data() + layer.cols()));
        }
        layers.push_back(rows);
    }
    const auto& c = m.calibration;
    return {{"format", "permpred.cf-model"},
            {"version", kModelFormatVersion},
            {"hyperparameters", to_json(m.hyper)},
            {"users", users},
            {"requests", requests},
            {"layers", layers},
            {"thresholds",
             {{"t_eq", c.t_eq}, {"t_pos", detail::finite_or_null(c.t_pos)}, {"t_neg", detail::finite_or_null(c.t_neg)}}},
            {"calibration",
             {{"fpr_at_eq", c.fpr_at_eq},
              {"fnr_at_eq", c.fnr_at_eq},
              {"samples", c.samples},
              {"single_class", c.single_class},
              {"warnings", c.warnings}}},
            {"edge_count", m.edge_count},
            {"loss_history", m.loss_history}};
}

inline CfModel model_from_json(const json& j) {
    try {
        if (j.at("format").get<std::string>() != "permpred.cf-model") {
            throw Error(ErrorCode::SchemaError, "not a CF model document");
        }
        if (j.at("version").get<int>() != kModelFormatVersion) {
            throw Error(ErrorCode::SchemaError, "unsupported CF model version " + j.at("version").dump());
        }
        CfModel m;
        m.hyper = hyperparameters_from_json(j.at("hyperparameters"));
        m.users = j.at("users").get<std::vector<std::string>>();
        for (const auto& r : j.at("requests")) {
            m.requests.push_back({r.at("query_id").get<std::string>(), r.at("tool_id").get<std::string>(),
                                  r.at("data_type_id").get<std::string>()});
        }
        const auto nodes = static_cast<Eigen::Index>(m.users.size() + m.requests.size());
        for (const auto& layer : j.at("layers")) {
            Matrix mat(nodes, m.hyper.dim);
            if (static_cast<Eigen::Index>(layer.size()) != nodes) {
                throw Error(ErrorCode::SchemaError, "layer row count does not match node count");
            }
            for (Eigen::Index i = 0; i < nodes; ++i) {
                const auto row = layer.at(static_cast<std::size_t>(i)).get<std::vector<double>>();
                if (static_cast<int>(row.size()) != m.hyper.dim) {
                    throw Error(ErrorCode::SchemaError, "embedding width does not match dim");
                }
                for (int k = 0; k < m.hyper.dim; ++k) mat(i, k) = row[static_cast<std::size_t>(k)];
            }
            m.layers.push_back(std::move(mat));
        }
        if (!m.layers.empty()) m.final_embeddings = layer_mean(m.layers);
        const auto& t = j.at("thresholds");
        m.calibration.t_eq = t.at("t_eq").get<double>();
        m.calibration.t_pos = detail::from_nullable(t.at("t_pos"), std::numeric_limits<double>::infinity());
        m.calibration.t_neg = detail::from_nullable(t.at("t_neg"), -std::numeric_limits<double>::infinity());
        if (auto it = j.find("calibration"); it != j.end()) {
            m.calibration.fpr_at_eq = it->value("fpr_at_eq", 0.0);
            m.calibration.fnr_at_eq = it->value("fnr_at_eq", 0.0);
            m.calibration.samples = it->value("samples", std::size_t{0});
            m.calibration.single_class = it->value("single_class", false);
            m.calibration.warnings = it->value("warnings", std::vector<std::string>{});
        }
        m.edge_count = j.value("edge_count", std::size_t{0});
        m.loss_history = j.value("loss_history", std::vector<double>{});
        m.index();
        return m;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::SchemaError, std::string("malformed CF model document: ") + e.what());
    }
}

} // namespace permpred::cf

#endif // PERMPRED_CF_HPP
