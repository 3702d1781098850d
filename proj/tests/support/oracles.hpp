// Independent reference computations used to check the engine.
#pragma once

#include "permpred/cf.hpp"
#include "permpred/icl.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <filesystem>
#include <limits>
#include <random>
#include <set>
#include <vector>

namespace oracle {

using permpred::Label;
using permpred::cf::Matrix;

/// Dense symmetric-normalized adjacency built straight from the edge list.
inline Matrix dense_adjacency(const permpred::cf::InteractionGraph& g) {
    const auto n = static_cast<Eigen::Index>(g.node_count());
    Matrix a = Matrix::Zero(n, n);
    for (const auto& e : g.edges()) {
        const auto u = static_cast<Eigen::Index>(e.user);
        const auto r = static_cast<Eigen::Index>(g.request_node(e.request));
        a(u, r) = 1.0;
        a(r, u) = 1.0;
    }
    Eigen::VectorXd deg = a.rowwise().sum();
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (a(i, j) != 0.0) a(i, j) /= std::sqrt(deg(i) * deg(j));
        }
    }
    return a;
}

/// Layer mean of dense propagation, loop form.
inline Matrix dense_final(const permpred::cf::InteractionGraph& g, const Matrix& e0, int layers) {
    const Matrix a = dense_adjacency(g);
    Matrix sum = e0;
    Matrix cur = e0;
    for (int l = 0; l < layers; ++l) {
        Matrix next = Matrix::Zero(cur.rows(), cur.cols());
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            for (Eigen::Index j = 0; j < a.cols(); ++j) {
                if (a(i, j) != 0.0) next.row(i) += a(i, j) * cur.row(j);
            }
        }
        cur = next;
        sum += cur;
    }
    return sum / static_cast<double>(layers + 1);
}

/// Central finite-difference gradient of `loss` at `x`.
template <typename F>
Matrix finite_difference(F&& loss, const Matrix& x, double h = 1e-6) {
    Matrix g(x.rows(), x.cols());
    Matrix probe = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            const double orig = probe(i, k);
            probe(i, k) = orig + h;
            const double up = loss(probe);
            probe(i, k) = orig - h;
            const double down = loss(probe);
            probe(i, k) = orig;
            g(i, k) = (up - down) / (2.0 * h);
        }
    }
    return g;
}

struct Rates {
    double fpr;
    double fnr;
};

/// Allow iff score > t, counted directly.
inline Rates rates_at(const std::vector<permpred::cf::ScoredLabel>& s, double t) {
    double fp = 0, tn = 0, fn = 0, tp = 0;
    for (const auto& x : s) {
        const bool allow = x.score > t;
        if (x.label == Label::Allow) {
            (allow ? tp : fn) += 1;
        } else {
            (allow ? fp : tn) += 1;
        }
    }
    return {fp + tn > 0 ? fp / (fp + tn) : 0.0, fn + tp > 0 ? fn / (fn + tp) : 0.0};
}

/// Smallest |FPR - FNR| over every distinct decision the scores allow: one
/// threshold below all scores, one between each adjacent pair, one above.
inline double min_rate_gap(const std::vector<permpred::cf::ScoredLabel>& s) {
    std::set<double> distinct;
    for (const auto& x : s) distinct.insert(x.score);
    std::vector<double> v(distinct.begin(), distinct.end());
    std::vector<double> candidates{v.front() - 1.0, v.back() + 1.0};
    for (std::size_t i = 0; i + 1 < v.size(); ++i) candidates.push_back(0.5 * (v[i] + v[i + 1]));
    double best = std::numeric_limits<double>::infinity();
    for (double t : candidates) {
        const auto r = rates_at(s, t);
        best = std::min(best, std::abs(r.fpr - r.fnr));
    }
    return best;
}

/// Random graph: `users` x `requests` with each pair present with probability p.
inline std::vector<permpred::cf::Observation> random_observations(std::mt19937_64& rng, int users, int requests,
                                                                   double p) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<permpred::cf::Observation> out;
    for (int u = 0; u < users; ++u) {
        for (int r = 0; r < requests; ++r) {
            if (unit(rng) >= p) continue;
            out.push_back({"u" + std::to_string(u),
                           {"q" + std::to_string(r), "tool", "type" + std::to_string(r)},
                           unit(rng) < 0.5 ? Label::Allow : Label::Deny});
        }
    }
    if (out.empty()) out.push_back({"u0", {"q0", "tool", "type0"}, Label::Allow});
    return out;
}

} // namespace oracle

namespace testing_support {

/// Replies with the scripted texts in order, then repeats the last one.
class SequenceProvider : public permpred::icl::TextProvider {
public:
    explicit SequenceProvider(std::vector<std::string> replies) : replies_(std::move(replies)) {}
    std::string complete(const std::string& prompt) override {
        std::lock_guard lock(mutex_);
        prompts.push_back(prompt);
        const std::size_t i = std::min(calls_++, replies_.size() - 1);
        return replies_[i];
    }
    std::string name() const override { return "sequence"; }
    std::size_t calls() const { return calls_; }
    std::vector<std::string> prompts;

private:
    std::mutex mutex_;
    std::vector<std::string> replies_;
    std::size_t calls_ = 0;
};

class DownProvider : public permpred::icl::TextProvider {
public:
    std::string complete(const std::string&) override {
        ++calls;
        throw permpred::Error(permpred::ErrorCode::ProviderUnavailable, "connection refused");
    }
    std::string name() const override { return "down"; }
    std::atomic<int> calls{0};
};

/// Records every prompt and delegates to a mock policy.
class RecordingProvider : public permpred::icl::TextProvider {
public:
    explicit RecordingProvider(permpred::icl::MockPolicy policy) : inner_(std::move(policy)) {}
    std::string complete(const std::string& prompt) override {
        {
            std::lock_guard lock(mutex_);
            prompts.push_back(prompt);
        }
        return inner_.complete(prompt);
    }
    std::string name() const override { return "recording"; }
    std::vector<std::string> prompts;

private:
    std::mutex mutex_;
    permpred::icl::MockProvider inner_;
};

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / ("permpred-test-" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

} // namespace testing_support
