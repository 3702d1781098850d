#ifndef PERMPRED_METRICS_HPP
#define PERMPRED_METRICS_HPP

#include "permpred/core.hpp"

#include "json.hpp"

#include <cmath>
#include <cstddef>
#include <optional>

namespace permpred {

/// Positive = permission granted.
struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    void add(Label truth, Label predicted) {
        if (truth == Label::Allow) {
            (predicted == Label::Allow ? tp : fn) += 1;
        } else {
            (predicted == Label::Allow ? fp : tn) += 1;
        }
    }
    std::size_t total() const { return tp + fp + tn + fn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
    friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
    bool operator==(const ConfusionCounts&) const = default;
};

/// Metric row; a ratio with an empty denominator is absent rather than 0.
struct MetricRow {
    ConfusionCounts counts;
    std::optional<double> accuracy;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
    std::optional<double> fpr;
    std::optional<double> fnr;
};

inline std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

inline MetricRow compute_metrics(const ConfusionCounts& c) {
    MetricRow m;
    m.counts = c;
    m.accuracy = ratio(c.tp + c.tn, c.total());
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.recall = ratio(c.tp, c.tp + c.fn);
    m.fpr = ratio(c.fp, c.fp + c.tn);
    m.fnr = ratio(c.fn, c.fn + c.tp);
    if (m.precision && m.recall && (*m.precision + *m.recall) > 0.0) {
        m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
    } else if (m.precision && m.recall) {
        m.f1 = 0.0;
    }
    return m;
}

inline nlohmann::json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const ConfusionCounts& c) {
    return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

inline nlohmann::json to_json(const MetricRow& m) {
    return {{"counts", to_json(m.counts)},   {"accuracy", opt_json(m.accuracy)}, {"precision", opt_json(m.precision)},
            {"recall", opt_json(m.recall)},   {"f1", opt_json(m.f1)},             {"fpr", opt_json(m.fpr)},
            {"fnr", opt_json(m.fnr)}};
}

} // namespace permpred

#endif // PERMPRED_METRICS_HPP
