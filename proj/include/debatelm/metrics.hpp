#pragma once

// Evaluation: perplexity, classification and entity-level tagging metrics, and the
// paired two-sided t-test used to compare seed-matched runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/error.hpp"

namespace debatelm {

/// exp(mean(nll)).
inline double perplexity(std::span<const double> nll) {
    if (nll.empty()) throw DataError("perplexity of an empty target set");
    double sum = 0.0;
    for (double x : nll) {
        if (!(x >= 0.0)) throw DataError("negative log-likelihoods must be non-negative");
        sum += x;
    }
    return std::exp(sum / static_cast<double>(nll.size()));
}

struct ClassScores {
    std::string label;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;  // gold count
    std::size_t tp = 0, fp = 0, fn = 0;
};

struct ClassificationMetrics {
    double accuracy = 0.0;
    std::vector<ClassScores> per_class;  // sorted by label
    double macro_f1 = 0.0;
    double weighted_f1 = 0.0;
    std::optional<double> binary_f1;  // F1 of the designated positive class
};

namespace detail {
inline void fill_prf(ClassScores& c) {
    c.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
    c.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
    const std::size_t denom = 2 * c.tp + c.fp + c.fn;
    c.f1 = denom ? static_cast<double>(2 * c.tp) / static_cast<double>(denom) : 0.0;
}
}  // namespace detail

/// Classes are the union of gold and predicted labels; undefined ratios count as 0.
inline ClassificationMetrics classification_metrics(std::span<const std::string> gold,
                                                    std::span<const std::string> predicted,
                                                    std::optional<std::string> positive = std::nullopt) {
    if (gold.size() != predicted.size()) throw DataError("gold and predicted labels are not aligned");
    if (gold.empty()) throw DataError("classification metrics need at least one example");
    std::map<std::string, ClassScores> by_label;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        auto& g = by_label[gold[i]];
        auto& p = by_label[predicted[i]];
        ++g.support;
        if (gold[i] == predicted[i]) {
            ++g.tp;
            ++correct;
        } else {
            ++g.fn;
            ++p.fp;
        }
    }
    ClassificationMetrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(gold.size());
    double f1_sum = 0.0, weighted = 0.0;
    for (auto& [label, c] : by_label) {
        c.label = label;
        detail::fill_prf(c);
        f1_sum += c.f1;
        weighted += c.f1 * static_cast<double>(c.support);
        m.per_class.push_back(c);
    }
    m.macro_f1 = f1_sum / static_cast<double>(m.per_class.size());
    m.weighted_f1 = weighted / static_cast<double>(gold.size());
    if (positive) {
        const auto it = by_label.find(*positive);
        m.binary_f1 = it == by_label.end() ? 0.0 : it->second.f1;
    }
    return m;
}

struct Span {
    std::string type;
    std::size_t begin = 0;  // first token
    std::size_t end = 0;    // one past the last token

    auto operator<=>(const Span&) const = default;
};

/// BIO spans.  An I- tag that does not continue a span of the same type opens a new one
/// (repaired to B-).  Tags other than O / B-x / I-x raise DataError listing positions.
inline std::vector<Span> extract_spans(std::span<const std::string> tags) {
    std::vector<std::size_t> bad;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const auto& t = tags[i];
        if (t == "O") continue;
        if (t.size() > 2 && (t[0] == 'B' || t[0] == 'I') && t[1] == '-') continue;
        bad.push_back(i);
    }
    if (!bad.empty()) {
        std::string msg = "malformed BIO tags at positions";
        for (auto i : bad) msg += " " + std::to_string(i) + " ('" + tags[i] + "')";
        throw DataError(msg);
    }
    std::vector<Span> spans;
    std::optional<Span> open;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const auto& t = tags[i];
        if (t == "O") {
            if (open) spans.push_back(*open), open.reset();
            continue;
        }
        const std::string type = t.substr(2);
        if (t[0] == 'I' && open && open->type == type) {
            open->end = i + 1;
            continue;
        }
        if (open) spans.push_back(*open);
        open = Span{type, i, i + 1};
    }
    if (open) spans.push_back(*open);
    return spans;
}

struct TaggingMetrics {
    double precision = 0.0;  // micro over entities
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<ClassScores> per_type;
    double macro_f1 = 0.0;  // unweighted over entity types seen in gold or prediction
    double token_accuracy = 0.0;
};

/// Entity-level exact-span matching: a predicted entity is correct iff type and both
/// boundaries equal a gold entity.
inline TaggingMetrics tagging_metrics(const std::vector<std::vector<std::string>>& gold,
                                      const std::vector<std::vector<std::string>>& predicted) {
    if (gold.size() != predicted.size()) throw DataError("gold and predicted sentences are not aligned");
    std::map<std::string, ClassScores> by_type;
    std::size_t tokens = 0, token_correct = 0;
    ClassScores total;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        if (gold[s].size() != predicted[s].size())
            throw DataError("sentence " + std::to_string(s) + ": gold and predicted tag counts differ");
        for (std::size_t i = 0; i < gold[s].size(); ++i) token_correct += gold[s][i] == predicted[s][i] ? 1 : 0;
        tokens += gold[s].size();
        const auto g = extract_spans(gold[s]);
        const auto p = extract_spans(predicted[s]);
        const std::set<Span> gs(g.begin(), g.end()), ps(p.begin(), p.end());
        for (const auto& sp : gs) {
            auto& c = by_type[sp.type];
            ++c.support;
            if (ps.count(sp)) ++c.tp, ++total.tp;
            else ++c.fn, ++total.fn;
        }
        for (const auto& sp : ps)
            if (!gs.count(sp)) ++by_type[sp.type].fp, ++total.fp;
    }
    TaggingMetrics m;
    detail::fill_prf(total);
    m.precision = total.precision;
    m.recall = total.recall;
    m.f1 = total.f1;
    double f1_sum = 0.0;
    for (auto& [type, c] : by_type) {
        c.label = type;
        detail::fill_prf(c);
        f1_sum += c.f1;
        m.per_type.push_back(c);
    }
    m.macro_f1 = m.per_type.empty() ? 1.0 : f1_sum / static_cast<double>(m.per_type.size());
    m.token_accuracy = tokens ? static_cast<double>(token_correct) / static_cast<double>(tokens) : 1.0;
    return m;
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
inline double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-16;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double f = d;
    for (int m = 1; m <= 10000; ++m) {
        const double md = m;
        double num = md * (b - md) * x / ((a + 2 * md - 1) * (a + 2 * md));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        f *= c * d;
        num = -(a + md) * (a + b + md) * x / ((a + 2 * md) * (a + 2 * md + 1));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = c * d;
        f *= delta;
        if (std::abs(delta - 1.0) < eps) break;
    }
    return std::exp(log_front) * f / a;
}

/// Two-sided tail probability P(|T| >= |t|) for Student's t with `dof` degrees of freedom.
inline double student_t_two_sided(double t, double dof) {
    if (std::isinf(t)) return 0.0;
    return incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

struct TTestResult {
    double t = 0.0;
    std::size_t dof = 0;
    double p = 1.0;
    bool zero_variance = false;  // differences have zero spread with nonzero mean
};

/// Paired two-sided t-test over d = a - b (paired by index/seed).
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DataError("paired t-test needs equal-length score lists");
    const std::size_t n = a.size();
    if (n < 2) throw DataError("paired t-test needs at least two pairs");
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    double mean = 0.0;
    for (double x : d) mean += x;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    TTestResult r;
    r.dof = n - 1;
    if (sd == 0.0) {
        if (mean == 0.0) return r;
        r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.p = 0.0;
        r.zero_variance = true;
        return r;
    }
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.p = student_t_two_sided(r.t, static_cast<double>(r.dof));
    return r;
}

/// Mean and sample (n-1) standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> v) {
    if (v.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

struct SeedScores {
    std::string model;
    std::string task;
    std::vector<std::uint64_t> seeds;
    std::vector<double> scores;
};

struct Significance {
    std::string baseline;
    TTestResult test;
};

inline nlohmann::json to_json_value(const TTestResult& r) {
    auto finite_or_string = [](double x) -> nlohmann::json {
        if (std::isfinite(x)) return x;
        return x > 0 ? "inf" : "-inf";
    };
    return {{"t", finite_or_string(r.t)}, {"dof", r.dof}, {"p", r.p}, {"zero_variance", r.zero_variance}};
}

}  // namespace debatelm
