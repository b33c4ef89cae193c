#pragma once

// AUROC, seed aggregation and Welch's t-test.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "ehrtext/errors.hpp"

namespace ehrtext::eval {

// Mann-Whitney statistic: (concordant + 0.5 * tied) / (P * N) over all
// positive-negative pairs, computed from ranks with tie groups in O(n log n).
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ContractViolation("auroc: scores and labels differ in length");
    double positives = 0.0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw InvalidInput("auroc: labels must be 0 or 1");
        positives += y;
    }
    const double negatives = static_cast<double>(labels.size()) - positives;
    if (positives == 0.0 || negatives == 0.0) {
        throw UndefinedAuc("auroc: need at least one positive and one negative label");
    }
    for (double s : scores) {
        if (std::isnan(s)) throw InvalidInput("auroc: NaN score");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Twice the concordant count plus ties, kept integral so the result is exact.
    long long doubled = 0;
    long long negatives_below = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        long long pos = 0;
        long long neg = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? pos : neg) += 1;
            ++j;
        }
        doubled += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    return static_cast<double>(doubled) / (2.0 * positives * negatives);
}

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;  // sample (n - 1) standard deviation; 0 for one value
};

inline Summary aggregate(const std::vector<double>& values) {
    if (values.empty()) throw InvalidInput("aggregate: empty list");
    Summary s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    const bool constant = std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); });
    if (constant) {
        s.mean = values.front();
    } else if (values.size() > 1) {
        double sq = 0.0;
        for (double v : values) sq += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
    }
    return s;
}

// "0.809 (±0.016)"
inline std::string format_mean_std(double mean, double stddev) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f (±%.3f)", mean, stddev);
    return buf;
}

struct TTest {
    double t = 0.0;
    double p = 1.0;
    double df = 0.0;
};

// Two-tailed Welch test with Welch-Satterthwaite degrees of freedom. When both
// samples have zero variance the result is p = 1 for equal means and p = 0
// otherwise, with t = 0 or signed infinity.
inline TTest welch_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) throw InvalidInput("welch_ttest: each sample needs at least two values");
    const Summary sa = aggregate(a);
    const Summary sb = aggregate(b);
    const double va = sa.stddev * sa.stddev / static_cast<double>(a.size());
    const double vb = sb.stddev * sb.stddev / static_cast<double>(b.size());
    const double diff = sa.mean - sb.mean;
    TTest r;
    if (va + vb == 0.0) {
        if (diff == 0.0) return r;
        r.t = diff > 0 ? INFINITY : -INFINITY;
        r.p = 0.0;
        return r;
    }
    r.t = diff / std::sqrt(va + vb);
    r.df = (va + vb) * (va + vb) /
           (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
    boost::math::students_t dist(r.df);
    r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
    r.p = std::min(1.0, r.p);
    return r;
}

}  // namespace ehrtext::eval
