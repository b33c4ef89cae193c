#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ehrtext/numerics/random.hpp"
#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::testing {

inline num::Var<double> random_var(num::Rng& rng, num::Index rows, num::Index cols, double scale = 1.0) {
    return num::Var<double>(rng.normal_matrix<double>(rows, cols, scale), true);
}

// Simplex projection by bisection on the threshold: sum(max(v - tau, 0)) = 1.
inline std::vector<double> simplex_projection_bisection(const std::vector<double>& v) {
    double lo = *std::min_element(v.begin(), v.end()) - 1.0;
    double hi = *std::max_element(v.begin(), v.end());
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        double s = 0.0;
        for (double x : v) s += std::max(x - mid, 0.0);
        if (s > 1.0) lo = mid;
        else hi = mid;
    }
    const double tau = 0.5 * (lo + hi);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - tau, 0.0);
    return out;
}

// Distance from every entry of a row to its sparsemax threshold; small
// values mean the support is about to change.
inline double sparsemax_margin(const std::vector<double>& v) {
    double lo = *std::min_element(v.begin(), v.end()) - 1.0;
    double hi = *std::max_element(v.begin(), v.end());
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        double s = 0.0;
        for (double x : v) s += std::max(x - mid, 0.0);
        if (s > 1.0) lo = mid;
        else hi = mid;
    }
    const double tau = 0.5 * (lo + hi);
    double margin = INFINITY;
    for (double x : v) margin = std::min(margin, std::abs(x - tau));
    return margin;
}

// AUROC by exhaustive positive/negative pair counting.
inline double brute_force_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double good = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            pairs += 1.0;
            if (scores[i] > scores[j]) good += 1.0;
            else if (scores[i] == scores[j]) good += 0.5;
        }
    }
    return good / pairs;
}

}  // namespace ehrtext::testing
