#pragma once

// Sparsemax: Euclidean projection onto the probability simplex.

#include <algorithm>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::num {

// Threshold tau such that sum(max(v - tau, 0)) == 1, via the sorted
// cumulative-sum rule. Returns the support size through `support`.
template <class T>
T sparsemax_threshold(std::span<const T> v, std::size_t* support = nullptr) {
    std::vector<T> sorted(v.begin(), v.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<T>());
    T cumulative = 0;
    T tau = 0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        cumulative += sorted[i];
        const T candidate = (cumulative - T(1)) / static_cast<T>(i + 1);
        if (sorted[i] > candidate) {
            k = i + 1;
            tau = candidate;
        }
    }
    if (support != nullptr) {
        *support = k;
    }
    return tau;
}

template <class T>
std::vector<T> sparsemax(std::span<const T> v) {
    if (v.empty()) {
        throw InvalidInput("sparsemax: empty input");
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(static_cast<double>(v[i]))) {
            throw InvalidInput("sparsemax: non-finite input at index " + std::to_string(i));
        }
    }
    const T tau = sparsemax_threshold(v);
    std::vector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::max(v[i] - tau, T(0));
    }
    return out;
}

template <class T>
std::vector<T> sparsemax(const std::vector<T>& v) {
    return sparsemax(std::span<const T>(v));
}

// Row-wise sparsemax. Backward uses the support Jacobian diag(s) - s s^T / |S|.
template <class T>
Var<T> sparsemax_rows(const Var<T>& x) {
    const Matrix<T>& in = x.value();
    Matrix<T> out(in.rows(), in.cols());
    for (Index r = 0; r < in.rows(); ++r) {
        auto row = sparsemax(std::span<const T>(in.row(r).data(), static_cast<std::size_t>(in.cols())));
        std::copy(row.begin(), row.end(), out.row(r).data());
    }
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        const Matrix<T>& p = self.value;
        Matrix<T> dx(p.rows(), p.cols());
        for (Index r = 0; r < p.rows(); ++r) {
            T sum = 0;
            Index count = 0;
            for (Index c = 0; c < p.cols(); ++c) {
                if (p(r, c) > T(0)) {
                    sum += self.grad(r, c);
                    ++count;
                }
            }
            const T mean = count > 0 ? sum / static_cast<T>(count) : T(0);
            for (Index c = 0; c < p.cols(); ++c) {
                dx(r, c) = p(r, c) > T(0) ? self.grad(r, c) - mean : T(0);
            }
        }
        self.parent(0).accumulate(dx);
    });
}

}  // namespace ehrtext::num
