#pragma once

// Central-difference gradient verification.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/random.hpp"
#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::num {

struct GradcheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_input = 0;
    Index worst_coordinate = 0;
    std::size_t coordinates_checked = 0;
};

// Compares the analytic gradient of the scalar `f` with central differences
// with respect to each tensor in `inputs`. The error of a coordinate is
// |analytic - numeric| / max(1, |analytic|); the maximum is returned.
// `max_coords_per_input` > 0 samples that many coordinates per tensor.
inline GradcheckResult gradcheck(const std::function<Var<double>()>& f, std::vector<Var<double>> inputs,
                                 double eps = 1e-6, std::size_t max_coords_per_input = 0,
                                 std::uint64_t sample_seed = 0) {
    for (auto& x : inputs) {
        x.zero_grad();
    }
    Var<double> loss = f();
    ehrtext::detail::require(loss.rows() == 1 && loss.cols() == 1, "gradcheck: function must return a scalar");
    if (!std::isfinite(loss.item())) {
        throw InvalidInput("gradcheck: non-finite function value at the base point");
    }
    backward(loss);
    std::vector<Matrix<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& x : inputs) {
        analytic.push_back(x.grad());
    }

    GradcheckResult result;
    Rng rng(sample_seed);
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        Matrix<double>& value = inputs[t].mutable_value();
        std::vector<Index> coords(static_cast<std::size_t>(value.size()));
        for (Index i = 0; i < value.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
        if (max_coords_per_input > 0 && coords.size() > max_coords_per_input) {
            rng.shuffle(coords);
            coords.resize(max_coords_per_input);
        }
        for (Index c : coords) {
            const double saved = value.data()[c];
            value.data()[c] = saved + eps;
            const double up = f().item();
            value.data()[c] = saved - eps;
            const double down = f().item();
            value.data()[c] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw InvalidInput("gradcheck: non-finite value perturbing input " + std::to_string(t) +
                                   " coordinate " + std::to_string(c));
            }
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[t].data()[c];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            ++result.coordinates_checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_input = t;
                result.worst_coordinate = c;
            }
        }
    }
    return result;
}

inline double gradcheck(const std::function<Var<double>(const Var<double>&)>& f, Var<double> x,
                        double eps = 1e-6) {
    x.set_requires_grad(true);
    return gradcheck([&] { return f(x); }, {x}, eps).max_relative_error;
}

}  // namespace ehrtext::num
