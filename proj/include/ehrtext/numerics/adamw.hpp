#pragma once

// AdamW with decoupled weight decay.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/parameters.hpp"
#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::num {

struct AdamWConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class T>
struct AdamWMoments {
    Matrix<T> first;
    Matrix<T> second;
};

// One update of a single tensor. `step` is the 1-based index of this update.
// The decay term shrinks the parameter by lr * wd independently of the
// gradient moments.
template <class T>
void adamw_step(Matrix<T>& param, const Matrix<T>& grad, AdamWMoments<T>& moments, std::uint64_t step,
                const AdamWConfig& cfg) {
    if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
        throw ContractViolation("adamw_step: parameter/gradient shape mismatch");
    }
    if (moments.first.size() == 0) {
        moments.first = Matrix<T>::Zero(param.rows(), param.cols());
        moments.second = Matrix<T>::Zero(param.rows(), param.cols());
    }
    if (moments.first.rows() != param.rows() || moments.first.cols() != param.cols()) {
        throw ContractViolation("adamw_step: moment shape mismatch");
    }
    ehrtext::detail::require(step >= 1, "adamw_step: step counter starts at 1");

    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T lr = static_cast<T>(cfg.learning_rate);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
    const T eps = static_cast<T>(cfg.epsilon);
    const T decay = static_cast<T>(1.0 - cfg.learning_rate * cfg.weight_decay);

    moments.first = b1 * moments.first + (T(1) - b1) * grad;
    moments.second = b2 * moments.second + (T(1) - b2) * grad.cwiseProduct(grad);
    param *= decay;
    param.array() -= lr * (moments.first.array() / c1) / ((moments.second.array() / c2).sqrt() + eps);
}

// Optimizer over a ParameterStore. Parameters that are frozen (no gradient
// requested) are left untouched and keep zero moments.
template <class T>
class AdamW {
public:
    AdamW(ParameterStore<T>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
        if (!(cfg.learning_rate > 0.0) || cfg.weight_decay < 0.0) {
            throw ConfigError("AdamW: learning rate must be positive and weight decay non-negative");
        }
        moments_.resize(store.all().size());
    }

    void step() {
        ++step_;
        auto& params = store_->all();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.var.requires_grad()) {
                continue;
            }
            adamw_step(p.var.mutable_value(), p.var.grad(), moments_[i], step_, cfg_);
        }
    }

    std::uint64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }
    const std::vector<AdamWMoments<T>>& moments() const { return moments_; }

    void restore(std::uint64_t step, std::vector<AdamWMoments<T>> moments) {
        ehrtext::detail::require(moments.size() == store_->all().size(), "AdamW::restore: moment count mismatch");
        step_ = step;
        moments_ = std::move(moments);
    }

private:
    ParameterStore<T>* store_;
    AdamWConfig cfg_;
    std::vector<AdamWMoments<T>> moments_;
    std::uint64_t step_ = 0;
};

}  // namespace ehrtext::num
