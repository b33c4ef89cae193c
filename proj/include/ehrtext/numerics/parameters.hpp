#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::num {

template <class T>
struct NamedParameter {
    std::string name;
    std::string group;
    Var<T> var;
};

// Ordered registry of a model's trainable tensors. Each tensor belongs to a
// named group; freezing operates on groups.
template <class T>
class ParameterStore {
public:
    Var<T> add(std::string name, std::string group, Matrix<T> value) {
        if (find_index(name) >= 0) {
            throw ContractViolation("duplicate parameter name: " + name);
        }
        Var<T> v(std::move(value), true);
        params_.push_back({std::move(name), std::move(group), v});
        return v;
    }

    const std::vector<NamedParameter<T>>& all() const { return params_; }
    std::vector<NamedParameter<T>>& all() { return params_; }

    Var<T> get(const std::string& name) const {
        const long i = find_index(name);
        if (i < 0) {
            throw ContractViolation("unknown parameter: " + name);
        }
        return params_[static_cast<std::size_t>(i)].var;
    }

    bool contains(const std::string& name) const { return find_index(name) >= 0; }

    // Groups in `frozen` stop receiving gradients; all others are trainable.
    void set_frozen_groups(const std::set<std::string>& frozen) {
        for (auto& p : params_) {
            p.var.set_requires_grad(!frozen.count(p.group));
        }
    }

    std::set<std::string> frozen_groups() const {
        std::set<std::string> out;
        for (const auto& p : params_) {
            if (!p.var.requires_grad()) out.insert(p.group);
        }
        return out;
    }

    std::set<std::string> groups() const {
        std::set<std::string> out;
        for (const auto& p : params_) out.insert(p.group);
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.var.value().size());
        return n;
    }

    // Copies values from another store with the same names and shapes.
    template <class U>
    void copy_values_from(const ParameterStore<U>& other) {
        for (auto& p : params_) {
            Var<U> src = other.get(p.name);
            if (src.rows() != p.var.rows() || src.cols() != p.var.cols()) {
                throw ContractViolation("shape mismatch copying parameter " + p.name);
            }
            p.var.mutable_value() = src.value().template cast<T>();
        }
    }

private:
    long find_index(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].name == name) return static_cast<long>(i);
        }
        return -1;
    }

    std::vector<NamedParameter<T>> params_;
};

}  // namespace ehrtext::num
