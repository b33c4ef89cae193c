#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Var is a handle to a graph node. Ops build nodes whose backward closure
// pushes the node's gradient into its parents. Leaves created with
// requires_grad (model parameters) keep their gradients across graphs until
// zero_grad() is called; intermediate nodes are released with the last Var
// referencing them.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ehrtext/errors.hpp"

namespace ehrtext::num {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

template <class T>
struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    template <class Expr>
    void accumulate(const Expr& g) {
        if (!has_grad) {
            grad = g;
            has_grad = true;
        } else {
            grad += g;
        }
    }

    Node& parent(std::size_t i) { return *parents[i]; }
};

namespace detail {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Disables graph construction in its scope. Values are still computed.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
class Var {
public:
    Var() = default;

    explicit Var(Matrix<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Var scalar(T v, bool requires_grad = false) {
        Matrix<T> m(1, 1);
        m(0, 0) = v;
        return Var(std::move(m), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }

    const Matrix<T>& value() const { return node_->value; }
    Matrix<T>& mutable_value() { return node_->value; }

    // Gradient; a zero matrix of the value's shape if nothing was accumulated.
    Matrix<T> grad() const {
        if (node_->has_grad) {
            return node_->grad;
        }
        return Matrix<T>::Zero(rows(), cols());
    }
    bool has_grad() const { return node_->has_grad; }

    void set_grad(Matrix<T> g) {
        node_->grad = std::move(g);
        node_->has_grad = true;
    }

    void zero_grad() {
        node_->grad.resize(0, 0);
        node_->has_grad = false;
    }

    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }

    T item() const {
        ehrtext::detail::require(rows() == 1 && cols() == 1, "item() on a non-scalar tensor");
        return node_->value(0, 0);
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Creates the result node of an op. The backward closure is recorded only when
// some parent participates in differentiation and grad mode is on.
template <class T, class Backward>
Var<T> make_op(Matrix<T> value, std::initializer_list<Var<T>> parents, Backward&& backward) {
    Var<T> out(std::move(value));
    if (!grad_enabled()) {
        return out;
    }
    bool any = false;
    for (const auto& p : parents) {
        any = any || p.requires_grad();
    }
    if (!any) {
        return out;
    }
    Node<T>& n = *out.node();
    n.requires_grad = true;
    for (const auto& p : parents) {
        n.parents.push_back(p.shared());
    }
    n.backward = std::forward<Backward>(backward);
    return out;
}

template <class T, class Backward>
Var<T> make_op(Matrix<T> value, const std::vector<Var<T>>& parents, Backward&& backward) {
    Var<T> out(std::move(value));
    if (!grad_enabled()) {
        return out;
    }
    bool any = false;
    for (const auto& p : parents) {
        any = any || p.requires_grad();
    }
    if (!any) {
        return out;
    }
    Node<T>& n = *out.node();
    n.requires_grad = true;
    for (const auto& p : parents) {
        n.parents.push_back(p.shared());
    }
    n.backward = std::forward<Backward>(backward);
    return out;
}

// Back-propagates from root, seeding its gradient with ones.
template <class T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) {
        return;
    }
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->accumulate(Matrix<T>::Ones(root.rows(), root.cols()));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->has_grad) {
            n->backward(*n);
        }
    }
}

template <class T>
bool all_finite(const Matrix<T>& m) {
    return m.allFinite();
}

template <class To, class From>
Matrix<To> cast(const Matrix<From>& m) {
    return m.template cast<To>();
}

}  // namespace ehrtext::num
