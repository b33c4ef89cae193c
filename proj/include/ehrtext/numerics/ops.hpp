#pragma once

// Differentiable operations used by the encoders, heads and losses.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::num {

// Contiguous block of rows belonging to one sequence.
struct Segment {
    Index start = 0;
    Index length = 0;
};

namespace detail {

inline void check_same_shape(Index r1, Index c1, Index r2, Index c2, const char* op) {
    if (r1 != r2 || c1 != c2) {
        throw ContractViolation(std::string(op) + ": shape mismatch (" + std::to_string(r1) + "x" +
                                std::to_string(c1) + " vs " + std::to_string(r2) + "x" +
                                std::to_string(c2) + ")");
    }
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    ehrtext::detail::require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    Matrix<T> out(a.rows(), b.cols());
    out.noalias() = a.value() * b.value();
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>& a = self.parent(0);
        Node<T>& b = self.parent(1);
        if (a.requires_grad) {
            Matrix<T> da(a.value.rows(), a.value.cols());
            da.noalias() = self.grad * b.value.transpose();
            a.accumulate(da);
        }
        if (b.requires_grad) {
            Matrix<T> db(b.value.rows(), b.value.cols());
            db.noalias() = a.value.transpose() * self.grad;
            b.accumulate(db);
        }
    });
}

// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    ehrtext::detail::require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
    Matrix<T> out(a.rows(), b.rows());
    out.noalias() = a.value() * b.value().transpose();
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>& a = self.parent(0);
        Node<T>& b = self.parent(1);
        if (a.requires_grad) {
            Matrix<T> da(a.value.rows(), a.value.cols());
            da.noalias() = self.grad * b.value;
            a.accumulate(da);
        }
        if (b.requires_grad) {
            Matrix<T> db(b.value.rows(), b.value.cols());
            db.noalias() = self.grad.transpose() * a.value;
            b.accumulate(db);
        }
    });
}

// x * w + bias (bias is 1 x out, broadcast over rows).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    ehrtext::detail::require(x.cols() == w.rows(), "linear: input width mismatch");
    ehrtext::detail::require(bias.rows() == 1 && bias.cols() == w.cols(), "linear: bias shape mismatch");
    Matrix<T> out(x.rows(), w.cols());
    out.noalias() = x.value() * w.value();
    out.rowwise() += bias.value().row(0);
    return make_op<T>(std::move(out), {x, w, bias}, [](Node<T>& self) {
        Node<T>& x = self.parent(0);
        Node<T>& w = self.parent(1);
        Node<T>& b = self.parent(2);
        if (x.requires_grad) {
            Matrix<T> dx(x.value.rows(), x.value.cols());
            dx.noalias() = self.grad * w.value.transpose();
            x.accumulate(dx);
        }
        if (w.requires_grad) {
            Matrix<T> dw(w.value.rows(), w.value.cols());
            dw.noalias() = x.value.transpose() * self.grad;
            w.accumulate(dw);
        }
        if (b.requires_grad) {
            b.accumulate(self.grad.colwise().sum());
        }
    });
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
    return make_op<T>(a.value() + b.value(), {a, b}, [](Node<T>& self) {
        if (self.parent(0).requires_grad) self.parent(0).accumulate(self.grad);
        if (self.parent(1).requires_grad) self.parent(1).accumulate(self.grad);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
    return make_op<T>(a.value() - b.value(), {a, b}, [](Node<T>& self) {
        if (self.parent(0).requires_grad) self.parent(0).accumulate(self.grad);
        if (self.parent(1).requires_grad) self.parent(1).accumulate(-self.grad);
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
    return make_op<T>(a.value().cwiseProduct(b.value()), {a, b}, [](Node<T>& self) {
        Node<T>& a = self.parent(0);
        Node<T>& b = self.parent(1);
        if (a.requires_grad) a.accumulate(self.grad.cwiseProduct(b.value));
        if (b.requires_grad) b.accumulate(self.grad.cwiseProduct(a.value));
    });
}

// scale * x + shift
template <class T>
Var<T> affine(const Var<T>& x, T scale, T shift = T(0)) {
    Matrix<T> out = (x.value() * scale).array() + shift;
    return make_op<T>(std::move(out), {x}, [scale](Node<T>& self) {
        self.parent(0).accumulate(self.grad * scale);
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
    return affine(x, factor, T(0));
}

// x / s where s is a 1x1 tensor (e.g. a temperature).
template <class T>
Var<T> div_scalar(const Var<T>& x, const Var<T>& s) {
    ehrtext::detail::require(s.rows() == 1 && s.cols() == 1, "div_scalar: divisor must be 1x1");
    const T d = s.item();
    if (!(d != T(0))) {
        throw InvalidInput("div_scalar: zero divisor");
    }
    return make_op<T>(x.value() / d, {x, s}, [](Node<T>& self) {
        Node<T>& x = self.parent(0);
        Node<T>& s = self.parent(1);
        const T d = s.value(0, 0);
        if (x.requires_grad) x.accumulate(self.grad / d);
        if (s.requires_grad) {
            Matrix<T> ds(1, 1);
            ds(0, 0) = -(self.grad.cwiseProduct(x.value)).sum() / (d * d);
            s.accumulate(ds);
        }
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Matrix<T> out = x.value().cwiseMax(T(0));
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        Node<T>& x = self.parent(0);
        x.accumulate((x.value.array() > T(0)).select(self.grad.array(), T(0)).matrix());
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Matrix<T> out = x.value().unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        const auto& y = self.value.array();
        self.parent(0).accumulate((self.grad.array() * y * (T(1) - y)).matrix());
    });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
    const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    Matrix<T> out = x.value().unaryExpr(
        [inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
    return make_op<T>(std::move(out), {x}, [inv_sqrt2](Node<T>& self) {
        Node<T>& x = self.parent(0);
        const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
        Matrix<T> d = x.value.unaryExpr([inv_sqrt2, inv_sqrt_2pi](T v) {
            return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        });
        x.accumulate(self.grad.cwiseProduct(d));
    });
}

// Gated linear unit: left half * sigmoid(right half).
template <class T>
Var<T> glu(const Var<T>& x) {
    ehrtext::detail::require(x.cols() % 2 == 0, "glu: input width must be even");
    const Index h = x.cols() / 2;
    const Matrix<T>& in = x.value();
    Matrix<T> gate = in.rightCols(h).unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
    Matrix<T> out = in.leftCols(h).cwiseProduct(gate);
    return make_op<T>(std::move(out), {x}, [h, gate = std::move(gate)](Node<T>& self) {
        Node<T>& x = self.parent(0);
        Matrix<T> dx(x.value.rows(), x.value.cols());
        dx.leftCols(h) = self.grad.cwiseProduct(gate);
        dx.rightCols(h) = (self.grad.array() * x.value.leftCols(h).array() * gate.array() *
                           (T(1) - gate.array()))
                              .matrix();
        x.accumulate(dx);
    });
}

// ---------------------------------------------------------------- normalization

// Row-wise layer normalization with gain and bias (both 1 x cols).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
    const Index n = x.rows();
    const Index d = x.cols();
    ehrtext::detail::require(gain.cols() == d && bias.cols() == d, "layer_norm: parameter width mismatch");
    Matrix<T> xhat(n, d);
    Vector<T> rstd(n);
    for (Index r = 0; r < n; ++r) {
        const auto row = x.value().row(r);
        const T mean = row.mean();
        const T var = (row.array() - mean).square().mean();
        rstd(r) = T(1) / std::sqrt(var + eps);
        xhat.row(r) = (row.array() - mean) * rstd(r);
    }
    Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
                    bias.value().row(0).array();
    return make_op<T>(std::move(out), {x, gain, bias},
                      [xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                          Node<T>& x = self.parent(0);
                          Node<T>& g = self.parent(1);
                          Node<T>& b = self.parent(2);
                          if (g.requires_grad) g.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
                          if (b.requires_grad) b.accumulate(self.grad.colwise().sum());
                          if (x.requires_grad) {
                              const Index d = xhat.cols();
                              Matrix<T> dxhat = self.grad.array().rowwise() * g.value.row(0).array();
                              Matrix<T> dx(xhat.rows(), d);
                              for (Index r = 0; r < xhat.rows(); ++r) {
                                  const T s1 = dxhat.row(r).sum();
                                  const T s2 = dxhat.row(r).dot(xhat.row(r));
                                  dx.row(r) = (rstd(r) / static_cast<T>(d)) *
                                              (static_cast<T>(d) * dxhat.row(r).array() - s1 -
                                               xhat.row(r).array() * s2);
                              }
                              x.accumulate(dx);
                          }
                      });
}

// Each row divided by its L2 norm. A zero row is a degenerate input.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
    const Index n = x.rows();
    Vector<T> norms(n);
    Matrix<T> out(n, x.cols());
    for (Index r = 0; r < n; ++r) {
        norms(r) = x.value().row(r).norm();
        if (!(norms(r) > T(0)) || !std::isfinite(static_cast<double>(norms(r)))) {
            throw DegenerateVector("l2_normalize_rows: row " + std::to_string(r) +
                                   " has zero or non-finite norm");
        }
        out.row(r) = x.value().row(r) / norms(r);
    }
    return make_op<T>(std::move(out), {x}, [norms = std::move(norms)](Node<T>& self) {
        const Matrix<T>& y = self.value;
        Matrix<T> dx(y.rows(), y.cols());
        for (Index r = 0; r < y.rows(); ++r) {
            const T proj = y.row(r).dot(self.grad.row(r));
            dx.row(r) = (self.grad.row(r) - proj * y.row(r)) / norms(r);
        }
        self.parent(0).accumulate(dx);
    });
}

// s_ij = e_i . t_j / (|e_i| |t_j|). Values are clamped into [-1, 1] against
// rounding; the gradient passes straight through.
template <class T>
Var<T> cosine_similarity_matrix(const Var<T>& e, const Var<T>& t) {
    ehrtext::detail::require(e.cols() == t.cols(), "cosine_similarity_matrix: width mismatch");
    Var<T> s = matmul_nt(l2_normalize_rows(e), l2_normalize_rows(t));
    s.mutable_value() = s.value().cwiseMax(T(-1)).cwiseMin(T(1));
    return s;
}

// ---------------------------------------------------------------- structure

template <class T>
Var<T> gather_rows(const Var<T>& x, std::vector<Index> indices) {
    Matrix<T> out(static_cast<Index>(indices.size()), x.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        ehrtext::detail::require(indices[i] >= 0 && indices[i] < x.rows(), "gather_rows: index out of range");
        out.row(static_cast<Index>(i)) = x.value().row(indices[i]);
    }
    return make_op<T>(std::move(out), {x}, [indices = std::move(indices)](Node<T>& self) {
        Node<T>& x = self.parent(0);
        Matrix<T> dx = Matrix<T>::Zero(x.value.rows(), x.value.cols());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            dx.row(indices[i]) += self.grad.row(static_cast<Index>(i));
        }
        x.accumulate(dx);
    });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    ehrtext::detail::require(!parts.empty(), "concat_cols: no inputs");
    const Index n = parts.front().rows();
    Index width = 0;
    for (const auto& p : parts) {
        ehrtext::detail::require(p.rows() == n, "concat_cols: row count mismatch");
        width += p.cols();
    }
    Matrix<T> out(n, width);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return make_op<T>(std::move(out), parts, [](Node<T>& self) {
        Index at = 0;
        for (auto& p : self.parents) {
            const Index w = p->value.cols();
            if (p->requires_grad) p->accumulate(self.grad.middleCols(at, w));
            at += w;
        }
    });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    ehrtext::detail::require(!parts.empty(), "concat_rows: no inputs");
    const Index d = parts.front().cols();
    Index n = 0;
    for (const auto& p : parts) {
        ehrtext::detail::require(p.cols() == d, "concat_rows: column count mismatch");
        n += p.rows();
    }
    Matrix<T> out(n, d);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return make_op<T>(std::move(out), parts, [](Node<T>& self) {
        Index at = 0;
        for (auto& p : self.parents) {
            const Index r = p->value.rows();
            if (p->requires_grad) p->accumulate(self.grad.middleRows(at, r));
            at += r;
        }
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, Index start, Index count) {
    ehrtext::detail::require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: out of range");
    Matrix<T> out = x.value().middleCols(start, count);
    return make_op<T>(std::move(out), {x}, [start, count](Node<T>& self) {
        Node<T>& x = self.parent(0);
        Matrix<T> dx = Matrix<T>::Zero(x.value.rows(), x.value.cols());
        dx.middleCols(start, count) = self.grad;
        x.accumulate(dx);
    });
}

// Mean of the rows in each segment; one output row per segment.
template <class T>
Var<T> segment_mean(const Var<T>& x, std::vector<Segment> segments) {
    Matrix<T> out(static_cast<Index>(segments.size()), x.cols());
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& seg = segments[s];
        ehrtext::detail::require(seg.length > 0 && seg.start >= 0 && seg.start + seg.length <= x.rows(),
                        "segment_mean: bad segment");
        // Fixed left-to-right order keeps the reduction bitwise reproducible.
        Matrix<T> acc = x.value().row(seg.start);
        for (Index i = 1; i < seg.length; ++i) {
            acc += x.value().row(seg.start + i);
        }
        out.row(static_cast<Index>(s)) = acc / static_cast<T>(seg.length);
    }
    return make_op<T>(std::move(out), {x}, [segments = std::move(segments)](Node<T>& self) {
        Node<T>& x = self.parent(0);
        Matrix<T> dx = Matrix<T>::Zero(x.value.rows(), x.value.cols());
        for (std::size_t s = 0; s < segments.size(); ++s) {
            const auto& seg = segments[s];
            for (Index i = 0; i < seg.length; ++i) {
                dx.row(seg.start + i) = self.grad.row(static_cast<Index>(s)) / static_cast<T>(seg.length);
            }
        }
        x.accumulate(dx);
    });
}

// ---------------------------------------------------------------- attention

// Multi-head scaled dot-product attention, block-diagonal over segments:
// query segment s attends only to key/value segment s. `key_mask`, when
// given, has one entry per key row; zero entries are excluded from attention.
// `weights_out` receives the per-segment, per-head attention matrices.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 std::vector<Segment> q_segments, std::vector<Segment> kv_segments,
                 const std::vector<unsigned char>* key_mask = nullptr,
                 std::vector<std::vector<Matrix<T>>>* weights_out = nullptr) {
    const Index dim = q.cols();
    ehrtext::detail::require(k.cols() == dim && v.cols() == dim, "attention: width mismatch");
    ehrtext::detail::require(heads > 0 && dim % heads == 0, "attention: width not divisible by heads");
    ehrtext::detail::require(q_segments.size() == kv_segments.size(), "attention: segment count mismatch");
    ehrtext::detail::require(k.rows() == v.rows(), "attention: key/value row mismatch");
    if (key_mask != nullptr) {
        ehrtext::detail::require(static_cast<Index>(key_mask->size()) == k.rows(), "attention: key mask size");
    }
    const Index hd = dim / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    // probs[s][h] : q_len x kv_len
    std::vector<std::vector<Matrix<T>>> probs(q_segments.size());
    Matrix<T> out = Matrix<T>::Zero(q.rows(), dim);
    for (std::size_t s = 0; s < q_segments.size(); ++s) {
        const Segment qs = q_segments[s];
        const Segment ks = kv_segments[s];
        probs[s].resize(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            const auto qb = q.value().block(qs.start, h * hd, qs.length, hd);
            const auto kb = k.value().block(ks.start, h * hd, ks.length, hd);
            const auto vb = v.value().block(ks.start, h * hd, ks.length, hd);
            Matrix<T> scores(qs.length, ks.length);
            scores.noalias() = qb * kb.transpose();
            scores *= scale;
            for (Index i = 0; i < qs.length; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (Index j = 0; j < ks.length; ++j) {
                    if (key_mask != nullptr && (*key_mask)[static_cast<std::size_t>(ks.start + j)] == 0) {
                        scores(i, j) = -std::numeric_limits<T>::infinity();
                    }
                    mx = std::max(mx, scores(i, j));
                }
                if (!std::isfinite(static_cast<double>(mx))) {
                    throw InvalidInput("attention: query row has no attendable keys");
                }
                T denom = 0;
                for (Index j = 0; j < ks.length; ++j) {
                    scores(i, j) = std::exp(scores(i, j) - mx);
                    denom += scores(i, j);
                }
                scores.row(i) /= denom;
            }
            out.block(qs.start, h * hd, qs.length, hd).noalias() = scores * vb;
            probs[s][static_cast<std::size_t>(h)] = std::move(scores);
        }
    }
    if (weights_out != nullptr) {
        *weights_out = probs;
    }
    return make_op<T>(
        std::move(out), {q, k, v},
        [heads, hd, scale, probs = std::move(probs), q_segments = std::move(q_segments),
         kv_segments = std::move(kv_segments)](Node<T>& self) {
            Node<T>& q = self.parent(0);
            Node<T>& k = self.parent(1);
            Node<T>& v = self.parent(2);
            Matrix<T> dq, dk, dv;
            if (q.requires_grad) dq = Matrix<T>::Zero(q.value.rows(), q.value.cols());
            if (k.requires_grad) dk = Matrix<T>::Zero(k.value.rows(), k.value.cols());
            if (v.requires_grad) dv = Matrix<T>::Zero(v.value.rows(), v.value.cols());
            for (std::size_t s = 0; s < q_segments.size(); ++s) {
                const Segment qs = q_segments[s];
                const Segment ks = kv_segments[s];
                for (int h = 0; h < heads; ++h) {
                    const Matrix<T>& p = probs[s][static_cast<std::size_t>(h)];
                    const auto g = self.grad.block(qs.start, h * hd, qs.length, hd);
                    if (v.requires_grad) {
                        dv.block(ks.start, h * hd, ks.length, hd).noalias() += p.transpose() * g;
                    }
                    if (!q.requires_grad && !k.requires_grad) {
                        continue;
                    }
                    Matrix<T> dp(qs.length, ks.length);
                    dp.noalias() = g * v.value.block(ks.start, h * hd, ks.length, hd).transpose();
                    // softmax backward: ds = p * (dp - rowsum(dp * p))
                    Vector<T> inner = dp.cwiseProduct(p).rowwise().sum();
                    Matrix<T> ds = p.cwiseProduct((dp.colwise() - inner));
                    ds *= scale;
                    if (q.requires_grad) {
                        dq.block(qs.start, h * hd, qs.length, hd).noalias() +=
                            ds * k.value.block(ks.start, h * hd, ks.length, hd);
                    }
                    if (k.requires_grad) {
                        dk.block(ks.start, h * hd, ks.length, hd).noalias() +=
                            ds.transpose() * q.value.block(qs.start, h * hd, qs.length, hd);
                    }
                }
            }
            if (q.requires_grad) q.accumulate(dq);
            if (k.requires_grad) k.accumulate(dk);
            if (v.requires_grad) v.accumulate(dv);
        });
}

// ---------------------------------------------------------------- reductions and losses

template <class T>
Var<T> sum_all(const Var<T>& x) {
    Matrix<T> out(1, 1);
    out(0, 0) = x.value().sum();
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        Node<T>& x = self.parent(0);
        x.accumulate(Matrix<T>::Constant(x.value.rows(), x.value.cols(), self.grad(0, 0)));
    });
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
    ehrtext::detail::require(x.value().size() > 0, "mean_all: empty tensor");
    return scale(sum_all(x), T(1) / static_cast<T>(x.value().size()));
}

// Symmetric contrastive loss over a square logits matrix whose diagonal holds
// the matched pairs: mean row-wise cross-entropy plus mean column-wise
// cross-entropy (the two directions are summed, not averaged).
template <class T>
Var<T> clip_loss_from_logits(const Var<T>& logits) {
    const Index n = logits.rows();
    ehrtext::detail::require(n >= 1 && logits.cols() == n, "clip_loss: logits must be square and non-empty");
    const Matrix<T>& l = logits.value();
    Matrix<T> row_soft(n, n);
    Matrix<T> col_soft(n, n);
    T row_loss = 0;
    T col_loss = 0;
    for (Index i = 0; i < n; ++i) {
        const T mx = l.row(i).maxCoeff();
        row_soft.row(i) = (l.row(i).array() - mx).exp();
        const T denom = row_soft.row(i).sum();
        row_soft.row(i) /= denom;
        row_loss += -(l(i, i) - mx - std::log(denom));
    }
    for (Index j = 0; j < n; ++j) {
        const T mx = l.col(j).maxCoeff();
        col_soft.col(j) = (l.col(j).array() - mx).exp();
        const T denom = col_soft.col(j).sum();
        col_soft.col(j) /= denom;
        col_loss += -(l(j, j) - mx - std::log(denom));
    }
    Matrix<T> out(1, 1);
    out(0, 0) = row_loss / static_cast<T>(n) + col_loss / static_cast<T>(n);
    return make_op<T>(std::move(out), {logits},
                      [row_soft = std::move(row_soft), col_soft = std::move(col_soft)](Node<T>& self) {
                          const Index n = row_soft.rows();
                          Matrix<T> d = row_soft + col_soft;
                          d.diagonal().array() -= T(2);
                          d *= self.grad(0, 0) / static_cast<T>(n);
                          self.parent(0).accumulate(d);
                      });
}

// Mean binary cross-entropy of probabilities against {0,1} labels.
template <class T>
Var<T> binary_cross_entropy(const Var<T>& probs, std::span<const T> labels) {
    const Index n = probs.value().size();
    ehrtext::detail::require(static_cast<Index>(labels.size()) == n, "binary_cross_entropy: label count mismatch");
    ehrtext::detail::require(n > 0, "binary_cross_entropy: empty batch");
    const T tiny = std::numeric_limits<T>::min();
    T total = 0;
    const T* p = probs.value().data();
    for (Index i = 0; i < n; ++i) {
        const T y = labels[static_cast<std::size_t>(i)];
        total += y * std::log(std::max(p[i], tiny)) + (T(1) - y) * std::log(std::max(T(1) - p[i], tiny));
    }
    Matrix<T> out(1, 1);
    out(0, 0) = -total / static_cast<T>(n);
    std::vector<T> y(labels.begin(), labels.end());
    return make_op<T>(std::move(out), {probs}, [y = std::move(y)](Node<T>& self) {
        Node<T>& probs = self.parent(0);
        const Index n = probs.value.size();
        Matrix<T> d(probs.value.rows(), probs.value.cols());
        for (Index i = 0; i < n; ++i) {
            const T p = probs.value.data()[i];
            const T yi = y[static_cast<std::size_t>(i)];
            d.data()[i] = (-(yi / p) + (T(1) - yi) / (T(1) - p)) / static_cast<T>(n);
        }
        probs.accumulate(d * self.grad(0, 0));
    });
}

// Mean binary cross-entropy evaluated from logits; numerically stable form of
// binary_cross_entropy(sigmoid(x), y).
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const T> labels) {
    const Index n = logits.value().size();
    ehrtext::detail::require(static_cast<Index>(labels.size()) == n, "bce_with_logits: label count mismatch");
    ehrtext::detail::require(n > 0, "bce_with_logits: empty batch");
    T total = 0;
    const T* x = logits.value().data();
    for (Index i = 0; i < n; ++i) {
        const T y = labels[static_cast<std::size_t>(i)];
        total += std::max(x[i], T(0)) - x[i] * y + std::log1p(std::exp(-std::abs(x[i])));
    }
    Matrix<T> out(1, 1);
    out(0, 0) = total / static_cast<T>(n);
    std::vector<T> y(labels.begin(), labels.end());
    return make_op<T>(std::move(out), {logits}, [y = std::move(y)](Node<T>& self) {
        Node<T>& logits = self.parent(0);
        const Index n = logits.value.size();
        Matrix<T> d(logits.value.rows(), logits.value.cols());
        for (Index i = 0; i < n; ++i) {
            const T s = T(1) / (T(1) + std::exp(-logits.value.data()[i]));
            d.data()[i] = (s - y[static_cast<std::size_t>(i)]) / static_cast<T>(n);
        }
        logits.accumulate(d * self.grad(0, 0));
    });
}

// Mean squared error over the cells where mask != 0.
template <class T>
Var<T> masked_mse(const Var<T>& pred, const Matrix<T>& target, const Matrix<T>& mask) {
    detail::check_same_shape(pred.rows(), pred.cols(), target.rows(), target.cols(), "masked_mse");
    detail::check_same_shape(pred.rows(), pred.cols(), mask.rows(), mask.cols(), "masked_mse");
    const T count = mask.sum();
    ehrtext::detail::require(count > T(0), "masked_mse: no masked cells");
    Matrix<T> diff = (pred.value() - target).cwiseProduct(mask);
    Matrix<T> out(1, 1);
    out(0, 0) = diff.squaredNorm() / count;
    return make_op<T>(std::move(out), {pred}, [diff = std::move(diff), count](Node<T>& self) {
        self.parent(0).accumulate(diff * (T(2) * self.grad(0, 0) / count));
    });
}

// Mean softmax cross-entropy over rows with weight != 0. targets[i] is the
// class index of row i.
template <class T>
Var<T> cross_entropy_rows(const Var<T>& logits, std::vector<int> targets, std::vector<T> row_weight) {
    const Index n = logits.rows();
    const Index c = logits.cols();
    ehrtext::detail::require(static_cast<Index>(targets.size()) == n && static_cast<Index>(row_weight.size()) == n,
                    "cross_entropy_rows: size mismatch");
    T count = 0;
    T total = 0;
    Matrix<T> soft(n, c);
    for (Index i = 0; i < n; ++i) {
        ehrtext::detail::require(targets[static_cast<std::size_t>(i)] >= 0 && targets[static_cast<std::size_t>(i)] < c,
                        "cross_entropy_rows: target out of range");
        const T mx = logits.value().row(i).maxCoeff();
        soft.row(i) = (logits.value().row(i).array() - mx).exp();
        const T denom = soft.row(i).sum();
        soft.row(i) /= denom;
        const T w = row_weight[static_cast<std::size_t>(i)];
        if (w != T(0)) {
            total += w * -(logits.value()(i, targets[static_cast<std::size_t>(i)]) - mx - std::log(denom));
            count += w;
        }
    }
    ehrtext::detail::require(count > T(0), "cross_entropy_rows: no weighted rows");
    Matrix<T> out(1, 1);
    out(0, 0) = total / count;
    return make_op<T>(std::move(out), {logits},
                      [soft = std::move(soft), targets = std::move(targets), row_weight = std::move(row_weight),
                       count](Node<T>& self) {
                          Matrix<T> d = soft;
                          for (Index i = 0; i < d.rows(); ++i) {
                              d(i, targets[static_cast<std::size_t>(i)]) -= T(1);
                              d.row(i) *= row_weight[static_cast<std::size_t>(i)] / count;
                          }
                          self.parent(0).accumulate(d * self.grad(0, 0));
                      });
}

}  // namespace ehrtext::num
