#pragma once

// Projection of both modalities into a shared space, the symmetric
// contrastive objective, and retrieval diagnostics.

#include <cstdint>
#include <string>
#include <utility>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/ops.hpp"
#include "ehrtext/numerics/parameters.hpp"
#include "ehrtext/numerics/random.hpp"

namespace ehrtext::contrastive {

inline constexpr double kDefaultTemperature = 0.1;

struct ProjectionConfig {
    int tabular_dim = 128;
    int text_dim = 768;
    int shared_dim = 128;
};

// One bias-free linear map per modality followed by L2 normalization.
template <class T>
class ProjectionHeads {
public:
    ProjectionHeads(ProjectionConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        num::Rng rng(seed);
        params_.add("ehr.w", "projection",
                    rng.normal_matrix<T>(cfg.tabular_dim, cfg.shared_dim, 1.0 / std::sqrt(double(cfg.tabular_dim))));
        params_.add("text.w", "projection",
                    rng.normal_matrix<T>(cfg.text_dim, cfg.shared_dim, 1.0 / std::sqrt(double(cfg.text_dim))));
    }

    const ProjectionConfig& config() const { return cfg_; }
    num::ParameterStore<T>& params() { return params_; }
    const num::ParameterStore<T>& params() const { return params_; }

    num::Var<T> project_ehr(const num::Var<T>& e) const {
        return num::l2_normalize_rows(num::matmul(e, params_.get("ehr.w")));
    }

    num::Var<T> project_text(const num::Var<T>& t) const {
        return num::l2_normalize_rows(num::matmul(t, params_.get("text.w")));
    }

    std::pair<num::Var<T>, num::Var<T>> project(const num::Var<T>& e, const num::Var<T>& t) const {
        if (e.rows() != t.rows()) throw ContractViolation("project: row counts differ");
        return {project_ehr(e), project_text(t)};
    }

private:
    ProjectionConfig cfg_;
    num::ParameterStore<T> params_;
};

// Symmetric contrastive loss: EHR-to-text plus text-to-EHR cross-entropy of
// cosine similarities scaled by 1/temperature. `temperature` is a 1x1 tensor
// so it can optionally be learned.
template <class T>
num::Var<T> clip_loss(const num::Var<T>& z_e, const num::Var<T>& z_t, const num::Var<T>& temperature) {
    if (!(temperature.item() > T(0))) throw ConfigError("clip_loss: temperature must be positive");
    if (z_e.rows() != z_t.rows() || z_e.rows() < 1) throw ContractViolation("clip_loss: need N >= 1 aligned rows");
    return num::clip_loss_from_logits(num::div_scalar(num::cosine_similarity_matrix(z_e, z_t), temperature));
}

template <class T>
num::Var<T> clip_loss(const num::Var<T>& z_e, const num::Var<T>& z_t, double temperature = kDefaultTemperature) {
    return clip_loss(z_e, z_t, num::Var<T>::scalar(static_cast<T>(temperature)));
}

// Fraction of rows i whose partner t_i ranks within the top k of row i of the
// similarity matrix. Ties rank the lower index first.
template <class T>
double retrieval_recall_at_k(const num::Matrix<T>& z_e, const num::Matrix<T>& z_t, int k) {
    const num::Index n = z_e.rows();
    if (z_t.rows() != n || z_e.cols() != z_t.cols()) throw ContractViolation("recall@k: shape mismatch");
    if (k < 1 || k > n) throw ContractViolation("recall@k: need 1 <= k <= N");
    num::NoGradGuard no_grad;
    num::Matrix<T> s = num::cosine_similarity_matrix(num::Var<T>(z_e), num::Var<T>(z_t)).value();
    long hits = 0;
    for (num::Index i = 0; i < n; ++i) {
        long rank = 0;
        for (num::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            if (s(i, j) > s(i, i) || (s(i, j) == s(i, i) && j < i)) ++rank;
        }
        if (rank < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace ehrtext::contrastive
