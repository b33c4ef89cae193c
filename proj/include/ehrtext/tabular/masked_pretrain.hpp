#pragma once

// Self-supervised masked-cell reconstruction for the tabular encoder.

#include <cstdint>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/ops.hpp"
#include "ehrtext/numerics/parameters.hpp"
#include "ehrtext/numerics/random.hpp"
#include "ehrtext/tabular/encoder.hpp"

namespace ehrtext::tab {

// Linear decoders from the encoder output back to every original column:
// one regression output per numerical column and one classifier per
// categorical column (vocabulary + unknown slot).
template <class T>
class ReconstructionHead {
public:
    ReconstructionHead(const TabularEncoder<T>& encoder, std::uint64_t seed) {
        num::Rng rng(seed);
        const int in = encoder.output_dim();
        const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
        const auto nums = encoder.schema().numerical();
        if (!nums.empty()) {
            params_.add("num.w", "reconstruction",
                        rng.normal_matrix<T>(in, static_cast<num::Index>(nums.size()), stddev));
            params_.add("num.b", "reconstruction", num::Matrix<T>::Zero(1, static_cast<num::Index>(nums.size())));
        }
        for (const auto* col : encoder.schema().categorical()) {
            const auto classes = static_cast<num::Index>(col->vocabulary.size() + 1);
            params_.add("cat." + col->name + ".w", "reconstruction", rng.normal_matrix<T>(in, classes, stddev));
            params_.add("cat." + col->name + ".b", "reconstruction", num::Matrix<T>::Zero(1, classes));
            categorical_.push_back(col->name);
        }
        numerical_count_ = static_cast<num::Index>(nums.size());
    }

    num::ParameterStore<T>& params() { return params_; }
    const num::ParameterStore<T>& params() const { return params_; }

    // Reconstruction loss on masked cells only. `cell_mask` is rows x columns
    // (categoricals first, then numericals) with 1 marking a masked cell.
    // Numerical MSE and categorical cross-entropy are each averaged over their
    // masked cells and added with equal weight.
    num::Var<T> loss(const num::Var<T>& embedding, const TabularBatch& batch, const num::Matrix<T>& cell_mask) const {
        std::vector<num::Var<T>> terms;
        const num::Index n_cat = static_cast<num::Index>(categorical_.size());
        if (numerical_count_ > 0) {
            num::Matrix<T> mask = cell_mask.rightCols(numerical_count_);
            if (mask.sum() > T(0)) {
                num::Var<T> pred = num::linear(embedding, params_.get("num.w"), params_.get("num.b"));
                terms.push_back(num::masked_mse(pred, num::Matrix<T>(batch.numerical.template cast<T>()), mask));
            }
        }
        const T cat_total = n_cat > 0 ? cell_mask.leftCols(n_cat).sum() : T(0);
        if (cat_total > T(0)) {
            num::Var<T> ce;
            for (num::Index c = 0; c < n_cat; ++c) {
                std::vector<T> weight(static_cast<std::size_t>(batch.size()));
                std::vector<int> target(static_cast<std::size_t>(batch.size()));
                T count = 0;
                for (num::Index r = 0; r < cell_mask.rows(); ++r) {
                    weight[static_cast<std::size_t>(r)] = cell_mask(r, c);
                    target[static_cast<std::size_t>(r)] = batch.categories(r, c);
                    count += cell_mask(r, c);
                }
                if (count == T(0)) continue;
                const std::string& name = categorical_[static_cast<std::size_t>(c)];
                num::Var<T> logits =
                    num::linear(embedding, params_.get("cat." + name + ".w"), params_.get("cat." + name + ".b"));
                num::Var<T> term = num::scale(num::cross_entropy_rows(logits, std::move(target), std::move(weight)),
                                              count / cat_total);
                ce = ce.defined() ? num::add(ce, term) : term;
            }
            terms.push_back(ce);
        }
        ehrtext::detail::require(!terms.empty(), "reconstruction loss: no masked cells");
        return terms.size() == 1 ? terms[0] : num::add(terms[0], terms[1]);
    }

private:
    num::ParameterStore<T> params_;
    std::vector<std::string> categorical_;
    num::Index numerical_count_ = 0;
};

// Bernoulli(rate) cell mask, rows x original columns. Resampled once if no
// cell is masked; a second empty draw is an error.
template <class T>
num::Matrix<T> sample_cell_mask(num::Index rows, num::Index columns, double rate, num::Rng& rng) {
    if (!(rate > 0.0 && rate < 1.0)) {
        throw ConfigError("mask rate must lie strictly between 0 and 1");
    }
    for (int attempt = 0; attempt < 2; ++attempt) {
        num::Matrix<T> mask(rows, columns);
        for (num::Index i = 0; i < mask.size(); ++i) {
            mask.data()[i] = rng.bernoulli(rate) ? T(1) : T(0);
        }
        if (mask.sum() > T(0)) return mask;
    }
    throw InvalidInput("masked pretraining: mask sampled no cells twice");
}

// Expands a per-column mask to the encoder's embedded input positions and
// returns the keep pattern (1 - mask).
template <class T>
num::Matrix<T> keep_pattern(const TabularEncoder<T>& encoder, const num::Matrix<T>& cell_mask) {
    const auto& col = encoder.input_column();
    num::Matrix<T> keep(cell_mask.rows(), static_cast<num::Index>(col.size()));
    for (num::Index r = 0; r < keep.rows(); ++r) {
        for (std::size_t j = 0; j < col.size(); ++j) {
            keep(r, static_cast<num::Index>(j)) = T(1) - cell_mask(r, col[j]);
        }
    }
    return keep;
}

// One masked-reconstruction evaluation: draws the mask, runs the encoder on
// the masked inputs and returns the reconstruction loss.
template <class T>
num::Var<T> masked_pretrain_step(const TabularEncoder<T>& encoder, const ReconstructionHead<T>& head,
                                 const TabularBatch& batch, double mask_rate, num::Rng& rng) {
    const auto columns = static_cast<num::Index>(encoder.schema().feature_count());
    num::Matrix<T> mask = sample_cell_mask<T>(static_cast<num::Index>(batch.size()), columns, mask_rate, rng);
    num::Matrix<T> keep = keep_pattern(encoder, mask);
    TabForward<T> fwd = encoder.forward(batch, &keep);
    return head.loss(fwd.embedding, batch, mask);
}

}  // namespace ehrtext::tab
