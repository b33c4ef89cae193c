#pragma once

// TabNet-style encoder: categorical embeddings, an initial feature-splitting
// transformer, then sequential decision steps that pick features through
// sparsemax attention scaled by a running prior. Output is a fixed-width
// representation of each row.

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/ops.hpp"
#include "ehrtext/numerics/parameters.hpp"
#include "ehrtext/numerics/random.hpp"
#include "ehrtext/numerics/sparsemax.hpp"
#include "ehrtext/tabular/schema.hpp"

namespace ehrtext::tab {

struct TabNetConfig {
    int output_dim = 128;
    int decision_width = 64;   // n_d
    int attention_width = 64;  // n_a
    int steps = 3;
    double relaxation = 1.3;   // gamma
    int shared_blocks = 2;
    int step_blocks = 2;
    int max_embedding_dim = 8;
};

inline nlohmann::json to_json(const TabNetConfig& c) {
    return {{"output_dim", c.output_dim},       {"decision_width", c.decision_width},
            {"attention_width", c.attention_width}, {"steps", c.steps},
            {"relaxation", c.relaxation},       {"shared_blocks", c.shared_blocks},
            {"step_blocks", c.step_blocks},     {"max_embedding_dim", c.max_embedding_dim}};
}

inline TabNetConfig tabnet_config_from_json(const nlohmann::json& j) {
    TabNetConfig c;
    c.output_dim = j.value("output_dim", c.output_dim);
    c.decision_width = j.value("decision_width", c.decision_width);
    c.attention_width = j.value("attention_width", c.attention_width);
    c.steps = j.value("steps", c.steps);
    c.relaxation = j.value("relaxation", c.relaxation);
    c.shared_blocks = j.value("shared_blocks", c.shared_blocks);
    c.step_blocks = j.value("step_blocks", c.step_blocks);
    c.max_embedding_dim = j.value("max_embedding_dim", c.max_embedding_dim);
    return c;
}

inline int embedding_dim(std::size_t vocabulary_size, int cap) {
    const int half = static_cast<int>((vocabulary_size + 1) / 2);
    return std::max(1, std::min(cap, half));
}

// Training stages; each implies a set of frozen parameter groups.
enum class Stage { pretrain_masked, pretrain_cl, finetune };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::pretrain_masked: return "pretrain-masked";
        case Stage::pretrain_cl: return "pretrain-cl";
        case Stage::finetune: return "finetune";
    }
    return "?";
}

inline Stage stage_from_string(const std::string& s) {
    if (s == "pretrain-masked") return Stage::pretrain_masked;
    if (s == "pretrain-cl") return Stage::pretrain_cl;
    if (s == "finetune") return Stage::finetune;
    throw ConfigError("unknown stage '" + s + "'");
}

inline constexpr const char* kEmbeddingGroup = "embeddings";
inline constexpr const char* kInitialSplitGroup = "initial_split";

// Groups held fixed in each stage: nothing during masked pretraining; the
// categorical embeddings and the first shared feature-transformer block
// afterwards.
inline std::set<std::string> freeze_plan(Stage stage) {
    if (stage == Stage::pretrain_masked) return {};
    return {kEmbeddingGroup, kInitialSplitGroup};
}

template <class T>
struct TabForward {
    num::Var<T> embedding;                   // rows x output_dim
    std::vector<num::Matrix<T>> masks;       // per decision step, rows x input width
};

template <class T>
class TabularEncoder {
public:
    TabularEncoder(FeatureSchema schema, TabNetConfig cfg, std::uint64_t seed)
        : schema_(std::move(schema)), cfg_(cfg) {
        if (cfg_.steps < 1 || cfg_.shared_blocks < 1 || cfg_.decision_width < 1 || cfg_.attention_width < 1 ||
            cfg_.output_dim < 1) {
            throw ConfigError("TabularEncoder: invalid architecture configuration");
        }
        num::Rng rng(seed);
        const int hidden = cfg_.decision_width + cfg_.attention_width;

        int width = 0;
        for (const auto* col : schema_.categorical()) {
            const int dim = embedding_dim(col->vocabulary.size(), cfg_.max_embedding_dim);
            params_.add("embed." + col->name, kEmbeddingGroup,
                        rng.normal_matrix<T>(static_cast<num::Index>(col->vocabulary.size() + 1), dim, 1.0));
            embed_dims_.push_back(dim);
            for (int k = 0; k < dim; ++k) input_column_.push_back(static_cast<int>(embed_dims_.size() - 1));
            width += dim;
        }
        const int n_cat = static_cast<int>(embed_dims_.size());
        for (std::size_t i = 0; i < schema_.numerical().size(); ++i) {
            input_column_.push_back(n_cat + static_cast<int>(i));
        }
        width += static_cast<int>(schema_.numerical().size());
        input_width_ = width;
        if (input_width_ == 0) {
            throw SchemaError("TabularEncoder: schema has no features");
        }

        for (int b = 0; b < cfg_.shared_blocks; ++b) {
            const int in = b == 0 ? input_width_ : hidden;
            add_glu_block("shared." + std::to_string(b), b == 0 ? kInitialSplitGroup : "shared", in, hidden, rng);
        }
        for (int s = 0; s <= cfg_.steps; ++s) {
            const std::string step = "step" + std::to_string(s);
            for (int b = 0; b < cfg_.step_blocks; ++b) {
                add_glu_block(step + ".ft." + std::to_string(b), step, hidden, hidden, rng);
            }
            if (s > 0) {
                add_linear(step + ".att", step, cfg_.attention_width, input_width_, rng);
            }
        }
        add_linear("output", "output", cfg_.decision_width, cfg_.output_dim, rng);
    }

    const FeatureSchema& schema() const { return schema_; }
    const TabNetConfig& config() const { return cfg_; }
    num::ParameterStore<T>& params() { return params_; }
    const num::ParameterStore<T>& params() const { return params_; }
    int input_width() const { return input_width_; }
    int output_dim() const { return cfg_.output_dim; }

    // Original-column index (categoricals first, then numericals) of each
    // input position after embedding.
    const std::vector<int>& input_column() const { return input_column_; }

    // Embedded, concatenated inputs; rows x input_width.
    num::Var<T> embed(const TabularBatch& batch) const {
        const auto n = static_cast<num::Index>(batch.size());
        std::vector<num::Var<T>> parts;
        const auto cats = schema_.categorical();
        if (batch.categories.cols() != static_cast<num::Index>(cats.size()) ||
            batch.numerical.cols() != static_cast<num::Index>(schema_.numerical().size())) {
            throw SchemaError("TabularEncoder: batch does not match the encoder schema");
        }
        for (std::size_t c = 0; c < cats.size(); ++c) {
            num::Var<T> table = params_.get("embed." + cats[c]->name);
            std::vector<num::Index> idx(static_cast<std::size_t>(n));
            for (num::Index r = 0; r < n; ++r) {
                const int v = batch.categories(r, static_cast<num::Index>(c));
                if (v < 0 || v >= table.rows()) {
                    throw SchemaError("TabularEncoder: category index out of range in column '" + cats[c]->name + "'");
                }
                idx[static_cast<std::size_t>(r)] = v;
            }
            parts.push_back(num::gather_rows(table, std::move(idx)));
        }
        if (batch.numerical.cols() > 0) {
            parts.push_back(num::Var<T>(batch.numerical.template cast<T>()));
        }
        return num::concat_cols(parts);
    }

    // `keep` (rows x input_width, entries 0/1) zeroes masked inputs and seeds
    // the attention prior with the same pattern; absent means all ones.
    TabForward<T> forward(const TabularBatch& batch, const num::Matrix<T>* keep = nullptr) const {
        num::Var<T> x = embed(batch);
        return forward_embedded(x, keep);
    }

    TabForward<T> forward_embedded(num::Var<T> x, const num::Matrix<T>* keep = nullptr) const {
        const num::Index n = x.rows();
        num::Var<T> prior(num::Matrix<T>::Ones(n, input_width_));
        if (keep != nullptr) {
            ehrtext::detail::require(keep->rows() == n && keep->cols() == input_width_, "forward: keep mask shape");
            x = num::mul(x, num::Var<T>(*keep));
            prior = num::Var<T>(*keep);
        }
        TabForward<T> out;
        num::Var<T> h = feature_transformer(x, 0);
        num::Var<T> a = num::slice_cols(h, cfg_.decision_width, cfg_.attention_width);
        num::Var<T> decision;
        const T gamma = static_cast<T>(cfg_.relaxation);
        for (int s = 1; s <= cfg_.steps; ++s) {
            const std::string step = "step" + std::to_string(s);
            num::Var<T> logits = num::linear(a, params_.get(step + ".att.w"), params_.get(step + ".att.b"));
            num::Var<T> scaled = num::mul(logits, prior);
            if (!scaled.value().allFinite()) {
                throw DivergedError("tabular encoder: non-finite attention logits at decision step " +
                                    std::to_string(s));
            }
            num::Var<T> mask = num::sparsemax_rows(scaled);
            out.masks.push_back(mask.value());
            prior = num::mul(prior, num::affine(mask, T(-1), gamma));
            h = feature_transformer(num::mul(mask, x), s);
            num::Var<T> d = num::relu(num::slice_cols(h, 0, cfg_.decision_width));
            a = num::slice_cols(h, cfg_.decision_width, cfg_.attention_width);
            decision = decision.defined() ? num::add(decision, d) : d;
            if (!h.value().allFinite()) {
                throw DivergedError("tabular encoder: non-finite activations at decision step " + std::to_string(s));
            }
        }
        out.embedding = num::linear(decision, params_.get("output.w"), params_.get("output.b"));
        if (!out.embedding.value().allFinite()) {
            throw DivergedError("tabular encoder: non-finite output embedding");
        }
        return out;
    }

    void apply_freeze_plan(Stage stage) { params_.set_frozen_groups(freeze_plan(stage)); }

private:
    void add_linear(const std::string& name, const std::string& group, int in, int out, num::Rng& rng) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
        params_.add(name + ".w", group, rng.normal_matrix<T>(in, out, stddev));
        params_.add(name + ".b", group, num::Matrix<T>::Zero(1, out));
    }

    void add_glu_block(const std::string& name, const std::string& group, int in, int out, num::Rng& rng) {
        add_linear(name, group, in, 2 * out, rng);
    }

    num::Var<T> glu_block(const num::Var<T>& x, const std::string& name) const {
        return num::glu(num::linear(x, params_.get(name + ".w"), params_.get(name + ".b")));
    }

    // Shared blocks followed by the step-specific blocks; every block after the
    // first is residual with sqrt(0.5) scaling.
    num::Var<T> feature_transformer(const num::Var<T>& x, int step) const {
        const T root_half = static_cast<T>(std::sqrt(0.5));
        num::Var<T> h = glu_block(x, "shared.0");
        for (int b = 1; b < cfg_.shared_blocks; ++b) {
            h = num::scale(num::add(h, glu_block(h, "shared." + std::to_string(b))), root_half);
        }
        const std::string prefix = "step" + std::to_string(step) + ".ft.";
        for (int b = 0; b < cfg_.step_blocks; ++b) {
            h = num::scale(num::add(h, glu_block(h, prefix + std::to_string(b))), root_half);
        }
        return h;
    }

    FeatureSchema schema_;
    TabNetConfig cfg_;
    num::ParameterStore<T> params_;
    std::vector<int> embed_dims_;
    std::vector<int> input_column_;
    int input_width_ = 0;
};

}  // namespace ehrtext::tab
