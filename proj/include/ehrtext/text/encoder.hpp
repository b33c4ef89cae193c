#pragma once

// Chunk-level transformer note encoder. Each chunk is encoded independently;
// a note's representation is the mean over its chunks of the final-layer CLS
// embedding.
//
// Layers are pre-norm: x + attn(ln(x)), then x + ffn(ln(x)), and a final
// layer norm. Only CLS rows are needed from the last layer, so its queries
// and feed-forward run on those rows alone. When the embeddings and the
// leading layers are frozen their output is fixed per note; PrefixState holds
// it so training only recomputes the trainable tail.

#include <cmath>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/ops.hpp"
#include "ehrtext/numerics/parameters.hpp"
#include "ehrtext/numerics/random.hpp"
#include "ehrtext/text/chunk.hpp"

namespace ehrtext::text {

struct TextEncoderConfig {
    int vocab_size = 0;
    int dim = 768;
    int heads = 8;
    int layers = 4;
    int ffn = 1024;
    int max_positions = kChunkSize;
    int frozen_layers = 2;
};

inline nlohmann::json to_json(const TextEncoderConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"dim", c.dim},         {"heads", c.heads},
            {"layers", c.layers},         {"ffn", c.ffn},         {"max_positions", c.max_positions},
            {"frozen_layers", c.frozen_layers}};
}

inline TextEncoderConfig text_config_from_json(const nlohmann::json& j) {
    TextEncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.dim = j.value("dim", c.dim);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.ffn = j.value("ffn", c.ffn);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.frozen_layers = j.value("frozen_layers", c.frozen_layers);
    return c;
}

// Hidden states of one note after the frozen prefix: concatenated chunk rows.
template <class T>
struct PrefixState {
    num::Matrix<T> hidden;
    std::vector<num::Segment> chunks;
    std::vector<unsigned char> key_mask;
};

template <class T>
class TextEncoder {
public:
    TextEncoder(TextEncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg_.vocab_size < 3 || cfg_.dim < 1 || cfg_.heads < 1 || cfg_.dim % cfg_.heads != 0 || cfg_.layers < 1 ||
            cfg_.ffn < 1 || cfg_.frozen_layers < 0 || cfg_.frozen_layers >= cfg_.layers) {
            throw ConfigError("TextEncoder: invalid configuration");
        }
        num::Rng rng(seed);
        const int d = cfg_.dim;
        params_.add("embed.tokens", "embeddings", rng.normal_matrix<T>(cfg_.vocab_size, d, 1.0));
        params_.add("embed.positions", "embeddings", rng.normal_matrix<T>(cfg_.max_positions, d, 0.1));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l);
            add_norm(p + ".ln1", p);
            add_linear(p + ".q", p, d, d, rng);
            add_linear(p + ".k", p, d, d, rng);
            add_linear(p + ".v", p, d, d, rng);
            add_linear(p + ".o", p, d, d, rng);
            add_norm(p + ".ln2", p);
            add_linear(p + ".ffn1", p, d, cfg_.ffn, rng);
            add_linear(p + ".ffn2", p, cfg_.ffn, d, rng);
        }
        add_norm("final_norm", "layer" + std::to_string(cfg_.layers - 1));
        apply_default_freeze();
    }

    const TextEncoderConfig& config() const { return cfg_; }
    num::ParameterStore<T>& params() { return params_; }
    const num::ParameterStore<T>& params() const { return params_; }
    int dim() const { return cfg_.dim; }

    // Embeddings and the first `frozen_layers` layers are frozen.
    std::set<std::string> frozen_groups() const {
        std::set<std::string> g = {"embeddings"};
        for (int l = 0; l < cfg_.frozen_layers; ++l) g.insert("layer" + std::to_string(l));
        return g;
    }
    void apply_default_freeze() { params_.set_frozen_groups(frozen_groups()); }
    void unfreeze_all() { params_.set_frozen_groups({}); }

    // True when embeddings and leading layers are frozen, so their output can
    // be cached.
    bool prefix_frozen() const {
        for (const auto& p : params_.all()) {
            if (prefix_group(p.group) && p.var.requires_grad()) return false;
        }
        return true;
    }

    // Hidden states of a note after the frozen prefix layers.
    PrefixState<T> prefix(const NoteChunks& note) const {
        num::NoGradGuard no_grad;
        PrefixState<T> st;
        num::Var<T> x = embed({&note}, st.chunks, st.key_mask);
        for (int l = 0; l < cfg_.frozen_layers; ++l) {
            x = layer(x, l, st.chunks, st.key_mask, false);
        }
        st.hidden = x.value();
        return st;
    }

    // Note representations (rows x dim) computed from scratch.
    num::Var<T> encode(const std::vector<const NoteChunks*>& notes,
                       std::vector<std::vector<num::Matrix<T>>>* last_attention = nullptr) const {
        std::vector<num::Segment> chunks;
        std::vector<unsigned char> key_mask;
        num::Var<T> x = embed(notes, chunks, key_mask);
        std::vector<num::Segment> note_groups = group_chunks(notes);
        return tail(x, 0, chunks, key_mask, note_groups, last_attention);
    }

    num::Var<T> encode(const NoteChunks& note) const { return encode(std::vector<const NoteChunks*>{&note}); }

    // Note representations starting from cached prefix states. Requires the
    // prefix to be frozen.
    num::Var<T> encode_from_prefix(const std::vector<const PrefixState<T>*>& states) const {
        if (!prefix_frozen()) {
            throw ContractViolation("encode_from_prefix: prefix layers are trainable; cache would be stale");
        }
        num::Index rows = 0;
        for (const auto* s : states) rows += s->hidden.rows();
        num::Matrix<T> stacked(rows, cfg_.dim);
        std::vector<num::Segment> chunks;
        std::vector<unsigned char> key_mask;
        std::vector<num::Segment> note_groups;
        num::Index at = 0;
        for (const auto* s : states) {
            stacked.middleRows(at, s->hidden.rows()) = s->hidden;
            note_groups.push_back({static_cast<num::Index>(chunks.size()), static_cast<num::Index>(s->chunks.size())});
            for (const auto& c : s->chunks) chunks.push_back({c.start + at, c.length});
            key_mask.insert(key_mask.end(), s->key_mask.begin(), s->key_mask.end());
            at += s->hidden.rows();
        }
        return tail(num::Var<T>(std::move(stacked)), cfg_.frozen_layers, chunks, key_mask, note_groups, nullptr);
    }

    // Attention probabilities of `layer_index` for a single note, per chunk and
    // head (queries x keys). The last layer reports CLS-query rows only.
    std::vector<std::vector<num::Matrix<T>>> attention_weights(const NoteChunks& note, int layer_index) const {
        num::NoGradGuard no_grad;
        std::vector<num::Segment> chunks;
        std::vector<unsigned char> key_mask;
        num::Var<T> x = embed({&note}, chunks, key_mask);
        std::vector<std::vector<num::Matrix<T>>> weights;
        for (int l = 0; l <= layer_index; ++l) {
            const bool last = l == cfg_.layers - 1;
            x = layer(x, l, chunks, key_mask, last, l == layer_index ? &weights : nullptr);
        }
        return weights;
    }

private:
    bool prefix_group(const std::string& group) const {
        if (group == "embeddings") return true;
        for (int l = 0; l < cfg_.frozen_layers; ++l) {
            if (group == "layer" + std::to_string(l)) return true;
        }
        return false;
    }

    void add_linear(const std::string& name, const std::string& group, int in, int out, num::Rng& rng) {
        params_.add(name + ".w", group, rng.normal_matrix<T>(in, out, 1.0 / std::sqrt(static_cast<double>(in))));
        params_.add(name + ".b", group, num::Matrix<T>::Zero(1, out));
    }

    void add_norm(const std::string& name, const std::string& group) {
        params_.add(name + ".g", group, num::Matrix<T>::Ones(1, cfg_.dim));
        params_.add(name + ".b", group, num::Matrix<T>::Zero(1, cfg_.dim));
    }

    static std::vector<num::Segment> group_chunks(const std::vector<const NoteChunks*>& notes) {
        std::vector<num::Segment> groups;
        num::Index at = 0;
        for (const auto* n : notes) {
            groups.push_back({at, static_cast<num::Index>(n->count())});
            at += static_cast<num::Index>(n->count());
        }
        return groups;
    }

    num::Var<T> embed(const std::vector<const NoteChunks*>& notes, std::vector<num::Segment>& chunks,
                      std::vector<unsigned char>& key_mask) const {
        std::vector<num::Index> token_rows;
        std::vector<num::Index> position_rows;
        for (const auto* note : notes) {
            if (note->count() == 0) throw ContractViolation("TextEncoder: note without chunks");
            for (std::size_t c = 0; c < note->count(); ++c) {
                const auto& ids = note->ids[c];
                if (ids.empty() || static_cast<int>(ids.size()) > cfg_.max_positions) {
                    throw ContractViolation("TextEncoder: chunk length outside [1, max_positions]");
                }
                if (ids.front() != kClsId) throw ContractViolation("TextEncoder: chunk does not start with CLS");
                chunks.push_back({static_cast<num::Index>(token_rows.size()), static_cast<num::Index>(ids.size())});
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    if (ids[i] < 0 || ids[i] >= cfg_.vocab_size) throw ContractViolation("TextEncoder: token id out of range");
                    token_rows.push_back(ids[i]);
                    position_rows.push_back(static_cast<num::Index>(i));
                }
                key_mask.insert(key_mask.end(), note->attention_mask[c].begin(), note->attention_mask[c].end());
            }
        }
        return num::add(num::gather_rows(params_.get("embed.tokens"), std::move(token_rows)),
                        num::gather_rows(params_.get("embed.positions"), std::move(position_rows)));
    }

    num::Var<T> norm(const num::Var<T>& x, const std::string& name) const {
        return num::layer_norm(x, params_.get(name + ".g"), params_.get(name + ".b"));
    }

    num::Var<T> lin(const num::Var<T>& x, const std::string& name) const {
        return num::linear(x, params_.get(name + ".w"), params_.get(name + ".b"));
    }

    // One transformer layer. With cls_only the output has one row per chunk.
    num::Var<T> layer(const num::Var<T>& x, int l, const std::vector<num::Segment>& chunks,
                      const std::vector<unsigned char>& key_mask, bool cls_only,
                      std::vector<std::vector<num::Matrix<T>>>* weights = nullptr) const {
        const std::string p = "layer" + std::to_string(l);
        num::Var<T> h = norm(x, p + ".ln1");
        num::Var<T> xq = x;
        num::Var<T> hq = h;
        std::vector<num::Segment> q_segments = chunks;
        if (cls_only) {
            std::vector<num::Index> cls;
            q_segments.clear();
            for (std::size_t c = 0; c < chunks.size(); ++c) {
                cls.push_back(chunks[c].start);
                q_segments.push_back({static_cast<num::Index>(c), 1});
            }
            xq = num::gather_rows(x, cls);
            hq = num::gather_rows(h, std::move(cls));
        }
        num::Var<T> q = lin(hq, p + ".q");
        num::Var<T> k = lin(h, p + ".k");
        num::Var<T> v = lin(h, p + ".v");
        num::Var<T> attn = num::attention(q, k, v, cfg_.heads, std::move(q_segments), chunks, &key_mask, weights);
        num::Var<T> x1 = num::add(xq, lin(attn, p + ".o"));
        num::Var<T> ff = lin(num::gelu(lin(norm(x1, p + ".ln2"), p + ".ffn1")), p + ".ffn2");
        num::Var<T> out = num::add(x1, ff);
        if (!out.value().allFinite()) {
            throw DivergedError("text encoder: non-finite activations in layer " + std::to_string(l));
        }
        return out;
    }

    num::Var<T> tail(num::Var<T> x, int first_layer, const std::vector<num::Segment>& chunks,
                     const std::vector<unsigned char>& key_mask, const std::vector<num::Segment>& note_groups,
                     std::vector<std::vector<num::Matrix<T>>>* last_attention) const {
        for (int l = first_layer; l < cfg_.layers; ++l) {
            const bool last = l == cfg_.layers - 1;
            x = layer(x, l, chunks, key_mask, last, last ? last_attention : nullptr);
        }
        num::Var<T> cls = norm(x, "final_norm");
        return num::segment_mean(cls, note_groups);
    }

    TextEncoderConfig cfg_;
    num::ParameterStore<T> params_;
};

}  // namespace ehrtext::text
