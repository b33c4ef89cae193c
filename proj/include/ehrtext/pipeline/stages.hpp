#pragma once

// The three training stages (masked tabular pretraining, EHR-text contrastive
// pretraining, downstream fine-tuning) and inference with a fine-tuned model.
//
// Every random draw comes from a stream derived from the run seed and a
// stage-qualified name, so a stage's output is a function of its config, data
// and init checkpoint.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrtext/contrastive/alignment.hpp"
#include "ehrtext/data/dataset.hpp"
#include "ehrtext/errors.hpp"
#include "ehrtext/evaluation/metrics.hpp"
#include "ehrtext/numerics/adamw.hpp"
#include "ehrtext/numerics/ops.hpp"
#include "ehrtext/numerics/fpenv.hpp"
#include "ehrtext/numerics/random.hpp"
#include "ehrtext/pipeline/checkpoint.hpp"
#include "ehrtext/pipeline/config.hpp"
#include "ehrtext/tabular/encoder.hpp"
#include "ehrtext/tabular/masked_pretrain.hpp"
#include "ehrtext/text/chunk.hpp"
#include "ehrtext/text/encoder.hpp"
#include "ehrtext/text/normalize.hpp"
#include "ehrtext/text/vocab.hpp"

namespace ehrtext::pipeline {

inline constexpr const char* kMaskedStage = "pretrain-masked";
inline constexpr const char* kContrastiveStage = "pretrain-cl";
inline constexpr const char* kFinetuneStage = "finetune";

struct EpochLog {
    std::string stage;
    int epoch = 0;
    double loss = 0.0;
    std::string metric_name;  // empty when the stage reports no metric
    double metric = 0.0;
};

inline nlohmann::json to_json(const EpochLog& l) {
    nlohmann::json j = {{"stage", l.stage}, {"epoch", l.epoch}, {"loss", l.loss}, {"metric", nullptr}};
    if (!l.metric_name.empty()) {
        j["metric"] = l.metric;
        j["metric_name"] = l.metric_name;
    }
    return j;
}

using EpochSink = std::function<void(const EpochLog&)>;

// Thrown when a loss or activation becomes non-finite. Carries the checkpoint
// of the last completed epoch, if any.
class TrainingDiverged : public DivergedError {
public:
    TrainingDiverged(const std::string& what, std::shared_ptr<const Checkpoint> last_good)
        : DivergedError(what), last_good_(std::move(last_good)) {}
    const std::shared_ptr<const Checkpoint>& last_good() const { return last_good_; }

private:
    std::shared_ptr<const Checkpoint> last_good_;
};

struct StageResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> logs;
};

// ---------------------------------------------------------------- downstream head

template <class T>
class DownstreamHead {
public:
    DownstreamHead(int input_dim, int hidden_dim, std::uint64_t seed) {
        num::Rng rng(seed);
        params_.add("fc1.w", "head", rng.normal_matrix<T>(input_dim, hidden_dim, std::sqrt(2.0 / input_dim)));
        params_.add("fc1.b", "head", num::Matrix<T>::Zero(1, hidden_dim));
        params_.add("fc2.w", "head", rng.normal_matrix<T>(hidden_dim, 1, 1.0 / std::sqrt(double(hidden_dim))));
        params_.add("fc2.b", "head", num::Matrix<T>::Zero(1, 1));
    }

    num::Var<T> logits(const num::Var<T>& embedding) const {
        num::Var<T> h = num::relu(num::linear(embedding, params_.get("fc1.w"), params_.get("fc1.b")));
        return num::linear(h, params_.get("fc2.w"), params_.get("fc2.b"));
    }

    num::Var<T> probabilities(const num::Var<T>& embedding) const { return num::sigmoid(logits(embedding)); }

    num::ParameterStore<T>& params() { return params_; }
    const num::ParameterStore<T>& params() const { return params_; }

private:
    num::ParameterStore<T> params_;
};

inline constexpr int kHeadHidden = 64;

// ---------------------------------------------------------------- data parallelism

// Contiguous shards of [0, n) whose sizes differ by at most one; at most n.
inline std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(std::size_t n, int width) {
    if (width < 1) throw ConfigError("data-parallel width must be at least 1");
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(width), std::max<std::size_t>(n, 1));
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t at = 0;
    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t len = n / k + (r < n % k ? 1 : 0);
        out.emplace_back(at, at + len);
        at += len;
    }
    return out;
}

// Computes parameter gradients for a batch of `rows` rows split across
// `width` workers. Each worker back-propagates the loss of its own shard; the
// shard gradients are then averaged, weighted by shard size, in worker order,
// and written back as the parameters' gradients. Returns the matching
// weighted loss. `shard_loss(begin, end)` returns the mean loss of that shard.
template <class T, class ShardLoss>
double data_parallel_backward(const std::vector<num::ParameterStore<T>*>& stores, std::size_t rows, int width,
                              ShardLoss&& shard_loss) {
    for (auto* s : stores) s->zero_grad();
    if (width == 1 || rows <= 1) {
        num::Var<T> loss = shard_loss(std::size_t{0}, rows);
        if (!std::isfinite(static_cast<double>(loss.item()))) throw DivergedError("non-finite loss");
        num::backward(loss);
        return static_cast<double>(loss.item());
    }
    std::vector<num::Var<T>> params;
    for (auto* s : stores) {
        for (auto& p : s->all()) {
            if (p.var.requires_grad()) params.push_back(p.var);
        }
    }
    std::vector<num::Matrix<T>> total;
    for (const auto& p : params) total.push_back(num::Matrix<T>::Zero(p.rows(), p.cols()));
    double loss_total = 0.0;
    for (const auto& [begin, end] : shard_ranges(rows, width)) {
        for (auto& p : params) p.zero_grad();
        num::Var<T> loss = shard_loss(begin, end);
        if (!std::isfinite(static_cast<double>(loss.item()))) throw DivergedError("non-finite loss");
        num::backward(loss);
        const T w = static_cast<T>(end - begin) / static_cast<T>(rows);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].has_grad()) total[i] += w * params[i].grad();
        }
        loss_total += static_cast<double>(w) * static_cast<double>(loss.item());
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].set_grad(std::move(total[i]));
    return loss_total;
}

namespace detail {

inline std::vector<std::size_t> slice(const std::vector<std::size_t>& v, std::size_t begin, std::size_t end) {
    return {v.begin() + static_cast<long>(begin), v.begin() + static_cast<long>(end)};
}

template <class M>
M rows_of(const M& m, std::size_t begin, std::size_t end) {
    return m.middleRows(static_cast<num::Index>(begin), static_cast<num::Index>(end - begin));
}

inline tab::TabularBatch rows_of(const tab::TabularBatch& b, std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    return b.select_rows(idx);
}

inline std::vector<int> binary_labels(const std::vector<int>& y, std::size_t rows, const std::string& what) {
    if (y.size() != rows) throw DataError(what + ": label count differs from row count");
    for (int v : y) {
        if (v != 0 && v != 1) throw DataError(what + ": labels must be 0 or 1");
    }
    return y;
}

inline tab::TabularEncoder<float> encoder_from(const Checkpoint& ckpt) {
    tab::TabularEncoder<float> enc(tab::schema_from_json(ckpt.meta.at("schema")),
                                   tab::tabnet_config_from_json(ckpt.meta.at("tabnet")), 0);
    import_params(ckpt, "tab/", enc.params());
    return enc;
}

}  // namespace detail

// Note text to encoder input: section stripping, normalization, whitespace
// tokens.
inline std::vector<std::string> note_tokens(const std::string& raw) {
    return text::split_whitespace(text::preprocess_note(raw));
}

// ---------------------------------------------------------------- masked pretraining

inline StageResult run_masked_pretrain(const RunConfig& cfg, const tab::RawTable& pool, const EpochSink& sink = {}) {
    cfg.validate();
    const num::FlushDenormals ftz;
    if (pool.rows.empty()) throw DataError("pretrain-masked: the pretraining pool is empty");
    const tab::FeatureSchema schema = tab::build_schema(pool, {data::kIdColumn});
    tab::TabularEncoder<float> enc(schema, cfg.tabnet, num::derive_seed(cfg.seed, "pretrain-masked/encoder"));
    enc.params().set_frozen_groups(tab::freeze_plan(tab::Stage::pretrain_masked));
    tab::ReconstructionHead<float> head(enc, num::derive_seed(cfg.seed, "pretrain-masked/head"));
    num::AdamW<float> opt_enc(enc.params(), cfg.masked.adamw());
    num::AdamW<float> opt_head(head.params(), cfg.masked.adamw());
    const tab::TabularBatch all = tab::encode_rows(schema, pool);
    const std::size_t n = pool.size();
    const auto columns = static_cast<num::Index>(schema.feature_count());

    StageResult result;
    auto snapshot = [&] {
        Checkpoint c;
        c.stage = kMaskedStage;
        nlohmann::json logs = nlohmann::json::array();
        for (const auto& l : result.logs) logs.push_back(to_json(l));
        c.meta = {{"config", to_json(cfg)},
                  {"schema", tab::to_json(schema)},
                  {"tabnet", tab::to_json(cfg.tabnet)},
                  {"pool_rows", n},
                  {"epochs", logs}};
        export_params(enc.params(), "tab/", c);
        export_params(head.params(), "recon/", c);
        export_optimizer(opt_enc, enc.params(), "tab/", c);
        export_optimizer(opt_head, head.params(), "recon/", c);
        return c;
    };
    std::shared_ptr<const Checkpoint> last_good;

    for (int epoch = 1; epoch <= cfg.masked.epochs; ++epoch) {
        const auto order = num::Rng(num::derive_seed(cfg.seed, "pretrain-masked/order", epoch)).permutation(n);
        num::Rng mask_rng(num::derive_seed(cfg.seed, "pretrain-masked/mask", epoch));
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            const tab::TabularBatch batch = all.select_rows(detail::slice(order, start, end));
            const auto rows = static_cast<num::Index>(end - start);
            const num::Matrix<float> mask = tab::sample_cell_mask<float>(rows, columns, cfg.mask_rate, mask_rng);
            const num::Matrix<float> keep = tab::keep_pattern(enc, mask);
            double loss = 0.0;
            try {
                loss = data_parallel_backward<float>(
                    {&enc.params(), &head.params()}, end - start, cfg.data_parallel,
                    [&](std::size_t b, std::size_t e) {
                        const num::Matrix<float> m = detail::rows_of(mask, b, e);
                        if (m.sum() == 0.0f) return num::Var<float>::scalar(0.0f);
                        const num::Matrix<float> k = detail::rows_of(keep, b, e);
                        const tab::TabularBatch sub = detail::rows_of(batch, b, e);
                        return head.loss(enc.forward(sub, &k).embedding, sub, m);
                    });
            } catch (const DivergedError& e) {
                throw TrainingDiverged(std::string("pretrain-masked: ") + e.what() + " in epoch " +
                                           std::to_string(epoch),
                                       last_good);
            }
            opt_enc.step();
            opt_head.step();
            total += loss * static_cast<double>(end - start);
        }
        result.logs.push_back({kMaskedStage, epoch, total / static_cast<double>(n), "", 0.0});
        if (sink) sink(result.logs.back());
        last_good = std::make_shared<const Checkpoint>(snapshot());
    }
    result.checkpoint = *last_good;
    return result;
}

// ---------------------------------------------------------------- contrastive pretraining

struct ContrastiveResult : StageResult {
    double final_loss = 0.0;
    double final_recall = 0.0;
    std::size_t holdout = 0;
};

// Recall@1 over consecutive blocks of `block` pairs, averaged with weights
// proportional to block size. Blocks with fewer than two pairs are skipped.
inline double blocked_recall(const num::Matrix<float>& ze, const num::Matrix<float>& zt, std::size_t block) {
    const auto n = static_cast<std::size_t>(ze.rows());
    double hits = 0.0;
    std::size_t counted = 0;
    for (std::size_t start = 0; start < n; start += block) {
        const std::size_t len = std::min(block, n - start);
        if (len < 2) continue;
        const auto s = static_cast<num::Index>(start);
        const auto l = static_cast<num::Index>(len);
        hits += contrastive::retrieval_recall_at_k<float>(ze.middleRows(s, l), zt.middleRows(s, l), 1) *
                static_cast<double>(len);
        counted += len;
    }
    return counted == 0 ? 0.0 : hits / static_cast<double>(counted);
}

inline constexpr std::size_t kRecallBlock = 100;

// Trains the tabular encoder (from a masked checkpoint), the unfrozen text
// layers and both projections on the symmetric contrastive loss. A held-out
// slice of the pool, at most `recall_holdout` pairs and never more than a
// fifth of it, is kept out of training and scored with recall@1 each epoch.
inline ContrastiveResult run_contrastive_pretrain(const RunConfig& cfg, const data::PairedDataset& pool,
                                                  const Checkpoint& init, const EpochSink& sink = {}) {
    cfg.validate();
    const num::FlushDenormals ftz;
    if (init.stage != kMaskedStage) {
        throw ConfigError("pretrain-cl: init checkpoint has stage '" + init.stage + "', expected '" + kMaskedStage +
                          "'");
    }
    pool.validate();
    const std::size_t n = pool.size();
    const std::size_t holdout = std::min(static_cast<std::size_t>(cfg.recall_holdout), n / 5);
    if (n - holdout < 2) throw DataError("pretrain-cl: need at least two training pairs");

    const auto perm = num::Rng(num::derive_seed(cfg.seed, "pretrain-cl/holdout")).permutation(n);
    std::vector<std::size_t> held(perm.begin(), perm.begin() + static_cast<long>(holdout));
    std::vector<std::size_t> train(perm.begin() + static_cast<long>(holdout), perm.end());
    std::sort(held.begin(), held.end());
    std::sort(train.begin(), train.end());

    tab::TabularEncoder<float> enc = detail::encoder_from(init);
    enc.params().set_frozen_groups(tab::freeze_plan(tab::Stage::pretrain_cl));
    const tab::TabularBatch all = tab::encode_rows(enc.schema(), pool.table);

    std::vector<std::vector<std::string>> tokens;
    tokens.reserve(n);
    for (const auto& note : pool.notes) tokens.push_back(note_tokens(note));
    std::vector<std::vector<std::string>> train_docs;
    for (std::size_t i : train) train_docs.push_back(tokens[i]);
    const text::Vocab vocab = text::Vocab::build(train_docs, cfg.vocab_min_frequency);

    text::TextEncoderConfig tcfg = cfg.text;
    tcfg.vocab_size = vocab.size();
    text::TextEncoder<float> txt(tcfg, num::derive_seed(cfg.seed, "pretrain-cl/text"));
    std::vector<text::PrefixState<float>> prefixes;
    prefixes.reserve(n);
    for (const auto& t : tokens) prefixes.push_back(txt.prefix(text::chunk(vocab.encode(t), tcfg.max_positions)));

    const contrastive::ProjectionConfig pcfg{enc.output_dim(), tcfg.dim, cfg.shared_dim};
    contrastive::ProjectionHeads<float> proj(pcfg, num::derive_seed(cfg.seed, "pretrain-cl/projection"));
    num::AdamW<float> opt_enc(enc.params(), cfg.contrastive.adamw());
    num::AdamW<float> opt_txt(txt.params(), cfg.contrastive.adamw());
    num::AdamW<float> opt_proj(proj.params(), cfg.contrastive.adamw());
    const num::Var<float> tau = num::Var<float>::scalar(static_cast<float>(cfg.temperature));

    // Projected embeddings of the given pairs. With several workers each one
    // embeds its shard and the shards are gathered before the loss, so every
    // row still sees the whole batch as negatives.
    auto embed_pairs = [&](const std::vector<std::size_t>& idx, int width) {
        std::vector<num::Var<float>> ze_parts;
        std::vector<num::Var<float>> zt_parts;
        for (const auto& [b, e] : shard_ranges(idx.size(), width)) {
            const auto part = detail::slice(idx, b, e);
            std::vector<const text::PrefixState<float>*> states;
            for (std::size_t i : part) states.push_back(&prefixes[i]);
            auto [ze, zt] = proj.project(enc.forward(all.select_rows(part)).embedding, txt.encode_from_prefix(states));
            ze_parts.push_back(ze);
            zt_parts.push_back(zt);
        }
        if (ze_parts.size() == 1) return std::make_pair(ze_parts[0], zt_parts[0]);
        return std::make_pair(num::concat_rows(ze_parts), num::concat_rows(zt_parts));
    };

    ContrastiveResult result;
    result.holdout = holdout;
    auto snapshot = [&] {
        Checkpoint c;
        c.stage = kContrastiveStage;
        nlohmann::json logs = nlohmann::json::array();
        for (const auto& l : result.logs) logs.push_back(to_json(l));
        std::vector<std::string> held_ids;
        for (std::size_t i : held) held_ids.push_back(pool.ids[i]);
        c.meta = {{"config", to_json(cfg)},
                  {"schema", tab::to_json(enc.schema())},
                  {"tabnet", tab::to_json(enc.config())},
                  {"text", text::to_json(tcfg)},
                  {"vocab", vocab.to_json()},
                  {"projection",
                   {{"tabular_dim", pcfg.tabular_dim}, {"text_dim", pcfg.text_dim}, {"shared_dim", pcfg.shared_dim}}},
                  {"holdout_ids", held_ids},
                  {"epochs", logs}};
        export_params(enc.params(), "tab/", c);
        export_params(txt.params(), "text/", c);
        export_params(proj.params(), "proj/", c);
        export_optimizer(opt_enc, enc.params(), "tab/", c);
        export_optimizer(opt_txt, txt.params(), "text/", c);
        export_optimizer(opt_proj, proj.params(), "proj/", c);
        return c;
    };
    std::shared_ptr<const Checkpoint> last_good;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 1; epoch <= cfg.contrastive.epochs; ++epoch) {
        const auto order = num::Rng(num::derive_seed(cfg.seed, "pretrain-cl/order", epoch)).permutation(train.size());
        double total = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < train.size(); start += batch) {
            const std::size_t end = std::min(train.size(), start + batch);
            if (end - start < 2) continue;
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < end; ++i) idx.push_back(train[order[i]]);
            enc.params().zero_grad();
            txt.params().zero_grad();
            proj.params().zero_grad();
            double loss = 0.0;
            try {
                auto [ze, zt] = embed_pairs(idx, cfg.data_parallel);
                num::Var<float> l = contrastive::clip_loss(ze, zt, tau);
                loss = static_cast<double>(l.item());
                if (!std::isfinite(loss)) throw DivergedError("non-finite loss");
                num::backward(l);
            } catch (const DivergedError& e) {
                throw TrainingDiverged(std::string("pretrain-cl: ") + e.what() + " in epoch " + std::to_string(epoch),
                                       last_good);
            }
            opt_enc.step();
            opt_txt.step();
            opt_proj.step();
            total += loss * static_cast<double>(idx.size());
            seen += idx.size();
        }
        result.final_loss = total / static_cast<double>(seen);
        EpochLog log{kContrastiveStage, epoch, result.final_loss, "", 0.0};
        if (holdout >= 2) {
            num::NoGradGuard no_grad;
            auto [ze, zt] = embed_pairs(held, 1);
            result.final_recall = blocked_recall(ze.value(), zt.value(), kRecallBlock);
            log.metric_name = "recall@1";
            log.metric = result.final_recall;
        }
        result.logs.push_back(log);
        if (sink) sink(log);
        last_good = std::make_shared<const Checkpoint>(snapshot());
    }
    result.checkpoint = *last_good;
    return result;
}

// ---------------------------------------------------------------- fine-tuning and inference

struct LabeledRows {
    tab::RawTable rows;
    std::vector<int> labels;
};

inline LabeledRows labeled_rows(const data::PairedDataset& ds, const std::vector<std::size_t>& idx,
                                const std::string& task) {
    const auto& y = ds.task_labels(task);
    LabeledRows out;
    out.rows = ds.table.select_rows(idx);
    for (std::size_t i : idx) out.labels.push_back(y.at(i));
    return out;
}

// A fine-tuned encoder and head rebuilt from a checkpoint.
class Classifier {
public:
    explicit Classifier(const Checkpoint& ckpt)
        : enc_(checked(ckpt)),
          head_(enc_.output_dim(), ckpt.meta.at("head_hidden").get<int>(), 0) {
        import_params(ckpt, "head/", head_.params());
    }

    const tab::FeatureSchema& schema() const { return enc_.schema(); }

    std::vector<double> logits(const tab::RawTable& rows) const {
        const tab::TabularBatch batch = tab::encode_rows(enc_.schema(), rows);
        num::NoGradGuard no_grad;
        const num::FlushDenormals ftz;
        const num::Matrix<float> z = head_.logits(enc_.forward(batch).embedding).value();
        std::vector<double> out(static_cast<std::size_t>(z.rows()));
        for (num::Index i = 0; i < z.rows(); ++i) out[static_cast<std::size_t>(i)] = z(i, 0);
        return out;
    }

    // Probabilities in the open interval (0, 1).
    std::vector<double> probabilities(const tab::RawTable& rows) const {
        std::vector<double> p = logits(rows);
        for (double& v : p) {
            v = 1.0 / (1.0 + std::exp(-v));
            v = std::clamp(v, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
        }
        return p;
    }

private:
    static tab::TabularEncoder<float> checked(const Checkpoint& ckpt) {
        if (ckpt.stage != kFinetuneStage) {
            throw ConfigError("predict: checkpoint has stage '" + ckpt.stage + "', expected '" + kFinetuneStage + "'");
        }
        return detail::encoder_from(ckpt);
    }

    tab::TabularEncoder<float> enc_;
    DownstreamHead<float> head_;
};

struct FinetuneResult : StageResult {
    int best_epoch = 0;
    double best_val_auc = 0.0;
};

// Fine-tunes the tabular encoder of `init` with a fresh downstream head on
// binary cross-entropy and returns the epoch with the highest validation AUC
// (the earliest on ties).
inline FinetuneResult run_finetune(const RunConfig& cfg, const LabeledRows& train, const LabeledRows& val,
                                   const Checkpoint& init, const std::string& task, const EpochSink& sink = {}) {
    cfg.validate();
    const num::FlushDenormals ftz;
    if ((init.stage != kMaskedStage && init.stage != kContrastiveStage) || !init.has_prefix("tab/")) {
        throw ConfigError("finetune: init checkpoint (stage '" + init.stage + "') does not hold a pretrained tabular encoder");
    }
    if (train.rows.rows.empty()) throw DataError("finetune: training split is empty");
    const auto y_train = detail::binary_labels(train.labels, train.rows.size(), "finetune");
    const auto y_val = detail::binary_labels(val.labels, val.rows.size(), "finetune validation");
    const int positives = static_cast<int>(std::count(y_train.begin(), y_train.end(), 1));
    if (positives == 0 || positives == static_cast<int>(y_train.size())) {
        throw DataError("finetune: training labels for task '" + task + "' contain a single class");
    }

    tab::TabularEncoder<float> enc = detail::encoder_from(init);
    enc.params().set_frozen_groups(tab::freeze_plan(tab::Stage::finetune));
    DownstreamHead<float> head(enc.output_dim(), kHeadHidden, num::derive_seed(cfg.seed, "finetune/head"));
    num::AdamW<float> opt_enc(enc.params(), cfg.finetune.adamw());
    num::AdamW<float> opt_head(head.params(), cfg.finetune.adamw());
    const tab::TabularBatch all = tab::encode_rows(enc.schema(), train.rows);
    const tab::TabularBatch val_batch = tab::encode_rows(enc.schema(), val.rows);
    std::vector<float> y_float(y_train.begin(), y_train.end());
    const std::size_t n = train.rows.size();

    FinetuneResult result;
    result.best_val_auc = -1.0;
    std::shared_ptr<const Checkpoint> best;
    auto snapshot = [&] {
        Checkpoint c;
        c.stage = kFinetuneStage;
        c.meta = {{"config", to_json(cfg)},
                  {"schema", tab::to_json(enc.schema())},
                  {"tabnet", tab::to_json(enc.config())},
                  {"head_hidden", kHeadHidden},
                  {"task", task},
                  {"init_stage", init.stage},
                  {"best_epoch", result.best_epoch},
                  {"best_val_auc", result.best_val_auc}};
        export_params(enc.params(), "tab/", c);
        export_params(head.params(), "head/", c);
        export_optimizer(opt_enc, enc.params(), "tab/", c);
        export_optimizer(opt_head, head.params(), "head/", c);
        return c;
    };

    for (int epoch = 1; epoch <= cfg.finetune.epochs; ++epoch) {
        const auto order = num::Rng(num::derive_seed(cfg.seed, "finetune/order", epoch)).permutation(n);
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            const auto idx = detail::slice(order, start, end);
            const tab::TabularBatch batch = all.select_rows(idx);
            std::vector<float> y;
            for (std::size_t i : idx) y.push_back(y_float[i]);
            double loss = 0.0;
            try {
                loss = data_parallel_backward<float>(
                    {&enc.params(), &head.params()}, idx.size(), cfg.data_parallel,
                    [&](std::size_t b, std::size_t e) {
                        const num::Var<float> z = head.logits(enc.forward(detail::rows_of(batch, b, e)).embedding);
                        return num::bce_with_logits<float>(z, std::span<const float>(y.data() + b, e - b));
                    });
            } catch (const DivergedError& e) {
                throw TrainingDiverged(std::string("finetune: ") + e.what() + " in epoch " + std::to_string(epoch),
                                       best);
            }
            opt_enc.step();
            opt_head.step();
            total += loss * static_cast<double>(end - start);
        }
        double auc = 0.0;
        {
            num::NoGradGuard no_grad;
            const num::Matrix<float> z = head.logits(enc.forward(val_batch).embedding).value();
            std::vector<double> scores(z.data(), z.data() + z.size());
            auc = eval::auroc(scores, y_val);
        }
        result.logs.push_back({kFinetuneStage, epoch, total / static_cast<double>(n), "val_auc", auc});
        if (sink) sink(result.logs.back());
        if (auc > result.best_val_auc) {
            result.best_val_auc = auc;
            result.best_epoch = epoch;
            best = std::make_shared<const Checkpoint>(snapshot());
        }
    }
    result.checkpoint = *best;
    nlohmann::json logs = nlohmann::json::array();
    for (const auto& l : result.logs) logs.push_back(to_json(l));
    result.checkpoint.meta["epochs"] = logs;
    return result;
}

// Probabilities for `rows` from a fine-tuned checkpoint.
inline std::vector<double> predict(const Checkpoint& ckpt, const tab::RawTable& rows) {
    return Classifier(ckpt).probabilities(rows);
}

}  // namespace ehrtext::pipeline
