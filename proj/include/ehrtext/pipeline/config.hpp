#pragma once

// Run configuration shared by every stage. JSON files and flag overrides are
// merged onto the defaults; unknown keys are rejected.

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "ehrtext/data/split.hpp"
#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/adamw.hpp"
#include "ehrtext/tabular/encoder.hpp"
#include "ehrtext/text/encoder.hpp"

namespace ehrtext::pipeline {

struct StageSettings {
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    int epochs = 1;

    num::AdamWConfig adamw() const {
        num::AdamWConfig c;
        c.learning_rate = learning_rate;
        c.weight_decay = weight_decay;
        return c;
    }
};

struct RunConfig {
    std::uint64_t seed = 0;
    bool deterministic = true;
    int data_parallel = 1;
    int batch_size = 64;
    double temperature = 0.1;
    double mask_rate = 0.25;
    StageSettings masked{1e-3, 1e-4, 20};
    StageSettings contrastive{1e-4, 1e-4, 13};
    StageSettings finetune{5e-4, 1e-4, 15};
    tab::TabNetConfig tabnet;
    text::TextEncoderConfig text;  // vocab_size is set from the built vocabulary
    int shared_dim = 128;
    int vocab_min_frequency = 2;
    int recall_holdout = 100;
    std::string task;
    double fraction = 1.0;
    int subset = 0;
    data::SplitConfig split;

    void validate() const {
        for (const auto* s : {&masked, &contrastive, &finetune}) {
            if (!(s->learning_rate > 0.0)) throw ConfigError("config: learning rate must be positive");
            if (!(s->weight_decay >= 0.0)) throw ConfigError("config: weight decay must be non-negative");
            if (s->epochs < 1) throw ConfigError("config: epochs must be at least 1");
        }
        if (batch_size < 1) throw ConfigError("config: batch size must be at least 1");
        if (data_parallel < 1) throw ConfigError("config: data-parallel width must be at least 1");
        if (!(temperature > 0.0)) throw ConfigError("config: temperature must be positive");
        if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("config: mask rate must lie in (0, 1)");
        if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("config: fraction must lie in (0, 1]");
        if (vocab_min_frequency < 1) throw ConfigError("config: vocabulary minimum frequency must be at least 1");
        if (recall_holdout < 0) throw ConfigError("config: recall holdout must be non-negative");
        if (subset < 0) throw ConfigError("config: subset index must be non-negative");
    }
};

inline nlohmann::json to_json(const StageSettings& s) {
    return {{"learning_rate", s.learning_rate}, {"weight_decay", s.weight_decay}, {"epochs", s.epochs}};
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json text = text::to_json(c.text);
    text.erase("vocab_size");
    return {{"seed", c.seed},
            {"deterministic", c.deterministic},
            {"data_parallel", c.data_parallel},
            {"batch_size", c.batch_size},
            {"temperature", c.temperature},
            {"mask_rate", c.mask_rate},
            {"masked", to_json(c.masked)},
            {"contrastive", to_json(c.contrastive)},
            {"finetune", to_json(c.finetune)},
            {"tabnet", tab::to_json(c.tabnet)},
            {"text", text},
            {"shared_dim", c.shared_dim},
            {"vocab_min_frequency", c.vocab_min_frequency},
            {"recall_holdout", c.recall_holdout},
            {"task", c.task},
            {"fraction", c.fraction},
            {"subset", c.subset},
            {"split",
             {{"subsets", c.split.subsets},
              {"train_val_size", c.split.train_val_size},
              {"test_size", c.split.test_size},
              {"val_fraction", c.split.val_fraction}}}};
}

namespace detail {

// Overwrites the fields of `target` named in `patch`; keys absent from
// `target` are configuration errors.
inline void merge_known(nlohmann::json& target, const nlohmann::json& patch, const std::string& path) {
    if (!patch.is_object()) throw ConfigError("config: '" + path + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!target.contains(key)) throw ConfigError("config: unknown key '" + where + "'");
        if (target[key].is_object()) {
            merge_known(target[key], value, where);
        } else {
            target[key] = value;
        }
    }
}

inline StageSettings stage_from_json(const nlohmann::json& j) {
    return {j.at("learning_rate").get<double>(), j.at("weight_decay").get<double>(), j.at("epochs").get<int>()};
}

}  // namespace detail

// Applies `patch` on top of `base`. Type errors and unknown keys throw
// ConfigError; the result is validated.
inline RunConfig merge_config(const RunConfig& base, const nlohmann::json& patch) {
    nlohmann::json j = to_json(base);
    detail::merge_known(j, patch, "");
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        c.deterministic = j.at("deterministic").get<bool>();
        c.data_parallel = j.at("data_parallel").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.temperature = j.at("temperature").get<double>();
        c.mask_rate = j.at("mask_rate").get<double>();
        c.masked = detail::stage_from_json(j.at("masked"));
        c.contrastive = detail::stage_from_json(j.at("contrastive"));
        c.finetune = detail::stage_from_json(j.at("finetune"));
        c.tabnet = tab::tabnet_config_from_json(j.at("tabnet"));
        nlohmann::json text = j.at("text");
        text["vocab_size"] = base.text.vocab_size;
        c.text = text::text_config_from_json(text);
        c.shared_dim = j.at("shared_dim").get<int>();
        c.vocab_min_frequency = j.at("vocab_min_frequency").get<int>();
        c.recall_holdout = j.at("recall_holdout").get<int>();
        c.task = j.at("task").get<std::string>();
        c.fraction = j.at("fraction").get<double>();
        c.subset = j.at("subset").get<int>();
        const auto& s = j.at("split");
        c.split.subsets = s.at("subsets").get<int>();
        c.split.train_val_size = s.at("train_val_size").get<int>();
        c.split.test_size = s.at("test_size").get<int>();
        c.split.val_fraction = s.at("val_fraction").get<double>();
        c.split.seed = c.seed;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline RunConfig config_from_json(const nlohmann::json& j) { return merge_config(RunConfig{}, j); }

}  // namespace ehrtext::pipeline
