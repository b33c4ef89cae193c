#pragma once

// Leakage-safe partition of a paired dataset into downstream subsets and a
// disjoint pretraining pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/random.hpp"

namespace ehrtext::data {

struct SplitConfig {
    int subsets = 5;
    int train_val_size = 600;
    int test_size = 250;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct SubsetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;

    friend bool operator==(const SubsetSplit&, const SubsetSplit&) = default;
};

struct SplitPlan {
    std::vector<SubsetSplit> subsets;
    std::vector<std::size_t> pretrain_pool;
    std::size_t dataset_size = 0;

    friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

inline SplitPlan make_split_plan(std::size_t dataset_size, const SplitConfig& cfg) {
    if (cfg.subsets < 1 || cfg.train_val_size < 2 || cfg.test_size < 1) {
        throw ConfigError("split: subset count and sizes must be positive");
    }
    if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) {
        throw ConfigError("split: val_fraction must lie strictly between 0 and 1");
    }
    const std::size_t per_subset = static_cast<std::size_t>(cfg.train_val_size + cfg.test_size);
    const std::size_t required = per_subset * static_cast<std::size_t>(cfg.subsets);
    if (required >= dataset_size) {
        throw DataError("split: " + std::to_string(cfg.subsets) + " subsets need " + std::to_string(required) +
                        " pairs plus a non-empty pretraining pool; dataset has " + std::to_string(dataset_size));
    }
    const auto val_count = static_cast<std::size_t>(std::lround(cfg.val_fraction * cfg.train_val_size));
    if (val_count < 1 || val_count >= static_cast<std::size_t>(cfg.train_val_size)) {
        throw ConfigError("split: validation split would be empty or cover all of train+val");
    }

    num::Rng rng(num::derive_seed(cfg.seed, "split"));
    const std::vector<std::size_t> order = rng.permutation(dataset_size);
    SplitPlan plan;
    plan.dataset_size = dataset_size;
    std::size_t pos = 0;
    for (int s = 0; s < cfg.subsets; ++s) {
        SubsetSplit sub;
        const std::size_t train_count = static_cast<std::size_t>(cfg.train_val_size) - val_count;
        sub.train.assign(order.begin() + pos, order.begin() + pos + train_count);
        pos += train_count;
        sub.val.assign(order.begin() + pos, order.begin() + pos + val_count);
        pos += val_count;
        sub.test.assign(order.begin() + pos, order.begin() + pos + cfg.test_size);
        pos += cfg.test_size;
        std::sort(sub.train.begin(), sub.train.end());
        std::sort(sub.val.begin(), sub.val.end());
        std::sort(sub.test.begin(), sub.test.end());
        plan.subsets.push_back(std::move(sub));
    }
    plan.pretrain_pool.assign(order.begin() + pos, order.end());
    std::sort(plan.pretrain_pool.begin(), plan.pretrain_pool.end());
    return plan;
}

// Scales the subset sizes down when `cfg` asks for more pairs than the
// dataset holds, keeping the ratio of subsets to pretraining pool of the
// default plan (85% in subsets). Plans that fit are returned unchanged.
inline SplitConfig fit_split(SplitConfig cfg, std::size_t dataset_size) {
    const auto per_subset = static_cast<std::size_t>(cfg.train_val_size + cfg.test_size);
    const std::size_t required = static_cast<std::size_t>(cfg.subsets) * per_subset;
    if (required < dataset_size) return cfg;
    const double f = 0.85 * static_cast<double>(dataset_size) / static_cast<double>(required);
    cfg.train_val_size = static_cast<int>(std::floor(cfg.train_val_size * f));
    cfg.test_size = static_cast<int>(std::floor(cfg.test_size * f));
    return cfg;
}

// Deterministic half (rounded up) of a training split for the reduced-data runs.
inline std::vector<std::size_t> training_fraction(const std::vector<std::size_t>& train, double fraction,
                                                  std::uint64_t seed, int subset) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("training fraction must lie in (0, 1]");
    if (fraction == 1.0) return train;
    num::Rng rng(num::derive_seed(seed, "fraction", static_cast<std::uint64_t>(subset)));
    std::vector<std::size_t> shuffled = train;
    rng.shuffle(shuffled);
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * train.size())));
    shuffled.resize(keep);
    std::sort(shuffled.begin(), shuffled.end());
    return shuffled;
}

inline nlohmann::json to_json(const SplitPlan& p) {
    nlohmann::json subsets = nlohmann::json::array();
    for (const auto& s : p.subsets) subsets.push_back({{"train", s.train}, {"val", s.val}, {"test", s.test}});
    return {{"dataset_size", p.dataset_size}, {"subsets", subsets}, {"pretrain_pool", p.pretrain_pool}};
}

inline SplitPlan split_plan_from_json(const nlohmann::json& j) {
    SplitPlan p;
    p.dataset_size = j.at("dataset_size").get<std::size_t>();
    for (const auto& s : j.at("subsets")) {
        p.subsets.push_back({s.at("train").get<std::vector<std::size_t>>(), s.at("val").get<std::vector<std::size_t>>(),
                             s.at("test").get<std::vector<std::size_t>>()});
    }
    p.pretrain_pool = j.at("pretrain_pool").get<std::vector<std::size_t>>();
    return p;
}

}  // namespace ehrtext::data
