#pragma once

// Multi-subset comparison of initializations and its report: per variant and
// training fraction, the test AUC of every subset, their mean and standard
// deviation, and Welch t-tests of the reference variant against the others.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrtext/data/dataset.hpp"
#include "ehrtext/data/split.hpp"
#include "ehrtext/errors.hpp"
#include "ehrtext/evaluation/metrics.hpp"
#include "ehrtext/numerics/random.hpp"
#include "ehrtext/pipeline/stages.hpp"

namespace ehrtext::eval {

inline constexpr const char* kReferenceVariant = "cl-init";

struct SeedResults {
    std::string task;
    std::string variant;
    double fraction = 1.0;
    std::vector<double> aucs;  // one per subset, in subset order
};

struct ReportRow {
    std::string variant;
    double fraction = 1.0;
    Summary summary;
    double min = 0.0;
    double max = 0.0;
    std::size_t seeds = 0;
};

struct PairwiseTest {
    std::string reference;
    std::string baseline;
    double fraction = 1.0;
    TTest test;
};

struct Report {
    std::string task;
    std::vector<SeedResults> results;
    std::vector<ReportRow> rows;        // sorted by variant, then fraction descending
    std::vector<PairwiseTest> tests;    // reference against each other variant per fraction

    const ReportRow& row(const std::string& variant, double fraction) const {
        for (const auto& r : rows) {
            if (r.variant == variant && r.fraction == fraction) return r;
        }
        throw InvalidInput("report has no row for " + variant + " at fraction " + std::to_string(fraction));
    }

    const SeedResults& result(const std::string& variant, double fraction) const {
        for (const auto& r : results) {
            if (r.variant == variant && r.fraction == fraction) return r;
        }
        throw InvalidInput("report has no results for " + variant + " at fraction " + std::to_string(fraction));
    }
};

// Aggregates per-seed results. T-tests compare `reference` against every other
// variant at each fraction both share; none are run when it is absent.
inline Report build_report(const std::string& task, std::vector<SeedResults> results,
                           const std::string& reference = kReferenceVariant) {
    std::sort(results.begin(), results.end(), [](const SeedResults& a, const SeedResults& b) {
        return a.variant != b.variant ? a.variant < b.variant : a.fraction > b.fraction;
    });
    Report rep;
    rep.task = task;
    for (const auto& r : results) {
        if (r.task != task) throw InvalidInput("report: results for task '" + r.task + "' mixed into '" + task + "'");
        for (double a : r.aucs) {
            if (!(a >= 0.0 && a <= 1.0)) throw InvalidInput("report: AUC outside [0, 1]");
        }
        ReportRow row;
        row.variant = r.variant;
        row.fraction = r.fraction;
        row.summary = aggregate(r.aucs);
        row.min = *std::min_element(r.aucs.begin(), r.aucs.end());
        row.max = *std::max_element(r.aucs.begin(), r.aucs.end());
        row.seeds = r.aucs.size();
        rep.rows.push_back(row);
    }
    for (const auto& ref : results) {
        if (ref.variant != reference) continue;
        for (const auto& other : results) {
            if (other.variant == reference || other.fraction != ref.fraction) continue;
            if (ref.aucs.size() < 2 || other.aucs.size() < 2) continue;
            rep.tests.push_back({reference, other.variant, ref.fraction, welch_ttest(ref.aucs, other.aucs)});
        }
    }
    rep.results = std::move(results);
    return rep;
}

inline nlohmann::json ttests_json(const Report& rep) {
    nlohmann::json tests = nlohmann::json::array();
    for (const auto& t : rep.tests) {
        nlohmann::json j = {{"reference", t.reference}, {"baseline", t.baseline}, {"fraction", t.fraction},
                            {"p", t.test.p},           {"df", t.test.df}};
        j["t"] = std::isfinite(t.test.t) ? nlohmann::json(t.test.t) : nlohmann::json(t.test.t > 0 ? "inf" : "-inf");
        tests.push_back(j);
    }
    return tests;
}

inline nlohmann::json to_json(const Report& rep) {
    nlohmann::json results = nlohmann::json::array();
    for (const auto& r : rep.results) {
        results.push_back({{"variant", r.variant}, {"fraction", r.fraction}, {"aucs", r.aucs}});
    }
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows) {
        rows.push_back({{"variant", r.variant},
                        {"fraction", r.fraction},
                        {"mean", r.summary.mean},
                        {"std", r.summary.stddev},
                        {"min", r.min},
                        {"max", r.max},
                        {"seeds", r.seeds}});
    }
    return {{"task", rep.task}, {"results", results}, {"rows", rows}, {"ttests", ttests_json(rep)}};
}

inline std::vector<SeedResults> results_from_json(const nlohmann::json& j) {
    std::vector<SeedResults> out;
    try {
        const std::string task = j.at("task").get<std::string>();
        for (const auto& r : j.at("results")) {
            out.push_back({task, r.at("variant").get<std::string>(), r.at("fraction").get<double>(),
                           r.at("aucs").get<std::vector<double>>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed results JSON: ") + e.what());
    }
    return out;
}

inline std::string fraction_label(double f) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g%%", f * 100.0);
    return buf;
}

inline void write_report_csv(std::ostream& out, const Report& rep) {
    out << "task,variant,fraction,mean_auc,std_auc,seeds,aucs\n";
    for (const auto& r : rep.results) {
        const auto& row = rep.row(r.variant, r.fraction);
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%s,%g,%.6f,%.6f,%zu,", rep.task.c_str(), r.variant.c_str(), r.fraction,
                      row.summary.mean, row.summary.stddev, row.seeds);
        out << buf;
        for (std::size_t i = 0; i < r.aucs.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%s%.6f", i ? ";" : "", r.aucs[i]);
            out << buf;
        }
        out << "\n";
    }
}

// Variants as rows, fractions as columns, cells "mean (±std)".
inline std::string format_report_table(const Report& rep) {
    std::vector<double> fractions;
    std::vector<std::string> variants;
    for (const auto& r : rep.rows) {
        if (std::find(fractions.begin(), fractions.end(), r.fraction) == fractions.end()) fractions.push_back(r.fraction);
        if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    }
    std::sort(fractions.rbegin(), fractions.rend());
    std::size_t width = 5;
    for (const auto& v : variants) width = std::max(width, v.size());
    std::ostringstream out;
    out << "Mean test AUC, task " << rep.task << "\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(width), "Model");
    out << buf;
    for (double f : fractions) {
        std::snprintf(buf, sizeof(buf), "  %-22s", (fraction_label(f) + " training data").c_str());
        out << buf;
    }
    out << "\n";
    for (const auto& v : variants) {
        std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(width), v.c_str());
        out << buf;
        for (double f : fractions) {
            std::string cell = "-";
            for (const auto& r : rep.rows) {
                if (r.variant == v && r.fraction == f) cell = format_mean_std(r.summary.mean, r.summary.stddev);
            }
            // "±" is two bytes in UTF-8; pad by display width.
            const std::size_t display = cell.size() - (cell.find("±") != std::string::npos ? 1 : 0);
            out << "  " << cell << std::string(display < 22 ? 22 - display : 0, ' ');
        }
        out << "\n";
    }
    for (const auto& t : rep.tests) {
        std::snprintf(buf, sizeof(buf), "%s vs %s at %s: t = %.4f, p = %.4f\n", t.reference.c_str(),
                      t.baseline.c_str(), fraction_label(t.fraction).c_str(), t.test.t, t.test.p);
        out << buf;
    }
    return out.str();
}

// ---------------------------------------------------------------- running a comparison

struct ComparisonProgress {
    std::string variant;
    double fraction = 1.0;
    int subset = 0;
    double test_auc = 0.0;
    int best_epoch = 0;
};

// Fine-tunes every variant's init checkpoint on each subset's training split
// (reduced to each fraction), selects the best validation epoch and scores the
// subset's test split. Fine-tuning for a subset uses the same seed for every
// variant and fraction. An undefined AUC aborts the comparison.
inline Report run_comparison(const pipeline::RunConfig& cfg, const data::PairedDataset& ds, const data::SplitPlan& plan,
                             const std::string& task, const std::map<std::string, const pipeline::Checkpoint*>& variants,
                             const std::vector<double>& fractions = {1.0, 0.5},
                             const std::function<void(const ComparisonProgress&)>& progress = {}) {
    if (variants.empty()) throw ConfigError("comparison: no variants");
    if (plan.dataset_size != ds.size()) throw DataError("comparison: split plan does not match the dataset size");
    std::vector<SeedResults> results;
    for (const auto& [name, init] : variants) {
        for (double fraction : fractions) {
            SeedResults sr{task, name, fraction, {}};
            for (std::size_t s = 0; s < plan.subsets.size(); ++s) {
                const auto& sub = plan.subsets[s];
                const int subset = static_cast<int>(s);
                pipeline::RunConfig run = cfg;
                run.task = task;
                run.fraction = fraction;
                run.subset = subset;
                run.seed = num::derive_seed(cfg.seed, "finetune/subset", static_cast<std::uint64_t>(s));
                const auto train_idx = data::training_fraction(sub.train, fraction, cfg.seed, subset);
                double auc = 0.0;
                int best_epoch = 0;
                try {
                    const auto ft = pipeline::run_finetune(run, pipeline::labeled_rows(ds, train_idx, task),
                                                           pipeline::labeled_rows(ds, sub.val, task), *init, task);
                    const auto test = pipeline::labeled_rows(ds, sub.test, task);
                    auc = auroc(pipeline::Classifier(ft.checkpoint).logits(test.rows), test.labels);
                    best_epoch = ft.best_epoch;
                } catch (const UndefinedAuc& e) {
                    throw UndefinedAuc("comparison: variant " + name + ", fraction " + fraction_label(fraction) +
                                       ", subset " + std::to_string(s) + ": " + e.what());
                }
                sr.aucs.push_back(auc);
                if (progress) progress({name, fraction, subset, auc, best_epoch});
            }
            results.push_back(std::move(sr));
        }
    }
    return build_report(task, std::move(results));
}

}  // namespace ehrtext::eval
