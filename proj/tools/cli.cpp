#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "ehrtext/data/csv.hpp"
#include "ehrtext/data/dataset.hpp"
#include "ehrtext/data/split.hpp"
#include "ehrtext/errors.hpp"
#include "ehrtext/evaluation/comparison.hpp"
#include "ehrtext/pipeline/checkpoint.hpp"
#include "ehrtext/pipeline/config.hpp"
#include "ehrtext/pipeline/stages.hpp"
#include "ehrtext/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ehrtext::cli {
namespace {

constexpr const char* kCheckpointFile = "checkpoint.ckpt";
constexpr const char* kDatasetFile = "dataset.json";
constexpr const char* kSplitFile = "split.json";

struct Options {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out;
    std::string init;
    std::string task;
    double fraction = 1.0;
    std::vector<double> fractions;
    bool deterministic = false;
    bool force = false;
    int data_parallel = 1;
    int pairs = 5000;
    int subset = 0;
    std::string data;
    std::string input;
    std::string dir;
    std::vector<std::string> variants;
};

std::string file_hash(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InvalidInput("cannot read " + p.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return pipeline::sha256_hex(bytes.data(), bytes.size());
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

json read_json(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InvalidInput("cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidInput("malformed JSON in " + p.string() + ": " + e.what());
    }
}

// State of one invocation: resolved configuration, the verbatim flags, the
// files read and the files written.
class Run {
public:
    Run(std::string command, const CLI::App& sub, const Options& opt) : command_(std::move(command)), opt_(opt) {
        for (const CLI::Option* o : sub.get_options()) {
            if (o->count() == 0 || o->get_name() == "--help") continue;
            const auto values = o->results();
            flags_[o->get_name()] = values.size() == 1 ? json(values[0]) : json(values);
        }
        json patch = json::object();
        if (!opt.config_path.empty()) {
            patch = read_json(opt.config_path);
            inputs_.push_back(opt.config_path);
        }
        config_ = pipeline::merge_config(pipeline::RunConfig{}, patch);
        json overrides = json::object();
        if (flags_.contains("--seed")) overrides["seed"] = opt.seed;
        if (flags_.contains("--deterministic")) overrides["deterministic"] = true;
        if (flags_.contains("--data-parallel")) overrides["data_parallel"] = opt.data_parallel;
        if (flags_.contains("--task")) overrides["task"] = opt.task;
        if (flags_.contains("--fraction") && opt.fractions.empty()) overrides["fraction"] = opt.fraction;
        if (flags_.contains("--subset")) overrides["subset"] = opt.subset;
        config_ = pipeline::merge_config(config_, overrides);
        out_ = opt.out;
        fs::create_directories(out_);
    }

    const pipeline::RunConfig& config() const { return config_; }
    const fs::path& out() const { return out_; }

    void input(const fs::path& p) { inputs_.push_back(p); }
    void output(const fs::path& p) { outputs_.push_back(p); }

    fs::path checkpoint_path() const {
        const fs::path p = out_ / kCheckpointFile;
        if (fs::exists(p) && !opt_.force) {
            throw Error("refusing to overwrite existing checkpoint " + p.string() + " (pass --force)");
        }
        return p;
    }

    void save(const pipeline::Checkpoint& ckpt) {
        const fs::path p = checkpoint_path();
        const std::string hash = pipeline::save_checkpoint(ckpt, p);
        spdlog::info("wrote {} (sha256 {})", p.string(), hash);
        output(p);
    }

    pipeline::EpochSink epoch_log() {
        const fs::path p = out_ / "epochs.jsonl";
        log_ = std::make_shared<std::ofstream>(p, std::ios::binary | std::ios::trunc);
        output(p);
        return [log = log_](const pipeline::EpochLog& l) {
            const std::string line = pipeline::to_json(l).dump();
            *log << line << "\n";
            log->flush();
            spdlog::info("{}", line);
        };
    }

    // Resolved configuration and run manifest; written last so the manifest
    // can hash every output.
    void finish(const json& extra = json::object()) {
        if (log_) log_->close();
        json resolved = {{"command", command_}, {"flags", flags_}, {"config", pipeline::to_json(config_)}};
        for (const auto& [k, v] : extra.items()) resolved[k] = v;
        write_text(out_ / "resolved_config.json", resolved.dump(2) + "\n");
        output(out_ / "resolved_config.json");
        json inputs = json::object();
        for (const auto& p : inputs_) inputs[p.string()] = file_hash(p);
        json outputs = json::object();
        for (const auto& p : outputs_) outputs[p.filename().string()] = file_hash(p);
        json manifest = {{"command", command_},
                         {"seed", config_.seed},
                         {"inputs", inputs},
                         {"outputs", outputs},
                         {"versions",
                          {{"ehrtext", kVersion},
                           {"checkpoint_format", pipeline::kCheckpointVersion},
                           {"compiler", __VERSION__},
                           {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                         "." + std::to_string(EIGEN_MINOR_VERSION)}}}};
        write_text(out_ / "manifest.json", manifest.dump(2) + "\n");
    }

private:
    std::string command_;
    const Options& opt_;
    json flags_ = json::object();
    pipeline::RunConfig config_;
    fs::path out_;
    std::vector<fs::path> inputs_;
    std::vector<fs::path> outputs_;
    std::shared_ptr<std::ofstream> log_;
};

// ---------------------------------------------------------------- dataset access

struct LoadedData {
    data::PairedDataset dataset;
    data::SplitPlan plan;
};

LoadedData load_data(Run& run, const std::string& dir) {
    const fs::path d(dir);
    const json meta = read_json(d / kDatasetFile);
    run.input(d / kDatasetFile);
    run.input(d / "tabular.csv");
    run.input(d / "notes.jsonl");
    data::IngestReport report;
    LoadedData out;
    out.dataset = data::read_dataset(d, meta.at("label_columns").get<std::vector<std::string>>(), &report);
    if (meta.contains("provenance")) out.dataset.provenance = meta.at("provenance").get<std::string>();
    if (report.rows_without_notes + report.notes_without_rows > 0) {
        spdlog::warn("ingest dropped {} rows without notes and {} notes without rows", report.rows_without_notes,
                     report.notes_without_rows);
    }
    if (fs::exists(d / kSplitFile)) {
        out.plan = data::split_plan_from_json(read_json(d / kSplitFile));
        run.input(d / kSplitFile);
    } else {
        data::SplitConfig sc = data::fit_split(run.config().split, out.dataset.size());
        sc.seed = run.config().seed;
        out.plan = data::make_split_plan(out.dataset.size(), sc);
    }
    if (out.plan.dataset_size != out.dataset.size()) throw DataError("split plan does not match the dataset size");
    return out;
}

pipeline::Checkpoint load_init(Run& run, const std::string& path) {
    run.input(path);
    return pipeline::load_checkpoint(path);
}

const data::SubsetSplit& subset_of(const LoadedData& d, int subset) {
    if (subset < 0 || static_cast<std::size_t>(subset) >= d.plan.subsets.size()) {
        throw ConfigError("subset " + std::to_string(subset) + " does not exist (plan has " +
                          std::to_string(d.plan.subsets.size()) + ")");
    }
    return d.plan.subsets[static_cast<std::size_t>(subset)];
}

// ---------------------------------------------------------------- subcommands

void gen_data(Run& run, const Options& opt) {
    data::SynthConfig sc;
    sc.seed = run.config().seed;
    sc.pairs = opt.pairs;
    const data::PairedDataset ds = data::generate_synthetic(sc);
    data::write_dataset(ds, run.out());
    std::vector<std::string> labels;
    for (const auto& [task, y] : ds.labels) labels.push_back(task);
    write_text(run.out() / kDatasetFile,
               json({{"label_columns", labels}, {"provenance", ds.provenance}, {"synthetic", data::to_json(sc)}}).dump(2) +
                   "\n");
    data::SplitConfig split = data::fit_split(run.config().split, ds.size());
    split.seed = run.config().seed;
    if (split.train_val_size != run.config().split.train_val_size) {
        spdlog::warn("dataset too small for the configured split; subsets scaled to {} train+val and {} test pairs",
                     split.train_val_size, split.test_size);
    }
    const data::SplitPlan plan = data::make_split_plan(ds.size(), split);
    write_text(run.out() / kSplitFile, data::to_json(plan).dump() + "\n");
    for (const char* f : {"tabular.csv", "notes.jsonl", kDatasetFile, kSplitFile}) run.output(run.out() / f);
    spdlog::info("wrote {} pairs to {}", ds.size(), run.out().string());
    run.finish({{"pairs", opt.pairs},
                {"split", {{"subsets", split.subsets}, {"train_val_size", split.train_val_size},
                           {"test_size", split.test_size}, {"val_fraction", split.val_fraction}}}});
}

void pretrain_masked(Run& run, const Options& opt) {
    const LoadedData d = load_data(run, opt.data);
    const fs::path ckpt = run.checkpoint_path();
    const auto pool = d.dataset.subset(d.plan.pretrain_pool);
    const auto result = pipeline::run_masked_pretrain(run.config(), pool.table, run.epoch_log());
    run.save(result.checkpoint);
    run.finish({{"data", opt.data}, {"checkpoint", ckpt.string()}});
}

void pretrain_cl(Run& run, const Options& opt) {
    const LoadedData d = load_data(run, opt.data);
    const pipeline::Checkpoint init = load_init(run, opt.init);
    const fs::path ckpt = run.checkpoint_path();
    const auto pool = d.dataset.subset(d.plan.pretrain_pool);
    const auto result = pipeline::run_contrastive_pretrain(run.config(), pool, init, run.epoch_log());
    run.save(result.checkpoint);
    run.finish({{"data", opt.data},
                {"init", opt.init},
                {"final_loss", result.final_loss},
                {"final_recall_at_1", result.final_recall}});
}

void finetune(Run& run, const Options& opt) {
    const pipeline::RunConfig& cfg = run.config();
    if (cfg.task.empty()) throw ConfigError("finetune needs a task (--task or \"task\" in the config file)");
    const LoadedData d = load_data(run, opt.data);
    const pipeline::Checkpoint init = load_init(run, opt.init);
    const fs::path ckpt = run.checkpoint_path();
    const auto& sub = subset_of(d, cfg.subset);
    pipeline::RunConfig stage = cfg;
    stage.seed = num::derive_seed(cfg.seed, "finetune/subset", static_cast<std::uint64_t>(cfg.subset));
    const auto train_idx = data::training_fraction(sub.train, cfg.fraction, cfg.seed, cfg.subset);
    const auto result = pipeline::run_finetune(stage, pipeline::labeled_rows(d.dataset, train_idx, cfg.task),
                                               pipeline::labeled_rows(d.dataset, sub.val, cfg.task), init, cfg.task,
                                               run.epoch_log());
    const auto test = pipeline::labeled_rows(d.dataset, sub.test, cfg.task);
    const double test_auc = eval::auroc(pipeline::Classifier(result.checkpoint).logits(test.rows), test.labels);
    run.save(result.checkpoint);
    const json metrics = {{"task", cfg.task},
                          {"subset", cfg.subset},
                          {"fraction", cfg.fraction},
                          {"train_rows", train_idx.size()},
                          {"best_epoch", result.best_epoch},
                          {"best_val_auc", result.best_val_auc},
                          {"test_auc", test_auc}};
    write_text(run.out() / "metrics.json", metrics.dump(2) + "\n");
    run.output(run.out() / "metrics.json");
    spdlog::info("test AUC {:.4f} (best epoch {})", test_auc, result.best_epoch);
    run.finish({{"data", opt.data}, {"init", opt.init}});
}

void predict(Run& run, const Options& opt) {
    const pipeline::Checkpoint ckpt = load_init(run, opt.init);
    run.input(opt.input);
    const tab::RawTable rows = data::read_csv_table(opt.input);
    const std::vector<double> p = pipeline::predict(ckpt, rows);
    const auto id = rows.column_index(data::kIdColumn);
    std::ostringstream csv;
    data::write_csv_record(csv, id ? std::vector<std::string>{data::kIdColumn, "probability"}
                                   : std::vector<std::string>{"row", "probability"});
    for (std::size_t i = 0; i < p.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g", p[i]);
        data::write_csv_record(csv, {id ? tab::cell_text(rows.rows[i][*id]) : std::to_string(i), buf});
    }
    write_text(run.out() / "predictions.csv", csv.str());
    run.output(run.out() / "predictions.csv");
    run.finish({{"init", opt.init}, {"input", opt.input}});
}

void write_report_files(const eval::Report& rep, const fs::path& dir, Run& run, std::ostream& out) {
    std::ostringstream csv;
    eval::write_report_csv(csv, rep);
    const std::string table = eval::format_report_table(rep);
    const std::string stem = "report_" + rep.task;
    write_text(dir / (stem + ".csv"), csv.str());
    write_text(dir / (stem + ".txt"), table);
    write_text(dir / ("ttests_" + rep.task + ".json"), eval::ttests_json(rep).dump(2) + "\n");
    for (const auto& f : {stem + ".csv", stem + ".txt", "ttests_" + rep.task + ".json"}) run.output(dir / f);
    out << table;
}

void evaluate(Run& run, const Options& opt, std::ostream& out) {
    const pipeline::RunConfig& cfg = run.config();
    if (cfg.task.empty()) throw ConfigError("evaluate needs a task (--task or \"task\" in the config file)");
    const LoadedData d = load_data(run, opt.data);
    std::map<std::string, pipeline::Checkpoint> checkpoints;
    for (const auto& v : opt.variants) {
        const auto eq = v.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--variant expects name=checkpoint, got '" + v + "'");
        const std::string name = v.substr(0, eq);
        if (checkpoints.count(name)) throw ConfigError("variant '" + name + "' given twice");
        checkpoints.emplace(name, load_init(run, v.substr(eq + 1)));
    }
    std::map<std::string, const pipeline::Checkpoint*> variants;
    for (const auto& [name, c] : checkpoints) variants[name] = &c;
    const std::vector<double> fractions = opt.fractions.empty() ? std::vector<double>{1.0, 0.5} : opt.fractions;
    const eval::Report rep = eval::run_comparison(cfg, d.dataset, d.plan, cfg.task, variants, fractions,
                                                  [](const eval::ComparisonProgress& p) {
                                                      spdlog::info("{} {} subset {}: test AUC {:.4f} (epoch {})",
                                                                   p.variant, eval::fraction_label(p.fraction),
                                                                   p.subset, p.test_auc, p.best_epoch);
                                                  });
    const fs::path results = run.out() / ("results_" + cfg.task + ".json");
    write_text(results, eval::to_json(rep).dump(2) + "\n");
    run.output(results);
    write_report_files(rep, run.out(), run, out);
    run.finish({{"data", opt.data}, {"variants", opt.variants}, {"fractions", fractions}});
}

void report(Run& run, const Options& opt, std::ostream& out) {
    const pipeline::RunConfig& cfg = run.config();
    if (cfg.task.empty()) throw ConfigError("report needs a task (--task or \"task\" in the config file)");
    const fs::path results = fs::path(opt.dir) / ("results_" + cfg.task + ".json");
    run.input(results);
    const eval::Report rep = eval::build_report(cfg.task, eval::results_from_json(read_json(results)));
    write_report_files(rep, run.out(), run, out);
    run.finish({{"dir", opt.dir}});
}

void configure_logging(std::ostream& err) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto logger = std::make_shared<spdlog::logger>("ehrtext", sink);
    logger->set_pattern("[%l] %v");
    const char* level = std::getenv("EHRTEXT_LOG");
    const std::string l = level ? level : "info";
    logger->set_level(l == "debug" ? spdlog::level::debug : l == "info" ? spdlog::level::info : spdlog::level::warn);
    spdlog::set_default_logger(logger);
}

// CLI11 reads a leading zero as octal; integers on the command line are
// decimal. The raw text stays in the option's results.
template <class T>
CLI::Option* add_decimal(CLI::App* app, const std::string& name, T& target, const std::string& help) {
    return app->add_option_function<std::string>(
        name,
        [&target, name](const std::string& v) {
            T parsed{};
            const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), parsed, 10);
            if (ec != std::errc() || end != v.data() + v.size()) {
                throw CLI::ValidationError(name, "expected a decimal integer, got '" + v + "'");
            }
            target = parsed;
        },
        help)
        ->type_name("INT");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options opt;
    CLI::App app{"Contrastive EHR-text pretraining toolkit", "ehrtext"};
    app.require_subcommand(1, 1);
    app.set_version_flag("--version", kVersion);

    auto common = [&](CLI::App* sub, bool out_required = true) {
        sub->add_option("--config", opt.config_path, "JSON run configuration")->check(CLI::ExistingFile);
        add_decimal(sub, "--seed", opt.seed, "Root seed for every random stream");
        auto* o = sub->add_option("--out", opt.out, "Output directory");
        if (out_required) o->required();
        sub->add_flag("--deterministic", opt.deterministic, "Require bitwise-reproducible execution");
        sub->add_flag("--force", opt.force, "Overwrite an existing checkpoint");
        add_decimal(sub, "--data-parallel", opt.data_parallel, "Data-parallel width")->check(CLI::PositiveNumber);
    };
    auto data_flag = [&](CLI::App* sub) {
        sub->add_option("--data", opt.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    };
    auto init_flag = [&](CLI::App* sub, const char* what) {
        sub->add_option("--init", opt.init, what)->required()->check(CLI::ExistingFile);
    };

    auto* gen = app.add_subcommand("gen-data", "Generate a seeded synthetic paired dataset");
    common(gen);
    add_decimal(gen, "--pairs", opt.pairs, "Number of pairs")->check(CLI::PositiveNumber);

    auto* masked = app.add_subcommand("pretrain-masked", "Masked tabular pretraining on the pretraining pool");
    common(masked);
    data_flag(masked);

    auto* cl = app.add_subcommand("pretrain-cl", "Contrastive EHR-text pretraining");
    common(cl);
    data_flag(cl);
    init_flag(cl, "Masked-pretraining checkpoint");

    auto* ft = app.add_subcommand("finetune", "Fine-tune on one subset and score its test split");
    common(ft);
    data_flag(ft);
    init_flag(ft, "Pretrained checkpoint (masked or contrastive)");
    ft->add_option("--task", opt.task, "Label column");
    ft->add_option("--fraction", opt.fraction, "Share of the training split")->check(CLI::Range(0.0, 1.0));
    add_decimal(ft, "--subset", opt.subset, "Subset index")->check(CLI::NonNegativeNumber);

    auto* pred = app.add_subcommand("predict", "Probabilities from a fine-tuned checkpoint");
    common(pred);
    init_flag(pred, "Fine-tuned checkpoint");
    pred->add_option("--input", opt.input, "CSV of rows to score")->required()->check(CLI::ExistingFile);

    auto* ev = app.add_subcommand("evaluate", "Fine-tune every variant on every subset and fraction");
    common(ev);
    data_flag(ev);
    ev->add_option("--task", opt.task, "Label column");
    ev->add_option("--variant", opt.variants, "name=checkpoint (repeatable)")->required();
    ev->add_option("--fraction", opt.fractions, "Training fractions (default 1.0 and 0.5)")
        ->check(CLI::Range(0.0, 1.0));

    auto* rep = app.add_subcommand("report", "Tables and t-tests from evaluation results");
    common(rep, false);
    rep->add_option("--task", opt.task, "Label column");
    rep->add_option("--dir", opt.dir, "Directory holding evaluation results")->required()->check(
        CLI::ExistingDirectory);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        CLI::App* target = &app;
        for (auto* s : app.get_subcommands()) target = s;
        out << target->help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kVersion << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        CLI::App* target = &app;
        for (auto* s : app.get_subcommands()) target = s;
        err << "error: " << e.what() << "\n\n" << target->help();
        return 1;
    }

    configure_logging(err);
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "report" && opt.out.empty()) opt.out = opt.dir;
    try {
        Run r(name, *sub, opt);
        if (name == "gen-data") gen_data(r, opt);
        else if (name == "pretrain-masked") pretrain_masked(r, opt);
        else if (name == "pretrain-cl") pretrain_cl(r, opt);
        else if (name == "finetune") finetune(r, opt);
        else if (name == "predict") predict(r, opt);
        else if (name == "evaluate") evaluate(r, opt, out);
        else report(r, opt, out);
    } catch (const pipeline::TrainingDiverged& e) {
        err << "error: " << e.what() << "\n";
        if (e.last_good() && !opt.out.empty()) {
            const fs::path p = fs::path(opt.out) / "last_good.ckpt";
            pipeline::save_checkpoint(*e.last_good(), p);
            err << "last good checkpoint written to " << p.string() << "\n";
        }
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace ehrtext::cli
