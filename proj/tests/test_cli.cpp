#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "ehrtext/pipeline/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result invoke(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    Result r;
    r.code = ehrtext::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("ehrtext_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// A small architecture so the CLI tests train in seconds.
fs::path write_small_config(const fs::path& dir) {
    const json cfg = {{"masked", {{"epochs", 2}}},
                      {"contrastive", {{"epochs", 1}}},
                      {"finetune", {{"epochs", 2}}},
                      {"tabnet", {{"output_dim", 16}, {"decision_width", 8}, {"attention_width", 8}, {"steps", 2}}},
                      {"text", {{"dim", 16}, {"heads", 2}, {"layers", 2}, {"ffn", 24}, {"frozen_layers", 1}}},
                      {"shared_dim", 8}};
    const fs::path p = dir / "small.json";
    std::ofstream(p) << cfg.dump(2);
    return p;
}

}  // namespace

TEST(Cli, HelpAndVersion) {
    auto r = invoke({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("gen-data"), std::string::npos);
    r = invoke({"finetune", "--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("--fraction"), std::string::npos);
    r = invoke({"--version"});
    EXPECT_EQ(r.code, 0);
}

TEST(Cli, UsageErrorsExitOne) {
    auto r = invoke({});
    EXPECT_EQ(r.code, 1);
    const auto dir = temp_dir("usage");
    r = invoke({"finetune", "--data", dir.string(), "--out", (dir / "o").string(), "--task", "readmission"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--init"), std::string::npos) << r.err;
    r = invoke({"gen-data", "--out", dir.string(), "--bogus", "3"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--bogus"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("--seed"), std::string::npos) << "help listing valid flags expected";
    r = invoke({"gen-data", "--out", dir.string(), "--seed", "-3"});
    EXPECT_EQ(r.code, 1);
    r = invoke({"frobnicate"});
    EXPECT_EQ(r.code, 1);
}

TEST(Cli, RuntimeErrorsExitTwo) {
    const auto dir = temp_dir("runtime");
    std::ofstream(dir / "broken.json") << "{ not json";
    auto r = invoke({"gen-data", "--out", (dir / "d").string(), "--config", (dir / "broken.json").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error:"), std::string::npos);
    std::ofstream(dir / "unknown.json") << R"({"learning_rate": 1})";
    r = invoke({"gen-data", "--out", (dir / "d").string(), "--config", (dir / "unknown.json").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("unknown key"), std::string::npos) << r.err;
}

TEST(Cli, GenDataIsDeterministic) {
    const auto a = temp_dir("gen_a");
    const auto b = temp_dir("gen_b");
    ASSERT_EQ(invoke({"gen-data", "--seed", "7", "--pairs", "300", "--out", a.string()}).code, 0);
    ASSERT_EQ(invoke({"gen-data", "--seed", "7", "--pairs", "300", "--out", b.string()}).code, 0);
    for (const char* f : {"tabular.csv", "notes.jsonl", "dataset.json", "split.json"}) {
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    }
    for (const char* f : {"tabular.csv", "notes.jsonl", "dataset.json", "split.json"}) {
        EXPECT_EQ(read_json(a / "manifest.json").at("outputs").at(f), read_json(b / "manifest.json").at("outputs").at(f));
    }
    const auto c = temp_dir("gen_c");
    ASSERT_EQ(invoke({"gen-data", "--seed", "8", "--pairs", "300", "--out", c.string()}).code, 0);
    EXPECT_NE(slurp(a / "tabular.csv"), slurp(c / "tabular.csv"));
}

TEST(Cli, ResolvedConfigRecordsFlagsVerbatim) {
    const auto dir = temp_dir("resolved");
    const fs::path cfg = dir / "cfg.json";
    std::ofstream(cfg) << R"({"seed": 3, "batch_size": 16})";
    ASSERT_EQ(invoke({"gen-data", "--config", cfg.string(), "--seed", "0011", "--pairs", "120", "--out",
                      (dir / "o").string()})
                  .code,
              0);
    const json r = read_json(dir / "o" / "resolved_config.json");
    EXPECT_EQ(r.at("command"), "gen-data");
    EXPECT_EQ(r.at("flags").at("--seed"), "0011");
    EXPECT_EQ(r.at("flags").at("--pairs"), "120");
    EXPECT_EQ(r.at("flags").at("--config"), cfg.string());
    EXPECT_EQ(r.at("config").at("seed"), 11);
    EXPECT_EQ(r.at("config").at("batch_size"), 16);
    const json m = read_json(dir / "o" / "manifest.json");
    EXPECT_EQ(m.at("seed"), 11);
    EXPECT_TRUE(m.at("inputs").contains(cfg.string()));
    EXPECT_TRUE(m.at("outputs").contains("tabular.csv"));
    EXPECT_TRUE(m.at("versions").contains("ehrtext"));
}

TEST(Cli, RefusesToOverwriteCheckpointWithoutForce) {
    const auto dir = temp_dir("force");
    const auto cfg = write_small_config(dir);
    ASSERT_EQ(invoke({"gen-data", "--pairs", "300", "--out", (dir / "data").string()}).code, 0);
    const std::vector<std::string> masked = {"pretrain-masked", "--config", cfg.string(), "--data",
                                             (dir / "data").string(), "--out", (dir / "m").string()};
    ASSERT_EQ(invoke(masked).code, 0);
    const std::string before = slurp(dir / "m" / "checkpoint.ckpt");
    auto r = invoke(masked);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("--force"), std::string::npos) << r.err;
    EXPECT_EQ(slurp(dir / "m" / "checkpoint.ckpt"), before);
    auto forced = masked;
    forced.push_back("--force");
    EXPECT_EQ(invoke(forced).code, 0);
    EXPECT_EQ(slurp(dir / "m" / "checkpoint.ckpt"), before);
}

TEST(Cli, DivergenceExitsTwoAndKeepsLastGoodCheckpoint) {
    const auto dir = temp_dir("diverge");
    const json cfg = {{"masked", {{"epochs", 30}, {"learning_rate", 1e30}}},
                      {"tabnet", {{"output_dim", 16}, {"decision_width", 8}, {"attention_width", 8}, {"steps", 2}}}};
    std::ofstream(dir / "cfg.json") << cfg.dump();
    ASSERT_EQ(invoke({"gen-data", "--pairs", "300", "--out", (dir / "data").string()}).code, 0);
    const auto r = invoke({"pretrain-masked", "--config", (dir / "cfg.json").string(), "--data",
                           (dir / "data").string(), "--out", (dir / "m").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "m" / "checkpoint.ckpt"));
    if (fs::exists(dir / "m" / "last_good.ckpt")) {
        EXPECT_EQ(ehrtext::pipeline::load_checkpoint(dir / "m" / "last_good.ckpt").stage, "pretrain-masked");
    }
}

// gen-data -> pretrain-masked -> pretrain-cl -> finetune -> predict ->
// evaluate -> report on 1000 pairs with the default architecture.
TEST(Cli, EndToEndSmoke) {
    const auto dir = temp_dir("e2e");
    const auto data = (dir / "data").string();
    const fs::path cfg = dir / "cfg.json";
    std::ofstream(cfg) << R"({"contrastive": {"epochs": 2}})";
    ASSERT_EQ(invoke({"gen-data", "--seed", "5", "--pairs", "1000", "--out", data}).code, 0);
    auto r = invoke({"pretrain-masked", "--seed", "5", "--data", data, "--out", (dir / "m").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string masked_log = slurp(dir / "m" / "epochs.jsonl");
    EXPECT_EQ(std::count(masked_log.begin(), masked_log.end(), '\n'), 20);
    r = invoke({"pretrain-cl", "--config", cfg.string(), "--seed", "5", "--data", data, "--init",
                (dir / "m" / "checkpoint.ckpt").string(), "--out", (dir / "cl").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream cl_in(dir / "cl" / "epochs.jsonl");
    std::string first;
    std::getline(cl_in, first);
    const json cl_log = json::parse(first);
    EXPECT_EQ(cl_log.at("stage"), "pretrain-cl");
    EXPECT_EQ(cl_log.at("metric_name"), "recall@1");

    r = invoke({"finetune", "--seed", "5", "--data", data, "--init", (dir / "cl" / "checkpoint.ckpt").string(),
                "--task", "readmission", "--fraction", "0.5", "--subset", "1", "--out", (dir / "ft").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const json metrics = read_json(dir / "ft" / "metrics.json");
    EXPECT_GE(metrics.at("test_auc").get<double>(), 0.0);
    EXPECT_LE(metrics.at("test_auc").get<double>(), 1.0);
    EXPECT_EQ(metrics.at("subset"), 1);

    r = invoke({"predict", "--init", (dir / "ft" / "checkpoint.ckpt").string(), "--input", data + "/tabular.csv",
                "--out", (dir / "pred").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string preds = slurp(dir / "pred" / "predictions.csv");
    EXPECT_EQ(preds.rfind("id,probability\r\n", 0), 0u);
    EXPECT_EQ(std::count(preds.begin(), preds.end(), '\n'), 1001);

    r = invoke({"predict", "--init", (dir / "cl" / "checkpoint.ckpt").string(), "--input", data + "/tabular.csv",
                "--out", (dir / "pred2").string()});
    EXPECT_EQ(r.code, 2);

    r = invoke({"evaluate", "--seed", "5", "--data", data, "--task", "critical", "--variant",
                "cl-init=" + (dir / "cl" / "checkpoint.ckpt").string(), "--variant",
                "masked-init=" + (dir / "m" / "checkpoint.ckpt").string(), "--out", (dir / "eval").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::regex cell(R"(\d\.\d{3} \(±\d\.\d{3}\))");
    EXPECT_TRUE(std::regex_search(r.out, cell)) << r.out;
    EXPECT_TRUE(fs::exists(dir / "eval" / "ttests_critical.json"));
    EXPECT_EQ(read_json(dir / "eval" / "ttests_critical.json").size(), 2u);

    r = invoke({"report", "--task", "critical", "--dir", (dir / "eval").string(), "--out", (dir / "rep").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(dir / "rep" / "report_critical.txt"), slurp(dir / "eval" / "report_critical.txt"));
    EXPECT_EQ(slurp(dir / "rep" / "report_critical.csv"), slurp(dir / "eval" / "report_critical.csv"));
    const std::string table = slurp(dir / "rep" / "report_critical.txt");
    EXPECT_NE(table.find("100% training data"), std::string::npos);
    EXPECT_NE(table.find("50% training data"), std::string::npos);
    EXPECT_TRUE(std::regex_search(table, cell));
}
