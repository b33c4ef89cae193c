#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/adamw.hpp"
#include "ehrtext/numerics/gradcheck.hpp"
#include "ehrtext/tabular/encoder.hpp"
#include "ehrtext/tabular/masked_pretrain.hpp"
#include "ehrtext/tabular/schema.hpp"

using namespace ehrtext;
using tab::Cell;
using tab::RawTable;

namespace {

RawTable toy_table(std::size_t rows, std::uint64_t seed) {
    num::Rng rng(seed);
    RawTable t;
    t.columns = {"sex", "flag", "grade", "age", "lab_a", "lab_b"};
    for (std::size_t r = 0; r < rows; ++r) {
        const double z = rng.normal();
        std::vector<Cell> row;
        row.emplace_back(rng.bernoulli(0.5) ? std::string("F") : std::string("M"));
        row.emplace_back(z > 0 ? 1.0 : 0.0);
        row.emplace_back(std::string(1, static_cast<char>('a' + rng.index(3))));
        row.emplace_back(std::round(60 + 10 * z + rng.normal()));
        row.emplace_back(2.0 * z + 0.3 * rng.normal());
        row.emplace_back(-z + 0.3 * rng.normal());
        t.rows.push_back(std::move(row));
    }
    return t;
}

tab::TabNetConfig small_config() {
    tab::TabNetConfig c;
    c.decision_width = 8;
    c.attention_width = 8;
    c.output_dim = 128;
    return c;
}

}  // namespace

TEST(Schema, CategoricalRuleAndMissingColumns) {
    RawTable t;
    t.columns = {"binary", "cont", "with_missing", "text"};
    t.rows = {{1.0, 1.0, 3.0, std::string("x")},
              {0.0, 2.5, std::monostate{}, std::string("y")},
              {1.0, 3.7, 1.0, std::string("x")},
              {0.0, 9.9, 2.0, std::string("z")}};
    std::vector<std::string> warnings;
    auto schema = tab::build_schema(t, {}, &warnings);
    ASSERT_EQ(schema.feature_count(), 3u);
    EXPECT_EQ(schema.columns[0].name, "binary");
    EXPECT_EQ(schema.columns[0].role, tab::ColumnRole::categorical);
    EXPECT_EQ(schema.columns[0].vocabulary, (std::vector<std::string>{"0", "1"}));
    EXPECT_EQ(schema.columns[1].role, tab::ColumnRole::numerical);
    EXPECT_EQ(schema.columns[2].name, "text");
    EXPECT_EQ(schema.columns[2].vocabulary, (std::vector<std::string>{"x", "y", "z"}));
    EXPECT_FALSE(warnings.empty());
}

TEST(Schema, ExclusionsAndEmptySchema) {
    RawTable t;
    t.columns = {"a", "b"};
    t.rows = {{1.0, std::monostate{}}, {2.0, 1.0}, {3.0, 2.0}};
    std::vector<std::string> warnings;
    EXPECT_THROW(tab::build_schema(t, {"a"}, &warnings), SchemaError);
    warnings.clear();
    auto schema = tab::build_schema(t, {"missing_name"}, &warnings);
    EXPECT_EQ(schema.feature_count(), 1u);
    EXPECT_EQ(schema.columns[0].name, "a");
    EXPECT_FALSE(warnings.empty());
}

TEST(Schema, ConstantColumnRejected) {
    RawTable t;
    t.columns = {"k"};
    t.rows = {{5.0}, {5.0}, {5.0}};
    // Constant numeric columns have fewer than three unique values and are
    // therefore categorical, never a zero-variance numerical column.
    auto schema = tab::build_schema(t, {});
    EXPECT_EQ(schema.columns[0].role, tab::ColumnRole::categorical);
    EXPECT_EQ(schema.columns[0].vocabulary.size(), 1u);
}

TEST(Schema, JsonRoundTrip) {
    auto schema = tab::build_schema(toy_table(50, 1), {});
    EXPECT_EQ(tab::schema_from_json(tab::to_json(schema)), schema);
}

TEST(EncodeRows, SpecExamples) {
    RawTable t;
    t.columns = {"sex", "val"};
    t.rows = {{std::string("F"), 1.0}, {std::string("M"), 2.0}, {std::string("M"), 6.0}};
    auto schema = tab::build_schema(t, {});
    RawTable q;
    q.columns = {"val", "sex"};
    q.rows = {{3.0, std::string("M")}, {1.0, std::string("X")}, {2.0, std::monostate{}}};
    auto b = tab::encode_rows(schema, q);
    EXPECT_EQ(b.categories(0, 0), 2);
    EXPECT_EQ(b.categories(1, 0), 0);
    EXPECT_EQ(b.categories(2, 0), 0);
    EXPECT_DOUBLE_EQ(b.numerical(0, 0), 0.0);
    const double sd = std::sqrt(((1 - 3.0) * (1 - 3.0) + 1.0 + 9.0) / 3.0);
    EXPECT_DOUBLE_EQ(b.numerical(1, 0), (1.0 - 3.0) / sd);
}

TEST(EncodeRows, MissingColumnsAndTypeMismatch) {
    auto schema = tab::build_schema(toy_table(20, 2), {});
    RawTable q;
    q.columns = {"sex", "age"};
    q.rows = {{std::string("F"), 3.0}};
    try {
        tab::encode_rows(schema, q);
        FAIL();
    } catch (const SchemaError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("lab_a"), std::string::npos);
        EXPECT_NE(msg.find("grade"), std::string::npos);
    }
    RawTable bad = toy_table(3, 3);
    bad.rows[1][4] = std::string("high");
    EXPECT_THROW(tab::encode_rows(schema, bad), SchemaError);
}

TEST(EncodeRows, TrainingSplitIsStandardized) {
    auto table = toy_table(400, 4);
    auto schema = tab::build_schema(table, {});
    auto batch = tab::encode_rows(schema, table);
    for (num::Index c = 0; c < batch.numerical.cols(); ++c) {
        const double mean = batch.numerical.col(c).mean();
        const double var = (batch.numerical.col(c).array() - mean).square().mean();
        EXPECT_NEAR(mean, 0.0, 1e-6);
        EXPECT_NEAR(std::sqrt(var), 1.0, 1e-6);
    }
    for (num::Index c = 0; c < batch.categories.cols(); ++c) {
        const auto* spec = schema.categorical()[static_cast<std::size_t>(c)];
        EXPECT_GE(batch.categories.col(c).minCoeff(), 1);
        EXPECT_LE(batch.categories.col(c).maxCoeff(), static_cast<int>(spec->vocabulary.size()));
    }
}

TEST(TabularEncoder, EmbeddingDims) {
    EXPECT_EQ(tab::embedding_dim(2, 8), 1);
    EXPECT_EQ(tab::embedding_dim(3, 8), 2);
    EXPECT_EQ(tab::embedding_dim(40, 8), 8);
}

TEST(TabularEncoder, OutputShapeDeterminismAndUnknownRow) {
    auto table = toy_table(30, 5);
    auto schema = tab::build_schema(table, {});
    tab::TabularEncoder<double> a(schema, tab::TabNetConfig{}, 9), b(schema, tab::TabNetConfig{}, 9);
    auto batch = tab::encode_rows(schema, table);
    auto ea = a.forward(batch).embedding.value();
    auto eb = b.forward(batch).embedding.value();
    EXPECT_EQ(ea.cols(), 128);
    EXPECT_EQ(ea, eb);

    tab::TabularBatch degenerate;
    degenerate.categories = tab::CategoryMatrix::Zero(1, batch.categories.cols());
    degenerate.numerical = num::Matrix<double>::Zero(1, batch.numerical.cols());
    auto e = a.forward(degenerate).embedding.value();
    EXPECT_EQ(e.cols(), 128);
    EXPECT_TRUE(e.allFinite());
}

TEST(TabularEncoder, NonFiniteAttentionIsDivergence) {
    auto table = toy_table(8, 5);
    auto schema = tab::build_schema(table, {});
    tab::TabularEncoder<double> enc(schema, small_config(), 4);
    enc.params().get("step1.att.b").mutable_value().setConstant(NAN);
    try {
        enc.forward(tab::encode_rows(schema, table));
        FAIL() << "expected DivergedError";
    } catch (const DivergedError& e) {
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    }
}

TEST(TabularEncoder, RowPermutationEquivariance) {
    auto table = toy_table(16, 6);
    auto schema = tab::build_schema(table, {});
    tab::TabularEncoder<double> enc(schema, small_config(), 3);
    auto batch = tab::encode_rows(schema, table);
    std::vector<std::size_t> perm(16);
    for (std::size_t i = 0; i < 16; ++i) perm[i] = (i * 7 + 3) % 16;
    auto e = enc.forward(batch).embedding.value();
    auto ep = enc.forward(batch.select_rows(perm)).embedding.value();
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_LT((ep.row(static_cast<num::Index>(i)) - e.row(static_cast<num::Index>(perm[i]))).cwiseAbs().maxCoeff(),
                  1e-12);
    }
}

TEST(TabularEncoder, MasksAreOnSimplex) {
    RawTable t;
    t.columns = {"x", "y", "z"};
    num::Rng rng(7);
    for (int r = 0; r < 10; ++r) t.rows.push_back({rng.normal(), rng.normal(), rng.normal()});
    auto schema = tab::build_schema(t, {});
    tab::TabularEncoder<double> enc(schema, small_config(), 1);
    auto fwd = enc.forward(tab::encode_rows(schema, t));
    ASSERT_EQ(fwd.masks.size(), 3u);
    for (const auto& m : fwd.masks) {
        ASSERT_EQ(m.cols(), 3);
        for (num::Index r = 0; r < m.rows(); ++r) {
            EXPECT_NEAR(m.row(r).sum(), 1.0, 1e-6);
            EXPECT_GE(m.row(r).minCoeff(), 0.0);
        }
    }
}

TEST(TabularEncoder, GradcheckToySchema) {
    RawTable t;
    t.columns = {"c1", "c2", "n1", "n2", "n3", "n4"};
    num::Rng rng(8);
    for (int r = 0; r < 4; ++r) {
        t.rows.push_back({std::string(1, static_cast<char>('a' + r % 3)), double(r % 2), rng.normal(), rng.normal(),
                          rng.normal(), rng.normal()});
    }
    auto schema = tab::build_schema(t, {});
    ASSERT_EQ(schema.feature_count(), 6u);
    auto batch = tab::encode_rows(schema, t);
    tab::TabularEncoder<double> enc(schema, small_config(), 2);
    enc.apply_freeze_plan(tab::Stage::finetune);
    num::Matrix<double> w = rng.normal_matrix<double>(4, 128, 1.0);
    std::vector<num::Var<double>> trainable;
    for (auto& p : enc.params().all()) {
        if (p.var.requires_grad()) trainable.push_back(p.var);
    }
    auto f = [&] { return num::sum_all(num::mul(enc.forward(batch).embedding, num::Var<double>(w))); };
    auto r = num::gradcheck(f, trainable, 1e-6, 20, 1);
    EXPECT_LT(r.max_relative_error, 1e-5) << "input " << r.worst_input;
}

TEST(FreezePlan, Stages) {
    EXPECT_TRUE(tab::freeze_plan(tab::Stage::pretrain_masked).empty());
    const std::set<std::string> want = {"embeddings", "initial_split"};
    EXPECT_EQ(tab::freeze_plan(tab::Stage::pretrain_cl), want);
    EXPECT_EQ(tab::freeze_plan(tab::Stage::finetune), want);
    EXPECT_EQ(tab::stage_from_string("pretrain-cl"), tab::Stage::pretrain_cl);
    EXPECT_THROW(tab::stage_from_string("warmup"), ConfigError);
}

TEST(FreezePlan, FrozenGroupsBitwiseUnchanged) {
    auto table = toy_table(64, 9);
    auto schema = tab::build_schema(table, {});
    auto batch = tab::encode_rows(schema, table);
    tab::TabularEncoder<float> enc(schema, small_config(), 4);
    enc.apply_freeze_plan(tab::Stage::finetune);
    std::map<std::string, num::Matrix<float>> before;
    for (auto& p : enc.params().all()) before[p.name] = p.var.value();
    num::AdamW<float> opt(enc.params(), {1e-2, 1e-4});
    for (int step = 0; step < 10; ++step) {
        enc.params().zero_grad();
        auto loss = num::mean_all(num::mul(enc.forward(batch).embedding, enc.forward(batch).embedding));
        num::backward(loss);
        opt.step();
    }
    int changed = 0;
    for (auto& p : enc.params().all()) {
        const bool frozen = p.group == "embeddings" || p.group == "initial_split";
        if (frozen) {
            EXPECT_EQ(p.var.value(), before[p.name]) << p.name;
        } else if (p.var.value() != before[p.name]) {
            ++changed;
        }
    }
    EXPECT_GT(changed, 0);
}

TEST(MaskedPretrain, MaskRateContract) {
    num::Rng rng(1);
    EXPECT_THROW(tab::sample_cell_mask<float>(4, 3, 0.0, rng), ConfigError);
    EXPECT_THROW(tab::sample_cell_mask<float>(4, 3, 1.0, rng), ConfigError);
    EXPECT_THROW(tab::sample_cell_mask<float>(1, 1, 1e-12, rng), InvalidInput);
    auto m = tab::sample_cell_mask<float>(100, 10, 0.25, rng);
    EXPECT_NEAR(m.mean(), 0.25, 0.05);
}

TEST(MaskedPretrain, DeterministicLoss) {
    auto table = toy_table(32, 10);
    auto schema = tab::build_schema(table, {});
    auto batch = tab::encode_rows(schema, table);
    tab::TabularEncoder<double> enc(schema, small_config(), 5);
    tab::ReconstructionHead<double> head(enc, 6);
    num::Rng r1(3), r2(3);
    EXPECT_EQ(tab::masked_pretrain_step(enc, head, batch, 0.25, r1).item(),
              tab::masked_pretrain_step(enc, head, batch, 0.25, r2).item());
}

TEST(MaskedPretrain, KeepPatternFollowsEmbeddedColumns) {
    auto table = toy_table(4, 11);
    auto schema = tab::build_schema(table, {});
    tab::TabularEncoder<double> enc(schema, small_config(), 5);
    num::Matrix<double> mask = num::Matrix<double>::Zero(4, static_cast<num::Index>(schema.feature_count()));
    mask(1, 0) = 1.0;
    auto keep = tab::keep_pattern(enc, mask);
    EXPECT_EQ(keep.cols(), enc.input_width());
    const int dim0 = tab::embedding_dim(schema.categorical()[0]->vocabulary.size(), 8);
    for (int j = 0; j < keep.cols(); ++j) {
        EXPECT_EQ(keep(1, j), j < dim0 ? 0.0 : 1.0);
        EXPECT_EQ(keep(0, j), 1.0);
    }
}

TEST(MaskedPretrain, LossDropsOnCorrelatedTable) {
    auto table = toy_table(500, 12);
    auto schema = tab::build_schema(table, {});
    auto batch = tab::encode_rows(schema, table);
    tab::TabularEncoder<float> enc(schema, small_config(), 7);
    tab::ReconstructionHead<float> head(enc, 8);
    num::AdamW<float> opt_enc(enc.params(), {1e-3, 0.0});
    num::AdamW<float> opt_head(head.params(), {1e-3, 0.0});
    num::Rng rng(9);
    auto eval = [&] {
        num::NoGradGuard g;
        num::Rng fixed(77);
        double total = 0;
        for (int i = 0; i < 5; ++i) total += tab::masked_pretrain_step(enc, head, batch, 0.25, fixed).item();
        return total / 5;
    };
    const double initial = eval();
    for (int step = 0; step < 200; ++step) {
        std::vector<std::size_t> idx;
        for (int i = 0; i < 64; ++i) idx.push_back(rng.index(500));
        auto mb = batch.select_rows(idx);
        enc.params().zero_grad();
        head.params().zero_grad();
        num::backward(tab::masked_pretrain_step(enc, head, mb, 0.25, rng));
        opt_enc.step();
        opt_head.step();
    }
    const double final_loss = eval();
    EXPECT_LT(final_loss, 0.7 * initial) << initial << " -> " << final_loss;
}
