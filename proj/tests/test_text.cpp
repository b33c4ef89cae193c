#include <gtest/gtest.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/gradcheck.hpp"
#include "ehrtext/text/chunk.hpp"
#include "ehrtext/text/encoder.hpp"
#include "ehrtext/text/normalize.hpp"
#include "ehrtext/text/vocab.hpp"

using namespace ehrtext;
using text::NoteChunks;

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::vector<std::string> kFixtures = {"discharge_summary", "consecutive_dropped", "no_headers",
                                            "case_and_unicode"};

std::filesystem::path fixture(const std::string& name, const std::string& kind) {
    return std::filesystem::path(EHRTEXT_FIXTURE_DIR) / "preprocess" / (name + "." + kind + ".txt");
}

bool has_digit_or_punct(const std::string& s) {
    for (unsigned char c : s) {
        if (c < 0x80 && (std::isdigit(c) || std::ispunct(c))) return true;
    }
    return false;
}

text::TextEncoderConfig toy_config() {
    text::TextEncoderConfig c;
    c.vocab_size = 40;
    c.dim = 16;
    c.heads = 2;
    c.layers = 3;
    c.ffn = 24;
    c.max_positions = 8;
    c.frozen_layers = 1;
    return c;
}

NoteChunks make_note(std::vector<std::vector<int>> chunks) {
    NoteChunks n;
    for (auto& c : chunks) {
        c.insert(c.begin(), text::kClsId);
        n.attention_mask.emplace_back(c.size(), 1);
        n.ids.push_back(std::move(c));
    }
    return n;
}

}  // namespace

TEST(NormalizeText, Examples) {
    EXPECT_EQ(text::normalize_text("Admitted 2019-03-04, BP 120/80."), "admitted bp");
    EXPECT_EQ(text::normalize_text("HELLO   World"), "hello world");
    EXPECT_EQ(text::normalize_text(""), "");
    EXPECT_EQ(text::normalize_text("  \t\n "), "");
}

TEST(NormalizeText, DateForms) {
    EXPECT_EQ(text::normalize_text("on 3/6/2019 then"), "on then");
    EXPECT_EQ(text::normalize_text("on 04-Mar-2019 then"), "on then");
    EXPECT_EQ(text::normalize_text("on March 4, 2019 then"), "on then");
    EXPECT_EQ(text::normalize_text("on Sept 4th 2019 then"), "on then");
    EXPECT_EQ(text::normalize_text("on 12 december 2020 then"), "on then");
    // Month names without a date pattern survive as words.
    EXPECT_EQ(text::normalize_text("may improve in march"), "may improve in march");
}

TEST(Preprocess, GoldenFiles) {
    for (const auto& name : kFixtures) {
        const std::string raw = read_file(fixture(name, "raw"));
        ASSERT_FALSE(raw.empty()) << name;
        EXPECT_EQ(text::strip_sections(raw), read_file(fixture(name, "stripped"))) << name;
        const std::string normalized = text::preprocess_note(raw);
        EXPECT_EQ(normalized, read_file(fixture(name, "normalized"))) << name;
        EXPECT_FALSE(has_digit_or_punct(normalized)) << name;
        EXPECT_EQ(text::normalize_text(normalized), normalized) << name;
    }
}

TEST(Preprocess, IdempotentOnRandomText) {
    num::Rng rng(3);
    const std::string alphabet = "abcXYZ 019-/:.,;()!?\t\n\"'#%&*+=<>[]{}|~^_`@$\\";
    for (int t = 0; t < 500; ++t) {
        std::string s;
        const std::size_t len = rng.index(80);
        for (std::size_t i = 0; i < len; ++i) s.push_back(alphabet[rng.index(alphabet.size())]);
        const std::string once = text::normalize_text(s);
        EXPECT_EQ(text::normalize_text(once), once);
        EXPECT_FALSE(has_digit_or_punct(once)) << s;
        EXPECT_EQ(once.find("  "), std::string::npos);
        if (!once.empty()) {
            EXPECT_NE(once.front(), ' ');
            EXPECT_NE(once.back(), ' ');
        }
    }
}

TEST(StripSections, NoHeadersUnchanged) {
    const std::string doc = "Chief Complaint:\nchest pain\nHistory:\nnone\n";
    EXPECT_EQ(text::strip_sections(doc), doc);
    EXPECT_EQ(text::strip_sections(""), "");
}

TEST(StripSections, CustomDropList) {
    const std::string doc = "A:\none\nB:\ntwo\nC:\nthree";
    EXPECT_EQ(text::strip_sections(doc, {"b"}), "A:\none\nC:\nthree");
    EXPECT_EQ(text::section_header("  Assessment & Plan: x"), "Assessment & Plan");
    EXPECT_EQ(text::section_header("BP 120/80: high"), "");
    EXPECT_EQ(text::section_header("no colon here"), "");
}

TEST(Vocab, ReservedIdsAndOrdering) {
    auto v = text::Vocab::build({{"b", "a", "b", "c"}, {"a", "b", "d"}}, 2);
    EXPECT_EQ(v.id("[pad]"), text::kPadId);
    EXPECT_EQ(v.id("[unk]"), text::kUnkId);
    EXPECT_EQ(v.id("[cls]"), text::kClsId);
    EXPECT_EQ(v.size(), 5);
    EXPECT_EQ(v.token(3), "b");
    EXPECT_EQ(v.token(4), "a");
    EXPECT_EQ(v.id("c"), text::kUnkId);
    EXPECT_EQ(v.encode({"a", "zzz", "b"}), (std::vector<int>{4, text::kUnkId, 3}));
    EXPECT_EQ(text::Vocab::from_json(v.to_json()), v);
    for (int i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(i)), i);
}

TEST(Vocab, RejectsReservedReassignment) {
    nlohmann::json bad = nlohmann::json::array(
        {{{"token", "[pad]"}, {"id", 1}, {"frequency", 0}}, {{"token", "[unk]"}, {"id", 0}, {"frequency", 0}}});
    EXPECT_ANY_THROW(text::Vocab::from_json(bad));
}

TEST(Chunk, Examples) {
    auto one = text::chunk(std::vector<int>(255, 7));
    ASSERT_EQ(one.count(), 1u);
    EXPECT_EQ(one.ids[0].size(), 256u);
    EXPECT_EQ(one.ids[0][0], text::kClsId);

    auto three = text::chunk(std::vector<int>(600, 7));
    ASSERT_EQ(three.count(), 3u);
    EXPECT_EQ(three.ids[0].size(), 256u);
    EXPECT_EQ(three.ids[1].size(), 256u);
    // 255 + 255 + 90 content tokens; the last chunk holds CLS plus 90.
    EXPECT_EQ(three.ids[2].size(), 91u);

    auto empty = text::chunk({});
    ASSERT_EQ(empty.count(), 1u);
    EXPECT_EQ(empty.ids[0], std::vector<int>{text::kClsId});
}

TEST(Chunk, PartitionProperties) {
    num::Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = rng.index(1200);
        std::vector<int> ids(n);
        for (auto& x : ids) x = 3 + static_cast<int>(rng.index(100));
        auto c = text::chunk(ids);
        EXPECT_EQ(c.count(), (std::max<std::size_t>(n, 1) + 254) / 255);
        std::vector<int> rebuilt;
        for (std::size_t i = 0; i < c.count(); ++i) {
            EXPECT_LE(c.ids[i].size(), 256u);
            EXPECT_EQ(c.ids[i][0], text::kClsId);
            if (i + 1 < c.count()) EXPECT_EQ(c.ids[i].size(), 256u);
            rebuilt.insert(rebuilt.end(), c.ids[i].begin() + 1, c.ids[i].end());
        }
        EXPECT_EQ(rebuilt, ids);
    }
}

TEST(TextEncoder, DefaultDimensionAndFreeze) {
    text::TextEncoderConfig cfg;
    cfg.vocab_size = 30;
    text::TextEncoder<float> enc(cfg, 1);
    auto t = enc.encode(text::chunk({5, 6, 7, 8}));
    EXPECT_EQ(t.rows(), 1);
    EXPECT_EQ(t.cols(), 768);
    EXPECT_EQ(enc.frozen_groups(), (std::set<std::string>{"embeddings", "layer0", "layer1"}));
    text::TextEncoderConfig bad = cfg;
    bad.frozen_layers = bad.layers;
    EXPECT_THROW(text::TextEncoder<float>(bad, 1), ConfigError);
}

TEST(TextEncoder, PoolingIdentities) {
    text::TextEncoder<double> enc(toy_config(), 2);
    auto a = make_note({{5, 6, 7}});
    auto b = make_note({{9, 10, 11, 12, 13}});
    auto ab = make_note({{5, 6, 7}, {9, 10, 11, 12, 13}});
    auto ba = make_note({{9, 10, 11, 12, 13}, {5, 6, 7}});
    auto aa = make_note({{5, 6, 7}, {5, 6, 7}});
    auto ta = enc.encode(a).value();
    auto tb = enc.encode(b).value();
    EXPECT_LT((enc.encode(aa).value() - ta).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((enc.encode(ab).value() - 0.5 * (ta + tb)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((enc.encode(ab).value() - enc.encode(ba).value()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(TextEncoder, PaddingIsMaskedOut) {
    text::TextEncoder<double> enc(toy_config(), 3);
    auto note = make_note({{5, 6, 7}, {8, 9}});
    auto padded = text::pad_chunks(note, 8);
    EXPECT_LT((enc.encode(note).value() - enc.encode(padded).value()).cwiseAbs().maxCoeff(), 1e-12);
    for (int layer = 0; layer < 3; ++layer) {
        auto w = enc.attention_weights(padded, layer);
        ASSERT_EQ(w.size(), 2u);
        for (std::size_t c = 0; c < w.size(); ++c) {
            for (const auto& head : w[c]) {
                for (num::Index r = 0; r < head.rows(); ++r) {
                    EXPECT_NEAR(head.row(r).sum(), 1.0, 1e-6);
                    for (num::Index k = 0; k < head.cols(); ++k) {
                        if (!padded.attention_mask[c][static_cast<std::size_t>(k)]) EXPECT_EQ(head(r, k), 0.0);
                    }
                }
            }
        }
    }
}

TEST(TextEncoder, BatchMatchesSingleNotes) {
    text::TextEncoder<double> enc(toy_config(), 4);
    auto a = make_note({{5, 6, 7}, {3, 4}});
    auto b = make_note({{9, 10, 11, 12, 13}});
    auto both = enc.encode({&a, &b}).value();
    EXPECT_LT((both.row(0) - enc.encode(a).value().row(0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((both.row(1) - enc.encode(b).value().row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TextEncoder, PrefixCacheMatchesFullEncode) {
    text::TextEncoder<double> enc(toy_config(), 5);
    auto a = make_note({{5, 6, 7}, {3, 4}});
    auto b = make_note({{9, 10, 11, 12, 13}});
    enc.unfreeze_all();
    EXPECT_THROW(
        {
            auto pa = enc.prefix(a);
            enc.encode_from_prefix({&pa});
        },
        ContractViolation);
    enc.apply_default_freeze();
    auto pa = enc.prefix(a);
    auto pb = enc.prefix(b);
    auto cached = enc.encode_from_prefix({&pa, &pb}).value();
    auto full = enc.encode({&a, &b}).value();
    EXPECT_LT((cached - full).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TextEncoder, FrozenLayersReceiveNoGradient) {
    text::TextEncoder<double> enc(toy_config(), 6);
    enc.apply_default_freeze();
    auto a = make_note({{5, 6, 7}, {3, 4}});
    num::backward(num::sum_all(enc.encode(a)));
    for (auto& p : enc.params().all()) {
        const bool frozen = p.group == "embeddings" || p.group == "layer0";
        if (frozen) {
            EXPECT_FALSE(p.var.has_grad()) << p.name;
        }
    }
}

TEST(TextEncoder, GradcheckTwoChunks) {
    auto cfg = toy_config();
    text::TextEncoder<double> enc(cfg, 7);
    enc.unfreeze_all();
    auto note = text::pad_chunks(make_note({{5, 6, 7, 8}, {9, 10, 11}}), 8);
    num::Rng rng(8);
    num::Matrix<double> w = rng.normal_matrix<double>(1, cfg.dim, 1.0);
    std::vector<num::Var<double>> all;
    for (auto& p : enc.params().all()) all.push_back(p.var);
    auto f = [&] { return num::sum_all(num::mul(enc.encode(note), num::Var<double>(w))); };
    auto r = num::gradcheck(f, all, 1e-6, 12, 2);
    EXPECT_LT(r.max_relative_error, 1e-5) << "input " << r.worst_input << " coord " << r.worst_coordinate;
}
