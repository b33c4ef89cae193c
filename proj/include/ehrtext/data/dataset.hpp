#pragma once

// Paired tabular/text datasets: synthetic generation with a known latent
// alignment, CSV + JSONL ingestion, and persistence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrtext/data/csv.hpp"
#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/random.hpp"
#include "ehrtext/tabular/schema.hpp"

namespace ehrtext::data {

// Row i of `table` is paired with notes[i]; labels are keyed by task name.
struct PairedDataset {
    std::vector<std::string> ids;
    tab::RawTable table;
    std::vector<std::string> notes;
    std::map<std::string, std::vector<int>> labels;
    std::string provenance = "synthetic";

    std::size_t size() const { return ids.size(); }

    void validate() const {
        const std::size_t n = ids.size();
        if (table.rows.size() != n || notes.size() != n) {
            throw DataError("dataset: rows, notes and ids differ in count");
        }
        for (const auto& [task, y] : labels) {
            if (y.size() != n) throw DataError("dataset: label column '" + task + "' has wrong length");
        }
        std::set<std::string> seen(ids.begin(), ids.end());
        if (seen.size() != n) throw DataError("dataset: pairing ids are not unique");
    }

    PairedDataset subset(const std::vector<std::size_t>& idx) const {
        PairedDataset out;
        out.provenance = provenance;
        out.table = table.select_rows(idx);
        for (std::size_t i : idx) {
            out.ids.push_back(ids.at(i));
            out.notes.push_back(notes.at(i));
        }
        for (const auto& [task, y] : labels) {
            auto& dst = out.labels[task];
            for (std::size_t i : idx) dst.push_back(y.at(i));
        }
        return out;
    }

    const std::vector<int>& task_labels(const std::string& task) const {
        auto it = labels.find(task);
        if (it == labels.end()) throw DataError("dataset has no label column '" + task + "'");
        return it->second;
    }

    friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

// ---------------------------------------------------------------- synthetic generation

struct SynthTask {
    std::string name;
    std::vector<double> weights;  // over the aligned latent factors; drawn from the seed when empty
    double bias = 0.0;
};

struct SynthConfig {
    int latent_dim = 6;             // factors shared by tabular features, notes and labels
    int nuisance_dim = 6;           // factors driving tabular features only
    int numerical_features = 24;
    std::vector<int> categorical_cardinalities = {2, 2, 3, 4, 5, 3};
    int topic_words_per_factor = 2;
    int filler_words = 4;
    double topic_sharpness = 2.5;   // note topic weights are softmax(sharpness * z)
    int min_topic_tokens = 50;
    int max_topic_tokens = 80;
    double long_note_rate = 0.03;   // share of notes long enough to need several chunks
    double noise = 0.5;             // sigma of tabular noise
    double nuisance_scale = 1.5;    // loading scale of nuisance factors
    double label_strength = 2.5;    // norm of drawn label weights
    std::vector<SynthTask> tasks = {{"readmission", {}, -0.8}, {"critical", {}, -0.4}};
    int pairs = 5000;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const SynthConfig& c) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : c.tasks) tasks.push_back({{"name", t.name}, {"weights", t.weights}, {"bias", t.bias}});
    return {{"latent_dim", c.latent_dim},
            {"nuisance_dim", c.nuisance_dim},
            {"numerical_features", c.numerical_features},
            {"categorical_cardinalities", c.categorical_cardinalities},
            {"topic_words_per_factor", c.topic_words_per_factor},
            {"filler_words", c.filler_words},
            {"topic_sharpness", c.topic_sharpness},
            {"min_topic_tokens", c.min_topic_tokens},
            {"max_topic_tokens", c.max_topic_tokens},
            {"long_note_rate", c.long_note_rate},
            {"noise", c.noise},
            {"nuisance_scale", c.nuisance_scale},
            {"label_strength", c.label_strength},
            {"tasks", tasks},
            {"pairs", c.pairs},
            {"seed", c.seed}};
}

// Latent draws and derived quantities kept alongside a synthetic dataset for
// oracle checks.
struct SynthTruth {
    std::vector<std::vector<double>> latent;             // pairs x latent_dim
    std::vector<std::vector<double>> signal;             // pairs x numerical: A z without noise
    std::map<std::string, std::vector<double>> label_probability;
    std::vector<std::vector<std::string>> topic_vocabulary;  // per factor
};

namespace detail {

// Deterministic letters-only pseudo-word for (kind, index).
inline std::string pseudo_word(std::uint64_t kind, std::uint64_t index) {
    static const char* consonants = "bdfgklmnprstvz";
    static const char* vowels = "aeiou";
    std::uint64_t h = num::splitmix64(kind * 1000003ULL + index);
    std::string w;
    const int syllables = 2 + static_cast<int>(h % 2);
    for (int s = 0; s < syllables; ++s) {
        h = num::splitmix64(h);
        w.push_back(consonants[h % 14]);
        w.push_back(vowels[(h >> 8) % 5]);
    }
    h = num::splitmix64(h);
    w.push_back(consonants[h % 14]);
    return w;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Standard normal quantile by bisection on erfc.
inline double normal_quantile(double p) {
    double lo = -10.0, hi = 10.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

inline std::string format_date(num::Rng& rng) {
    static const char* months[] = {"January", "February", "March",     "April",   "May",      "June",
                                   "July",    "August",   "September", "October", "November", "December"};
    static const char* short_months[] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                         "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
    const int y = 2008 + static_cast<int>(rng.index(12));
    const int m = 1 + static_cast<int>(rng.index(12));
    const int d = 1 + static_cast<int>(rng.index(28));
    char buf[64];
    switch (rng.index(4)) {
        case 0: std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d); break;
        case 1: std::snprintf(buf, sizeof(buf), "%d/%d/%04d", m, d, y); break;
        case 2: std::snprintf(buf, sizeof(buf), "%02d-%s-%04d", d, short_months[m - 1], y); break;
        default: std::snprintf(buf, sizeof(buf), "%s %d, %04d", months[m - 1], d, y); break;
    }
    return buf;
}

inline std::string format_vital(num::Rng& rng) {
    char buf[64];
    switch (rng.index(4)) {
        case 0: std::snprintf(buf, sizeof(buf), "BP %d/%d", 95 + int(rng.index(60)), 55 + int(rng.index(40))); break;
        case 1: std::snprintf(buf, sizeof(buf), "HR %d", 50 + int(rng.index(70))); break;
        case 2: std::snprintf(buf, sizeof(buf), "Temp %.1f", 36.0 + rng.uniform() * 3.0); break;
        default: std::snprintf(buf, sizeof(buf), "(%d mg)", 5 * (1 + int(rng.index(40)))); break;
    }
    return buf;
}

}  // namespace detail

inline PairedDataset generate_synthetic(const SynthConfig& cfg, SynthTruth* truth = nullptr) {
    if (cfg.latent_dim < 1) throw ConfigError("synthetic: latent_dim must be >= 1");
    if (cfg.nuisance_dim < 0) throw ConfigError("synthetic: nuisance_dim must be >= 0");
    if (cfg.noise < 0.0) throw ConfigError("synthetic: noise must be >= 0");
    if (cfg.pairs < 1) throw ConfigError("synthetic: pairs must be >= 1");
    if (cfg.topic_words_per_factor < 1) throw ConfigError("synthetic: empty topic vocabulary");
    if (cfg.numerical_features < 0 || cfg.min_topic_tokens < 1 || cfg.max_topic_tokens < cfg.min_topic_tokens) {
        throw ConfigError("synthetic: invalid feature or note length settings");
    }
    for (int c : cfg.categorical_cardinalities) {
        if (c < 2) throw ConfigError("synthetic: categorical cardinality must be >= 2");
    }
    for (const auto& t : cfg.tasks) {
        if (!t.weights.empty() && static_cast<int>(t.weights.size()) != cfg.latent_dim) {
            throw ConfigError("synthetic: task '" + t.name + "' weight length differs from latent_dim");
        }
    }

    const int k = cfg.latent_dim;
    const int m = cfg.nuisance_dim;
    const int n_num = cfg.numerical_features;
    const auto n_cat = static_cast<int>(cfg.categorical_cardinalities.size());

    // Fixed structure drawn from its own stream.
    num::Rng structure(num::derive_seed(cfg.seed, "synthetic/structure"));
    std::vector<std::vector<double>> load_z(n_num, std::vector<double>(k));
    std::vector<std::vector<double>> load_u(n_num, std::vector<double>(m));
    for (int f = 0; f < n_num; ++f) {
        for (int j = 0; j < k; ++j) load_z[f][j] = structure.normal() / std::sqrt(double(k));
        for (int j = 0; j < m; ++j) load_u[f][j] = cfg.nuisance_scale * structure.normal() / std::sqrt(double(std::max(m, 1)));
    }
    std::vector<std::vector<double>> cat_dir(n_cat, std::vector<double>(k + m));
    std::vector<double> cat_norm(n_cat);
    for (int c = 0; c < n_cat; ++c) {
        double sq = 0.0;
        for (int j = 0; j < k + m; ++j) {
            cat_dir[c][j] = structure.normal();
            sq += cat_dir[c][j] * cat_dir[c][j];
        }
        cat_norm[c] = std::sqrt(sq);
    }
    std::vector<SynthTask> tasks = cfg.tasks;
    for (auto& t : tasks) {
        if (!t.weights.empty()) continue;
        t.weights.resize(k);
        // Centered, since softmax topic weights cannot reveal a shift shared
        // by every factor.
        double mean = 0.0;
        for (auto& w : t.weights) {
            w = structure.normal();
            mean += w / k;
        }
        double sq = 0.0;
        for (auto& w : t.weights) {
            if (k > 1) w -= mean;
            sq += w * w;
        }
        for (auto& w : t.weights) w *= cfg.label_strength / std::sqrt(sq);
    }

    // Topic and filler vocabularies are pairwise disjoint.
    std::set<std::string> used;
    std::uint64_t counter = 0;
    auto fresh_word = [&](std::uint64_t kind) {
        while (true) {
            std::string w = detail::pseudo_word(kind, counter++);
            if (used.insert(w).second) return w;
        }
    };
    std::vector<std::vector<std::string>> topics(k);
    for (int j = 0; j < k; ++j) {
        for (int i = 0; i < cfg.topic_words_per_factor; ++i) topics[j].push_back(fresh_word(100 + j));
    }
    std::vector<std::string> filler;
    for (int i = 0; i < cfg.filler_words; ++i) filler.push_back(fresh_word(7));

    PairedDataset ds;
    ds.provenance = "synthetic";
    for (int f = 0; f < n_num; ++f) ds.table.columns.push_back("num_" + std::to_string(f));
    for (int c = 0; c < n_cat; ++c) ds.table.columns.push_back("cat_" + std::to_string(c));
    if (truth != nullptr) {
        *truth = SynthTruth{};
        truth->topic_vocabulary = topics;
    }

    num::Rng rng(num::derive_seed(cfg.seed, "synthetic/pairs"));
    static const char* kept_sections[] = {"Chief Complaint", "History of Present Illness", "Hospital Course",
                                          "Assessment and Plan"};
    static const char* decoy_sections[] = {"Discharge Instructions", "Technique", "Administrative"};
    for (int p = 0; p < cfg.pairs; ++p) {
        std::vector<double> z(k), u(m);
        for (auto& v : z) v = rng.normal();
        for (auto& v : u) v = rng.normal();

        std::vector<tab::Cell> row;
        std::vector<double> signal(n_num);
        for (int f = 0; f < n_num; ++f) {
            double s = 0.0;
            for (int j = 0; j < k; ++j) s += load_z[f][j] * z[j];
            signal[f] = s;
            for (int j = 0; j < m; ++j) s += load_u[f][j] * u[j];
            // Rounded like a lab value so CSV round trips are exact.
            const double v = std::round((50.0 + 10.0 * (s + cfg.noise * rng.normal())) * 1e4) / 1e4;
            row.emplace_back(v);
        }
        for (int c = 0; c < n_cat; ++c) {
            double s = 0.0;
            for (int j = 0; j < k; ++j) s += cat_dir[c][j] * z[j];
            for (int j = 0; j < m; ++j) s += cat_dir[c][k + j] * u[j];
            s = s / cat_norm[c] + cfg.noise * rng.normal();
            const int card = cfg.categorical_cardinalities[c];
            const double scale = std::sqrt(1.0 + cfg.noise * cfg.noise);
            int bucket = 0;
            for (int b = 1; b < card; ++b) {
                if (s > scale * detail::normal_quantile(double(b) / card)) bucket = b;
            }
            if (card == 2) {
                row.emplace_back(double(bucket));
            } else {
                row.emplace_back("grade_" + std::string(1, char('a' + bucket)));
            }
        }
        ds.table.rows.push_back(std::move(row));

        for (const auto& t : tasks) {
            double logit = t.bias;
            for (int j = 0; j < k; ++j) logit += t.weights[j] * z[j];
            const double prob = detail::sigmoid(logit);
            ds.labels[t.name].push_back(rng.bernoulli(prob) ? 1 : 0);
            if (truth != nullptr) truth->label_probability[t.name].push_back(prob);
        }

        // Topic weights softmax(sharpness * z).
        std::vector<double> w(k);
        double mx = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (int j = 0; j < k; ++j) {
            w[j] = std::exp(cfg.topic_sharpness * (z[j] - mx));
            total += w[j];
        }
        std::vector<double> cdf(k);
        double acc = 0.0;
        for (int j = 0; j < k; ++j) {
            acc += w[j] / total;
            cdf[j] = acc;
        }
        auto draw_topic = [&]() {
            const double r = rng.uniform();
            int j = 0;
            while (j < k - 1 && r > cdf[j]) ++j;
            return j;
        };
        int topic_tokens = cfg.min_topic_tokens + int(rng.index(std::size_t(cfg.max_topic_tokens - cfg.min_topic_tokens + 1)));
        if (rng.bernoulli(cfg.long_note_rate)) topic_tokens *= 5;

        std::ostringstream note;
        const int sections = 4;
        int emitted = 0;
        for (int s = 0; s < sections; ++s) {
            note << kept_sections[s] << ":\n";
            const int quota = s == sections - 1 ? topic_tokens - emitted : topic_tokens / sections;
            std::string line;
            for (int i = 0; i < quota; ++i) {
                const int j = draw_topic();
                line += topics[j][rng.index(topics[j].size())];
                ++emitted;
                if (rng.bernoulli(0.3)) line += " " + filler[rng.index(filler.size())];
                if (rng.bernoulli(0.04)) line += " on " + detail::format_date(rng);
                if (rng.bernoulli(0.04)) line += " " + detail::format_vital(rng);
                line += rng.bernoulli(0.12) ? ". " : (rng.bernoulli(0.1) ? ", " : " ");
            }
            note << line << "\n";
            if (rng.bernoulli(0.35)) {
                // Decoy section whose topic words carry no pairing signal.
                note << decoy_sections[rng.index(3)] << ":\n";
                const int noise_words = 8 + int(rng.index(12));
                for (int i = 0; i < noise_words; ++i) {
                    const int j = int(rng.index(std::size_t(k)));
                    note << topics[j][rng.index(topics[j].size())] << (i % 5 == 4 ? ". " : " ");
                }
                note << "Call 555-" << 1000 + rng.index(9000) << " with questions.\n";
            }
        }
        char id[32];
        std::snprintf(id, sizeof(id), "p%06d", p);
        ds.ids.emplace_back(id);
        ds.notes.push_back(note.str());
        if (truth != nullptr) {
            truth->latent.push_back(z);
            truth->signal.push_back(signal);
        }
    }
    return ds;
}

// ---------------------------------------------------------------- ingestion

struct IngestReport {
    std::size_t rows_without_notes = 0;
    std::size_t notes_without_rows = 0;
};

inline std::vector<std::pair<std::string, std::string>> read_notes_jsonl(std::istream& in) {
    std::vector<std::pair<std::string, std::string>> notes;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            const auto& idj = j.at("id");
            std::string id = idj.is_string() ? idj.get<std::string>() : idj.dump();
            notes.emplace_back(std::move(id), j.at("text").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError("notes JSONL line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return notes;
}

// Inner join of a tabular CSV and a notes JSONL file on `join_key`. Columns
// named in `label_columns` become labels (values 0/1) instead of features.
inline PairedDataset ingest(std::istream& csv, std::istream& jsonl, const std::string& join_key,
                            const std::vector<std::string>& label_columns = {}, IngestReport* report = nullptr) {
    tab::RawTable raw = read_csv_table(csv);
    auto key_col = raw.column_index(join_key);
    if (!key_col) throw DataError("ingest: join key column '" + join_key + "' not found");

    std::map<std::string, std::size_t> row_by_key;
    std::vector<std::string> duplicates;
    for (std::size_t r = 0; r < raw.rows.size(); ++r) {
        const std::string key = tab::cell_text(raw.rows[r][*key_col]);
        if (!row_by_key.emplace(key, r).second) duplicates.push_back(key);
    }
    if (!duplicates.empty()) {
        std::string msg = "ingest: duplicate join keys in CSV:";
        for (const auto& d : duplicates) msg += " " + d;
        throw DataError(msg);
    }
    auto notes = read_notes_jsonl(jsonl);
    std::map<std::string, std::size_t> note_by_key;
    duplicates.clear();
    for (std::size_t i = 0; i < notes.size(); ++i) {
        if (!note_by_key.emplace(notes[i].first, i).second) duplicates.push_back(notes[i].first);
    }
    if (!duplicates.empty()) {
        std::string msg = "ingest: duplicate note ids:";
        for (const auto& d : duplicates) msg += " " + d;
        throw DataError(msg);
    }

    std::vector<std::size_t> label_idx;
    for (const auto& l : label_columns) {
        auto idx = raw.column_index(l);
        if (!idx) throw DataError("ingest: label column '" + l + "' not found");
        label_idx.push_back(*idx);
    }
    std::vector<std::size_t> feature_idx;
    for (std::size_t c = 0; c < raw.columns.size(); ++c) {
        if (c == *key_col || std::find(label_idx.begin(), label_idx.end(), c) != label_idx.end()) continue;
        feature_idx.push_back(c);
    }

    PairedDataset ds;
    ds.provenance = "ingested";
    for (std::size_t c : feature_idx) ds.table.columns.push_back(raw.columns[c]);
    IngestReport rep;
    for (std::size_t r = 0; r < raw.rows.size(); ++r) {
        const std::string key = tab::cell_text(raw.rows[r][*key_col]);
        auto it = note_by_key.find(key);
        if (it == note_by_key.end()) {
            ++rep.rows_without_notes;
            continue;
        }
        ds.ids.push_back(key);
        ds.notes.push_back(notes[it->second].second);
        std::vector<tab::Cell> row;
        for (std::size_t c : feature_idx) row.push_back(raw.rows[r][c]);
        ds.table.rows.push_back(std::move(row));
        for (std::size_t l = 0; l < label_idx.size(); ++l) {
            const auto* v = std::get_if<double>(&raw.rows[r][label_idx[l]]);
            if (v == nullptr || (*v != 0.0 && *v != 1.0)) {
                throw DataError("ingest: label '" + label_columns[l] + "' of key " + key + " is not 0/1");
            }
            ds.labels[label_columns[l]].push_back(static_cast<int>(*v));
        }
    }
    for (const auto& [key, i] : note_by_key) {
        if (!row_by_key.count(key)) ++rep.notes_without_rows;
    }
    if (ds.ids.empty()) throw DataError("ingest: join produced no pairs");
    for (const auto& l : label_columns) ds.labels[l];
    if (report != nullptr) *report = rep;
    return ds;
}

inline PairedDataset ingest(const std::string& csv_path, const std::string& jsonl_path, const std::string& join_key,
                            const std::vector<std::string>& label_columns = {}, IngestReport* report = nullptr) {
    std::ifstream csv(csv_path, std::ios::binary);
    if (!csv) throw DataError("cannot open '" + csv_path + "'");
    std::ifstream jsonl(jsonl_path, std::ios::binary);
    if (!jsonl) throw DataError("cannot open '" + jsonl_path + "'");
    return ingest(csv, jsonl, join_key, label_columns, report);
}

inline constexpr const char* kIdColumn = "id";

// Writes `<dir>/tabular.csv` (id, features, labels) and `<dir>/notes.jsonl`.
inline void write_dataset(const PairedDataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "tabular.csv", std::ios::binary);
        tab::RawTable t;
        t.columns.push_back(kIdColumn);
        t.columns.insert(t.columns.end(), ds.table.columns.begin(), ds.table.columns.end());
        for (const auto& [task, y] : ds.labels) t.columns.push_back(task);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            std::vector<tab::Cell> row;
            row.emplace_back(ds.ids[i]);
            row.insert(row.end(), ds.table.rows[i].begin(), ds.table.rows[i].end());
            for (const auto& [task, y] : ds.labels) row.emplace_back(double(y[i]));
            t.rows.push_back(std::move(row));
        }
        write_csv_table(out, t);
    }
    std::ofstream notes(dir / "notes.jsonl", std::ios::binary);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        notes << nlohmann::json{{"id", ds.ids[i]}, {"text", ds.notes[i]}}.dump() << "\n";
    }
}

inline PairedDataset read_dataset(const std::filesystem::path& dir, const std::vector<std::string>& label_columns,
                                  IngestReport* report = nullptr) {
    return ingest((dir / "tabular.csv").string(), (dir / "notes.jsonl").string(), kIdColumn, label_columns, report);
}

}  // namespace ehrtext::data
