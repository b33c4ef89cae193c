#pragma once

// Raw tables, column-role inference and row encoding for the tabular modality.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::tab {

// A table cell: missing, numeric or free text.
using Cell = std::variant<std::monostate, double, std::string>;

inline bool is_missing(const Cell& c) { return std::holds_alternative<std::monostate>(c); }

// Shortest round-trip decimal form; used as the category label of numbers.
inline std::string format_number(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

inline std::string cell_text(const Cell& c) {
    if (const auto* d = std::get_if<double>(&c)) return format_number(*d);
    if (const auto* s = std::get_if<std::string>(&c)) return *s;
    return {};
}

struct RawTable {
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;

    std::optional<std::size_t> column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i) {
            if (columns[i] == name) return i;
        }
        return std::nullopt;
    }

    std::size_t size() const { return rows.size(); }

    RawTable select_rows(const std::vector<std::size_t>& indices) const {
        RawTable out;
        out.columns = columns;
        out.rows.reserve(indices.size());
        for (std::size_t i : indices) out.rows.push_back(rows.at(i));
        return out;
    }

    friend bool operator==(const RawTable&, const RawTable&) = default;
};

enum class ColumnRole { categorical, numerical };

inline const char* to_string(ColumnRole r) { return r == ColumnRole::categorical ? "categorical" : "numerical"; }

struct ColumnSpec {
    std::string name;
    ColumnRole role = ColumnRole::numerical;
    std::vector<std::string> vocabulary;  // categorical only, lexicographic
    double mean = 0.0;                    // numerical only
    double stddev = 1.0;                  // numerical only

    friend bool operator==(const ColumnSpec&, const ColumnSpec&) = default;
};

struct FeatureSchema {
    std::vector<ColumnSpec> columns;

    std::size_t feature_count() const { return columns.size(); }

    std::vector<const ColumnSpec*> categorical() const {
        std::vector<const ColumnSpec*> out;
        for (const auto& c : columns)
            if (c.role == ColumnRole::categorical) out.push_back(&c);
        return out;
    }

    std::vector<const ColumnSpec*> numerical() const {
        std::vector<const ColumnSpec*> out;
        for (const auto& c : columns)
            if (c.role == ColumnRole::numerical) out.push_back(&c);
        return out;
    }

    friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

inline nlohmann::json to_json(const FeatureSchema& schema) {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : schema.columns) {
        nlohmann::json j{{"name", c.name}, {"role", to_string(c.role)}};
        if (c.role == ColumnRole::categorical) {
            j["vocabulary"] = c.vocabulary;
        } else {
            j["mean"] = c.mean;
            j["std"] = c.stddev;
        }
        cols.push_back(std::move(j));
    }
    return {{"version", 1}, {"columns", std::move(cols)}};
}

inline FeatureSchema schema_from_json(const nlohmann::json& j) {
    FeatureSchema schema;
    try {
        for (const auto& c : j.at("columns")) {
            ColumnSpec spec;
            spec.name = c.at("name").get<std::string>();
            const auto role = c.at("role").get<std::string>();
            if (role == "categorical") {
                spec.role = ColumnRole::categorical;
                spec.vocabulary = c.at("vocabulary").get<std::vector<std::string>>();
            } else if (role == "numerical") {
                spec.role = ColumnRole::numerical;
                spec.mean = c.at("mean").get<double>();
                spec.stddev = c.at("std").get<double>();
            } else {
                throw SchemaError("unknown column role '" + role + "'");
            }
            schema.columns.push_back(std::move(spec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed schema JSON: ") + e.what());
    }
    return schema;
}

// Infers column roles from a training table. Columns with any missing cell are
// dropped; columns holding text, or numbers with fewer than three distinct
// values, become categorical; the rest are numerical and get population
// mean/std statistics.
inline FeatureSchema build_schema(const RawTable& table, const std::vector<std::string>& excluded,
                                  std::vector<std::string>* warnings = nullptr) {
    if (table.rows.empty()) {
        throw SchemaError("build_schema: table has no rows");
    }
    std::set<std::string> skip(excluded.begin(), excluded.end());
    for (const auto& name : excluded) {
        if (!table.column_index(name) && warnings != nullptr) {
            warnings->push_back("excluded column '" + name + "' not present");
        }
    }
    FeatureSchema schema;
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
        const std::string& name = table.columns[c];
        if (skip.count(name)) continue;
        bool missing = false;
        bool has_text = false;
        std::set<double> numbers;
        for (const auto& row : table.rows) {
            const Cell& cell = row.at(c);
            if (is_missing(cell)) {
                missing = true;
                break;
            }
            if (std::holds_alternative<std::string>(cell)) {
                has_text = true;
            } else if (numbers.size() < 3) {
                numbers.insert(std::get<double>(cell));
            }
        }
        if (missing) {
            if (warnings != nullptr) warnings->push_back("dropped column '" + name + "' (missing values)");
            continue;
        }
        ColumnSpec spec;
        spec.name = name;
        if (has_text || numbers.size() < 3) {
            spec.role = ColumnRole::categorical;
            std::set<std::string> vocab;
            for (const auto& row : table.rows) vocab.insert(cell_text(row[c]));
            spec.vocabulary.assign(vocab.begin(), vocab.end());
        } else {
            spec.role = ColumnRole::numerical;
            double sum = 0.0;
            for (const auto& row : table.rows) sum += std::get<double>(row[c]);
            const double mean = sum / static_cast<double>(table.rows.size());
            double sq = 0.0;
            for (const auto& row : table.rows) {
                const double d = std::get<double>(row[c]) - mean;
                sq += d * d;
            }
            spec.mean = mean;
            spec.stddev = std::sqrt(sq / static_cast<double>(table.rows.size()));
            if (!(spec.stddev > 0.0)) {
                throw SchemaError("build_schema: numerical column '" + name + "' has zero variance");
            }
        }
        schema.columns.push_back(std::move(spec));
    }
    if (schema.columns.empty()) {
        throw SchemaError("build_schema: every column was excluded or dropped");
    }
    return schema;
}

using CategoryMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Encoded rows. Category index 0 is the reserved "unknown" slot; seen values
// map to 1 + their vocabulary position.
struct TabularBatch {
    CategoryMatrix categories;           // rows x categorical columns
    num::Matrix<double> numerical;       // rows x numerical columns, standardized
    std::optional<std::vector<int>> labels;

    std::size_t size() const { return static_cast<std::size_t>(std::max(categories.rows(), numerical.rows())); }

    TabularBatch select_rows(const std::vector<std::size_t>& idx) const {
        TabularBatch out;
        out.categories.resize(static_cast<num::Index>(idx.size()), categories.cols());
        out.numerical.resize(static_cast<num::Index>(idx.size()), numerical.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto r = static_cast<num::Index>(i);
            const auto s = static_cast<num::Index>(idx[i]);
            if (categories.cols() > 0) out.categories.row(r) = categories.row(s);
            if (numerical.cols() > 0) out.numerical.row(r) = numerical.row(s);
        }
        if (labels) {
            std::vector<int> l;
            l.reserve(idx.size());
            for (std::size_t i : idx) l.push_back(labels->at(i));
            out.labels = std::move(l);
        }
        return out;
    }
};

inline int category_index(const ColumnSpec& spec, const std::string& value) {
    auto it = std::lower_bound(spec.vocabulary.begin(), spec.vocabulary.end(), value);
    if (it == spec.vocabulary.end() || *it != value) return 0;
    return static_cast<int>(it - spec.vocabulary.begin()) + 1;
}

// Encodes rows of `table` with the schema's statistics. Columns are looked up
// by name; a missing column, a text value in a numerical column, or a missing
// numerical cell is a SchemaError. Unseen or missing categories map to 0.
inline TabularBatch encode_rows(const FeatureSchema& schema, const RawTable& table,
                                const std::optional<std::vector<int>>& labels = std::nullopt) {
    std::vector<std::string> absent;
    std::vector<std::size_t> source(schema.columns.size());
    for (std::size_t i = 0; i < schema.columns.size(); ++i) {
        auto idx = table.column_index(schema.columns[i].name);
        if (!idx) {
            absent.push_back(schema.columns[i].name);
        } else {
            source[i] = *idx;
        }
    }
    if (!absent.empty()) {
        std::string msg = "encode_rows: input lacks schema columns:";
        for (const auto& a : absent) msg += " " + a;
        throw SchemaError(msg);
    }
    const auto n = static_cast<num::Index>(table.rows.size());
    const auto cats = schema.categorical();
    const auto nums = schema.numerical();
    TabularBatch batch;
    batch.categories.resize(n, static_cast<num::Index>(cats.size()));
    batch.numerical.resize(n, static_cast<num::Index>(nums.size()));
    for (num::Index r = 0; r < n; ++r) {
        const auto& row = table.rows[static_cast<std::size_t>(r)];
        num::Index ci = 0;
        num::Index ni = 0;
        for (std::size_t i = 0; i < schema.columns.size(); ++i) {
            const ColumnSpec& spec = schema.columns[i];
            const Cell& cell = row.at(source[i]);
            if (spec.role == ColumnRole::categorical) {
                batch.categories(r, ci++) = is_missing(cell) ? 0 : category_index(spec, cell_text(cell));
            } else {
                const auto* v = std::get_if<double>(&cell);
                if (v == nullptr) {
                    throw SchemaError("encode_rows: column '" + spec.name + "' row " + std::to_string(r) +
                                      " is not numeric");
                }
                batch.numerical(r, ni++) = (*v - spec.mean) / spec.stddev;
            }
        }
    }
    if (labels) {
        if (labels->size() != table.rows.size()) {
            throw SchemaError("encode_rows: label count does not match row count");
        }
        for (int y : *labels) {
            if (y != 0 && y != 1) throw SchemaError("encode_rows: labels must be 0 or 1");
        }
        batch.labels = labels;
    }
    return batch;
}

}  // namespace ehrtext::tab
