#pragma once

// RFC 4180 CSV reading and writing for raw tables.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/tabular/schema.hpp"

namespace ehrtext::data {

// Records of a CSV stream: comma separated, optional double-quoted fields with
// "" escapes, CRLF or LF line endings, quoted fields may span lines.
inline std::vector<std::vector<std::string>> parse_csv(std::istream& in) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false;
    bool field_started = false;
    bool any = false;
    char c;
    auto end_field = [&] {
        record.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_record = [&] {
        end_field();
        records.push_back(std::move(record));
        record.clear();
    };
    while (in.get(c)) {
        any = true;
        if (quoted) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    field.push_back('"');
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        if (c == '"' && !field_started) {
            quoted = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\r') {
            if (in.peek() == '\n') in.get(c);
            end_record();
            any = false;
        } else if (c == '\n') {
            end_record();
            any = false;
        } else {
            field.push_back(c);
            field_started = true;
        }
    }
    if (quoted) throw DataError("CSV: unterminated quoted field");
    if (any) end_record();
    return records;
}

inline std::string quote_csv(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += '"';
    return out;
}

inline void write_csv_record(std::ostream& out, const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out << ',';
        out << quote_csv(fields[i]);
    }
    out << "\r\n";
}

// Empty field -> missing; a field that parses fully as a finite number ->
// number; anything else -> text.
inline tab::Cell parse_cell(const std::string& s) {
    if (s.empty()) return std::monostate{};
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec == std::errc() && ptr == last && std::isfinite(v)) return v;
    return s;
}

// First record is the header. Every record must have the header's width.
inline tab::RawTable read_csv_table(std::istream& in) {
    auto records = parse_csv(in);
    if (records.empty()) throw DataError("CSV: missing header row");
    tab::RawTable table;
    table.columns = records.front();
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() == 1 && records[r][0].empty()) continue;
        if (records[r].size() != table.columns.size()) {
            throw DataError("CSV: record " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                            " fields, header has " + std::to_string(table.columns.size()));
        }
        std::vector<tab::Cell> row;
        row.reserve(records[r].size());
        for (const auto& f : records[r]) row.push_back(parse_cell(f));
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline tab::RawTable read_csv_table(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open CSV file '" + path + "'");
    return read_csv_table(in);
}

inline void write_csv_table(std::ostream& out, const tab::RawTable& table) {
    write_csv_record(out, table.columns);
    for (const auto& row : table.rows) {
        std::vector<std::string> fields;
        fields.reserve(row.size());
        for (const auto& cell : row) fields.push_back(tab::cell_text(cell));
        write_csv_record(out, fields);
    }
}

}  // namespace ehrtext::data
