#pragma once

// Note cleanup: section removal and lexical normalization.

#include <algorithm>
#include <cctype>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

namespace ehrtext::text {

inline std::string to_lower_ascii(std::string_view s) {
    std::string out(s);
    for (char& c : out) {
        const auto u = static_cast<unsigned char>(c);
        if (u < 0x80) c = static_cast<char>(std::tolower(u));
    }
    return out;
}

namespace detail {

inline const std::vector<std::regex>& date_patterns() {
    static const std::string month =
        "(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|"
        "sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)\\.?";
    static const std::vector<std::regex> patterns = {
        // 2019-03-04
        std::regex("\\b\\d{4}-\\d{1,2}-\\d{1,2}\\b"),
        // 3/4/2019, 03/04/19
        std::regex("\\b\\d{1,2}/\\d{1,2}/\\d{2,4}\\b"),
        // 04-mar-2019
        std::regex("\\b\\d{1,2}-" + month + "-\\d{2,4}\\b"),
        // march 4, 2019 / mar 4th 2019
        std::regex("\\b" + month + "\\s+\\d{1,2}(?:st|nd|rd|th)?,?\\s+\\d{4}\\b"),
        // 4 march 2019
        std::regex("\\b\\d{1,2}(?:st|nd|rd|th)?\\s+" + month + ",?\\s+\\d{4}\\b"),
    };
    return patterns;
}

}  // namespace detail

// Lowercases, removes dates (ISO, slash, day-month-year and written forms),
// digits and ASCII punctuation, then collapses whitespace to single spaces and
// trims. Removed characters are replaced by a space so adjacent words stay
// separate. Non-ASCII bytes are preserved.
inline std::string normalize_text(std::string_view raw) {
    std::string s = to_lower_ascii(raw);
    for (const auto& re : detail::date_patterns()) {
        s = std::regex_replace(s, re, " ");
    }
    for (char& c : s) {
        const auto u = static_cast<unsigned char>(c);
        if (u < 0x80 && (std::isdigit(u) || std::ispunct(u) || std::isspace(u))) {
            c = ' ';
        }
    }
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        if (c == ' ') {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c);
    }
    return out;
}

inline const std::vector<std::string>& default_drop_headers() {
    static const std::vector<std::string> headers = {
        "Technique", "Discharge Instructions", "Followup Instructions", "Administrative", "Facility", "Attending",
    };
    return headers;
}

// Name of the section header opening `line`, or empty. A header is a line
// starting (after optional indentation) with a letter, followed by up to 60
// letters, spaces or the characters &/()-, and then a colon.
inline std::string section_header(std::string_view line) {
    std::size_t i = 0;
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    const std::size_t start = i;
    if (i >= line.size() || !std::isalpha(static_cast<unsigned char>(line[i]))) return {};
    while (i < line.size() && i - start <= 60) {
        const auto c = static_cast<unsigned char>(line[i]);
        if (c == ':') {
            std::string name(line.substr(start, i - start));
            while (!name.empty() && name.back() == ' ') name.pop_back();
            return name;
        }
        if (!(std::isalpha(c) || c == ' ' || c == '&' || c == '/' || c == '(' || c == ')' || c == '-')) return {};
        ++i;
    }
    return {};
}

// Removes every section whose header matches one of `drop_headers`
// (case-insensitive), from the header line up to the next header line or the
// end of the document. Text without a matching header is returned unchanged.
inline std::string strip_sections(std::string_view raw,
                                  const std::vector<std::string>& drop_headers = default_drop_headers()) {
    std::vector<std::string> drop;
    drop.reserve(drop_headers.size());
    for (const auto& h : drop_headers) drop.push_back(to_lower_ascii(h));

    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (true) {
        const std::size_t nl = raw.find('\n', pos);
        if (nl == std::string_view::npos) {
            lines.push_back(raw.substr(pos));
            break;
        }
        lines.push_back(raw.substr(pos, nl - pos));
        pos = nl + 1;
    }

    std::string out;
    out.reserve(raw.size());
    bool dropping = false;
    bool first = true;
    for (std::string_view line : lines) {
        const std::string header = section_header(line);
        if (!header.empty()) {
            dropping = std::find(drop.begin(), drop.end(), to_lower_ascii(header)) != drop.end();
        }
        if (dropping) continue;
        if (!first) out.push_back('\n');
        out.append(line);
        first = false;
    }
    return out;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        const std::size_t start = i;
        while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        if (i > start) tokens.emplace_back(s.substr(start, i - start));
    }
    return tokens;
}

// Full cleanup path applied to every note: section removal, then normalization.
inline std::string preprocess_note(std::string_view raw,
                                   const std::vector<std::string>& drop_headers = default_drop_headers()) {
    return normalize_text(strip_sections(raw, drop_headers));
}

}  // namespace ehrtext::text
