#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrtext/errors.hpp"
#include "ehrtext/text/normalize.hpp"

namespace ehrtext::text {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;

class Vocab {
public:
    Vocab() { reset_reserved(); }

    // Tokens appearing at least `min_frequency` times across the documents.
    // Ids are assigned by decreasing frequency, ties broken lexicographically.
    static Vocab build(const std::vector<std::vector<std::string>>& documents, int min_frequency = 2) {
        std::map<std::string, long> counts;
        for (const auto& doc : documents) {
            for (const auto& tok : doc) ++counts[tok];
        }
        std::vector<std::pair<std::string, long>> kept;
        for (const auto& [tok, n] : counts) {
            if (n >= min_frequency && !is_reserved_token(tok)) kept.emplace_back(tok, n);
        }
        std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocab v;
        for (const auto& [tok, n] : kept) v.insert(tok, n);
        return v;
    }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnkId : it->second;
    }

    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    long frequency(int id) const { return freq_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(tokens_.size()); }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(id(t));
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            arr.push_back({{"token", tokens_[i]}, {"id", static_cast<int>(i)}, {"frequency", freq_[i]}});
        }
        return arr;
    }

    static Vocab from_json(const nlohmann::json& arr) {
        Vocab v;
        std::vector<std::tuple<int, std::string, long>> rows;
        try {
            for (const auto& e : arr) {
                rows.emplace_back(e.at("id").get<int>(), e.at("token").get<std::string>(), e.at("frequency").get<long>());
            }
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInput(std::string("malformed vocabulary JSON: ") + e.what());
        }
        std::sort(rows.begin(), rows.end());
        for (const auto& [id, tok, n] : rows) {
            if (id < 3) {
                if (tok != v.tokens_[static_cast<std::size_t>(id)]) {
                    throw InvalidInput("vocabulary JSON reassigns reserved id " + std::to_string(id));
                }
                v.freq_[static_cast<std::size_t>(id)] = n;
                continue;
            }
            if (id != v.size()) throw InvalidInput("vocabulary JSON ids are not contiguous");
            v.insert(tok, n);
        }
        return v;
    }

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_ && a.freq_ == b.freq_; }

private:
    static bool is_reserved_token(const std::string& t) { return t == "[pad]" || t == "[unk]" || t == "[cls]"; }

    void reset_reserved() {
        tokens_ = {"[pad]", "[unk]", "[cls]"};
        freq_ = {0, 0, 0};
        ids_ = {{"[pad]", kPadId}, {"[unk]", kUnkId}, {"[cls]", kClsId}};
    }

    void insert(const std::string& tok, long n) {
        if (ids_.count(tok)) throw InvalidInput("duplicate vocabulary token '" + tok + "'");
        ids_[tok] = size();
        tokens_.push_back(tok);
        freq_.push_back(n);
    }

    std::vector<std::string> tokens_;
    std::vector<long> freq_;
    std::unordered_map<std::string, int> ids_;
};

}  // namespace ehrtext::text
