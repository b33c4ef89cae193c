#pragma once

#include <algorithm>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/text/vocab.hpp"

namespace ehrtext::text {

// A tokenized document split into CLS-prefixed chunks.
struct NoteChunks {
    std::vector<std::vector<int>> ids;
    std::vector<std::vector<unsigned char>> attention_mask;

    std::size_t count() const { return ids.size(); }
    std::size_t token_count() const {
        std::size_t n = 0;
        for (const auto& c : ids) n += c.size();
        return n;
    }
};

inline constexpr int kChunkSize = 256;

// Consecutive pieces of at most chunk_size - 1 ids, each prefixed with CLS.
// Empty input yields a single [CLS] chunk. Chunks do not overlap.
inline NoteChunks chunk(const std::vector<int>& ids, int chunk_size = kChunkSize) {
    if (chunk_size < 2) throw ConfigError("chunk size must be at least 2");
    const std::size_t content = static_cast<std::size_t>(chunk_size - 1);
    NoteChunks out;
    std::size_t pos = 0;
    do {
        const std::size_t take = std::min(content, ids.size() - pos);
        std::vector<int> piece;
        piece.reserve(take + 1);
        piece.push_back(kClsId);
        piece.insert(piece.end(), ids.begin() + static_cast<long>(pos), ids.begin() + static_cast<long>(pos + take));
        out.attention_mask.emplace_back(piece.size(), 1);
        out.ids.push_back(std::move(piece));
        pos += take;
    } while (pos < ids.size());
    return out;
}

// Pads every chunk to `length` with PAD ids masked out of attention.
inline NoteChunks pad_chunks(NoteChunks chunks, std::size_t length) {
    for (std::size_t i = 0; i < chunks.count(); ++i) {
        if (chunks.ids[i].size() > length) throw ContractViolation("pad_chunks: chunk longer than pad length");
        chunks.attention_mask[i].resize(length, 0);
        chunks.ids[i].resize(length, kPadId);
    }
    return chunks;
}

}  // namespace ehrtext::text
