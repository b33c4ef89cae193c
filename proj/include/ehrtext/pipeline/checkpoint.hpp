#pragma once

// Checkpoint container:
//
//   "EHRTCKPT" | u32 version | u64 header length | JSON header | payload | SHA-256
//
// All integers and tensor values are little-endian; tensors are float32,
// row-major, stored in name order at the offsets listed in the header. The
// digest covers every byte before it.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/adamw.hpp"
#include "ehrtext/numerics/parameters.hpp"

namespace ehrtext::pipeline {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'E', 'H', 'R', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kDigestSize = 32;

struct Checkpoint {
    std::string stage;
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, num::Matrix<float>> tensors;
    std::map<std::string, std::uint64_t> optimizer_steps;

    bool has_prefix(const std::string& prefix) const {
        auto it = tensors.lower_bound(prefix);
        return it != tensors.end() && it->first.compare(0, prefix.size(), prefix) == 0;
    }

    friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
        if (a.stage != b.stage || a.meta != b.meta || a.optimizer_steps != b.optimizer_steps ||
            a.tensors.size() != b.tensors.size()) {
            return false;
        }
        for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
            if (ia->first != ib->first || ia->second.rows() != ib->second.rows() ||
                ia->second.cols() != ib->second.cols()) {
                return false;
            }
            if (std::memcmp(ia->second.data(), ib->second.data(), sizeof(float) * ia->second.size()) != 0) {
                return false;
            }
        }
        return true;
    }
};

inline std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 computation failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 15]);
    }
    return out;
}

namespace detail {

template <class U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

template <class U>
U get(const std::string& in, std::size_t at) {
    U v;
    std::memcpy(&v, in.data() + at, sizeof(U));
    return v;
}

inline void raw_digest(const std::string& bytes, std::size_t size, unsigned char* digest) {
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), size, digest, &len, EVP_sha256(), nullptr) != 1 || len != kDigestSize) {
        throw Error("SHA-256 computation failed");
    }
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ckpt) {
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : ckpt.tensors) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(m.size()) * sizeof(float);
    }
    const nlohmann::json header = {{"stage", ckpt.stage},
                                   {"meta", ckpt.meta},
                                   {"optimizer_steps", ckpt.optimizer_steps},
                                   {"tensors", tensors},
                                   {"payload_bytes", offset}};
    const std::string text = header.dump();
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint64_t>(out, text.size());
    out += text;
    out.reserve(out.size() + offset + kDigestSize);
    for (const auto& [name, m] : ckpt.tensors) {
        out.append(reinterpret_cast<const char*>(m.data()), sizeof(float) * static_cast<std::size_t>(m.size()));
    }
    unsigned char digest[kDigestSize];
    detail::raw_digest(out, out.size(), digest);
    out.append(reinterpret_cast<const char*>(digest), kDigestSize);
    return out;
}

// Parses a serialized checkpoint. Every check happens before anything is
// returned, so a failure never yields a partially populated object.
inline Checkpoint deserialize(const std::string& bytes) {
    constexpr std::size_t fixed = sizeof(kCheckpointMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
    if (bytes.size() < sizeof(kCheckpointMagic) ||
        std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw IntegrityError("checkpoint: bad magic bytes");
    }
    if (bytes.size() < fixed + kDigestSize) throw IntegrityError("checkpoint: file is truncated");
    const auto version = detail::get<std::uint32_t>(bytes, sizeof(kCheckpointMagic));
    if (version != kCheckpointVersion) {
        throw UnsupportedVersion("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    }
    const std::size_t body = bytes.size() - kDigestSize;
    unsigned char digest[kDigestSize];
    detail::raw_digest(bytes, body, digest);
    if (std::memcmp(digest, bytes.data() + body, kDigestSize) != 0) {
        throw IntegrityError("checkpoint: content hash mismatch (corrupt or truncated file)");
    }
    const auto header_len = detail::get<std::uint64_t>(bytes, sizeof(kCheckpointMagic) + sizeof(std::uint32_t));
    if (header_len > body - fixed) throw IntegrityError("checkpoint: header length exceeds file size");
    Checkpoint ckpt;
    try {
        const auto header = nlohmann::json::parse(bytes.begin() + fixed, bytes.begin() + fixed + header_len);
        const std::size_t payload_start = fixed + header_len;
        const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
        if (payload_start + payload_bytes != body) throw IntegrityError("checkpoint: payload size mismatch");
        ckpt.stage = header.at("stage").get<std::string>();
        ckpt.meta = header.at("meta");
        ckpt.optimizer_steps = header.at("optimizer_steps").get<std::map<std::string, std::uint64_t>>();
        for (const auto& t : header.at("tensors")) {
            const auto rows = t.at("rows").get<num::Index>();
            const auto cols = t.at("cols").get<num::Index>();
            const auto offset = t.at("offset").get<std::uint64_t>();
            if (rows < 0 || cols < 0) throw IntegrityError("checkpoint: negative tensor shape");
            const auto size = static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols) * sizeof(float);
            if (offset > payload_bytes || size > payload_bytes - offset) {
                throw IntegrityError("checkpoint: tensor extends past the payload");
            }
            num::Matrix<float> m(rows, cols);
            std::memcpy(m.data(), bytes.data() + payload_start + offset, size);
            ckpt.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("checkpoint: malformed header: ") + e.what());
    }
    return ckpt;
}

// Digest of the serialized form; equal checkpoints have equal hashes.
inline std::string checkpoint_hash(const Checkpoint& ckpt) {
    const std::string bytes = serialize(ckpt);
    return sha256_hex(bytes.data(), bytes.size() - kDigestSize);
}

// Writes atomically (temporary file, then rename) and returns the content hash.
inline std::string save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::string bytes = serialize(ckpt);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write checkpoint " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
    return sha256_hex(bytes.data(), bytes.size() - kDigestSize);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

// ---------------------------------------------------------------- model state

inline void export_params(const num::ParameterStore<float>& store, const std::string& prefix, Checkpoint& ckpt) {
    for (const auto& p : store.all()) ckpt.tensors[prefix + p.name] = p.var.value();
}

// Copies every parameter of `store` from `ckpt`; all must be present with the
// stored shapes.
inline void import_params(const Checkpoint& ckpt, const std::string& prefix, num::ParameterStore<float>& store) {
    for (auto& p : store.all()) {
        auto it = ckpt.tensors.find(prefix + p.name);
        if (it == ckpt.tensors.end()) throw IntegrityError("checkpoint lacks tensor " + prefix + p.name);
        if (it->second.rows() != p.var.rows() || it->second.cols() != p.var.cols()) {
            throw IntegrityError("checkpoint tensor " + prefix + p.name + " has the wrong shape");
        }
        p.var.mutable_value() = it->second;
    }
}

inline void export_optimizer(const num::AdamW<float>& opt, const num::ParameterStore<float>& store,
                             const std::string& prefix, Checkpoint& ckpt) {
    ckpt.optimizer_steps[prefix] = opt.step_count();
    const auto& moments = opt.moments();
    for (std::size_t i = 0; i < moments.size(); ++i) {
        if (moments[i].first.size() == 0) continue;
        const std::string& name = store.all()[i].name;
        ckpt.tensors["adamw/" + prefix + name + "/m"] = moments[i].first;
        ckpt.tensors["adamw/" + prefix + name + "/v"] = moments[i].second;
    }
}

}  // namespace ehrtext::pipeline
