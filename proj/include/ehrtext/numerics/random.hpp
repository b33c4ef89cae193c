#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "ehrtext/numerics/tensor.hpp"

namespace ehrtext::num {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Seed of the named sub-stream of a run seed. Every stage draws from its own
// stream so adding draws in one stage never shifts another.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return splitmix64(seed ^ splitmix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
    return splitmix64(derive_seed(seed, stream) + index);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }
    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    template <class T>
    Matrix<T> normal_matrix(Index rows, Index cols, double stddev) {
        Matrix<T> m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<T>(normal() * stddev);
        }
        return m;
    }

    template <class T>
    Matrix<T> uniform_matrix(Index rows, Index cols, double lo, double hi) {
        Matrix<T> m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<T>(uniform(lo, hi));
        }
        return m;
    }

    template <class Vec>
    void shuffle(Vec& v) {
        // Fisher-Yates with our own index draws; std::shuffle's draw pattern is
        // implementation-defined.
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ehrtext::num
