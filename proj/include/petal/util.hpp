#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "petal/errors.hpp"

namespace petal {

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

// FNV-1a over raw bytes; used for backbone content hashes and for mapping
// instruction tokens onto deterministic embedding seeds.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// k pairwise-orthonormal vectors in R^d via Gram-Schmidt on Gaussian draws.
inline std::vector<std::vector<double>> orthonormal_vectors(std::size_t d, std::size_t k,
                                                            std::mt19937_64& rng) {
    if (k > d) {
        throw ConfigError("cannot build " + std::to_string(k) + " orthonormal vectors in R^" +
                          std::to_string(d));
    }
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> basis;
    basis.reserve(k);
    while (basis.size() < k) {
        std::vector<double> v(d);
        for (auto& x : v) x = gauss(rng);
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < d; ++i) v[i] -= dot * b[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;  // degenerate draw, resample
        for (auto& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    return basis;
}

}  // namespace petal
