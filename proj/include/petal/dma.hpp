#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "petal/errors.hpp"
#include "petal/tensor.hpp"
#include "petal/util.hpp"

// Dynamic mode approximation adapters. A factor bank holds shared CP factors
// (U input-side, V output-side, P third-mode) plus per-modality coefficient
// vectors and a scalar threshold on the frozen path. The third CP mode is
// contracted against a fixed orthonormal selector per attention slot, so one
// bank yields a distinct low-rank weight delta for every (modality, slot)
// pair while the factors themselves stay shared across layers.

namespace petal {

enum class Modality { query_stream, text_stream };
enum class Slot { query, key, value, output };

inline std::string to_string(Modality m) {
    return m == Modality::query_stream ? "query_stream" : "text_stream";
}

inline std::string to_string(Slot s) {
    switch (s) {
        case Slot::query: return "query";
        case Slot::key: return "key";
        case Slot::value: return "value";
        default: return "output";
    }
}

inline const std::vector<Slot>& all_slots() {
    static const std::vector<Slot> slots = {Slot::query, Slot::key, Slot::value, Slot::output};
    return slots;
}

enum class AttentionKind { cross, self };

template <typename T>
struct FactorBank {
    Tensor<T> U;   // [d_in x R]
    Tensor<T> V;   // [d_out x R], zero at init so every delta starts at zero
    Tensor<T> P;   // [d_p x R]
    std::map<Modality, Tensor<T>> lambda;   // coefficient vector per modality, [R]
    Tensor<T> gamma;                        // scalar threshold on the frozen path
    std::map<Slot, Tensor<T>> slot_selectors;  // fixed orthonormal e_s, never trained
    std::size_t d_in = 0, d_out = 0, rank = 0, d_p = 0;
    AttentionKind kind = AttentionKind::self;

    std::vector<Tensor<T>> trainable() const {
        std::vector<Tensor<T>> out = {U, V, P};
        for (const auto& [m, lam] : lambda) out.push_back(lam);
        out.push_back(gamma);
        return out;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& t : trainable()) n += t.numel();
        return n;
    }
};

template <typename T>
FactorBank<T> init_factor_bank(std::size_t d_in, std::size_t d_out, std::size_t rank,
                               std::size_t d_p, const std::vector<Modality>& modalities,
                               std::uint64_t seed, AttentionKind kind = AttentionKind::self) {
    if (d_in == 0 || d_out == 0 || rank == 0 || d_p == 0) {
        throw ConfigError("factor bank extents must be positive");
    }
    if (d_p < all_slots().size()) {
        throw ConfigError("d_p = " + std::to_string(d_p) + " cannot host " +
                          std::to_string(all_slots().size()) + " orthonormal slot selectors");
    }
    if (modalities.empty()) throw ConfigError("factor bank needs at least one modality");
    auto rng = make_rng(seed);
    FactorBank<T> bank;
    bank.d_in = d_in;
    bank.d_out = d_out;
    bank.rank = rank;
    bank.d_p = d_p;
    bank.kind = kind;
    const T init_std = T(0.02);
    bank.U = Tensor<T>::gaussian({d_in, rank}, rng, init_std);
    bank.V = Tensor<T>::zeros({d_out, rank});
    bank.P = Tensor<T>::gaussian({d_p, rank}, rng, init_std);
    for (Modality m : modalities) {
        bank.lambda.emplace(m, Tensor<T>::gaussian({rank}, rng, init_std));
    }
    bank.gamma = Tensor<T>::scalar(T(1));
    const auto selectors = orthonormal_vectors(d_p, all_slots().size(), rng);
    for (std::size_t i = 0; i < all_slots().size(); ++i) {
        auto e = Tensor<T>::zeros({d_p});
        for (std::size_t j = 0; j < d_p; ++j) e.values()[j] = static_cast<T>(selectors[i][j]);
        bank.slot_selectors.emplace(all_slots()[i], std::move(e));
    }
    for (auto& t : bank.trainable()) t.set_requires_grad(true);
    return bank;
}

template <typename T>
const Tensor<T>& bank_lambda(const FactorBank<T>& bank, Modality m) {
    auto it = bank.lambda.find(m);
    if (it == bank.lambda.end()) throw LookupError("unknown modality " + to_string(m));
    return it->second;
}

template <typename T>
const Tensor<T>& bank_selector(const FactorBank<T>& bank, Slot s) {
    auto it = bank.slot_selectors.find(s);
    if (it == bank.slot_selectors.end()) throw LookupError("unknown slot " + to_string(s));
    return it->second;
}

// Delta weight for one (modality, slot) pair:
//   dW = sum_r lambda_r * <p_r, e_s> * v_r u_r^T = V diag(lambda * P^T e_s) U^T.
template <typename T>
Tensor<T> delta_weight(const FactorBank<T>& bank, Modality m, Slot s) {
    const auto& lam = bank_lambda(bank, m);
    const auto& e = bank_selector(bank, s);
    auto proj = matmul(transpose(bank.P), reshape(e, {bank.d_p, 1}));  // [R x 1]
    auto coeff = mul(lam, reshape(proj, {bank.rank}));                 // [R]
    return matmul(mul(bank.V, coeff), transpose(bank.U));              // [d_out x d_in]
}

// Eq-style forward over column-major activations X [d_in x T]:
//   H = gamma * W0 X + dW X. Gradients reach only bank parameters.
template <typename T>
Tensor<T> dma_forward(const FactorBank<T>& bank, const Tensor<T>& W0, const Tensor<T>& X,
                      Modality m, Slot s) {
    if (W0.requires_grad()) {
        throw ContractError("frozen weight passed to dma_forward is flagged trainable");
    }
    if (W0.rank() != 2 || W0.dim(0) != bank.d_out || W0.dim(1) != bank.d_in) {
        throw DimensionError("frozen weight " + shape_str(W0.shape()) + " does not match bank [" +
                             std::to_string(bank.d_out) + " x " + std::to_string(bank.d_in) + "]");
    }
    auto frozen = mul(matmul(W0, X), bank.gamma);
    return add(frozen, matmul(delta_weight(bank, m, s), X));
}

// Row-token convenience: A [T x d_in] -> [T x d_out].
template <typename T>
Tensor<T> dma_project(const FactorBank<T>& bank, const Tensor<T>& W0, const Tensor<T>& A,
                      Modality m, Slot s) {
    return transpose(dma_forward(bank, W0, transpose(A), m, s));
}

// Fused inference weight gamma * W0 + dW; pure function of its inputs.
template <typename T>
Tensor<T> merge_for_inference(const FactorBank<T>& bank, const Tensor<T>& W0, Modality m, Slot s) {
    return add(mul(W0, bank.gamma), delta_weight(bank, m, s));
}

}  // namespace petal
