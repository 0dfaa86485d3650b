#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "petal/dma.hpp"
#include "petal/errors.hpp"
#include "petal/tensor.hpp"
#include "petal/util.hpp"

// Toy frozen query-transformer. Each block runs self-attention over the
// concatenated [query tokens ; instruction tokens] rows, cross-attention
// from the query rows into the vision tokens, and a feed-forward sublayer,
// all post-LN. Attention projections are routed through adapters; the
// backbone weights themselves never train. Cross-attention K/V project from
// vision width and use the cross factor bank; cross Q/O act on hidden width
// and reuse the self bank's query/output slots so that every projection in
// the block is adapted while bank shapes stay as counted.

namespace petal {

struct MiniFormerConfig {
    std::size_t layers = 2;
    std::size_t h_t = 32;
    std::size_t h_v = 56;
    std::size_t heads = 4;
    std::size_t query_tokens = 8;
    std::size_t vocab = 8;
    std::size_t ffn_mult = 4;

    void validate() const {
        if (layers == 0 || h_t == 0 || h_v == 0 || heads == 0 || query_tokens == 0 ||
            vocab == 0 || ffn_mult == 0) {
            throw ConfigError("mini-former extents must be positive");
        }
        if (h_t % heads != 0) throw ConfigError("h_t must be divisible by heads");
    }
};

template <typename T>
struct FormerBlock {
    Tensor<T> self_q, self_k, self_v, self_o;      // [H_t x H_t]
    Tensor<T> cross_q, cross_o;                    // [H_t x H_t]
    Tensor<T> cross_k, cross_v;                    // [H_t x H_v]
    Tensor<T> ffn1;                                // [F x H_t]
    Tensor<T> ffn2;                                // [H_t x F]
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
};

template <typename T>
struct FrozenBackbone {
    MiniFormerConfig cfg;
    std::vector<FormerBlock<T>> blocks;
    Tensor<T> query_table;  // [Tq x H_t]
    // Output head group: outside the backbone hash, tuned by the head method.
    Tensor<T> final_ln_g, final_ln_b;
    Tensor<T> classifier;  // [vocab x H_t], bias-free

    std::vector<Tensor<T>> backbone_tensors() const {
        std::vector<Tensor<T>> out;
        for (const auto& b : blocks) {
            for (const auto* t : {&b.self_q, &b.self_k, &b.self_v, &b.self_o, &b.cross_q,
                                  &b.cross_k, &b.cross_v, &b.cross_o, &b.ffn1, &b.ffn2,
                                  &b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.ln3_g, &b.ln3_b}) {
                out.push_back(*t);
            }
        }
        out.push_back(query_table);
        return out;
    }

    std::vector<Tensor<T>> head_tensors() const { return {final_ln_g, final_ln_b, classifier}; }

    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : backbone_tensors()) {
            h = fnv1a64(t.values().data(), t.values().size() * sizeof(T), h);
        }
        return h;
    }

    std::size_t backbone_param_count() const {
        std::size_t n = 0;
        for (const auto& t : backbone_tensors()) n += t.numel();
        return n;
    }

    std::size_t head_param_count() const {
        std::size_t n = 0;
        for (const auto& t : head_tensors()) n += t.numel();
        return n;
    }
};

// Closed-form twin of backbone_param_count, kept for budget cross-checks.
inline std::size_t backbone_count_formula(const MiniFormerConfig& cfg) {
    const std::size_t per_block = 6 * cfg.h_t * cfg.h_t + 2 * cfg.h_t * cfg.h_v +
                                  2 * cfg.ffn_mult * cfg.h_t * cfg.h_t + 6 * cfg.h_t;
    return cfg.layers * per_block + cfg.query_tokens * cfg.h_t;
}

template <typename T>
FrozenBackbone<T> build_frozen_backbone(const MiniFormerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    auto rng = make_rng(seed);
    const T sd = T(0.02);
    const std::size_t H = cfg.h_t, F = cfg.ffn_mult * cfg.h_t;
    FrozenBackbone<T> bb;
    bb.cfg = cfg;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        FormerBlock<T> b;
        b.self_q = Tensor<T>::gaussian({H, H}, rng, sd);
        b.self_k = Tensor<T>::gaussian({H, H}, rng, sd);
        b.self_v = Tensor<T>::gaussian({H, H}, rng, sd);
        b.self_o = Tensor<T>::gaussian({H, H}, rng, sd);
        b.cross_q = Tensor<T>::gaussian({H, H}, rng, sd);
        b.cross_k = Tensor<T>::gaussian({H, cfg.h_v}, rng, sd);
        b.cross_v = Tensor<T>::gaussian({H, cfg.h_v}, rng, sd);
        b.cross_o = Tensor<T>::gaussian({H, H}, rng, sd);
        b.ffn1 = Tensor<T>::gaussian({F, H}, rng, sd);
        b.ffn2 = Tensor<T>::gaussian({H, F}, rng, sd);
        b.ln1_g = Tensor<T>::full({H}, T(1));
        b.ln1_b = Tensor<T>::zeros({H});
        b.ln2_g = Tensor<T>::full({H}, T(1));
        b.ln2_b = Tensor<T>::zeros({H});
        b.ln3_g = Tensor<T>::full({H}, T(1));
        b.ln3_b = Tensor<T>::zeros({H});
        bb.blocks.push_back(std::move(b));
    }
    bb.query_table = Tensor<T>::gaussian({cfg.query_tokens, H}, rng, sd);
    bb.classifier = Tensor<T>::gaussian({cfg.vocab, H}, rng, sd);
    bb.final_ln_g = Tensor<T>::full({H}, T(1));
    bb.final_ln_b = Tensor<T>::zeros({H});
    return bb;
}

// ---- Adapter wiring -------------------------------------------------------

enum class AdapterKind { none, petal, lora };

// Adapted projections, in fixed order for LoRA indexing.
enum class Proj : std::size_t {
    self_q = 0, self_k, self_v, self_o, cross_q, cross_k, cross_v, cross_o
};
inline constexpr std::size_t kNumProj = 8;

template <typename T>
struct LoraPair {
    Tensor<T> A;  // [R x d_in], Gaussian init
    Tensor<T> B;  // [d_out x R], zero init
};

template <typename T>
LoraPair<T> lora_baseline_delta(std::size_t d_out, std::size_t d_in, std::size_t rank,
                                std::uint64_t seed) {
    if (rank == 0 || rank > std::min(d_out, d_in)) {
        throw ConfigError("lora rank " + std::to_string(rank) + " exceeds min dim " +
                          std::to_string(std::min(d_out, d_in)));
    }
    auto rng = make_rng(seed);
    LoraPair<T> p;
    p.A = Tensor<T>::gaussian({rank, d_in}, rng, T(0.02));
    p.B = Tensor<T>::zeros({d_out, rank});
    p.A.set_requires_grad(true);
    p.B.set_requires_grad(true);
    return p;
}

template <typename T>
struct AdapterSet {
    AdapterKind kind = AdapterKind::none;
    FactorBank<T> self_bank;   // petal
    FactorBank<T> cross_bank;  // petal
    std::vector<std::vector<LoraPair<T>>> lora;  // [layer][proj], unshared

    std::vector<Tensor<T>> trainable() const {
        std::vector<Tensor<T>> out;
        if (kind == AdapterKind::petal) {
            auto a = self_bank.trainable();
            auto b = cross_bank.trainable();
            out.insert(out.end(), a.begin(), a.end());
            out.insert(out.end(), b.begin(), b.end());
        } else if (kind == AdapterKind::lora) {
            for (const auto& layer : lora) {
                for (const auto& p : layer) {
                    out.push_back(p.A);
                    out.push_back(p.B);
                }
            }
        }
        return out;
    }
};

template <typename T>
AdapterSet<T> make_petal_adapters(const MiniFormerConfig& cfg, std::size_t rank, std::size_t d_p,
                                  std::uint64_t seed) {
    const std::vector<Modality> streams = {Modality::query_stream, Modality::text_stream};
    AdapterSet<T> set;
    set.kind = AdapterKind::petal;
    set.self_bank = init_factor_bank<T>(cfg.h_t, cfg.h_t, rank, d_p, streams, seed * 2 + 1,
                                        AttentionKind::self);
    set.cross_bank = init_factor_bank<T>(cfg.h_v, cfg.h_t, rank, d_p, streams, seed * 2 + 2,
                                         AttentionKind::cross);
    return set;
}

template <typename T>
AdapterSet<T> make_lora_adapters(const MiniFormerConfig& cfg, std::size_t rank,
                                 std::uint64_t seed) {
    AdapterSet<T> set;
    set.kind = AdapterKind::lora;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::vector<LoraPair<T>> layer;
        for (std::size_t p = 0; p < kNumProj; ++p) {
            const bool vision_side = p == static_cast<std::size_t>(Proj::cross_k) ||
                                     p == static_cast<std::size_t>(Proj::cross_v);
            const std::size_t d_in = vision_side ? cfg.h_v : cfg.h_t;
            layer.push_back(lora_baseline_delta<T>(cfg.h_t, d_in, rank, seed + l * kNumProj + p));
        }
        set.lora.push_back(std::move(layer));
    }
    return set;
}

namespace detail {

// One adapted projection over row-major tokens [T x d_in] -> [T x d_out].
// For factor-bank adapters the modality tag is supplied by the caller per row block.
template <typename T>
Tensor<T> project(const AdapterSet<T>& ad, std::size_t layer, Proj proj, const Tensor<T>& W0,
                  const Tensor<T>& rows, Modality m, Slot s) {
    switch (ad.kind) {
        case AdapterKind::none:
            return matmul(rows, transpose(W0));
        case AdapterKind::petal: {
            const bool vision_side = proj == Proj::cross_k || proj == Proj::cross_v;
            const FactorBank<T>& bank = vision_side ? ad.cross_bank : ad.self_bank;
            return dma_project(bank, W0, rows, m, s);
        }
        case AdapterKind::lora: {
            const auto& p = ad.lora.at(layer).at(static_cast<std::size_t>(proj));
            auto base = matmul(rows, transpose(W0));
            return add(base, matmul(matmul(rows, transpose(p.A)), transpose(p.B)));
        }
    }
    throw ContractError("unreachable adapter kind");
}

// Self-attention projections apply the stream-specific coefficient vector to
// each row block of the concatenated sequence.
template <typename T>
Tensor<T> project_streams(const AdapterSet<T>& ad, std::size_t layer, Proj proj,
                          const Tensor<T>& W0, const Tensor<T>& x, std::size_t tq, Slot s) {
    if (ad.kind != AdapterKind::petal) {
        return project(ad, layer, proj, W0, x, Modality::query_stream, s);
    }
    auto qpart = project(ad, layer, proj, W0, narrow(x, 0, 0, tq), Modality::query_stream, s);
    auto tpart = project(ad, layer, proj, W0, narrow(x, 0, tq, x.dim(0) - tq),
                         Modality::text_stream, s);
    return concat<T>({qpart, tpart}, 0);
}

}  // namespace detail

template <typename T>
struct ForwardTrace {
    // cross_attn[layer][head] holds the softmaxed [Tq x Tv] map, row-major.
    std::vector<std::vector<std::vector<T>>> cross_attn;
    std::size_t tq = 0, tv = 0;
    // Self-attention projection pre-activations per layer (captured on demand).
    std::vector<Tensor<T>> self_q_pre, self_k_pre, self_v_pre;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;      // [vocab]
    Tensor<T> query_rows;  // [Tq x H], final-block query-stream output
    ForwardTrace<T> trace;
};

template <typename T>
ForwardResult<T> former_forward(const FrozenBackbone<T>& bb, const Tensor<T>& vision,
                                const Tensor<T>& instruction, const AdapterSet<T>& ad,
                                bool capture_pre = false) {
    const auto& cfg = bb.cfg;
    if (vision.rank() != 2 || vision.dim(1) != cfg.h_v || vision.dim(0) == 0) {
        throw ConfigError("vision tokens must be nonempty [Tv x " + std::to_string(cfg.h_v) + "]");
    }
    if (instruction.rank() != 2 || instruction.dim(1) != cfg.h_t || instruction.dim(0) == 0) {
        throw ConfigError("instruction must be nonempty [Ti x " + std::to_string(cfg.h_t) + "]");
    }
    if (ad.kind == AdapterKind::petal) {
        if (ad.self_bank.d_in != cfg.h_t || ad.self_bank.d_out != cfg.h_t ||
            ad.cross_bank.d_in != cfg.h_v || ad.cross_bank.d_out != cfg.h_t) {
            throw ConfigError("factor bank dimensions do not match the model config");
        }
    }
    const std::size_t tq = cfg.query_tokens, tv = vision.dim(0);
    const std::size_t H = cfg.h_t, heads = cfg.heads, dh = H / heads;
    const T eps = T(1e-5);
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

    ForwardResult<T> res;
    res.trace.tq = tq;
    res.trace.tv = tv;
    auto x = concat<T>({bb.query_table, instruction}, 0);  // [T x H]

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& blk = bb.blocks[l];

        // Self-attention over the concatenated streams.
        auto q = detail::project_streams(ad, l, Proj::self_q, blk.self_q, x, tq, Slot::query);
        auto k = detail::project_streams(ad, l, Proj::self_k, blk.self_k, x, tq, Slot::key);
        auto v = detail::project_streams(ad, l, Proj::self_v, blk.self_v, x, tq, Slot::value);
        if (capture_pre) {
            res.trace.self_q_pre.push_back(q);
            res.trace.self_k_pre.push_back(k);
            res.trace.self_v_pre.push_back(v);
        }
        std::vector<Tensor<T>> ctx_heads;
        for (std::size_t h = 0; h < heads; ++h) {
            auto qh = narrow(q, 1, h * dh, dh);
            auto kh = narrow(k, 1, h * dh, dh);
            auto vh = narrow(v, 1, h * dh, dh);
            auto attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), 1);
            ctx_heads.push_back(matmul(attn, vh));
        }
        auto sa = detail::project_streams(ad, l, Proj::self_o, blk.self_o,
                                          concat<T>(ctx_heads, 1), tq, Slot::output);
        x = layer_norm(add(x, sa), blk.ln1_g, blk.ln1_b, eps);

        // Cross-attention: query rows attend to vision tokens.
        auto qrows = narrow(x, 0, 0, tq);
        auto irows = narrow(x, 0, tq, x.dim(0) - tq);
        auto qc = detail::project(ad, l, Proj::cross_q, blk.cross_q, qrows,
                                  Modality::query_stream, Slot::query);
        auto kc = detail::project(ad, l, Proj::cross_k, blk.cross_k, vision,
                                  Modality::query_stream, Slot::key);
        auto vc = detail::project(ad, l, Proj::cross_v, blk.cross_v, vision,
                                  Modality::query_stream, Slot::value);
        std::vector<Tensor<T>> cross_heads;
        std::vector<std::vector<T>> layer_maps;
        for (std::size_t h = 0; h < heads; ++h) {
            auto qh = narrow(qc, 1, h * dh, dh);
            auto kh = narrow(kc, 1, h * dh, dh);
            auto vh = narrow(vc, 1, h * dh, dh);
            auto attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), 1);
            layer_maps.push_back(attn.values());
            cross_heads.push_back(matmul(attn, vh));
        }
        res.trace.cross_attn.push_back(std::move(layer_maps));
        auto ca = detail::project(ad, l, Proj::cross_o, blk.cross_o, concat<T>(cross_heads, 1),
                                  Modality::query_stream, Slot::output);
        auto q2 = layer_norm(add(qrows, ca), blk.ln2_g, blk.ln2_b, eps);
        x = concat<T>({q2, irows}, 0);

        // Feed-forward over all rows (no adapters by design).
        auto ff = matmul(gelu(matmul(x, transpose(blk.ffn1))), transpose(blk.ffn2));
        x = layer_norm(add(x, ff), blk.ln3_g, blk.ln3_b, eps);
    }

    res.query_rows = narrow(x, 0, 0, tq);
    auto pooled = mean_rows(res.query_rows);
    auto normed = layer_norm(reshape(pooled, {1, H}), bb.final_ln_g, bb.final_ln_b, eps);
    res.logits = reshape(matmul(normed, transpose(bb.classifier)), {cfg.vocab});
    return res;
}

// CSV dump of cross-attention maps: one row per (layer, head, query token),
// weights across vision tokens. No header; row count = L * heads * Tq.
template <typename T>
void dump_attention(const ForwardTrace<T>& trace, const std::string& path) {
    if (trace.cross_attn.empty()) throw ContractError("no attention maps captured");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + path + " for writing");
    for (std::size_t l = 0; l < trace.cross_attn.size(); ++l) {
        for (std::size_t h = 0; h < trace.cross_attn[l].size(); ++h) {
            const auto& flat = trace.cross_attn[l][h];
            for (std::size_t t = 0; t < trace.tq; ++t) {
                std::fprintf(f, "%zu,%zu,%zu", l, h, t);
                for (std::size_t j = 0; j < trace.tv; ++j) {
                    std::fprintf(f, ",%.17g", static_cast<double>(flat[t * trace.tv + j]));
                }
                std::fputc('\n', f);
            }
        }
    }
    if (std::fclose(f) != 0) throw IoError("failed to finalize " + path);
}

}  // namespace petal
