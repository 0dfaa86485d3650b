#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "petal/errors.hpp"
#include "petal/tensor.hpp"
#include "petal/util.hpp"

// Adaptive instruction mixture of experts. K experts transform the stacked
// instruction representation; a linear gate scores each expert against the
// input (both mean-pooled over tokens) and a softmax turns the scores into
// convex combination weights.

namespace petal {

enum class ExpertForm { bottleneck, affine };
enum class TaskKind { caption_like, vqa_like };

template <typename T>
struct Expert {
    // bottleneck form: y = (up * act(down * x^T))^T, bias-free
    Tensor<T> down;  // [M x H]
    Tensor<T> up;    // [H x M]
    // affine form: y = gamma (.) x + beta per token
    Tensor<T> gamma;  // [H]
    Tensor<T> beta;   // [H]
};

template <typename T>
struct ExpertSet {
    std::vector<Expert<T>> experts;
    Tensor<T> gate_w;  // [2H], scores the concatenated pooled pair
    Tensor<T> gate_b;  // scalar
    ExpertForm form = ExpertForm::bottleneck;
    std::size_t hidden = 0, mid = 0;

    std::size_t k() const { return experts.size(); }

    std::vector<Tensor<T>> expert_params() const {
        std::vector<Tensor<T>> out;
        for (const auto& e : experts) {
            if (form == ExpertForm::bottleneck) {
                out.push_back(e.down);
                out.push_back(e.up);
            } else {
                out.push_back(e.gamma);
                out.push_back(e.beta);
            }
        }
        return out;
    }

    std::vector<Tensor<T>> trainable() const {
        auto out = expert_params();
        out.push_back(gate_w);
        out.push_back(gate_b);
        return out;
    }

    std::size_t expert_param_count() const {
        std::size_t n = 0;
        for (const auto& t : expert_params()) n += t.numel();
        return n;
    }

    std::size_t gate_param_count() const { return gate_w.numel() + gate_b.numel(); }
};

template <typename T>
struct EnhancedInstruction {
    Tensor<T> I_in;          // [T x H]
    Tensor<T> gate_weights;  // [K], nonnegative, sums to one
};

// Affine experts start at the identity map; bottleneck experts start as small
// random maps. The gate starts near-uniform (small random scores).
template <typename T>
ExpertSet<T> init_expert_set(std::size_t hidden, std::size_t mid, std::size_t k, ExpertForm form,
                             std::uint64_t seed) {
    if (k < 1) throw ConfigError("expert count must be at least 1");
    if (hidden == 0 || (form == ExpertForm::bottleneck && mid == 0)) {
        throw ConfigError("expert dimensions must be positive");
    }
    auto rng = make_rng(seed);
    ExpertSet<T> set;
    set.form = form;
    set.hidden = hidden;
    set.mid = mid;
    const T init_std = T(0.02);
    for (std::size_t i = 0; i < k; ++i) {
        Expert<T> e;
        if (form == ExpertForm::bottleneck) {
            e.down = Tensor<T>::gaussian({mid, hidden}, rng, init_std);
            e.up = Tensor<T>::gaussian({hidden, mid}, rng, init_std);
        } else {
            e.gamma = Tensor<T>::full({hidden}, T(1));
            e.beta = Tensor<T>::zeros({hidden});
        }
        set.experts.push_back(std::move(e));
    }
    set.gate_w = Tensor<T>::gaussian({2 * hidden}, rng, init_std);
    set.gate_b = Tensor<T>::zeros({});
    for (auto& t : set.trainable()) t.set_requires_grad(true);
    return set;
}

template <typename T>
Tensor<T> expert_forward(const ExpertSet<T>& set, std::size_t k, const Tensor<T>& x) {
    if (k >= set.k()) throw LookupError("expert index " + std::to_string(k) + " out of range");
    if (x.rank() != 2 || x.dim(1) != set.hidden) {
        throw DimensionError("expert input " + shape_str(x.shape()) + " does not match hidden " +
                             std::to_string(set.hidden));
    }
    const auto& e = set.experts[k];
    if (set.form == ExpertForm::affine) {
        return add(mul(x, e.gamma), e.beta);
    }
    return transpose(matmul(e.up, gelu(matmul(e.down, transpose(x)))));
}

template <typename T>
Tensor<T> gate_weights(const ExpertSet<T>& set, const Tensor<T>& x,
                       const std::vector<Tensor<T>>& ys) {
    if (ys.size() != set.k()) throw ContractError("gate needs one candidate per expert");
    auto pooled_x = mean_rows(x);
    std::vector<Tensor<T>> scores;
    scores.reserve(ys.size());
    for (const auto& y : ys) {
        if (y.shape() != x.shape()) {
            throw DimensionError("expert output shape " + shape_str(y.shape()) +
                                 " differs from input " + shape_str(x.shape()));
        }
        auto pair = concat<T>({pooled_x, mean_rows(y)}, 0);  // [2H]
        auto s = matmul(reshape(set.gate_w, {1, 2 * set.hidden}), reshape(pair, {2 * set.hidden, 1}));
        scores.push_back(reshape(s, {1}));
    }
    auto stacked = add(concat<T>(scores, 0), set.gate_b);
    return softmax(stacked, 0);
}

template <typename T>
EnhancedInstruction<T> moe_enhance(const ExpertSet<T>& set, const Tensor<T>& x) {
    if (x.numel() == 0 || x.dim(0) == 0) throw ContractError("empty instruction representation");
    std::vector<Tensor<T>> ys;
    ys.reserve(set.k());
    for (std::size_t k = 0; k < set.k(); ++k) ys.push_back(expert_forward(set, k, x));
    auto g = gate_weights(set, x, ys);
    Tensor<T> acc;
    for (std::size_t k = 0; k < set.k(); ++k) {
        auto term = mul(ys[k], narrow(g, 0, k, 1));
        acc = k == 0 ? term : add(acc, term);
    }
    return {acc, g};
}

// ---- Instruction text -> token embeddings -------------------------------

inline const std::vector<std::string>& default_templates(TaskKind kind) {
    static const std::vector<std::string> caption = {
        "What objects are in the picture?",
        "What are the characteristics of the objects in the picture",
        "What is the relationship between the objects in the picture?",
    };
    static const std::vector<std::string> vqa = {
        "What objects are in the picture?",
        "What color are the objects in the picture?",
        "What are the characteristics of the objects in the picture",
    };
    return kind == TaskKind::caption_like ? caption : vqa;
}

inline std::vector<std::string> load_templates(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open template file " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    if (out.empty()) throw ConfigError("template file " + path + " holds no templates");
    return out;
}

inline std::vector<std::string> tokenize(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> toks;
    std::string tok;
    while (is >> tok) toks.push_back(tok);
    return toks;
}

// Deterministic hash embeddings: each distinct token maps to a fixed Gaussian
// vector derived from (token hash, seed); the same token always embeds the
// same way. Templates stack token-wise into one [T x H] paragraph.
template <typename T>
Tensor<T> embed_instruction(const std::vector<std::string>& templates, std::size_t hidden,
                            std::uint64_t seed, const std::vector<std::string>& extra_tokens = {}) {
    std::vector<std::string> toks;
    for (const auto& t : templates) {
        auto tt = tokenize(t);
        toks.insert(toks.end(), tt.begin(), tt.end());
    }
    toks.insert(toks.end(), extra_tokens.begin(), extra_tokens.end());
    if (toks.empty()) throw ContractError("instruction paragraph has no tokens");
    auto out = Tensor<T>::zeros({toks.size(), hidden});
    for (std::size_t i = 0; i < toks.size(); ++i) {
        auto rng = make_rng(fnv1a64(toks[i]) ^ seed);
        std::normal_distribution<double> g(0.0, 0.02);
        for (std::size_t j = 0; j < hidden; ++j) {
            out.values()[i * hidden + j] = static_cast<T>(g(rng));
        }
    }
    return out;
}

}  // namespace petal
