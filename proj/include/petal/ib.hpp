#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "petal/errors.hpp"
#include "petal/tensor.hpp"
#include "petal/util.hpp"

// Score-based information bottleneck. Instruction features are attention-
// pooled into one unified representation z; the objective rewards mutual
// information with the label while penalizing information kept about the
// input. MI over continuous z is not directly computable, so the module
// carries two estimators: a discrete plug-in oracle (non-differentiable,
// used for tests and monitoring) and a differentiable training surrogate
// (contrastive lower bound for I(Z;Y), Gaussian-prior norm penalty as the
// compression proxy for I(Z;X)).

namespace petal {

enum class IBEstimator { histogram_oracle, contrastive_surrogate };

struct IBConfig {
    double eta = 0.01;  // compression trade-off
    double mu = 0.1;    // weight of the IB term inside the total training loss
    IBEstimator estimator = IBEstimator::contrastive_surrogate;
    std::size_t bins = 8;
    double temperature = 0.1;

    void validate() const {
        if (eta < 0) throw ConfigError("eta must be nonnegative");
        if (bins < 2) throw ConfigError("bins must be at least 2");
        if (temperature <= 0) throw ConfigError("temperature must be positive");
    }
};

template <typename T>
struct PooledRepresentation {
    Tensor<T> alpha;  // [N] simplex weights
    Tensor<T> H_hat;  // [d] pooled feature, alias z_hat in the loss
};

// alpha_i = softmax_i(H_i . q / sqrt(d)) with q the mean row; H_hat = sum alpha_i H_i.
template <typename T>
PooledRepresentation<T> attention_pool(const Tensor<T>& H) {
    if (H.rank() != 2) throw DimensionError("attention_pool expects [N x d]");
    const std::size_t n = H.dim(0), d = H.dim(1);
    if (n == 0) throw ContractError("attention_pool over zero features");
    auto q = mean_rows(H);
    auto scores = scale(matmul(H, reshape(q, {d, 1})), T(1) / std::sqrt(static_cast<T>(d)));
    auto alpha = softmax(reshape(scores, {n}), 0);
    auto pooled = reshape(matmul(reshape(alpha, {1, n}), H), {d});
    return {alpha, pooled};
}

// Plug-in mutual information of two discrete label sequences, in bits.
inline double mi_discrete(const std::vector<std::uint64_t>& z,
                          const std::vector<std::uint64_t>& y) {
    if (z.empty() || z.size() != y.size()) {
        throw ContractError("mi_discrete needs two equal-length nonempty sample lists");
    }
    const double n = static_cast<double>(z.size());
    std::unordered_map<std::uint64_t, double> pz, py;
    std::unordered_map<std::uint64_t, std::unordered_map<std::uint64_t, double>> pzy;
    for (std::size_t i = 0; i < z.size(); ++i) {
        pz[z[i]] += 1.0;
        py[y[i]] += 1.0;
        pzy[z[i]][y[i]] += 1.0;
    }
    double mi = 0.0;
    for (const auto& [zv, row] : pzy) {
        for (const auto& [yv, c] : row) {
            const double pj = c / n;
            mi += pj * std::log2(pj * n * n / (pz[zv] * py[yv]));
        }
    }
    return mi;
}

// Per-dimension equal-width binning over the observed range; a row's bin
// vector is collapsed to one category id by hashing.
template <typename T>
std::vector<std::uint64_t> quantize_rows(const Tensor<T>& Z, std::size_t bins) {
    if (Z.rank() != 2) throw DimensionError("quantize_rows expects [N x d]");
    if (bins < 2) throw ConfigError("bins must be at least 2");
    const std::size_t n = Z.dim(0), d = Z.dim(1);
    std::vector<T> lo(d), hi(d);
    for (std::size_t j = 0; j < d; ++j) {
        lo[j] = hi[j] = Z.at(0, j);
        for (std::size_t i = 1; i < n; ++i) {
            lo[j] = std::min(lo[j], Z.at(i, j));
            hi[j] = std::max(hi[j], Z.at(i, j));
        }
    }
    std::vector<std::uint64_t> ids(n);
    std::vector<std::uint32_t> cell(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const T span = hi[j] - lo[j];
            std::size_t b = 0;
            if (span > T(0)) {
                b = static_cast<std::size_t>((Z.at(i, j) - lo[j]) / span * static_cast<T>(bins));
                if (b >= bins) b = bins - 1;
            }
            cell[j] = static_cast<std::uint32_t>(b);
        }
        ids[i] = fnv1a64(cell.data(), cell.size() * sizeof(std::uint32_t));
    }
    return ids;
}

// Fixed unit-norm class anchors for the contrastive bound.
template <typename T>
Tensor<T> class_prototypes(std::size_t classes, std::size_t d, std::uint64_t seed) {
    if (classes == 0 || d == 0) throw ConfigError("prototype extents must be positive");
    auto rng = make_rng(seed);
    auto raw = Tensor<T>::gaussian({classes, d}, rng, T(1));
    auto unit = normalize_rows(raw);
    return Tensor<T>::from(unit.shape(), unit.values());  // detach: constants, never trained
}

// InfoNCE-style lower bound on I(Z;Y): each row is scored against every batch
// row's class prototype; the own-class entry sits on the diagonal.
//   bound = log B + mean_i log softmax_j( cos(z_i, proto[y_j]) / temperature )_{j=i}
// Upper-bounded by log B; equals 0 for z = 0 (uniform scores).
template <typename T>
Tensor<T> contrastive_bound(const Tensor<T>& z_hat, const std::vector<std::size_t>& y,
                            const Tensor<T>& prototypes, double temperature) {
    if (z_hat.rank() != 2) throw DimensionError("z_hat must be [B x d]");
    const std::size_t b = z_hat.dim(0), d = z_hat.dim(1);
    if (y.size() != b) throw ContractError("one label per pooled row required");
    if (b < 2) throw ContractError("contrastive bound needs batch size >= 2");
    if (prototypes.rank() != 2 || prototypes.dim(1) != d) {
        throw DimensionError("prototype width does not match z_hat");
    }
    auto anchors = Tensor<T>::zeros({b, d});
    for (std::size_t i = 0; i < b; ++i) {
        if (y[i] >= prototypes.dim(0)) throw LookupError("label outside prototype table");
        for (std::size_t j = 0; j < d; ++j) anchors.values()[i * d + j] = prototypes.at(y[i], j);
    }
    auto sims = scale(matmul(normalize_rows(z_hat), transpose(anchors)),
                      T(1) / static_cast<T>(temperature));
    auto ls = log_softmax(sims, 1);
    auto eye = Tensor<T>::zeros({b, b});
    for (std::size_t i = 0; i < b; ++i) eye.values()[i * b + i] = T(1);
    auto diag_mean = scale(sum_all(mul(ls, eye)), T(1) / static_cast<T>(b));
    return add(Tensor<T>::scalar(std::log(static_cast<T>(b))), diag_mean);
}

// Gaussian-prior compression proxy: (1/(2d)) * ||Z||_F^2.
template <typename T>
Tensor<T> compression_penalty(const Tensor<T>& z_hat) {
    if (z_hat.rank() != 2) throw DimensionError("z_hat must be [B x d]");
    return scale(sum_all(mul(z_hat, z_hat)), T(1) / (T(2) * static_cast<T>(z_hat.dim(1))));
}

// L_IB = -I(Z;Y) + eta * I(Z;X), estimated per cfg.estimator. The histogram
// oracle contributes a constant for the bound term (its gradient is zero);
// only the surrogate trains the alignment.
template <typename T>
Tensor<T> ib_loss(const Tensor<T>& z_hat, const std::vector<std::size_t>& y,
                  const Tensor<T>& x_summary, const IBConfig& cfg, const Tensor<T>& prototypes) {
    cfg.validate();
    if (x_summary.rank() != 2 || x_summary.dim(0) != z_hat.dim(0)) {
        throw DimensionError("x_summary must carry one row per z_hat row");
    }
    Tensor<T> bound;
    if (cfg.estimator == IBEstimator::contrastive_surrogate) {
        bound = contrastive_bound(z_hat, y, prototypes, cfg.temperature);
    } else {
        std::vector<std::uint64_t> ylab(y.begin(), y.end());
        const double nats = mi_discrete(quantize_rows(z_hat, cfg.bins), ylab) * std::log(2.0);
        bound = Tensor<T>::scalar(static_cast<T>(nats));
    }
    return add(scale(bound, T(-1)), scale(compression_penalty(z_hat), static_cast<T>(cfg.eta)));
}

}  // namespace petal
