#pragma once

// Whole-model gradient audit: runs the central-difference check over every
// trainable tensor of an assembled adapter model, using the same batch loss
// the trainer optimizes (cross entropy plus the weighted bottleneck penalty).

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "petal/grad_check.hpp"
#include "petal/trainer.hpp"

namespace petal {

struct ModelGradCheck {
    GradCheckReport report;
    std::vector<std::string> names;

    std::string worst_name() const {
        return report.worst_param < names.size() ? names[report.worst_param] : "";
    }
};

template <typename T>
ModelGradCheck model_grad_check(const TrainConfig& cfg, const SyntheticTaskSpec& spec,
                                std::size_t batch = 3, T h = T(1e-4)) {
    if (cfg.method != Method::petal || cfg.ablation != Ablation::none) {
        throw ConfigError("gradient audit covers the unablated adapter method");
    }
    if (batch < 2) throw ContractError("gradient audit batch must cover the bottleneck path");

    auto model = assemble<T>(cfg, spec);
    auto data = gen_dataset<T>(spec, cfg.model.h_v, cfg.model.vocab);
    if (batch > data.train.size()) throw ContractError("gradient audit batch exceeds dataset");

    // Nudge every trainable off its init. The zero-start delta makes several
    // gradients vanish identically at the init point, which would leave those
    // code paths unexercised.
    auto rng = make_rng(cfg.seed * 7717 + 3);
    std::normal_distribution<double> nudge(0.0, 0.05);
    for (auto& p : model.params) {
        for (auto& v : p.values()) v += static_cast<T>(nudge(rng));
    }

    auto named = adapter_named_tensors(model);
    std::vector<Tensor<T>> params;
    ModelGradCheck out;
    for (auto& [name, tensor] : named) {
        if (!tensor.requires_grad()) continue;
        params.push_back(tensor);
        out.names.push_back(name);
    }

    auto loss_fn = [&]() -> Tensor<T> {
        Tensor<T> ce_sum;
        std::vector<Tensor<T>> z_rows;
        std::vector<std::size_t> labels;
        std::vector<T> x_summary_vals;
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& ex = data.train[b];
            auto fwd = former_forward(model.backbone, ex.vision, instruction_for(model, ex.qid),
                                      model.adapters);
            auto ce = cross_entropy(fwd.logits, ex.label);
            ce_sum = b == 0 ? ce : add(ce_sum, ce);
            if (model.use_ib) {
                auto pooled = attention_pool(fwd.query_rows);
                z_rows.push_back(reshape(pooled.H_hat, {1, cfg.model.h_t}));
                labels.push_back(ex.label);
                const auto& vv = ex.vision.values();
                const std::size_t tv = ex.vision.dim(0);
                for (std::size_t i = 0; i < cfg.model.h_v; ++i) {
                    T acc = 0;
                    for (std::size_t t = 0; t < tv; ++t) acc += vv[t * cfg.model.h_v + i];
                    x_summary_vals.push_back(acc / static_cast<T>(tv));
                }
            }
        }
        auto loss = scale(ce_sum, T(1) / static_cast<T>(batch));
        if (model.use_ib) {
            auto z = concat<T>(z_rows, 0);
            auto xs = Tensor<T>::from({batch, cfg.model.h_v}, x_summary_vals);
            auto penalty = ib_loss(z, labels, xs, cfg.ib, model.prototypes);
            loss = add(loss, scale(penalty, static_cast<T>(model.effective_mu)));
        }
        return loss;
    };

    out.report = finite_diff_check<T>(params, loss_fn, h);
    return out;
}

}  // namespace petal
