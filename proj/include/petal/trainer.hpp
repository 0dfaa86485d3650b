#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "petal/budget.hpp"
#include "petal/checkpoint.hpp"
#include "petal/former.hpp"
#include "petal/ib.hpp"
#include "petal/moe.hpp"
#include "petal/tensor.hpp"
#include "petal/util.hpp"

// Synthetic-task training harness. A frozen, quantile-calibrated teacher
// labels Gaussian vision token grids; the trainable surface is selected by
// method (adapter banks + experts, everything, the output head group, or
// per-matrix low-rank pairs) and modified by the ablation switches.

namespace petal {

inline constexpr std::size_t kNumQuestions = 4;

enum class Method { petal, full, head, lora };
enum class Ablation { none, V1, V2, V3, V4, random_instruction };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::petal: return "petal";
        case Method::full: return "full";
        case Method::head: return "head";
        case Method::lora: return "lora";
    }
    return "?";
}

inline std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::V1: return "V1";
        case Ablation::V2: return "V2";
        case Ablation::V3: return "V3";
        case Ablation::V4: return "V4";
        case Ablation::random_instruction: return "random_instruction";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (Method m : {Method::petal, Method::full, Method::head, Method::lora}) {
        if (to_string(m) == s) return m;
    }
    throw LookupError("unknown method " + s);
}

inline Ablation parse_ablation(const std::string& s) {
    for (Ablation a : {Ablation::none, Ablation::V1, Ablation::V2, Ablation::V3, Ablation::V4,
                       Ablation::random_instruction}) {
        if (to_string(a) == s) return a;
    }
    throw LookupError("unknown ablation " + s);
}

inline std::string to_string(TaskKind k) {
    return k == TaskKind::caption_like ? "caption" : "vqa";
}

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "caption") return TaskKind::caption_like;
    if (s == "vqa") return TaskKind::vqa_like;
    throw LookupError("unknown task kind " + s);
}

// ---- Synthetic task --------------------------------------------------------

struct SyntheticTaskSpec {
    TaskKind kind = TaskKind::caption_like;
    std::uint64_t teacher_seed = 1;
    std::size_t n_train = 256;
    std::size_t n_val = 64;
    std::size_t vision_tokens = 6;
    double noise_rate = 0.0;
    std::size_t few_shot = 0;  // 0 off, otherwise exactly this many train items

    void validate() const {
        if (n_train < 1) throw ContractError("n_train must be at least 1");
        if (n_val < 1) throw ConfigError("n_val must be at least 1");
        if (vision_tokens < 1) throw ConfigError("vision_tokens must be at least 1");
        if (noise_rate < 0.0 || noise_rate > 1.0) {
            throw ConfigError("noise_rate must lie in [0, 1]");
        }
        if (few_shot != 0 && few_shot != 50 && few_shot != 150) {
            throw ConfigError("few_shot must be one of 0, 50, 150");
        }
        if (few_shot > n_train) throw ConfigError("few_shot exceeds n_train");
    }
};

// One hidden tanh layer scores pooled vision (plus a question embedding);
// quantile thresholds calibrated on a fresh draw of the same input
// distribution cut the score line into near-uniform label buckets.
template <typename T>
struct Teacher {
    std::size_t h_v = 0, vocab = 0, hidden = 0;
    bool uses_question = false;
    std::vector<T> w1;          // [hidden x h_v]
    std::vector<T> eq;          // [kNumQuestions x hidden]
    std::vector<T> w2;          // [hidden]
    std::vector<T> thresholds;  // [vocab - 1], ascending

    T score(const std::vector<T>& pooled, std::size_t qid) const {
        T s = 0;
        for (std::size_t j = 0; j < hidden; ++j) {
            T pre = uses_question ? eq[qid * hidden + j] : T(0);
            for (std::size_t i = 0; i < h_v; ++i) pre += w1[j * h_v + i] * pooled[i];
            s += w2[j] * std::tanh(pre);
        }
        return s;
    }

    std::size_t label(const Tensor<T>& vision, std::size_t qid) const {
        const std::size_t tv = vision.dim(0);
        std::vector<T> pooled(h_v, T(0));
        for (std::size_t t = 0; t < tv; ++t) {
            for (std::size_t i = 0; i < h_v; ++i) pooled[i] += vision.values()[t * h_v + i];
        }
        for (auto& p : pooled) p /= static_cast<T>(tv);
        const T s = score(pooled, qid);
        return static_cast<std::size_t>(
            std::upper_bound(thresholds.begin(), thresholds.end(), s) - thresholds.begin());
    }
};

template <typename T>
Teacher<T> make_teacher(std::size_t h_v, std::size_t vocab, TaskKind kind,
                        std::size_t vision_tokens, std::uint64_t seed) {
    if (h_v == 0 || vocab < 2) throw ConfigError("teacher needs h_v > 0 and vocab >= 2");
    Teacher<T> t;
    t.h_v = h_v;
    t.vocab = vocab;
    t.hidden = 16;
    t.uses_question = kind == TaskKind::vqa_like;
    auto rng = make_rng(seed * 7919 + 5);
    std::normal_distribution<double> g(0.0, 1.0);
    t.w1.resize(t.hidden * h_v);
    for (auto& v : t.w1) v = static_cast<T>(g(rng));
    t.eq.resize(kNumQuestions * t.hidden);
    for (auto& v : t.eq) v = static_cast<T>(g(rng));
    t.w2.resize(t.hidden);
    for (auto& v : t.w2) v = static_cast<T>(g(rng));

    // Pooled vision entries are means of vision_tokens unit Gaussians.
    const double pooled_sd = 1.0 / std::sqrt(static_cast<double>(vision_tokens));
    const std::size_t n_cal = 1 << 16;
    std::vector<T> scores(n_cal);
    std::vector<T> pooled(h_v);
    auto cal_rng = make_rng(seed * 7919 + 6);
    for (std::size_t i = 0; i < n_cal; ++i) {
        for (auto& p : pooled) p = static_cast<T>(g(cal_rng) * pooled_sd);
        const std::size_t qid = t.uses_question ? cal_rng() % kNumQuestions : 0;
        scores[i] = t.score(pooled, qid);
    }
    std::sort(scores.begin(), scores.end());
    for (std::size_t b = 1; b < vocab; ++b) t.thresholds.push_back(scores[b * n_cal / vocab]);
    return t;
}

template <typename T>
struct Example {
    Tensor<T> vision;  // [Tv x h_v]
    std::size_t qid = 0;
    std::size_t label = 0;
};

template <typename T>
struct Dataset {
    std::vector<Example<T>> train, val;
    Teacher<T> teacher;
};

// Deterministic by seed. Train and val come from disjoint stretches of one
// stream; label noise (uniform relabeling) touches the train split only.
template <typename T>
Dataset<T> gen_dataset(const SyntheticTaskSpec& spec, std::size_t h_v, std::size_t vocab) {
    spec.validate();
    Dataset<T> ds;
    ds.teacher = make_teacher<T>(h_v, vocab, spec.kind, spec.vision_tokens, spec.teacher_seed);
    auto rng = make_rng(spec.teacher_seed * 3 + 1);
    auto noise_rng = make_rng(spec.teacher_seed * 3 + 2);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    auto draw = [&](bool noisy) {
        Example<T> ex;
        ex.vision = Tensor<T>::zeros({spec.vision_tokens, h_v});
        for (auto& v : ex.vision.values()) v = static_cast<T>(g(rng));
        ex.qid = spec.kind == TaskKind::vqa_like ? rng() % kNumQuestions : 0;
        ex.label = ds.teacher.label(ex.vision, ex.qid);
        if (noisy && spec.noise_rate > 0.0 && u(noise_rng) < spec.noise_rate) {
            ex.label = noise_rng() % vocab;
        }
        return ex;
    };
    for (std::size_t i = 0; i < spec.n_train; ++i) ds.train.push_back(draw(true));
    for (std::size_t i = 0; i < spec.n_val; ++i) ds.val.push_back(draw(false));
    if (spec.few_shot != 0) ds.train.resize(spec.few_shot);
    return ds;
}

// ---- Run configuration -----------------------------------------------------

struct TrainConfig {
    MiniFormerConfig model;
    std::size_t rank = 4;
    std::size_t d_p = 16;
    std::size_t experts = 3;
    std::size_t expert_mid = 4;
    ExpertForm expert_form = ExpertForm::bottleneck;
    Method method = Method::petal;
    Ablation ablation = Ablation::none;
    std::size_t epochs = 5;
    std::size_t batch = 32;
    double lr_start = 1e-6;
    double lr_peak = 2e-5;
    std::size_t warmup_steps = 1000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.02;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    IBConfig ib;
    std::uint64_t seed = 0;

    void validate() const {
        model.validate();
        if (rank == 0 || d_p == 0) throw ConfigError("rank and d_p must be positive");
        if (experts == 0 || expert_mid == 0) {
            throw ConfigError("expert count and width must be positive");
        }
        if (batch == 0) throw ConfigError("batch must be positive");
        if (lr_peak <= 0.0 || lr_start < 0.0 || lr_start > lr_peak) {
            throw ConfigError("learning-rate range must satisfy 0 <= lr_start <= lr_peak");
        }
        if (clip_norm <= 0.0) throw ConfigError("clip_norm must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
            throw ConfigError("betas must lie in [0, 1)");
        }
        if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
        ib.validate();
        if (ablation != Ablation::none && method != Method::petal) {
            throw ConfigError("ablations modify the petal wiring only");
        }
    }
};

inline std::string config_echo(const TrainConfig& cfg, const SyntheticTaskSpec& spec) {
    char buf[128];
    std::string out = "[model]\n";
    auto kv = [&](const char* k, std::size_t v) {
        std::snprintf(buf, sizeof(buf), "%s = %zu\n", k, v);
        out += buf;
    };
    auto kvf = [&](const char* k, double v) {
        std::snprintf(buf, sizeof(buf), "%s = %.17g\n", k, v);
        out += buf;
    };
    kv("layers", cfg.model.layers);
    kv("h_t", cfg.model.h_t);
    kv("h_v", cfg.model.h_v);
    kv("heads", cfg.model.heads);
    kv("query_tokens", cfg.model.query_tokens);
    kv("vocab", cfg.model.vocab);
    kv("ffn_mult", cfg.model.ffn_mult);
    kv("rank", cfg.rank);
    kv("d_p", cfg.d_p);
    kv("experts", cfg.experts);
    kv("expert_mid", cfg.expert_mid);
    out += std::string("expert_form = ") +
           (cfg.expert_form == ExpertForm::bottleneck ? "bottleneck" : "affine") + "\n";
    out += "\n[train]\n";
    out += "method = " + to_string(cfg.method) + "\n";
    out += "ablation = " + to_string(cfg.ablation) + "\n";
    kv("epochs", cfg.epochs);
    kv("batch", cfg.batch);
    kvf("lr_start", cfg.lr_start);
    kvf("lr_peak", cfg.lr_peak);
    kv("warmup_steps", cfg.warmup_steps);
    kvf("beta1", cfg.beta1);
    kvf("beta2", cfg.beta2);
    kvf("weight_decay", cfg.weight_decay);
    kvf("clip_norm", cfg.clip_norm);
    kvf("mu", cfg.ib.mu);
    kvf("eta", cfg.ib.eta);
    out += std::string("ib_estimator = ") +
           (cfg.ib.estimator == IBEstimator::contrastive_surrogate ? "contrastive" : "histogram") +
           "\n";
    kv("ib_bins", cfg.ib.bins);
    kvf("ib_temperature", cfg.ib.temperature);
    kv("seed", cfg.seed);
    out += "\n[task]\n";
    out += "kind = " + to_string(spec.kind) + "\n";
    kv("teacher_seed", spec.teacher_seed);
    kv("n_train", spec.n_train);
    kv("n_val", spec.n_val);
    kv("vision_tokens", spec.vision_tokens);
    kvf("noise_rate", spec.noise_rate);
    kv("few_shot", spec.few_shot);
    return out;
}

// ---- Optimizer -------------------------------------------------------------

// Decoupled weight decay: the shrink term never routes through the moment
// estimates, so zero gradients still decay parameters by (1 - lr * wd).
template <typename T>
struct AdamW {
    double beta1, beta2, eps, weight_decay;
    std::vector<std::vector<double>> m, v;
    std::size_t t = 0;

    AdamW(const std::vector<Tensor<T>>& params, double b1, double b2, double e, double wd)
        : beta1(b1), beta2(b2), eps(e), weight_decay(wd) {
        for (const auto& p : params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
    }

    void step(std::vector<Tensor<T>>& params, double lr) {
        if (params.size() != m.size()) throw ContractError("optimizer bound to other params");
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& vals = params[i].values();
            const auto& grads = params[i].grad();
            for (std::size_t j = 0; j < vals.size(); ++j) {
                const double g = static_cast<double>(grads[j]);
                m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
                const double update = (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
                vals[j] = static_cast<T>(static_cast<double>(vals[j]) - lr * update -
                                         lr * weight_decay * static_cast<double>(vals[j]));
            }
        }
    }
};

template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (const T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            auto& buf = detail::grad_buffer(*p.storage());
            for (auto& g : buf) g *= s;
        }
    }
    return norm;
}

inline double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
    if (step < cfg.warmup_steps) {
        const double frac =
            static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac;
    }
    const std::size_t tail = total_steps - cfg.warmup_steps;
    if (tail == 0) return cfg.lr_peak;
    const double progress =
        static_cast<double>(step - cfg.warmup_steps + 1) / static_cast<double>(tail);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---- Model assembly --------------------------------------------------------

template <typename T>
struct TrainedModel {
    TrainConfig cfg;
    SyntheticTaskSpec spec;
    FrozenBackbone<T> backbone;
    AdapterSet<T> adapters;
    ExpertSet<T> experts;
    bool use_moe = false;
    bool use_ib = false;
    double effective_mu = 0.0;
    Tensor<T> random_instruction;
    std::vector<Tensor<T>> raw_instruction_by_qid;  // one entry unless vqa-like
    Tensor<T> prototypes;                           // [vocab x h_t], constants
    std::vector<Tensor<T>> params;                  // optimizer set, fixed order
};

template <typename T>
TrainedModel<T> assemble(const TrainConfig& cfg, const SyntheticTaskSpec& spec) {
    cfg.validate();
    spec.validate();
    TrainedModel<T> m;
    m.cfg = cfg;
    m.spec = spec;
    m.backbone = build_frozen_backbone<T>(cfg.model, cfg.seed * 31 + 1);

    const auto& templates = default_templates(spec.kind);
    if (spec.kind == TaskKind::vqa_like) {
        for (std::size_t q = 0; q < kNumQuestions; ++q) {
            m.raw_instruction_by_qid.push_back(embed_instruction<T>(
                templates, cfg.model.h_t, cfg.seed * 31 + 4, {"q" + std::to_string(q)}));
        }
    } else {
        m.raw_instruction_by_qid.push_back(
            embed_instruction<T>(templates, cfg.model.h_t, cfg.seed * 31 + 4));
    }

    switch (cfg.method) {
        case Method::petal: {
            m.adapters = make_petal_adapters<T>(cfg.model, cfg.rank, cfg.d_p, cfg.seed * 31 + 2);
            const bool v1 = cfg.ablation == Ablation::V1 || cfg.ablation == Ablation::V3;
            const bool v2 = cfg.ablation == Ablation::V2 || cfg.ablation == Ablation::V3;
            m.use_moe = !v1 && cfg.ablation != Ablation::random_instruction;
            m.effective_mu = v2 ? 0.0 : cfg.ib.mu;
            m.use_ib = m.effective_mu != 0.0;
            if (m.use_moe) {
                m.experts = init_expert_set<T>(cfg.model.h_t, cfg.expert_mid, cfg.experts,
                                               cfg.expert_form, cfg.seed * 31 + 3);
            }
            if (cfg.ablation == Ablation::random_instruction) {
                auto rng = make_rng(cfg.seed * 31 + 6);
                m.random_instruction = Tensor<T>::gaussian(
                    m.raw_instruction_by_qid[0].shape(), rng, T(0.02));
                m.random_instruction.set_requires_grad(true);
            }
            if (cfg.ablation == Ablation::V4) {
                m.adapters.self_bank.gamma.set_requires_grad(false);
                m.adapters.cross_bank.gamma.set_requires_grad(false);
            }
            if (m.use_ib) {
                m.prototypes = class_prototypes<T>(cfg.model.vocab, cfg.model.h_t,
                                                   cfg.seed * 31 + 7);
            }
            for (auto& t : m.adapters.trainable()) {
                if (t.requires_grad()) m.params.push_back(t);
            }
            if (m.use_moe) {
                for (auto& t : m.experts.trainable()) m.params.push_back(t);
            }
            if (cfg.ablation == Ablation::random_instruction) {
                m.params.push_back(m.random_instruction);
            }
            break;
        }
        case Method::full: {
            for (auto t : m.backbone.backbone_tensors()) {
                t.set_requires_grad(true);
                m.params.push_back(t);
            }
            for (auto t : m.backbone.head_tensors()) {
                t.set_requires_grad(true);
                m.params.push_back(t);
            }
            break;
        }
        case Method::head: {
            for (auto t : m.backbone.head_tensors()) {
                t.set_requires_grad(true);
                m.params.push_back(t);
            }
            break;
        }
        case Method::lora: {
            m.adapters = make_lora_adapters<T>(cfg.model, cfg.rank, cfg.seed * 31 + 2);
            m.params = m.adapters.trainable();
            break;
        }
    }
    return m;
}

template <typename T>
std::size_t trainable_count(const TrainedModel<T>& m) {
    std::size_t n = 0;
    for (const auto& t : m.params) n += t.numel();
    return n;
}

// The persisted state: adapter tensors only, never backbone weights.
template <typename T>
NamedTensors<T> adapter_named_tensors(const TrainedModel<T>& m) {
    NamedTensors<T> out;
    if (m.cfg.method == Method::petal) {
        auto bank = [&](const char* prefix, const FactorBank<T>& b) {
            out.emplace_back(std::string(prefix) + ".U", b.U);
            out.emplace_back(std::string(prefix) + ".V", b.V);
            out.emplace_back(std::string(prefix) + ".P", b.P);
            for (const auto& [mod, lam] : b.lambda) {
                out.emplace_back(std::string(prefix) + ".lambda." + to_string(mod), lam);
            }
            out.emplace_back(std::string(prefix) + ".gamma", b.gamma);
        };
        bank("self", m.adapters.self_bank);
        bank("cross", m.adapters.cross_bank);
        if (m.use_moe) {
            for (std::size_t k = 0; k < m.experts.k(); ++k) {
                const auto& e = m.experts.experts[k];
                const std::string p = "expert" + std::to_string(k);
                if (m.experts.form == ExpertForm::bottleneck) {
                    out.emplace_back(p + ".down", e.down);
                    out.emplace_back(p + ".up", e.up);
                } else {
                    out.emplace_back(p + ".gamma", e.gamma);
                    out.emplace_back(p + ".beta", e.beta);
                }
            }
            out.emplace_back("gate.w", m.experts.gate_w);
            out.emplace_back("gate.b", m.experts.gate_b);
        }
        if (m.cfg.ablation == Ablation::random_instruction) {
            out.emplace_back("random_instruction", m.random_instruction);
        }
    } else if (m.cfg.method == Method::lora) {
        static const char* names[kNumProj] = {"self_q", "self_k", "self_v", "self_o",
                                              "cross_q", "cross_k", "cross_v", "cross_o"};
        for (std::size_t l = 0; l < m.adapters.lora.size(); ++l) {
            for (std::size_t p = 0; p < kNumProj; ++p) {
                const std::string base = "lora.l" + std::to_string(l) + "." + names[p];
                out.emplace_back(base + ".A", m.adapters.lora[l][p].A);
                out.emplace_back(base + ".B", m.adapters.lora[l][p].B);
            }
        }
    } else {
        throw ContractError("checkpoints carry adapter methods only");
    }
    return out;
}

template <typename T>
Tensor<T> instruction_for(const TrainedModel<T>& m, std::size_t qid) {
    if (m.cfg.ablation == Ablation::random_instruction) return m.random_instruction;
    const auto& raw =
        m.raw_instruction_by_qid[m.spec.kind == TaskKind::vqa_like ? qid : 0];
    if (m.use_moe) return moe_enhance(m.experts, raw).I_in;
    return raw;
}

// ---- Evaluation and training ----------------------------------------------

struct EvalStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

template <typename T>
std::size_t argmax_logits(const Tensor<T>& logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.numel(); ++i) {
        if (logits.values()[i] > logits.values()[best]) best = i;
    }
    return best;
}

template <typename T>
EvalStats evaluate(const TrainedModel<T>& m, const std::vector<Example<T>>& examples) {
    if (examples.empty()) throw ContractError("evaluation over an empty split");
    EvalStats s;
    for (const auto& ex : examples) {
        auto out = former_forward(m.backbone, ex.vision, instruction_for(m, ex.qid), m.adapters);
        s.loss += static_cast<double>(cross_entropy(out.logits, ex.label).item());
        s.accuracy += argmax_logits(out.logits) == ex.label ? 1.0 : 0.0;
    }
    s.loss /= static_cast<double>(examples.size());
    s.accuracy /= static_cast<double>(examples.size());
    return s;
}

struct RunReport {
    std::vector<double> train_loss, train_accuracy, val_loss, val_accuracy;  // per epoch
    std::size_t trainable_count = 0;
    std::size_t train_examples_used = 0;
    std::size_t ib_calls = 0;
    double wall_time_sec = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t backbone_hash_before = 0, backbone_hash_after = 0;
    std::string config_echo;

    double final_val_accuracy() const {
        if (val_accuracy.empty()) throw ContractError("no validation pass recorded");
        return val_accuracy.back();
    }
    double final_val_loss() const {
        if (val_loss.empty()) throw ContractError("no validation pass recorded");
        return val_loss.back();
    }

    std::string metrics_csv() const {
        std::string out = "epoch,split,loss,accuracy\n";
        char buf[128];
        if (train_loss.empty() && !val_loss.empty()) {
            std::snprintf(buf, sizeof(buf), "0,val,%.17g,%.17g\n", val_loss[0], val_accuracy[0]);
            out += buf;
            return out;
        }
        for (std::size_t e = 0; e < train_loss.size(); ++e) {
            std::snprintf(buf, sizeof(buf), "%zu,train,%.17g,%.17g\n", e + 1, train_loss[e],
                          train_accuracy[e]);
            out += buf;
            std::snprintf(buf, sizeof(buf), "%zu,val,%.17g,%.17g\n", e + 1, val_loss[e],
                          val_accuracy[e]);
            out += buf;
        }
        return out;
    }
};

namespace detail {

// Fisher-Yates with the raw engine; std::shuffle's draw protocol is not
// pinned by the standard and would break cross-toolchain determinism.
inline void deterministic_shuffle(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[rng() % i]);
    }
}

}  // namespace detail

template <typename T>
RunReport train(const TrainConfig& cfg, const SyntheticTaskSpec& spec,
                const std::string& checkpoint_path = "") {
    const auto t0 = std::chrono::steady_clock::now();
    auto model = assemble<T>(cfg, spec);
    auto data = gen_dataset<T>(spec, cfg.model.h_v, cfg.model.vocab);

    RunReport rep;
    rep.seed = cfg.seed;
    rep.config_echo = config_echo(cfg, spec);
    rep.trainable_count = trainable_count(model);
    rep.train_examples_used = data.train.size();
    rep.backbone_hash_before = model.backbone.content_hash();

    const std::size_t n = data.train.size();
    const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    if (cfg.epochs > 0 && cfg.warmup_steps > total_steps) {
        throw ConfigError("warmup_steps " + std::to_string(cfg.warmup_steps) +
                          " exceeds total steps " + std::to_string(total_steps));
    }

    IBConfig ib = cfg.ib;
    AdamW<T> opt(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto shuffle_rng = make_rng(cfg.seed * 1315423911ull + epoch + 1);
        detail::deterministic_shuffle(order, shuffle_rng);

        double epoch_loss = 0.0, epoch_hits = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            const std::size_t bsz = std::min(cfg.batch, n - start);
            GradTape<T> tape;
            double batch_loss_value = 0.0;
            {
                auto scope = tape.activate();
                Tensor<T> ce_sum;
                std::vector<Tensor<T>> z_rows;
                std::vector<std::size_t> labels;
                std::vector<T> x_summary_vals;
                for (std::size_t b = 0; b < bsz; ++b) {
                    const auto& ex = data.train[order[start + b]];
                    auto out = former_forward(model.backbone, ex.vision,
                                              instruction_for(model, ex.qid), model.adapters);
                    auto ce = cross_entropy(out.logits, ex.label);
                    ce_sum = b == 0 ? ce : add(ce_sum, ce);
                    epoch_hits += argmax_logits(out.logits) == ex.label ? 1.0 : 0.0;
                    if (model.use_ib) {
                        auto pooled = attention_pool(out.query_rows);
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
                auto loss = scale(ce_sum, T(1) / static_cast<T>(bsz));
                if (model.use_ib && bsz >= 2) {
                    auto z = concat<T>(z_rows, 0);
                    auto xs = Tensor<T>::from({bsz, cfg.model.h_v}, x_summary_vals);
                    auto penalty = ib_loss(z, labels, xs, ib, model.prototypes);
                    ++rep.ib_calls;
                    loss = add(loss, scale(penalty, static_cast<T>(model.effective_mu)));
                }
                if (!loss.all_finite()) throw NumericError("training loss left finite range");
                batch_loss_value = static_cast<double>(loss.item());
                tape.backward(loss);
            }
            tape.reset();
            clip_global_norm(model.params, cfg.clip_norm);
            opt.step(model.params, lr_at(cfg, step, total_steps));
            for (auto& p : model.params) p.zero_grad();
            ++step;
            epoch_loss += batch_loss_value * static_cast<double>(bsz);
        }
        rep.train_loss.push_back(epoch_loss / static_cast<double>(n));
        rep.train_accuracy.push_back(epoch_hits / static_cast<double>(n));
        auto vs = evaluate(model, data.val);
        rep.val_loss.push_back(vs.loss);
        rep.val_accuracy.push_back(vs.accuracy);
    }
    if (cfg.epochs == 0) {
        auto vs = evaluate(model, data.val);
        rep.val_loss.push_back(vs.loss);
        rep.val_accuracy.push_back(vs.accuracy);
    }

    rep.backbone_hash_after = model.backbone.content_hash();
    if (cfg.method != Method::full && rep.backbone_hash_after != rep.backbone_hash_before) {
        throw ContractError("frozen backbone mutated during a " + to_string(cfg.method) + " run");
    }
    if (!checkpoint_path.empty() &&
        (cfg.method == Method::petal || cfg.method == Method::lora)) {
        save_adapter(adapter_named_tensors(model), checkpoint_path);
    }
    rep.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

inline TrainConfig ablate(TrainConfig cfg, const std::string& ablation_id) {
    cfg.ablation = parse_ablation(ablation_id);
    return cfg;
}

// ---- Expert-count sweep ----------------------------------------------------

struct SweepRow {
    std::size_t k = 0;
    double accuracy = 0.0;
    double loss = 0.0;
};

struct SweepTable {
    std::vector<SweepRow> rows;

    std::string to_csv() const {
        std::string out = "K,accuracy,loss\n";
        char buf[128];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", r.k, r.accuracy, r.loss);
            out += buf;
        }
        return out;
    }
};

template <typename T>
SweepTable sweep_experts(const TrainConfig& cfg, const SyntheticTaskSpec& spec,
                         const std::vector<std::size_t>& ks = {1, 2, 3, 4, 5, 6}) {
    for (const auto k : ks) {
        if (k < 1) throw ConfigError("expert counts must be at least 1");
    }
    SweepTable table;
    for (const auto k : ks) {
        TrainConfig run = cfg;
        run.experts = k;
        auto rep = train<T>(run, spec);
        table.rows.push_back({k, rep.final_val_accuracy(), rep.final_val_loss()});
    }
    return table;
}

}  // namespace petal
