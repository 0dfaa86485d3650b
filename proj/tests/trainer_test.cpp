#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "petal/budget.hpp"
#include "petal/trainer.hpp"

using petal::Ablation;
using petal::Method;
using petal::SyntheticTaskSpec;
using petal::TaskKind;
using petal::Tensor;
using petal::TrainConfig;

namespace {

using Td = Tensor<double>;

TrainConfig tiny_cfg() {
    TrainConfig cfg;
    cfg.model.layers = 1;
    cfg.model.h_t = 16;
    cfg.model.h_v = 12;
    cfg.model.heads = 2;
    cfg.model.query_tokens = 4;
    cfg.model.vocab = 4;
    cfg.model.ffn_mult = 2;
    cfg.rank = 2;
    cfg.d_p = 4;
    cfg.experts = 2;
    cfg.expert_mid = 2;
    cfg.epochs = 2;
    cfg.batch = 16;
    cfg.warmup_steps = 2;
    cfg.lr_peak = 1e-3;
    cfg.seed = 7;
    return cfg;
}

SyntheticTaskSpec tiny_spec() {
    SyntheticTaskSpec spec;
    spec.kind = TaskKind::caption_like;
    spec.teacher_seed = 3;
    spec.n_train = 48;
    spec.n_val = 24;
    spec.vision_tokens = 4;
    return spec;
}

double chi_squared_uniform(const std::vector<std::size_t>& labels, std::size_t vocab) {
    std::vector<double> counts(vocab, 0.0);
    for (auto l : labels) counts.at(l) += 1.0;
    const double expected = static_cast<double>(labels.size()) / static_cast<double>(vocab);
    double chi = 0.0;
    for (double c : counts) chi += (c - expected) * (c - expected) / expected;
    return chi;
}

}  // namespace

TEST(Dataset, DeterministicAndSelfConsistent) {
    auto spec = tiny_spec();
    auto a = petal::gen_dataset<double>(spec, 12, 4);
    auto b = petal::gen_dataset<double>(spec, 12, 4);
    ASSERT_EQ(a.train.size(), spec.n_train);
    ASSERT_EQ(a.val.size(), spec.n_val);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        EXPECT_EQ(a.train[i].label, b.train[i].label);
        EXPECT_EQ(a.train[i].qid, b.train[i].qid);
        ASSERT_EQ(a.train[i].vision.values(), b.train[i].vision.values());
    }

    // Noise-free: the teacher reproduces every label it generated.
    for (const auto& ex : a.train) {
        EXPECT_EQ(a.teacher.label(ex.vision, ex.qid), ex.label);
        EXPECT_EQ(ex.qid, 0u);
    }

    // Splits never share an item (continuous draws).
    for (const auto& tr : a.train) {
        for (const auto& va : a.val) {
            EXPECT_NE(tr.vision.values()[0], va.vision.values()[0]);
        }
    }
}

TEST(Dataset, QuestionIdsOnlyForVqa) {
    auto spec = tiny_spec();
    spec.kind = TaskKind::vqa_like;
    spec.n_train = 400;
    auto ds = petal::gen_dataset<double>(spec, 12, 4);
    bool any_nonzero = false;
    for (const auto& ex : ds.train) {
        EXPECT_LT(ex.qid, petal::kNumQuestions);
        any_nonzero |= ex.qid != 0;
    }
    EXPECT_TRUE(any_nonzero);
}

TEST(Dataset, LabelHistogramApproximatelyUniform) {
    SyntheticTaskSpec spec;
    spec.teacher_seed = 11;
    spec.n_train = 10000;
    spec.n_val = 1;
    spec.vision_tokens = 6;
    auto ds = petal::gen_dataset<double>(spec, 20, 8);
    std::vector<std::size_t> labels;
    for (const auto& ex : ds.train) labels.push_back(ex.label);
    // 1% critical value for 7 degrees of freedom.
    EXPECT_LT(chi_squared_uniform(labels, 8), 18.4753);
}

TEST(Dataset, NoiseRelabelsAboutTheRequestedFraction) {
    auto spec = tiny_spec();
    spec.n_train = 2000;
    spec.noise_rate = 0.3;
    auto ds = petal::gen_dataset<double>(spec, 12, 4);
    std::size_t flipped = 0;
    for (const auto& ex : ds.train) {
        if (ds.teacher.label(ex.vision, ex.qid) != ex.label) ++flipped;
    }
    // 30% redraws, of which 3/4 land on a different label.
    const double rate = static_cast<double>(flipped) / 2000.0;
    EXPECT_NEAR(rate, 0.3 * 0.75, 0.04);

    // Val split stays clean.
    for (const auto& ex : ds.val) {
        EXPECT_EQ(ds.teacher.label(ex.vision, ex.qid), ex.label);
    }
}

TEST(Dataset, FewShotUsesExactCounts) {
    for (std::size_t shots : {std::size_t(50), std::size_t(150)}) {
        auto spec = tiny_spec();
        spec.n_train = 200;
        spec.few_shot = shots;
        auto ds = petal::gen_dataset<double>(spec, 12, 4);
        EXPECT_EQ(ds.train.size(), shots);
    }
    auto bad = tiny_spec();
    bad.few_shot = 70;
    EXPECT_THROW(petal::gen_dataset<double>(bad, 12, 4), petal::ConfigError);
    auto toobig = tiny_spec();
    toobig.n_train = 40;
    toobig.few_shot = 50;
    EXPECT_THROW(petal::gen_dataset<double>(toobig, 12, 4), petal::ConfigError);
    auto empty = tiny_spec();
    empty.n_train = 0;
    EXPECT_THROW(petal::gen_dataset<double>(empty, 12, 4), petal::ContractError);
}

TEST(Optimizer, ZeroGradientBehavior) {
    auto p = Td::from({3}, {1.0, -2.0, 0.5});
    p.set_requires_grad(true);
    std::vector<Td> params = {p};

    petal::AdamW<double> no_decay(params, 0.9, 0.999, 1e-8, 0.0);
    no_decay.step(params, 0.1);
    EXPECT_EQ(p.values()[0], 1.0);
    EXPECT_EQ(p.values()[1], -2.0);
    EXPECT_EQ(p.values()[2], 0.5);

    petal::AdamW<double> decay(params, 0.9, 0.999, 1e-8, 0.02);
    const double lr = 0.1;
    decay.step(params, lr);
    EXPECT_DOUBLE_EQ(p.values()[0], 1.0 * (1.0 - lr * 0.02));
    EXPECT_DOUBLE_EQ(p.values()[1], -2.0 * (1.0 - lr * 0.02));
    decay.step(params, lr);
    EXPECT_DOUBLE_EQ(p.values()[1], -2.0 * (1.0 - lr * 0.02) * (1.0 - lr * 0.02));
}

TEST(Optimizer, FirstStepMovesByAboutLr) {
    auto p = Td::from({2}, {0.0, 0.0});
    p.set_requires_grad(true);
    auto& g = petal::detail::grad_buffer(*p.storage());
    g[0] = 0.5;
    g[1] = -0.25;
    std::vector<Td> params = {p};
    petal::AdamW<double> opt(params, 0.9, 0.999, 1e-8, 0.0);
    opt.step(params, 0.01);
    // Bias-corrected first step is lr * g / (|g| + eps), i.e. lr * sign(g).
    EXPECT_NEAR(p.values()[0], -0.01, 1e-6);
    EXPECT_NEAR(p.values()[1], 0.01, 1e-6);
}

TEST(Optimizer, GlobalNormClipping) {
    auto p = Td::from({2}, {0.0, 0.0});
    p.set_requires_grad(true);
    auto& g = petal::detail::grad_buffer(*p.storage());
    g[0] = 3.0;
    g[1] = 4.0;
    std::vector<Td> params = {p};
    EXPECT_DOUBLE_EQ(petal::clip_global_norm(params, 1.0), 5.0);
    EXPECT_NEAR(p.grad()[0], 0.6, 1e-12);
    EXPECT_NEAR(p.grad()[1], 0.8, 1e-12);
    EXPECT_DOUBLE_EQ(petal::clip_global_norm(params, 1.0), 1.0);
    EXPECT_NEAR(p.grad()[0], 0.6, 1e-12);
}

TEST(Schedule, WarmupThenCosine) {
    TrainConfig cfg;
    cfg.lr_start = 1e-6;
    cfg.lr_peak = 2e-5;
    cfg.warmup_steps = 4;
    const std::size_t total = 12;
    EXPECT_LT(petal::lr_at(cfg, 0, total), petal::lr_at(cfg, 1, total));
    EXPECT_DOUBLE_EQ(petal::lr_at(cfg, 3, total), 2e-5);
    for (std::size_t s = 4; s + 1 < total; ++s) {
        EXPECT_GT(petal::lr_at(cfg, s, total), petal::lr_at(cfg, s + 1, total));
    }
    EXPECT_NEAR(petal::lr_at(cfg, 11, total), 0.0, 1e-20);

    auto cfg2 = tiny_cfg();
    cfg2.warmup_steps = 100000;
    EXPECT_THROW(petal::train<double>(cfg2, tiny_spec()), petal::ConfigError);
}

TEST(Train, ZeroEpochsReportsFrozenAccuracy) {
    auto cfg = tiny_cfg();
    cfg.epochs = 0;
    auto spec = tiny_spec();
    auto rep = petal::train<double>(cfg, spec);
    ASSERT_EQ(rep.val_accuracy.size(), 1u);
    ASSERT_TRUE(rep.train_loss.empty());

    auto model = petal::assemble<double>(cfg, spec);
    auto ds = petal::gen_dataset<double>(spec, cfg.model.h_v, cfg.model.vocab);
    auto ref = petal::evaluate(model, ds.val);
    EXPECT_EQ(rep.val_accuracy[0], ref.accuracy);
    EXPECT_EQ(rep.val_loss[0], ref.loss);
    EXPECT_NE(rep.metrics_csv().find("0,val,"), std::string::npos);
}

TEST(Train, LossDecreasesOnNoiseFreeTask) {
    auto cfg = tiny_cfg();
    cfg.epochs = 5;
    cfg.lr_peak = 2e-2;
    cfg.lr_start = 1e-3;
    cfg.warmup_steps = 5;
    cfg.seed = 7;
    auto spec = tiny_spec();
    // The zero-delta start keeps early gradients small; enough steps per
    // epoch are needed before the adapters escape the plateau.
    spec.n_train = 256;
    spec.n_val = 64;
    auto rep = petal::train<double>(cfg, spec);
    ASSERT_EQ(rep.train_loss.size(), 5u);
    EXPECT_LT(rep.train_loss.back(), rep.train_loss.front());
    EXPECT_GT(rep.ib_calls, 0u);
    EXPECT_EQ(rep.backbone_hash_before, rep.backbone_hash_after);
}

TEST(Train, DeterministicMetricsAndCheckpoint) {
    auto cfg = tiny_cfg();
    const std::string p1 = testing::TempDir() + "det1.ckpt";
    const std::string p2 = testing::TempDir() + "det2.ckpt";
    auto a = petal::train<double>(cfg, tiny_spec(), p1);
    auto b = petal::train<double>(cfg, tiny_spec(), p2);
    EXPECT_EQ(a.metrics_csv(), b.metrics_csv());
    EXPECT_EQ(a.config_echo, b.config_echo);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    ASSERT_FALSE(c1.empty());
    EXPECT_EQ(c1, c2);
    std::remove(p1.c_str());
    std::remove(p2.c_str());

    EXPECT_NE(a.metrics_csv().find("epoch,split,loss,accuracy\n"), std::string::npos);
}

TEST(Train, MethodsTouchOnlyTheirOwnParameters) {
    auto spec = tiny_spec();
    for (Method method : {Method::petal, Method::head, Method::lora}) {
        auto cfg = tiny_cfg();
        cfg.method = method;
        cfg.epochs = 1;
        auto rep = petal::train<double>(cfg, spec);
        EXPECT_EQ(rep.backbone_hash_before, rep.backbone_hash_after) << petal::to_string(method);
    }
    auto cfg = tiny_cfg();
    cfg.method = Method::full;
    cfg.epochs = 1;
    auto rep = petal::train<double>(cfg, spec);
    EXPECT_NE(rep.backbone_hash_before, rep.backbone_hash_after);
}

TEST(Train, TrainableCountsMatchBudgetRows) {
    auto cfg = tiny_cfg();
    auto spec = tiny_spec();
    petal::BudgetDims dims;
    dims.h_v = cfg.model.h_v;
    dims.h_t = cfg.model.h_t;
    dims.rank = cfg.rank;
    dims.d_p = cfg.d_p;
    dims.moe_m = cfg.expert_mid;
    dims.moe_k = cfg.experts;
    dims.layers = cfg.model.layers;
    dims.vocab = cfg.model.vocab;
    dims.ffn_mult = cfg.model.ffn_mult;
    dims.query_tokens = cfg.model.query_tokens;
    auto table = petal::compare_budgets(dims);

    for (Method method : {Method::petal, Method::full, Method::head, Method::lora}) {
        auto run = cfg;
        run.method = method;
        run.epochs = 0;
        auto rep = petal::train<double>(run, spec);
        EXPECT_EQ(rep.trainable_count, table.row(petal::to_string(method)))
            << petal::to_string(method);
    }
}

TEST(Ablations, WiringAndCounts) {
    auto spec = tiny_spec();
    auto base = tiny_cfg();
    base.epochs = 1;
    auto rep_none = petal::train<double>(base, spec);

    auto v2 = petal::ablate(base, "V2");
    auto rep_v2 = petal::train<double>(v2, spec);
    EXPECT_EQ(rep_v2.ib_calls, 0u);
    EXPECT_GT(rep_none.ib_calls, 0u);
    EXPECT_EQ(rep_v2.trainable_count, rep_none.trainable_count);

    auto v3 = petal::ablate(base, "V3");
    auto rep_v3 = petal::train<double>(v3, spec);
    EXPECT_EQ(rep_v3.ib_calls, 0u);
    const auto moe_total =
        petal::moe_method_count(base.model.h_t, base.expert_mid, base.experts);
    EXPECT_EQ(rep_none.trainable_count - rep_v3.trainable_count, moe_total);

    auto v1 = petal::ablate(base, "V1");
    auto rep_v1 = petal::train<double>(v1, spec);
    EXPECT_EQ(rep_v1.trainable_count, rep_v3.trainable_count);
    EXPECT_GT(rep_v1.ib_calls, 0u);

    EXPECT_THROW(petal::ablate(base, "V9"), petal::LookupError);

    auto bad = base;
    bad.method = Method::head;
    bad.ablation = Ablation::V1;
    EXPECT_THROW(petal::train<double>(bad, spec), petal::ConfigError);
}

TEST(Ablations, V4FreezesGamma) {
    auto spec = tiny_spec();
    auto cfg = petal::ablate(tiny_cfg(), "V4");
    cfg.epochs = 2;
    cfg.lr_peak = 1e-2;
    auto model = petal::assemble<double>(cfg, spec);
    EXPECT_FALSE(model.adapters.self_bank.gamma.requires_grad());

    auto rep = petal::train<double>(cfg, spec);
    auto rep_plain = petal::train<double>(tiny_cfg(), spec);
    EXPECT_EQ(rep_plain.trainable_count - rep.trainable_count, 2u);

    // Gammas sit outside the optimizer set and accumulate no gradient.
    petal::GradTape<double> tape;
    auto ds = petal::gen_dataset<double>(spec, cfg.model.h_v, cfg.model.vocab);
    {
        auto scope = tape.activate();
        auto out = petal::former_forward(model.backbone, ds.train[0].vision,
                                         petal::instruction_for(model, 0), model.adapters);
        tape.backward(petal::cross_entropy(out.logits, ds.train[0].label));
    }
    tape.reset();
    for (double g : model.adapters.self_bank.gamma.grad()) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(model.adapters.self_bank.gamma.item(), 1.0);
}

TEST(Ablations, RandomInstructionReplacesTemplates) {
    auto spec = tiny_spec();
    auto cfg = petal::ablate(tiny_cfg(), "random_instruction");
    auto model = petal::assemble<double>(cfg, spec);
    EXPECT_FALSE(model.use_moe);
    ASSERT_EQ(model.random_instruction.shape(), model.raw_instruction_by_qid[0].shape());
    EXPECT_TRUE(model.random_instruction.requires_grad());
    auto instr = petal::instruction_for(model, 0);
    EXPECT_EQ(instr.storage(), model.random_instruction.storage());

    auto rep = petal::train<double>(cfg, spec);
    auto rep_v3 = petal::train<double>(petal::ablate(tiny_cfg(), "V3"), spec);
    EXPECT_EQ(rep.trainable_count,
              rep_v3.trainable_count + model.random_instruction.numel());
}

TEST(Sweep, RowsMatchDirectRuns) {
    auto cfg = tiny_cfg();
    cfg.epochs = 1;
    auto spec = tiny_spec();
    auto table = petal::sweep_experts<double>(cfg, spec, {1, 2});
    ASSERT_EQ(table.rows.size(), 2u);
    EXPECT_EQ(table.rows[0].k, 1u);

    auto direct = cfg;
    direct.experts = 1;
    auto rep = petal::train<double>(direct, spec);
    EXPECT_EQ(table.rows[0].accuracy, rep.final_val_accuracy());
    EXPECT_EQ(table.rows[0].loss, rep.final_val_loss());

    auto csv = table.to_csv();
    EXPECT_NE(csv.find("K,accuracy,loss\n"), std::string::npos);
    EXPECT_THROW(petal::sweep_experts<double>(cfg, spec, {0}), petal::ConfigError);
}

TEST(Config, EchoCarriesEffectiveValues) {
    auto cfg = tiny_cfg();
    auto spec = tiny_spec();
    auto echo = petal::config_echo(cfg, spec);
    for (const char* needle : {"[model]", "[train]", "[task]", "method = petal",
                               "ablation = none", "kind = caption", "h_t = 16",
                               "expert_form = bottleneck"}) {
        EXPECT_NE(echo.find(needle), std::string::npos) << needle;
    }
    EXPECT_THROW(petal::parse_method("adapterx"), petal::LookupError);
    EXPECT_THROW(petal::parse_task_kind("retrieval"), petal::LookupError);
}
