#include <gtest/gtest.h>

#include "petal/budget.hpp"
#include "petal/moe.hpp"

using petal::BudgetDims;
using petal::MiniFormerConfig;

namespace {

MiniFormerConfig toy_cfg() {
    MiniFormerConfig cfg;
    cfg.layers = 2;
    cfg.h_t = 32;
    cfg.h_v = 56;
    cfg.heads = 4;
    cfg.query_tokens = 8;
    cfg.vocab = 8;
    return cfg;
}

std::size_t tensor_count(const std::vector<petal::Tensor<double>>& ts) {
    std::size_t n = 0;
    for (const auto& t : ts) n += t.numel();
    return n;
}

}  // namespace

TEST(Budget, ReferenceDimsExactCounts) {
    auto rep = petal::petal_budget(1408, 768, 64, 64, 3);

    // Independent arithmetic for each part, spelled out rather than shared
    // with the implementation.
    const std::size_t qformer_oracle = (1408ull + 2ull * 64 * 64 + 3ull * 768) * 64;
    const std::size_t moe_oracle = 768ull * 64 * 2 * 3;
    EXPECT_EQ(qformer_oracle, 761856u);
    EXPECT_EQ(moe_oracle, 294912u);

    EXPECT_EQ(rep.qformer_part, qformer_oracle);
    EXPECT_EQ(rep.moe_part, moe_oracle);
    EXPECT_EQ(rep.paper_mode_subtotal, 1056768u);
    EXPECT_GE(rep.ratio, 0.005);
    EXPECT_LE(rep.ratio, 0.006);
    EXPECT_TRUE(rep.warnings.empty());
}

TEST(Budget, ItemizedLinesOutsideSubtotal) {
    auto rep = petal::petal_budget(1408, 768, 64, 64, 3);
    std::size_t itemized_only = 0;
    std::size_t in_subtotal = 0;
    for (const auto& ln : rep.lines) {
        (ln.in_subtotal ? in_subtotal : itemized_only) += ln.count;
    }
    EXPECT_EQ(in_subtotal, rep.paper_mode_subtotal);
    EXPECT_EQ(rep.full_itemized_total, rep.paper_mode_subtotal + itemized_only);
    EXPECT_LE(rep.paper_mode_subtotal, rep.full_itemized_total);

    // lambda: two banks, two streams, R each; gamma: one per bank; gate: 2H+1.
    EXPECT_EQ(itemized_only, 2u * 2 * 64 + 2 + (2u * 768 + 1));
}

TEST(Budget, PureFunctionAndValidation) {
    auto a = petal::petal_budget(1408, 768, 64, 64, 3);
    auto b = petal::petal_budget(1408, 768, 64, 64, 3);
    EXPECT_EQ(a.to_csv(), b.to_csv());
    EXPECT_EQ(a.to_text(), b.to_text());
    EXPECT_THROW(petal::petal_budget(0, 768, 64, 64, 3), petal::ConfigError);
    EXPECT_THROW(petal::petal_budget(1408, 768, 64, 0, 3), petal::ConfigError);
}

TEST(Budget, NonSquareProjectionDimDrawsWarning) {
    auto rep = petal::petal_budget(1408, 768, 64, 64, 3, 2, 4, 100);
    ASSERT_EQ(rep.warnings.size(), 1u);
    EXPECT_NE(rep.warnings[0].find("d_p"), std::string::npos);
    auto clean = petal::petal_budget(1408, 768, 64, 64, 3, 2, 4, 64 * 64);
    EXPECT_TRUE(clean.warnings.empty());
}

TEST(Budget, LiveTraversalMatchesEveryMethodRow) {
    auto cfg = toy_cfg();
    BudgetDims dims;
    dims.h_v = cfg.h_v;
    dims.h_t = cfg.h_t;
    dims.rank = 4;
    dims.d_p = 16;
    dims.moe_m = 4;
    dims.moe_k = 3;
    dims.layers = cfg.layers;
    dims.vocab = cfg.vocab;
    auto table = petal::compare_budgets(dims);

    auto petal_ad = petal::make_petal_adapters<double>(cfg, 4, 16, 7);
    auto experts = petal::init_expert_set<double>(cfg.h_t, 4, 3,
                                                  petal::ExpertForm::bottleneck, 7);
    const std::size_t live_petal = tensor_count(petal_ad.trainable()) +
                                   tensor_count(experts.trainable());
    EXPECT_EQ(table.row("petal"), live_petal);

    auto lora_ad = petal::make_lora_adapters<double>(cfg, 4, 7);
    EXPECT_EQ(table.row("lora"), tensor_count(lora_ad.trainable()));

    auto bb = petal::build_frozen_backbone<double>(cfg, 7);
    EXPECT_EQ(table.row("head"), bb.head_param_count());
    EXPECT_EQ(table.row("full"), bb.backbone_param_count() + bb.head_param_count());

    EXPECT_THROW(table.row("nope"), petal::LookupError);
}

TEST(Budget, BypassingExpertsRemovesExactlyTheirShare) {
    auto cfg = toy_cfg();
    const std::size_t with_moe = petal::petal_method_count(cfg.h_v, cfg.h_t, 4, 4, 3, 2, 16);
    auto petal_ad = petal::make_petal_adapters<double>(cfg, 4, 16, 7);
    const std::size_t banks_only = tensor_count(petal_ad.trainable());
    EXPECT_EQ(with_moe - petal::moe_method_count(cfg.h_t, 4, 3), banks_only);
}

TEST(Budget, ReferenceScaleComparisonTable) {
    auto table = petal::compare_budgets(BudgetDims::paper());
    EXPECT_EQ(table.row("petal"), 1056768u);
    EXPECT_EQ(table.row("full"), 188000000u);

    // Documented assumption: 12 layers x 8 square adapted matrices.
    const std::size_t lora_oracle = 12ull * 8 * 64 * (768 + 768);
    EXPECT_EQ(lora_oracle, 9437184u);
    EXPECT_EQ(table.row("lora"), lora_oracle);
    for (const auto& r : table.rows) {
        if (r.method == "lora") EXPECT_NE(r.note.find("does not match"), std::string::npos);
    }
}

TEST(Budget, RenderedFormsCarryAllRows) {
    auto table = petal::compare_budgets(BudgetDims::paper());
    auto csv = table.to_csv();
    for (const char* m : {"petal", "lora", "head", "full"}) {
        EXPECT_NE(csv.find(m), std::string::npos);
    }
    auto rep = petal::petal_budget(1408, 768, 64, 64, 3);
    auto text = rep.to_text();
    EXPECT_NE(text.find("1056768"), std::string::npos);
    EXPECT_NE(text.find("subtotal"), std::string::npos);
    auto rcsv = rep.to_csv();
    EXPECT_NE(rcsv.find("expert bottlenecks,294912,1"), std::string::npos);
}
