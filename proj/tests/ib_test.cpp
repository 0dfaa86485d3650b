#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "petal/grad_check.hpp"
#include "petal/ib.hpp"

using petal::IBConfig;
using petal::Tensor;

namespace {

using Td = Tensor<double>;

std::vector<std::uint64_t> u64(std::initializer_list<std::uint64_t> v) { return {v}; }

}  // namespace

TEST(AttentionPool, IdenticalRowsPoolUniformly) {
    auto H = Td::from({3, 2}, {1.5, -2.0, 1.5, -2.0, 1.5, -2.0});
    auto p = petal::attention_pool(H);
    for (double a : p.alpha.values()) EXPECT_NEAR(a, 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(p.H_hat.values()[0], 1.5, 1e-12);
    EXPECT_NEAR(p.H_hat.values()[1], -2.0, 1e-12);
}

TEST(AttentionPool, SingleRowIsItself) {
    auto H = Td::from({1, 3}, {4.0, 5.0, 6.0});
    auto p = petal::attention_pool(H);
    EXPECT_DOUBLE_EQ(p.alpha.values()[0], 1.0);
    EXPECT_EQ(p.H_hat.values(), (std::vector<double>{4.0, 5.0, 6.0}));
    EXPECT_THROW(petal::attention_pool(Td::zeros({0, 3})), petal::ContractError);
}

TEST(AttentionPool, SymmetricBasisSplitsEvenly) {
    auto H = Td::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto p = petal::attention_pool(H);
    EXPECT_NEAR(p.alpha.values()[0], 0.5, 1e-15);
    EXPECT_NEAR(p.alpha.values()[1], 0.5, 1e-15);
    EXPECT_NEAR(p.H_hat.values()[0], 0.5, 1e-15);
    EXPECT_NEAR(p.H_hat.values()[1], 0.5, 1e-15);
}

TEST(AttentionPool, SimplexAndConvexHull) {
    std::mt19937_64 rng(17);
    auto H = Td::gaussian({6, 5}, rng, 2.0);
    auto p = petal::attention_pool(H);
    double sum = 0.0;
    for (double a : p.alpha.values()) {
        EXPECT_GE(a, 0.0);
        sum += a;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    for (std::size_t j = 0; j < 5; ++j) {
        double lo = H.at(0, j), hi = H.at(0, j);
        for (std::size_t i = 1; i < 6; ++i) {
            lo = std::min(lo, H.at(i, j));
            hi = std::max(hi, H.at(i, j));
        }
        EXPECT_GE(p.H_hat.values()[j], lo - 1e-12);
        EXPECT_LE(p.H_hat.values()[j], hi + 1e-12);
    }
}

TEST(MiDiscrete, IndependentExactTableIsZero) {
    // Joint counts factor exactly: every (z, y) cell appears once.
    auto z = u64({0, 0, 1, 1});
    auto y = u64({0, 1, 0, 1});
    EXPECT_NEAR(petal::mi_discrete(z, y), 0.0, 1e-15);
}

TEST(MiDiscrete, IdentityOverFourSymbolsIsTwoBits) {
    auto z = u64({0, 1, 2, 3, 0, 1, 2, 3});
    EXPECT_NEAR(petal::mi_discrete(z, z), 2.0, 1e-12);
}

TEST(MiDiscrete, NoisyBinaryChannelMatchesCapacity) {
    std::mt19937_64 rng(20240819);
    std::bernoulli_distribution bit(0.5), flip(0.25);
    const std::size_t n = 100000;
    std::vector<std::uint64_t> y(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = bit(rng) ? 1 : 0;
        z[i] = y[i] ^ (flip(rng) ? 1u : 0u);
    }
    const double h25 = -(0.25 * std::log2(0.25) + 0.75 * std::log2(0.75));
    EXPECT_NEAR(petal::mi_discrete(z, y), 1.0 - h25, 0.01);
}

TEST(MiDiscrete, SymmetryNonnegativityUpperBound) {
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<std::uint64_t> zc(0, 4), yc(0, 2);
    std::vector<std::uint64_t> z(500), y(500);
    for (std::size_t i = 0; i < 500; ++i) {
        z[i] = zc(rng);
        y[i] = yc(rng);
    }
    const double zy = petal::mi_discrete(z, y);
    EXPECT_DOUBLE_EQ(zy, petal::mi_discrete(y, z));
    EXPECT_GE(zy, -1e-12);
    EXPECT_LE(zy, std::min(std::log2(5.0), std::log2(3.0)) + 1e-9);
    EXPECT_THROW(petal::mi_discrete({}, {}), petal::ContractError);
    EXPECT_THROW(petal::mi_discrete(z, u64({1})), petal::ContractError);
}

TEST(QuantizeRows, SeparatesDistinctPatterns) {
    auto Z = Td::from({4, 2}, {0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.05, 0.02});
    auto ids = petal::quantize_rows(Z, 8);
    EXPECT_EQ(ids[0], ids[3]);  // both in the lowest cell of each dimension
    EXPECT_NE(ids[0], ids[1]);
    EXPECT_NE(ids[0], ids[2]);
    EXPECT_NE(ids[1], ids[2]);
    auto again = petal::quantize_rows(Z, 8);
    EXPECT_EQ(ids, again);
}

TEST(ContrastiveBound, ZeroInputGivesZeroBoundAndLoss) {
    auto z = Td::zeros({3, 4});
    auto protos = petal::class_prototypes<double>(2, 4, 7);
    IBConfig cfg;
    auto bound = petal::contrastive_bound(z, {0, 1, 0}, protos, cfg.temperature);
    EXPECT_NEAR(bound.item(), 0.0, 1e-12);  // log B plus uniform log-softmax = 0
    auto loss = petal::ib_loss(z, {0, 1, 0}, Td::zeros({3, 4}), cfg, protos);
    EXPECT_NEAR(loss.item(), 0.0, 1e-12);
}

TEST(ContrastiveBound, SaturatesAtLogBForAlignedOrthogonalPairs) {
    auto protos = Td::from({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    auto z = Td::from({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    auto bound = petal::contrastive_bound(z, {0, 1}, protos, 0.01);
    EXPECT_NEAR(bound.item(), std::log(2.0), 1e-6);

    IBConfig cfg;
    cfg.temperature = 0.01;
    auto loss = petal::ib_loss(z, {0, 1}, Td::zeros({2, 4}), cfg, protos);
    // norm penalty: eta * (1/(2*4)) * 2 at unit rows
    EXPECT_NEAR(loss.item(), -std::log(2.0) + cfg.eta * 2.0 / 8.0, 1e-6);
}

TEST(ContrastiveBound, NeverExceedsLogB) {
    std::mt19937_64 rng(31);
    auto protos = petal::class_prototypes<double>(3, 5, 11);
    for (int trial = 0; trial < 20; ++trial) {
        auto z = Td::gaussian({4, 5}, rng, 1.5);
        std::vector<std::size_t> y = {static_cast<std::size_t>(trial % 3), 0, 1, 2};
        auto bound = petal::contrastive_bound(z, y, protos, 0.1);
        EXPECT_LE(bound.item(), std::log(4.0) + 1e-12);
    }
    auto tiny = Td::zeros({1, 5});
    EXPECT_THROW(petal::contrastive_bound(tiny, {0}, protos, 0.1), petal::ContractError);
}

TEST(IbLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(41);
    auto z = Td::gaussian({4, 6}, rng, 0.8);
    auto protos = petal::class_prototypes<double>(3, 6, 13);
    auto xs = Td::gaussian({4, 6}, rng, 1.0);
    IBConfig cfg;
    std::vector<std::size_t> y = {0, 1, 2, 1};
    std::vector<Td> params = {z};
    auto loss_fn = [&]() { return petal::ib_loss(z, y, xs, cfg, protos); };
    auto rep = petal::finite_diff_check<double>(params, loss_fn);
    EXPECT_LE(rep.max_rel_err, 1e-4);
}

TEST(IbLoss, HistogramOracleEstimatorRuns) {
    std::mt19937_64 rng(43);
    auto z = Td::gaussian({6, 3}, rng, 1.0);
    auto protos = petal::class_prototypes<double>(2, 3, 3);
    IBConfig cfg;
    cfg.estimator = petal::IBEstimator::histogram_oracle;
    auto loss = petal::ib_loss(z, {0, 1, 0, 1, 0, 1}, Td::zeros({6, 3}), cfg, protos);
    EXPECT_TRUE(std::isfinite(loss.item()));
    IBConfig bad;
    bad.temperature = 0.0;
    EXPECT_THROW(petal::ib_loss(z, {0, 1, 0, 1, 0, 1}, Td::zeros({6, 3}), bad, protos),
                 petal::ConfigError);
}

TEST(IbLoss, TrainingAlignsRepresentationWithLabels) {
    // Direct gradient descent on z: the surrogate bound should rise and the
    // discretized plug-in MI between z and y should rise with it. The batch is
    // large relative to the bin grid so the plug-in estimate starts well below
    // its 1-bit ceiling instead of saturating on all-distinct cells.
    std::mt19937_64 rng(47);
    const std::size_t b = 64;
    auto z = Td::gaussian({b, 4}, rng, 0.3).set_requires_grad(true);
    auto protos = petal::class_prototypes<double>(2, 4, 5);
    auto xs = Td::zeros({b, 4});
    std::vector<std::size_t> y(b);
    for (std::size_t i = 0; i < b; ++i) y[i] = i % 2;
    std::vector<std::uint64_t> ylab(y.begin(), y.end());
    IBConfig cfg;

    const double bound0 = petal::contrastive_bound(z, y, protos, cfg.temperature).item();
    const double mi0 = petal::mi_discrete(petal::quantize_rows(z, 2), ylab);

    petal::GradTape<double> tape;
    for (int step = 0; step < 250; ++step) {
        auto scope = tape.activate();
        z.zero_grad();
        auto loss = petal::ib_loss(z, y, xs, cfg, protos);
        tape.backward(loss);
        tape.reset();
        for (std::size_t i = 0; i < z.numel(); ++i) z.values()[i] -= 0.5 * z.grad()[i];
    }

    const double bound1 = petal::contrastive_bound(z, y, protos, cfg.temperature).item();
    const double mi1 = petal::mi_discrete(petal::quantize_rows(z, 2), ylab);
    EXPECT_GT(bound1, bound0 + 0.1);
    EXPECT_GT(mi1, mi0);
    EXPECT_GT(mi1, 0.6);  // substantially informative; ceiling is 1 bit
}
