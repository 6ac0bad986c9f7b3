#include <gtest/gtest.h>

#include <cmath>

#include "seegraph/maskext.hpp"
#include "test_util.hpp"

using namespace seegraph;
using namespace seegraph::mask;
using seegraph::testing::random_tensor;

namespace {

ParameterStore mlp_store(std::size_t width, std::uint64_t seed = 5) {
    ParameterStore store;
    Stream s(seed);
    init_params(store, width, true, s);
    store.value(kHiddenBias) = random_tensor({width}, seed + 1, -0.3, 0.3);
    store.value(kOutBias)[0] = 0.2;
    return store;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(EdgeLogits, MatchesMlpOnConcatenation) {
    const auto store = mlp_store(3);
    const Tensor h = random_tensor({4, 3}, 9);
    ad::Tape t;
    ParameterBinding b(store, t, false);
    const Tensor s = edge_logits(t.constant(h), b).value();
    const Tensor& w1 = store.value(kHiddenWeight);
    const Tensor& b1 = store.value(kHiddenBias);
    const Tensor& w2 = store.value(kOutWeight);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double out = store.value(kOutBias)[0];
            for (std::size_t k = 0; k < 3; ++k) {
                double z = b1[k];
                for (std::size_t c = 0; c < 3; ++c) z += h.at(i, c) * w1.at(c, k) + h.at(j, c) * w1.at(3 + c, k);
                out += (z > 0 ? z : std::expm1(z)) * w2.at(k, 0);
            }
            EXPECT_NEAR(s.at(i, j), out, 1e-14);
        }
}

TEST(EdgeLogits, IdenticalEmbeddingsGiveSymmetricLogits) {
    const auto store = mlp_store(3);
    Tensor h({2, 3});
    for (std::size_t k = 0; k < 3; ++k) h.at(0, k) = h.at(1, k) = 0.3 * k - 0.2;
    ad::Tape t;
    ParameterBinding b(store, t, false);
    const Tensor s = edge_logits(t.constant(h), b).value();
    EXPECT_EQ(s.at(0, 1), s.at(1, 0));
}

TEST(EdgeLogits, ZeroWeightsGiveBias) {
    auto store = mlp_store(3);
    store.value(kHiddenWeight).fill(0.0);
    store.value(kOutWeight).fill(0.0);
    store.value(kOutBias)[0] = -1.25;
    ad::Tape t;
    ParameterBinding b(store, t, false);
    for (double v : edge_logits(t.constant(random_tensor({5, 3}, 2)), b).value().data()) EXPECT_EQ(v, -1.25);
}

TEST(EdgeLogits, EquivariantUnderNodePermutation) {
    const auto store = mlp_store(4);
    const Tensor h = random_tensor({5, 4}, 3);
    const std::size_t perm[] = {2, 4, 0, 3, 1};
    Tensor hp(h.shape());
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 0; k < 4; ++k) hp.at(i, k) = h.at(perm[i], k);
    ad::Tape t;
    ParameterBinding b(store, t, false);
    const Tensor s = edge_logits(t.constant(h), b).value(), sp = edge_logits(t.constant(hp), b).value();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(sp.at(i, j), s.at(perm[i], perm[j]), 1e-14);
}

TEST(EdgeLogits, GradientMatchesFiniteDifferences) {
    const auto store = mlp_store(3);
    ad::Tape outer;
    ParameterBinding b(store, outer, false);
    const double err = ad::grad_check(
        [&](ad::Tape& t, const ad::Var& h) {
            ParameterBinding c(store, t, false);
            return ad::sum_all(ad::sigmoid(edge_logits(h, c)));
        },
        random_tensor({4, 3}, 7), 1e-5);
    EXPECT_LT(err, 1e-6);
}

TEST(SampleMask, ZeroLogitEvalIsHalf) {
    ad::Tape t;
    for (double tau : {0.1, 1.0, 7.0})
        EXPECT_EQ(sample_mask(t.constant(Tensor({2, 2})), tau, Mode::eval, {}).value()[1], 0.5);
}

TEST(SampleMask, LargeLogitSaturates) {
    ad::Tape t;
    const auto m = sample_mask(t.constant(Tensor({8, 8}, 20.0)), 1.0, Mode::train, {1, 2, 3});
    for (std::size_t p = 0; p < 64; ++p) {
        const double g = rng::logistic({1, 2, 3, p});
        if (std::abs(g) <= 10.0) EXPECT_GT(m.value()[p], 0.9999);
    }
}

TEST(SampleMask, MonteCarloMeanIsHalf) {
    ad::Tape t;
    double total = 0.0;
    std::size_t count = 0;
    for (std::uint64_t sample = 0; count < 100000; ++sample) {
        const auto m = sample_mask(t.constant(Tensor({10, 10})), 1.0, Mode::train, {4, 0, sample});
        for (double v : m.value().data()) total += v;
        count += 100;
    }
    EXPECT_NEAR(total / static_cast<double>(count), 0.5, 0.01);
}

TEST(SampleMask, TrainNoiseFollowsTheKey) {
    ad::Tape t;
    const Tensor s = random_tensor({3, 3}, 1);
    const auto a = sample_mask(t.constant(s), 0.7, Mode::train, {1, 2, 3}).value();
    const auto b = sample_mask(t.constant(s), 0.7, Mode::train, {1, 2, 3}).value();
    const auto c = sample_mask(t.constant(s), 0.7, Mode::train, {1, 2, 4}).value();
    EXPECT_EQ(max_abs_diff(a, b), 0.0);
    EXPECT_GT(max_abs_diff(a, c), 0.0);
    for (std::size_t p = 0; p < 9; ++p)
        EXPECT_NEAR(a[p], sigmoid((s[p] + rng::logistic({1, 2, 3, p})) / 0.7), 1e-15);
}

TEST(SampleMask, EvalIsDeterministic) {
    ad::Tape t;
    const Tensor s = random_tensor({4, 4}, 2);
    const auto a = sample_mask(t.constant(s), 0.5, Mode::eval, {1, 0, 0}).value();
    const auto b = sample_mask(t.constant(s), 0.5, Mode::eval, {9, 9, 9}).value();
    EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(SampleMask, LowerTemperatureMovesTowardIndicator) {
    const Tensor s = random_tensor({6, 6}, 3, -3.0, 3.0);
    const NoiseKey key{7, 1, 2};
    Tensor prev;
    for (double tau : {5.0, 2.0, 1.0, 0.5, 0.2}) {
        ad::Tape t;
        const Tensor m = sample_mask(t.constant(s), tau, Mode::train, key).value();
        if (prev.numel() == m.numel() && tau < 5.0) {
            for (std::size_t p = 0; p < 36; ++p) {
                const double target = s[p] + rng::logistic({7, 1, 2, p}) > 0 ? 1.0 : 0.0;
                EXPECT_LE(std::abs(m[p] - target), std::abs(prev[p] - target) + 1e-15);
            }
        }
        prev = m;
    }
}

TEST(SampleMask, GradientReachesLogits) {
    const double err = ad::grad_check(
        [](ad::Tape&, const ad::Var& s) { return ad::sum_all(ad::mul(sample_mask(s, 0.8, Mode::train, {3, 1, 4}), s)); },
        random_tensor({3, 3}, 4), 1e-5);
    EXPECT_LT(err, 1e-6);
}

TEST(SampleMask, RejectsNonPositiveTemperature) {
    ad::Tape t;
    EXPECT_THROW(sample_mask(t.constant(Tensor({2, 2})), 0.0, Mode::eval, {}), ConfigError);
    EXPECT_THROW(sample_mask(t.constant(Tensor({2, 2})), -1.0, Mode::train, {}), ConfigError);
}

TEST(Symmetrize, Examples) {
    ad::Tape t;
    const auto m = symm_zero_diag(t.constant(Tensor::matrix({{0.2, 0.4}, {0.8, 0.6}}))).value();
    EXPECT_EQ(m.at(0, 0), 0.0);
    EXPECT_EQ(m.at(1, 1), 0.0);
    EXPECT_NEAR(m.at(0, 1), 0.6, 1e-15);
    EXPECT_NEAR(m.at(1, 0), 0.6, 1e-15);

    const Tensor fixed = Tensor::matrix({{0, 0.3, 0.1}, {0.3, 0, 0.9}, {0.1, 0.9, 0}});
    EXPECT_EQ(max_abs_diff(symm_zero_diag(t.constant(fixed)).value(), fixed), 0.0);

    const Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
    for (double v : symm_zero_diag(t.constant(id)).value().data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(symm_zero_diag(t.constant(Tensor({2, 3}))), ShapeError);
}

TEST(Symmetrize, AnyInputGivesSymmetricZeroDiagonal) {
    ad::Tape t;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto m = symm_zero_diag(t.constant(random_tensor({6, 6}, seed, 0.0, 1.0))).value();
        for (std::size_t i = 0; i < 6; ++i) {
            EXPECT_EQ(m.at(i, i), 0.0);
            for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(m.at(i, j), m.at(j, i));
        }
    }
}

TEST(KL, PriorMatchIsZero) {
    ad::Tape t;
    EXPECT_LT(kl_sparsity(t.constant(Tensor({5, 5}, 0.15)), SparsityPrior{0.15, 1e-8, 1.0}).value().item(), 1e-7);
    EXPECT_LT(kl_sparsity(t.constant(Tensor({5, 5}, 0.5)), SparsityPrior{0.5, 1e-8, 1.0}).value().item(), 1e-7);
}

TEST(KL, HandValue) {
    ad::Tape t;
    const double v = kl_sparsity(t.constant(Tensor::matrix({{0, 0.9}, {0.9, 0}})), SparsityPrior{0.3, 1e-8, 1.0}).value().item();
    EXPECT_NEAR(v, 0.9 * std::log(3.0) + 0.1 * std::log(1.0 / 7.0), 1e-4);
    EXPECT_NEAR(v, 0.79418, 1e-4);
}

TEST(KL, IgnoresDiagonal) {
    ad::Tape t;
    Tensor m({3, 3}, 0.15);
    const double base = kl_sparsity(t.constant(m), SparsityPrior{}).value().item();
    m.at(1, 1) = 0.99;
    EXPECT_EQ(kl_sparsity(t.constant(m), SparsityPrior{}).value().item(), base);
}

TEST(KL, GradientSignPullsTowardRetention) {
    const SparsityPrior prior{0.2, 1e-8, 1.0};
    ad::Tape t;
    const Tensor values = Tensor::matrix({{0, 0.05, 0.6}, {0.3, 0, 0.2}, {0.9, 0.1, 0}});
    const auto m = t.variable(values);
    t.backward(kl_sparsity(m, prior));
    const Tensor g = t.grad(m);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            if (i == j) continue;
            const double x = values.at(i, j);
            const double expected = std::log(x * (1 - prior.retention + prior.epsilon) / ((1 - x) * (prior.retention + prior.epsilon)));
            EXPECT_NEAR(g.at(i, j), expected / 6.0, 1e-12);
        }
}

TEST(KL, GradientMatchesFiniteDifferences) {
    const double err = ad::grad_check(
        [](ad::Tape&, const ad::Var& s) { return kl_sparsity(symm_zero_diag(ad::sigmoid(s)), SparsityPrior{}); },
        random_tensor({4, 4}, 8), 1e-5);
    EXPECT_LT(err, 1e-6);
}

TEST(Anneal, Schedule) {
    const TemperatureSchedule sched{5.0, 0.5, 0.9};
    EXPECT_EQ(anneal(sched, 0), 5.0);
    EXPECT_NEAR(anneal(sched, 1), 4.5, 1e-15);
    EXPECT_EQ(anneal(sched, 30), 0.5);
    EXPECT_EQ(anneal(TemperatureSchedule{3.0, 0.5, 1.0}, 100), 3.0);
    for (std::size_t e = 1; e < 60; ++e) EXPECT_LE(anneal(sched, e), anneal(sched, e - 1));
}

TEST(Validation, PriorAndSchedule) {
    EXPECT_THROW((SparsityPrior{0.0, 1e-8, 1.0}.validate()), ConfigError);
    EXPECT_THROW((SparsityPrior{1.0, 1e-8, 1.0}.validate()), ConfigError);
    EXPECT_THROW((SparsityPrior{0.2, 1e-3, 1.0}.validate()), ConfigError);
    EXPECT_THROW((SparsityPrior{0.2, 1e-8, -1.0}.validate()), ConfigError);
    EXPECT_NO_THROW(SparsityPrior{}.validate());
    EXPECT_THROW((TemperatureSchedule{0.4, 0.5, 0.9}.validate()), ConfigError);
    EXPECT_THROW((TemperatureSchedule{5.0, 0.0, 0.9}.validate()), ConfigError);
    EXPECT_THROW((TemperatureSchedule{5.0, 0.5, 1.5}.validate()), ConfigError);
    EXPECT_NO_THROW(TemperatureSchedule{}.validate());
}

TEST(RankEdges, SortedBySalienceWithPairTieBreak) {
    const Tensor m = Tensor::matrix({{0, 0.5, 0.5, 0.2}, {0.5, 0, 0.1, 0.5}, {0.5, 0.1, 0, 0.9}, {0.2, 0.5, 0.9, 0}});
    const Tensor a = Tensor::matrix({{0, 0.4, 0.4, 1.0}, {0.4, 0, 1.0, 0.4}, {0.4, 1.0, 0, 0.1}, {1.0, 0.4, 0.1, 0}});
    const auto edges = rank_edges(m, a);
    ASSERT_EQ(edges.size(), 6u);
    for (std::size_t k = 1; k < edges.size(); ++k) EXPECT_GE(edges[k - 1].salience, edges[k].salience);
    // (0,1), (0,2), (0,3) and (1,3) tie at 0.2 and keep pair order.
    const std::pair<std::size_t, std::size_t> order[] = {{0, 1}, {0, 2}, {0, 3}, {1, 3}, {1, 2}, {2, 3}};
    for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_EQ(edges[k].i, order[k].first) << k;
        EXPECT_EQ(edges[k].j, order[k].second) << k;
    }
    EXPECT_NEAR(edges[0].salience, 0.2, 1e-15);
    EXPECT_EQ(edges[0].mask, 0.5);
    EXPECT_EQ(edges[0].fused_weight, 0.4);
}

TEST(RankEdges, PruneThresholdDropsWeakEdges) {
    const Tensor m = Tensor::matrix({{0, 0.9, 0.1}, {0.9, 0, 0.5}, {0.1, 0.5, 0}});
    const Tensor a = Tensor::matrix({{0, 1, 1}, {1, 0, 1}, {1, 1, 0}});
    EXPECT_EQ(rank_edges(m, a, 0.2).size(), 2u);
    EXPECT_EQ(rank_edges(m, a).size(), 3u);
}

TEST(OffDiagonalMean, IgnoresDiagonal) {
    EXPECT_NEAR(off_diagonal_mean(Tensor::matrix({{1, 0.2}, {0.4, 1}})), 0.3, 1e-15);
}
