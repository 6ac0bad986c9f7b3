#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <numeric>

#include "seegraph/encoder.hpp"
#include "test_util.hpp"

using namespace seegraph;
using namespace seegraph::encoder;
using seegraph::testing::random_tensor;

namespace {

struct Fixture {
    AttentionParams p;
    ParameterStore store;

    explicit Fixture(std::size_t feature_dim, std::size_t d = 16, std::size_t heads = 4, std::uint64_t seed = 3) {
        p.model_dim = d;
        p.heads = heads;
        Stream s(seed);
        init_params(store, p, feature_dim, s);
        // Non-zero biases so the tests exercise them.
        for (auto& e : store.entries())
            if (e.name.ends_with(".b"))
                for (std::size_t i = 0; i < e.value.numel(); ++i) e.value[i] = 0.05 * static_cast<double>(i % 5) - 0.1;
    }
};

Tensor random_adjacency(std::size_t t_count, std::size_t n, std::uint64_t key) {
    Tensor a({t_count, n, n});
    Stream s(key);
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) a.at(t, i, j) = a.at(t, j, i) = s.next_uniform();
    return a;
}

Tensor permute_nodes(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t t_count = x.dim(0), n = x.dim(1), d = x.dim(2);
    Tensor out(x.shape());
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k) out.at(t, i, k) = x.at(t, perm[i], k);
    return out;
}

Tensor permute_adjacency(const Tensor& a, const std::vector<std::size_t>& perm) {
    const std::size_t t_count = a.dim(0), n = a.dim(1);
    Tensor out(a.shape());
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) out.at(t, i, j) = a.at(t, perm[i], perm[j]);
    return out;
}

}  // namespace

TEST(MhaTime, SingleTokenIsValueThenOutputProjection) {
    Fixture f(3);
    const Tensor x = random_tensor({1, 1, 16}, 1);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const auto y = mha_time(t.constant(x), f.p, b);

    std::vector<ad::Var> heads;
    for (std::size_t h = 0; h < 4; ++h) heads.push_back(ad::matmul(t.constant(x), b[AttentionParams::value(h)]));
    const auto expected =
        ad::add(ad::matmul(ad::concat(heads, 2), b[AttentionParams::out_weight]), b[AttentionParams::out_bias]);
    EXPECT_LT(max_abs_diff(y.value(), expected.value()), 1e-14);
}

TEST(MhaTime, AttentionRowsSumToOne) {
    Fixture f(3);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    std::vector<Tensor> weights;
    mha_time(t.constant(random_tensor({3, 7, 16}, 2)), f.p, b, false, &weights);
    ASSERT_EQ(weights.size(), 4u);
    for (const auto& w : weights) {
        EXPECT_EQ(w.shape(), (Shape{3, 7, 7}));
        for (std::size_t r = 0; r < 21; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 7; ++c) s += w[r * 7 + c];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(MhaTime, PermutingTokensPermutesOutputs) {
    Fixture f(3);
    const Tensor x = random_tensor({1, 6, 16}, 4);
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Tensor xp(x.shape());
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t k = 0; k < 16; ++k) xp.at(0, t, k) = x.at(0, perm[t], k);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor y = mha_time(t.constant(x), f.p, b).value();
    const Tensor yp = mha_time(t.constant(xp), f.p, b).value();
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(yp.at(0, r, k), y.at(0, perm[r], k), 1e-13);
}

TEST(MhaTime, EqualTokensStayEqual) {
    Fixture f(3);
    Tensor x({1, 5, 16});
    const Tensor tok = random_tensor({16}, 5);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t k = 0; k < 16; ++k) x.at(0, t, k) = tok[k];
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor y = mha_time(t.constant(x), f.p, b).value();
    for (std::size_t r = 1; r < 5; ++r)
        for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(y.at(0, r, k), y.at(0, 0, k), 1e-14);
}

TEST(MhaTime, IndivisibleHeadsIsConfigError) {
    AttentionParams p;
    p.model_dim = 10;
    p.heads = 4;
    EXPECT_THROW(p.head_dim(), ConfigError);
    ParameterStore store;
    Stream s(1);
    EXPECT_THROW(init_params(store, p, 3, s), ConfigError);
}

TEST(EncodeNodes, ShapeAndSingleWindow) {
    Fixture f(12);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    EXPECT_EQ(encode_nodes(t, random_tensor({7, 4, 12}, 6), f.p, b).shape(), (Shape{4, 16}));

    // T = 1: the mean over one token is that token.
    const Tensor x1 = random_tensor({1, 4, 12}, 7);
    const Tensor h = encode_nodes(t, x1, f.p, b).value();
    const auto tokens = ad::add(ad::matmul(t.constant(x1.reshaped({4, 1, 12})), b[AttentionParams::node_in_weight]),
                                b[AttentionParams::node_in_bias]);
    const Tensor direct = mha_time(tokens, f.p, b).value();
    EXPECT_LT(max_abs_diff(h, direct.reshaped({4, 16})), 1e-14);
}

TEST(EncodeNodes, IdenticalTrajectoriesGiveIdenticalRows) {
    Fixture f(5);
    Tensor x = random_tensor({6, 3, 5}, 8);
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t k = 0; k < 5; ++k) x.at(t, 2, k) = x.at(t, 0, k);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor h = encode_nodes(t, x, f.p, b).value();
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(h.at(0, k), h.at(2, k));
}

TEST(EncodeNodes, EquivariantUnderChannelPermutation) {
    Fixture f(5);
    const Tensor x = random_tensor({6, 5, 5}, 9);
    const std::vector<std::size_t> perm{4, 2, 0, 1, 3};
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor h = encode_nodes(t, x, f.p, b).value();
    const Tensor hp = encode_nodes(t, permute_nodes(x, perm), f.p, b).value();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(hp.at(i, k), h.at(perm[i], k), 1e-13);
}

TEST(EncodeEdges, SymmetricZeroDiagonalOpenUnitRange) {
    Fixture f(3);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor a = encode_edges(t, random_adjacency(5, 6, 10), f.p, b).value();
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            EXPECT_EQ(a.at(i, j), a.at(j, i));
            if (i == j) {
                EXPECT_EQ(a.at(i, j), 0.0);
            } else {
                EXPECT_GT(a.at(i, j), 0.0);
                EXPECT_LT(a.at(i, j), 1.0);
            }
        }
}

TEST(EncodeEdges, IdenticalTrajectoriesGiveIdenticalValues) {
    Fixture f(3);
    Tensor a = random_adjacency(5, 5, 11);
    for (std::size_t t = 0; t < 5; ++t) a.at(t, 3, 4) = a.at(t, 4, 3) = a.at(t, 0, 1);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor fused = encode_edges(t, a, f.p, b).value();
    EXPECT_EQ(fused.at(0, 1), fused.at(3, 4));
}

TEST(EncodeEdges, MatchesMhaOnLiftedTokens) {
    Fixture f(3);
    const Tensor a = random_adjacency(6, 5, 12);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor fused = encode_edges(t, a, f.p, b).value();
    for (const auto& [i, j] : upper_pairs(5)) {
        Tensor traj({1, 6, 1});
        for (std::size_t s = 0; s < 6; ++s) traj[s] = a.at(s, i, j);
        const auto tokens = ad::add(ad::matmul(t.constant(traj), b[AttentionParams::edge_in_weight]),
                                    b[AttentionParams::edge_in_bias]);
        const auto last = ad::slice(mha_time(tokens, f.p, b), 1, 5, 6);
        const auto logit =
            ad::add(ad::matmul(last, b[AttentionParams::readout_weight]), b[AttentionParams::readout_bias]);
        EXPECT_NEAR(fused.at(i, j), ad::sigmoid(logit).value().item(), 1e-13);
    }
}

TEST(EncodeEdges, EquivariantUnderNodePermutation) {
    Fixture f(3);
    const Tensor a = random_adjacency(4, 6, 13);
    const std::vector<std::size_t> perm{5, 3, 1, 0, 2, 4};
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor y = encode_edges(t, a, f.p, b).value();
    const Tensor yp = encode_edges(t, permute_adjacency(a, perm), f.p, b).value();
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(yp.at(i, j), y.at(perm[i], perm[j]), 1e-13);
}

TEST(Fuse, ShapesAndDuplicatedChannel) {
    Fixture f(12);
    Tensor x = random_tensor({7, 4, 12}, 14);
    Tensor a = random_adjacency(7, 4, 15);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const auto r = fuse(t, x, a, f.p, b);
    EXPECT_EQ(r.node_embeddings.shape(), (Shape{4, 16}));
    EXPECT_EQ(r.fused_adjacency.shape(), (Shape{4, 4}));

    // Copy channel 1 over channel 3 in both streams.
    for (std::size_t s = 0; s < 7; ++s) {
        for (std::size_t k = 0; k < 12; ++k) x.at(s, 3, k) = x.at(s, 1, k);
        for (std::size_t j = 0; j < 4; ++j)
            if (j != 1 && j != 3) a.at(s, 3, j) = a.at(s, j, 3) = a.at(s, 1, j);
    }
    const auto d = fuse(t, x, a, f.p, b);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(d.node_embeddings.value().at(1, k), d.node_embeddings.value().at(3, k));
    EXPECT_EQ(d.fused_adjacency.value().at(0, 1), d.fused_adjacency.value().at(0, 3));
}

TEST(Fuse, RejectsMismatchedStreams) {
    Fixture f(3);
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    EXPECT_THROW(fuse(t, random_tensor({5, 4, 3}, 1), random_adjacency(5, 3, 2), f.p, b), ShapeError);
}

TEST(Fuse, GradientMatchesFiniteDifferences) {
    Fixture f(3, 8, 2);
    const Tensor x = random_tensor({3, 4, 3}, 16);
    const Tensor a = random_adjacency(3, 4, 17);
    const Tensor wh = random_tensor({4, 8}, 18), wa = random_tensor({4, 4}, 19);
    auto loss = [&](ad::Tape& t, ParameterBinding& b) {
        const auto r = fuse(t, x, a, f.p, b);
        return ad::add(ad::sum_all(ad::mul(r.node_embeddings, t.constant(wh))),
                       ad::sum_all(ad::mul(r.fused_adjacency, t.constant(wa))));
    };
    ad::Tape t;
    ParameterBinding b(f.store, t, true);
    t.backward(loss(t, b));
    const auto grads = b.gradients();

    auto value_at = [&]() {
        ad::Tape u;
        ParameterBinding c(f.store, u, false);
        return loss(u, c).value().item();
    };
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t p = 0; p < f.store.size(); ++p) {
        Tensor& v = f.store.entries()[p].value;
        for (std::size_t i = 0; i < v.numel(); ++i) {
            const double keep = v[i];
            v[i] = keep + h;
            const double up = value_at();
            v[i] = keep - h;
            const double down = value_at();
            v[i] = keep;
            const double fd = (up - down) / (2 * h);
            worst = std::max(worst, std::abs(grads[p][i] - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Sharing, BothStreamsBindTheSameAttentionTensors) {
    Fixture f(3);
    ad::Tape t1, t2;
    ParameterBinding nodes(f.store, t1, true), edges(f.store, t2, true);
    encode_nodes(t1, random_tensor({3, 4, 3}, 1), f.p, nodes);
    encode_edges(t2, random_adjacency(3, 4, 2), f.p, edges);
    std::vector<std::string> shared{AttentionParams::out_weight, AttentionParams::out_bias};
    for (std::size_t h = 0; h < 4; ++h)
        for (auto name : {AttentionParams::query(h), AttentionParams::key(h), AttentionParams::value(h)}) shared.push_back(name);
    for (const auto& name : shared) {
        EXPECT_TRUE(nodes.bound().count(name)) << name;
        EXPECT_TRUE(edges.bound().count(name)) << name;
    }
    EXPECT_FALSE(nodes.bound().count(AttentionParams::edge_in_weight));
    EXPECT_FALSE(edges.bound().count(AttentionParams::node_in_weight));

    // Changing a shared tensor changes both streams.
    ad::Tape t;
    ParameterBinding b(f.store, t, false);
    const Tensor x = random_tensor({3, 4, 3}, 1), a = random_adjacency(3, 4, 2);
    const Tensor h0 = encode_nodes(t, x, f.p, b).value(), a0 = encode_edges(t, a, f.p, b).value();
    f.store.value(AttentionParams::value(0))[0] += 0.5;
    ad::Tape u;
    ParameterBinding c(f.store, u, false);
    EXPECT_GT(max_abs_diff(h0, encode_nodes(u, x, f.p, c).value()), 0.0);
    EXPECT_GT(max_abs_diff(a0, encode_edges(u, a, f.p, c).value()), 0.0);
}
