#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "seegraph/toppe.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace seegraph;
using namespace seegraph::toppe;
using seegraph::testing::cubic_eigenvalues;
using seegraph::testing::random_symmetric;
using seegraph::testing::random_tensor;

namespace {

Tensor random_weighted_graph(std::size_t n, std::uint64_t key) {
    Tensor a = random_tensor({n, n}, key, 0.05, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        a.at(i, i) = 0.0;
        for (std::size_t j = 0; j < i; ++j) a.at(i, j) = a.at(j, i);
    }
    return a;
}

}  // namespace

TEST(Degree, RowSums) {
    EXPECT_EQ(degree_matrix(Tensor::matrix({{0, 1, 1}, {1, 0, 1}, {1, 1, 0}})), (std::vector<double>{2, 2, 2}));
    EXPECT_EQ(degree_matrix(Tensor({3, 3})), (std::vector<double>{0, 0, 0}));
    EXPECT_EQ(degree_matrix(Tensor::matrix({{0, 0.5}, {0.5, 0}})), (std::vector<double>{0.5, 0.5}));
}

TEST(Laplacian, TwoNodeEdge) {
    const auto l = normalized_laplacian(Tensor::matrix({{0, 1}, {1, 0}}));
    EXPECT_LT(max_abs_diff(l, Tensor::matrix({{1, -1}, {-1, 1}})), 1e-15);
}

TEST(Laplacian, TriangleSpectrum) {
    const auto l = normalized_laplacian(Tensor::matrix({{0, 1, 1}, {1, 0, 1}, {1, 1, 0}}));
    EXPECT_LT(max_abs_diff(l, Tensor::matrix({{1, -0.5, -0.5}, {-0.5, 1, -0.5}, {-0.5, -0.5, 1}})), 1e-15);
    const auto eig = eig_symmetric(l);
    EXPECT_NEAR(eig.values[0], 0.0, 1e-12);
    EXPECT_NEAR(eig.values[1], 1.5, 1e-12);
    EXPECT_NEAR(eig.values[2], 1.5, 1e-12);
}

TEST(Laplacian, ZeroAdjacencyIsIdentity) {
    const auto l = normalized_laplacian(Tensor({4, 4}));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(l.at(i, j), i == j ? 1.0 : 0.0);
}

TEST(Laplacian, SpectrumWithinZeroAndTwo) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto eig = eig_symmetric(normalized_laplacian(random_weighted_graph(7, seed)));
        for (double v : eig.values) {
            EXPECT_GE(v, -1e-8);
            EXPECT_LE(v, 2.0 + 1e-8);
        }
    }
}

TEST(Laplacian, NullVectorIsSqrtDegree) {
    const Tensor a = random_weighted_graph(6, 42);
    const auto eig = eig_symmetric(normalized_laplacian(a));
    EXPECT_NEAR(eig.values[0], 0.0, 1e-8);
    const auto deg = degree_matrix(a);
    double norm = 0.0;
    for (double d : deg) norm += d;
    norm = std::sqrt(norm);
    const double sign = eig.vectors.at(0, 0) > 0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(sign * eig.vectors.at(i, 0), std::sqrt(deg[i]) / norm, 1e-8);
}

TEST(Eig, Identity) {
    Tensor id({5, 5});
    for (std::size_t i = 0; i < 5; ++i) id.at(i, i) = 1.0;
    for (double v : eig_symmetric(id).values) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Eig, TwoByTwo) {
    const auto eig = eig_symmetric(Tensor::matrix({{1, -1}, {-1, 1}}));
    EXPECT_NEAR(eig.values[0], 0.0, 1e-14);
    EXPECT_NEAR(eig.values[1], 2.0, 1e-14);
    EXPECT_NEAR(std::abs(eig.vectors.at(0, 0)), 1.0 / std::sqrt(2.0), 1e-14);
    EXPECT_NEAR(eig.vectors.at(0, 0), eig.vectors.at(1, 0), 1e-14);
}

TEST(Eig, ReconstructsRandomSymmetric) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Tensor m = random_symmetric(8, seed);
        const auto eig = eig_symmetric(m);
        EXPECT_TRUE(std::is_sorted(eig.values.begin(), eig.values.end()));
        double recon = 0.0, ortho = 0.0;
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j) {
                double r = 0.0, o = 0.0;
                for (std::size_t k = 0; k < 8; ++k) {
                    r += eig.vectors.at(i, k) * eig.values[k] * eig.vectors.at(j, k);
                    o += eig.vectors.at(k, i) * eig.vectors.at(k, j);
                }
                recon = std::max(recon, std::abs(r - m.at(i, j)));
                ortho = std::max(ortho, std::abs(o - (i == j ? 1.0 : 0.0)));
            }
        EXPECT_LT(recon, 1e-8);
        EXPECT_LT(ortho, 1e-8);
    }
}

TEST(Eig, AgreesWithCubicFormula) {
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        const Tensor m = random_symmetric(3, seed * 13);
        const auto eig = eig_symmetric(m);
        const auto oracle = cubic_eigenvalues(m);
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(eig.values[k], oracle[k], 1e-6);
    }
}

TEST(Eig, RejectsAsymmetricInput) {
    EXPECT_THROW(eig_symmetric(Tensor::matrix({{1, 2}, {0, 1}})), ContractError);
}

TEST(PE, SignIgnoresNodeOrder) {
    const Tensor a = random_weighted_graph(7, 31);
    const std::size_t perm[] = {6, 2, 4, 0, 1, 5, 3};
    Tensor ap(a.shape());
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j) ap.at(i, j) = a.at(perm[i], perm[j]);
    const auto pe = laplacian_pe(normalized_laplacian(a), 4);
    const auto pp = laplacian_pe(normalized_laplacian(ap), 4);
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(pp.coordinates.at(i, c), pe.coordinates.at(perm[i], c), 1e-10);
}

TEST(PE, TwoNodeSignConvention) {
    const auto pe = laplacian_pe(normalized_laplacian(Tensor::matrix({{0, 1}, {1, 0}})), 1);
    EXPECT_NEAR(pe.coordinates.at(0, 0), 1.0 / std::sqrt(2.0), 1e-14);
    EXPECT_NEAR(pe.coordinates.at(1, 0), -1.0 / std::sqrt(2.0), 1e-14);
    ASSERT_EQ(pe.values.size(), 1u);
    EXPECT_NEAR(pe.values[0], 2.0, 1e-14);
}

TEST(PE, PadsWithZeroColumns) {
    const auto pe = laplacian_pe(normalized_laplacian(Tensor::matrix({{0, 1, 1}, {1, 0, 1}, {1, 1, 0}})), 4);
    EXPECT_EQ(pe.coordinates.shape(), (Shape{3, 4}));
    EXPECT_EQ(pe.values.size(), 2u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(pe.coordinates.at(i, 2), 0.0);
        EXPECT_EQ(pe.coordinates.at(i, 3), 0.0);
    }
}

TEST(PE, SkipsEveryComponentNullVector) {
    const Tensor a = Tensor::matrix({{0, 1, 0, 0}, {1, 0, 0, 0}, {0, 0, 0, 1}, {0, 0, 1, 0}});
    const auto eig = eig_symmetric(normalized_laplacian(a));
    EXPECT_NEAR(eig.values[0], 0.0, 1e-12);
    EXPECT_NEAR(eig.values[1], 0.0, 1e-12);
    const auto pe = laplacian_pe(normalized_laplacian(a), 1);
    ASSERT_EQ(pe.values.size(), 1u);
    EXPECT_NEAR(pe.values[0], 2.0, 1e-12);
}

TEST(PE, ColumnsOrthonormalAndSignFixed) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto pe = laplacian_pe(normalized_laplacian(random_weighted_graph(9, seed)), 4);
        EXPECT_TRUE(std::is_sorted(pe.values.begin(), pe.values.end()));
        for (double v : pe.values) EXPECT_GT(v, 1e-8);
        for (std::size_t a = 0; a < 4; ++a) {
            for (std::size_t b = 0; b < 4; ++b) {
                double dot = 0.0;
                for (std::size_t i = 0; i < 9; ++i) dot += pe.coordinates.at(i, a) * pe.coordinates.at(i, b);
                EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-8);
            }
            double cubes = 0.0;
            for (std::size_t i = 0; i < 9; ++i) cubes += std::pow(pe.coordinates.at(i, a), 3);
            EXPECT_GT(cubes, 0.0);
        }
    }
}

TEST(PE, InvariantToEigenvectorNegation) {
    const auto eig = eig_symmetric(normalized_laplacian(random_weighted_graph(6, 77)));
    const auto pe = laplacian_pe(eig, 3);
    for (std::size_t col = 0; col < 6; ++col) {
        Eigensystem flipped = eig;
        for (std::size_t i = 0; i < 6; ++i) flipped.vectors.at(i, col) = -flipped.vectors.at(i, col);
        EXPECT_EQ(max_abs_diff(laplacian_pe(flipped, 3).coordinates, pe.coordinates), 0.0) << "column " << col;
    }
}

TEST(ConcatPE, WidthAndIdentity) {
    ad::Tape t;
    const Tensor h = random_tensor({5, 16}, 1);
    const auto hv = t.variable(h);
    const auto out = concat_pe(hv, random_tensor({5, 4}, 2));
    EXPECT_EQ(out.shape(), (Shape{5, 20}));
    const Tensor head = ad::slice(out, 1, 0, 16).value();
    for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_EQ(head[i], h[i]);

    const auto zeros = concat_pe(hv, Tensor({5, 4})).value();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 16; k < 20; ++k) EXPECT_EQ(zeros.at(i, k), 0.0);
    EXPECT_THROW(concat_pe(hv, Tensor({4, 4})), ShapeError);
}

TEST(ConcatPE, GradientReachesEmbeddingsOnly) {
    ad::Tape t;
    const auto hv = t.variable(random_tensor({3, 2}, 3));
    const auto out = concat_pe(hv, random_tensor({3, 2}, 4));
    t.backward(ad::sum_all(ad::mul(out, out)));
    const Tensor g = t.grad(hv);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(g[i], 2 * hv.value()[i]);
    // Only the embeddings and the product are recorded; the PE is a constant leaf.
    for (const auto& e : t.entries()) EXPECT_STRNE(e.op, "eig");
}
