#pragma once

// Topology-aware positional encoding: eigenvectors of the symmetric
// normalized Laplacian of the fused adjacency, appended to node embeddings.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace seegraph::toppe {

inline std::vector<double> degree_matrix(const Tensor& adjacency) {
    const std::size_t n = adjacency.dim(0);
    std::vector<double> d(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i] += adjacency.at(i, j);
    return d;
}

/// L = I - D^{-1/2} A D^{-1/2}; isolated nodes (degree < 1e-12) get a zero
/// D^{-1/2} entry, hence L_ii = 1.
inline Tensor normalized_laplacian(const Tensor& adjacency) {
    if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) throw ShapeError("adjacency must be square");
    const std::size_t n = adjacency.dim(0);
    const auto deg = degree_matrix(adjacency);
    std::vector<double> inv_sqrt(n);
    for (std::size_t i = 0; i < n; ++i) inv_sqrt[i] = deg[i] < 1e-12 ? 0.0 : 1.0 / std::sqrt(deg[i]);
    Tensor l({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            l.at(i, j) = (i == j ? 1.0 : 0.0) - inv_sqrt[i] * adjacency.at(i, j) * inv_sqrt[j];
    return l;
}

struct Eigensystem {
    std::vector<double> values;  // ascending
    Tensor vectors;              // N x N, column k pairs with values[k]
};

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// 1e-12 (relative to the matrix norm when that exceeds 1) or 100 sweeps.
inline Eigensystem eig_symmetric(const Tensor& matrix) {
    if (matrix.rank() != 2 || matrix.dim(0) != matrix.dim(1)) throw ShapeError("eig_symmetric needs a square matrix");
    const std::size_t n = matrix.dim(0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(matrix.at(i, j) - matrix.at(j, i)) > 1e-10) throw ContractError("eig_symmetric input is not symmetric");

    Tensor a = matrix;
    Tensor v({n, n});
    for (std::size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) s += a.at(i, j) * a.at(i, j);
        return std::sqrt(s);
    };
    double total = 0.0;
    for (double x : a.data()) total += x * x;
    const double tol = 1e-12 * std::max(1.0, std::sqrt(total));

    bool converged = off_norm() < tol;
    for (int sweep = 0; sweep < 100 && !converged; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        converged = off_norm() < tol;
    }
    if (!converged) throw NumericalError("Jacobi eigensolver did not converge in 100 sweeps");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a.at(x, x) < a.at(y, y); });
    Eigensystem out{std::vector<double>(n), Tensor({n, n})};
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a.at(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors.at(i, k) = v.at(i, order[k]);
    }
    return out;
}

struct LaplacianPE {
    Tensor coordinates;          // N x d_pe
    std::vector<double> values;  // selected eigenvalues, ascending; shorter than d_pe when padded
};

/// +1 or -1 so that sign * u has a positive sum of cubes. The rule ignores
/// node order, so relabeling channels cannot flip a column. Vectors whose
/// cubes cancel (e.g. [1, -1] / sqrt 2) fall back to making the first
/// component with |x| > 1e-8 positive.
inline double eigenvector_sign(const Tensor& vectors, std::size_t col) {
    const std::size_t n = vectors.dim(0);
    double cubes = 0.0;
    for (std::size_t i = 0; i < n; ++i) cubes += std::pow(vectors.at(i, col), 3);
    if (std::abs(cubes) > 1e-8) return cubes > 0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = vectors.at(i, col);
        if (std::abs(x) > 1e-8) return x > 0 ? 1.0 : -1.0;
    }
    return 1.0;
}

/// Eigenvectors of the d_pe smallest eigenvalues above zero_threshold. Every
/// near-zero eigenvalue is skipped (one per connected component). Columns are
/// sign-fixed by eigenvector_sign; missing columns are zero.
inline LaplacianPE laplacian_pe(const Eigensystem& eig, std::size_t d_pe, double zero_threshold = 1e-8) {
    if (d_pe == 0) throw ConfigError("laplacian_pe needs d_pe >= 1");
    const std::size_t n = eig.values.size();
    LaplacianPE pe{Tensor({n, d_pe}), {}};
    std::size_t col = 0;
    for (std::size_t k = 0; k < n && col < d_pe; ++k) {
        if (eig.values[k] <= zero_threshold) continue;
        const double sign = eigenvector_sign(eig.vectors, k);
        for (std::size_t i = 0; i < n; ++i) pe.coordinates.at(i, col) = sign * eig.vectors.at(i, k);
        pe.values.push_back(eig.values[k]);
        ++col;
    }
    return pe;
}

inline LaplacianPE laplacian_pe(const Tensor& laplacian, std::size_t d_pe, double zero_threshold = 1e-8) {
    return laplacian_pe(eig_symmetric(laplacian), d_pe, zero_threshold);
}

/// [H | P] along features. P enters as a constant: no gradient flows through
/// the eigendecomposition.
inline ad::Var concat_pe(const ad::Var& embeddings, const Tensor& coordinates) {
    if (embeddings.shape().size() != 2 || coordinates.rank() != 2 || embeddings.shape()[0] != coordinates.dim(0))
        throw ShapeError("concat_pe row mismatch: " + shape_str(embeddings.shape()) + " vs " + shape_str(coordinates.shape()));
    return ad::concat({embeddings, embeddings.tape().constant(coordinates)}, 1);
}

}  // namespace seegraph::toppe
