#pragma once

// Node-guided sparse edge mask: pair logits from endpoint embeddings,
// binary-concrete sampling, symmetrization and the KL pull toward a
// low-retention Bernoulli prior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "params.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace seegraph::mask {

struct SparsityPrior {
    double retention = 0.15;
    double epsilon = 1e-8;
    double weight = 1.0;

    void validate() const {
        if (!(retention > 0.0 && retention < 1.0)) throw ConfigError("retention rate must lie in (0, 1)");
        if (!(epsilon > 0.0 && epsilon <= 1e-6)) throw ConfigError("KL epsilon must lie in (0, 1e-6]");
        if (!(weight >= 0.0)) throw ConfigError("KL weight must be non-negative");
    }
};

struct TemperatureSchedule {
    double start = 5.0;
    double min = 0.5;
    double decay = 0.9;

    void validate() const {
        if (!(min > 0.0) || !(start >= min)) throw ConfigError("temperature schedule needs start >= min > 0");
        if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("temperature decay must lie in (0, 1]");
    }
};

inline double anneal(const TemperatureSchedule& schedule, std::size_t epoch) {
    return std::max(schedule.min, schedule.start * std::pow(schedule.decay, static_cast<double>(epoch)));
}

enum class Mode { train, eval };

/// Identifies one forward pass; pair (i, j) draws from key (seed, epoch, sample, i*N+j).
struct NoiseKey {
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;
    std::uint64_t sample = 0;
};

struct EdgeMask {
    ad::Var logits;     // S
    ad::Var sampled;    // M
    ad::Var symmetric;  // M~
    double tau = 1.0;
};

inline constexpr const char* kHiddenWeight = "mask.mlp1.W";
inline constexpr const char* kHiddenBias = "mask.mlp1.b";
inline constexpr const char* kOutWeight = "mask.mlp2.W";
inline constexpr const char* kOutBias = "mask.mlp2.b";
inline constexpr const char* kGlobalBias = "mask.global_bias";

/// Pair MLP linear(2D' -> D') -> ELU -> linear(D' -> 1). With pair_wise off
/// the extractor is a single learned logit shared by every pair.
inline void init_params(ParameterStore& store, std::size_t width, bool pair_wise, Stream& stream) {
    if (!pair_wise) {
        store.add_zeros(kGlobalBias, {1});
        return;
    }
    store.add_uniform(kHiddenWeight, {2 * width, width}, 2 * width, stream);
    store.add_zeros(kHiddenBias, {width});
    store.add_uniform(kOutWeight, {width, 1}, width, stream);
    store.add_zeros(kOutBias, {1});
}

/// s_ij = MLP([h_i | h_j]) for every ordered pair. The first layer on the
/// concatenation is split as W_top h_i + W_bottom h_j, which is the same map.
inline ad::Var edge_logits(const ad::Var& nodes, ParameterBinding& params) {
    const Shape& s = nodes.shape();
    if (s.size() != 2) throw ShapeError("edge_logits expects N x D'");
    const std::size_t n = s[0], width = s[1];
    const ad::Var w1 = params[kHiddenWeight];
    if (w1.shape()[0] != 2 * width) throw ShapeError("mask MLP width does not match node embeddings");
    const ad::Var from_i = ad::matmul(nodes, ad::slice(w1, 0, 0, width));
    const ad::Var from_j = ad::matmul(nodes, ad::slice(w1, 0, width, 2 * width));
    const ad::Var hidden = ad::elu(ad::add(ad::add(ad::reshape(from_i, {n, 1, width}), ad::reshape(from_j, {1, n, width})),
                                           params[kHiddenBias]));
    const ad::Var out = ad::add(ad::matmul(hidden, params[kOutWeight]), params[kOutBias]);
    return ad::reshape(out, {n, n});
}

inline ad::Var global_logits(ParameterBinding& params, std::size_t n) {
    return ad::broadcast_to(ad::reshape(params[kGlobalBias], {1, 1}), {n, n});
}

/// Train: m = sigmoid((s + g) / tau) with g ~ Logistic(0, 1). Eval: the noise
/// sits at its median, m = sigmoid(s / tau).
inline ad::Var sample_mask(const ad::Var& logits, double tau, Mode mode, const NoiseKey& key) {
    if (!(tau > 0.0)) throw ConfigError("mask temperature must be positive");
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != s[1]) throw ShapeError("mask logits must be square");
    if (mode == Mode::eval) return ad::sigmoid(ad::scale(logits, 1.0 / tau));
    const std::size_t n = s[0];
    Tensor noise({n, n});
    for (std::size_t p = 0; p < n * n; ++p) noise[p] = rng::logistic({key.seed, key.epoch, key.sample, p});
    return ad::sigmoid(ad::scale(ad::add(logits, logits.tape().constant(std::move(noise))), 1.0 / tau));
}

inline Tensor off_diagonal_ones(std::size_t n) {
    Tensor t({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 0.0;
    return t;
}

/// (M + M^T) / 2 with the diagonal set to exactly zero.
inline ad::Var symm_zero_diag(const ad::Var& m) {
    const Shape& s = m.shape();
    if (s.size() != 2 || s[0] != s[1]) throw ShapeError("symm_zero_diag needs a square matrix");
    const ad::Var avg = ad::scale(ad::add(m, ad::transpose(m)), 0.5);
    return ad::mul(avg, m.tape().constant(off_diagonal_ones(s[0])));
}

inline std::vector<std::int64_t> off_diagonal_index(std::size_t n) {
    std::vector<std::int64_t> idx;
    idx.reserve(n * (n - 1));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) idx.push_back(static_cast<std::int64_t>(i * n + j));
    return idx;
}

/// Mean over the N(N-1) off-diagonal entries of
/// m log(m / (r + eps)) + (1 - m) log((1 - m) / (1 - r + eps)).
/// Entries are clipped to [1e-12, 1 - 1e-12] so a saturated sigmoid that
/// rounds to exactly 0 or 1 stays inside the log domain.
inline ad::Var kl_sparsity(const ad::Var& mask, const SparsityPrior& prior) {
    const Shape& s = mask.shape();
    if (s.size() != 2 || s[0] != s[1] || s[0] < 2) throw ShapeError("kl_sparsity needs a square matrix with N >= 2");
    const std::size_t n = s[0];
    ad::Var m = ad::gather(mask, off_diagonal_index(n), {n * (n - 1)});
    constexpr double kClip = 1e-12;
    const Tensor& mv = m.value();
    if (std::any_of(mv.data().begin(), mv.data().end(), [](double v) { return v < kClip || v > 1.0 - kClip; })) {
        Tensor clipped = mv;
        for (double& v : clipped.storage()) v = std::clamp(v, kClip, 1.0 - kClip);
        // Straight replacement of the saturated entries; their gradient is
        // negligible (sigmoid derivative < 1e-12) and is dropped.
        Tensor keep(mv.shape());
        for (std::size_t k = 0; k < keep.numel(); ++k) keep[k] = clipped[k] == mv[k] ? 1.0 : 0.0;
        Tensor fixed(mv.shape());
        for (std::size_t k = 0; k < fixed.numel(); ++k) fixed[k] = keep[k] == 1.0 ? 0.0 : clipped[k];
        m = ad::add(ad::mul(m, m.tape().constant(std::move(keep))), m.tape().constant(std::move(fixed)));
    }
    const ad::Var one_minus = ad::add_scalar(ad::scale(m, -1.0), 1.0);
    const double log_r = std::log(prior.retention + prior.epsilon);
    const double log_not_r = std::log(1.0 - prior.retention + prior.epsilon);
    const ad::Var keep_term = ad::mul(m, ad::add_scalar(ad::log(m), -log_r));
    const ad::Var drop_term = ad::mul(one_minus, ad::add_scalar(ad::log(one_minus), -log_not_r));
    return ad::mean_all(ad::add(keep_term, drop_term));
}

inline double off_diagonal_mean(const Tensor& m) {
    const std::size_t n = m.dim(0);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) s += m.at(i, j);
    return s / static_cast<double>(n * (n - 1));
}

// ---------------------------------------------------------------------------
// Explanations.

struct ExplainedEdge {
    std::size_t i = 0, j = 0;
    double mask = 0.0;
    double fused_weight = 0.0;
    double salience = 0.0;
};

/// Upper-triangle edges scored by eval-mode mask times fused weight, sorted
/// by salience descending with ties broken by (i, j) ascending. Edges whose
/// salience is not above `prune_threshold` are dropped when the threshold is
/// positive.
inline std::vector<ExplainedEdge> rank_edges(const Tensor& eval_mask, const Tensor& fused, double prune_threshold = 0.0) {
    const std::size_t n = eval_mask.dim(0);
    std::vector<ExplainedEdge> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double m = eval_mask.at(i, j), a = fused.at(i, j);
            if (prune_threshold > 0.0 && !(m * a > prune_threshold)) continue;
            edges.push_back({i, j, m, a, m * a});
        }
    std::stable_sort(edges.begin(), edges.end(), [](const ExplainedEdge& x, const ExplainedEdge& y) {
        if (x.salience != y.salience) return x.salience > y.salience;
        return x.i != y.i ? x.i < y.i : x.j < y.j;
    });
    return edges;
}

}  // namespace seegraph::mask
