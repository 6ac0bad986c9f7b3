#pragma once

// Dual-trajectory temporal encoder. Node trajectories (per-channel spectra
// over windows) and edge trajectories (per-pair coupling over windows) run
// through one multi-head self-attention block along the time axis; only the
// input projections and the edge readout are stream-specific.

#include <cmath>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "params.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace seegraph::encoder {

struct AttentionParams {
    std::size_t model_dim = 32;
    std::size_t heads = 4;

    std::size_t head_dim() const {
        if (heads == 0 || model_dim % heads != 0)
            throw ConfigError("model dim " + std::to_string(model_dim) + " not divisible by " + std::to_string(heads) + " heads");
        return model_dim / heads;
    }

    static std::string query(std::size_t k) { return "enc.attn.q" + std::to_string(k); }
    static std::string key(std::size_t k) { return "enc.attn.k" + std::to_string(k); }
    static std::string value(std::size_t k) { return "enc.attn.v" + std::to_string(k); }
    static constexpr const char* out_weight = "enc.attn.out.W";
    static constexpr const char* out_bias = "enc.attn.out.b";
    static constexpr const char* node_in_weight = "enc.node_in.W";
    static constexpr const char* node_in_bias = "enc.node_in.b";
    static constexpr const char* edge_in_weight = "enc.edge_in.W";
    static constexpr const char* edge_in_bias = "enc.edge_in.b";
    static constexpr const char* readout_weight = "enc.edge_readout.W";
    static constexpr const char* readout_bias = "enc.edge_readout.b";
};

inline void init_params(ParameterStore& store, const AttentionParams& p, std::size_t node_feature_dim, Stream& stream) {
    const std::size_t d = p.model_dim, dk = p.head_dim();
    store.add_uniform(AttentionParams::node_in_weight, {node_feature_dim, d}, node_feature_dim, stream);
    store.add_zeros(AttentionParams::node_in_bias, {d});
    store.add_uniform(AttentionParams::edge_in_weight, {1, d}, 1, stream);
    store.add_zeros(AttentionParams::edge_in_bias, {d});
    for (std::size_t k = 0; k < p.heads; ++k) {
        store.add_uniform(AttentionParams::query(k), {d, dk}, d, stream);
        store.add_uniform(AttentionParams::key(k), {d, dk}, d, stream);
        store.add_uniform(AttentionParams::value(k), {d, dk}, d, stream);
    }
    store.add_uniform(AttentionParams::out_weight, {d, d}, d, stream);
    store.add_zeros(AttentionParams::out_bias, {d});
    store.add_uniform(AttentionParams::readout_weight, {d, 1}, d, stream);
    store.add_zeros(AttentionParams::readout_bias, {1});
}

namespace detail {

// softmax(q k^T / sqrt(d_k)) v per head, heads concatenated, then W^O.
inline ad::Var attend(const std::vector<ad::Var>& q, const std::vector<ad::Var>& k, const std::vector<ad::Var>& v,
                      const AttentionParams& p, ParameterBinding& params, std::vector<Tensor>* attention) {
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
    std::vector<ad::Var> heads;
    heads.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        const ad::Var weights = ad::softmax(ad::scale(ad::matmul(q[h], ad::transpose(k[h])), inv_sqrt_dk), 2);
        if (attention) attention->push_back(weights.value());
        heads.push_back(ad::matmul(weights, v[h]));
    }
    const ad::Var merged = heads.size() == 1 ? heads.front() : ad::concat(heads, 2);
    return ad::add(ad::matmul(merged, params[AttentionParams::out_weight]), params[AttentionParams::out_bias]);
}

}  // namespace detail

/// Multi-head self-attention over the time axis of (B x T x D) tokens, no
/// causal mask and no positional encoding. With last_query_only the result
/// holds only the output at the final time index (B x 1 x D); keys and values
/// still span all T tokens. `attention`, when given, receives one
/// (B x Tq x T) weight tensor per head.
inline ad::Var mha_time(const ad::Var& tokens, const AttentionParams& p, ParameterBinding& params,
                        bool last_query_only = false, std::vector<Tensor>* attention = nullptr) {
    const Shape& s = tokens.shape();
    if (s.size() != 3 || s[2] != p.model_dim)
        throw ShapeError("mha_time expects B x T x " + std::to_string(p.model_dim) + ", got " + shape_str(s));
    const std::size_t t_count = s[1];
    if (t_count == 0) throw ShapeError("mha_time needs at least one token");
    const ad::Var query_tokens = last_query_only ? ad::slice(tokens, 1, t_count - 1, t_count) : tokens;
    std::vector<ad::Var> q, k, v;
    for (std::size_t h = 0; h < p.heads; ++h) {
        q.push_back(ad::matmul(query_tokens, params[AttentionParams::query(h)]));
        k.push_back(ad::matmul(tokens, params[AttentionParams::key(h)]));
        v.push_back(ad::matmul(tokens, params[AttentionParams::value(h)]));
    }
    return detail::attend(q, k, v, p, params, attention);
}

/// H-bar: per channel, project the T x d trajectory, attend over time and
/// average the T output tokens. Input X is T x N x d.
inline ad::Var encode_nodes(ad::Tape& tape, const Tensor& x, const AttentionParams& p, ParameterBinding& params) {
    if (x.rank() != 3) throw ShapeError("node trajectories must be T x N x d");
    const std::size_t t_count = x.dim(0), n = x.dim(1), d = x.dim(2);
    Tensor per_channel({n, t_count, d});
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(x.data().data() + (t * n + i) * d, d, per_channel.data().data() + (i * t_count + t) * d);
    const ad::Var tokens = ad::add(ad::matmul(tape.constant(std::move(per_channel)), params[AttentionParams::node_in_weight]),
                                   params[AttentionParams::node_in_bias]);
    return ad::mean(mha_time(tokens, p, params), 1);
}

/// Upper-triangle pair order (i < j, row-major) used by the edge stream.
inline std::vector<std::pair<std::size_t, std::size_t>> upper_pairs(std::size_t n) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    return pairs;
}

/// A-bar: per unordered pair, lift the scalar trajectory to D, attend over
/// time, read the final token out to a scalar and squash it into (0, 1).
/// Written symmetrically with a zero diagonal. Input A is T x N x N.
///
/// Edge tokens are the affine lift a_t w + b of a scalar, so each head's
/// projection is evaluated as a_t (w W) + b W. This is the same map as
/// mha_time on the lifted tokens without materializing P x T x D tokens.
inline ad::Var encode_edges(ad::Tape& tape, const Tensor& a, const AttentionParams& p, ParameterBinding& params,
                            std::vector<Tensor>* attention = nullptr) {
    if (a.rank() != 3 || a.dim(1) != a.dim(2)) throw ShapeError("edge trajectories must be T x N x N");
    const std::size_t t_count = a.dim(0), n = a.dim(1), d = p.model_dim;
    const auto pairs = upper_pairs(n);
    Tensor traj({pairs.size(), t_count, 1});
    for (std::size_t q = 0; q < pairs.size(); ++q)
        for (std::size_t t = 0; t < t_count; ++t) traj[q * t_count + t] = a.at(t, pairs[q].first, pairs[q].second);
    const ad::Var all = tape.constant(std::move(traj));
    const ad::Var last = ad::slice(all, 1, t_count - 1, t_count);

    const ad::Var lift = params[AttentionParams::edge_in_weight];
    const ad::Var offset = ad::reshape(params[AttentionParams::edge_in_bias], {1, d});
    auto project = [&](const ad::Var& scalars, const std::string& name) {
        const ad::Var w = params[name];
        return ad::add(ad::matmul(scalars, ad::matmul(lift, w)), ad::matmul(offset, w));
    };
    std::vector<ad::Var> q, k, v;
    for (std::size_t h = 0; h < p.heads; ++h) {
        q.push_back(project(last, AttentionParams::query(h)));
        k.push_back(project(all, AttentionParams::key(h)));
        v.push_back(project(all, AttentionParams::value(h)));
    }
    const ad::Var out = detail::attend(q, k, v, p, params, attention);
    const ad::Var scalar = ad::add(ad::matmul(out, params[AttentionParams::readout_weight]), params[AttentionParams::readout_bias]);
    const ad::Var fused = ad::sigmoid(ad::reshape(scalar, {pairs.size()}));

    std::vector<std::int64_t> index(n * n, -1);
    for (std::size_t q = 0; q < pairs.size(); ++q) {
        index[pairs[q].first * n + pairs[q].second] = static_cast<std::int64_t>(q);
        index[pairs[q].second * n + pairs[q].first] = static_cast<std::int64_t>(q);
    }
    return ad::gather(fused, std::move(index), {n, n});
}

struct FusedRepresentation {
    ad::Var node_embeddings;  // N x D
    ad::Var fused_adjacency;  // N x N
};

inline FusedRepresentation fuse(ad::Tape& tape, const Tensor& x, const Tensor& a, const AttentionParams& p,
                                ParameterBinding& params) {
    if (x.dim(0) != a.dim(0) || x.dim(1) != a.dim(1)) throw ShapeError("node and edge trajectories disagree on T or N");
    return {encode_nodes(tape, x, p, params), encode_edges(tape, a, p, params)};
}

}  // namespace seegraph::encoder
