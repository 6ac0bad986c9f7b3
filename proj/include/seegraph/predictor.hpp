#pragma once

// Gated graph predictor and the end-to-end model: the mask gates the fused
// connectivity, graph attention runs on the gated graph, mean pooling and a
// linear head produce class probabilities.

#include <cmath>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "maskext.hpp"
#include "model_config.hpp"
#include "params.hpp"
#include "random.hpp"
#include "signal.hpp"
#include "toppe.hpp"

namespace seegraph::predictor {

/// A-hat = M~ (.) A-bar.
inline ad::Var gate_adjacency(const ad::Var& mask, const ad::Var& fused) {
    if (mask.shape() != fused.shape()) throw ShapeError("gate shapes differ: " + shape_str(mask.shape()) + " vs " + shape_str(fused.shape()));
    return ad::mul(mask, fused);
}

struct GatLayerParams {
    std::string weight;     // in x out
    std::string attention;  // 2*out x 1: source half, then neighbor half
    double slope = 0.2;

    static GatLayerParams layer(std::size_t l, double slope) {
        return {"gat" + std::to_string(l) + ".W", "gat" + std::to_string(l) + ".a", slope};
    }
};

/// One graph attention layer on the gated graph. Neighborhood of i is
/// {j != i : a_ij > 0} plus i itself with unit gate; messages are scaled by
/// both the gate a_ij and the attention weight alpha_ij, followed by ELU.
inline ad::Var gat_layer(const ad::Var& h, const ad::Var& gated, const GatLayerParams& lp, ParameterBinding& params,
                         Tensor* attention_out = nullptr) {
    const std::size_t n = h.shape()[0];
    if (gated.shape() != Shape{n, n}) throw ShapeError("gat_layer adjacency must be N x N");
    const ad::Var w = params[lp.weight];
    const std::size_t out = w.shape()[1];
    const ad::Var wh = ad::matmul(h, w);
    const ad::Var a = params[lp.attention];
    const ad::Var src = ad::matmul(wh, ad::slice(a, 0, 0, out));
    const ad::Var dst = ad::matmul(wh, ad::slice(a, 0, out, 2 * out));
    const ad::Var logits = ad::leaky_relu(ad::add(src, ad::transpose(dst)), lp.slope);

    const Tensor& av = gated.value();
    std::vector<char> member(n * n);
    Tensor identity({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        identity.at(i, i) = 1.0;
        for (std::size_t j = 0; j < n; ++j) member[i * n + j] = (i == j || av.at(i, j) > 0.0) ? 1 : 0;
    }
    const ad::Var alpha = ad::masked_softmax(logits, std::move(member));
    if (attention_out) *attention_out = alpha.value();
    const ad::Var gate = ad::add(gated, gated.tape().constant(std::move(identity)));
    return ad::elu(ad::matmul(ad::mul(gate, alpha), wh));
}

inline ad::Var graph_pool(const ad::Var& h) { return ad::mean(h, 0); }

inline constexpr const char* kHeadWeight = "head.W";
inline constexpr const char* kHeadBias = "head.b";

struct Prediction {
    ad::Var logits;         // C
    ad::Var log_probabilities;
    ad::Var embedding;

    Tensor probabilities() const {
        Tensor p = log_probabilities.value();
        for (double& v : p.storage()) v = std::exp(v);
        return p;
    }
};

inline Prediction classify(const ad::Var& embedding, ParameterBinding& params) {
    const std::size_t width = embedding.numel();
    const ad::Var w = params[kHeadWeight];
    const std::size_t classes = w.shape()[1];
    const ad::Var logits = ad::reshape(ad::add(ad::matmul(ad::reshape(embedding, {1, width}), w), params[kHeadBias]), {classes});
    return {logits, ad::log_softmax(logits, 0), embedding};
}

/// -log p_label + weight * KL.
inline ad::Var total_loss(const Prediction& pred, std::size_t label, const ad::Var& kl, double kl_weight) {
    const std::size_t classes = pred.logits.numel();
    if (label >= classes) throw ContractError("label " + std::to_string(label) + " out of range");
    const ad::Var ce = ad::scale(ad::reshape(ad::slice(pred.log_probabilities, 0, label, label + 1), {}), -1.0);
    if (kl_weight == 0.0) return ce;
    return ad::add(ce, ad::scale(kl, kl_weight));
}

// ---------------------------------------------------------------------------

/// Every intermediate of one forward pass, all on the caller's tape.
struct ForwardPass {
    encoder::FusedRepresentation fused;
    toppe::LaplacianPE pe;
    ad::Var node_features;   // H^(0)
    mask::EdgeMask mask;
    ad::Var retention_probs; // symmetrized sigmoid(S): per-edge retention probability
    ad::Var kl;              // unweighted sparsity term
    ad::Var gated;           // A-hat
    std::vector<ad::Var> layers;
    Prediction prediction;

    double retention() const { return mask::off_diagonal_mean(retention_probs.value()); }
};

class Model {
public:
    Model(const ModelConfig& config, std::size_t node_feature_dim, std::size_t num_classes)
        : config_(config), feature_dim_(node_feature_dim), classes_(num_classes) {
        config_.validate();
        if (num_classes < 2) throw ConfigError("need at least two classes");
        Stream stream(rng::hash({config_.seed, 0x1417ULL}));
        encoder::init_params(store_, config_.attention(), node_feature_dim, stream);
        mask::init_params(store_, config_.node_width(), config_.use_cwise, stream);
        std::size_t in = config_.node_width();
        for (std::size_t l = 0; l < config_.gat_layers; ++l) {
            const auto lp = GatLayerParams::layer(l, config_.gat_slope);
            const std::size_t out = config_.hidden_width();
            store_.add_uniform(lp.weight, {in, out}, in, stream);
            store_.add_uniform(lp.attention, {2 * out, 1}, 2 * out, stream);
            in = out;
        }
        store_.add_uniform(kHeadWeight, {in, num_classes}, in, stream);
        store_.add_zeros(kHeadBias, {num_classes});
    }

    const ModelConfig& config() const noexcept { return config_; }
    std::size_t feature_dim() const noexcept { return feature_dim_; }
    std::size_t num_classes() const noexcept { return classes_; }
    ParameterStore& params() noexcept { return store_; }
    const ParameterStore& params() const noexcept { return store_; }

    /// `frozen_pe`, when given, replaces the eigenvector coordinates computed
    /// from A-bar; finite-difference checks use it to hold the PE fixed.
    ForwardPass forward(ad::Tape& tape, ParameterBinding& bind, const signal::DynamicGraphSequence& seq, mask::Mode mode,
                        double tau, const mask::NoiseKey& key, const toppe::LaplacianPE* frozen_pe = nullptr) const {
        if (seq.feature_dim() != feature_dim_)
            throw ShapeError("sequence feature dim " + std::to_string(seq.feature_dim()) + " but model expects " +
                             std::to_string(feature_dim_));
        const auto attn = config_.attention();
        const std::size_t n = seq.num_nodes();
        ForwardPass fp;
        fp.fused = encoder::fuse(tape, seq.node_features, seq.adjacency, attn, bind);
        if (config_.use_pe) {
            fp.pe = frozen_pe ? *frozen_pe
                              : toppe::laplacian_pe(toppe::normalized_laplacian(fp.fused.fused_adjacency.value()),
                                                    config_.pe_dim, config_.pe_zero_threshold);
            fp.node_features = toppe::concat_pe(fp.fused.node_embeddings, fp.pe.coordinates);
        } else {
            fp.node_features = fp.fused.node_embeddings;
        }
        const ad::Var logits = config_.use_cwise ? mask::edge_logits(fp.node_features, bind) : mask::global_logits(bind, n);
        const ad::Var sampled = mask::sample_mask(logits, tau, mode, key);
        fp.mask = {logits, sampled, mask::symm_zero_diag(sampled), tau};
        fp.retention_probs = mask::symm_zero_diag(ad::sigmoid(logits));
        fp.kl = mask::kl_sparsity(config_.kl_on_samples ? fp.mask.symmetric : fp.retention_probs, config_.prior());
        fp.gated = gate_adjacency(fp.mask.symmetric, fp.fused.fused_adjacency);
        ad::Var h = fp.node_features;
        for (std::size_t l = 0; l < config_.gat_layers; ++l) {
            h = gat_layer(h, fp.gated, GatLayerParams::layer(l, config_.gat_slope), bind);
            fp.layers.push_back(h);
        }
        fp.prediction = classify(graph_pool(h), bind);
        return fp;
    }

    ad::Var loss(const ForwardPass& fp, std::size_t label) const {
        return total_loss(fp.prediction, label, fp.kl, config_.prior().weight);
    }

private:
    ModelConfig config_;
    std::size_t feature_dim_;
    std::size_t classes_;
    ParameterStore store_;
};

}  // namespace seegraph::predictor
