#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "encoder.hpp"
#include "errors.hpp"
#include "maskext.hpp"
#include "signal.hpp"

namespace seegraph {

/// Every hyperparameter of the pipeline. Defaults are this project's choices.
struct ModelConfig {
    std::size_t model_dim = 32;
    std::size_t heads = 4;
    std::size_t pe_dim = 4;
    double pe_zero_threshold = 1e-8;
    std::size_t gat_layers = 2;
    std::size_t gat_hidden = 0;  // 0: same as model_dim
    double gat_slope = 0.2;

    double retention = 0.15;
    double kl_epsilon = 1e-8;
    double kl_weight = 1.0;
    bool kl_on_samples = false;  // true: penalize sampled masks instead of retention probabilities

    double tau_start = 5.0;
    double tau_min = 0.5;
    double tau_decay = 0.9;

    double window_s = 1.0;
    double stride_s = 0.5;
    std::string band = "broadband";
    std::string correlation_source = "raw";  // raw | envelope

    double learning_rate = 1e-3;
    std::size_t epochs = 60;
    std::size_t batch_size = 8;

    // Ablation switches: false removes the component.
    bool use_cwise = true;
    bool use_pe = true;
    bool use_sr = true;
    bool use_fft = true;

    double prune_threshold = 0.0;  // export only, never the loss
    double noise_sigma = 0.0;
    std::uint64_t seed = 1;

    std::size_t hidden_width() const { return gat_hidden ? gat_hidden : model_dim; }
    std::size_t effective_pe_dim() const { return use_pe ? pe_dim : 0; }
    std::size_t node_width() const { return model_dim + effective_pe_dim(); }

    encoder::AttentionParams attention() const { return {model_dim, heads}; }

    mask::SparsityPrior prior() const { return {retention, kl_epsilon, use_sr ? kl_weight : 0.0}; }
    mask::TemperatureSchedule temperature() const { return {tau_start, tau_min, tau_decay}; }

    /// Temperature the evaluation forward uses after training: the schedule
    /// value of the last epoch.
    double final_tau() const { return mask::anneal(temperature(), epochs ? epochs - 1 : 0); }

    signal::WindowingSpec windowing(double sample_rate_hz) const {
        signal::WindowingSpec w{static_cast<std::size_t>(std::llround(window_s * sample_rate_hz)),
                                static_cast<std::size_t>(std::llround(stride_s * sample_rate_hz))};
        w.validate();
        return w;
    }

    signal::SequenceOptions sequence_options() const {
        signal::SequenceOptions o;
        o.node_features = use_fft ? signal::NodeFeatureKind::spectral : signal::NodeFeatureKind::raw_samples;
        if (correlation_source == "raw") o.correlation = signal::CorrelationSource::raw;
        else if (correlation_source == "envelope") o.correlation = signal::CorrelationSource::envelope;
        else throw ConfigError("correlation_source must be raw or envelope");
        return o;
    }

    void validate() const {
        attention().head_dim();
        if (model_dim == 0) throw ConfigError("model_dim must be positive");
        if (use_pe && pe_dim == 0) throw ConfigError("pe_dim must be positive when positional encoding is on");
        if (gat_layers == 0) throw ConfigError("need at least one GAT layer");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (!(window_s > 0.0) || !(stride_s > 0.0) || stride_s > window_s) throw ConfigError("need 0 < stride_s <= window_s");
        if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
        mask::SparsityPrior{retention, kl_epsilon, kl_weight}.validate();
        temperature().validate();
        sequence_options();
    }
};

}  // namespace seegraph
