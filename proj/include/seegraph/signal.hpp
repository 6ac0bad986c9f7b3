#pragma once

// Recordings, windowing and the dynamic graph sequence: per-window spectral
// node features and absolute-Pearson adjacency.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <fftw3.h>

#include "errors.hpp"
#include "params.hpp"
#include "tensor.hpp"

namespace seegraph::signal {

struct Recording {
    std::string subject_id;
    std::vector<std::string> channels;
    Tensor samples;  // N x L, channel-major
    double sample_rate_hz = 0.0;
    std::size_t label = 0;

    std::size_t num_channels() const { return samples.rank() == 2 ? samples.dim(0) : 0; }
    std::size_t num_samples() const { return samples.rank() == 2 ? samples.dim(1) : 0; }
};

inline std::vector<std::string> default_channel_names(std::size_t n) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back("ch" + std::to_string(i));
    return names;
}

/// num_classes == 0 skips the label check.
inline void validate(const Recording& rec, std::size_t num_classes = 0) {
    if (rec.samples.rank() != 2) throw ValidationError("recording samples must be N x L");
    if (rec.num_channels() < 2) throw ValidationError("recording '" + rec.subject_id + "' has fewer than 2 channels");
    if (!(rec.sample_rate_hz > 0.0)) throw ValidationError("sample rate must be positive");
    if (!rec.channels.empty() && rec.channels.size() != rec.num_channels())
        throw ValidationError("channel name count does not match channel count");
    if (num_classes && rec.label >= num_classes) throw ValidationError("label out of range");
    if (!rec.samples.all_finite()) throw ValidationError("recording contains non-finite samples");
}

struct WindowingSpec {
    std::size_t window_samples = 0;
    std::size_t stride_samples = 0;

    void validate() const {
        if (window_samples < 8) throw ConfigError("window must span at least 8 samples");
        if (stride_samples == 0 || stride_samples > window_samples)
            throw ConfigError("stride must be in [1, window]");
    }

    std::size_t count(std::size_t length) const {
        if (length < window_samples) throw InsufficientDataError("recording shorter than one window");
        return (length - window_samples) / stride_samples + 1;
    }
};

struct BandDefinition {
    std::string name;
    double low_hz = 0.0;
    double high_hz = 0.0;

    bool broadband() const { return name == "broadband"; }
};

inline const std::vector<std::string>& band_names() {
    static const std::vector<std::string> names{"delta", "theta", "alpha", "beta", "gamma"};
    return names;
}

/// Clinical band edges in Hz, clipped to Nyquist; "broadband" spans
/// [0, Nyquist]. A band starting at or above Nyquist is empty.
inline BandDefinition band_by_name(const std::string& name, double sample_rate_hz) {
    static const std::map<std::string, std::pair<double, double>> edges{
        {"delta", {0.5, 4.0}}, {"theta", {4.0, 8.0}}, {"alpha", {8.0, 13.0}}, {"beta", {13.0, 30.0}}, {"gamma", {30.0, 45.0}}};
    if (!(sample_rate_hz > 0.0)) throw ConfigError("sample rate must be positive");
    const double nyquist = sample_rate_hz / 2.0;
    if (name == "broadband") return {name, 0.0, nyquist};
    auto it = edges.find(name);
    if (it == edges.end()) throw ConfigError("unknown band '" + name + "'");
    if (it->second.first >= nyquist)
        throw EmptyBandError("band '" + name + "' starts at or above Nyquist (" + std::to_string(nyquist) + " Hz)");
    return {name, it->second.first, std::min(it->second.second, nyquist)};
}

/// DFT bins k in [1, W/2] whose frequency k * rate / W lies in [low, high).
/// The broadband band also keeps the Nyquist bin.
inline std::vector<std::size_t> band_bins(std::size_t window, const BandDefinition& band, double rate) {
    if (!(band.low_hz >= 0.0 && band.low_hz < band.high_hz)) throw ConfigError("band '" + band.name + "' has invalid edges");
    std::vector<std::size_t> bins;
    for (std::size_t k = 1; k <= window / 2; ++k) {
        const double f = static_cast<double>(k) * rate / static_cast<double>(window);
        if (f >= band.low_hz && (f < band.high_hz || (band.broadband() && f <= band.high_hz))) bins.push_back(k);
    }
    if (bins.empty())
        throw EmptyBandError("band '" + band.name + "' retains no bins at " + std::to_string(rate) + " Hz with window " +
                             std::to_string(window));
    return bins;
}

// ---------------------------------------------------------------------------

inline Recording zscore_channels(const Recording& rec) {
    const std::size_t n = rec.num_channels(), len = rec.num_samples();
    if (len < 2) throw InsufficientDataError("z-scoring needs at least 2 samples");
    Recording out = rec;
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = rec.samples.data().data() + i * len;
        double* y = out.samples.data().data() + i * len;
        double mu = 0.0;
        for (std::size_t t = 0; t < len; ++t) mu += x[t];
        mu /= static_cast<double>(len);
        double var = 0.0;
        for (std::size_t t = 0; t < len; ++t) var += (x[t] - mu) * (x[t] - mu);
        const double sd = std::sqrt(var / static_cast<double>(len));
        for (std::size_t t = 0; t < len; ++t) y[t] = sd < 1e-12 ? 0.0 : (x[t] - mu) / sd;
    }
    return out;
}

inline std::vector<Tensor> segment_windows(const Recording& rec, const WindowingSpec& spec) {
    spec.validate();
    const std::size_t n = rec.num_channels(), len = rec.num_samples();
    const std::size_t count = spec.count(len);
    std::vector<Tensor> windows;
    windows.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        Tensor win({n, spec.window_samples});
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(rec.samples.data().data() + i * len + w * spec.stride_samples, spec.window_samples,
                        win.data().data() + i * spec.window_samples);
        windows.push_back(std::move(win));
    }
    return windows;
}

namespace detail {

// FFTW plans per window length. Planning is not thread-safe in FFTW; the
// new-array execute calls used below are.
class FftPlans {
public:
    static FftPlans& instance() {
        static FftPlans plans;
        return plans;
    }

    struct Plans {
        fftw_plan forward = nullptr;   // r2c
        fftw_plan inverse = nullptr;   // c2r
        fftw_plan complex_inverse = nullptr;  // c2c backward
    };

    const Plans& get(std::size_t w) {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = plans_.find(w);
        if (it != plans_.end()) return it->second;
        const int n = static_cast<int>(w);
        std::vector<double> real(w);
        auto* spec = fftw_alloc_complex(w);
        auto* spec2 = fftw_alloc_complex(w);
        Plans p;
        p.forward = fftw_plan_dft_r2c_1d(n, real.data(), spec, FFTW_ESTIMATE | FFTW_UNALIGNED);
        p.inverse = fftw_plan_dft_c2r_1d(n, spec, real.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
        p.complex_inverse = fftw_plan_dft_1d(n, spec, spec2, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
        fftw_free(spec);
        fftw_free(spec2);
        return plans_.emplace(w, p).first->second;
    }

    FftPlans(const FftPlans&) = delete;
    FftPlans& operator=(const FftPlans&) = delete;

private:
    FftPlans() = default;
    ~FftPlans() {
        for (auto& [w, p] : plans_) {
            fftw_destroy_plan(p.forward);
            fftw_destroy_plan(p.inverse);
            fftw_destroy_plan(p.complex_inverse);
        }
    }

    std::mutex mu_;
    std::map<std::size_t, Plans> plans_;
};

inline std::vector<std::complex<double>> rfft(const double* x, std::size_t w) {
    const auto& p = FftPlans::instance().get(w);
    std::vector<double> in(x, x + w);
    std::vector<std::complex<double>> out(w / 2 + 1);
    fftw_execute_dft_r2c(p.forward, in.data(), reinterpret_cast<fftw_complex*>(out.data()));
    return out;
}

inline std::vector<double> irfft(std::vector<std::complex<double>> spec, std::size_t w) {
    const auto& p = FftPlans::instance().get(w);
    std::vector<double> out(w);
    fftw_execute_dft_c2r(p.inverse, reinterpret_cast<fftw_complex*>(spec.data()), out.data());
    for (double& v : out) v /= static_cast<double>(w);
    return out;
}

}  // namespace detail

/// Per-channel magnitudes of the unitary DFT (scaled by 1/sqrt(W)) at the
/// band's bins. The DC bin is never included.
inline Tensor spectral_features(const Tensor& window, const BandDefinition& band, double rate) {
    if (window.rank() != 2) throw ShapeError("window must be N x W");
    const std::size_t n = window.dim(0), w = window.dim(1);
    if (w < 8) throw InsufficientDataError("spectral features need at least 8 samples");
    const auto bins = band_bins(w, band, rate);
    const double norm = 1.0 / std::sqrt(static_cast<double>(w));
    Tensor out({n, bins.size()});
    for (std::size_t i = 0; i < n; ++i) {
        const auto spec = detail::rfft(window.data().data() + i * w, w);
        for (std::size_t b = 0; b < bins.size(); ++b) out.at(i, b) = std::abs(spec[bins[b]]) * norm;
    }
    return out;
}

/// Inverse transform of only the band's bins (a brick-wall band-pass).
inline Tensor band_limited(const Tensor& window, const BandDefinition& band, double rate) {
    const std::size_t n = window.dim(0), w = window.dim(1);
    const auto bins = band_bins(w, band, rate);
    Tensor out({n, w});
    for (std::size_t i = 0; i < n; ++i) {
        const auto spec = detail::rfft(window.data().data() + i * w, w);
        std::vector<std::complex<double>> kept(spec.size());
        for (std::size_t k : bins) kept[k] = spec[k];
        const auto rec = detail::irfft(std::move(kept), w);
        std::copy(rec.begin(), rec.end(), out.data().data() + i * w);
    }
    return out;
}

/// Magnitude of the analytic signal (Hilbert envelope) per channel.
inline Tensor analytic_envelope(const Tensor& window) {
    const std::size_t n = window.dim(0), w = window.dim(1);
    const auto& p = detail::FftPlans::instance().get(w);
    Tensor out({n, w});
    for (std::size_t i = 0; i < n; ++i) {
        const auto half = detail::rfft(window.data().data() + i * w, w);
        std::vector<std::complex<double>> full(w), z(w);
        full[0] = half[0];
        for (std::size_t k = 1; k < (w + 1) / 2; ++k) full[k] = 2.0 * half[k];
        if (w % 2 == 0) full[w / 2] = half[w / 2];
        fftw_execute_dft(p.complex_inverse, reinterpret_cast<fftw_complex*>(full.data()),
                         reinterpret_cast<fftw_complex*>(z.data()));
        for (std::size_t t = 0; t < w; ++t) out.at(i, t) = std::abs(z[t]) / static_cast<double>(w);
    }
    return out;
}

/// |Pearson| between every pair of channels; zero diagonal; channels with no
/// variance correlate 0 with everything.
inline Tensor amplitude_correlation(const Tensor& window) {
    if (window.rank() != 2) throw ShapeError("window must be N x W");
    const std::size_t n = window.dim(0), w = window.dim(1);
    if (w < 2) throw InsufficientDataError("correlation needs at least 2 samples");
    std::vector<double> centered(n * w), norm(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = window.data().data() + i * w;
        double mu = 0.0;
        for (std::size_t t = 0; t < w; ++t) mu += x[t];
        mu /= static_cast<double>(w);
        double ss = 0.0;
        for (std::size_t t = 0; t < w; ++t) {
            centered[i * w + t] = x[t] - mu;
            ss += centered[i * w + t] * centered[i * w + t];
        }
        norm[i] = ss / static_cast<double>(w) < 1e-24 ? 0.0 : std::sqrt(ss);
    }
    Tensor a({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double r = 0.0;
            if (norm[i] > 0.0 && norm[j] > 0.0) {
                double dot = 0.0;
                for (std::size_t t = 0; t < w; ++t) dot += centered[i * w + t] * centered[j * w + t];
                r = std::min(1.0, std::abs(dot / (norm[i] * norm[j])));
            }
            a.at(i, j) = a.at(j, i) = r;
        }
    return a;
}

// ---------------------------------------------------------------------------

struct DynamicGraphSequence {
    Tensor node_features;  // T x N x d
    Tensor adjacency;      // T x N x N
    std::string band;

    std::size_t num_windows() const { return adjacency.dim(0); }
    std::size_t num_nodes() const { return adjacency.dim(1); }
    std::size_t feature_dim() const { return node_features.dim(2); }
};

enum class NodeFeatureKind { spectral, raw_samples };
enum class CorrelationSource { raw, envelope };

struct SequenceOptions {
    NodeFeatureKind node_features = NodeFeatureKind::spectral;
    CorrelationSource correlation = CorrelationSource::raw;
};

/// z-score, window, then per window: node features and |Pearson| adjacency.
/// Non-broadband runs correlate the band-limited reconstruction.
inline DynamicGraphSequence build_sequence(const Recording& rec, const WindowingSpec& spec, const BandDefinition& band,
                                           const SequenceOptions& options = {}) {
    validate(rec);
    const Recording z = zscore_channels(rec);
    const auto windows = segment_windows(z, spec);
    const std::size_t t_count = windows.size(), n = rec.num_channels(), w = spec.window_samples;
    const std::size_t d = options.node_features == NodeFeatureKind::spectral ? band_bins(w, band, rec.sample_rate_hz).size() : w;

    DynamicGraphSequence seq{Tensor({t_count, n, d}), Tensor({t_count, n, n}), band.name};
    for (std::size_t t = 0; t < t_count; ++t) {
        const Tensor& win = windows[t];
        const Tensor feats = options.node_features == NodeFeatureKind::spectral
                                 ? spectral_features(win, band, rec.sample_rate_hz)
                                 : win;
        std::copy(feats.data().begin(), feats.data().end(), seq.node_features.data().begin() + t * n * d);
        Tensor source = band.broadband() ? win : band_limited(win, band, rec.sample_rate_hz);
        if (options.correlation == CorrelationSource::envelope) source = analytic_envelope(source);
        const Tensor adj = amplitude_correlation(source);
        std::copy(adj.data().begin(), adj.data().end(), seq.adjacency.data().begin() + t * n * n);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Recording file: "SGRC", u16 version, u16 id length + bytes, u16 label,
// u32 channels, u64 samples, f64 rate, channel-major f64 samples.

inline constexpr std::uint16_t kRecordingVersion = 1;

inline void save_recording(const Recording& rec, const std::string& path) {
    validate(rec);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write("SGRC", 4);
    io::put<std::uint16_t>(os, kRecordingVersion);
    io::put<std::uint16_t>(os, static_cast<std::uint16_t>(rec.subject_id.size()));
    io::put_bytes(os, rec.subject_id);
    io::put<std::uint16_t>(os, static_cast<std::uint16_t>(rec.label));
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(rec.num_channels()));
    io::put<std::uint64_t>(os, static_cast<std::uint64_t>(rec.num_samples()));
    io::put<double>(os, rec.sample_rate_hz);
    for (double v : rec.samples.data()) io::put<double>(os, v);
    if (!os) throw FormatError("write to '" + path + "' failed");
}

inline Recording load_recording(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open recording '" + path + "'");
    io::expect_magic(is, "SGRC");
    const auto version = io::get<std::uint16_t>(is, "version");
    if (version != kRecordingVersion) throw FormatError("unsupported recording version " + std::to_string(version));
    Recording rec;
    const auto id_len = io::get<std::uint16_t>(is, "subject id length");
    rec.subject_id = io::get_bytes(is, id_len, "subject id");
    rec.label = io::get<std::uint16_t>(is, "label");
    const auto n = io::get<std::uint32_t>(is, "channel count");
    const auto len = io::get<std::uint64_t>(is, "sample count");
    rec.sample_rate_hz = io::get<double>(is, "sample rate");
    if (n < 2) throw ValidationError("recording '" + path + "' has fewer than 2 channels");
    rec.samples = Tensor({n, static_cast<std::size_t>(len)});
    for (double& v : rec.samples.storage()) v = io::get<double>(is, "samples");
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in '" + path + "'");
    rec.channels = default_channel_names(n);
    validate(rec);
    return rec;
}

}  // namespace seegraph::signal
