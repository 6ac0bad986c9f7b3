#pragma once

// Synthetic EEG cohorts with planted, class-specific coupling subnetworks.
//
// Channel i of a subject is a sum of independent unit-variance Gaussian
// processes, each band-limited by zeroing DFT bins outside its band:
//   per-band oscillations, amplitude * gain(i, band) * jitter
//   + coupling * shared latent, for every planted edge touching i
//   + a private filler in the coupling band that tops the planted power up
//     to the cohort maximum, so coupling changes correlations but not power
//   + white background noise.
// Channel gains are fixed per cohort and give channels a spectral identity.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "random.hpp"
#include "signal.hpp"
#include "tensor.hpp"

namespace seegraph::cohort {

struct PlantedEdge {
    std::size_t i = 0, j = 0;
    double coupling = 0.8;

    bool same_pair(const PlantedEdge& o) const { return std::minmax(i, j) == std::minmax(o.i, o.j); }
};

struct Oscillator {
    double low_hz = 0.0;
    double high_hz = 0.0;
    double amplitude = 0.0;
};

struct CohortSpec {
    std::size_t n_channels = 16;
    std::size_t subjects_per_class = 40;
    std::size_t classes = 2;
    double sample_rate_hz = 100.0;
    double duration_s = 30.0;

    // Used to draw `planted` when it is left empty: per class, a random
    // matching of this many pairs, disjoint from the other classes' pairs.
    std::size_t planted_per_class = 6;
    double coupling = 0.8;
    std::vector<std::vector<PlantedEdge>> planted;

    // Per class; empty means one oscillator per clinical band, shared by all classes.
    std::vector<std::vector<Oscillator>> band_profile;

    double coupling_low_hz = 1.0;
    double coupling_high_hz = 45.0;
    double gain_low = 0.5;
    double gain_high = 1.5;
    double amplitude_jitter = 0.1;
    double background_noise_std = 0.5;
    // Tops every channel up to the same coupling-band power, so classes differ
    // only in which pairs are correlated and not in per-channel power.
    bool match_power = false;
    // Class c's oscillator in this band is scaled by (1 + contrast_step * c).
    // Empty band or zero step leaves the classes with identical spectra.
    std::string contrast_band = "alpha";
    double contrast_step = 0.5;
    double train_fraction = 0.8;
    std::uint64_t seed = 1;

    std::size_t num_samples() const { return static_cast<std::size_t>(std::llround(duration_s * sample_rate_hz)); }
    double nyquist() const { return sample_rate_hz / 2.0; }
};

inline std::vector<Oscillator> default_band_profile(double sample_rate_hz) {
    const std::vector<std::pair<std::string, double>> amps{
        {"delta", 0.35}, {"theta", 0.3}, {"alpha", 0.35}, {"beta", 0.25}, {"gamma", 0.2}};
    std::vector<Oscillator> out;
    for (const auto& [name, amp] : amps) {
        try {
            const auto b = signal::band_by_name(name, sample_rate_hz);
            out.push_back({b.low_hz, b.high_hz, amp});
        } catch (const EmptyBandError&) {
        }
    }
    return out;
}

/// Random matchings, one per class, with no pair shared between classes.
inline std::vector<std::vector<PlantedEdge>> draw_planted(const CohortSpec& spec) {
    if (2 * spec.planted_per_class > spec.n_channels)
        throw ValidationError("cannot place " + std::to_string(spec.planted_per_class) + " disjoint pairs on " +
                              std::to_string(spec.n_channels) + " channels");
    std::vector<std::vector<PlantedEdge>> planted;
    std::set<std::pair<std::size_t, std::size_t>> used;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        Stream stream(rng::hash({spec.seed, 0x91A7ULL, c}));
        for (int attempt = 0;; ++attempt) {
            if (attempt == 1000) throw ValidationError("could not draw disjoint planted edges");
            std::vector<std::size_t> order(spec.n_channels);
            for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
            for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[stream.next_below(k)]);
            std::vector<PlantedEdge> edges;
            bool clash = false;
            for (std::size_t e = 0; e < spec.planted_per_class && !clash; ++e) {
                const auto [i, j] = std::minmax(order[2 * e], order[2 * e + 1]);
                clash = used.count({i, j}) != 0;
                edges.push_back({i, j, spec.coupling});
            }
            if (clash) continue;
            std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) { return std::tie(a.i, a.j) < std::tie(b.i, b.j); });
            for (const auto& e : edges) used.insert({e.i, e.j});
            planted.push_back(std::move(edges));
            break;
        }
    }
    return planted;
}

/// Copy of `spec` with planted edges and band profile filled in.
inline CohortSpec resolve(CohortSpec spec) {
    if (spec.planted.empty()) spec.planted = draw_planted(spec);
    if (spec.band_profile.empty()) {
        spec.band_profile.assign(spec.classes, default_band_profile(spec.sample_rate_hz));
        if (!spec.contrast_band.empty() && spec.contrast_step != 0.0) {
            const auto band = signal::band_by_name(spec.contrast_band, spec.sample_rate_hz);
            for (std::size_t c = 0; c < spec.classes; ++c)
                for (auto& o : spec.band_profile[c])
                    if (o.low_hz == band.low_hz && o.high_hz == band.high_hz) o.amplitude *= 1.0 + spec.contrast_step * static_cast<double>(c);
        }
    }
    return spec;
}

inline void validate(const CohortSpec& raw) {
    if (raw.n_channels < 2) throw ValidationError("cohort needs at least 2 channels");
    if (raw.classes < 2) throw ValidationError("cohort needs at least 2 classes");
    if (raw.subjects_per_class < 2) throw ValidationError("need at least 2 subjects per class for a train/test split");
    if (!(raw.sample_rate_hz > 0.0) || !(raw.duration_s > 0.0)) throw ValidationError("sample rate and duration must be positive");
    if (raw.num_samples() < 16) throw ValidationError("recordings are too short");
    if (!(raw.train_fraction > 0.0 && raw.train_fraction < 1.0)) throw ValidationError("train fraction must lie in (0, 1)");
    if (!(raw.background_noise_std >= 0.0)) throw ValidationError("background noise must be non-negative");
    if (!(raw.amplitude_jitter >= 0.0 && raw.amplitude_jitter < 1.0)) throw ValidationError("amplitude jitter must lie in [0, 1)");
    if (!(raw.gain_low > 0.0 && raw.gain_low <= raw.gain_high)) throw ValidationError("need 0 < gain_low <= gain_high");
    if (!(raw.coupling_low_hz >= 0.0 && raw.coupling_low_hz < raw.coupling_high_hz))
        throw ValidationError("coupling band edges are invalid");
    if (raw.coupling_low_hz >= raw.nyquist()) throw ValidationError("coupling band lies above Nyquist");

    const CohortSpec spec = resolve(raw);
    if (spec.planted.size() != spec.classes) throw ValidationError("planted edges must be given for every class");
    if (spec.band_profile.size() != spec.classes) throw ValidationError("band profile must be given for every class");
    for (const auto& edges : spec.planted)
        for (std::size_t a = 0; a < edges.size(); ++a) {
            const auto& e = edges[a];
            if (e.i == e.j || e.i >= spec.n_channels || e.j >= spec.n_channels)
                throw ValidationError("planted edge (" + std::to_string(e.i) + ", " + std::to_string(e.j) + ") is invalid");
            if (!(e.coupling > 0.0 && e.coupling <= 1.0)) throw ValidationError("coupling strengths must lie in (0, 1]");
            for (std::size_t b = 0; b < a; ++b)
                if (edges[b].same_pair(e)) throw ValidationError("planted edges repeat a pair");
        }
    for (const auto& profile : spec.band_profile)
        for (const auto& o : profile)
            if (!(o.low_hz >= 0.0 && o.low_hz < o.high_hz && o.high_hz <= spec.nyquist()) || !(o.amplitude >= 0.0))
                throw ValidationError("oscillator bands must satisfy 0 <= low < high <= Nyquist with amplitude >= 0");

    auto same_edges = [](const std::vector<PlantedEdge>& a, const std::vector<PlantedEdge>& b) {
        if (a.size() != b.size()) return false;
        return std::all_of(a.begin(), a.end(), [&](const PlantedEdge& e) {
            return std::any_of(b.begin(), b.end(), [&](const PlantedEdge& f) { return e.same_pair(f) && e.coupling == f.coupling; });
        });
    };
    auto same_profile = [](const std::vector<Oscillator>& a, const std::vector<Oscillator>& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t k = 0; k < a.size(); ++k)
            if (a[k].low_hz != b[k].low_hz || a[k].high_hz != b[k].high_hz || a[k].amplitude != b[k].amplitude) return false;
        return true;
    };
    for (std::size_t c = 0; c < spec.classes; ++c)
        for (std::size_t d = 0; d < c; ++d)
            if (same_edges(spec.planted[c], spec.planted[d]) && same_profile(spec.band_profile[c], spec.band_profile[d]))
                throw ValidationError("classes " + std::to_string(d) + " and " + std::to_string(c) + " are indistinguishable");
}

inline std::vector<std::string> channel_names(std::size_t n) {
    static const std::vector<std::string> ten_twenty{"Fp1", "Fp2", "F7", "F3", "F4", "F8", "T3", "C3",
                                                     "C4",  "T4",  "T5", "P3", "P4", "T6", "O1", "O2"};
    return n == ten_twenty.size() ? ten_twenty : signal::default_channel_names(n);
}

/// Zero-mean, unit-variance Gaussian process with energy only in DFT bins
/// whose frequency lies in [low, high).
inline std::vector<double> band_process(std::size_t len, double rate, double low, double high, std::uint64_t key) {
    std::vector<std::complex<double>> spec(len / 2 + 1);
    bool any = false;
    for (std::size_t k = 1; k <= len / 2; ++k) {
        const double f = static_cast<double>(k) * rate / static_cast<double>(len);
        if (f >= low && f < high) {
            spec[k] = {rng::normal(key, k, 0, 0), rng::normal(key, k, 1, 0)};
            any = true;
        }
    }
    if (!any) throw ValidationError("band [" + std::to_string(low) + ", " + std::to_string(high) + ") Hz has no bins");
    std::vector<double> x = signal::detail::irfft(std::move(spec), len);
    double mu = 0.0, ss = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(len);
    for (double v : x) ss += (v - mu) * (v - mu);
    const double sd = std::sqrt(ss / static_cast<double>(len));
    for (double& v : x) v = (v - mu) / sd;
    return x;
}

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

struct LabeledCohort {
    CohortSpec spec;  // resolved
    std::vector<std::string> channels;
    std::vector<signal::Recording> recordings;
    std::vector<Split> splits;

    std::size_t num_classes() const { return spec.classes; }
    const std::vector<PlantedEdge>& planted(std::size_t label) const { return spec.planted.at(label); }

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < splits.size(); ++k)
            if (splits[k] == s) out.push_back(k);
        return out;
    }
};

inline double channel_gain(const CohortSpec& spec, std::size_t channel, std::size_t oscillator) {
    const double u = rng::uniform({spec.seed, 0x6A1EULL, channel, oscillator});
    return spec.gain_low + (spec.gain_high - spec.gain_low) * u;
}

inline signal::Recording generate_subject(const CohortSpec& spec, std::size_t label, std::size_t index) {
    const std::size_t n = spec.n_channels, len = spec.num_samples();
    const double rate = spec.sample_rate_hz;
    const double coupling_high = std::min(spec.coupling_high_hz, spec.nyquist());
    const std::uint64_t subject = rng::hash({spec.seed, 0x5B1ECULL, label, index});

    double peak_power = 0.0;
    for (const auto& edges : spec.planted)
        for (std::size_t i = 0; i < n; ++i) {
            double p = 0.0;
            for (const auto& e : edges)
                if (e.i == i || e.j == i) p += e.coupling * e.coupling;
            peak_power = std::max(peak_power, p);
        }

    signal::Recording rec;
    rec.subject_id = "c" + std::to_string(label) + "-s" + std::string(index < 10 ? "00" : index < 100 ? "0" : "") +
                     std::to_string(index);
    rec.channels = channel_names(n);
    rec.sample_rate_hz = rate;
    rec.label = label;
    rec.samples = Tensor({n, len});

    auto add = [&](std::size_t channel, const std::vector<double>& x, double weight) {
        double* row = rec.samples.data().data() + channel * len;
        for (std::size_t t = 0; t < len; ++t) row[t] += weight * x[t];
    };

    const auto& profile = spec.band_profile[label];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t b = 0; b < profile.size(); ++b) {
            const Oscillator& o = profile[b];
            if (o.amplitude == 0.0) continue;
            const double jitter = 1.0 + spec.amplitude_jitter * (2.0 * rng::uniform({subject, 0x7177ULL, i, b}) - 1.0);
            add(i, band_process(len, rate, o.low_hz, o.high_hz, rng::hash({subject, 0x05CULL, i, b})),
                o.amplitude * channel_gain(spec, i, b) * jitter);
        }

    std::vector<double> planted_power(n, 0.0);
    const auto& edges = spec.planted[label];
    for (std::size_t e = 0; e < edges.size(); ++e) {
        const auto latent = band_process(len, rate, spec.coupling_low_hz, coupling_high, rng::hash({subject, 0xED6EULL, e}));
        add(edges[e].i, latent, edges[e].coupling);
        add(edges[e].j, latent, edges[e].coupling);
        planted_power[edges[e].i] += edges[e].coupling * edges[e].coupling;
        planted_power[edges[e].j] += edges[e].coupling * edges[e].coupling;
    }
    for (std::size_t i = 0; spec.match_power && i < n; ++i) {
        const double fill = peak_power - planted_power[i];
        if (fill > 0.0)
            add(i, band_process(len, rate, spec.coupling_low_hz, coupling_high, rng::hash({subject, 0xF111ULL, i})),
                std::sqrt(fill));
    }

    if (spec.background_noise_std > 0.0)
        for (std::size_t i = 0; i < n; ++i) {
            double* row = rec.samples.data().data() + i * len;
            for (std::size_t t = 0; t < len; ++t) row[t] += spec.background_noise_std * rng::normal(subject, 0xB6ULL, i, t);
        }
    return rec;
}

/// Stratified split: floor(fraction * n_c) train subjects per class, chosen
/// by a seeded shuffle, the rest test.
inline std::vector<Split> subject_split(const std::vector<std::size_t>& labels, std::size_t classes, double train_fraction,
                                        std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("train fraction must lie in (0, 1)");
    std::vector<Split> splits(labels.size(), Split::test);
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t k = 0; k < labels.size(); ++k)
            if (labels[k] == c) members.push_back(k);
        if (members.size() < 2) throw ValidationError("class " + std::to_string(c) + " has fewer than 2 subjects");
        const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(members.size())));
        if (n_train == 0 || n_train == members.size())
            throw ValidationError("class " + std::to_string(c) + " split leaves train or test empty");
        Stream stream(rng::hash({seed, 0x5917ULL, c}));
        for (std::size_t k = members.size(); k > 1; --k) std::swap(members[k - 1], members[stream.next_below(k)]);
        for (std::size_t k = 0; k < n_train; ++k) splits[members[k]] = Split::train;
    }
    return splits;
}

inline LabeledCohort generate_cohort(const CohortSpec& raw) {
    validate(raw);
    LabeledCohort cohort;
    cohort.spec = resolve(raw);
    cohort.channels = channel_names(raw.n_channels);
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < raw.classes; ++c)
        for (std::size_t s = 0; s < raw.subjects_per_class; ++s) {
            cohort.recordings.push_back(generate_subject(cohort.spec, c, s));
            labels.push_back(c);
        }
    cohort.splits = subject_split(labels, raw.classes, raw.train_fraction, raw.seed);
    return cohort;
}

inline LabeledCohort generate_cohort(CohortSpec spec, std::uint64_t seed) {
    spec.seed = seed;
    return generate_cohort(spec);
}

/// Adds i.i.d. N(0, sigma^2) to the z-scored signal. Draws are keyed by
/// (seed, subject id, channel name, sample), so relabeling channels moves
/// their noise with them. sigma == 0 returns the recording untouched.
inline signal::Recording add_noise(const signal::Recording& rec, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw ValidationError("noise sigma must be non-negative");
    if (sigma == 0.0) return rec;
    signal::Recording out = signal::zscore_channels(rec);
    const std::size_t n = rec.num_channels(), len = rec.num_samples();
    const auto names = rec.channels.empty() ? signal::default_channel_names(n) : rec.channels;
    const std::uint64_t subject = rng::hash_string(rec.subject_id);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t channel = rng::hash_string(names[i]);
        double* row = out.samples.data().data() + i * len;
        for (std::size_t t = 0; t < len; ++t) row[t] += sigma * rng::normal(seed, subject, channel, t);
    }
    return out;
}

// ---------------------------------------------------------------------------
// On disk: one recording file per subject plus manifest.json.

inline nlohmann::json spec_to_json(const CohortSpec& s) {
    nlohmann::json profile = nlohmann::json::array();
    for (const auto& cls : s.band_profile) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& o : cls) row.push_back({{"low_hz", o.low_hz}, {"high_hz", o.high_hz}, {"amplitude", o.amplitude}});
        profile.push_back(row);
    }
    return {{"n_channels", s.n_channels},
            {"subjects_per_class", s.subjects_per_class},
            {"classes", s.classes},
            {"sample_rate_hz", s.sample_rate_hz},
            {"duration_s", s.duration_s},
            {"coupling_low_hz", s.coupling_low_hz},
            {"coupling_high_hz", s.coupling_high_hz},
            {"gain_low", s.gain_low},
            {"gain_high", s.gain_high},
            {"amplitude_jitter", s.amplitude_jitter},
            {"background_noise_std", s.background_noise_std},
            {"match_power", s.match_power},
            {"contrast_band", s.contrast_band},
            {"contrast_step", s.contrast_step},
            {"train_fraction", s.train_fraction},
            {"seed", s.seed},
            {"band_profile", profile}};
}

inline nlohmann::json planted_to_json(const std::vector<std::vector<PlantedEdge>>& planted) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& edges : planted) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& e : edges) row.push_back({{"i", e.i}, {"j", e.j}, {"coupling", e.coupling}});
        out.push_back(row);
    }
    return out;
}

inline std::string recording_file(const signal::Recording& rec) { return rec.subject_id + ".sgrc"; }

inline void write_cohort(const LabeledCohort& cohort, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json subjects = nlohmann::json::array();
    for (std::size_t k = 0; k < cohort.recordings.size(); ++k) {
        const auto& rec = cohort.recordings[k];
        signal::save_recording(rec, (dir / recording_file(rec)).string());
        subjects.push_back({{"subject_id", rec.subject_id},
                            {"path", recording_file(rec)},
                            {"label", rec.label},
                            {"split", split_name(cohort.splits[k])}});
    }
    const nlohmann::json manifest{{"subjects", subjects},
                                  {"planted", planted_to_json(cohort.spec.planted)},
                                  {"channels", cohort.channels},
                                  {"classes", cohort.spec.classes},
                                  {"sample_rate_hz", cohort.spec.sample_rate_hz},
                                  {"spec", spec_to_json(cohort.spec)}};
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw FormatError("cannot write manifest in '" + dir.string() + "'");
    os << manifest.dump(2) << '\n';
}

inline LabeledCohort load_cohort(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream is(manifest_path);
    if (!is) throw FormatError("no manifest at '" + manifest_path.string() + "'");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
    }
    try {
        LabeledCohort cohort;
        cohort.spec.classes = m.at("classes").get<std::size_t>();
        cohort.spec.sample_rate_hz = m.at("sample_rate_hz").get<double>();
        cohort.channels = m.at("channels").get<std::vector<std::string>>();
        cohort.spec.n_channels = cohort.channels.size();
        if (m.contains("spec")) {
            const auto& s = m["spec"];
            cohort.spec.subjects_per_class = s.value("subjects_per_class", cohort.spec.subjects_per_class);
            cohort.spec.duration_s = s.value("duration_s", cohort.spec.duration_s);
            cohort.spec.coupling_low_hz = s.value("coupling_low_hz", cohort.spec.coupling_low_hz);
            cohort.spec.coupling_high_hz = s.value("coupling_high_hz", cohort.spec.coupling_high_hz);
            cohort.spec.background_noise_std = s.value("background_noise_std", cohort.spec.background_noise_std);
            cohort.spec.gain_low = s.value("gain_low", cohort.spec.gain_low);
            cohort.spec.gain_high = s.value("gain_high", cohort.spec.gain_high);
            cohort.spec.amplitude_jitter = s.value("amplitude_jitter", cohort.spec.amplitude_jitter);
            cohort.spec.match_power = s.value("match_power", cohort.spec.match_power);
            cohort.spec.contrast_band = s.value("contrast_band", cohort.spec.contrast_band);
            cohort.spec.contrast_step = s.value("contrast_step", cohort.spec.contrast_step);
            cohort.spec.train_fraction = s.value("train_fraction", cohort.spec.train_fraction);
            cohort.spec.seed = s.value("seed", cohort.spec.seed);
        }
        for (const auto& row : m.at("planted")) {
            std::vector<PlantedEdge> edges;
            for (const auto& e : row) edges.push_back({e.at("i").get<std::size_t>(), e.at("j").get<std::size_t>(), e.at("coupling").get<double>()});
            cohort.spec.planted.push_back(std::move(edges));
        }
        for (const auto& s : m.at("subjects")) {
            signal::Recording rec = signal::load_recording((dir / s.at("path").get<std::string>()).string());
            if (rec.subject_id != s.at("subject_id").get<std::string>())
                throw FormatError("subject id mismatch in '" + s.at("path").get<std::string>() + "'");
            if (rec.label != s.at("label").get<std::size_t>()) throw FormatError("label mismatch for " + rec.subject_id);
            if (rec.num_channels() != cohort.channels.size()) throw FormatError("channel count mismatch for " + rec.subject_id);
            rec.channels = cohort.channels;
            signal::validate(rec, cohort.spec.classes);
            const auto split = s.at("split").get<std::string>();
            if (split != "train" && split != "test") throw FormatError("unknown split '" + split + "'");
            cohort.splits.push_back(split == "train" ? Split::train : Split::test);
            cohort.recordings.push_back(std::move(rec));
        }
        return cohort;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest '" + manifest_path.string() + "' is malformed: " + e.what());
    }
}

}  // namespace seegraph::cohort
