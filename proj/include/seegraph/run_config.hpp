#pragma once

// Run configuration: ModelConfig + CohortSpec + paths, read from a
// key = value text file with '#' comments, then overridden from the command
// line (last assignment wins). Unknown keys are rejected.

#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cohort.hpp"
#include "errors.hpp"
#include "model_config.hpp"

namespace seegraph {

struct RunConfig {
    ModelConfig model;
    cohort::CohortSpec cohort;
    std::string cohort_dir = "cohort";
    std::string reports_dir = "reports";
    std::string checkpoint;  // empty: <reports_dir>/model.sgwt
    std::size_t top_k = 6;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || errno == ERANGE) throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
    return x;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    if (v.empty() || v[0] == '-') throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (*end != '\0' || errno == ERANGE) throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::string format_double(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number(std::string key, T RunConfig::*group, double T::*member) {
    return {key, [=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_double(key, v); },
            [=](const RunConfig& c) { return format_double((c.*group).*member); }};
}

template <class T, class U>
Field integer(std::string key, T RunConfig::*group, U T::*member) {
    return {key, [=](RunConfig& c, const std::string& v) { (c.*group).*member = static_cast<U>(parse_u64(key, v)); },
            [=](const RunConfig& c) { return std::to_string((c.*group).*member); }};
}

template <class T>
Field flag(std::string key, T RunConfig::*group, bool T::*member) {
    return {key, [=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_bool(key, v); },
            [=](const RunConfig& c) { return std::string((c.*group).*member ? "true" : "false"); }};
}

template <class T>
Field text(std::string key, T RunConfig::*group, std::string T::*member) {
    return {key, [=](RunConfig& c, const std::string& v) { (c.*group).*member = v; },
            [=](const RunConfig& c) { return (c.*group).*member; }};
}

inline Field path(std::string key, std::string RunConfig::*member) {
    return {key, [=](RunConfig& c, const std::string& v) { c.*member = v; }, [=](const RunConfig& c) { return c.*member; }};
}

inline const std::vector<Field>& fields() {
    using M = ModelConfig;
    using C = cohort::CohortSpec;
    static const std::vector<Field> all{
        integer("model_dim", &RunConfig::model, &M::model_dim),
        integer("heads", &RunConfig::model, &M::heads),
        integer("pe_dim", &RunConfig::model, &M::pe_dim),
        number("pe_zero_threshold", &RunConfig::model, &M::pe_zero_threshold),
        integer("gat_layers", &RunConfig::model, &M::gat_layers),
        integer("gat_hidden", &RunConfig::model, &M::gat_hidden),
        number("gat_slope", &RunConfig::model, &M::gat_slope),
        number("retention", &RunConfig::model, &M::retention),
        number("kl_epsilon", &RunConfig::model, &M::kl_epsilon),
        number("kl_weight", &RunConfig::model, &M::kl_weight),
        flag("kl_on_samples", &RunConfig::model, &M::kl_on_samples),
        number("tau_start", &RunConfig::model, &M::tau_start),
        number("tau_min", &RunConfig::model, &M::tau_min),
        number("tau_decay", &RunConfig::model, &M::tau_decay),
        number("window_s", &RunConfig::model, &M::window_s),
        number("stride_s", &RunConfig::model, &M::stride_s),
        text("band", &RunConfig::model, &M::band),
        text("correlation_source", &RunConfig::model, &M::correlation_source),
        number("learning_rate", &RunConfig::model, &M::learning_rate),
        integer("epochs", &RunConfig::model, &M::epochs),
        integer("batch_size", &RunConfig::model, &M::batch_size),
        flag("use_cwise", &RunConfig::model, &M::use_cwise),
        flag("use_pe", &RunConfig::model, &M::use_pe),
        flag("use_sr", &RunConfig::model, &M::use_sr),
        flag("use_fft", &RunConfig::model, &M::use_fft),
        number("prune_threshold", &RunConfig::model, &M::prune_threshold),
        number("noise_sigma", &RunConfig::model, &M::noise_sigma),
        integer("seed", &RunConfig::model, &M::seed),

        integer("cohort.n_channels", &RunConfig::cohort, &C::n_channels),
        integer("cohort.subjects_per_class", &RunConfig::cohort, &C::subjects_per_class),
        integer("cohort.classes", &RunConfig::cohort, &C::classes),
        number("cohort.sample_rate_hz", &RunConfig::cohort, &C::sample_rate_hz),
        number("cohort.duration_s", &RunConfig::cohort, &C::duration_s),
        integer("cohort.planted_per_class", &RunConfig::cohort, &C::planted_per_class),
        number("cohort.coupling", &RunConfig::cohort, &C::coupling),
        number("cohort.coupling_low_hz", &RunConfig::cohort, &C::coupling_low_hz),
        number("cohort.coupling_high_hz", &RunConfig::cohort, &C::coupling_high_hz),
        number("cohort.gain_low", &RunConfig::cohort, &C::gain_low),
        number("cohort.gain_high", &RunConfig::cohort, &C::gain_high),
        number("cohort.amplitude_jitter", &RunConfig::cohort, &C::amplitude_jitter),
        number("cohort.background_noise_std", &RunConfig::cohort, &C::background_noise_std),
        flag("cohort.match_power", &RunConfig::cohort, &C::match_power),
        text("cohort.contrast_band", &RunConfig::cohort, &C::contrast_band),
        number("cohort.contrast_step", &RunConfig::cohort, &C::contrast_step),
        number("cohort.train_fraction", &RunConfig::cohort, &C::train_fraction),
        integer("cohort.seed", &RunConfig::cohort, &C::seed),

        path("cohort_dir", &RunConfig::cohort_dir),
        path("reports_dir", &RunConfig::reports_dir),
        path("checkpoint", &RunConfig::checkpoint),
        {"top_k", [](RunConfig& c, const std::string& v) { c.top_k = parse_u64("top_k", v); },
         [](const RunConfig& c) { return std::to_string(c.top_k); }},
    };
    return all;
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : config_detail::fields()) keys.push_back(f.key);
    return keys;
}

inline void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    for (const auto& f : config_detail::fields())
        if (f.key == key) {
            f.set(config, value);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& config, const std::string& key) {
    for (const auto& f : config_detail::fields())
        if (f.key == key) return f.get(config);
    throw ConfigError("unknown config key '" + key + "'");
}

/// Applies one "key=value" assignment.
inline void apply_assignment(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set_config_value(config, config_detail::trim(assignment.substr(0, eq)), config_detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(RunConfig& config, std::istream& is, const std::string& origin = "config") {
    std::string line;
    for (std::size_t number = 1; std::getline(is, line); ++number) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        try {
            apply_assignment(config, line);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

inline void apply_config_file(RunConfig& config, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read config file '" + path + "'");
    apply_config_text(config, is, path);
}

/// Every key with its current value, one "key = value" line each, in a form
/// apply_config_text reads back to the same configuration.
inline std::string dump_config(const RunConfig& config) {
    std::ostringstream os;
    for (const auto& f : config_detail::fields()) os << f.key << " = " << f.get(config) << '\n';
    return os.str();
}

}  // namespace seegraph
