#pragma once

// Training loop, evaluation, ablations, the band sweep and explanation
// scoring against planted ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohort.hpp"
#include "errors.hpp"
#include "maskext.hpp"
#include "metrics.hpp"
#include "model_config.hpp"
#include "params.hpp"
#include "predictor.hpp"
#include "random.hpp"
#include "signal.hpp"

namespace seegraph::training {

/// Runs fn(0..n-1) on up to `threads` workers. Results must be written to
/// per-index slots; the first exception by index is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t k = 0; k < n; ++k) fn(k);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t k = w; k < n; k += threads) {
                try {
                    fn(k);
                } catch (...) {
                    errors[k] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct Sample {
    signal::DynamicGraphSequence seq;
    std::size_t label = 0;
    std::size_t subject = 0;  // index into the cohort
    std::string subject_id;
};

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> test;
    std::size_t feature_dim = 0;
    std::size_t classes = 0;
    std::vector<std::string> channels;
    std::vector<std::vector<cohort::PlantedEdge>> planted;
};

inline std::uint64_t noise_seed(const ModelConfig& config) { return rng::hash({config.seed, 0x4015EULL}); }

inline Sample prepare_sample(const signal::Recording& rec, std::size_t subject, const ModelConfig& config) {
    const auto band = signal::band_by_name(config.band, rec.sample_rate_hz);
    const signal::Recording input = cohort::add_noise(rec, config.noise_sigma, noise_seed(config));
    return {signal::build_sequence(input, config.windowing(rec.sample_rate_hz), band, config.sequence_options()), rec.label,
            subject, rec.subject_id};
}

/// Builds every subject's dynamic graph sequence for `config` (band, noise,
/// windowing, node feature kind). Throws EmptyBandError when the band has
/// no bins at the cohort's rate.
inline Dataset prepare(const cohort::LabeledCohort& c, const ModelConfig& config, std::size_t threads = 1) {
    config.validate();
    if (c.recordings.empty()) throw ValidationError("cohort has no recordings");
    signal::band_bins(config.windowing(c.spec.sample_rate_hz).window_samples,
                      signal::band_by_name(config.band, c.spec.sample_rate_hz), c.spec.sample_rate_hz);
    std::vector<Sample> all(c.recordings.size());
    parallel_for(all.size(), threads, [&](std::size_t k) { all[k] = prepare_sample(c.recordings[k], k, config); });
    Dataset d;
    d.classes = c.num_classes();
    d.channels = c.channels;
    d.planted = c.spec.planted;
    d.feature_dim = all.front().seq.feature_dim();
    for (std::size_t k = 0; k < all.size(); ++k) (c.splits.at(k) == cohort::Split::train ? d.train : d.test).push_back(std::move(all[k]));
    if (d.train.empty() || d.test.empty()) throw ValidationError("cohort needs both train and test subjects");
    return d;
}

// ---------------------------------------------------------------------------

struct Evaluation {
    metrics::Report report;
    double retention = 0.0;  // mean over subjects of the mean off-diagonal retention probability
    std::vector<std::size_t> truth;
    std::vector<std::vector<double>> probabilities;
};

inline Evaluation evaluate(const predictor::Model& model, const std::vector<Sample>& samples, double tau, std::size_t threads = 1) {
    if (samples.empty()) throw ValidationError("cannot evaluate an empty split");
    Evaluation ev;
    ev.truth.resize(samples.size());
    ev.probabilities.resize(samples.size());
    std::vector<double> retention(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t k) {
        ad::Tape tape;
        ParameterBinding bind(model.params(), tape, false);
        const auto fp = model.forward(tape, bind, samples[k].seq, mask::Mode::eval, tau, {});
        const Tensor p = fp.prediction.probabilities();
        ev.probabilities[k].assign(p.data().begin(), p.data().end());
        ev.truth[k] = samples[k].label;
        retention[k] = fp.retention();
    });
    ev.report = metrics::evaluate(ev.truth, ev.probabilities, model.num_classes());
    for (double r : retention) ev.retention += r;
    ev.retention /= static_cast<double>(samples.size());
    return ev;
}

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    double tau = 0.0;
    double retention = 0.0;
    double test_acc = 0.0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch}, {"loss", loss}, {"ce", ce}, {"kl", kl}, {"tau", tau}, {"retention", retention}, {"test_acc", test_acc}};
    }
};

struct RunOptions {
    std::size_t threads = 1;
    std::ostream* log = nullptr;  // receives one JSON line per epoch
    // Called after every forward pass of training, e.g. to check invariants.
    std::function<void(const predictor::ForwardPass&)> on_forward;
};

struct TrainResult {
    predictor::Model model;
    Evaluation final;
    std::vector<EpochLog> log;
};

/// Mini-batch Adam on cross-entropy + lambda * KL. One sample per subject;
/// the batch gradient is the mean of per-sample gradients, summed in sample
/// order so the thread count never changes results. The temperature follows
/// the schedule per epoch and the test split is scored after every epoch;
/// the final report is the last epoch's.
inline TrainResult train(const Dataset& data, const ModelConfig& config, const RunOptions& options = {}) {
    config.validate();
    if (data.train.empty() || data.test.empty()) throw ValidationError("training needs non-empty train and test splits");
    if (config.epochs == 0) throw ConfigError("epochs must be positive");
    TrainResult result{predictor::Model(config, data.feature_dim, data.classes), {}, {}};
    predictor::Model& model = result.model;
    ParameterStore& store = model.params();
    Adam adam(config.learning_rate);

    struct SampleOut {
        std::vector<Tensor> grads;
        double loss = 0.0, ce = 0.0, kl = 0.0, retention = 0.0;
    };

    std::vector<std::size_t> order(data.train.size());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double tau = mask::anneal(config.temperature(), epoch);
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        Stream shuffle(rng::hash({config.seed, 0x5F1EULL, epoch}));
        for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[shuffle.next_below(k)]);

        EpochLog entry;
        entry.epoch = epoch;
        entry.tau = tau;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += config.batch_size, ++batch) {
            const std::size_t size = std::min(config.batch_size, order.size() - start);
            std::vector<SampleOut> outs(size);
            try {
                parallel_for(size, options.threads, [&](std::size_t b) {
                    const Sample& s = data.train[order[start + b]];
                    ad::Tape tape;
                    ParameterBinding bind(store, tape, true);
                    const auto fp = model.forward(tape, bind, s.seq, mask::Mode::train, tau,
                                                  {config.seed, epoch, static_cast<std::uint64_t>(s.subject)});
                    if (options.on_forward) options.on_forward(fp);
                    const ad::Var loss = model.loss(fp, s.label);
                    tape.backward(loss);
                    SampleOut& o = outs[b];
                    o.grads = bind.gradients();
                    o.loss = loss.value().item();
                    o.kl = fp.kl.value().item();
                    o.ce = o.loss - config.prior().weight * o.kl;
                    o.retention = fp.retention();
                });
            } catch (const NumericalError& e) {
                throw TrainingError("non-finite value at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                                    ": " + e.what());
            }
            store.zero_grad();
            for (const SampleOut& o : outs) {
                if (!std::isfinite(o.loss))
                    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
                store.accumulate(o.grads, 1.0 / static_cast<double>(size));
                entry.loss += o.loss;
                entry.ce += o.ce;
                entry.kl += o.kl;
                entry.retention += o.retention;
            }
            adam.step(store);
        }
        const double n = static_cast<double>(order.size());
        entry.loss /= n;
        entry.ce /= n;
        entry.kl /= n;
        entry.retention /= n;
        result.final = evaluate(model, data.test, tau, options.threads);
        entry.test_acc = result.final.report.accuracy;
        result.log.push_back(entry);
        if (options.log) *options.log << entry.to_json().dump() << '\n' << std::flush;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablations.

inline const std::vector<std::string>& ablation_switches() {
    static const std::vector<std::string> names{"cwise", "pe", "sr", "fft"};
    return names;
}

/// `config` with one component removed: cwise -> global mask bias, pe -> no
/// positional encoding, sr -> lambda_KL = 0, fft -> raw window samples as
/// node features.
inline ModelConfig ablated(ModelConfig config, const std::string& name) {
    if (name == "cwise") config.use_cwise = false;
    else if (name == "pe") config.use_pe = false;
    else if (name == "sr") config.use_sr = false;
    else if (name == "fft") config.use_fft = false;
    else throw ConfigError("unknown ablation switch '" + name + "' (expected cwise, pe, sr or fft)");
    return config;
}

inline TrainResult ablate(const cohort::LabeledCohort& c, const ModelConfig& config, const std::string& name,
                          const RunOptions& options = {}) {
    const ModelConfig cfg = ablated(config, name);
    return train(prepare(c, cfg, options.threads), cfg, options);
}

// ---------------------------------------------------------------------------
// Band sweep.

struct BandRow {
    std::string band;
    std::optional<Evaluation> result;  // empty: band has no bins at this rate
    std::string note;
};

inline std::vector<std::string> sweep_bands() {
    auto names = signal::band_names();
    names.push_back("broadband");
    return names;
}

/// Train and evaluate once per clinical band plus broadband, with identical
/// seeds; only the band differs between rows.
inline std::vector<BandRow> band_sweep(const cohort::LabeledCohort& c, const ModelConfig& config, const RunOptions& options = {},
                                       const std::function<void(const BandRow&)>& on_row = {}) {
    std::vector<BandRow> rows;
    for (const auto& band : sweep_bands()) {
        ModelConfig cfg = config;
        cfg.band = band;
        BandRow row{band, std::nullopt, ""};
        try {
            const Dataset data = prepare(c, cfg, options.threads);
            RunOptions quiet = options;
            quiet.log = nullptr;
            row.result = train(data, cfg, quiet).final;
        } catch (const EmptyBandError& e) {
            row.note = e.what();
        }
        if (on_row) on_row(row);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Explanations.

struct SubjectExplanation {
    std::string subject_id;
    std::size_t label = 0;
    std::size_t predicted = 0;
    std::vector<mask::ExplainedEdge> edges;  // salience descending
};

inline std::vector<SubjectExplanation> explain(const predictor::Model& model, const std::vector<Sample>& samples, double tau,
                                               double prune_threshold = 0.0, std::size_t threads = 1) {
    std::vector<SubjectExplanation> out(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t k) {
        ad::Tape tape;
        ParameterBinding bind(model.params(), tape, false);
        const auto fp = model.forward(tape, bind, samples[k].seq, mask::Mode::eval, tau, {});
        const Tensor p = fp.prediction.probabilities();
        const auto& v = p.data();
        out[k] = {samples[k].subject_id, samples[k].label,
                  static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin()),
                  mask::rank_edges(fp.mask.symmetric.value(), fp.fused.fused_adjacency.value(), prune_threshold)};
    });
    return out;
}

inline void check_top_k(std::size_t k, std::size_t n_channels) {
    const std::size_t pairs = n_channels * (n_channels - 1) / 2;
    if (k == 0 || k > pairs)
        throw ConfigError("top-k must lie in [1, " + std::to_string(pairs) + "], got " + std::to_string(k));
}

/// |top-k edges in `ranked` that are planted| / k.
inline double precision_at_k(const std::vector<mask::ExplainedEdge>& ranked, const std::vector<cohort::PlantedEdge>& planted,
                             std::size_t k) {
    if (k == 0) throw ConfigError("top-k must be at least 1");
    std::size_t hits = 0;
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r)
        for (const auto& e : planted)
            if (e.same_pair({ranked[r].i, ranked[r].j, 1.0})) {
                ++hits;
                break;
            }
    return static_cast<double>(hits) / static_cast<double>(k);
}

/// Mean precision@k over subjects against each subject's own class planted set.
inline double explain_eval(const std::vector<SubjectExplanation>& explanations,
                           const std::vector<std::vector<cohort::PlantedEdge>>& planted, std::size_t k, std::size_t n_channels) {
    check_top_k(k, n_channels);
    if (explanations.empty()) throw ValidationError("no explanations to score");
    double total = 0.0;
    for (const auto& s : explanations) total += precision_at_k(s.edges, planted.at(s.label), k);
    return total / static_cast<double>(explanations.size());
}

// ---------------------------------------------------------------------------
// JSON exports.

inline nlohmann::json report_to_json(const Evaluation& ev) {
    const auto& r = ev.report;
    return {{"accuracy", r.accuracy},
            {"macro_auroc", r.macro_auroc},
            {"macro_f1", r.macro_f1},
            {"precision", r.precision},
            {"recall", r.recall},
            {"f1", r.f1},
            {"class_auroc", r.class_auroc},
            {"confusion", r.confusion},
            {"retention", ev.retention},
            {"test_count", r.count}};
}

inline nlohmann::json explanations_to_json(const std::vector<SubjectExplanation>& explanations,
                                           const std::vector<std::string>& channels) {
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& s : explanations) {
        nlohmann::json edges = nlohmann::json::array();
        for (const auto& e : s.edges)
            edges.push_back({{"i", e.i},
                             {"j", e.j},
                             {"channel_i", channels.at(e.i)},
                             {"channel_j", channels.at(e.j)},
                             {"mask", e.mask},
                             {"fused_weight", e.fused_weight},
                             {"salience", e.salience}});
        subjects.push_back({{"subject_id", s.subject_id}, {"predicted", s.predicted}, {"label", s.label}, {"edges", edges}});
    }
    return {{"subjects", subjects}};
}

}  // namespace seegraph::training
