// seegraph: synthesize cohorts, train, evaluate, explain and sweep bands.
//
// Exit codes: 0 success, 1 usage/validation/format errors, 2 training or
// numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "seegraph/cohort.hpp"
#include "seegraph/errors.hpp"
#include "seegraph/params.hpp"
#include "seegraph/run_config.hpp"
#include "seegraph/training.hpp"

namespace fs = std::filesystem;
using namespace seegraph;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
    std::string cohort;
    std::string checkpoint;
    std::optional<std::string> band;
    std::optional<double> noise_sigma;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "key = value config file");
    cmd->add_option("--set", c.sets, "override one config key (key=value); repeatable, last wins");
    cmd->add_option("--seed", c.seed, "random seed");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_flag("--force", c.force, "overwrite existing outputs");
}

RunConfig resolve_config(const Common& c, const std::optional<fs::path>& base = std::nullopt) {
    RunConfig rc;
    if (base && fs::exists(*base)) apply_config_file(rc, base->string());
    if (!c.config.empty()) apply_config_file(rc, c.config);
    for (const auto& s : c.sets) apply_assignment(rc, s);
    if (!c.cohort.empty()) rc.cohort_dir = c.cohort;
    if (c.band) rc.model.band = *c.band;
    if (c.noise_sigma) rc.model.noise_sigma = *c.noise_sigma;
    return rc;
}

std::size_t thread_count() {
    const char* v = std::getenv("SEEGRAPH_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const unsigned long long n = std::strtoull(v, &end, 10);
    if (*end != '\0' || n == 0) throw UsageError("SEEGRAPH_THREADS must be a positive integer");
    return static_cast<std::size_t>(n);
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw UsageError("cannot write '" + path.string() + "'");
    os << content;
    if (!os) throw UsageError("write to '" + path.string() + "' failed");
}

bool non_empty_dir(const fs::path& dir) { return fs::exists(dir) && fs::is_directory(dir) && !fs::is_empty(dir); }

cohort::LabeledCohort open_cohort(const RunConfig& rc) {
    if (!fs::exists(fs::path(rc.cohort_dir) / "manifest.json"))
        throw UsageError("no cohort manifest in '" + rc.cohort_dir + "' (run `seegraph synth` first)");
    return cohort::load_cohort(rc.cohort_dir);
}

std::string metrics_row(const std::string& label, const training::Evaluation& ev) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << std::left << std::setw(12) << label << std::right << std::setw(8)
       << ev.report.accuracy << std::setw(8) << ev.report.macro_auroc << std::setw(8) << ev.report.macro_f1 << std::setw(11)
       << ev.retention;
    return os.str();
}

std::string metrics_header() {
    std::ostringstream os;
    os << std::left << std::setw(12) << "run" << std::right << std::setw(8) << "ACC" << std::setw(8) << "AUROC" << std::setw(8)
       << "F1" << std::setw(11) << "retention";
    return os.str();
}

fs::path checkpoint_path(const RunConfig& rc, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (!rc.checkpoint.empty()) return rc.checkpoint;
    return fs::path(rc.reports_dir) / "model.sgwt";
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c, std::optional<std::size_t> subjects_per_class) {
    RunConfig rc = resolve_config(c);
    if (c.seed) rc.cohort.seed = *c.seed;
    if (subjects_per_class) rc.cohort.subjects_per_class = *subjects_per_class;
    const fs::path dir = c.out.empty() ? fs::path(rc.cohort_dir) : fs::path(c.out);
    rc.cohort_dir = dir.string();
    if (non_empty_dir(dir) && !c.force) throw UsageError("'" + dir.string() + "' is not empty; pass --force to overwrite");

    const auto cohort = cohort::generate_cohort(rc.cohort);
    if (c.force && fs::exists(dir))
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.path().extension() == ".sgrc") fs::remove(entry.path());
    cohort::write_cohort(cohort, dir);
    write_file(dir / "config.txt", dump_config(rc));

    std::map<std::size_t, std::pair<std::size_t, std::size_t>> counts;
    for (std::size_t k = 0; k < cohort.recordings.size(); ++k)
        (cohort.splits[k] == cohort::Split::train ? counts[cohort.recordings[k].label].first
                                                  : counts[cohort.recordings[k].label].second)++;
    std::cout << "wrote " << cohort.recordings.size() << " recordings to " << dir.string() << '\n';
    for (const auto& [label, tt] : counts)
        std::cout << "class " << label << ": " << tt.first << " train, " << tt.second << " test\n";
    return 0;
}

int cmd_train(const Common& c, const std::optional<std::string>& ablate) {
    RunConfig rc = resolve_config(c);
    if (c.seed) rc.model.seed = *c.seed;
    if (!c.out.empty()) rc.reports_dir = c.out;
    if (ablate) rc.model = training::ablated(rc.model, *ablate);
    rc.model.validate();
    const fs::path out(rc.reports_dir);
    if (fs::exists(out / "metrics.json") && !c.force)
        throw UsageError("'" + out.string() + "' already holds a training run; pass --force to overwrite");
    const auto cohort = open_cohort(rc);
    fs::create_directories(out);
    const fs::path ckpt = checkpoint_path(rc, c.checkpoint);
    rc.checkpoint = ckpt.string();
    write_file(out / "config.txt", dump_config(rc));

    const std::size_t threads = thread_count();
    const auto data = training::prepare(cohort, rc.model, threads);
    std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
    training::RunOptions options;
    options.threads = threads;
    options.log = &log;
    const auto result = training::train(data, rc.model, options);

    save_checkpoint(result.model.params(), ckpt.string());
    write_file(out / "metrics.json", training::report_to_json(result.final).dump(2) + "\n");
    std::cout << metrics_header() << '\n' << metrics_row(ablate ? "w/o " + *ablate : "full", result.final) << '\n';
    return 0;
}

struct LoadedModel {
    RunConfig rc;
    cohort::LabeledCohort cohort;
    training::Dataset data;
    predictor::Model model;
};

LoadedModel load_model(const Common& c) {
    RunConfig probe = resolve_config(c);
    const fs::path ckpt = checkpoint_path(probe, c.checkpoint);
    if (!fs::exists(ckpt)) throw UsageError("checkpoint '" + ckpt.string() + "' not found");
    RunConfig rc = resolve_config(c, ckpt.parent_path() / "config.txt");
    if (c.seed) rc.model.seed = *c.seed;
    rc.checkpoint = ckpt.string();
    auto cohort = open_cohort(rc);
    auto data = training::prepare(cohort, rc.model, thread_count());
    predictor::Model model(rc.model, data.feature_dim, data.classes);
    load_checkpoint(model.params(), ckpt.string());
    return {std::move(rc), std::move(cohort), std::move(data), std::move(model)};
}

fs::path output_dir(const Common& c, const RunConfig& rc) {
    const fs::path dir = c.out.empty() ? fs::path(rc.checkpoint).parent_path() : fs::path(c.out);
    fs::create_directories(dir.empty() ? fs::path(".") : dir);
    return dir.empty() ? fs::path(".") : dir;
}

int cmd_eval(const Common& c) {
    const auto m = load_model(c);
    const auto ev = training::evaluate(m.model, m.data.test, m.rc.model.final_tau(), thread_count());
    const fs::path dir = output_dir(c, m.rc);
    write_file(dir / "eval_metrics.json", training::report_to_json(ev).dump(2) + "\n");
    write_file(dir / "eval_config.txt", dump_config(m.rc));
    std::cout << metrics_header() << '\n' << metrics_row("test", ev) << '\n';
    return 0;
}

std::string dot_graph(const std::vector<training::SubjectExplanation>& ex, const std::vector<std::string>& channels,
                      std::size_t top_k) {
    const std::size_t n = channels.size();
    std::vector<double> mean(n * n, 0.0);
    for (const auto& s : ex)
        for (const auto& e : s.edges) mean[e.i * n + e.j] += e.salience / static_cast<double>(ex.size());
    std::vector<mask::ExplainedEdge> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) edges.push_back({i, j, 0.0, 0.0, mean[i * n + j]});
    std::stable_sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) { return a.salience > b.salience; });
    edges.resize(std::min(top_k, edges.size()));
    const double peak = edges.empty() || edges.front().salience <= 0.0 ? 1.0 : edges.front().salience;

    std::ostringstream os;
    os << "graph explanation {\n  node [shape=circle];\n";
    for (std::size_t i = 0; i < n; ++i) os << "  n" << i << " [label=\"" << channels[i] << "\"];\n";
    os << std::setprecision(4);
    for (const auto& e : edges)
        os << "  n" << e.i << " -- n" << e.j << " [penwidth=" << 0.5 + 4.5 * e.salience / peak << ", label=\"" << e.salience
           << "\"];\n";
    os << "}\n";
    return os.str();
}

int cmd_explain(const Common& c, std::optional<std::size_t> top_k, bool dot) {
    const auto m = load_model(c);
    const std::size_t k = top_k.value_or(m.rc.top_k);
    const std::size_t n = m.cohort.channels.size();
    if (k == 0 || k > n * (n - 1) / 2)
        throw UsageError("--top-k must lie in [1, " + std::to_string(n * (n - 1) / 2) + "], got " + std::to_string(k));
    const auto ex = training::explain(m.model, m.data.test, m.rc.model.final_tau(), m.rc.model.prune_threshold, thread_count());
    nlohmann::json doc = training::explanations_to_json(ex, m.cohort.channels);
    doc["top_k"] = k;
    const bool has_truth = !m.cohort.spec.planted.empty();
    double precision = 0.0;
    if (has_truth) {
        precision = training::explain_eval(ex, m.cohort.spec.planted, k, m.cohort.channels.size());
        doc["precision_at_k"] = precision;
    }
    const fs::path dir = output_dir(c, m.rc);
    write_file(dir / "explanations.json", doc.dump(2) + "\n");
    if (dot) write_file(dir / "explanations.dot", dot_graph(ex, m.cohort.channels, k));
    std::cout << "explained " << ex.size() << " test subjects";
    if (has_truth) std::cout << "; precision@" << k << " = " << std::fixed << std::setprecision(4) << precision;
    std::cout << '\n';
    return 0;
}

int cmd_bands(const Common& c) {
    RunConfig rc = resolve_config(c);
    if (c.seed) rc.model.seed = *c.seed;
    if (!c.out.empty()) rc.reports_dir = c.out;
    rc.model.validate();
    const auto cohort = open_cohort(rc);
    const fs::path out(rc.reports_dir);
    fs::create_directories(out);
    write_file(out / "bands_config.txt", dump_config(rc));

    training::RunOptions options;
    options.threads = thread_count();
    std::cout << metrics_header() << '\n';
    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream table;
    table << metrics_header() << '\n';
    training::band_sweep(cohort, rc.model, options, [&](const training::BandRow& row) {
        std::string line;
        if (row.result) {
            line = metrics_row(row.band, *row.result);
            nlohmann::json j = training::report_to_json(*row.result);
            j["band"] = row.band;
            rows.push_back(j);
        } else {
            std::ostringstream os;
            os << std::left << std::setw(12) << row.band << std::right << std::setw(8) << "NA" << std::setw(8) << "NA"
               << std::setw(8) << "NA" << std::setw(11) << "NA";
            line = os.str();
            rows.push_back({{"band", row.band}, {"accuracy", nullptr}, {"macro_auroc", nullptr}, {"macro_f1", nullptr}, {"note", row.note}});
        }
        std::cout << line << '\n' << std::flush;
        table << line << '\n';
    });
    write_file(out / "bands.json", nlohmann::json{{"seed", rc.model.seed}, {"rows", rows}}.dump(2) + "\n");
    write_file(out / "bands.txt", table.str());
    return 0;
}

int exit_code(const Error& e) {
    const std::string cat = e.category();
    return (cat == "TrainingError" || cat == "NumericalError" || cat == "DomainError") ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse explanatory dynamic EEG-graph network"};
    app.require_subcommand(1);

    Common synth_opts, train_opts, eval_opts, explain_opts, bands_opts;
    std::optional<std::size_t> subjects_per_class, top_k;
    std::optional<std::string> ablate;
    bool dot = false;

    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort with planted connectivity");
    add_common(synth, synth_opts);
    synth->add_option("--subjects-per-class", subjects_per_class, "subjects per class");

    auto* train = app.add_subcommand("train", "train on a cohort and write checkpoint, metrics and run log");
    add_common(train, train_opts);
    train->add_option("--cohort", train_opts.cohort, "cohort directory");
    train->add_option("--band", train_opts.band, "delta, theta, alpha, beta, gamma or broadband");
    train->add_option("--noise-sigma", train_opts.noise_sigma, "Gaussian noise added to z-scored inputs");
    train->add_option("--ablate", ablate, "remove one component")->check(CLI::IsMember({"cwise", "pe", "sr", "fft"}));
    train->add_option("--checkpoint", train_opts.checkpoint, "checkpoint path");

    auto* eval = app.add_subcommand("eval", "score a checkpoint on the test split");
    add_common(eval, eval_opts);
    eval->add_option("--cohort", eval_opts.cohort, "cohort directory");
    eval->add_option("--checkpoint", eval_opts.checkpoint, "checkpoint path");
    eval->add_option("--band", eval_opts.band, "frequency band");
    eval->add_option("--noise-sigma", eval_opts.noise_sigma, "Gaussian noise added to z-scored inputs");

    auto* explain = app.add_subcommand("explain", "export ranked edge salience per test subject");
    add_common(explain, explain_opts);
    explain->add_option("--cohort", explain_opts.cohort, "cohort directory");
    explain->add_option("--checkpoint", explain_opts.checkpoint, "checkpoint path");
    explain->add_option("--top-k", top_k, "edges scored against the planted set");
    explain->add_flag("--dot", dot, "also write a DOT graph of the top edges");

    auto* bands = app.add_subcommand("bands", "train and evaluate once per frequency band");
    add_common(bands, bands_opts);
    bands->add_option("--cohort", bands_opts.cohort, "cohort directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_opts, subjects_per_class);
        if (train->parsed()) return cmd_train(train_opts, ablate);
        if (eval->parsed()) return cmd_eval(eval_opts);
        if (explain->parsed()) return cmd_explain(explain_opts, top_k, dot);
        if (bands->parsed()) return cmd_bands(bands_opts);
    } catch (const Error& e) {
        std::cerr << "seegraph: " << e.what() << '\n';
        return exit_code(e);
    } catch (const std::exception& e) {
        std::cerr << "seegraph: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
