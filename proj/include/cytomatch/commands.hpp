#ifndef CYTOMATCH_COMMANDS_HPP
#define CYTOMATCH_COMMANDS_HPP

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "detail/parallel.hpp"
#include "em.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "experiment.hpp"
#include "impute.hpp"
#include "model_io.hpp"
#include "panel.hpp"
#include "synthetic.hpp"

/**
 * @file commands.hpp
 *
 * @brief The command implementations behind the `cytomatch` executable. Each one reads its inputs from a
 * RunConfig, writes its artifacts (plus `config.json`) into the output directory and returns what it computed.
 */

namespace cytomatch::cli {

namespace detail {

/** Reruns `body`, prefixing any library error with the stage name while keeping its exit-code class. */
template <typename F>
auto stage(const std::string& name, F&& body) -> decltype(body()) {
    try {
        return body();
    } catch (const InputError& e) {
        throw InputError(name + ": " + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(name + ": " + e.what());
    }
}

inline std::filesystem::path prepare_output(const RunConfig& cfg) {
    const std::filesystem::path dir(cfg.output_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw LoadError("cannot create output directory '" + dir.string() + "': " + ec.message());
    }
    std::ofstream out(dir / "config.json", std::ios::binary);
    if (!out) {
        throw LoadError("cannot write '" + (dir / "config.json").string() + "'");
    }
    out << config_to_json(cfg).dump(2) << '\n';
    return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw LoadError("cannot write '" + path.string() + "'");
    }
    out << text;
    if (!out) {
        throw LoadError("error while writing '" + path.string() + "'");
    }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
    write_text(path, doc.dump(2) + "\n");
}

inline MaskedMatrix load_input(const std::string& path, const std::string& key, const RunConfig& cfg) {
    if (path.empty()) {
        throw ConfigError("inputs." + key + " is required");
    }
    return load_table(path, cfg.inputs.missing_token);
}

inline MaskedMatrix tag(const MaskedMatrix& m, SourceFile file) {
    return m.with_sources(std::vector<SourceFile>(static_cast<std::size_t>(m.rows()), file));
}

inline void write_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
    std::string text = "row,cluster\n";
    for (std::size_t r = 0; r < labels.size(); ++r) {
        text += std::to_string(r) + ',' + std::to_string(labels[r]) + '\n';
    }
    write_text(path, text);
}

inline void write_trace(const std::filesystem::path& path, const MixtureModel& model) {
    std::string text = "iteration,loglik\n";
    for (std::size_t i = 0; i < model.trace.size(); ++i) {
        text += std::to_string(i) + ',';
        cytomatch::detail::append_number(text, model.trace[i]);
        text += '\n';
    }
    write_text(path, text);
}

/** Columns every row of both files observes are common; the rest belong to whichever file observes them. */
inline FilePattern infer_pattern(const MaskedMatrix& file1, const MaskedMatrix& file2) {
    if (file1.columns() != file2.columns()) {
        throw ConfigError("both files must have the same header");
    }
    FilePattern pattern;
    for (Index c = 0; c < file1.cols(); ++c) {
        const bool all1 = file1.mask().col(c).all();
        const bool all2 = file2.mask().col(c).all();
        const auto& name = file1.columns()[static_cast<std::size_t>(c)];
        if (all1 && all2) {
            pattern.common.push_back(name);
        } else if (all1) {
            pattern.specific1.push_back(name);
        } else if (all2) {
            pattern.specific2.push_back(name);
        } else {
            throw ConfigError("column '" + name + "' is observed completely in neither file; give the pattern explicitly");
        }
    }
    return pattern;
}

inline FilePattern resolve_pattern(const RunConfig& cfg, const MaskedMatrix& file1, const MaskedMatrix& file2) {
    auto pattern = cfg.pattern ? *cfg.pattern : infer_pattern(file1, file2);
    pattern.validate(file1.columns());
    return pattern;
}

inline const PanelConfig& require_panel(const RunConfig& cfg) {
    if (!cfg.panel) {
        throw ConfigError("a panel is required for clustering");
    }
    return *cfg.panel;
}

inline FitOptions fit_options(const RunConfig& cfg) {
    FitOptions options;
    options.tol = cfg.model.tol;
    options.max_iter = cfg.model.max_iter;
    return options;
}

inline NnOptions nn_options(const RunConfig& cfg) {
    NnOptions options;
    options.standardize = cfg.impute.standardize;
    return options;
}

inline nlohmann::json kl_to_json(const KlReport& report, int file) {
    return {{"method", report.method}, {"file", file}, {"value", report.value}, {"n_eval", report.n_eval},
            {"kernel", report.kernel}, {"bandwidth_rule", report.bandwidth_rule}, {"terms", report.terms}};
}

inline std::string format_cell(double mean, std::optional<double> stderr_) {
    char buffer[64];
    if (stderr_) {
        std::snprintf(buffer, sizeof(buffer), "%.4f +/- %.4f", mean, *stderr_);
    } else {
        std::snprintf(buffer, sizeof(buffer), "%.4f", mean);
    }
    return buffer;
}

inline void write_scatter(const std::filesystem::path& dir, const MatchedOutput& matched, const FilePattern& pattern) {
    for (const auto& a : pattern.specific1) {
        for (const auto& b : pattern.specific2) {
            std::string text = "file," + a + ',' + b + '\n';
            int file = 1;
            for (const auto* completed : {&matched.file1.completed, &matched.file2.completed}) {
                const auto ia = completed->column_index(a);
                const auto ib = completed->column_index(b);
                for (Index r = 0; r < completed->rows(); ++r) {
                    text += std::to_string(file) + ',';
                    cytomatch::detail::append_number(text, completed->value(r, ia));
                    text += ',';
                    cytomatch::detail::append_number(text, completed->value(r, ib));
                    text += '\n';
                }
                ++file;
            }
            write_text(dir / ("scatter_" + a + "_" + b + ".csv"), text);
        }
    }
}

}

/** Writes `data.csv` (complete synthetic table) and `labels.csv` (generating component per row). */
inline LabelledSample cmd_simulate(const RunConfig& cfg) {
    const auto dir = detail::prepare_output(cfg);
    const auto sample = detail::stage("simulate", [&] {
        GaussianMixtureSpec spec;
        if (cfg.simulate.generator == "toy") {
            spec = toy_mixture();
        } else if (cfg.simulate.generator == "panel") {
            PanelSyntheticOptions options;
            options.weights = cfg.simulate.weights;
            options.covariance_seed = cfg.simulate.covariance_seed;
            spec = panel_mixture(cfg.panel ? *cfg.panel : lymph_node_panel(), options);
        } else {
            throw ConfigError("unknown generator '" + cfg.simulate.generator + "' (expected 'panel' or 'toy')");
        }
        if (cfg.simulate.rows < 2) {
            throw ConfigError("simulate.rows must be at least 2");
        }
        return sample_mixture(spec, cfg.simulate.rows, cfg.simulate.seed);
    });
    write_table(sample.data, (dir / "data.csv").string());
    detail::write_labels(dir / "labels.csv", sample.labels);
    return sample;
}

/**
 * Splits `inputs.data` into `file1.csv` and `file2.csv` (pattern applied), the held-out `eval.csv`, and
 * `truth1.csv` / `truth2.csv` holding the true values of the file rows in the same order.
 */
inline MatchingSplit cmd_split(const RunConfig& cfg) {
    const auto data = detail::stage("load", [&] { return detail::load_input(cfg.inputs.data, "data", cfg); });
    if (!cfg.pattern) {
        throw ConfigError("split: a file pattern is required");
    }
    const auto dir = detail::prepare_output(cfg);
    const auto split = detail::stage("split", [&] {
        return split_for_matching(data, SplitSpec{cfg.split.n1, cfg.split.n2, cfg.split.n_eval, cfg.split.seed, *cfg.pattern});
    });
    write_table(split.file1, (dir / "file1.csv").string());
    write_table(split.file2, (dir / "file2.csv").string());
    write_table(split.evaluation, (dir / "eval.csv").string());
    write_table(data.select_rows(split.file1.row_ids()), (dir / "truth1.csv").string());
    write_table(data.select_rows(split.file2.row_ids()), (dir / "truth2.csv").string());
    return split;
}

/** Per-marker `histogram_<marker>.csv` bin tables plus `peaks.json`. */
inline PeakReport cmd_histogram(const RunConfig& cfg) {
    const auto data = detail::stage("load", [&] {
        if (!cfg.inputs.data.empty()) {
            return detail::load_input(cfg.inputs.data, "data", cfg);
        }
        return concatenate(detail::load_input(cfg.inputs.file1, "file1", cfg), detail::load_input(cfg.inputs.file2, "file2", cfg));
    });
    const auto dir = detail::prepare_output(cfg);
    const auto markers = cfg.histogram.markers.empty() ? data.columns() : cfg.histogram.markers;
    const auto report = detail::stage("histogram", [&] { return histogram_report(data, markers, cfg.histogram.options); });

    nlohmann::json peaks = nlohmann::json::array();
    for (const auto& det : report.markers) {
        std::string text = "bin_left,bin_right,count,smoothed\n";
        const auto& h = det.histogram;
        for (std::size_t b = 0; b < h.counts.size(); ++b) {
            cytomatch::detail::append_number(text, h.edges[b]);
            text += ',';
            cytomatch::detail::append_number(text, h.edges[b + 1]);
            text += ',';
            cytomatch::detail::append_number(text, h.counts[b]);
            text += ',';
            cytomatch::detail::append_number(text, h.smoothed[b]);
            text += '\n';
        }
        detail::write_text(dir / ("histogram_" + det.marker + ".csv"), text);

        nlohmann::json found = nlohmann::json::array();
        for (const auto& p : det.peaks) {
            found.push_back({{"location", p.location}, {"height", p.height}, {"prominence", p.prominence}});
        }
        peaks.push_back({{"marker", det.marker}, {"peaks", found}, {"negative", det.levels.negative},
                         {"positive", det.levels.positive}, {"single_peak", det.single_peak}});
    }
    detail::write_json(dir / "peaks.json", {{"bins", cfg.histogram.options.bins}, {"smoothing", cfg.histogram.options.smoothing}, {"markers", peaks}});
    return report;
}

namespace detail {

inline void write_model(const std::filesystem::path& dir, const MixtureModel& model, const RunConfig& cfg) {
    auto doc = model_to_json(model);
    doc["config"] = config_to_json(cfg);
    write_json(dir / "model.json", doc);
    write_trace(dir / "trace.csv", model);
}

}

/**
 * Fits the mixture to `inputs.file1` and `inputs.file2` together when both are given, otherwise to `inputs.data` alone, and writes
 * `model.json`, `trace.csv` and the per-file labels.
 */
inline ClusteringResult cmd_fit(const RunConfig& cfg) {
    const auto& panel = detail::require_panel(cfg);
    if (cfg.inputs.file1.empty() || cfg.inputs.file2.empty()) {
        const auto data = detail::stage("load", [&] { return detail::load_input(cfg.inputs.data, "data", cfg); });
        const auto dir = detail::prepare_output(cfg);
        ClusteringResult out;
        out.panel = detail::stage("detect_levels", [&] { return resolve_levels(panel, data, cfg.histogram.options); });
        const auto means = detail::stage("initial_means", [&] { return component_means(out.panel, data.columns(), cfg.model.components); });
        const auto model0 = detail::stage("init_model", [&] { return init_model(data, means, cfg.model.latent_dim, cfg.model.seed); });
        out.model = detail::stage("fit", [&] { return fit(model0, data, detail::fit_options(cfg)); });
        out.labels1 = detail::stage("classify", [&] { return classify(out.model, data); });
        detail::write_model(dir, out.model, cfg);
        detail::write_labels(dir / "labels.csv", out.labels1);
        return out;
    }

    const auto file1 = detail::stage("load", [&] { return detail::tag(detail::load_input(cfg.inputs.file1, "file1", cfg), SourceFile::file1); });
    const auto file2 = detail::stage("load", [&] { return detail::tag(detail::load_input(cfg.inputs.file2, "file2", cfg), SourceFile::file2); });
    const auto dir = detail::prepare_output(cfg);
    auto out = detail::stage("fit", [&] {
        return cluster_files(file1, file2, panel, cfg.model.components, cfg.model.latent_dim, detail::fit_options(cfg), cfg.model.seed,
                             cfg.histogram.options);
    });
    detail::write_model(dir, out.model, cfg);
    detail::write_labels(dir / "labels_file1.csv", out.labels1);
    detail::write_labels(dir / "labels_file2.csv", out.labels2);
    return out;
}

namespace detail {

inline void write_matched(const std::filesystem::path& dir, const MatchedOutput& matched, const MaskedMatrix& file1,
                          const MaskedMatrix& file2, const FilePattern& pattern) {
    write_table(matched.file1.completed, (dir / "completed_file1.csv").string());
    write_table(matched.file2.completed, (dir / "completed_file2.csv").string());
    write_provenance(matched.file1, file2, (dir / "provenance_file1.csv").string());
    write_provenance(matched.file2, file1, (dir / "provenance_file2.csv").string());
    write_scatter(dir, matched, pattern);
}

}

/**
 * Imputes both files from each other. `cluster-nn` labels rows with the model in `inputs.model`;
 * `nn` needs no model.
 */
inline MatchedOutput cmd_impute(const RunConfig& cfg) {
    const auto file1 = detail::stage("load", [&] { return detail::load_input(cfg.inputs.file1, "file1", cfg); });
    const auto file2 = detail::stage("load", [&] { return detail::load_input(cfg.inputs.file2, "file2", cfg); });
    std::optional<MixtureModel> model;
    if (cfg.impute.method == ImputeMethod::cluster_nn) {
        if (cfg.inputs.model.empty()) {
            throw ConfigError("impute: cluster-nn needs inputs.model");
        }
        model = detail::stage("load", [&] { return load_model(cfg.inputs.model); });
    }
    const auto pattern = detail::stage("pattern", [&] { return detail::resolve_pattern(cfg, file1, file2); });
    const auto dir = detail::prepare_output(cfg);

    std::vector<int> labels1;
    std::vector<int> labels2;
    if (model) {
        labels1 = detail::stage("classify", [&] { return classify(*model, file1); });
        labels2 = detail::stage("classify", [&] { return classify(*model, file2); });
    }
    const auto matched = detail::stage("impute", [&] {
        return match_files(file1, file2, pattern.common, cfg.impute.method, labels1, labels2, detail::nn_options(cfg));
    });
    detail::write_matched(dir, matched, file1, file2, pattern);
    return matched;
}

/** What `match` produced; `kl` is filled only when truth files were supplied. */
struct MatchRun {
    FilePattern pattern;
    std::optional<ClusteringResult> clustering;
    std::optional<MatchedOutput> matched;
    std::optional<std::array<KlReport, 2>> kl;
};

/**
 * The whole pipeline: load, detect missing levels, initialize, fit, classify, impute, write.
 * With `inputs.truth1`, `inputs.truth2` and `inputs.eval` it also scores each file and writes `kl_report.json`.
 */
inline MatchRun cmd_match(const RunConfig& cfg, std::ostream* table = nullptr) {
    const auto file1 = detail::stage("load", [&] { return detail::tag(detail::load_input(cfg.inputs.file1, "file1", cfg), SourceFile::file1); });
    const auto file2 = detail::stage("load", [&] { return detail::tag(detail::load_input(cfg.inputs.file2, "file2", cfg), SourceFile::file2); });
    const bool scored = !cfg.inputs.truth1.empty() || !cfg.inputs.truth2.empty() || !cfg.inputs.eval.empty();
    std::optional<MaskedMatrix> truth1, truth2, eval;
    if (scored) {
        truth1 = detail::stage("load", [&] { return detail::load_input(cfg.inputs.truth1, "truth1", cfg); });
        truth2 = detail::stage("load", [&] { return detail::load_input(cfg.inputs.truth2, "truth2", cfg); });
        eval = detail::stage("load", [&] { return detail::load_input(cfg.inputs.eval, "eval", cfg); });
        if (truth1->rows() != file1.rows() || truth2->rows() != file2.rows()) {
            throw SizeError("truth files must have the same number of rows as the files they describe");
        }
    }

    MatchRun run;
    run.pattern = detail::stage("pattern", [&] { return detail::resolve_pattern(cfg, file1, file2); });
    const auto dir = detail::prepare_output(cfg);

    std::vector<int> labels1;
    std::vector<int> labels2;
    if (cfg.impute.method == ImputeMethod::cluster_nn) {
        const auto& panel = detail::require_panel(cfg);
        const auto combined = concatenate(file1, file2);
        const auto resolved = detail::stage("detect_levels", [&] { return resolve_levels(panel, combined, cfg.histogram.options); });
        const auto means = detail::stage("initial_means", [&] { return component_means(resolved, combined.columns(), cfg.model.components); });
        const auto model0 = detail::stage("init_model", [&] { return init_model(combined, means, cfg.model.latent_dim, cfg.model.seed); });
        ClusteringResult clustering{resolved, detail::stage("fit", [&] { return fit(model0, combined, detail::fit_options(cfg)); }), {}, {}};
        clustering.labels1 = detail::stage("classify", [&] { return classify(clustering.model, file1); });
        clustering.labels2 = detail::stage("classify", [&] { return classify(clustering.model, file2); });
        labels1 = clustering.labels1;
        labels2 = clustering.labels2;
        detail::write_model(dir, clustering.model, cfg);
        detail::write_labels(dir / "labels_file1.csv", labels1);
        detail::write_labels(dir / "labels_file2.csv", labels2);
        run.clustering = std::move(clustering);
    }

    run.matched = detail::stage("impute", [&] {
        return match_files(file1, file2, run.pattern.common, cfg.impute.method, labels1, labels2, detail::nn_options(cfg));
    });
    detail::write_matched(dir, *run.matched, file1, file2, run.pattern);

    if (scored) {
        run.kl = detail::stage("evaluate", [&] {
            const auto method = to_string(cfg.impute.method);
            const auto held1 = apply_pattern(*eval, run.pattern, SourceFile::file1);
            const auto held2 = apply_pattern(*eval, run.pattern, SourceFile::file2);
            auto impute_held = [&](const MaskedMatrix& held, const MaskedMatrix& donors, const std::vector<int>& donor_labels) {
                if (run.clustering) {
                    return cluster_nn_impute(held, donors, classify(run.clustering->model, held), donor_labels, run.pattern.common, detail::nn_options(cfg));
                }
                return nn_impute(held, donors, run.pattern.common, detail::nn_options(cfg));
            };
            const auto eval1 = impute_held(held1, file2, labels2);
            const auto eval2 = impute_held(held2, file1, labels1);
            return std::array<KlReport, 2>{empirical_kl(run.matched->file1.completed, *truth1, eval1.completed, method),
                                           empirical_kl(run.matched->file2.completed, *truth2, eval2.completed, method)};
        });
        detail::write_json(dir / "kl_report.json", {{"schema", "cytomatch.kl_report"},
                                                    {"version", 1},
                                                    {"entries", {detail::kl_to_json((*run.kl)[0], 1), detail::kl_to_json((*run.kl)[1], 2)}},
                                                    {"config", config_to_json(cfg)}});
        if (table) {
            *table << "method     | file 1   | file 2\n";
            *table << to_string(cfg.impute.method) << std::string(11 - to_string(cfg.impute.method).size(), ' ') << "| "
                   << detail::format_cell((*run.kl)[0].value, std::nullopt) << "   | " << detail::format_cell((*run.kl)[1].value, std::nullopt) << '\n';
        }
    }
    return run;
}

/** The KL table with one row per data set and, per file, the NN and cluster-NN columns. */
inline std::string format_kl_table(const std::string& label, const ExperimentSummary& summary) {
    const std::array<std::string, 5> header{"ID", "NN (file 1)", "Cluster NN (file 1)", "NN (file 2)", "Cluster NN (file 2)"};
    std::array<std::string, 5> row{label,
                                   detail::format_cell(summary.kl[0][0].mean, summary.kl[0][0].stderr_),
                                   detail::format_cell(summary.kl[1][0].mean, summary.kl[1][0].stderr_),
                                   detail::format_cell(summary.kl[0][1].mean, summary.kl[0][1].stderr_),
                                   detail::format_cell(summary.kl[1][1].mean, summary.kl[1][1].stderr_)};
    std::ostringstream out;
    for (const auto* line : std::array<const std::array<std::string, 5>*, 2>{&header, &row}) {
        for (std::size_t i = 0; i < line->size(); ++i) {
            const auto width = std::max(header[i].size(), row[i].size());
            out << (i ? " | " : "") << (*line)[i] << std::string(width - (*line)[i].size(), ' ');
        }
        out << '\n';
    }
    return out.str();
}

/**
 * Repeats split, match and scoring on the complete table `inputs.data` for `evaluate.repetitions` seeds
 * (split.seed, split.seed + 1, ...). Writes `kl_report.json` and `kl_table.csv`.
 */
inline ExperimentSummary cmd_evaluate(const RunConfig& cfg, std::ostream* table = nullptr) {
    const auto data = detail::stage("load", [&] { return detail::load_input(cfg.inputs.data, "data", cfg); });
    if (!cfg.pattern) {
        throw ConfigError("evaluate: a file pattern is required");
    }
    const auto& panel = detail::require_panel(cfg);
    const auto dir = detail::prepare_output(cfg);

    ExperimentConfig experiment;
    experiment.pattern = *cfg.pattern;
    experiment.n1 = cfg.split.n1;
    experiment.n2 = cfg.split.n2;
    experiment.n_eval = cfg.split.n_eval;
    experiment.panel = panel;
    experiment.components = cfg.model.components;
    experiment.latent_dim = cfg.model.latent_dim;
    experiment.fit = detail::fit_options(cfg);
    experiment.model_seed = cfg.model.seed;
    experiment.nn = detail::nn_options(cfg);
    experiment.histogram = cfg.histogram.options;

    const auto summary = detail::stage("evaluate", [&] { return run_experiment(data, experiment, cfg.evaluate.repetitions, cfg.split.seed); });

    const std::array<std::string, 2> methods{to_string(ImputeMethod::nn), to_string(ImputeMethod::cluster_nn)};
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : summary.runs) {
        nlohmann::json kl;
        for (std::size_t m = 0; m < 2; ++m) {
            kl[methods[m]] = {run.kl[m][0], run.kl[m][1]};
        }
        runs.push_back({{"seed", run.seed}, {"kl", kl}, {"em_iterations", run.em_iterations}, {"fallbacks", run.fallbacks}});
    }
    nlohmann::json stats;
    std::string csv = "method,file,mean,stderr,count\n";
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t f = 0; f < 2; ++f) {
            const auto& s = summary.kl[m][f];
            stats[methods[m]]["file" + std::to_string(f + 1)] = {{"mean", s.mean}, {"stderr", s.stderr_}, {"count", s.count}};
            csv += methods[m] + ',' + std::to_string(f + 1) + ',';
            cytomatch::detail::append_number(csv, s.mean);
            csv += ',';
            cytomatch::detail::append_number(csv, s.stderr_);
            csv += ',' + std::to_string(s.count) + '\n';
        }
    }
    detail::write_json(dir / "kl_report.json", {{"schema", "cytomatch.kl_report"},
                                                {"version", 1},
                                                {"kernel", KlReport{}.kernel},
                                                {"bandwidth_rule", KlReport{}.bandwidth_rule},
                                                {"label", cfg.evaluate.label},
                                                {"runs", runs},
                                                {"summary", stats},
                                                {"config", config_to_json(cfg)}});
    detail::write_text(dir / "kl_table.csv", csv);
    if (table) {
        *table << format_kl_table(cfg.evaluate.label, summary);
    }
    return summary;
}

}

#endif
