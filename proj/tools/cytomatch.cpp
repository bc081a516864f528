// Command-line front end: every flag is an override of a key in the JSON run configuration.

#include <CLI11.hpp>

#include <cytomatch/commands.hpp>

#include <iostream>
#include <string>
#include <vector>

namespace {

struct Options {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out;
    std::string method;
    int threads = 0;
};

cytomatch::RunConfig resolve(const Options& opts) {
    nlohmann::json doc = nlohmann::json::object();
    if (!opts.config_path.empty()) {
        doc = cytomatch::read_json_file(opts.config_path);
    }
    for (const auto& assignment : opts.overrides) {
        cytomatch::apply_override(doc, assignment);
    }
    if (!opts.out.empty()) {
        doc["output_dir"] = opts.out;
    }
    if (!opts.method.empty()) {
        doc["impute"]["method"] = opts.method;
    }
    if (opts.threads > 0) {
        doc["threads"] = opts.threads;
    }
    auto cfg = cytomatch::parse_config(doc);
    if (cfg.threads > 0) {
        cytomatch::set_thread_count(cfg.threads);
    }
    return cfg;
}

}

int main(int argc, char** argv) {
    CLI::App app{"Statistical file matching with a mixture of probabilistic PCA and cluster-restricted hot-deck imputation"};
    app.require_subcommand(1);

    Options opts;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", opts.config_path, "JSON run configuration");
        sub->add_option("--set", opts.overrides, "Override a configuration key, e.g. --set model.seed=3")->take_all();
        sub->add_option("-o,--out", opts.out, "Output directory (output_dir)");
        sub->add_option("--threads", opts.threads, "Worker thread cap (threads)")->check(CLI::PositiveNumber);
    };

    auto* simulate = app.add_subcommand("simulate", "Draw a synthetic complete table");
    auto* split = app.add_subcommand("split", "Split a complete table into two files and a held-out set");
    auto* histogram = app.add_subcommand("histogram", "Per-marker histograms and expression-level peaks");
    auto* fit = app.add_subcommand("fit", "Fit the mixture model and label every row");
    auto* impute = app.add_subcommand("impute", "Impute both files from each other");
    auto* evaluate = app.add_subcommand("evaluate", "Repeated split, match and KL scoring");
    auto* match = app.add_subcommand("match", "Cluster, impute and (with truth files) score");
    for (auto* sub : {simulate, split, histogram, fit, impute, evaluate, match}) {
        add_common(sub);
    }
    for (auto* sub : {impute, match}) {
        sub->add_option("-m,--method", opts.method, "Imputation method (impute.method)")->check(CLI::IsMember({"nn", "cluster-nn"}));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const auto cfg = resolve(opts);
        if (simulate->parsed()) {
            const auto sample = cytomatch::cli::cmd_simulate(cfg);
            std::cout << "wrote " << sample.data.rows() << " rows to " << cfg.output_dir << '\n';
        } else if (split->parsed()) {
            const auto result = cytomatch::cli::cmd_split(cfg);
            std::cout << "file1 " << result.file1.rows() << ", file2 " << result.file2.rows() << ", eval " << result.evaluation.rows() << '\n';
        } else if (histogram->parsed()) {
            const auto report = cytomatch::cli::cmd_histogram(cfg);
            for (const auto& det : report.markers) {
                std::cout << det.marker << ": negative " << det.levels.negative << ", positive " << det.levels.positive
                          << (det.single_peak ? " (single peak)" : "") << '\n';
            }
        } else if (fit->parsed()) {
            const auto result = cytomatch::cli::cmd_fit(cfg);
            std::cout << "EM " << (result.model.converged ? "converged" : "stopped") << " after " << result.model.iterations
                      << " iterations, loglik " << result.model.trace.back() << '\n';
            for (const auto& warning : result.model.warnings) {
                std::cerr << "warning: " << warning << '\n';
            }
        } else if (impute->parsed()) {
            const auto matched = cytomatch::cli::cmd_impute(cfg);
            std::cout << "imputed " << matched.file1.completed.rows() << " + " << matched.file2.completed.rows() << " rows ("
                      << cytomatch::to_string(matched.method) << ")\n";
        } else if (evaluate->parsed()) {
            cytomatch::cli::cmd_evaluate(cfg, &std::cout);
        } else if (match->parsed()) {
            const auto run = cytomatch::cli::cmd_match(cfg, &std::cout);
            if (run.clustering) {
                for (const auto& warning : run.clustering->model.warnings) {
                    std::cerr << "warning: " << warning << '\n';
                }
            }
            const auto fallbacks = run.matched->file1.fallback_count + run.matched->file2.fallback_count;
            if (fallbacks > 0) {
                std::cerr << "warning: " << fallbacks << " rows had no donor in their cluster and used the whole donor file\n";
            }
        }
    } catch (const cytomatch::InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const cytomatch::NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
