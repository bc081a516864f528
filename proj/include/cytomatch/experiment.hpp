#ifndef CYTOMATCH_EXPERIMENT_HPP
#define CYTOMATCH_EXPERIMENT_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "data.hpp"
#include "em.hpp"
#include "eval.hpp"
#include "impute.hpp"
#include "panel.hpp"

/**
 * @file experiment.hpp
 *
 * @brief The hold-out protocol: split a complete table, match the two files, impute the held-out rows the same way,
 * and score each file's imputation with the empirical KL divergence.
 */

namespace cytomatch {

struct ExperimentConfig {
    FilePattern pattern;
    std::size_t n1 = 0;
    std::size_t n2 = 0;
    std::size_t n_eval = 0;
    PanelConfig panel;
    /** Number of components; 0 means one per panel cell type. */
    std::size_t components = 0;
    Index latent_dim = 2;
    FitOptions fit;
    std::uint64_t model_seed = 1;
    NnOptions nn;
    HistogramOptions histogram;
    /** Keep each permutation's split and matched files in the result. */
    bool keep_artifacts = false;
};

/** Everything the clustering stage produces for one pair of files. */
struct ClusteringResult {
    PanelConfig panel;
    MixtureModel model;
    std::vector<int> labels1;
    std::vector<int> labels2;
};

/** Component means for the configured K: the first K panel cell types. */
inline std::vector<Eigen::VectorXd> component_means(const PanelConfig& panel, const std::vector<std::string>& columns, std::size_t components) {
    auto means = initial_means(panel, columns);
    if (components == 0 || components == means.size()) {
        return means;
    }
    if (components > means.size()) {
        throw ConfigError("requested " + std::to_string(components) + " components but the panel defines only " + std::to_string(means.size()) + " cell types");
    }
    means.resize(components);
    return means;
}

/** Fits the mixture to both files viewed as one data set and labels every row. */
inline ClusteringResult cluster_files(const MaskedMatrix& file1, const MaskedMatrix& file2, const PanelConfig& panel,
                                      std::size_t components, Index latent_dim, const FitOptions& fit_options,
                                      std::uint64_t seed, const HistogramOptions& histogram = {}) {
    const auto combined = concatenate(file1, file2);
    ClusteringResult out;
    out.panel = resolve_levels(panel, combined, histogram);
    const auto means = component_means(out.panel, combined.columns(), components);
    out.model = fit(init_model(combined, means, latent_dim, seed), combined, fit_options);
    out.labels1 = classify(out.model, file1);
    out.labels2 = classify(out.model, file2);
    return out;
}

/** The data behind one permutation, kept on request. */
struct PermutationArtifacts {
    MatchingSplit split;
    /** Indexed by method: 0 = nn, 1 = cluster-nn. */
    std::vector<MatchedOutput> matched;
    /** Imputed held-out rows per method and file. */
    std::vector<std::array<ImputedFile, 2>> held_out;
};

/** KL values for one split, indexed [method][file] with method 0 = nn, 1 = cluster-nn. */
struct PermutationResult {
    std::uint64_t seed = 0;
    std::array<std::array<double, 2>, 2> kl{};
    int em_iterations = 0;
    std::size_t fallbacks = 0;
    std::optional<PermutationArtifacts> artifacts;
};

/**
 * Imputes the held-out rows as if they belonged to file 1 and to file 2 in turn (hiding that file's missing block),
 * then scores each file: g = KDE of the completed file, f = KDE of the same rows' true values, evaluated at the
 * imputed held-out rows.
 */
inline PermutationResult run_permutation(const MaskedMatrix& truth, const ExperimentConfig& config, std::uint64_t seed) {
    SplitSpec spec{config.n1, config.n2, config.n_eval, seed, config.pattern};
    const auto split = split_for_matching(truth, spec);
    const auto& common = config.pattern.common;

    auto clustering = cluster_files(split.file1, split.file2, config.panel, config.components, config.latent_dim, config.fit,
                                    config.model_seed, config.histogram);

    const auto held1 = apply_pattern(split.evaluation, config.pattern, SourceFile::file1);
    const auto held2 = apply_pattern(split.evaluation, config.pattern, SourceFile::file2);
    const auto held_labels1 = classify(clustering.model, held1);
    const auto held_labels2 = classify(clustering.model, held2);

    // true values of the rows that make up each file
    std::vector<std::size_t> ids1(split.file1.row_ids().begin(), split.file1.row_ids().end());
    std::vector<std::size_t> ids2(split.file2.row_ids().begin(), split.file2.row_ids().end());
    const auto truth1 = truth.select_rows(ids1);
    const auto truth2 = truth.select_rows(ids2);

    PermutationResult result;
    result.seed = seed;
    result.em_iterations = clustering.model.iterations;
    if (config.keep_artifacts) {
        result.artifacts = PermutationArtifacts{split, {}, {}};
    }
    for (int m = 0; m < 2; ++m) {
        const auto method = m == 0 ? ImputeMethod::nn : ImputeMethod::cluster_nn;
        const auto matched = match_files(split.file1, split.file2, common, method, clustering.labels1, clustering.labels2, config.nn);
        const auto eval1 = method == ImputeMethod::nn ? nn_impute(held1, split.file2, common, config.nn)
                                                      : cluster_nn_impute(held1, split.file2, held_labels1, clustering.labels2, common, config.nn);
        const auto eval2 = method == ImputeMethod::nn ? nn_impute(held2, split.file1, common, config.nn)
                                                      : cluster_nn_impute(held2, split.file1, held_labels2, clustering.labels1, common, config.nn);
        result.kl[static_cast<std::size_t>(m)][0] = empirical_kl(matched.file1.completed, truth1, eval1.completed, to_string(method)).value;
        result.kl[static_cast<std::size_t>(m)][1] = empirical_kl(matched.file2.completed, truth2, eval2.completed, to_string(method)).value;
        if (method == ImputeMethod::cluster_nn) {
            result.fallbacks = matched.file1.fallback_count + matched.file2.fallback_count;
        }
        if (result.artifacts) {
            result.artifacts->matched.push_back(matched);
            result.artifacts->held_out.push_back({eval1, eval2});
        }
    }
    return result;
}

struct ExperimentSummary {
    std::vector<PermutationResult> runs;
    /** [method][file]. */
    std::array<std::array<Summary, 2>, 2> kl{};
};

/** Runs `repetitions` permutations with seeds base_seed, base_seed + 1, ... */
inline ExperimentSummary run_experiment(const MaskedMatrix& truth, const ExperimentConfig& config, int repetitions, std::uint64_t base_seed) {
    ExperimentSummary out;
    for (int r = 0; r < repetitions; ++r) {
        out.runs.push_back(run_permutation(truth, config, base_seed + static_cast<std::uint64_t>(r)));
    }
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t f = 0; f < 2; ++f) {
            std::vector<double> values;
            for (const auto& run : out.runs) {
                values.push_back(run.kl[m][f]);
            }
            out.kl[m][f] = summarize(values);
        }
    }
    return out;
}

}

#endif
