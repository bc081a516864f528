#ifndef CYTOMATCH_SYNTHETIC_HPP
#define CYTOMATCH_SYNTHETIC_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "detail/random.hpp"
#include "error.hpp"
#include "panel.hpp"

/**
 * @file synthetic.hpp
 *
 * @brief Seeded Gaussian-mixture generators standing in for real cytometry data.
 */

namespace cytomatch {

struct LabelledSample {
    MaskedMatrix data;
    /** Generating component of each row, 1..K. */
    std::vector<int> labels;
};

/** A Gaussian mixture with explicit means and covariances. */
struct GaussianMixtureSpec {
    std::vector<std::string> columns;
    std::vector<double> weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covariances;
};

/**
 * Draws `rows` points. Component counts are fixed by the weights (largest-remainder rounding) and rows are
 * emitted in a seeded random order, so the realized proportions are exact.
 */
inline LabelledSample sample_mixture(const GaussianMixtureSpec& spec, std::size_t rows, std::uint64_t seed) {
    const auto K = spec.means.size();
    if (K == 0 || spec.weights.size() != K || spec.covariances.size() != K) {
        throw ConfigError("mixture specification needs one weight, mean and covariance per component");
    }
    const auto d = static_cast<Index>(spec.columns.size());

    double total = 0;
    for (double w : spec.weights) {
        total += w;
    }
    std::vector<std::size_t> counts(K);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const double exact = static_cast<double>(rows) * spec.weights[k] / total;
        counts[k] = static_cast<std::size_t>(exact);
        assigned += counts[k];
        remainders.emplace_back(exact - static_cast<double>(counts[k]), k);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < rows; ++i, ++assigned) {
        ++counts[remainders[i % K].second];
    }

    std::vector<int> labels;
    labels.reserve(rows);
    for (std::size_t k = 0; k < K; ++k) {
        labels.insert(labels.end(), counts[k], static_cast<int>(k) + 1);
    }

    Rng rng(seed);
    const auto order = detail::permutation(rows, rng);

    std::vector<Eigen::MatrixXd> factors;
    for (const auto& cov : spec.covariances) {
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() != Eigen::Success) {
            throw ConfigError("mixture covariance is not positive definite");
        }
        factors.push_back(llt.matrixL());
    }

    RowMatrix values(static_cast<Index>(rows), d);
    std::vector<int> shuffled(rows);
    Eigen::VectorXd z(d);
    for (std::size_t i = 0; i < rows; ++i) {
        const int label = labels[order[i]];
        shuffled[i] = label;
        const auto k = static_cast<std::size_t>(label - 1);
        for (Index j = 0; j < d; ++j) {
            z[j] = detail::standard_normal(rng);
        }
        values.row(static_cast<Index>(i)) = (spec.means[k] + factors[k] * z).transpose();
    }
    return LabelledSample{MaskedMatrix::complete(spec.columns, std::move(values)), std::move(shuffled)};
}

/**
 * Two clusters in (c, s1, s2) that differ in every coordinate but overlap heavily along c:
 * means (-0.5, -2, -2) and (0.5, 2, 2), standard deviations 1 along c and 0.5 along s1 and s2, equal weights.
 */
inline GaussianMixtureSpec toy_mixture() {
    GaussianMixtureSpec spec;
    spec.columns = {"c", "s1", "s2"};
    spec.weights = {0.5, 0.5};
    Eigen::VectorXd a(3), b(3);
    a << -0.5, -2, -2;
    b << 0.5, 2, 2;
    spec.means = {a, b};
    Eigen::MatrixXd cov = Eigen::Vector3d(1.0, 0.25, 0.25).asDiagonal();
    spec.covariances = {cov, cov};
    return spec;
}

/** The file pattern of the toy example: c shared, s1 only in file 1, s2 only in file 2. */
inline FilePattern toy_pattern() {
    return FilePattern{{"c"}, {"s1"}, {"s2"}};
}

/** A two-type panel over (c, s1, s2) whose levels reproduce the toy cluster means. */
inline PanelConfig toy_panel() {
    constexpr auto P = Expression::positive;
    constexpr auto N = Expression::negative;
    PanelConfig panel;
    panel.markers = {"c", "s1", "s2"};
    panel.cell_types = {{"cluster A", {N, N, N}}, {"cluster B", {P, P, P}}};
    panel.levels = {ExpressionLevels{-0.5, 0.5}, ExpressionLevels{-2, 2}, ExpressionLevels{-2, 2}};
    return panel;
}

struct PanelSyntheticOptions {
    /** Mixing weights per cell type; empty means lymph-node-like defaults for six types, uniform otherwise. */
    std::vector<double> weights;
    /** Per-marker standard deviations are drawn uniformly from this range. */
    double min_sd = 25;
    double max_sd = 40;
    /** Seed for the covariance draws (separate from the sampling seed). */
    std::uint64_t covariance_seed = 7;
};

/**
 * Mixture whose component means come from the panel and whose covariances are seeded random positive definite
 * matrices: a random correlation matrix from A A^T + I, scaled by per-marker standard deviations.
 */
inline GaussianMixtureSpec panel_mixture(const PanelConfig& panel, const PanelSyntheticOptions& options = {}) {
    GaussianMixtureSpec spec;
    spec.columns = panel.markers;
    spec.means = initial_means(panel);
    const auto K = spec.means.size();
    const auto d = static_cast<Index>(panel.markers.size());

    if (!options.weights.empty()) {
        if (options.weights.size() != K) {
            throw ConfigError("one mixing weight per cell type is required");
        }
        spec.weights = options.weights;
    } else if (K == 6) {
        spec.weights = {0.05, 0.05, 0.35, 0.20, 0.25, 0.10};
    } else {
        spec.weights.assign(K, 1.0 / static_cast<double>(K));
    }

    Rng rng(options.covariance_seed);
    for (std::size_t k = 0; k < K; ++k) {
        Eigen::MatrixXd a(d, d);
        for (Index i = 0; i < d; ++i) {
            for (Index j = 0; j < d; ++j) {
                a(i, j) = 0.5 * detail::standard_normal(rng);
            }
        }
        Eigen::MatrixXd b = a * a.transpose();
        b.diagonal().array() += 1.0;
        const Eigen::VectorXd inv_sqrt = b.diagonal().array().rsqrt();
        const Eigen::MatrixXd corr = inv_sqrt.asDiagonal() * b * inv_sqrt.asDiagonal();

        Eigen::VectorXd sd(d);
        for (Index j = 0; j < d; ++j) {
            sd[j] = detail::uniform(rng, options.min_sd, options.max_sd);
        }
        Eigen::MatrixXd cov = sd.asDiagonal() * corr * sd.asDiagonal();
        spec.covariances.push_back(0.5 * (cov + cov.transpose()));
    }
    return spec;
}

/** The lymph-node pattern: FS, SS, CD56 shared; CD16, CD3 only in file 1; CD8, CD4 only in file 2. */
inline FilePattern lymph_node_pattern() {
    return FilePattern{{"FS", "SS", "CD56"}, {"CD16", "CD3"}, {"CD8", "CD4"}};
}

}

#endif
