#ifndef CYTOMATCH_EVAL_HPP
#define CYTOMATCH_EVAL_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "data.hpp"
#include "detail/parallel.hpp"
#include "error.hpp"

/**
 * @file eval.hpp
 *
 * @brief Gaussian product-kernel density estimates and the sample estimate of KL(g || f) between imputed and true data.
 */

namespace cytomatch {

/** Product Gaussian kernel density estimate with one bandwidth per dimension. */
struct KdeModel {
    RowMatrix sample;
    Eigen::VectorXd bandwidth;
};

/**
 * Fits a KDE with Silverman's rule of thumb, h_j = 1.06 * sd_j * N^(-1/5).
 * `columns` only names the offending column when a dimension has zero spread.
 */
inline KdeModel fit_kde(const RowMatrix& sample, const std::vector<std::string>& columns = {}) {
    const Index n = sample.rows();
    const Index d = sample.cols();
    if (n < 2) {
        throw EvaluationError("kernel density estimation needs at least two sample rows");
    }
    if (!sample.allFinite()) {
        throw EvaluationError("kernel density sample must be fully observed and finite");
    }

    KdeModel model{sample, Eigen::VectorXd(d)};
    const double factor = 1.06 * std::pow(static_cast<double>(n), -0.2);
    for (Index j = 0; j < d; ++j) {
        const double mean = sample.col(j).mean();
        const double var = (sample.col(j).array() - mean).square().sum() / static_cast<double>(n - 1);
        const double h = factor * std::sqrt(var);
        if (!(h > 0)) {
            const std::string name = static_cast<std::size_t>(j) < columns.size() ? columns[static_cast<std::size_t>(j)] : std::to_string(j + 1);
            throw EvaluationError("column '" + name + "' has zero variance; kernel bandwidth is degenerate");
        }
        model.bandwidth[j] = h;
    }
    return model;
}

inline KdeModel fit_kde(const MaskedMatrix& sample) {
    if (!sample.fully_observed()) {
        throw EvaluationError("kernel density sample must be fully observed");
    }
    return fit_kde(sample.values(), sample.columns());
}

/** log( (1/N) sum_i prod_j phi((q_j - x_ij) / h_j) / h_j ), evaluated with log-sum-exp. */
inline double kde_log_density(const KdeModel& model, const Eigen::Ref<const Eigen::RowVectorXd>& query) {
    const Index n = model.sample.rows();
    const Index d = model.sample.cols();
    const double constant = -std::log(static_cast<double>(n)) - model.bandwidth.array().log().sum() -
                            0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);

    std::vector<double> exponents(static_cast<std::size_t>(n));
    double peak = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
        double acc = 0;
        for (Index j = 0; j < d; ++j) {
            const double z = (query[j] - model.sample(i, j)) / model.bandwidth[j];
            acc += z * z;
        }
        const double e = -0.5 * acc;
        exponents[static_cast<std::size_t>(i)] = e;
        peak = std::max(peak, e);
    }
    double total = 0;
    for (double e : exponents) {
        total += std::exp(e - peak);
    }
    return constant + peak + std::log(total);
}

/** Log-density at every row of `queries`, computed in parallel. */
inline Eigen::VectorXd kde_log_densities(const KdeModel& model, const RowMatrix& queries) {
    Eigen::VectorXd out(queries.rows());
    detail::parallel_blocks(static_cast<std::size_t>(queries.rows()), [&](std::size_t, std::size_t begin, std::size_t end) {
        for (auto r = static_cast<Index>(begin); r < static_cast<Index>(end); ++r) {
            out[r] = kde_log_density(model, queries.row(r));
        }
    }, 64);
    return out;
}

struct KlReport {
    /** Mean of `terms`. */
    double value = 0;
    /** log g(x_n) - log f(x_n) per evaluation point. */
    std::vector<double> terms;
    std::size_t n_eval = 0;
    std::string method;
    std::string kernel = "gaussian-product";
    std::string bandwidth_rule = "silverman-1.06";
};

/**
 * Sample estimate of KL(g || f): g is a KDE of `imputed`, f a KDE of `truth`, and the expectation under g is
 * replaced by the average over `eval_points` (imputed versions of held-out rows).
 */
inline KlReport empirical_kl(const MaskedMatrix& imputed, const MaskedMatrix& truth, const MaskedMatrix& eval_points, const std::string& method = "") {
    if (imputed.columns() != truth.columns() || imputed.columns() != eval_points.columns()) {
        throw EvaluationError("imputed, truth and evaluation sets must share the same columns");
    }
    if (eval_points.rows() < 2) {
        throw EvaluationError("at least two evaluation points are required");
    }
    if (!eval_points.fully_observed()) {
        throw EvaluationError("evaluation points must be fully observed");
    }

    const auto g = fit_kde(imputed);
    const auto f = fit_kde(truth);
    const Eigen::VectorXd log_g = kde_log_densities(g, eval_points.values());
    const Eigen::VectorXd log_f = kde_log_densities(f, eval_points.values());

    KlReport report;
    report.method = method;
    report.n_eval = static_cast<std::size_t>(eval_points.rows());
    report.terms.resize(report.n_eval);
    double total = 0;
    for (std::size_t i = 0; i < report.n_eval; ++i) {
        const double term = log_g[static_cast<Index>(i)] - log_f[static_cast<Index>(i)];
        report.terms[i] = term;
        total += term;
    }
    report.value = total / static_cast<double>(report.n_eval);
    if (!std::isfinite(report.value)) {
        throw EvaluationError("KL estimate is not finite");
    }
    return report;
}

/** Mean and standard error of the mean. */
struct Summary {
    double mean = 0;
    double stderr_ = 0;
    std::size_t count = 0;
};

inline Summary summarize(std::span<const double> values) {
    Summary out;
    out.count = values.size();
    if (values.empty()) {
        return out;
    }
    double total = 0;
    for (double v : values) {
        total += v;
    }
    out.mean = total / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0;
        for (double v : values) {
            ss += (v - out.mean) * (v - out.mean);
        }
        out.stderr_ = std::sqrt(ss / static_cast<double>(values.size() - 1)) / std::sqrt(static_cast<double>(values.size()));
    }
    return out;
}

/**
 * Counts the modes of a 2-D point cloud: local maxima of a `bins` x `bins` histogram (3 x 3 box smoothed)
 * whose height is at least `relative_threshold` of the highest cell. Plateaus count once.
 */
inline int count_modes_2d(std::span<const double> xs, std::span<const double> ys, int bins = 12, double relative_threshold = 0.05) {
    if (xs.size() != ys.size() || xs.empty()) {
        throw EvaluationError("mode counting needs two equally long, nonempty coordinate lists");
    }
    const auto [xlo, xhi] = std::minmax_element(xs.begin(), xs.end());
    const auto [ylo, yhi] = std::minmax_element(ys.begin(), ys.end());
    const double xw = (*xhi - *xlo) / bins;
    const double yw = (*yhi - *ylo) / bins;

    auto cell = [&](double v, double lo, double width) {
        if (!(width > 0)) {
            return 0;
        }
        return std::min(bins - 1, static_cast<int>((v - lo) / width));
    };

    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(bins, bins);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        counts(cell(xs[i], *xlo, xw), cell(ys[i], *ylo, yw)) += 1;
    }

    Eigen::MatrixXd smooth(bins, bins);
    for (int i = 0; i < bins; ++i) {
        for (int j = 0; j < bins; ++j) {
            double total = 0;
            int seen = 0;
            for (int di = -1; di <= 1; ++di) {
                for (int dj = -1; dj <= 1; ++dj) {
                    const int a = i + di;
                    const int b = j + dj;
                    if (a >= 0 && a < bins && b >= 0 && b < bins) {
                        total += counts(a, b);
                        ++seen;
                    }
                }
            }
            smooth(i, j) = total / seen;
        }
    }

    const double cutoff = relative_threshold * smooth.maxCoeff();
    int modes = 0;
    for (int i = 0; i < bins; ++i) {
        for (int j = 0; j < bins; ++j) {
            const double v = smooth(i, j);
            if (v <= 0 || v < cutoff) {
                continue;
            }
            bool is_max = true;
            for (int di = -1; di <= 1 && is_max; ++di) {
                for (int dj = -1; dj <= 1; ++dj) {
                    const int a = i + di;
                    const int b = j + dj;
                    if ((di == 0 && dj == 0) || a < 0 || a >= bins || b < 0 || b >= bins) {
                        continue;
                    }
                    const double u = smooth(a, b);
                    // equal neighbours earlier in scan order win, so a plateau yields one maximum
                    const bool earlier = (a < i) || (a == i && b < j);
                    if (u > v || (earlier && u == v)) {
                        is_max = false;
                        break;
                    }
                }
            }
            modes += is_max ? 1 : 0;
        }
    }
    return modes;
}

}

#endif
