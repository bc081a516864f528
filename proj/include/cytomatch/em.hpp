#ifndef CYTOMATCH_EM_HPP
#define CYTOMATCH_EM_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "data.hpp"
#include "detail/parallel.hpp"
#include "detail/random.hpp"
#include "error.hpp"
#include "ppca.hpp"

/**
 * @file em.hpp
 *
 * @brief Fitting a mixture of PPCA components to partially observed rows with a two-stage EM,
 * including initialization from per-component means and posterior classification.
 */

namespace cytomatch {

/** How a model was initialized; stored alongside the parameters. */
struct InitRecord {
    std::uint64_t seed = 0;
    /** Half-width r of the uniform [-r, r] draw used for never jointly observed covariance entries. */
    std::vector<double> random_range;
    /** Component fell back to the global covariance because too few rows were assigned to it. */
    std::vector<bool> fallback;
};

/**
 * @brief K PPCA components over named columns, with the fit history.
 */
struct MixtureModel {
    std::vector<std::string> columns;
    std::vector<PpcaComponent> components;
    Index latent_dim = 1;
    /** Observed-data log-likelihood at every E-step; the last entry belongs to the current parameters. */
    std::vector<double> trace;
    /** Number of parameter updates performed by `fit()`. */
    int iterations = 0;
    bool converged = false;
    InitRecord init;
    std::vector<std::string> warnings;

    std::size_t size() const { return components.size(); }
    Index dim() const { return static_cast<Index>(columns.size()); }

    void validate() const {
        if (components.empty()) {
            throw ConfigError("model has no components");
        }
        double total = 0;
        for (const auto& comp : components) {
            comp.validate();
            if (comp.dim() != dim() || comp.latent_dim() != latent_dim) {
                throw ConfigError("all components must share the model's d and q");
            }
            total += comp.weight;
        }
        if (std::abs(total - 1.0) > 1e-12) {
            throw ConfigError("component weights must sum to 1");
        }
    }
};

using Responsibilities = Eigen::MatrixXd;

/**
 * @brief Rows grouped by missingness pattern, patterns numbered in order of first appearance.
 */
class PatternIndex {
public:
    PatternIndex() = default;

    explicit PatternIndex(const MaskedMatrix& data) {
        std::map<std::string, std::size_t> lookup;
        row_pattern_.resize(static_cast<std::size_t>(data.rows()));
        for (Index r = 0; r < data.rows(); ++r) {
            auto pattern = MissingnessPattern::from_mask(data.mask().row(r));
            const auto [it, inserted] = lookup.emplace(pattern.key(), patterns_.size());
            if (inserted) {
                patterns_.push_back(std::move(pattern));
                members_.emplace_back();
            }
            row_pattern_[static_cast<std::size_t>(r)] = it->second;
            members_[it->second].push_back(static_cast<std::size_t>(r));
        }
    }

    std::size_t size() const { return patterns_.size(); }
    const MissingnessPattern& pattern(std::size_t p) const { return patterns_[p]; }
    std::size_t pattern_of(Index row) const { return row_pattern_[static_cast<std::size_t>(row)]; }
    const std::vector<std::size_t>& members(std::size_t p) const { return members_[p]; }

private:
    std::vector<MissingnessPattern> patterns_;
    std::vector<std::size_t> row_pattern_;
    std::vector<std::vector<std::size_t>> members_;
};

/**
 * @brief Everything the M-step needs from one E-step.
 *
 * Conditional moments are stored compactly: `completed[k]` is the data with each row's missing coordinates
 * replaced by their conditional mean under component k, and `cond_cov[k][p]` is the conditional covariance
 * shared by all rows with pattern p.
 */
struct EStep {
    Responsibilities responsibilities;
    /** log p(x_n^o | k). */
    Eigen::MatrixXd log_density;
    std::vector<RowMatrix> completed;
    std::vector<std::vector<Eigen::MatrixXd>> cond_cov;
    PatternIndex patterns;
    double loglik = 0;

    /** Moments of row n under component k, indexed by the row's missing coordinates. */
    ConditionalMoments moments(Index n, std::size_t k) const {
        const auto p = patterns.pattern_of(n);
        const auto& mis = patterns.pattern(p).missing();
        ConditionalMoments out;
        out.cond_mean.resize(static_cast<Index>(mis.size()));
        for (std::size_t i = 0; i < mis.size(); ++i) {
            out.cond_mean[static_cast<Index>(i)] = completed[k](n, mis[i]);
        }
        out.cond_cov = cond_cov[k][p];
        out.obs_logdensity = log_density(n, static_cast<Index>(k));
        return out;
    }
};

namespace detail {

inline void check_columns(const MixtureModel& model, const MaskedMatrix& data) {
    if (model.columns != data.columns()) {
        throw ConfigError("data columns do not match the model columns");
    }
}

inline double log_weight(double weight) {
    return weight > 0 ? std::log(weight) : -std::numeric_limits<double>::infinity();
}

inline std::vector<std::vector<ConditionalGaussian>> factorize_all(const MixtureModel& model, const PatternIndex& patterns) {
    std::vector<std::vector<ConditionalGaussian>> out(model.size());
    for (std::size_t k = 0; k < model.size(); ++k) {
        const auto& comp = model.components[k];
        const Eigen::MatrixXd cov = marginal_covariance(comp);
        out[k].reserve(patterns.size());
        for (std::size_t p = 0; p < patterns.size(); ++p) {
            out[k].emplace_back(comp.mean, cov, patterns.pattern(p), static_cast<int>(k));
        }
    }
    return out;
}

/** Log-sum-exp over the components of one row; fills `resp` with normalized posteriors. */
inline double normalize_row(const Eigen::Ref<const Eigen::RowVectorXd>& log_joint, Eigen::Ref<Eigen::RowVectorXd> resp) {
    const double peak = log_joint.maxCoeff();
    const double total = peak + std::log((log_joint.array() - peak).exp().sum());
    resp = (log_joint.array() - total).exp().matrix();
    return total;
}

inline EStep run_e_step(const MixtureModel& model, const MaskedMatrix& data, bool with_moments) {
    check_columns(model, data);
    const Index n = data.rows();
    const Index d = data.cols();
    const auto K = model.size();

    EStep out;
    out.patterns = PatternIndex(data);
    const auto factors = factorize_all(model, out.patterns);

    std::vector<double> log_weights(K);
    for (std::size_t k = 0; k < K; ++k) {
        log_weights[k] = log_weight(model.components[k].weight);
    }

    out.responsibilities.resize(n, static_cast<Index>(K));
    out.log_density.resize(n, static_cast<Index>(K));
    if (with_moments) {
        out.completed.assign(K, RowMatrix(n, d));
        out.cond_cov.resize(K);
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t p = 0; p < out.patterns.size(); ++p) {
                out.cond_cov[k].push_back(factors[k][p].cond_cov());
            }
        }
    }

    std::vector<double> partial(block_count(static_cast<std::size_t>(n)), 0.0);
    parallel_blocks(static_cast<std::size_t>(n), [&](std::size_t block, std::size_t begin, std::size_t end) {
        Eigen::RowVectorXd log_joint(static_cast<Index>(K));
        Eigen::RowVectorXd resp(static_cast<Index>(K));
        double sum = 0;
        for (auto row = static_cast<Index>(begin); row < static_cast<Index>(end); ++row) {
            const auto p = out.patterns.pattern_of(row);
            const auto& pattern = out.patterns.pattern(p);
            const Eigen::VectorXd x_obs = gather(data.values().row(row), pattern.observed());

            for (std::size_t k = 0; k < K; ++k) {
                const auto& cg = factors[k][p];
                const double lp = cg.log_density(x_obs);
                if (!std::isfinite(lp)) {
                    throw FitError("non-finite log-density for component " + std::to_string(k + 1) + " at row " + std::to_string(row + 1));
                }
                out.log_density(row, static_cast<Index>(k)) = lp;
                log_joint[static_cast<Index>(k)] = log_weights[k] + lp;

                if (with_moments) {
                    auto target = out.completed[k].row(row);
                    target = data.values().row(row);
                    if (!pattern.missing().empty()) {
                        const Eigen::VectorXd cm = cg.cond_mean(x_obs);
                        for (std::size_t i = 0; i < pattern.missing().size(); ++i) {
                            target[pattern.missing()[i]] = cm[static_cast<Index>(i)];
                        }
                    }
                }
            }

            if (pattern.observed().empty()) {
                // nothing observed: the posterior is the prior and the row carries no likelihood
                for (std::size_t k = 0; k < K; ++k) {
                    out.responsibilities(row, static_cast<Index>(k)) = model.components[k].weight;
                }
                continue;
            }
            sum += normalize_row(log_joint, resp);
            out.responsibilities.row(row) = resp;
        }
        partial[block] = sum;
    });

    out.loglik = 0;
    for (double value : partial) {
        out.loglik += value;
    }
    return out;
}

}

/**
 * Posterior responsibilities, per-row conditional moments and the observed-data log-likelihood
 * sum_n log sum_k pi_k p(x_n^o | k). Rows without any observed coordinate get the prior weights and add nothing
 * to the log-likelihood.
 */
inline EStep e_step(const MixtureModel& model, const MaskedMatrix& data) {
    return detail::run_e_step(model, data, true);
}

struct Stage1Update {
    std::vector<double> weights;
    std::vector<Eigen::VectorXd> means;
    /** Components whose total responsibility fell below 1e-8 and were reseeded. */
    std::vector<bool> reseeded;
    std::vector<std::string> warnings;
};

/**
 * First M-step stage: pi_k = (1/N) sum_n R_nk and mu_k = responsibility-weighted mean of the rows completed
 * with their conditional means under component k.
 *
 * A component with total responsibility below 1e-8 is reseeded at the responsibility-weighted global mean plus
 * Gaussian noise (seeded by `reseed_seed`) with weight 1/(2K), after which the weights are renormalized.
 */
inline Stage1Update m_step_stage1(const EStep& estep, const MaskedMatrix& data, std::uint64_t reseed_seed = 0) {
    const auto n = static_cast<std::size_t>(data.rows());
    const Index d = data.cols();
    const auto K = estep.completed.size();
    const std::size_t nblocks = detail::block_count(n);

    std::vector<Eigen::VectorXd> resp_parts(nblocks, Eigen::VectorXd::Zero(static_cast<Index>(K)));
    std::vector<RowMatrix> sum_parts(nblocks, RowMatrix::Zero(static_cast<Index>(K), d));
    detail::parallel_blocks(n, [&](std::size_t block, std::size_t begin, std::size_t end) {
        auto& rs = resp_parts[block];
        auto& ws = sum_parts[block];
        for (auto row = static_cast<Index>(begin); row < static_cast<Index>(end); ++row) {
            for (std::size_t k = 0; k < K; ++k) {
                const double r = estep.responsibilities(row, static_cast<Index>(k));
                rs[static_cast<Index>(k)] += r;
                ws.row(static_cast<Index>(k)) += r * estep.completed[k].row(row);
            }
        }
    });

    Eigen::VectorXd resp_total = Eigen::VectorXd::Zero(static_cast<Index>(K));
    RowMatrix weighted = RowMatrix::Zero(static_cast<Index>(K), d);
    for (std::size_t b = 0; b < nblocks; ++b) {
        resp_total += resp_parts[b];
        weighted += sum_parts[b];
    }

    Stage1Update out;
    out.weights.resize(K);
    out.means.resize(K);
    out.reseeded.assign(K, false);
    bool any_dead = false;
    for (std::size_t k = 0; k < K; ++k) {
        const double rk = resp_total[static_cast<Index>(k)];
        out.weights[k] = rk / static_cast<double>(n);
        if (rk < 1e-8) {
            out.reseeded[k] = true;
            any_dead = true;
            continue;
        }
        out.means[k] = weighted.row(static_cast<Index>(k)).transpose() / rk;
    }

    if (any_dead) {
        const Eigen::VectorXd global = weighted.colwise().sum().transpose() / static_cast<double>(n);
        Eigen::VectorXd spread = Eigen::VectorXd::Zero(d);
        for (std::size_t k = 0; k < K; ++k) {
            for (Index row = 0; row < data.rows(); ++row) {
                const double r = estep.responsibilities(row, static_cast<Index>(k));
                spread += r * (estep.completed[k].row(row).transpose() - global).cwiseAbs2();
            }
        }
        const double scale = 0.1 * std::sqrt(spread.sum() / static_cast<double>(n * static_cast<std::size_t>(d)));

        Rng rng(reseed_seed);
        for (std::size_t k = 0; k < K; ++k) {
            if (!out.reseeded[k]) {
                continue;
            }
            Eigen::VectorXd mean = global;
            for (Index j = 0; j < d; ++j) {
                mean[j] += scale * detail::standard_normal(rng);
            }
            out.means[k] = mean;
            out.weights[k] = 1.0 / (2.0 * static_cast<double>(K));
            out.warnings.push_back("component " + std::to_string(k + 1) + " lost all responsibility and was reseeded");
        }
        double total = 0;
        for (double w : out.weights) {
            total += w;
        }
        for (double& w : out.weights) {
            w /= total;
        }
    } else {
        // the responsibilities sum to N only up to round-off
        double total = 0;
        for (double w : out.weights) {
            total += w;
        }
        for (double& w : out.weights) {
            w /= total;
        }
    }
    return out;
}

struct Stage2Update {
    std::vector<Eigen::MatrixXd> loadings;
    std::vector<double> noise_variances;
    /** Local covariance S_k of every component. */
    std::vector<Eigen::MatrixXd> local_cov;
    std::vector<std::string> warnings;
};

/**
 * Local covariance S_k = (1 / sum_n R_nk) sum_n R_nk [ (x~_nk - mu_k)(x~_nk - mu_k)^T + scatter(Q_nk) ],
 * where x~_nk is the row completed under component k and Q_nk sits at the row's missing coordinates.
 */
inline std::vector<Eigen::MatrixXd> local_covariances(const EStep& estep, const std::vector<Eigen::VectorXd>& means) {
    const auto K = estep.completed.size();
    const auto n = static_cast<std::size_t>(estep.responsibilities.rows());
    const Index d = means.empty() ? 0 : means.front().size();
    const auto P = estep.patterns.size();
    const std::size_t nblocks = detail::block_count(n);

    struct Partial {
        std::vector<Eigen::MatrixXd> scatter;
        Eigen::MatrixXd pattern_weight; // K x P
    };
    std::vector<Partial> parts(nblocks);
    detail::parallel_blocks(n, [&](std::size_t block, std::size_t begin, std::size_t end) {
        auto& part = parts[block];
        part.scatter.assign(K, Eigen::MatrixXd::Zero(d, d));
        part.pattern_weight = Eigen::MatrixXd::Zero(static_cast<Index>(K), static_cast<Index>(P));
        Eigen::VectorXd centred(d);
        for (auto row = static_cast<Index>(begin); row < static_cast<Index>(end); ++row) {
            const auto p = static_cast<Index>(estep.patterns.pattern_of(row));
            for (std::size_t k = 0; k < K; ++k) {
                const double r = estep.responsibilities(row, static_cast<Index>(k));
                centred = estep.completed[k].row(row).transpose() - means[k];
                part.scatter[k].selfadjointView<Eigen::Lower>().rankUpdate(centred, r);
                part.pattern_weight(static_cast<Index>(k), p) += r;
            }
        }
    });

    std::vector<Eigen::MatrixXd> out(K, Eigen::MatrixXd::Zero(d, d));
    Eigen::MatrixXd pattern_weight = Eigen::MatrixXd::Zero(static_cast<Index>(K), static_cast<Index>(P));
    for (const auto& part : parts) {
        for (std::size_t k = 0; k < K; ++k) {
            out[k] += part.scatter[k];
        }
        pattern_weight += part.pattern_weight;
    }

    for (std::size_t k = 0; k < K; ++k) {
        Eigen::MatrixXd& s = out[k];
        s = s.selfadjointView<Eigen::Lower>();
        for (std::size_t p = 0; p < P; ++p) {
            const auto& mis = estep.patterns.pattern(p).missing();
            const double w = pattern_weight(static_cast<Index>(k), static_cast<Index>(p));
            const auto& q = estep.cond_cov[k][p];
            for (std::size_t a = 0; a < mis.size(); ++a) {
                for (std::size_t b = 0; b < mis.size(); ++b) {
                    s(mis[a], mis[b]) += w * q(static_cast<Index>(a), static_cast<Index>(b));
                }
            }
        }
        const double total = pattern_weight.row(static_cast<Index>(k)).sum();
        s /= total;
    }
    return out;
}

/**
 * Second M-step stage, using the stage-one means:
 * W' = S W (sigma^2 I + M^{-1} W^T S W)^{-1} and sigma'^2 = tr(S - S W M^{-1} W'^T) / d, with M = W^T W + sigma^2 I.
 * sigma'^2 is clamped from below at 1e-8 * tr(S) / d. Components listed in `skip` keep their loadings and noise.
 */
inline Stage2Update m_step_stage2(const EStep& estep, const MixtureModel& model_with_new_means, const std::vector<bool>& skip = {}) {
    const auto K = model_with_new_means.size();
    std::vector<Eigen::VectorXd> means;
    for (const auto& comp : model_with_new_means.components) {
        means.push_back(comp.mean);
    }

    Stage2Update out;
    out.local_cov = local_covariances(estep, means);
    const Index d = model_with_new_means.dim();
    const Index q = model_with_new_means.latent_dim;

    for (std::size_t k = 0; k < K; ++k) {
        const auto& comp = model_with_new_means.components[k];
        if (!skip.empty() && skip[k]) {
            out.loadings.push_back(comp.loadings);
            out.noise_variances.push_back(comp.noise_variance);
            continue;
        }

        const Eigen::MatrixXd& s = out.local_cov[k];
        const Eigen::MatrixXd& w = comp.loadings;
        const double sigma2 = comp.noise_variance;

        Eigen::MatrixXd m = w.transpose() * w;
        m.diagonal().array() += sigma2;
        const auto m_lu = m.partialPivLu();

        const Eigen::MatrixXd sw = s * w;
        Eigen::MatrixXd inner = m_lu.solve(w.transpose() * sw);
        inner.diagonal().array() += sigma2;
        const Eigen::MatrixXd w_new = inner.transpose().partialPivLu().solve(sw.transpose()).transpose();

        const Eigen::MatrixXd explained = sw * m_lu.solve(w_new.transpose());
        double sigma2_new = (s.trace() - explained.trace()) / static_cast<double>(d);

        double floor = 1e-8 * s.trace() / static_cast<double>(d);
        if (!(floor > 0)) {
            floor = 1e-12;
        }
        if (!(sigma2_new >= floor)) {
            out.warnings.push_back("component " + std::to_string(k + 1) + ": noise variance clamped to " + std::to_string(floor));
            sigma2_new = floor;
        }

        if (w_new.rows() != d || w_new.cols() != q) {
            throw FitError("loading update has the wrong shape");
        }
        out.loadings.push_back(w_new);
        out.noise_variances.push_back(sigma2_new);
    }
    return out;
}

/** Eigenvalues below `floor` are raised to it; the eigenvectors are kept. Inputs already above the floor come back unchanged. */
inline Eigen::MatrixXd repair_positive_definite(const Eigen::MatrixXd& cov, double floor) {
    const Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.eigenvalues().minCoeff() >= floor) {
        return sym;
    }
    // a few ulps of headroom so that recomputed eigenvalues do not land just under the floor
    const double margin = 8 * std::numeric_limits<double>::epsilon() * std::max(floor, eig.eigenvalues().cwiseAbs().maxCoeff());
    const Eigen::VectorXd clamped = eig.eigenvalues().cwiseMax(floor + margin);
    Eigen::MatrixXd out = eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

/** Covariance assembled from pairwise-complete sample covariances, with random entries where no estimate exists. */
struct BlockCovariance {
    Eigen::MatrixXd cov;
    /** true where the entry came from data. */
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> estimable;
    double random_range = 0;
};

/**
 * Draws a symmetric matrix with entries uniform in [-r, r] (upper triangle, row by row), where r is the mean of the
 * estimable diagonal, then overwrites every entry (i, j) whose columns are jointly observed in at least two of the
 * given rows by the maximum-likelihood covariance over those rows.
 */
inline BlockCovariance estimate_covariance_blocks(const MaskedMatrix& data, const std::vector<std::size_t>& rows, Rng& rng) {
    const Index d = data.cols();
    BlockCovariance out;
    out.cov = Eigen::MatrixXd::Zero(d, d);
    out.estimable = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(d, d, false);

    Eigen::MatrixXd sample = Eigen::MatrixXd::Zero(d, d);
    for (Index i = 0; i < d; ++i) {
        for (Index j = i; j < d; ++j) {
            double count = 0;
            double sum_i = 0;
            double sum_j = 0;
            for (auto r : rows) {
                const auto row = static_cast<Index>(r);
                if (data.observed(row, i) && data.observed(row, j)) {
                    count += 1;
                    sum_i += data.value(row, i);
                    sum_j += data.value(row, j);
                }
            }
            if (count < 2) {
                continue;
            }
            const double mean_i = sum_i / count;
            const double mean_j = sum_j / count;
            double acc = 0;
            for (auto r : rows) {
                const auto row = static_cast<Index>(r);
                if (data.observed(row, i) && data.observed(row, j)) {
                    acc += (data.value(row, i) - mean_i) * (data.value(row, j) - mean_j);
                }
            }
            sample(i, j) = sample(j, i) = acc / count;
            out.estimable(i, j) = out.estimable(j, i) = true;
        }
    }

    double diag_total = 0;
    int diag_count = 0;
    for (Index i = 0; i < d; ++i) {
        if (out.estimable(i, i)) {
            diag_total += sample(i, i);
            ++diag_count;
        }
    }
    out.random_range = diag_count > 0 && diag_total > 0 ? diag_total / diag_count : 1.0;

    for (Index i = 0; i < d; ++i) {
        for (Index j = i; j < d; ++j) {
            const double draw = detail::uniform(rng, -out.random_range, out.random_range);
            out.cov(i, j) = out.cov(j, i) = out.estimable(i, j) ? sample(i, j) : draw;
        }
    }
    return out;
}

/** Loadings and noise from a covariance: W = top-q eigenvectors scaled by sqrt(max(lambda - sigma^2, eps)), sigma^2 = mean of the rest. */
inline void ppca_from_covariance(const Eigen::MatrixXd& cov, Index q, double eps, Eigen::MatrixXd& loadings, double& noise_variance) {
    const Index d = cov.rows();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const auto& values = eig.eigenvalues(); // ascending
    noise_variance = values.head(d - q).mean();
    loadings.resize(d, q);
    for (Index i = 0; i < q; ++i) {
        const Index src = d - 1 - i;
        loadings.col(i) = eig.eigenvectors().col(src) * std::sqrt(std::max(values[src] - noise_variance, eps));
    }
}

struct InitOptions {
    /** PD repair floor relative to the random range r of the component. */
    double floor_ratio = 1e-6;
};

/**
 * Builds a starting model from one mean per component:
 * rows are assigned to the nearest mean over their observed coordinates; each component's covariance is
 * estimated blockwise (random where never jointly observed), repaired to be positive definite, and turned into
 * loadings and noise by eigendecomposition; weights are the assignment fractions.
 *
 * A component with fewer than q + 1 assigned rows uses the covariance of all rows and weight 1/(2K)
 * before the weights are renormalized.
 */
inline MixtureModel init_model(const MaskedMatrix& data, const std::vector<Eigen::VectorXd>& means, Index q, std::uint64_t seed, const InitOptions& options = {}) {
    const Index d = data.cols();
    const auto K = means.size();
    if (K < 1) {
        throw ConfigError("at least one component mean is required");
    }
    if (q < 1 || q >= d) {
        throw ConfigError("latent dimension must satisfy 1 <= q < d");
    }
    for (const auto& mean : means) {
        if (mean.size() != d) {
            throw ConfigError("component means must have one entry per column");
        }
    }

    std::vector<std::vector<std::size_t>> members(K);
    for (Index row = 0; row < data.rows(); ++row) {
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) {
            double dist = 0;
            for (Index j = 0; j < d; ++j) {
                if (data.observed(row, j)) {
                    const double diff = data.value(row, j) - means[k][j];
                    dist += diff * diff;
                }
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        members[best].push_back(static_cast<std::size_t>(row));
    }

    std::vector<std::size_t> everyone(static_cast<std::size_t>(data.rows()));
    for (std::size_t i = 0; i < everyone.size(); ++i) {
        everyone[i] = i;
    }

    MixtureModel model;
    model.columns = data.columns();
    model.latent_dim = q;
    model.init.seed = seed;

    Rng rng(seed);
    for (std::size_t k = 0; k < K; ++k) {
        const bool fallback = members[k].size() < static_cast<std::size_t>(q + 1);
        const auto blocks = estimate_covariance_blocks(data, fallback ? everyone : members[k], rng);
        const double floor = options.floor_ratio * blocks.random_range;
        const Eigen::MatrixXd cov = repair_positive_definite(blocks.cov, floor);

        PpcaComponent comp;
        comp.mean = means[k];
        ppca_from_covariance(cov, q, floor, comp.loadings, comp.noise_variance);
        comp.weight = fallback ? 1.0 / (2.0 * static_cast<double>(K))
                               : static_cast<double>(members[k].size()) / static_cast<double>(data.rows());
        model.components.push_back(std::move(comp));
        model.init.random_range.push_back(blocks.random_range);
        model.init.fallback.push_back(fallback);
        if (fallback) {
            model.warnings.push_back("component " + std::to_string(k + 1) + " had " + std::to_string(members[k].size()) +
                                     " nearest rows; initialized from the global covariance");
        }
    }

    double total = 0;
    for (const auto& comp : model.components) {
        total += comp.weight;
    }
    for (auto& comp : model.components) {
        comp.weight /= total;
    }
    return model;
}

/** One full EM iteration starting from `model`; returns the updated model and leaves the old log-likelihood in `loglik`. */
inline MixtureModel em_iteration(const MixtureModel& model, const MaskedMatrix& data, double& loglik, std::uint64_t reseed_seed = 0) {
    const auto estep = e_step(model, data);
    loglik = estep.loglik;

    auto stage1 = m_step_stage1(estep, data, reseed_seed);
    MixtureModel next = model;
    for (std::size_t k = 0; k < model.size(); ++k) {
        next.components[k].weight = stage1.weights[k];
        next.components[k].mean = stage1.means[k];
    }

    bool any_reseeded = false;
    for (bool flag : stage1.reseeded) {
        any_reseeded = any_reseeded || flag;
    }
    if (any_reseeded) {
        // reseeded components restart from the pooled covariance
        Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(model.dim(), model.dim());
        const auto covs = local_covariances(estep, stage1.means);
        for (std::size_t k = 0; k < model.size(); ++k) {
            if (!stage1.reseeded[k]) {
                pooled += stage1.weights[k] * covs[k];
            }
        }
        const double avg_var = pooled.trace() / static_cast<double>(model.dim());
        Eigen::MatrixXd loadings;
        double noise = 0;
        ppca_from_covariance(pooled, model.latent_dim, 1e-12 * std::max(avg_var, 1.0), loadings, noise);
        for (std::size_t k = 0; k < model.size(); ++k) {
            if (stage1.reseeded[k]) {
                next.components[k].loadings = loadings;
                next.components[k].noise_variance = avg_var;
            }
        }
    }

    auto stage2 = m_step_stage2(estep, next, stage1.reseeded);
    for (std::size_t k = 0; k < model.size(); ++k) {
        next.components[k].loadings = std::move(stage2.loadings[k]);
        next.components[k].noise_variance = stage2.noise_variances[k];
    }
    next.warnings.insert(next.warnings.end(), stage1.warnings.begin(), stage1.warnings.end());
    next.warnings.insert(next.warnings.end(), stage2.warnings.begin(), stage2.warnings.end());
    return next;
}

struct FitOptions {
    /** Stop once |delta loglik| / (1 + |loglik|) falls below this. */
    double tol = 1e-6;
    int max_iter = 500;
};

/**
 * Alternates E-step and the two M-step stages until the relative log-likelihood change drops below `tol`
 * or `max_iter` updates were made. The returned model's last trace entry is its own log-likelihood.
 */
inline MixtureModel fit(const MixtureModel& model0, const MaskedMatrix& data, const FitOptions& options = {}) {
    if (!(options.tol > 0)) {
        throw ConfigError("convergence tolerance must be positive");
    }
    model0.validate();
    detail::check_columns(model0, data);

    MixtureModel model = model0;
    model.trace.clear();
    model.iterations = 0;
    model.converged = false;

    for (int it = 0;; ++it) {
        double loglik = 0;
        MixtureModel next;
        try {
            next = em_iteration(model, data, loglik, model0.init.seed + static_cast<std::uint64_t>(it) + 1);
        } catch (const FitError& e) {
            throw FitError("iteration " + std::to_string(it) + ": " + e.what());
        } catch (const ConditioningError& e) {
            throw FitError("iteration " + std::to_string(it) + ": " + e.what());
        }
        if (!std::isfinite(loglik)) {
            throw FitError("iteration " + std::to_string(it) + ": non-finite log-likelihood");
        }
        model.trace.push_back(loglik);

        const auto count = model.trace.size();
        if (count >= 2) {
            const double prev = model.trace[count - 2];
            if (std::abs(loglik - prev) / (1.0 + std::abs(loglik)) < options.tol) {
                model.converged = true;
                break;
            }
        }
        if (it >= options.max_iter) {
            break;
        }

        for (std::size_t k = 0; k < next.size(); ++k) {
            const auto& comp = next.components[k];
            if (!comp.mean.allFinite() || !comp.loadings.allFinite() || !std::isfinite(comp.noise_variance)) {
                throw FitError("iteration " + std::to_string(it) + ": non-finite parameters in component " + std::to_string(k + 1));
            }
        }
        next.trace = std::move(model.trace);
        next.iterations = model.iterations + 1;
        model = std::move(next);
    }
    return model;
}

/** Posterior responsibilities only. */
inline Responsibilities responsibilities(const MixtureModel& model, const MaskedMatrix& data) {
    return detail::run_e_step(model, data, false).responsibilities;
}

/** Label in 1..K of the component with the largest posterior; ties go to the lowest index. */
inline std::vector<int> classify(const MixtureModel& model, const MaskedMatrix& data) {
    const auto resp = responsibilities(model, data);
    std::vector<int> labels(static_cast<std::size_t>(resp.rows()));
    for (Index row = 0; row < resp.rows(); ++row) {
        Index best = 0;
        for (Index k = 1; k < resp.cols(); ++k) {
            if (resp(row, k) > resp(row, best)) {
                best = k;
            }
        }
        labels[static_cast<std::size_t>(row)] = static_cast<int>(best) + 1;
    }
    return labels;
}

}

#endif
