#ifndef CYTOMATCH_PPCA_HPP
#define CYTOMATCH_PPCA_HPP

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"

/**
 * @file ppca.hpp
 *
 * @brief Probabilistic PCA components and Gaussian conditioning on partially observed rows.
 */

namespace cytomatch {

/**
 * @brief One probabilistic PCA component with marginal covariance W W^T + sigma^2 I.
 */
struct PpcaComponent {
    double weight = 1;
    Eigen::VectorXd mean;
    /** d x q loading matrix. */
    Eigen::MatrixXd loadings;
    double noise_variance = 1;

    Index dim() const { return mean.size(); }
    Index latent_dim() const { return loadings.cols(); }

    void validate() const {
        if (!(noise_variance > 0) || !std::isfinite(noise_variance)) {
            throw ConfigError("component noise variance must be positive and finite");
        }
        if (loadings.rows() != mean.size()) {
            throw ConfigError("loading matrix rows must match the mean dimension");
        }
        if (latent_dim() < 1 || latent_dim() > dim()) {
            throw ConfigError("latent dimension must lie in [1, d]");
        }
        if (!(weight >= 0) || weight > 1) {
            throw ConfigError("component weight must lie in [0, 1]");
        }
    }
};

inline Eigen::MatrixXd marginal_covariance(const PpcaComponent& comp) {
    Eigen::MatrixXd cov = comp.loadings * comp.loadings.transpose();
    cov.diagonal().array() += comp.noise_variance;
    return cov;
}

/**
 * Distribution of the missing coordinates given the observed ones, plus the log-density of the observed part.
 * Both vectors/matrices are indexed by the missing coordinates in increasing column order.
 */
struct ConditionalMoments {
    Eigen::VectorXd cond_mean;
    Eigen::MatrixXd cond_cov;
    double obs_logdensity = 0;
};

/** Observed and missing column indices of one row, both in increasing order. */
class MissingnessPattern {
public:
    MissingnessPattern() = default;

    template<class MaskRow>
    static MissingnessPattern from_mask(const MaskRow& observed) {
        MissingnessPattern out;
        const auto d = static_cast<Index>(observed.size());
        out.key_.resize(static_cast<std::size_t>(d));
        for (Index j = 0; j < d; ++j) {
            const bool seen = observed[j];
            (seen ? out.observed_ : out.missing_).push_back(j);
            out.key_[static_cast<std::size_t>(j)] = seen ? '1' : '0';
        }
        return out;
    }

    const std::vector<Index>& observed() const { return observed_; }
    const std::vector<Index>& missing() const { return missing_; }
    Index dim() const { return static_cast<Index>(key_.size()); }
    /** One character per column, '1' for observed. */
    const std::string& key() const { return key_; }

    bool operator==(const MissingnessPattern& other) const { return key_ == other.key_; }

private:
    std::vector<Index> observed_;
    std::vector<Index> missing_;
    std::string key_;
};

namespace detail {

inline Eigen::MatrixXd gather(const Eigen::MatrixXd& full, const std::vector<Index>& rows, const std::vector<Index>& cols) {
    Eigen::MatrixXd out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            out(static_cast<Index>(i), static_cast<Index>(j)) = full(rows[i], cols[j]);
        }
    }
    return out;
}

template<class Vector>
Eigen::VectorXd gather(const Vector& full, const std::vector<Index>& idx) {
    Eigen::VectorXd out(static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out[static_cast<Index>(i)] = full[idx[i]];
    }
    return out;
}

inline bool usable_factor(const Eigen::LLT<Eigen::MatrixXd>& llt) {
    if (llt.info() != Eigen::Success) {
        return false;
    }
    const auto diag = llt.matrixLLT().diagonal();
    return (diag.array() > 0).all() && diag.allFinite();
}

}

/**
 * @brief Gaussian N(mean, cov) conditioned on one missingness pattern.
 *
 * Holds the Cholesky factor of the observed block, the regression of missing on observed coordinates
 * and the conditional covariance, so that any number of rows sharing the pattern can be conditioned cheaply.
 * The observed block is factorized with escalating diagonal jitter (1e-10 * trace / o, times 10, at most 3 attempts)
 * if the plain factorization fails.
 */
class ConditionalGaussian {
public:
    ConditionalGaussian(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, MissingnessPattern pattern, int component = -1)
        : pattern_(std::move(pattern))
    {
        const auto& obs = pattern_.observed();
        const auto& mis = pattern_.missing();
        mean_obs_ = detail::gather(mean, obs);
        mean_mis_ = detail::gather(mean, mis);

        const auto o = static_cast<Index>(obs.size());
        const auto m = static_cast<Index>(mis.size());
        if (o == 0) {
            log_norm_ = 0;
            regression_.resize(m, 0);
            cond_cov_ = detail::gather(cov, mis, mis);
            return;
        }

        Eigen::MatrixXd coo = detail::gather(cov, obs, obs);
        llt_.compute(coo);
        if (!detail::usable_factor(llt_)) {
            double jitter = 1e-10 * coo.trace() / static_cast<double>(o);
            bool ok = false;
            for (int attempt = 0; attempt < 3 && !ok; ++attempt, jitter *= 10) {
                Eigen::MatrixXd bumped = coo;
                bumped.diagonal().array() += jitter;
                llt_.compute(bumped);
                ok = detail::usable_factor(llt_);
            }
            if (!ok) {
                throw ConditioningError("component " + std::to_string(component + 1) +
                                        ": observed covariance block is numerically singular for pattern " + pattern_.key());
            }
        }

        const double logdet = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
        log_norm_ = -0.5 * (static_cast<double>(o) * std::log(2.0 * std::numbers::pi) + logdet);

        if (m > 0) {
            const Eigen::MatrixXd com = detail::gather(cov, obs, mis);
            const Eigen::MatrixXd solved = llt_.solve(com); // (C^oo)^-1 C^om
            regression_ = solved.transpose();
            Eigen::MatrixXd q = detail::gather(cov, mis, mis) - com.transpose() * solved;
            cond_cov_ = 0.5 * (q + q.transpose());
        } else {
            regression_.resize(0, o);
            cond_cov_.resize(0, 0);
        }
    }

    const MissingnessPattern& pattern() const { return pattern_; }

    /** C^{mo} (C^{oo})^{-1}, m x o. */
    const Eigen::MatrixXd& regression() const { return regression_; }

    /** Q = C^{mm} - C^{mo} (C^{oo})^{-1} C^{om}; identical for every row with this pattern. */
    const Eigen::MatrixXd& cond_cov() const { return cond_cov_; }

    double log_density(const Eigen::Ref<const Eigen::VectorXd>& x_obs) const {
        if (x_obs.size() == 0) {
            return 0;
        }
        const Eigen::VectorXd diff = x_obs - mean_obs_;
        const Eigen::VectorXd z = llt_.matrixL().solve(diff);
        return log_norm_ - 0.5 * z.squaredNorm();
    }

    Eigen::VectorXd cond_mean(const Eigen::Ref<const Eigen::VectorXd>& x_obs) const {
        if (x_obs.size() == 0) {
            return mean_mis_;
        }
        return mean_mis_ + regression_ * (x_obs - mean_obs_);
    }

    ConditionalMoments moments(const Eigen::Ref<const Eigen::VectorXd>& x_obs) const {
        return ConditionalMoments{cond_mean(x_obs), cond_cov_, log_density(x_obs)};
    }

private:
    MissingnessPattern pattern_;
    Eigen::VectorXd mean_obs_;
    Eigen::VectorXd mean_mis_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::MatrixXd regression_;
    Eigen::MatrixXd cond_cov_;
    double log_norm_ = 0;
};

/**
 * Conditions a component on the observed coordinates `x_obs` (listed in increasing column order) given by `observed`.
 * `observed` must contain at least one true entry. With every coordinate observed the moments are empty and the
 * log-density is the full multivariate normal one.
 */
inline ConditionalMoments condition(const PpcaComponent& comp, const Eigen::Ref<const Eigen::VectorXd>& x_obs, std::span<const bool> observed) {
    if (static_cast<Index>(observed.size()) != comp.dim()) {
        throw ConfigError("mask length must equal the component dimension");
    }
    auto pattern = MissingnessPattern::from_mask(observed);
    if (pattern.observed().empty()) {
        throw ConfigError("conditioning needs at least one observed coordinate");
    }
    if (static_cast<Index>(pattern.observed().size()) != x_obs.size()) {
        throw ConfigError("observed subvector length does not match the mask");
    }
    if (!x_obs.allFinite()) {
        throw ConfigError("observed values must be finite");
    }
    ConditionalGaussian cg(comp.mean, marginal_covariance(comp), std::move(pattern));
    return cg.moments(x_obs);
}

/**
 * @brief Per-pattern factorization cache for one fixed component.
 *
 * Lookups take a shared lock; building a missing entry takes the exclusive lock.
 */
class ConditioningCache {
public:
    explicit ConditioningCache(PpcaComponent comp, int component_index = -1)
        : comp_(std::move(comp)), cov_(marginal_covariance(comp_)), index_(component_index) {}

    const PpcaComponent& component() const { return comp_; }

    std::shared_ptr<const ConditionalGaussian> get(const MissingnessPattern& pattern) const {
        {
            std::shared_lock<std::shared_mutex> read(lock_);
            const auto it = entries_.find(pattern.key());
            if (it != entries_.end()) {
                return it->second;
            }
        }
        auto built = std::make_shared<const ConditionalGaussian>(comp_.mean, cov_, pattern, index_);
        std::unique_lock<std::shared_mutex> write(lock_);
        const auto [it, inserted] = entries_.emplace(pattern.key(), std::move(built));
        return it->second;
    }

    std::size_t size() const {
        std::shared_lock<std::shared_mutex> read(lock_);
        return entries_.size();
    }

private:
    PpcaComponent comp_;
    Eigen::MatrixXd cov_;
    int index_;
    mutable std::shared_mutex lock_;
    mutable std::map<std::string, std::shared_ptr<const ConditionalGaussian>> entries_;
};

}

#endif
