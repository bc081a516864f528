// Independent reference implementations used only by the tests.
#ifndef CYTOMATCH_TESTS_ORACLES_HPP
#define CYTOMATCH_TESTS_ORACLES_HPP

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

namespace oracle {

struct Component {
    double weight;
    Eigen::VectorXd mean;
    Eigen::MatrixXd loadings;
    double noise;
};

// log N(x; mu, C) through an explicit inverse and determinant.
inline double log_normal(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::MatrixXd& c) {
    const Eigen::VectorXd diff = x - mu;
    const double quad = diff.dot(c.inverse() * diff);
    return -0.5 * (static_cast<double>(x.size()) * std::log(2 * std::numbers::pi) + std::log(c.determinant()) + quad);
}

inline Eigen::MatrixXd covariance(const Component& c) {
    return c.loadings * c.loadings.transpose() + c.noise * Eigen::MatrixXd::Identity(c.mean.size(), c.mean.size());
}

// One complete-data mixture-of-PPCA EM step: responsibilities, weights and means, then the loadings/noise
// update on the responsibility-weighted sample covariance about the new mean.
inline std::vector<Component> complete_data_step(const std::vector<Component>& model, const Eigen::MatrixXd& x, double* loglik = nullptr) {
    const auto n = x.rows();
    const auto d = x.cols();
    const auto K = static_cast<Eigen::Index>(model.size());

    std::vector<Eigen::MatrixXd> covs;
    for (const auto& c : model) {
        covs.push_back(covariance(c));
    }
    Eigen::MatrixXd r(n, K);
    double ll = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd logs(K);
        for (Eigen::Index k = 0; k < K; ++k) {
            logs[k] = std::log(model[static_cast<std::size_t>(k)].weight) +
                      log_normal(x.row(i).transpose(), model[static_cast<std::size_t>(k)].mean, covs[static_cast<std::size_t>(k)]);
        }
        const double top = logs.maxCoeff();
        const double total = (logs.array() - top).exp().sum();
        ll += top + std::log(total);
        r.row(i) = ((logs.array() - top).exp() / total).transpose();
    }
    if (loglik) {
        *loglik = ll;
    }

    std::vector<Component> next;
    for (Eigen::Index k = 0; k < K; ++k) {
        const auto& c = model[static_cast<std::size_t>(k)];
        const double rk = r.col(k).sum();
        Component out;
        out.weight = rk / static_cast<double>(n);
        out.mean = (x.transpose() * r.col(k)) / rk;
        Eigen::MatrixXd s = Eigen::MatrixXd::Zero(d, d);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::VectorXd diff = x.row(i).transpose() - out.mean;
            s += r(i, k) * diff * diff.transpose();
        }
        s /= rk;
        const Eigen::MatrixXd& w = c.loadings;
        const Eigen::MatrixXd m = w.transpose() * w + c.noise * Eigen::MatrixXd::Identity(w.cols(), w.cols());
        const Eigen::MatrixXd minv = m.inverse();
        const Eigen::MatrixXd sw = s * w;
        const Eigen::MatrixXd inner = c.noise * Eigen::MatrixXd::Identity(w.cols(), w.cols()) + minv * w.transpose() * sw;
        out.loadings = sw * inner.inverse();
        out.noise = (s - sw * minv * out.loadings.transpose()).trace() / static_cast<double>(d);
        next.push_back(out);
    }
    return next;
}

// Conditional mean and covariance of the coordinates in `mis` given those in `obs`, by the Schur complement.
struct Conditional {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

inline Conditional schur(const Eigen::VectorXd& mu, const Eigen::MatrixXd& c, const std::vector<Eigen::Index>& obs,
                         const std::vector<Eigen::Index>& mis, const Eigen::VectorXd& x_obs) {
    const auto o = static_cast<Eigen::Index>(obs.size());
    const auto m = static_cast<Eigen::Index>(mis.size());
    Eigen::MatrixXd coo(o, o), cmo(m, o), cmm(m, m);
    Eigen::VectorXd mo(o), mm(m);
    for (Eigen::Index a = 0; a < o; ++a) {
        mo[a] = mu[obs[static_cast<std::size_t>(a)]];
        for (Eigen::Index b = 0; b < o; ++b) {
            coo(a, b) = c(obs[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]);
        }
    }
    for (Eigen::Index a = 0; a < m; ++a) {
        mm[a] = mu[mis[static_cast<std::size_t>(a)]];
        for (Eigen::Index b = 0; b < o; ++b) {
            cmo(a, b) = c(mis[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]);
        }
        for (Eigen::Index b = 0; b < m; ++b) {
            cmm(a, b) = c(mis[static_cast<std::size_t>(a)], mis[static_cast<std::size_t>(b)]);
        }
    }
    const Eigen::MatrixXd gain = cmo * coo.fullPivLu().inverse();
    return {mm + gain * (x_obs - mo), cmm - gain * cmo.transpose()};
}

}

#endif
