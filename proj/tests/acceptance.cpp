// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <cytomatch/detail/random.hpp>
#include <cytomatch/em.hpp>
#include <cytomatch/eval.hpp>
#include <cytomatch/experiment.hpp>
#include <cytomatch/synthetic.hpp>

#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <unistd.h>

using namespace cytomatch;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
    char buffer[512];
    std::snprintf(buffer, sizeof buffer, pattern, args...);
    return buffer;
}

Eigen::MatrixXd random_matrix(Index rows, Index cols, Rng& rng) {
    Eigen::MatrixXd out(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            out(i, j) = detail::standard_normal(rng);
        }
    }
    return out;
}

std::vector<oracle::Component> to_oracle(const MixtureModel& model) {
    std::vector<oracle::Component> out;
    for (const auto& c : model.components) {
        out.push_back({c.weight, c.mean, c.loadings, c.noise_variance});
    }
    return out;
}

// ---- 1: complete-data reduction --------------------------------------------------------------

Outcome reduction_oracle() {
    const auto start = Clock::now();
    Rng rng(101);
    GaussianMixtureSpec spec;
    spec.columns = {"x1", "x2", "x3", "x4", "x5"};
    spec.weights = {0.5, 0.3, 0.2};
    for (int k = 0; k < 3; ++k) {
        Eigen::VectorXd mean(5);
        for (Index j = 0; j < 5; ++j) {
            mean[j] = detail::uniform(rng, -4, 4);
        }
        const Eigen::MatrixXd w = random_matrix(5, 2, rng);
        spec.means.push_back(mean);
        spec.covariances.push_back(w * w.transpose() + 0.3 * Eigen::MatrixXd::Identity(5, 5));
    }
    const auto sample = sample_mixture(spec, 1000, 5);
    std::vector<Eigen::VectorXd> means;
    for (const auto& m : spec.means) {
        means.push_back(m + 0.5 * random_matrix(5, 1, rng).col(0));
    }
    auto model = init_model(sample.data, means, 2, 3);

    double worst = 0;
    double worst_ll = 0;
    const int iterations = 30;
    for (int it = 0; it < iterations; ++it) {
        double ll = 0;
        double ref_ll = 0;
        const auto next = em_iteration(model, sample.data, ll);
        const auto ref = oracle::complete_data_step(to_oracle(model), sample.data.values(), &ref_ll);
        for (std::size_t k = 0; k < ref.size(); ++k) {
            const auto& c = next.components[k];
            worst = std::max(worst, std::abs(c.weight - ref[k].weight));
            worst = std::max(worst, (c.mean - ref[k].mean).cwiseAbs().maxCoeff());
            worst = std::max(worst, (c.loadings - ref[k].loadings).cwiseAbs().maxCoeff());
            worst = std::max(worst, std::abs(c.noise_variance - ref[k].noise));
        }
        worst_ll = std::max(worst_ll, std::abs(ll - ref_ll) / std::abs(ref_ll));
        model = next;
    }
    const double elapsed = seconds_since(start);
    return {worst <= 1e-10 && elapsed < 10,
            fmt("%d iterations, max parameter diff %.2e, max relative loglik diff %.2e, %.2f s", iterations, worst, worst_ll, elapsed)};
}

// ---- 2: monotone log-likelihood ----------------------------------------------------------------

MaskedMatrix mixed_missingness(std::uint64_t seed) {
    const auto panel = lymph_node_panel();
    const auto sample = sample_mixture(panel_mixture(panel), 2000, seed);
    Rng rng(seed + 17);
    std::vector<SourceFile> files(2000);
    for (auto& f : files) {
        f = detail::uniform01(rng) < 0.5 ? SourceFile::file1 : SourceFile::file2;
    }
    const auto filed = apply_pattern(sample.data, lymph_node_pattern(), files);
    // a further 10% of cells missing at random, never a whole row
    MaskArray mask = filed.mask();
    for (Index r = 0; r < mask.rows(); ++r) {
        for (Index c = 0; c < mask.cols(); ++c) {
            if (detail::uniform01(rng) < 0.1) {
                mask(r, c) = false;
            }
        }
        if (!mask.row(r).any()) {
            mask(r, 0) = true;
        }
    }
    return filed.with_mask(mask);
}

Outcome monotonicity() {
    const auto panel = lymph_node_panel();
    double worst = 0;
    int steps = 0;
    int failures = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto data = mixed_missingness(seed);
        const auto model = fit(init_model(data, initial_means(panel, data.columns()), 2, seed), data, FitOptions{1e-10, 300});
        for (std::size_t i = 1; i < model.trace.size(); ++i) {
            const double drop = (model.trace[i - 1] - model.trace[i]) / std::abs(model.trace[i - 1]);
            worst = std::max(worst, drop);
            failures += drop > 1e-8 ? 1 : 0;
            ++steps;
        }
    }
    return {failures == 0, fmt("20 runs, %d iterations, largest relative drop %.2e", steps, worst)};
}

// ---- 3: conditional moments ------------------------------------------------------------------

// two-sided normal quantile for tail probability alpha, by bisection on erfc
double normal_critical(double alpha) {
    double lo = 0;
    double hi = 40;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (std::erfc(mid / std::sqrt(2.0)) > alpha ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

Outcome conditioning_oracle() {
    Rng rng(303);
    const int components = 100;
    const int draws = 100000;
    std::vector<double> zscores;
    double schur_diff = 0;
    for (int t = 0; t < components; ++t) {
        const auto d = static_cast<Index>(2 + detail::uniform_index(rng, 5));
        const auto q = static_cast<Index>(1 + detail::uniform_index(rng, static_cast<std::size_t>(d - 1)));
        PpcaComponent comp;
        comp.mean = Eigen::VectorXd(d);
        for (Index j = 0; j < d; ++j) {
            comp.mean[j] = detail::uniform(rng, -3, 3);
        }
        comp.loadings = random_matrix(d, q, rng);
        comp.noise_variance = detail::uniform(rng, 0.1, 1.0);

        std::vector<bool> observed(static_cast<std::size_t>(d));
        std::vector<Index> obs, mis;
        do {
            obs.clear();
            mis.clear();
            for (Index j = 0; j < d; ++j) {
                observed[static_cast<std::size_t>(j)] = detail::uniform01(rng) < 0.5;
                (observed[static_cast<std::size_t>(j)] ? obs : mis).push_back(j);
            }
        } while (obs.empty() || mis.empty());

        const Eigen::MatrixXd cov = marginal_covariance(comp);
        const Eigen::VectorXd x = comp.mean + cov.llt().matrixL() * random_matrix(d, 1, rng).col(0);
        Eigen::VectorXd x_obs(static_cast<Index>(obs.size()));
        for (std::size_t a = 0; a < obs.size(); ++a) {
            x_obs[static_cast<Index>(a)] = x[obs[a]];
        }
        std::unique_ptr<bool[]> flags(new bool[observed.size()]);
        for (std::size_t j = 0; j < observed.size(); ++j) {
            flags[j] = observed[j];
        }
        const auto moments = condition(comp, x_obs, std::span<const bool>(flags.get(), observed.size()));

        const auto direct = oracle::schur(comp.mean, cov, obs, mis, x_obs);
        schur_diff = std::max(schur_diff, (moments.cond_mean - direct.mean).cwiseAbs().maxCoeff());
        schur_diff = std::max(schur_diff, (moments.cond_cov - direct.cov).cwiseAbs().maxCoeff());

        // sampler through the latent posterior: z | x_o, then x_m = mu_m + W_m z + noise
        const auto o = static_cast<Index>(obs.size());
        const auto m = static_cast<Index>(mis.size());
        Eigen::MatrixXd wo(o, q), wm(m, q);
        Eigen::VectorXd mo(o), mm(m);
        for (Index a = 0; a < o; ++a) {
            wo.row(a) = comp.loadings.row(obs[static_cast<std::size_t>(a)]);
            mo[a] = comp.mean[obs[static_cast<std::size_t>(a)]];
        }
        for (Index a = 0; a < m; ++a) {
            wm.row(a) = comp.loadings.row(mis[static_cast<std::size_t>(a)]);
            mm[a] = comp.mean[mis[static_cast<std::size_t>(a)]];
        }
        const Eigen::MatrixXd big_m = wo.transpose() * wo + comp.noise_variance * Eigen::MatrixXd::Identity(q, q);
        const Eigen::MatrixXd m_inv = big_m.inverse();
        const Eigen::VectorXd z_mean = m_inv * wo.transpose() * (x_obs - mo);
        const Eigen::MatrixXd z_cov = comp.noise_variance * m_inv;
        const Eigen::MatrixXd z_chol = Eigen::MatrixXd(z_cov.llt().matrixL());
        const double noise_sd = std::sqrt(comp.noise_variance);

        Eigen::VectorXd sum = Eigen::VectorXd::Zero(m);
        Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(m, m);
        Eigen::VectorXd z(q), e(m);
        for (int s = 0; s < draws; ++s) {
            for (Index j = 0; j < q; ++j) {
                z[j] = detail::standard_normal(rng);
            }
            for (Index j = 0; j < m; ++j) {
                e[j] = detail::standard_normal(rng);
            }
            // centred on the analytic mean to keep the accumulation well conditioned
            const Eigen::VectorXd xm = mm + wm * (z_mean + z_chol * z) + noise_sd * e - moments.cond_mean;
            sum += xm;
            outer += xm * xm.transpose();
        }
        const double n = draws;
        const Eigen::VectorXd mc_offset = sum / n;
        const Eigen::MatrixXd mc_cov = (outer - n * mc_offset * mc_offset.transpose()) / (n - 1);
        const auto& qm = moments.cond_cov;
        for (Index i = 0; i < m; ++i) {
            zscores.push_back(mc_offset[i] / std::sqrt(qm(i, i) / n));
            for (Index j = 0; j <= i; ++j) {
                const double se = std::sqrt((qm(i, i) * qm(j, j) + qm(i, j) * qm(i, j)) / n);
                zscores.push_back((mc_cov(i, j) - qm(i, j)) / se);
            }
        }
    }
    double worst = 0;
    int beyond3 = 0;
    for (double zv : zscores) {
        worst = std::max(worst, std::abs(zv));
        beyond3 += std::abs(zv) > 3 ? 1 : 0;
    }
    // 3 standard errors held family-wise: the per-statistic bound keeps the overall false alarm rate at that of one 3-sigma test
    const double alpha = std::erfc(3 / std::sqrt(2.0));
    const double bound = normal_critical(alpha / static_cast<double>(zscores.size()));
    return {worst <= bound && schur_diff <= 1e-10,
            fmt("%zu moment statistics, max |z| %.2f (family-wise 3-SE bound %.2f, %d beyond 3.0, %.1f expected by chance), Schur diff %.2e",
                zscores.size(), worst, bound, beyond3, alpha * static_cast<double>(zscores.size()), schur_diff)};
}

// ---- 4, 5, 7: hold-out experiments -----------------------------------------------------------

std::vector<PermutationResult> toy_runs;
std::vector<PermutationResult> panel_runs;

std::vector<double> column(const MaskedMatrix& m, Index c) {
    std::vector<double> out;
    for (Index r = 0; r < m.rows(); ++r) {
        out.push_back(m.value(r, c));
    }
    return out;
}

Outcome toy_reproduction() {
    const auto start = Clock::now();
    ExperimentConfig config;
    config.pattern = toy_pattern();
    config.n1 = 1000;
    config.n2 = 1000;
    config.n_eval = 1000;
    config.panel = toy_panel();
    config.components = 2;
    config.latent_dim = 1;
    config.keep_artifacts = true;

    int nn_four = 0;
    int cluster_two = 0;
    int kl_wins = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto truth = sample_mixture(toy_mixture(), 3000, 1000 + seed).data;
        auto run = run_permutation(truth, config, seed);
        const auto& art = *run.artifacts;
        bool four = true;
        bool two = true;
        for (const auto* f : {&art.matched[0].file1, &art.matched[0].file2}) {
            four = four && count_modes_2d(column(f->completed, 1), column(f->completed, 2)) == 4;
        }
        for (const auto* f : {&art.matched[1].file1, &art.matched[1].file2}) {
            two = two && count_modes_2d(column(f->completed, 1), column(f->completed, 2)) == 2;
        }
        nn_four += four ? 1 : 0;
        cluster_two += two ? 1 : 0;
        kl_wins += (run.kl[1][0] < run.kl[0][0] && run.kl[1][1] < run.kl[0][1]) ? 1 : 0;
        toy_runs.push_back(std::move(run));
    }
    const double elapsed = seconds_since(start);
    return {nn_four == 10 && cluster_two == 10 && kl_wins == 10 && elapsed < 30,
            fmt("NN 4 modes in %d/10, cluster-NN 2 modes in %d/10, KL(cluster-NN) < KL(NN) for both files in %d/10, %.1f s", nn_four,
                cluster_two, kl_wins, elapsed)};
}

Outcome panel_reproduction() {
    ExperimentConfig config;
    config.pattern = lymph_node_pattern();
    config.n1 = 10000;
    config.n2 = 10000;
    config.n_eval = 5000;
    config.panel = lymph_node_panel();
    config.components = 6;
    config.latent_dim = 2;
    config.keep_artifacts = true;
    const auto truth = sample_mixture(panel_mixture(config.panel), 25000, 2024).data;

    double slowest = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto start = Clock::now();
        panel_runs.push_back(run_permutation(truth, config, seed));
        slowest = std::max(slowest, seconds_since(start));
    }
    bool gaps = true;
    std::string detail;
    for (std::size_t f = 0; f < 2; ++f) {
        std::vector<double> nn, cl;
        for (const auto& run : panel_runs) {
            nn.push_back(run.kl[0][f]);
            cl.push_back(run.kl[1][f]);
        }
        const auto a = summarize(nn);
        const auto b = summarize(cl);
        const double combined = std::sqrt(a.stderr_ * a.stderr_ + b.stderr_ * b.stderr_);
        const double gap = a.mean - b.mean;
        gaps = gaps && gap > 3 * combined;
        detail += fmt("file %zu: NN %.4f +/- %.4f, cluster-NN %.4f +/- %.4f, gap %.1f SE; ", f + 1, a.mean, a.stderr_, b.mean, b.stderr_,
                      combined > 0 ? gap / combined : INFINITY);
    }
    detail += fmt("slowest permutation %.1f s", slowest);
    return {gaps && slowest < 120, detail};
}

bool hot_deck(const ImputedFile& out, const MaskedMatrix& recipients, const MaskedMatrix& donors) {
    for (Index r = 0; r < recipients.rows(); ++r) {
        const auto donor = static_cast<Index>(out.donor[static_cast<std::size_t>(r)]);
        for (Index c = 0; c < recipients.cols(); ++c) {
            const double got = out.completed.value(r, c);
            if (recipients.observed(r, c)) {
                if (std::memcmp(&got, &recipients.values()(r, c), sizeof got) != 0) {
                    return false;
                }
            } else if (!donors.observed(donor, c) || std::memcmp(&got, &donors.values()(donor, c), sizeof got) != 0) {
                return false;
            }
        }
    }
    return out.completed.fully_observed();
}

Outcome hot_deck_property(const FilePattern& toy, const FilePattern& panel) {
    std::size_t checked = 0;
    std::size_t failed = 0;
    auto check = [&](const std::vector<PermutationResult>& runs, const FilePattern& pattern) {
        for (const auto& run : runs) {
            if (!run.artifacts) {
                ++failed;
                continue;
            }
            const auto& art = *run.artifacts;
            const auto held1 = apply_pattern(art.split.evaluation, pattern, SourceFile::file1);
            const auto held2 = apply_pattern(art.split.evaluation, pattern, SourceFile::file2);
            for (std::size_t m = 0; m < art.matched.size(); ++m) {
                const bool ok = hot_deck(art.matched[m].file1, art.split.file1, art.split.file2) &&
                                hot_deck(art.matched[m].file2, art.split.file2, art.split.file1) &&
                                hot_deck(art.held_out[m][0], held1, art.split.file2) && hot_deck(art.held_out[m][1], held2, art.split.file1);
                failed += ok ? 0 : 1;
                ++checked;
            }
        }
    };
    check(toy_runs, toy);
    check(panel_runs, panel);
    const bool complete = toy_runs.size() == 10 && panel_runs.size() == 10;
    return {complete && failed == 0 && checked == 40,
            fmt("%zu method runs checked (4 imputed files each), %zu violations%s", checked, failed, complete ? "" : ", experiment runs missing")};
}

// ---- 6: identity KL --------------------------------------------------------------------------

Outcome identity_kl() {
    Rng rng(606);
    RowMatrix values(2000, 4);
    for (Index i = 0; i < values.rows(); ++i) {
        for (Index j = 0; j < 4; ++j) {
            values(i, j) = detail::standard_normal(rng);
        }
    }
    const auto truth = MaskedMatrix::complete({"a", "b", "c", "d"}, values);
    const auto report = empirical_kl(truth, truth, truth, "identity");
    return {std::abs(report.value) < 0.1, fmt("KL = %.4f at N=2000, d=4", report.value)};
}

// ---- 8: positive-definite repair -------------------------------------------------------------

Outcome pd_repair() {
    Rng rng(808);
    const double floor = 1e-6;
    double lowest_ratio = INFINITY;
    double worst_change = 0;
    int below = 0;
    for (int t = 0; t < 1000; ++t) {
        const Eigen::MatrixXd a = random_matrix(7, 7, rng);
        const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
        const Eigen::MatrixXd out = repair_positive_definite(sym, floor);
        const double low = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(out).eigenvalues().minCoeff();
        lowest_ratio = std::min(lowest_ratio, low / floor);
        below += low < floor ? 1 : 0;

        const Eigen::MatrixXd pd = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(7, 7);
        worst_change = std::max(worst_change, (repair_positive_definite(pd, floor) - pd).cwiseAbs().maxCoeff());
    }
    return {below == 0 && worst_change <= 1e-12,
            fmt("1000 symmetric 7x7: %d below floor (lowest min eigenvalue %.6f x floor); 1000 PD inputs: max change %.2e", below, lowest_ratio,
                worst_change)};
}

// ---- 9: CLI reproducibility ------------------------------------------------------------------

int run_cli(const std::string& args, const std::string& env, const fs::path& log) {
    const std::string command = env + " " + std::string(CYTOMATCH_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    return std::system(command.c_str());
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

Outcome reproducibility() {
    const auto dir = fs::temp_directory_path() / ("cytomatch-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto data = dir / "data";
    const auto out = dir / "out";
    const auto log = dir / "log.txt";
    const std::string config = std::string(" --set panel=toy --set pattern=toy --set simulate.generator=toy --set simulate.rows=3000") +
                               " --set split.n1=1000 --set split.n2=1000 --set split.n_eval=1000 --set model.latent_dim=1";
    const std::string inputs = " --set inputs.file1=" + (data / "file1.csv").string() + " --set inputs.file2=" + (data / "file2.csv").string() +
                               " --set inputs.truth1=" + (data / "truth1.csv").string() + " --set inputs.truth2=" + (data / "truth2.csv").string() +
                               " --set inputs.eval=" + (data / "eval.csv").string();
    Outcome outcome;
    if (run_cli("simulate -o " + data.string() + config, "", log) != 0 ||
        run_cli("split -o " + data.string() + config + " --set inputs.data=" + (data / "data.csv").string(), "", log) != 0) {
        outcome.detail = "could not prepare inputs: " + slurp(log);
        fs::remove_all(dir);
        return outcome;
    }
    // same config, different thread counts; the second run writes into the same path after the first is moved away
    const auto first = dir / "first";
    if (run_cli("match -o " + out.string() + config + inputs, "CYTOMATCH_THREADS=1", log) != 0) {
        outcome.detail = "first match failed: " + slurp(log);
        fs::remove_all(dir);
        return outcome;
    }
    fs::rename(out, first);
    if (run_cli("match -o " + out.string() + config + inputs, "CYTOMATCH_THREADS=3", log) != 0) {
        outcome.detail = "second match failed: " + slurp(log);
        fs::remove_all(dir);
        return outcome;
    }
    std::size_t files = 0;
    std::vector<std::string> differing;
    for (const auto& entry : fs::directory_iterator(first)) {
        ++files;
        const auto other = out / entry.path().filename();
        if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) {
            differing.push_back(entry.path().filename().string());
        }
    }
    for (const auto& entry : fs::directory_iterator(out)) {
        if (!fs::exists(first / entry.path().filename())) {
            differing.push_back(entry.path().filename().string());
        }
    }
    outcome.pass = files > 0 && differing.empty();
    outcome.detail = fmt("%zu files compared across runs with 1 and 3 threads", files);
    for (const auto& name : differing) {
        outcome.detail += ", differs: " + name;
    }
    fs::remove_all(dir);
    return outcome;
}

}

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"1 reduction oracle", reduction_oracle},
        {"2 monotone loglik", monotonicity},
        {"3 conditioning oracle", conditioning_oracle},
        {"4 toy reproduction", toy_reproduction},
        {"5 panel-scale ordering", panel_reproduction},
        {"6 identity KL", identity_kl},
        {"7 hot-deck property", [] { return hot_deck_property(toy_pattern(), lymph_node_pattern()); }},
        {"8 PD repair", pd_repair},
        {"9 reproducible match", reproducibility},
    };
    int failures = 0;
    for (const auto& [name, run] : criteria) {
        Outcome outcome;
        try {
            outcome = run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("threw: ") + e.what()};
        }
        failures += outcome.pass ? 0 : 1;
        std::cout << (outcome.pass ? "PASS" : "FAIL") << "  " << name << ": " << outcome.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
