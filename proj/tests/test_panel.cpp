#include <gtest/gtest.h>

#include <cytomatch/detail/random.hpp>
#include <cytomatch/panel.hpp>
#include <cytomatch/synthetic.hpp>

#include <algorithm>
#include <cmath>

using namespace cytomatch;

namespace {

std::vector<double> bimodal(std::size_t per_mode, double a, double b, double spread, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> out;
    for (std::size_t i = 0; i < per_mode; ++i) {
        out.push_back(a + spread * detail::standard_normal(rng));
        out.push_back(b + spread * detail::standard_normal(rng));
    }
    return out;
}

// Mode of an equal-weight, equal-spread two-Gaussian mixture located by scanning its density on a fine grid.
double fine_grid_mode(double a, double b, double spread, double lo, double hi) {
    double best = lo;
    double best_value = -1;
    for (double x = lo; x <= hi; x += 0.01) {
        const double za = (x - a) / spread;
        const double zb = (x - b) / spread;
        const double value = std::exp(-0.5 * za * za) + std::exp(-0.5 * zb * zb);
        if (value > best_value) {
            best_value = value;
            best = x;
        }
    }
    return best;
}

}

TEST(DetectLevels, BalancedBimodal) {
    const auto values = bimodal(500, 200, 550, 20, 5);
    const auto det = detect_levels(values);
    const double low_mode = fine_grid_mode(200, 550, 20, 100, 375);
    const double high_mode = fine_grid_mode(200, 550, 20, 375, 650);
    EXPECT_FALSE(det.single_peak);
    EXPECT_NEAR(det.levels.negative, low_mode, 15);
    EXPECT_NEAR(det.levels.positive, high_mode, 15);
}

TEST(DetectLevels, UnimodalFlagsSinglePeak) {
    Rng rng(9);
    std::vector<double> values;
    for (int i = 0; i < 2000; ++i) {
        values.push_back(400 + 30 * detail::standard_normal(rng));
    }
    const auto det = detect_levels(values, HistogramOptions{32, 5});
    EXPECT_TRUE(det.single_peak);
    EXPECT_NEAR(det.levels.negative, 400, 20);
    EXPECT_EQ(det.levels.negative, det.levels.positive);
}

TEST(DetectLevels, IdenticalValuesAreDegenerate) {
    const std::vector<double> values(10, 3.0);
    EXPECT_THROW(detect_levels(values), DegenerateHistogramError);
}

TEST(DetectLevels, OrderAndProportionalDuplicationInvariant) {
    auto values = bimodal(300, 100, 400, 25, 17);
    const auto base = detect_levels(values);

    auto shuffled = values;
    Rng rng(3);
    const auto order = detail::permutation(shuffled.size(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) {
        shuffled[i] = values[order[i]];
    }
    const auto permuted = detect_levels(shuffled);
    EXPECT_EQ(permuted.levels.negative, base.levels.negative);
    EXPECT_EQ(permuted.levels.positive, base.levels.positive);

    auto doubled = values;
    doubled.insert(doubled.end(), values.begin(), values.end());
    const auto twice = detect_levels(doubled);
    EXPECT_EQ(twice.levels.negative, base.levels.negative);
    EXPECT_EQ(twice.levels.positive, base.levels.positive);
}

TEST(FindPeaks, ProminenceUsesHigherFlankMinimum) {
    MarkerHistogram hist;
    hist.smoothed = {1, 5, 2, 4, 1};
    hist.counts = hist.smoothed;
    for (int i = 0; i <= 5; ++i) {
        hist.edges.push_back(i);
    }
    const auto peaks = detail::find_peaks(hist);
    ASSERT_EQ(peaks.size(), 2u);
    // the tallest peak has no higher bin on either side: its flanks run to the edges
    EXPECT_DOUBLE_EQ(peaks[0].prominence, 5);
    EXPECT_DOUBLE_EQ(peaks[1].location, 3.5);
    EXPECT_DOUBLE_EQ(peaks[1].prominence, 4 - 2);
}

TEST(FindPeaks, PlateauCountsOnce) {
    MarkerHistogram hist;
    hist.smoothed = {0, 3, 3, 3, 0};
    hist.counts = hist.smoothed;
    for (int i = 0; i <= 5; ++i) {
        hist.edges.push_back(i);
    }
    const auto peaks = detail::find_peaks(hist);
    ASSERT_EQ(peaks.size(), 1u);
    EXPECT_DOUBLE_EQ(peaks[0].location, 2.5);
}

TEST(InitialMeans, HelperTCell) {
    const auto panel = lymph_node_panel();
    const auto means = initial_means(panel);
    ASSERT_EQ(means.size(), 6u);
    Eigen::VectorXd expected(7);
    expected << 400, 400, 240, 130, 550, 170, 650;
    EXPECT_EQ(means[2], expected);
}

TEST(InitialMeans, AllNegativeTypeGivesNegativeLevels) {
    PanelConfig panel;
    panel.markers = {"a", "b"};
    panel.cell_types = {{"only", {Expression::negative, Expression::negative}}};
    panel.levels = {ExpressionLevels{1, 5}, ExpressionLevels{2, 9}};
    const auto means = initial_means(panel);
    ASSERT_EQ(means.size(), 1u);
    EXPECT_EQ(means[0], Eigen::Vector2d(1, 2));
}

TEST(InitialMeans, TypesDifferingInOneMarker) {
    PanelConfig panel;
    panel.markers = {"a", "b", "c"};
    panel.cell_types = {{"x", {Expression::negative, Expression::positive, Expression::negative}},
                        {"y", {Expression::negative, Expression::negative, Expression::negative}}};
    panel.levels = {ExpressionLevels{1, 5}, ExpressionLevels{2, 9}, ExpressionLevels{0, 1}};
    const auto means = initial_means(panel);
    const Eigen::VectorXd diff = means[0] - means[1];
    EXPECT_EQ(diff[0], 0);
    EXPECT_EQ(diff[1], 7);
    EXPECT_EQ(diff[2], 0);
}

TEST(InitialMeans, MissingLevelIsConfigError) {
    auto panel = lymph_node_panel();
    panel.levels[4].reset();
    EXPECT_THROW(initial_means(panel), ConfigError);
}

TEST(InitialMeans, ColumnOrderFollowsData) {
    const auto panel = lymph_node_panel();
    const auto means = initial_means(panel, {"CD4", "FS"});
    EXPECT_EQ(means[2], Eigen::Vector2d(650, 400));
}

TEST(PanelConfig, PositiveMustExceedNegative) {
    auto panel = lymph_node_panel();
    panel.levels[0] = ExpressionLevels{500, 400};
    EXPECT_THROW(panel.validate(), ConfigError);
}

TEST(ResolveLevels, PanelSyntheticMarkers) {
    const auto panel = lymph_node_panel();
    const auto sample = sample_mixture(panel_mixture(panel), 20000, 21);

    auto blank = panel;
    for (auto& level : blank.levels) {
        level.reset();
    }
    PeakReport report;
    const auto resolved = resolve_levels(blank, sample.data, {}, &report);
    EXPECT_EQ(report.markers.size(), 7u);

    const auto cd3 = resolved.levels[4];
    const auto cd8 = resolved.levels[5];
    EXPECT_NEAR(cd3->negative, 200, 25);
    EXPECT_NEAR(cd3->positive, 550, 25);
    EXPECT_NEAR(cd8->negative, 170, 25);
    EXPECT_NEAR(cd8->positive, 750, 25);
}

TEST(ResolveLevels, GivenLevelsKept) {
    const auto panel = lymph_node_panel();
    const auto sample = sample_mixture(panel_mixture(panel), 500, 2);
    PeakReport report;
    const auto resolved = resolve_levels(panel, sample.data, {}, &report);
    EXPECT_TRUE(report.markers.empty());
    EXPECT_EQ(resolved.levels[6]->positive, 650);
}
