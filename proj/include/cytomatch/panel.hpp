#ifndef CYTOMATCH_PANEL_HPP
#define CYTOMATCH_PANEL_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"

/**
 * @file panel.hpp
 *
 * @brief Marker panels: which cell types express which markers, at what level, and the component means they imply.
 */

namespace cytomatch {

enum class Expression : bool { negative = false, positive = true };

struct CellType {
    std::string name;
    /** One sign per panel marker, in panel marker order. */
    std::vector<Expression> signs;
};

struct ExpressionLevels {
    double negative = 0;
    double positive = 0;
};

/**
 * @brief Cell-type by marker expression table plus quantified expression levels.
 *
 * `levels[j]` belongs to `markers[j]`; an empty entry is filled in from the data by `resolve_levels()`.
 */
struct PanelConfig {
    std::vector<std::string> markers;
    std::vector<CellType> cell_types;
    std::vector<std::optional<ExpressionLevels>> levels;

    std::size_t components() const { return cell_types.size(); }

    void validate() const {
        if (markers.empty()) {
            throw ConfigError("panel has no markers");
        }
        if (cell_types.empty()) {
            throw ConfigError("panel has no cell types");
        }
        if (levels.size() != markers.size()) {
            throw ConfigError("panel levels table does not match its marker list");
        }
        for (const auto& type : cell_types) {
            if (type.signs.size() != markers.size()) {
                throw ConfigError("cell type '" + type.name + "' does not give a sign for every marker");
            }
        }
        for (std::size_t j = 0; j < markers.size(); ++j) {
            if (levels[j] && !(levels[j]->positive > levels[j]->negative)) {
                throw ConfigError("marker '" + markers[j] + "': positive level must exceed negative level");
            }
        }
    }
};

/** The six white-blood-cell types over FS, SS, CD56, CD16, CD3, CD8, CD4 with their lymph-node expression levels. */
inline PanelConfig lymph_node_panel() {
    constexpr auto P = Expression::positive;
    constexpr auto N = Expression::negative;
    PanelConfig panel;
    panel.markers = {"FS", "SS", "CD56", "CD16", "CD3", "CD8", "CD4"};
    panel.cell_types = {
        {"granulocyte", {P, P, N, P, N, N, N}},
        {"monocyte", {P, N, N, P, N, N, N}},
        {"helper T cell", {N, N, N, N, P, N, P}},
        {"cytotoxic T cell", {N, N, N, N, P, P, N}},
        {"B lymphocyte", {N, N, N, N, N, N, N}},
        {"natural killer cell", {N, N, P, P, N, N, N}},
    };
    const double positive[] = {800, 680, 500, 350, 550, 750, 650};
    const double negative[] = {400, 400, 240, 130, 200, 170, 200};
    for (std::size_t j = 0; j < panel.markers.size(); ++j) {
        panel.levels.push_back(ExpressionLevels{negative[j], positive[j]});
    }
    return panel;
}

struct MarkerHistogram {
    /** bins + 1 edges. */
    std::vector<double> edges;
    std::vector<double> counts;
    std::vector<double> smoothed;

    double center(std::size_t bin) const { return 0.5 * (edges[bin] + edges[bin + 1]); }
};

struct Peak {
    double location = 0;
    double height = 0;
    double prominence = 0;
};

/** Outcome of peak picking on one marker, kept for audit. */
struct PeakDetection {
    std::string marker;
    MarkerHistogram histogram;
    /** All local maxima of the smoothed histogram, by location. */
    std::vector<Peak> peaks;
    ExpressionLevels levels;
    /** Only one local maximum was found; both levels then sit on it. */
    bool single_peak = false;
};

struct PeakReport {
    std::vector<PeakDetection> markers;
};

struct HistogramOptions {
    int bins = 64;
    int smoothing = 3;
};

namespace detail {

inline MarkerHistogram build_histogram(std::span<const double> values, const HistogramOptions& options) {
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) {
        throw DegenerateHistogramError("all values are identical; histogram has no spread");
    }

    const auto bins = static_cast<std::size_t>(options.bins);
    MarkerHistogram hist;
    hist.edges.resize(bins + 1);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t b = 0; b <= bins; ++b) {
        hist.edges[b] = lo + width * static_cast<double>(b);
    }
    hist.edges[bins] = hi;

    hist.counts.assign(bins, 0);
    for (double v : values) {
        auto b = static_cast<std::size_t>((v - lo) / width);
        hist.counts[std::min(b, bins - 1)] += 1;
    }

    // centred moving average, truncated at the ends
    const auto half = static_cast<std::ptrdiff_t>(std::max(options.smoothing, 1) / 2);
    hist.smoothed.assign(bins, 0);
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(bins); ++b) {
        const auto from = std::max<std::ptrdiff_t>(0, b - half);
        const auto to = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(bins) - 1, b + half);
        double total = 0;
        for (auto k = from; k <= to; ++k) {
            total += hist.counts[static_cast<std::size_t>(k)];
        }
        hist.smoothed[static_cast<std::size_t>(b)] = total / static_cast<double>(to - from + 1);
    }
    return hist;
}

/**
 * Local maxima of the smoothed counts. A plateau counts once, located at its midpoint.
 * Prominence is the height minus the higher of the two flanking minima, where each flank extends
 * until a strictly higher bin or the histogram edge (beyond which the count is zero).
 */
inline std::vector<Peak> find_peaks(const MarkerHistogram& hist) {
    const auto& s = hist.smoothed;
    const std::size_t n = s.size();
    std::vector<Peak> peaks;

    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && s[j + 1] == s[i]) {
            ++j;
        }
        const bool rises = (i == 0) || s[i - 1] < s[i];
        const bool falls = (j + 1 == n) || s[j + 1] < s[i];
        if (rises && falls && s[i] > 0) {
            const double height = s[i];

            double left_min = height;
            bool left_blocked = false;
            for (std::size_t k = i; k-- > 0;) {
                if (s[k] > height) {
                    left_blocked = true;
                    break;
                }
                left_min = std::min(left_min, s[k]);
            }
            if (!left_blocked) {
                left_min = 0;
            }

            double right_min = height;
            bool right_blocked = false;
            for (std::size_t k = j + 1; k < n; ++k) {
                if (s[k] > height) {
                    right_blocked = true;
                    break;
                }
                right_min = std::min(right_min, s[k]);
            }
            if (!right_blocked) {
                right_min = 0;
            }

            Peak peak;
            peak.location = 0.5 * (hist.center(i) + hist.center(j));
            peak.height = height;
            peak.prominence = height - std::max(left_min, right_min);
            peaks.push_back(peak);
        }
        i = j + 1;
    }
    return peaks;
}

}

/**
 * Locates the negative and positive expression levels of one marker.
 *
 * The observed values are binned, the counts smoothed with a moving average of `options.smoothing` bins,
 * and the two local maxima with the largest prominence are returned ordered by location
 * (equal prominences prefer the lower location).
 * With a single local maximum both levels equal its location and `single_peak` is set.
 */
inline PeakDetection detect_levels(std::span<const double> values, const HistogramOptions& options = {}) {
    if (values.size() < 2) {
        throw ConfigError("peak detection needs at least two observed values");
    }
    if (options.bins < 8) {
        throw ConfigError("peak detection needs at least 8 bins");
    }

    PeakDetection out;
    out.histogram = detail::build_histogram(values, options);
    out.peaks = detail::find_peaks(out.histogram);

    std::vector<Peak> ranked = out.peaks;
    std::stable_sort(ranked.begin(), ranked.end(), [](const Peak& a, const Peak& b) {
        if (a.prominence != b.prominence) {
            return a.prominence > b.prominence;
        }
        return a.location < b.location;
    });

    if (ranked.size() == 1) {
        out.single_peak = true;
        out.levels = {ranked[0].location, ranked[0].location};
    } else {
        const double a = ranked[0].location;
        const double b = ranked[1].location;
        out.levels = {std::min(a, b), std::max(a, b)};
    }
    return out;
}

/** Peak detection on every named column, using only its observed cells. */
inline PeakReport histogram_report(const MaskedMatrix& data, const std::vector<std::string>& markers, const HistogramOptions& options = {}) {
    PeakReport report;
    for (const auto& marker : markers) {
        const auto c = data.column_index(marker);
        std::vector<double> values;
        for (Index r = 0; r < data.rows(); ++r) {
            if (data.observed(r, c)) {
                values.push_back(data.value(r, c));
            }
        }
        try {
            auto detection = detect_levels(values, options);
            detection.marker = marker;
            report.markers.push_back(std::move(detection));
        } catch (const DegenerateHistogramError& e) {
            throw DegenerateHistogramError("marker '" + marker + "': " + e.what());
        } catch (const ConfigError& e) {
            throw ConfigError("marker '" + marker + "': " + e.what());
        }
    }
    return report;
}

/**
 * Fills every absent level in the panel from the data's histograms.
 * Levels already present are kept as given. Detections performed are appended to `report` when supplied.
 */
inline PanelConfig resolve_levels(PanelConfig panel, const MaskedMatrix& data, const HistogramOptions& options = {}, PeakReport* report = nullptr) {
    panel.validate();
    std::vector<std::string> missing;
    for (std::size_t j = 0; j < panel.markers.size(); ++j) {
        if (!panel.levels[j]) {
            missing.push_back(panel.markers[j]);
        }
    }
    if (missing.empty()) {
        return panel;
    }

    auto detected = histogram_report(data, missing, options);
    std::size_t next = 0;
    for (std::size_t j = 0; j < panel.markers.size(); ++j) {
        if (!panel.levels[j]) {
            panel.levels[j] = detected.markers[next++].levels;
        }
    }
    if (report) {
        for (auto& detection : detected.markers) {
            report->markers.push_back(std::move(detection));
        }
    }
    return panel;
}

/**
 * One mean per cell type over the panel markers: the positive level where the type expresses the marker,
 * the negative level otherwise.
 */
inline std::vector<Eigen::VectorXd> initial_means(const PanelConfig& panel) {
    panel.validate();
    const auto d = static_cast<Index>(panel.markers.size());
    std::vector<Eigen::VectorXd> means;
    for (const auto& type : panel.cell_types) {
        Eigen::VectorXd mean(d);
        for (Index j = 0; j < d; ++j) {
            const auto& level = panel.levels[static_cast<std::size_t>(j)];
            if (!level) {
                throw ConfigError("marker '" + panel.markers[static_cast<std::size_t>(j)] + "' has no expression levels");
            }
            mean[j] = type.signs[static_cast<std::size_t>(j)] == Expression::positive ? level->positive : level->negative;
        }
        means.push_back(std::move(mean));
    }
    return means;
}

/** Same as above with coordinates arranged in the given column order; every column must be a panel marker. */
inline std::vector<Eigen::VectorXd> initial_means(const PanelConfig& panel, const std::vector<std::string>& columns) {
    const auto by_marker = initial_means(panel);
    std::vector<std::size_t> source;
    for (const auto& name : columns) {
        const auto it = std::find(panel.markers.begin(), panel.markers.end(), name);
        if (it == panel.markers.end()) {
            throw ConfigError("column '" + name + "' is not a panel marker");
        }
        source.push_back(static_cast<std::size_t>(it - panel.markers.begin()));
    }

    std::vector<Eigen::VectorXd> means;
    for (const auto& full : by_marker) {
        Eigen::VectorXd mean(static_cast<Index>(columns.size()));
        for (std::size_t c = 0; c < columns.size(); ++c) {
            mean[static_cast<Index>(c)] = full[static_cast<Index>(source[c])];
        }
        means.push_back(std::move(mean));
    }
    return means;
}

}

#endif
