#ifndef CYTOMATCH_IMPUTE_HPP
#define CYTOMATCH_IMPUTE_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "data.hpp"
#include "detail/parallel.hpp"
#include "error.hpp"

/**
 * @file impute.hpp
 *
 * @brief Hot-deck nearest-neighbour imputation of missing blocks, over the whole donor file or within clusters.
 */

namespace cytomatch {

enum class ImputeMethod { nn, cluster_nn };

inline std::string to_string(ImputeMethod method) {
    return method == ImputeMethod::nn ? "nn" : "cluster-nn";
}

inline ImputeMethod parse_impute_method(const std::string& text) {
    if (text == "nn") {
        return ImputeMethod::nn;
    }
    if (text == "cluster-nn") {
        return ImputeMethod::cluster_nn;
    }
    throw ConfigError("unknown imputation method '" + text + "' (expected 'nn' or 'cluster-nn')");
}

struct NnOptions {
    /** Divide each common coordinate by its pooled standard deviation before measuring distances. */
    bool standardize = false;
    /** Use a k-d tree when there are at most three common columns. Results are identical to brute force. */
    bool use_index = true;
};

/** One recipient file after imputation. */
struct ImputedFile {
    MaskedMatrix completed;
    /** Row of the donor file that supplied each recipient's missing cells. */
    std::vector<std::size_t> donor;
    /** Recipient cluster label (1..K); 0 for plain nearest-neighbour imputation. */
    std::vector<int> label;
    /** The recipient's cluster had no donors, so the whole donor file was searched. */
    std::vector<bool> fallback;
    std::size_t fallback_count = 0;
    ImputeMethod method = ImputeMethod::nn;
};

/** Both files after matching; each file is the recipient of the other. */
struct MatchedOutput {
    ImputedFile file1;
    ImputedFile file2;
    ImputeMethod method = ImputeMethod::nn;
};

namespace detail {

/**
 * @brief Exact nearest neighbour over a subset of donor points, ties broken by lowest donor index.
 *
 * Squared distances are always accumulated coordinate by coordinate in column order, so the brute-force scan
 * and the k-d tree see bit-identical distances and pick the same donor.
 */
class DonorSearch {
public:
    DonorSearch(const RowMatrix* points, std::vector<std::size_t> subset, bool use_index)
        : points_(points), subset_(std::move(subset))
    {
        if (use_index && points_->cols() <= 3 && subset_.size() > leaf_size) {
            order_ = subset_;
            build(0, order_.size());
        }
    }

    bool empty() const { return subset_.empty(); }

    std::size_t nearest(const Eigen::Ref<const Eigen::RowVectorXd>& query) const {
        Best best;
        if (nodes_.empty()) {
            for (auto idx : subset_) {
                consider(query, idx, best);
            }
        } else {
            search(0, query, best);
        }
        return best.index;
    }

private:
    static constexpr std::size_t leaf_size = 16;

    struct Best {
        double dist = std::numeric_limits<double>::infinity();
        std::size_t index = std::numeric_limits<std::size_t>::max();
    };

    struct Node {
        std::size_t begin = 0;
        std::size_t end = 0;
        Index axis = -1;
        double split = 0;
        std::size_t left = 0;
        std::size_t right = 0;
    };

    double distance(const Eigen::Ref<const Eigen::RowVectorXd>& query, std::size_t idx) const {
        double dist = 0;
        for (Index j = 0; j < points_->cols(); ++j) {
            const double diff = query[j] - (*points_)(static_cast<Index>(idx), j);
            dist += diff * diff;
        }
        return dist;
    }

    void consider(const Eigen::Ref<const Eigen::RowVectorXd>& query, std::size_t idx, Best& best) const {
        const double dist = distance(query, idx);
        if (dist < best.dist || (dist == best.dist && idx < best.index)) {
            best.dist = dist;
            best.index = idx;
        }
    }

    std::size_t build(std::size_t begin, std::size_t end) {
        const std::size_t id = nodes_.size();
        nodes_.push_back(Node{begin, end});
        if (end - begin <= leaf_size) {
            return id;
        }

        Index axis = 0;
        double widest = -1;
        for (Index j = 0; j < points_->cols(); ++j) {
            double lo = std::numeric_limits<double>::infinity();
            double hi = -lo;
            for (std::size_t i = begin; i < end; ++i) {
                const double v = (*points_)(static_cast<Index>(order_[i]), j);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (hi - lo > widest) {
                widest = hi - lo;
                axis = j;
            }
        }
        if (!(widest > 0)) {
            return id; // all points coincide
        }

        const std::size_t mid = begin + (end - begin) / 2;
        auto coord = [&](std::size_t idx) { return (*points_)(static_cast<Index>(idx), axis); };
        std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                         order_.begin() + static_cast<std::ptrdiff_t>(end),
                         [&](std::size_t a, std::size_t b) { return coord(a) < coord(b); });
        const double split = coord(order_[mid]);

        const std::size_t left = build(begin, mid);
        const std::size_t right = build(mid, end);
        auto& node = nodes_[id];
        node.axis = axis;
        node.split = split;
        node.left = left;
        node.right = right;
        return id;
    }

    // left subtree holds coordinates <= split, right subtree >= split
    void search(std::size_t id, const Eigen::Ref<const Eigen::RowVectorXd>& query, Best& best) const {
        const Node& node = nodes_[id];
        if (node.axis < 0) {
            for (std::size_t i = node.begin; i < node.end; ++i) {
                consider(query, order_[i], best);
            }
            return;
        }
        const double diff = query[node.axis] - node.split;
        const bool go_left = diff <= 0;
        search(go_left ? node.left : node.right, query, best);
        if (diff * diff <= best.dist) {
            search(go_left ? node.right : node.left, query, best);
        }
    }

    const RowMatrix* points_;
    std::vector<std::size_t> subset_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
};

inline RowMatrix common_block(const MaskedMatrix& m, const std::vector<Index>& cols, const std::string& role) {
    RowMatrix out(m.rows(), static_cast<Index>(cols.size()));
    for (Index r = 0; r < m.rows(); ++r) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            if (!m.observed(r, cols[j])) {
                throw ImputationError(role + " row " + std::to_string(r + 1) + " is missing common column '" + m.columns()[static_cast<std::size_t>(cols[j])] + "'");
            }
            out(r, static_cast<Index>(j)) = m.value(r, cols[j]);
        }
    }
    return out;
}

inline void standardize_columns(RowMatrix& a, RowMatrix& b) {
    const double n = static_cast<double>(a.rows() + b.rows());
    for (Index j = 0; j < a.cols(); ++j) {
        const double mean = (a.col(j).sum() + b.col(j).sum()) / n;
        const double ss = (a.col(j).array() - mean).square().sum() + (b.col(j).array() - mean).square().sum();
        const double sd = std::sqrt(ss / std::max(n - 1, 1.0));
        if (sd > 0) {
            a.col(j) /= sd;
            b.col(j) /= sd;
        }
    }
}

/**
 * Shared driver: `pool_of(recipient)` selects the donor search for each recipient and reports whether it is a fallback.
 */
template<class PoolSelector>
ImputedFile impute_with(const MaskedMatrix& recipients, const MaskedMatrix& donors, const RowMatrix& recipient_common, PoolSelector&& pool_of) {
    if (recipients.columns() != donors.columns()) {
        throw ImputationError("recipient and donor files must share the same columns");
    }

    // every column a recipient lacks must be available in every donor
    const Index d = recipients.cols();
    for (Index c = 0; c < d; ++c) {
        bool needed = false;
        for (Index r = 0; r < recipients.rows() && !needed; ++r) {
            needed = !recipients.observed(r, c);
        }
        if (needed && !donors.mask().col(c).all()) {
            throw ImputationError("column '" + recipients.columns()[static_cast<std::size_t>(c)] + "' is missing in recipients but not observed in every donor");
        }
    }

    const auto n = static_cast<std::size_t>(recipients.rows());
    ImputedFile out{recipients, {}, {}, {}, 0, ImputeMethod::nn};
    out.donor.assign(n, 0);
    out.label.assign(n, 0);
    out.fallback.assign(n, false);

    RowMatrix values = recipients.values();
    MaskArray mask = recipients.mask();
    parallel_blocks(n, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) {
            const auto row = static_cast<Index>(r);
            const auto [search, fallback] = pool_of(r);
            const auto donor = search->nearest(recipient_common.row(row));
            out.donor[r] = donor;
            out.fallback[r] = fallback;
            for (Index c = 0; c < d; ++c) {
                if (!mask(row, c)) {
                    values(row, c) = donors.value(static_cast<Index>(donor), c);
                    mask(row, c) = true;
                }
            }
        }
    });

    out.completed = MaskedMatrix(recipients.columns(), std::move(values), std::move(mask), recipients.sources(), recipients.row_ids());
    out.fallback_count = static_cast<std::size_t>(std::count(out.fallback.begin(), out.fallback.end(), true));
    return out;
}

inline std::pair<RowMatrix, RowMatrix> common_coordinates(const MaskedMatrix& recipients, const MaskedMatrix& donors,
                                                          const std::vector<std::string>& common, const NnOptions& options) {
    if (common.empty()) {
        throw ConfigError("nearest-neighbour imputation needs at least one common column");
    }
    const auto cols = recipients.column_indices(common);
    auto r = common_block(recipients, cols, "recipient");
    auto d = common_block(donors, cols, "donor");
    if (options.standardize) {
        standardize_columns(r, d);
    }
    return {std::move(r), std::move(d)};
}

}

/**
 * Plain hot-deck imputation: each recipient copies its missing cells from the donor nearest in Euclidean
 * distance over the common columns (lowest donor row on ties). Donors may be reused.
 */
inline ImputedFile nn_impute(const MaskedMatrix& recipients, const MaskedMatrix& donors, const std::vector<std::string>& common, const NnOptions& options = {}) {
    auto [rec, don] = detail::common_coordinates(recipients, donors, common, options);
    std::vector<std::size_t> all(static_cast<std::size_t>(donors.rows()));
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (all.empty()) {
        throw ImputationError("donor file is empty");
    }
    const detail::DonorSearch search(&don, std::move(all), options.use_index);
    auto out = detail::impute_with(recipients, donors, rec, [&](std::size_t) { return std::pair{&search, false}; });
    out.method = ImputeMethod::nn;
    return out;
}

/**
 * Hot-deck imputation restricted to donors carrying the recipient's cluster label.
 * When no donor has that label the whole donor file is searched and the recipient is flagged as a fallback.
 */
inline ImputedFile cluster_nn_impute(const MaskedMatrix& recipients, const MaskedMatrix& donors,
                                     const std::vector<int>& recipient_labels, const std::vector<int>& donor_labels,
                                     const std::vector<std::string>& common, const NnOptions& options = {}) {
    if (static_cast<Index>(recipient_labels.size()) != recipients.rows() || static_cast<Index>(donor_labels.size()) != donors.rows()) {
        throw ConfigError("one cluster label per row is required");
    }
    for (const auto* labels : {&recipient_labels, &donor_labels}) {
        for (int label : *labels) {
            if (label < 1) {
                throw ConfigError("cluster labels must be at least 1");
            }
        }
    }

    auto [rec, don] = detail::common_coordinates(recipients, donors, common, options);
    std::vector<std::size_t> all(static_cast<std::size_t>(donors.rows()));
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (all.empty()) {
        throw ImputationError("donor file is empty");
    }

    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < donor_labels.size(); ++i) {
        by_label[donor_labels[i]].push_back(i);
    }
    const detail::DonorSearch global(&don, all, options.use_index);
    std::map<int, std::unique_ptr<detail::DonorSearch>> searches;
    for (auto& [label, members] : by_label) {
        searches.emplace(label, std::make_unique<detail::DonorSearch>(&don, std::move(members), options.use_index));
    }

    auto out = detail::impute_with(recipients, donors, rec, [&](std::size_t r) {
        const auto it = searches.find(recipient_labels[r]);
        if (it == searches.end()) {
            return std::pair<const detail::DonorSearch*, bool>{&global, true};
        }
        return std::pair<const detail::DonorSearch*, bool>{it->second.get(), false};
    });
    out.label = recipient_labels;
    out.method = ImputeMethod::cluster_nn;
    return out;
}

/** Imputes both files from each other. Labels are required for `ImputeMethod::cluster_nn` only. */
inline MatchedOutput match_files(const MaskedMatrix& file1, const MaskedMatrix& file2, const std::vector<std::string>& common,
                                 ImputeMethod method, const std::vector<int>& labels1 = {}, const std::vector<int>& labels2 = {},
                                 const NnOptions& options = {}) {
    MatchedOutput out{
        method == ImputeMethod::nn ? nn_impute(file1, file2, common, options) : cluster_nn_impute(file1, file2, labels1, labels2, common, options),
        method == ImputeMethod::nn ? nn_impute(file2, file1, common, options) : cluster_nn_impute(file2, file1, labels2, labels1, common, options),
        method,
    };
    return out;
}

/** Per-row provenance: recipient row, its original row id, donor row, donor row id, cluster label, fallback flag. */
inline void write_provenance(const ImputedFile& file, const MaskedMatrix& donors, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw LoadError("cannot write '" + path + "'");
    }
    out << "row,row_id,donor_row,donor_row_id,cluster,fallback\n";
    for (std::size_t r = 0; r < file.donor.size(); ++r) {
        out << r << ',' << file.completed.row_ids()[r] << ',' << file.donor[r] << ',' << donors.row_ids()[file.donor[r]] << ','
            << file.label[r] << ',' << (file.fallback[r] ? 1 : 0) << '\n';
    }
}

}

#endif
