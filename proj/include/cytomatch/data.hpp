#ifndef CYTOMATCH_DATA_HPP
#define CYTOMATCH_DATA_HPP

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "detail/random.hpp"
#include "error.hpp"

/**
 * @file data.hpp
 *
 * @brief Column-named tables with per-cell missingness, block patterns and the matching split protocol.
 */

namespace cytomatch {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/** Which data file a row came from. */
enum class SourceFile : std::uint8_t { unknown = 0, file1 = 1, file2 = 2, evaluation = 3 };

/**
 * @brief N x d table of reals with named columns and an observed/missing mask.
 *
 * Instances are immutable once constructed.
 * Missing cells are stored as NaN so that an accidental read poisons downstream arithmetic instead of silently using a stale value.
 * Each row also carries its source-file tag and the index of the row it was derived from in the originally loaded table.
 */
class MaskedMatrix {
public:
    MaskedMatrix(std::vector<std::string> columns, RowMatrix values, MaskArray mask,
                 std::vector<SourceFile> sources = {}, std::vector<std::size_t> row_ids = {})
        : columns_(std::move(columns)), values_(std::move(values)), mask_(std::move(mask)),
          sources_(std::move(sources)), row_ids_(std::move(row_ids))
    {
        const auto n = values_.rows();
        const auto d = values_.cols();
        if (n < 1 || d < 1) {
            throw ConfigError("a data matrix needs at least one row and one column");
        }
        if (mask_.rows() != n || mask_.cols() != d) {
            throw ConfigError("mask shape does not match value shape");
        }
        if (static_cast<Index>(columns_.size()) != d) {
            throw ConfigError("number of column names does not match the number of value columns");
        }

        std::unordered_set<std::string> seen;
        for (const auto& name : columns_) {
            if (name.empty()) {
                throw ConfigError("column names must be nonempty");
            }
            if (!seen.insert(name).second) {
                throw ConfigError("duplicate column name '" + name + "'");
            }
        }

        if (sources_.empty()) {
            sources_.assign(static_cast<std::size_t>(n), SourceFile::unknown);
        } else if (static_cast<Index>(sources_.size()) != n) {
            throw ConfigError("source tags do not match the number of rows");
        }

        if (row_ids_.empty()) {
            row_ids_.resize(static_cast<std::size_t>(n));
            for (std::size_t i = 0; i < row_ids_.size(); ++i) {
                row_ids_[i] = i;
            }
        } else if (static_cast<Index>(row_ids_.size()) != n) {
            throw ConfigError("row identifiers do not match the number of rows");
        }

        for (Index r = 0; r < n; ++r) {
            for (Index c = 0; c < d; ++c) {
                if (!mask_(r, c)) {
                    values_(r, c) = std::numeric_limits<double>::quiet_NaN();
                }
            }
        }
    }

    /** Fully observed matrix. */
    static MaskedMatrix complete(std::vector<std::string> columns, RowMatrix values) {
        MaskArray mask = MaskArray::Constant(values.rows(), values.cols(), true);
        return MaskedMatrix(std::move(columns), std::move(values), std::move(mask));
    }

    Index rows() const { return values_.rows(); }
    Index cols() const { return values_.cols(); }

    const std::vector<std::string>& columns() const { return columns_; }
    const RowMatrix& values() const { return values_; }
    const MaskArray& mask() const { return mask_; }
    const std::vector<SourceFile>& sources() const { return sources_; }
    const std::vector<std::size_t>& row_ids() const { return row_ids_; }

    bool observed(Index r, Index c) const { return mask_(r, c); }
    double value(Index r, Index c) const { return values_(r, c); }
    SourceFile source(Index r) const { return sources_[static_cast<std::size_t>(r)]; }

    bool fully_observed() const { return mask_.all(); }

    Index column_index(std::string_view name) const {
        for (std::size_t c = 0; c < columns_.size(); ++c) {
            if (columns_[c] == name) {
                return static_cast<Index>(c);
            }
        }
        throw ConfigError("unknown column '" + std::string(name) + "'");
    }

    std::vector<Index> column_indices(const std::vector<std::string>& names) const {
        std::vector<Index> out;
        out.reserve(names.size());
        for (const auto& name : names) {
            out.push_back(column_index(name));
        }
        return out;
    }

    MaskedMatrix select_rows(std::span<const std::size_t> rows) const {
        const auto n = static_cast<Index>(rows.size());
        RowMatrix values(n, cols());
        MaskArray mask(n, cols());
        std::vector<SourceFile> sources(rows.size());
        std::vector<std::size_t> ids(rows.size());
        for (Index i = 0; i < n; ++i) {
            const auto r = static_cast<Index>(rows[static_cast<std::size_t>(i)]);
            values.row(i) = values_.row(r);
            mask.row(i) = mask_.row(r);
            sources[static_cast<std::size_t>(i)] = sources_[static_cast<std::size_t>(r)];
            ids[static_cast<std::size_t>(i)] = row_ids_[static_cast<std::size_t>(r)];
        }
        return MaskedMatrix(columns_, std::move(values), std::move(mask), std::move(sources), std::move(ids));
    }

    MaskedMatrix with_sources(std::vector<SourceFile> sources) const {
        return MaskedMatrix(columns_, values_, mask_, std::move(sources), row_ids_);
    }

    MaskedMatrix with_mask(MaskArray mask) const {
        return MaskedMatrix(columns_, values_, std::move(mask), sources_, row_ids_);
    }

private:
    std::vector<std::string> columns_;
    RowMatrix values_;
    MaskArray mask_;
    std::vector<SourceFile> sources_;
    std::vector<std::size_t> row_ids_;
};

/** Vertically stacks two tables over the same columns, keeping tags and row identifiers. */
inline MaskedMatrix concatenate(const MaskedMatrix& top, const MaskedMatrix& bottom) {
    if (top.columns() != bottom.columns()) {
        throw ConfigError("cannot stack tables with different columns");
    }
    const Index n = top.rows() + bottom.rows();
    RowMatrix values(n, top.cols());
    values << top.values(), bottom.values();
    MaskArray mask(n, top.cols());
    mask << top.mask(), bottom.mask();

    auto sources = top.sources();
    sources.insert(sources.end(), bottom.sources().begin(), bottom.sources().end());
    auto ids = top.row_ids();
    ids.insert(ids.end(), bottom.row_ids().begin(), bottom.row_ids().end());
    return MaskedMatrix(top.columns(), std::move(values), std::move(mask), std::move(sources), std::move(ids));
}

/**
 * @brief Partition of the columns into common and file-specific blocks.
 *
 * Rows of file 1 observe `common` and `specific1`; rows of file 2 observe `common` and `specific2`.
 */
struct FilePattern {
    std::vector<std::string> common;
    std::vector<std::string> specific1;
    std::vector<std::string> specific2;

    /** Throws `ConfigError` unless the three sets are disjoint, cover `columns` exactly and `common` is nonempty. */
    void validate(const std::vector<std::string>& columns) const {
        if (common.empty()) {
            throw ConfigError("file pattern needs at least one common column");
        }
        std::unordered_set<std::string> all(columns.begin(), columns.end());
        std::unordered_set<std::string> used;
        for (const auto* group : {&common, &specific1, &specific2}) {
            for (const auto& name : *group) {
                if (!all.count(name)) {
                    throw ConfigError("file pattern refers to unknown column '" + name + "'");
                }
                if (!used.insert(name).second) {
                    throw ConfigError("column '" + name + "' appears in more than one pattern block");
                }
            }
        }
        for (const auto& name : columns) {
            if (!used.count(name)) {
                throw ConfigError("column '" + name + "' is not assigned to any pattern block");
            }
        }
    }

    /** Columns hidden from rows of the given file. */
    const std::vector<std::string>& hidden_for(SourceFile file) const {
        static const std::vector<std::string> none;
        switch (file) {
            case SourceFile::file1: return specific2;
            case SourceFile::file2: return specific1;
            default: return none;
        }
    }
};

struct SplitSpec {
    std::size_t n1 = 0;
    std::size_t n2 = 0;
    std::size_t n_eval = 0;
    std::uint64_t seed = 0;
    FilePattern pattern;
};

namespace detail {

inline std::string_view trim(std::string_view text) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) {
        text.remove_prefix(1);
    }
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) {
        text.remove_suffix(1);
    }
    return text;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(trim(line.substr(start)));
            return fields;
        }
        fields.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
}

inline void append_number(std::string& out, double value) {
    char buffer[64];
    const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
    out.append(buffer, result.ptr);
}

}

/**
 * Parses comma-separated text with a header row.
 * Cells equal to `missing_token` (after trimming blanks) are missing; the default token is the empty cell.
 * `source_name` only appears in error messages.
 */
inline MaskedMatrix parse_table(std::istream& input, const std::string& missing_token = "", const std::string& source_name = "<stream>") {
    std::string line;
    if (!std::getline(input, line)) {
        throw LoadError(source_name + ": line 1: missing header row");
    }

    std::vector<std::string> columns;
    {
        std::unordered_set<std::string> seen;
        for (auto field : detail::split_fields(line)) {
            std::string name(field);
            if (name.empty()) {
                throw LoadError(source_name + ": line 1: empty column name");
            }
            if (!seen.insert(name).second) {
                throw LoadError(source_name + ": line 1: duplicate column name '" + name + "'");
            }
            columns.push_back(std::move(name));
        }
    }
    const auto d = columns.size();

    std::vector<double> values;
    std::vector<bool> mask;
    std::size_t line_number = 1;
    while (std::getline(input, line)) {
        ++line_number;
        const auto fields = detail::split_fields(line);
        if (fields.size() != d) {
            throw LoadError(source_name + ": line " + std::to_string(line_number) + ": expected " + std::to_string(d) +
                            " fields, found " + std::to_string(fields.size()));
        }
        for (std::size_t c = 0; c < d; ++c) {
            const auto cell = fields[c];
            if (cell == missing_token) {
                values.push_back(0);
                mask.push_back(false);
                continue;
            }
            double parsed = 0;
            const auto result = std::from_chars(cell.data(), cell.data() + cell.size(), parsed);
            if (result.ec != std::errc() || result.ptr != cell.data() + cell.size() || !std::isfinite(parsed)) {
                throw LoadError(source_name + ": line " + std::to_string(line_number) + ": cannot parse '" + std::string(cell) +
                                "' in column '" + columns[c] + "'");
            }
            values.push_back(parsed);
            mask.push_back(true);
        }
    }

    const auto n = values.size() / d;
    if (n == 0) {
        throw LoadError(source_name + ": line " + std::to_string(line_number + 1) + ": no data rows");
    }

    RowMatrix matrix(static_cast<Index>(n), static_cast<Index>(d));
    MaskArray observed(static_cast<Index>(n), static_cast<Index>(d));
    for (std::size_t i = 0; i < n * d; ++i) {
        matrix.data()[i] = values[i];
        observed.data()[i] = mask[i];
    }
    return MaskedMatrix(std::move(columns), std::move(matrix), std::move(observed));
}

inline MaskedMatrix load_table(const std::string& path, const std::string& missing_token = "") {
    std::ifstream input(path);
    if (!input) {
        throw LoadError("cannot open '" + path + "'");
    }
    return parse_table(input, missing_token, path);
}

/**
 * Writes the table as comma-separated text; missing cells become empty fields.
 * Numbers use the shortest representation that parses back to the identical double.
 */
inline void format_table(const MaskedMatrix& m, std::ostream& out) {
    std::string buffer;
    for (std::size_t c = 0; c < m.columns().size(); ++c) {
        if (c) {
            buffer += ',';
        }
        buffer += m.columns()[c];
    }
    buffer += '\n';
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            if (c) {
                buffer += ',';
            }
            if (m.observed(r, c)) {
                detail::append_number(buffer, m.value(r, c));
            }
        }
        buffer += '\n';
        if (buffer.size() > (1u << 16)) {
            out << buffer;
            buffer.clear();
        }
    }
    out << buffer;
}

inline void write_table(const MaskedMatrix& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw LoadError("cannot write '" + path + "'");
    }
    format_table(m, out);
    if (!out) {
        throw LoadError("failed while writing '" + path + "'");
    }
}

/**
 * Hides the file-specific block of the other file in every row: rows tagged `file1` lose `specific2`,
 * rows tagged `file2` lose `specific1`. Rows with any other tag keep their mask.
 * Missing cells are never turned into observed ones.
 */
inline MaskedMatrix apply_pattern(const MaskedMatrix& m, const FilePattern& pattern, std::span<const SourceFile> file_of_row) {
    pattern.validate(m.columns());
    if (static_cast<Index>(file_of_row.size()) != m.rows()) {
        throw ConfigError("one file tag per row is required");
    }

    const auto hide1 = m.column_indices(pattern.specific2);
    const auto hide2 = m.column_indices(pattern.specific1);
    MaskArray mask = m.mask();
    for (Index r = 0; r < m.rows(); ++r) {
        const auto tag = file_of_row[static_cast<std::size_t>(r)];
        if (tag != SourceFile::file1 && tag != SourceFile::file2) {
            continue;
        }
        for (auto c : tag == SourceFile::file1 ? hide1 : hide2) {
            mask(r, c) = false;
        }
    }
    return MaskedMatrix(m.columns(), m.values(), std::move(mask), std::vector<SourceFile>(file_of_row.begin(), file_of_row.end()), m.row_ids());
}

/** Convenience overload applying one tag to every row. */
inline MaskedMatrix apply_pattern(const MaskedMatrix& m, const FilePattern& pattern, SourceFile file) {
    std::vector<SourceFile> tags(static_cast<std::size_t>(m.rows()), file);
    return apply_pattern(m, pattern, tags);
}

struct MatchingSplit {
    MaskedMatrix file1;
    MaskedMatrix file2;
    MaskedMatrix evaluation;
};

/**
 * Randomly permutes the rows of a fully observed table (Fisher-Yates on `std::mt19937_64` seeded with `spec.seed`)
 * and cuts the permutation into file 1, file 2 and a held-out evaluation set, in that order.
 * The file pattern is applied to the two files; the evaluation rows stay fully observed.
 */
inline MatchingSplit split_for_matching(const MaskedMatrix& m, const SplitSpec& spec) {
    if (!m.fully_observed()) {
        throw ConfigError("splitting requires a fully observed table");
    }
    if (spec.n1 < 1 || spec.n2 < 1 || spec.n_eval < 1) {
        throw SizeError("split counts must all be at least 1");
    }
    const auto n = static_cast<std::size_t>(m.rows());
    if (spec.n1 + spec.n2 + spec.n_eval > n) {
        throw SizeError("split needs " + std::to_string(spec.n1 + spec.n2 + spec.n_eval) + " rows but the table has " + std::to_string(n));
    }
    spec.pattern.validate(m.columns());

    Rng rng(spec.seed);
    const auto order = detail::permutation(n, rng);
    const std::span<const std::size_t> all(order);

    auto file1 = m.select_rows(all.subspan(0, spec.n1));
    auto file2 = m.select_rows(all.subspan(spec.n1, spec.n2));
    auto evaluation = m.select_rows(all.subspan(spec.n1 + spec.n2, spec.n_eval));

    return MatchingSplit{
        apply_pattern(file1, spec.pattern, SourceFile::file1),
        apply_pattern(file2, spec.pattern, SourceFile::file2),
        evaluation.with_sources(std::vector<SourceFile>(spec.n_eval, SourceFile::evaluation)),
    };
}

}

#endif
