#include <gtest/gtest.h>

#include <cytomatch/data.hpp>
#include <cytomatch/synthetic.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

using namespace cytomatch;

namespace {

MaskedMatrix parse(const std::string& text, const std::string& token = "") {
    std::istringstream in(text);
    return parse_table(in, token, "test.csv");
}

std::string expect_load_error(const std::string& text) {
    try {
        parse(text);
    } catch (const LoadError& e) {
        return e.what();
    }
    ADD_FAILURE() << "no LoadError for:\n" << text;
    return {};
}

MaskedMatrix ramp(Index n, Index d) {
    RowMatrix values(n, d);
    for (Index r = 0; r < n; ++r) {
        for (Index c = 0; c < d; ++c) {
            values(r, c) = static_cast<double>(r * d + c);
        }
    }
    std::vector<std::string> names;
    for (Index c = 0; c < d; ++c) {
        names.push_back("v" + std::to_string(c));
    }
    return MaskedMatrix::complete(names, values);
}

}

TEST(LoadTable, BlankCellIsMissing) {
    const auto m = parse("a,b\n1,2\n3,\n");
    ASSERT_EQ(m.rows(), 2);
    ASSERT_EQ(m.cols(), 2);
    EXPECT_TRUE(m.observed(0, 0));
    EXPECT_TRUE(m.observed(0, 1));
    EXPECT_TRUE(m.observed(1, 0));
    EXPECT_FALSE(m.observed(1, 1));
    EXPECT_EQ(m.value(1, 0), 3.0);
    EXPECT_TRUE(std::isnan(m.value(1, 1)));
}

TEST(LoadTable, SingleCell) {
    const auto m = parse("a\n5\n");
    EXPECT_EQ(m.rows(), 1);
    EXPECT_EQ(m.cols(), 1);
    EXPECT_TRUE(m.fully_observed());
    EXPECT_EQ(m.value(0, 0), 5.0);
}

TEST(LoadTable, RaggedRowCitesLine) {
    const auto message = expect_load_error("a,b\n1,2\n3\n");
    EXPECT_NE(message.find("line 3"), std::string::npos) << message;
}

TEST(LoadTable, DuplicateColumnsRejected) {
    expect_load_error("a,a\n1,2\n");
}

TEST(LoadTable, NoDataRowsRejected) {
    expect_load_error("a,b\n");
}

TEST(LoadTable, BadNumberCitesLine) {
    const auto message = expect_load_error("a,b\n1,2\n3,4\n5,x\n");
    EXPECT_NE(message.find("line 4"), std::string::npos) << message;
}

TEST(LoadTable, CustomMissingToken) {
    const auto m = parse("a,b\nNA,2\n", "NA");
    EXPECT_FALSE(m.observed(0, 0));
    EXPECT_TRUE(m.observed(0, 1));
}

TEST(LoadTable, MissingFileNamesPath) {
    try {
        load_table("/nonexistent/dir/table.csv");
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/table.csv"), std::string::npos);
    }
}

TEST(WriteTable, RoundTripIsExact) {
    RowMatrix values(2, 3);
    values << 0.1, -1e-300, 123456789.123, std::nextafter(1.0, 2.0), 3.0, 0;
    MaskArray mask(2, 3);
    mask << true, true, false, true, false, true;
    const MaskedMatrix m({"x", "y", "z"}, values, mask);

    std::ostringstream out;
    format_table(m, out);
    const auto back = parse(out.str());
    ASSERT_EQ(back.columns(), m.columns());
    for (Index r = 0; r < 2; ++r) {
        for (Index c = 0; c < 3; ++c) {
            ASSERT_EQ(back.observed(r, c), m.observed(r, c));
            if (m.observed(r, c)) {
                EXPECT_EQ(back.value(r, c), m.value(r, c));
            }
        }
    }
}

TEST(MaskedMatrix, RejectsDuplicateOrEmptyNames) {
    RowMatrix values = RowMatrix::Zero(1, 2);
    EXPECT_THROW(MaskedMatrix::complete({"a", "a"}, values), ConfigError);
    EXPECT_THROW(MaskedMatrix::complete({"a", ""}, values), ConfigError);
}

TEST(MaskedMatrix, MissingCellsHoldNaN) {
    RowMatrix values(1, 2);
    values << 1, 2;
    MaskArray mask(1, 2);
    mask << true, false;
    const MaskedMatrix m({"a", "b"}, values, mask);
    EXPECT_TRUE(std::isnan(m.value(0, 1)));
}

TEST(ApplyPattern, HidesSpecificBlocks) {
    const auto m = ramp(2, 3);
    const MaskedMatrix named({"x", "y", "z"}, m.values(), m.mask());
    const FilePattern pattern{{"x"}, {"y"}, {"z"}};
    const std::vector<SourceFile> files{SourceFile::file1, SourceFile::file2};
    const auto out = apply_pattern(named, pattern, files);
    EXPECT_TRUE(out.observed(0, 0));
    EXPECT_TRUE(out.observed(0, 1));
    EXPECT_FALSE(out.observed(0, 2));
    EXPECT_TRUE(out.observed(1, 0));
    EXPECT_FALSE(out.observed(1, 1));
    EXPECT_TRUE(out.observed(1, 2));
    EXPECT_EQ(out.value(0, 1), named.value(0, 1));
}

TEST(ApplyPattern, EmptySpecificOneLeavesFileTwoComplete) {
    const auto m = ramp(3, 2);
    const FilePattern pattern{{"v0"}, {}, {"v1"}};
    const auto out = apply_pattern(m, pattern, SourceFile::file2);
    EXPECT_TRUE(out.fully_observed());
}

TEST(ApplyPattern, UnknownColumnIsConfigError) {
    const auto m = ramp(2, 2);
    const FilePattern pattern{{"v0"}, {"nope"}, {"v1"}};
    EXPECT_THROW(apply_pattern(m, pattern, SourceFile::file1), ConfigError);
}

TEST(ApplyPattern, LymphNodeFileStructure) {
    const auto panel = lymph_node_panel();
    RowMatrix values = RowMatrix::Ones(2, 7);
    const auto m = MaskedMatrix::complete(panel.markers, values);
    const std::vector<SourceFile> files{SourceFile::file1, SourceFile::file2};
    const auto out = apply_pattern(m, lymph_node_pattern(), files);
    // FS SS CD56 CD16 CD3 CD8 CD4
    const std::array<bool, 7> file1{true, true, true, true, true, false, false};
    const std::array<bool, 7> file2{true, true, true, false, false, true, true};
    for (Index c = 0; c < 7; ++c) {
        EXPECT_EQ(out.observed(0, c), file1[static_cast<std::size_t>(c)]);
        EXPECT_EQ(out.observed(1, c), file2[static_cast<std::size_t>(c)]);
    }
}

TEST(FilePattern, MustCoverAllColumnsDisjointly) {
    const std::vector<std::string> cols{"a", "b", "c"};
    EXPECT_NO_THROW((FilePattern{{"a"}, {"b"}, {"c"}}.validate(cols)));
    EXPECT_THROW((FilePattern{{"a"}, {"b"}, {}}.validate(cols)), ConfigError);
    EXPECT_THROW((FilePattern{{"a"}, {"a", "b"}, {"c"}}.validate(cols)), ConfigError);
    EXPECT_THROW((FilePattern{{}, {"a", "b"}, {"c"}}.validate(cols)), ConfigError);
}

TEST(Split, DeterministicForEqualSeeds) {
    const auto m = ramp(20, 3);
    const FilePattern pattern{{"v0"}, {"v1"}, {"v2"}};
    const auto a = split_for_matching(m, SplitSpec{8, 8, 4, 11, pattern});
    const auto b = split_for_matching(m, SplitSpec{8, 8, 4, 11, pattern});
    const auto c = split_for_matching(m, SplitSpec{8, 8, 4, 12, pattern});
    EXPECT_EQ(a.file1.row_ids(), b.file1.row_ids());
    EXPECT_EQ(a.file2.row_ids(), b.file2.row_ids());
    EXPECT_EQ(a.evaluation.row_ids(), b.evaluation.row_ids());
    std::vector<std::size_t> all_a = a.file1.row_ids();
    std::vector<std::size_t> all_c = c.file1.row_ids();
    all_a.insert(all_a.end(), a.file2.row_ids().begin(), a.file2.row_ids().end());
    all_c.insert(all_c.end(), c.file2.row_ids().begin(), c.file2.row_ids().end());
    EXPECT_NE(all_a, all_c);
}

TEST(Split, ExactPartitionDropsNothing) {
    const auto m = ramp(20, 3);
    const FilePattern pattern{{"v0"}, {"v1"}, {"v2"}};
    const auto s = split_for_matching(m, SplitSpec{8, 8, 4, 3, pattern});
    std::set<std::size_t> ids;
    for (const auto* part : {&s.file1, &s.file2, &s.evaluation}) {
        ids.insert(part->row_ids().begin(), part->row_ids().end());
    }
    EXPECT_EQ(ids.size(), 20u);
    EXPECT_FALSE(s.file1.observed(0, 2));
    EXPECT_FALSE(s.file2.observed(0, 1));
    EXPECT_TRUE(s.evaluation.fully_observed());
}

TEST(Split, LymphPanelSizes) {
    const auto m = ramp(25223, 3);
    const FilePattern pattern{{"v0"}, {"v1"}, {"v2"}};
    const auto s = split_for_matching(m, SplitSpec{10000, 10000, 5223, 1, pattern});
    EXPECT_EQ(s.file1.rows(), 10000);
    EXPECT_EQ(s.file2.rows(), 10000);
    EXPECT_EQ(s.evaluation.rows(), 5223);
}

TEST(Split, OversizedCountsRejected) {
    const auto m = ramp(10, 3);
    const FilePattern pattern{{"v0"}, {"v1"}, {"v2"}};
    EXPECT_THROW(split_for_matching(m, SplitSpec{5, 5, 1, 1, pattern}), SizeError);
}

TEST(Split, NoRowAppearsTwiceForAnySeed) {
    const auto m = ramp(50, 3);
    const FilePattern pattern{{"v0"}, {"v1"}, {"v2"}};
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        const auto s = split_for_matching(m, SplitSpec{15, 20, 10, seed, pattern});
        std::vector<std::size_t> ids;
        for (const auto* part : {&s.file1, &s.file2, &s.evaluation}) {
            ids.insert(ids.end(), part->row_ids().begin(), part->row_ids().end());
            // values travel with their row id
            for (Index r = 0; r < part->rows(); ++r) {
                EXPECT_EQ(part->value(r, 0), m.value(static_cast<Index>(part->row_ids()[static_cast<std::size_t>(r)]), 0));
            }
        }
        std::sort(ids.begin(), ids.end());
        EXPECT_EQ(std::adjacent_find(ids.begin(), ids.end()), ids.end());
    }
}
