#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "flafe/data.hpp"

using namespace flafe;

namespace {

Dataset synthetic(std::size_t n, std::size_t m, std::uint64_t seed) {
    RngStream rng(seed);
    Dataset ds;
    ds.X.assign(m, {});
    for (std::size_t j = 0; j < m; ++j) {
        ds.feature_names.push_back("c" + std::to_string(j));
        ds.X[j].reserve(n);
        for (std::size_t i = 0; i < n; ++i) ds.X[j].push_back(rng.uniform(-2, 2));
    }
    ds.y.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ds.y.push_back(rng.uniform(-1, 1));
    return ds;
}

std::filesystem::path temp_csv(const std::string& name, const std::string& body) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::ofstream out(p);
    out << body;
    return p;
}

}  // namespace

TEST_CASE("split arithmetic and determinism") {
    Dataset ds = synthetic(1000, 3, 7);
    Splits s = split_train_val_test(ds, {}, 42);
    CHECK(s.train.rows() == 600);
    CHECK(s.val.rows() == 200);
    CHECK(s.test.rows() == 200);

    // disjoint and covering
    std::set<std::size_t> seen;
    for (auto r : s.train_rows) seen.insert(r);
    for (auto r : s.val_rows) seen.insert(r);
    for (auto r : s.test_rows) seen.insert(r);
    CHECK(seen.size() == 1000);

    Splits again = split_train_val_test(ds, {}, 42);
    CHECK(again.train_rows == s.train_rows);
    CHECK(again.val_rows == s.val_rows);

    Splits other = split_train_val_test(ds, {}, 43);
    CHECK(other.train_rows != s.train_rows);

    Dataset tiny = synthetic(10, 2, 9);
    Splits t = split_train_val_test(tiny, {}, 1);
    CHECK(t.train.rows() == 6);
    CHECK(t.val.rows() == 2);
    CHECK(t.test.rows() == 2);
}

TEST_CASE("horizontal partition sizes") {
    Dataset ds600 = synthetic(600, 4, 11);
    auto shards = partition_horizontal(ds600, 8, {}, 5);
    REQUIRE(shards.size() == 8);
    for (const auto& s : shards) {
        CHECK(s.rows.size() == 75);
        CHECK(s.columns.size() == 4);  // horizontal shards carry every column
        CHECK(s.y.size() == 75);
    }

    Dataset ds601 = synthetic(601, 4, 12);
    auto uneven = partition_horizontal(ds601, 8, {}, 5);
    std::multiset<std::size_t> sizes;
    for (const auto& s : uneven) sizes.insert(s.rows.size());
    CHECK(sizes.count(76) == 1);
    CHECK(sizes.count(75) == 7);

    // disjoint cover
    std::set<std::size_t> seen;
    for (const auto& s : uneven)
        for (auto r : s.rows) seen.insert(r);
    CHECK(seen.size() == 601);

    CHECK_THROWS_AS(partition_horizontal(synthetic(10, 2, 1), 11, {}, 0), PartitionError);
}

TEST_CASE("dirichlet with large alpha approaches IID sizes") {
    Dataset ds = synthetic(800, 3, 21);
    HorizontalPartition part;
    part.mode = HorizontalPartition::Mode::dirichlet;
    part.alpha = 1000.0;
    double expected = 800.0 / 8.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto shards = partition_horizontal(ds, 8, part, seed);
        std::size_t total = 0;
        for (const auto& s : shards) {
            total += s.rows.size();
            CHECK(std::fabs(double(s.rows.size()) - expected) / expected < 0.10);
        }
        CHECK(total == 800);
    }
}

TEST_CASE("dirichlet with small alpha is skewed but non-empty") {
    Dataset ds = synthetic(400, 3, 22);
    HorizontalPartition part;
    part.mode = HorizontalPartition::Mode::dirichlet;
    part.alpha = 0.1;
    std::size_t max_size = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto shards = partition_horizontal(ds, 4, part, seed);
        for (const auto& s : shards) {
            REQUIRE(!s.rows.empty());
            max_size = std::max(max_size, s.rows.size());
        }
    }
    CHECK(max_size > 150);  // far from the 100-row IID share
}

TEST_CASE("vertical partition") {
    Dataset ds = synthetic(50, 25, 31);
    auto shards = partition_vertical(ds, 3, 9);
    REQUIRE(shards.size() == 3);
    std::multiset<std::size_t> sizes;
    std::set<int> cols;
    for (const auto& s : shards) {
        sizes.insert(s.columns.size());
        for (int c : s.columns) cols.insert(c);
        CHECK(s.rows.size() == 50);
        CHECK(s.y.size() == 50);           // every vertical client holds the full target
        CHECK(s.y == ds.y);
    }
    CHECK(sizes == std::multiset<std::size_t>{9, 8, 8});
    CHECK(cols.size() == 25);  // disjoint cover

    auto one_each = partition_vertical(ds, 25, 9);
    for (const auto& s : one_each) CHECK(s.columns.size() == 1);

    CHECK_THROWS_AS(partition_vertical(ds, 26, 9), PartitionError);
}

TEST_CASE("hybrid grid partition") {
    Dataset ds = synthetic(101, 7, 41);
    auto shards = partition_hybrid(ds, 2, 2, 3);
    REQUIRE(shards.size() == 4);

    // the row partition must be identical across column blocks
    for (int r = 0; r < 2; ++r) {
        const auto& a = shards[std::size_t(r * 2 + 0)];
        const auto& b = shards[std::size_t(r * 2 + 1)];
        CHECK(a.rows == b.rows);
        CHECK(a.y == b.y);
        CHECK(a.columns != b.columns);
    }
    // and the column partition identical across row blocks
    for (int c = 0; c < 2; ++c) {
        CHECK(shards[std::size_t(c)].columns == shards[std::size_t(2 + c)].columns);
    }
    std::set<std::size_t> rows;
    std::set<int> cols;
    for (const auto& s : shards) {
        for (auto r : s.rows) rows.insert(r);
        for (int c : s.columns) cols.insert(c);
        CHECK(s.client_id == s.row_block * 2 + s.col_block);
    }
    CHECK(rows.size() == 101);
    CHECK(cols.size() == 7);

    // degenerate grids collapse to the other two geometries
    auto vertical_like = partition_hybrid(ds, 1, 3, 3);
    for (const auto& s : vertical_like) CHECK(s.rows.size() == 101);
    auto horizontal_like = partition_hybrid(ds, 3, 1, 3);
    for (const auto& s : horizontal_like) CHECK(s.columns.size() == 7);

    CHECK_THROWS_AS(partition_hybrid(ds, 0, 2, 3), PartitionError);
    CHECK_THROWS_AS(partition_hybrid(ds, 2, 8, 3), PartitionError);
}

TEST_CASE("pooled standardization stats") {
    SECTION("worked example") {
        SuffStats a = column_stats({1.0, 2.0});
        SuffStats b = column_stats({3.0, 4.0});
        FeatureStat st = pool_stats({a, b});
        CHECK(st.mean == Catch::Approx(2.5));
        CHECK(st.stddev == Catch::Approx(std::sqrt(1.25)));
        CHECK_FALSE(st.degenerate);
    }
    SECTION("single client equals local stats") {
        std::vector<double> col = {0.5, -1.5, 2.0, 4.0};
        FeatureStat st = pool_stats({column_stats(col)});
        double mean = (0.5 - 1.5 + 2.0 + 4.0) / 4.0;
        double var = 0;
        for (double v : col) var += (v - mean) * (v - mean);
        var /= 4.0;
        CHECK(st.mean == Catch::Approx(mean));
        CHECK(st.stddev == Catch::Approx(std::sqrt(var)));
    }
    SECTION("constant column flags degenerate") {
        FeatureStat st = pool_stats({column_stats({2.0, 2.0}), column_stats({2.0})});
        CHECK(st.degenerate);
        CHECK(standardize_value(2.0, st) == 0.0);
    }
    SECTION("NaN entries carry no weight") {
        std::vector<double> col = {1.0, std::nan(""), 3.0};
        SuffStats s = column_stats(col);
        CHECK(s.count == 2.0);
        FeatureStat st = pool_stats({s});
        CHECK(st.mean == Catch::Approx(2.0));
        CHECK(standardize_value(std::nan(""), st) == 0.0);
    }
    SECTION("property: pooled equals centralized within 1e-9 relative") {
        RngStream rng(derive_seed(77, "stats-prop"));
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> all;
            std::vector<SuffStats> parts;
            std::size_t clients = 2 + rng.below(5);
            for (std::size_t k = 0; k < clients; ++k) {
                std::vector<double> col;
                std::size_t n = 5 + rng.below(50);
                for (std::size_t i = 0; i < n; ++i) col.push_back(rng.uniform(-100, 100));
                all.insert(all.end(), col.begin(), col.end());
                parts.push_back(column_stats(col));
            }
            FeatureStat pooled = pool_stats(parts);
            FeatureStat central = pool_stats({column_stats(all)});
            CHECK(std::fabs(pooled.mean - central.mean) <=
                  1e-9 * std::max(1.0, std::fabs(central.mean)));
            CHECK(std::fabs(pooled.stddev - central.stddev) <=
                  1e-9 * std::max(1.0, central.stddev));
        }
    }
}

TEST_CASE("csv ingest") {
    SECTION("drops malformed rows and counts them") {
        std::string body = "a,b,target\n";
        for (int i = 0; i < 12; ++i)
            body += std::to_string(i) + "," + std::to_string(i * 2) + "," + std::to_string(i * 3) + "\n";
        body += "1,oops,3\n";   // non-numeric
        body += "4,5\n";        // missing cell
        auto p = temp_csv("flafe_test_drop.csv", body);
        LoadResult r = load_csv(p.string(), "target", true);
        CHECK(r.data.rows() == 12);
        CHECK(r.rows_dropped == 2);
        CHECK(r.data.features() == 2);
        CHECK(r.data.y[3] == Catch::Approx(9.0));
        std::filesystem::remove(p);
    }
    SECTION("missing target name") {
        std::string body = "a,b\n";
        for (int i = 0; i < 12; ++i) body += "1,2\n";
        auto p = temp_csv("flafe_test_target.csv", body);
        CHECK_THROWS_AS(load_csv(p.string(), "nope", true), SchemaError);
        std::filesystem::remove(p);
    }
    SECTION("headerless with index and last selectors") {
        std::string body;
        for (int i = 0; i < 15; ++i) body += "1,2,5\n";
        auto p = temp_csv("flafe_test_headerless.csv", body);
        LoadResult r = load_csv(p.string(), "last", false);
        CHECK(r.data.features() == 2);
        CHECK(r.data.y.front() == Catch::Approx(5.0));
        LoadResult r2 = load_csv(p.string(), "#0", false);
        CHECK(r2.data.y.front() == Catch::Approx(1.0));
        std::filesystem::remove(p);
    }
    SECTION("tab and whitespace separated files work") {
        std::string body;
        for (int i = 0; i < 12; ++i) body += "1.5\t 2.5   \t3.5\n";
        auto p = temp_csv("flafe_test_tabs.csv", body);
        LoadResult r = load_csv(p.string(), "last", false);
        CHECK(r.data.features() == 2);
        CHECK(r.data.X[1][0] == Catch::Approx(2.5));
        std::filesystem::remove(p);
    }
    SECTION("too-small files are rejected") {
        auto p = temp_csv("flafe_test_small.csv", "1,2\n3,4\n");
        CHECK_THROWS_AS(load_csv(p.string(), "last", false), SchemaError);
        std::filesystem::remove(p);
    }
    SECTION("missing file is an IoError") {
        CHECK_THROWS_AS(load_csv("/nonexistent/nope.csv", "last", false), IoError);
    }
}

TEST_CASE("partition manifest is reconstructible text") {
    Dataset ds = synthetic(20, 4, 51);
    auto shards = partition_hybrid(ds, 2, 2, 7);
    std::string manifest = write_partition_manifest(shards);
    CHECK(manifest.find("clients 4") != std::string::npos);
    CHECK(manifest.find("client 3 row_block 1 col_block 1") != std::string::npos);
    // deterministic: same seed, same manifest bytes
    CHECK(write_partition_manifest(partition_hybrid(ds, 2, 2, 7)) == manifest);
}
