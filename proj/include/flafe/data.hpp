#pragma once

// Dataset handling for the simulator: CSV ingest, the train/val/test split,
// and the three partitioning geometries (horizontal rows, vertical columns,
// hybrid grid). Everything is seeded and deterministic; partition manifests
// can be serialized so a run is reconstructible from its report.

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace flafe {

struct Dataset {
    std::vector<std::vector<double>> X;  // column-major: X[j] is feature column j
    std::vector<double> y;
    std::vector<std::string> feature_names;

    std::size_t rows() const { return y.size(); }
    std::size_t features() const { return X.size(); }
};

struct LoadResult {
    Dataset data;
    std::size_t rows_dropped = 0;
};

namespace detail {

inline bool parse_cell(std::string_view cell, double& out) {
    std::size_t a = 0, b = cell.size();
    while (a < b && (cell[a] == ' ' || cell[a] == '\t' || cell[a] == '\r')) ++a;
    while (b > a && (cell[b - 1] == ' ' || cell[b - 1] == '\t' || cell[b - 1] == '\r')) --b;
    if (a == b) return false;
    const char* first = cell.data() + a;
    const char* last = cell.data() + b;
    auto res = std::from_chars(first, last, out);
    return res.ec == std::errc{} && res.ptr == last && std::isfinite(out);
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == delim) {
            out.emplace_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
    return s.substr(a, b - a);
}

}  // namespace detail

// Loads a delimited numeric file. `target` selects the target column: a
// header name, "#<index>" (0-based), or "last". Rows with missing or
// non-numeric cells are dropped and counted. The delimiter is sniffed from
// the first line (comma, semicolon, or tab; whitespace-separated files fall
// back to tab after normalization).
inline LoadResult load_csv(const std::string& path, const std::string& target, bool has_header) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);

    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!detail::trim(line).empty()) lines.push_back(line);
    }
    if (lines.empty()) throw SchemaError("dataset file is empty: " + path);

    char delim = ',';
    {
        const std::string& probe = lines.front();
        if (probe.find(',') == std::string::npos) {
            if (probe.find(';') != std::string::npos) delim = ';';
            else delim = '\t';
        }
    }
    if (delim == '\t') {
        // normalize runs of spaces/tabs to single tabs for whitespace-delimited files
        for (auto& l : lines) {
            std::string norm;
            bool in_ws = true;  // also strips leading whitespace
            for (char c : l) {
                if (c == ' ' || c == '\t') {
                    if (!in_ws) norm += '\t';
                    in_ws = true;
                } else {
                    norm += c;
                    in_ws = false;
                }
            }
            while (!norm.empty() && norm.back() == '\t') norm.pop_back();
            l = norm;
        }
    }

    std::size_t first_data = 0;
    std::vector<std::string> names;
    std::size_t width = detail::split_line(lines[0], delim).size();
    if (has_header) {
        for (auto& cell : detail::split_line(lines[0], delim)) names.push_back(detail::trim(cell));
        first_data = 1;
        if (lines.size() < 2) throw SchemaError("dataset has a header but no data rows");
    } else {
        for (std::size_t j = 0; j < width; ++j) names.push_back("c" + std::to_string(j));
    }
    if (width < 2) throw SchemaError("dataset needs at least two columns (features + target)");

    std::size_t target_idx;
    if (target == "last") {
        target_idx = width - 1;
    } else if (!target.empty() && target[0] == '#') {
        long long idx = -1;
        try { idx = std::stoll(target.substr(1)); } catch (...) {}
        if (idx < 0 || std::size_t(idx) >= width)
            throw SchemaError("target index " + target + " out of range for " +
                              std::to_string(width) + " columns");
        target_idx = std::size_t(idx);
    } else {
        auto it = std::find(names.begin(), names.end(), target);
        if (it == names.end())
            throw SchemaError("target column '" + target + "' not found in header");
        target_idx = std::size_t(it - names.begin());
    }

    LoadResult result;
    Dataset& ds = result.data;
    ds.X.assign(width - 1, {});
    for (std::size_t j = 0; j < width; ++j)
        if (j != target_idx) ds.feature_names.push_back(names[j]);

    for (std::size_t r = first_data; r < lines.size(); ++r) {
        auto cells = detail::split_line(lines[r], delim);
        if (cells.size() != width) {
            ++result.rows_dropped;
            continue;
        }
        std::vector<double> vals(width);
        bool ok = true;
        for (std::size_t j = 0; j < width; ++j) {
            if (!detail::parse_cell(cells[j], vals[j])) { ok = false; break; }
        }
        if (!ok) {
            ++result.rows_dropped;
            continue;
        }
        std::size_t fj = 0;
        for (std::size_t j = 0; j < width; ++j) {
            if (j == target_idx) continue;
            ds.X[fj++].push_back(vals[j]);
        }
        ds.y.push_back(vals[target_idx]);
    }

    if (ds.rows() == 0) throw SchemaError("no usable data rows in " + path);
    if (ds.rows() < 10) throw SchemaError("dataset too small: need at least 10 usable rows");
    if (ds.features() < 2) throw SchemaError("dataset needs at least 2 feature columns");
    return result;
}

// ---- splits ----

struct SplitSpec {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

struct Splits {
    Dataset train, val, test;
    std::vector<std::size_t> train_rows, val_rows, test_rows;  // indices into the source
};

namespace detail {

inline Dataset take_rows(const Dataset& src, const std::vector<std::size_t>& rows) {
    Dataset out;
    out.feature_names = src.feature_names;
    out.X.assign(src.features(), {});
    for (std::size_t j = 0; j < src.features(); ++j) {
        out.X[j].reserve(rows.size());
        for (std::size_t r : rows) out.X[j].push_back(src.X[j][r]);
    }
    out.y.reserve(rows.size());
    for (std::size_t r : rows) out.y.push_back(src.y[r]);
    return out;
}

}  // namespace detail

// Sizes are round(fraction*N) for val and test with the remainder going to
// train. The shuffle is a seeded Fisher-Yates, so a seed pins the split.
inline Splits split_train_val_test(const Dataset& ds, const SplitSpec& spec, std::uint64_t seed) {
    if (spec.train <= 0 || spec.val < 0 || spec.test < 0 ||
        std::fabs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
        throw ParamError("split fractions must be positive and sum to 1");
    std::size_t n = ds.rows();
    std::size_t n_val = std::size_t(std::llround(spec.val * double(n)));
    std::size_t n_test = std::size_t(std::llround(spec.test * double(n)));
    if (n_val + n_test >= n) throw ParamError("split leaves no training rows");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    RngStream rng(derive_seed(seed, "split"));
    rng.shuffle(idx);

    Splits out;
    std::size_t n_train = n - n_val - n_test;
    out.train_rows.assign(idx.begin(), idx.begin() + n_train);
    out.val_rows.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    out.test_rows.assign(idx.begin() + n_train + n_val, idx.end());
    std::sort(out.train_rows.begin(), out.train_rows.end());
    std::sort(out.val_rows.begin(), out.val_rows.end());
    std::sort(out.test_rows.begin(), out.test_rows.end());
    out.train = detail::take_rows(ds, out.train_rows);
    out.val = detail::take_rows(ds, out.val_rows);
    out.test = detail::take_rows(ds, out.test_rows);
    return out;
}

// ---- client shards ----

struct ClientShard {
    int client_id = 0;
    int row_block = 0;  // hybrid grid coordinates; horizontal uses row_block,
    int col_block = 0;  // vertical uses col_block, both zero-based
    std::vector<std::size_t> rows;          // sorted indices into the partitioned dataset
    std::vector<int> columns;               // sorted global column ids
    std::vector<std::vector<double>> X;     // one vector per entry of `columns`
    std::vector<double> y;                  // targets for `rows`

    const std::vector<double>* column_by_global_id(int gid) const {
        auto it = std::lower_bound(columns.begin(), columns.end(), gid);
        if (it == columns.end() || *it != gid) return nullptr;
        return &X[std::size_t(it - columns.begin())];
    }
};

namespace detail {

inline ClientShard make_shard(const Dataset& ds, int client_id,
                              std::vector<std::size_t> rows, std::vector<int> columns) {
    std::sort(rows.begin(), rows.end());
    std::sort(columns.begin(), columns.end());
    ClientShard s;
    s.client_id = client_id;
    s.rows = std::move(rows);
    s.columns = std::move(columns);
    s.X.reserve(s.columns.size());
    for (int c : s.columns) {
        std::vector<double> col;
        col.reserve(s.rows.size());
        for (std::size_t r : s.rows) col.push_back(ds.X[std::size_t(c)][r]);
        s.X.push_back(std::move(col));
    }
    s.y.reserve(s.rows.size());
    for (std::size_t r : s.rows) s.y.push_back(ds.y[r]);
    return s;
}

inline std::vector<std::vector<std::size_t>> deal_near_equal(std::vector<std::size_t> items,
                                                             std::size_t parts, RngStream& rng) {
    rng.shuffle(items);
    std::vector<std::vector<std::size_t>> out(parts);
    std::size_t base = items.size() / parts, rem = items.size() % parts;
    std::size_t at = 0;
    for (std::size_t p = 0; p < parts; ++p) {
        std::size_t take = base + (p < rem ? 1 : 0);
        out[p].assign(items.begin() + at, items.begin() + at + take);
        at += take;
    }
    return out;
}

}  // namespace detail

struct HorizontalPartition {
    enum class Mode { iid, dirichlet } mode = Mode::iid;
    double alpha = 1.0;  // dirichlet concentration over target-quantile bins
};

inline std::vector<ClientShard> partition_horizontal(const Dataset& train, std::size_t q,
                                                     const HorizontalPartition& part,
                                                     std::uint64_t seed) {
    if (q == 0) throw PartitionError("need at least one client");
    if (q > train.rows()) throw PartitionError("more clients than training rows");
    std::vector<int> all_cols(train.features());
    std::iota(all_cols.begin(), all_cols.end(), 0);

    std::vector<std::vector<std::size_t>> assignment(q);
    RngStream rng(derive_seed(seed, "partition-horizontal"));

    if (part.mode == HorizontalPartition::Mode::iid) {
        std::vector<std::size_t> idx(train.rows());
        std::iota(idx.begin(), idx.end(), 0);
        assignment = detail::deal_near_equal(std::move(idx), q, rng);
    } else {
        if (part.alpha <= 0) throw ParamError("dirichlet alpha must be positive");
        // Quantile-bin the target, then split each bin by a Dirichlet draw.
        std::vector<std::size_t> order(train.rows());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return train.y[a] < train.y[b]; });
        std::size_t bins = std::min<std::size_t>(10, train.rows());
        for (std::size_t b = 0; b < bins; ++b) {
            std::size_t lo = b * train.rows() / bins;
            std::size_t hi = (b + 1) * train.rows() / bins;
            std::vector<std::size_t> bin_rows(order.begin() + lo, order.begin() + hi);
            rng.shuffle(bin_rows);
            std::vector<double> w(q);
            double total = 0;
            for (auto& v : w) { v = rng.gamma(part.alpha); total += v; }
            // largest-remainder allocation of bin rows to the drawn proportions
            std::vector<std::size_t> counts(q);
            std::vector<std::pair<double, std::size_t>> rema(q);
            std::size_t assigned = 0;
            for (std::size_t k = 0; k < q; ++k) {
                double share = double(bin_rows.size()) * w[k] / total;
                counts[k] = std::size_t(share);
                rema[k] = {share - double(counts[k]), k};
                assigned += counts[k];
            }
            std::sort(rema.begin(), rema.end(), [](auto& a, auto& b) {
                return a.first != b.first ? a.first > b.first : a.second < b.second;
            });
            for (std::size_t i = 0; assigned < bin_rows.size(); ++i, ++assigned)
                ++counts[rema[i % q].second];
            std::size_t at = 0;
            for (std::size_t k = 0; k < q; ++k) {
                for (std::size_t i = 0; i < counts[k]; ++i)
                    assignment[k].push_back(bin_rows[at++]);
            }
        }
        // every shard must stay non-empty; steal from the largest if needed
        for (std::size_t k = 0; k < q; ++k) {
            if (!assignment[k].empty()) continue;
            std::size_t big = 0;
            for (std::size_t j = 1; j < q; ++j)
                if (assignment[j].size() > assignment[big].size()) big = j;
            if (assignment[big].size() <= 1) throw PartitionError("cannot give every client a row");
            assignment[k].push_back(assignment[big].back());
            assignment[big].pop_back();
        }
    }

    std::vector<ClientShard> shards;
    shards.reserve(q);
    for (std::size_t k = 0; k < q; ++k) {
        ClientShard s = detail::make_shard(train, int(k), std::move(assignment[k]), all_cols);
        s.row_block = int(k);
        shards.push_back(std::move(s));
    }
    return shards;
}

// Disjoint near-equal column sets; every client keeps the full target vector.
inline std::vector<ClientShard> partition_vertical(const Dataset& train, std::size_t q,
                                                   std::uint64_t seed) {
    if (q == 0) throw PartitionError("need at least one client");
    if (q > train.features()) throw PartitionError("more clients than feature columns");
    std::vector<std::size_t> cols(train.features());
    std::iota(cols.begin(), cols.end(), 0);
    RngStream rng(derive_seed(seed, "partition-vertical"));
    auto dealt = detail::deal_near_equal(std::move(cols), q, rng);

    std::vector<std::size_t> all_rows(train.rows());
    std::iota(all_rows.begin(), all_rows.end(), 0);

    std::vector<ClientShard> shards;
    shards.reserve(q);
    for (std::size_t k = 0; k < q; ++k) {
        std::vector<int> cset(dealt[k].begin(), dealt[k].end());
        ClientShard s = detail::make_shard(train, int(k), all_rows, std::move(cset));
        s.col_block = int(k);
        shards.push_back(std::move(s));
    }
    return shards;
}

// R x C grid: one row partition shared by every column block, one column
// partition shared by every row block. Client (r,c) has id r*C + c.
inline std::vector<ClientShard> partition_hybrid(const Dataset& train, std::size_t r_blocks,
                                                 std::size_t c_blocks, std::uint64_t seed) {
    if (r_blocks == 0 || c_blocks == 0) throw PartitionError("grid dimensions must be positive");
    if (r_blocks > train.rows()) throw PartitionError("more row blocks than training rows");
    if (c_blocks > train.features()) throw PartitionError("more column blocks than feature columns");

    RngStream row_rng(derive_seed(seed, "partition-hybrid-rows"));
    RngStream col_rng(derive_seed(seed, "partition-hybrid-cols"));
    std::vector<std::size_t> ridx(train.rows());
    std::iota(ridx.begin(), ridx.end(), 0);
    auto row_blocks = detail::deal_near_equal(std::move(ridx), r_blocks, row_rng);
    std::vector<std::size_t> cidx(train.features());
    std::iota(cidx.begin(), cidx.end(), 0);
    auto col_blocks = detail::deal_near_equal(std::move(cidx), c_blocks, col_rng);

    std::vector<ClientShard> shards;
    shards.reserve(r_blocks * c_blocks);
    for (std::size_t r = 0; r < r_blocks; ++r) {
        for (std::size_t c = 0; c < c_blocks; ++c) {
            std::vector<int> cset(col_blocks[c].begin(), col_blocks[c].end());
            ClientShard s = detail::make_shard(train, int(r * c_blocks + c), row_blocks[r], cset);
            s.row_block = int(r);
            s.col_block = int(c);
            shards.push_back(std::move(s));
        }
    }
    return shards;
}

// ---- federated standardization ----

struct SuffStats {
    double count = 0, sum = 0, sumsq = 0;

    void add(double v) {
        if (!std::isfinite(v)) return;  // NaN entries carry no information
        count += 1;
        sum += v;
        sumsq += v * v;
    }
    SuffStats& operator+=(const SuffStats& o) {
        count += o.count;
        sum += o.sum;
        sumsq += o.sumsq;
        return *this;
    }
};

inline SuffStats column_stats(const std::vector<double>& col) {
    SuffStats s;
    for (double v : col) s.add(v);
    return s;
}

struct FeatureStat {
    double mean = 0, stddev = 0;
    bool degenerate = false;  // pooled std below 1e-12: standardizes to zero
};

// Pools per-client (count, sum, sumsq) triples into population mean/std.
// This is what travels in the stats round; clients never share raw columns.
inline FeatureStat pool_stats(const std::vector<SuffStats>& parts) {
    SuffStats total;
    for (const auto& p : parts) total += p;
    FeatureStat out;
    if (total.count <= 0) {
        out.degenerate = true;
        return out;
    }
    out.mean = total.sum / total.count;
    double var = total.sumsq / total.count - out.mean * out.mean;
    if (var < 0) var = 0;  // guard against cancellation
    out.stddev = std::sqrt(var);
    if (out.stddev < 1e-12) {
        out.stddev = 0;
        out.degenerate = true;
    }
    return out;
}

inline std::vector<FeatureStat> federated_standardization_stats(
    const std::vector<std::vector<SuffStats>>& per_client) {
    if (per_client.empty()) return {};
    std::size_t features = per_client.front().size();
    std::vector<FeatureStat> out(features);
    for (std::size_t j = 0; j < features; ++j) {
        std::vector<SuffStats> parts;
        parts.reserve(per_client.size());
        for (const auto& client : per_client) {
            if (client.size() != features)
                throw ParamError("clients disagree on feature count in stats round");
            parts.push_back(client[j]);
        }
        out[j] = pool_stats(parts);
    }
    return out;
}

// Degenerate or non-finite values standardize to zero (the pooled mean).
inline double standardize_value(double v, const FeatureStat& st) {
    if (st.degenerate || !std::isfinite(v)) return 0.0;
    return (v - st.mean) / st.stddev;
}

inline std::vector<double> standardize_column(const std::vector<double>& col, const FeatureStat& st) {
    std::vector<double> out;
    out.reserve(col.size());
    for (double v : col) out.push_back(standardize_value(v, st));
    return out;
}

// ---- manifest ----

inline std::string write_partition_manifest(const std::vector<ClientShard>& shards) {
    std::ostringstream os;
    os << "clients " << shards.size() << "\n";
    for (const auto& s : shards) {
        os << "client " << s.client_id << " row_block " << s.row_block << " col_block "
           << s.col_block << "\n";
        os << "  rows";
        for (auto r : s.rows) os << ' ' << r;
        os << "\n  cols";
        for (auto c : s.columns) os << ' ' << c;
        os << "\n";
    }
    return os.str();
}

}  // namespace flafe
