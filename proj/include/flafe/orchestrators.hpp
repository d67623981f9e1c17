#pragma once

// End-to-end pipelines for the three federation shapes, run over a simulated
// star network. The horizontal pipeline engineers features per client and
// masks the shared union; the vertical and hybrid pipelines combine
// per-client columns under encryption and mask the decrypted results. Every
// exchange flows through SimNetwork so a run's transcript and communication
// cost can be audited afterwards.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "autofe.hpp"
#include "common.hpp"
#include "data.hpp"
#include "expr.hpp"
#include "fedtrain.hpp"
#include "he.hpp"
#include "selection.hpp"

namespace flafe {

enum class Setting { Horizontal, Vertical, Hybrid };

inline const char* setting_name(Setting s) {
    switch (s) {
        case Setting::Horizontal: return "horizontal";
        case Setting::Vertical: return "vertical";
        case Setting::Hybrid: return "hybrid";
    }
    return "?";
}

// ---- simulated network ----

// Star topology: clients exchange messages with the server only, and every
// exchange lands in the ledger, which rejects raw-column payloads outright.
// Payloads move by reference inside the process; the ledger accounts what
// would travel, in 64-bit words.
class SimNetwork {
public:
    explicit SimNetwork(int clients) : clients_(clients) {
        if (clients < 1) throw ParamError("a federation needs at least one client");
    }

    int clients() const { return clients_; }
    CommLedger& ledger() { return ledger_; }
    const CommLedger& ledger() const { return ledger_; }

    void to_server(int round, MsgKind kind, std::size_t scalars, int from_client) {
        check_client(from_client);
        ledger_.record(round, kind, scalars, from_client, kServer);
    }
    void to_client(int round, MsgKind kind, std::size_t scalars, int to_client) {
        check_client(to_client);
        ledger_.record(round, kind, scalars, kServer, to_client);
    }

private:
    void check_client(int id) const {
        if (id < 0 || id >= clients_)
            throw ProtocolError("endpoint " + std::to_string(id) +
                                " is not a registered client; messages pass through the server");
    }

    int clients_ = 0;
    CommLedger ledger_;
};

// ---- run configuration ----

struct FlafeConfig {
    Setting setting = Setting::Horizontal;
    int outer_iters = 1;   // feature rounds: union/mask cycles, or combine/mask cycles
    int important_k = 1;   // features each party offers for cross combination
    SelectionParams selection;
    TrainHyper train;
    AutoFEConfig autofe;
    HEParams he;
    std::vector<BinOp> local_funcs = autofe_default_binary();
    std::vector<BinOp> cross_funcs = {BinOp::Add, BinOp::Sub, BinOp::Mul};
    double laplace_b = 0.05;  // noise scale applied to combined features in transit
    bool use_mask = true;     // false keeps every candidate (the no-selection arm)
    std::uint64_t seed = 1;

    void validate() const {
        if (outer_iters < 1) throw ConfigError("outer iterations must be >= 1");
        if (important_k < 1) throw ConfigError("per-client important feature count must be >= 1");
        if (laplace_b < 0) throw ConfigError("laplace scale must be >= 0");
        selection.validate();
        autofe.validate();
    }
};

// ---- provenance and reports ----

struct FeatureProvenance {
    std::string feature;      // canonical expression string
    int origin_a = 0;         // creating client (column block in grid settings)
    int origin_b = -1;        // second origin for cross combinations, else -1
    std::vector<int> owners;  // clients holding the numeric column
    int outer_iter = 1;
    double noise_b = 0.0;     // laplace scale absorbed in transit

    bool cross() const { return origin_b >= 0; }
};

struct IterationOutcome {
    int iteration = 1;
    std::size_t pool_size = 0;    // maskable candidates offered to selection
    std::size_t fresh_local = 0;  // new same-client candidates this iteration
    std::size_t fresh_cross = 0;  // new cross-client candidates this iteration
    std::size_t survivors = 0;
    double best_score = std::numeric_limits<double>::quiet_NaN();
    double best_sparsity = std::numeric_limits<double>::quiet_NaN();  // drawn probability
    double best_fill = std::numeric_limits<double>::quiet_NaN();      // realized ones fraction
};

struct RunReport {
    Setting setting = Setting::Horizontal;
    std::uint64_t seed = 0;
    std::vector<std::string> f_final;            // surviving engineered features
    std::vector<FeatureProvenance> provenance;   // parallel to f_final
    LinearModel model;                           // final model over raw + f_final
    double val_r2 = std::numeric_limits<double>::quiet_NaN();
    double test_r2 = std::numeric_limits<double>::quiet_NaN();
    std::vector<IterationOutcome> iterations;
    std::vector<LeaderboardEntry> leaderboard;   // survivor boards across iterations
    std::size_t trainings = 0;                   // model fits: selection, ranking, final
    std::size_t train_rounds = 0;                // communication rounds across those fits
    std::size_t routed_ciphertexts = 0;
    bool no_candidates = false;  // every iteration came up empty; model uses raw columns only
    CommLedger ledger;
};

// ---- federated dataset preparation ----

struct FederationPlan {
    Setting setting = Setting::Horizontal;
    SplitSpec split;
    std::size_t clients = 2;                     // horizontal and vertical shapes
    std::size_t row_blocks = 1, col_blocks = 1;  // hybrid grid shape
    HorizontalPartition horizontal;              // iid or dirichlet row assignment
};

struct FedDataset {
    Setting setting = Setting::Horizontal;
    Dataset train, val, test;  // clients share train; val and test stay on the server
    std::vector<ClientShard> shards;
    std::size_t row_blocks = 1, col_blocks = 1;

    std::size_t clients() const { return shards.size(); }
};

inline FedDataset prepare_federated(const Dataset& ds, const FederationPlan& plan,
                                    std::uint64_t seed) {
    FedDataset out;
    out.setting = plan.setting;
    Splits sp = split_train_val_test(ds, plan.split, seed);
    out.train = std::move(sp.train);
    out.val = std::move(sp.val);
    out.test = std::move(sp.test);
    switch (plan.setting) {
        case Setting::Horizontal:
            out.shards = partition_horizontal(out.train, plan.clients, plan.horizontal, seed);
            out.row_blocks = plan.clients;
            out.col_blocks = 1;
            break;
        case Setting::Vertical:
            out.shards = partition_vertical(out.train, plan.clients, seed);
            out.row_blocks = 1;
            out.col_blocks = plan.clients;
            break;
        case Setting::Hybrid:
            out.shards = partition_hybrid(out.train, plan.row_blocks, plan.col_blocks, seed);
            out.row_blocks = plan.row_blocks;
            out.col_blocks = plan.col_blocks;
            break;
    }
    return out;
}

// ---- pairwise feature combination ----

struct ComboSpec {
    std::size_t a = 0, b = 0;  // input indices; a == b marks a square
    BinOp op = BinOp::Add;
    ExprPtr expr;              // canonical combination expression
};

// All unordered pairs for the commutative operators, both orders for
// subtraction and division, squares only under multiplication (under the
// others they degenerate to rescalings or constants). Results are
// canonicalized and deduplicated; combinations that would exceed the
// expression depth cap are skipped rather than raised.
inline std::vector<ComboSpec> enumerate_pair_combos(const std::vector<ExprPtr>& feats,
                                                    const std::vector<BinOp>& funcs) {
    std::vector<ComboSpec> out;
    std::set<std::string> seen;
    auto push = [&](std::size_t a, std::size_t b, BinOp op, ExprPtr built) {
        std::string key = print_expr(built);
        if (seen.insert(key).second) out.push_back({a, b, op, std::move(built)});
    };
    std::vector<BinOp> ops;
    for (BinOp op : funcs)
        if (std::find(ops.begin(), ops.end(), op) == ops.end()) ops.push_back(op);
    for (BinOp op : ops) {
        bool ordered = (op == BinOp::Sub || op == BinOp::Div);
        for (std::size_t i = 0; i < feats.size(); ++i) {
            if (op == BinOp::Mul) {
                try {
                    push(i, i, op, canonicalize(exprs::power(feats[i], 2)));
                } catch (const LimitError&) {
                }
            }
            for (std::size_t j = i + 1; j < feats.size(); ++j) {
                try {
                    push(i, j, op, canonicalize(exprs::binary(op, feats[i], feats[j])));
                } catch (const LimitError&) {
                }
                if (!ordered) continue;
                try {
                    push(j, i, op, canonicalize(exprs::binary(op, feats[j], feats[i])));
                } catch (const LimitError&) {
                }
            }
        }
    }
    return out;
}

inline std::vector<ExprPtr> create_local_combinations(const std::vector<ExprPtr>& feats,
                                                      const std::vector<BinOp>& funcs) {
    std::vector<ExprPtr> out;
    for (auto& c : enumerate_pair_combos(feats, funcs)) out.push_back(std::move(c.expr));
    return out;
}

// Numeric twins of the combination expressions. Owners hold foreign-origin
// columns only as numbers, so combinations over them must be computed
// directly; these mirror evaluate()'s guard and sanitization rules exactly.
inline std::vector<double> apply_binop(BinOp op, const std::vector<double>& x,
                                       const std::vector<double>& y) {
    if (x.size() != y.size()) throw ParamError("combined columns must have equal length");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double r = 0;
        switch (op) {
            case BinOp::Add: r = x[i] + y[i]; break;
            case BinOp::Sub: r = x[i] - y[i]; break;
            case BinOp::Mul: r = x[i] * y[i]; break;
            case BinOp::Div:
                r = std::fabs(y[i]) < kDivisionGuard ? std::numeric_limits<double>::quiet_NaN()
                                                     : x[i] / y[i];
                break;
        }
        out[i] = std::isfinite(r) ? r : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

inline std::vector<double> apply_square(const std::vector<double>& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double r = x[i] * x[i];
        out[i] = std::isfinite(r) ? r : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

inline std::vector<double> apply_combo(const ComboSpec& combo, const Cols& inputs) {
    if (combo.a >= inputs.size() || combo.b >= inputs.size())
        throw ParamError("combination index out of range");
    if (combo.a == combo.b) return apply_square(inputs[combo.a]);
    return apply_binop(combo.op, inputs[combo.a], inputs[combo.b]);
}

// ---- feature importance ----

namespace detail {

// nonzero coefficients first, larger magnitude first, ties to the lower index
inline std::vector<std::size_t> rank_by_weight(const std::vector<double>& w, std::size_t k) {
    std::vector<std::size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        bool nza = w[a] != 0.0, nzb = w[b] != 0.0;
        if (nza != nzb) return nza;
        double fa = std::fabs(w[a]), fb = std::fabs(w[b]);
        if (fa != fb) return fa > fb;
        return a < b;
    });
    if (idx.size() > k) idx.resize(k);
    return idx;
}

}  // namespace detail

// Local variant: an L1 fit on the client's own standardized columns ranks
// its features. Returns min(k, width) indices, most important first.
inline std::vector<std::size_t> rank_important_features(const Cols& X,
                                                        const std::vector<double>& y,
                                                        std::size_t k, const TrainHyper& hyper) {
    if (X.empty()) throw ParamError("ranking needs at least one feature");
    if (k < 1) throw ParamError("ranking needs k >= 1");
    Cols Z(X.size());
    for (std::size_t j = 0; j < X.size(); ++j)
        Z[j] = standardize_column(X[j], pool_stats({column_stats(X[j])}));
    std::vector<double> yc = detail::center(y, mean_of(y));
    std::vector<double> w = lasso_coordinate_descent(Z, yc, hyper.lambda, 300, 1e-9);
    return detail::rank_by_weight(w, k);
}

struct RankShard {
    int client_id = 0;
    const Cols* X = nullptr;
    const std::vector<double>* y = nullptr;
};

struct FedRankResult {
    std::vector<std::size_t> top;
    std::vector<FeatureStat> stats;  // pooled per-feature stats from the exchange
    double y_mean = 0;
};

// Federated variant for columns whose rows are spread over several clients:
// one pooled standardization round, then averaged training at the configured
// budget; the averaged model is ranked exactly like the local variant.
inline FedRankResult rank_important_features(const std::vector<RankShard>& shards, std::size_t k,
                                             const TrainHyper& hyper, SimNetwork& net,
                                             int round = 0) {
    if (shards.empty()) throw ParamError("ranking needs at least one shard");
    if (k < 1) throw ParamError("ranking needs k >= 1");
    std::size_t d = shards.front().X->size();
    std::vector<std::vector<SuffStats>> parts;
    for (const auto& s : shards) {
        if (s.X->size() != d) throw ParamError("ranking shards disagree on feature count");
        std::vector<SuffStats> row;
        for (const auto& col : *s.X) row.push_back(column_stats(col));
        row.push_back(column_stats(*s.y));
        parts.push_back(std::move(row));
        net.to_server(round, MsgKind::SufficientStats, 3 * (d + 1), s.client_id);
    }
    std::vector<FeatureStat> pooled = federated_standardization_stats(parts);
    FedRankResult out;
    out.y_mean = pooled.back().mean;
    pooled.pop_back();
    out.stats = std::move(pooled);
    for (const auto& s : shards)
        net.to_client(round, MsgKind::StatsBroadcast, 2 * (d + 1), s.client_id);

    std::vector<Cols> Z(shards.size());
    std::vector<HorizontalClientData> clients;
    for (std::size_t s = 0; s < shards.size(); ++s) {
        Z[s].resize(d);
        for (std::size_t j = 0; j < d; ++j)
            Z[s][j] = standardize_column((*shards[s].X)[j], out.stats[j]);
        clients.push_back({&Z[s], shards[s].y});
    }
    LinearModel m = train_horizontal_fedavg(clients, out.y_mean, hyper, net.ledger());
    out.top = detail::rank_by_weight(m.weights, k);
    return out;
}

// ---- encrypted cross-client combination ----

struct EncryptedFeature {
    int owner = 0;
    ExprPtr expr;  // standardized-space description of the column
    EncryptedVector ct;
};

struct RoutedCipher {
    int owner = 0;  // client the combined feature was routed to
    int origin_a = 0, origin_b = 0;
    double noise_b = 0;
    ExprPtr expr;
    EncryptedVector ct;
};

struct GridEncrypted {
    int block = 0;  // owning column block
    ExprPtr expr;
    std::vector<EncryptedVector> cts;  // one ciphertext per row block
};

struct GridRouted {
    int owner_block = 0;
    int block_a = 0, block_b = 0;
    double noise_b = 0;
    ExprPtr expr;
    std::vector<EncryptedVector> cts;
};

namespace detail {

struct CrossInstance {
    BinOp op = BinOp::Add;
    bool swap = false;  // reversed operand order, subtraction's second form
};

inline std::vector<CrossInstance> cross_instances(const std::vector<BinOp>& funcs) {
    std::vector<CrossInstance> out;
    std::vector<BinOp> seen;
    for (BinOp f : funcs) {
        if (std::find(seen.begin(), seen.end(), f) != seen.end()) continue;
        seen.push_back(f);
        switch (f) {
            case BinOp::Add: out.push_back({BinOp::Add, false}); break;
            case BinOp::Mul: out.push_back({BinOp::Mul, false}); break;
            case BinOp::Sub:
                out.push_back({BinOp::Sub, false});
                out.push_back({BinOp::Sub, true});
                break;
            case BinOp::Div:
                throw ParamError("cross-client combination supports add, sub and mul only");
        }
    }
    return out;
}

inline EncryptedVector combine_pair(const HEContext& ctx, const PublicKey& pk,
                                    const RelinKey& rlk, const CrossInstance& inst,
                                    const EncryptedVector& a, const EncryptedVector& b,
                                    double noise_b, RngStream& rng) {
    if (a.depth != 0 || b.depth != 0)
        throw DepthExceeded("cross combination needs fresh depth-0 ciphertexts");
    const EncryptedVector& lhs = inst.swap ? b : a;
    const EncryptedVector& rhs = inst.swap ? a : b;
    EncryptedVector out;
    switch (inst.op) {
        case BinOp::Add: out = ctx.he_add(lhs, rhs); break;
        case BinOp::Sub: out = ctx.he_sub(lhs, rhs); break;
        case BinOp::Mul: out = ctx.he_mul(lhs, rhs, rlk); break;
        case BinOp::Div: throw ParamError("division is not expressible under encryption");
    }
    if (noise_b > 0) {
        std::vector<double> lap = sample_laplace(noise_b, out.length, rng);
        out = ctx.he_add(out, ctx.encrypt_noise(pk, lap, out.scale, rng));
    }
    return out;
}

// Pairing and routing decisions are global: one owner draw per combination,
// applied to every row block, so each engineered column is defined for every
// training sample. Noise is drawn per row block after the owner draw.
inline std::vector<GridRouted> cross_combine_blocks(
    const HEContext& ctx, const PublicKey& pk, const RelinKey& rlk,
    const std::vector<GridEncrypted>& feats, const std::vector<BinOp>& funcs, double b,
    RngStream& rng, SimNetwork& net, std::size_t col_blocks, int round = 0) {
    if (b < 0) throw ParamError("laplace scale must be >= 0");
    std::vector<CrossInstance> instances = cross_instances(funcs);
    std::vector<GridRouted> out;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        for (std::size_t j = i + 1; j < feats.size(); ++j) {
            if (feats[i].block == feats[j].block) continue;  // local pairs are made locally
            for (const CrossInstance& inst : instances) {
                const ExprPtr& le = inst.swap ? feats[j].expr : feats[i].expr;
                const ExprPtr& re = inst.swap ? feats[i].expr : feats[j].expr;
                ExprPtr expr;
                try {
                    expr = canonicalize(exprs::binary(inst.op, le, re));
                } catch (const LimitError&) {
                    continue;  // too deep to describe; leave this combination unmade
                }
                GridRouted routed;
                routed.owner_block = rng.below(2) == 0 ? feats[i].block : feats[j].block;
                routed.block_a = feats[i].block;
                routed.block_b = feats[j].block;
                routed.noise_b = b;
                routed.expr = std::move(expr);
                for (std::size_t r = 0; r < feats[i].cts.size(); ++r) {
                    EncryptedVector ct = combine_pair(ctx, pk, rlk, inst, feats[i].cts[r],
                                                      feats[j].cts[r], b, rng);
                    net.to_client(round, MsgKind::Ciphertext, ct.scalar_count(),
                                  int(r * col_blocks) + routed.owner_block);
                    routed.cts.push_back(std::move(ct));
                }
                out.push_back(std::move(routed));
            }
        }
    }
    return out;
}

}  // namespace detail

// Cross-client combination under encryption: every cross pair of offered
// features, every allowed function instance (subtraction in both orders),
// Laplace noise injected at the matching ciphertext scale, and the result
// routed to one of the two contributing owners chosen uniformly. Same-client
// pairs are skipped since those combinations are cheaper made locally.
// b == 0 disables the noise; only tests use that.
inline std::vector<RoutedCipher> create_and_send_nonlocal_combinations(
    const HEContext& ctx, const PublicKey& pk, const RelinKey& rlk,
    const std::vector<std::vector<EncryptedFeature>>& per_client,
    const std::vector<BinOp>& funcs, double b, RngStream& rng, SimNetwork& net) {
    std::vector<GridEncrypted> flat;
    for (const auto& list : per_client)
        for (const auto& f : list) flat.push_back({f.owner, f.expr, {f.ct}});
    std::vector<GridRouted> routed = detail::cross_combine_blocks(
        ctx, pk, rlk, flat, funcs, b, rng, net, std::size_t(net.clients()));
    std::vector<RoutedCipher> out;
    for (auto& g : routed)
        out.push_back({g.owner_block, g.block_a, g.block_b, g.noise_b, std::move(g.expr),
                       std::move(g.cts.front())});
    return out;
}

// ---- shared pipeline helpers ----

namespace detail {

inline std::size_t string_words(const std::string& s) { return (s.size() + 7) / 8; }
inline std::size_t mask_words(std::size_t dim) { return (dim + 63) / 64; }

// wraps an expression in its own standardization so the server can evaluate
// the z-space column that was actually encrypted
inline ExprPtr standardized_expr(const ExprPtr& e, const FeatureStat& st) {
    return canonicalize(exprs::binary(
        BinOp::Div, exprs::binary(BinOp::Sub, e, exprs::literal(st.mean)),
        exprs::literal(st.stddev)));
}

// standardized server-side view of a feature list over a held-out table
inline Cols server_matrix(const std::vector<ExprPtr>& exprs_, const Dataset& table,
                          const std::vector<FeatureStat>& stats) {
    Cols out(exprs_.size());
    for (std::size_t j = 0; j < exprs_.size(); ++j)
        out[j] = standardize_column(evaluate(exprs_[j], table.X), stats[j]);
    return out;
}

// ---- horizontal pipeline ----

// One code path serves both the federated run and its centralized twin; the
// twin folds all rows into one table, trains with a matched step budget and
// sends nothing, which pins down what federation itself costs.
inline RunReport horizontal_run(const FlafeConfig& config, const FedDataset& fed,
                                bool centralized) {
    config.validate();
    if (!centralized && fed.setting != Setting::Horizontal)
        throw PartitionError("this run needs a horizontal partition");

    std::vector<ClientShard> folded;
    const std::vector<ClientShard>* shards = &fed.shards;
    if (centralized) {
        std::vector<std::size_t> rows(fed.train.rows());
        std::iota(rows.begin(), rows.end(), std::size_t(0));
        std::vector<int> cols(fed.train.features());
        std::iota(cols.begin(), cols.end(), 0);
        folded.push_back(make_shard(fed.train, 0, std::move(rows), std::move(cols)));
        shards = &folded;
    }
    const std::size_t q = shards->size();
    if (q == 0) throw PartitionError("no client shards");

    SimNetwork net{int(q)};
    RunReport report;
    report.setting = Setting::Horizontal;
    report.seed = config.seed;

    std::vector<ExprPtr> raw_exprs;
    for (std::size_t j = 0; j < fed.train.features(); ++j)
        raw_exprs.push_back(exprs::column(int(j)));

    std::vector<ExprPtr> accumulated;  // engineered survivors across iterations
    std::vector<FeatureProvenance> acc_prov;
    bool any_candidates = false;

    // standardization state shared between selection and the final retrain
    std::vector<ExprPtr> live_exprs;
    std::vector<FeatureStat> live_stats;
    std::map<std::string, std::size_t> live_index;
    std::vector<Cols> client_Z(q);
    double y_mean = 0;
    bool have_stats = false;

    auto standardize_round = [&](const std::vector<ExprPtr>& exprs_, int round) {
        live_exprs = exprs_;
        const std::size_t d = live_exprs.size();
        std::vector<Cols> raw_cols(q);
        std::vector<std::vector<SuffStats>> parts(q);
        for (std::size_t k = 0; k < q; ++k) {
            raw_cols[k].assign(d, std::vector<double>());
            for (std::size_t j = 0; j < d; ++j) {
                raw_cols[k][j] = evaluate_on_shard(live_exprs[j], (*shards)[k]);
                parts[k].push_back(column_stats(raw_cols[k][j]));
            }
            parts[k].push_back(column_stats((*shards)[k].y));
            if (!centralized)
                net.to_server(round, MsgKind::SufficientStats, 3 * (d + 1), int(k));
        }
        std::vector<FeatureStat> pooled = federated_standardization_stats(parts);
        y_mean = pooled.back().mean;
        pooled.pop_back();
        live_stats = std::move(pooled);
        if (!centralized)
            for (std::size_t k = 0; k < q; ++k)
                net.to_client(round, MsgKind::StatsBroadcast, 2 * (d + 1), int(k));
        for (std::size_t k = 0; k < q; ++k) {
            client_Z[k].assign(d, std::vector<double>());
            for (std::size_t j = 0; j < d; ++j)
                client_Z[k][j] = standardize_column(raw_cols[k][j], live_stats[j]);
        }
        live_index.clear();
        for (std::size_t j = 0; j < d; ++j) live_index[print_expr(live_exprs[j])] = j;
        have_stats = true;
    };

    for (int iter = 1; iter <= config.outer_iters; ++iter) {
        std::uint64_t iter_seed = derive_seed(config.seed, "outer", std::uint64_t(iter));
        IterationOutcome outcome;
        outcome.iteration = iter;

        // local feature engineering, seeded with earlier survivors; the
        // server unions the returned strings in first-seen order
        std::set<std::string> seen;
        for (const auto& e : raw_exprs) seen.insert(print_expr(e));
        for (const auto& e : accumulated) seen.insert(print_expr(e));
        std::vector<ExprPtr> fresh;
        std::vector<std::string> fresh_names;
        std::vector<int> fresh_origin;
        for (std::size_t k = 0; k < q; ++k) {
            RngStream rng(derive_seed(iter_seed, "autofe", std::uint64_t(k)));
            std::vector<ExprPtr> made = run_local_autofe((*shards)[k], config.autofe, rng,
                                                         accumulated.empty() ? nullptr
                                                                             : &accumulated);
            std::size_t words = 0;
            for (auto& e : made) {
                std::string s = print_expr(e);
                words += string_words(s);
                if (seen.insert(s).second) {
                    fresh.push_back(std::move(e));
                    fresh_names.push_back(std::move(s));
                    fresh_origin.push_back(int(k));
                }
            }
            if (!centralized) net.to_server(iter, MsgKind::FeatureStrings, words, int(k));
        }
        outcome.pool_size = fresh.size();
        outcome.fresh_local = fresh.size();

        if (fresh.empty()) {
            report.iterations.push_back(outcome);
            continue;
        }
        any_candidates = true;

        if (!centralized) {
            std::size_t words = 0;
            for (const auto& s : fresh_names) words += string_words(s);
            for (std::size_t k = 0; k < q; ++k)
                net.to_client(iter, MsgKind::UnionBroadcast, words, int(k));
        }

        // one standardization round covers raw, accumulated and fresh columns
        std::vector<ExprPtr> live = raw_exprs;
        live.insert(live.end(), accumulated.begin(), accumulated.end());
        live.insert(live.end(), fresh.begin(), fresh.end());
        standardize_round(live, iter);

        Cols val_Z = server_matrix(live_exprs, fed.val, live_stats);
        const std::size_t base = raw_exprs.size() + accumulated.size();
        auto assemble = [&](const std::vector<std::uint8_t>& mask, const Cols& source) {
            Cols X;
            for (std::size_t j = 0; j < base; ++j) X.push_back(source[j]);
            for (std::size_t m = 0; m < mask.size(); ++m)
                if (mask[m]) X.push_back(source[base + m]);
            return X;
        };

        MaskTrainer trainer = [&](const MaskCandidate& cand, int rounds, CommLedger& ledger) {
            TrainHyper h = config.train;
            h.rounds = rounds;
            LinearModel m;
            if (centralized) {
                h.max_iters = h.local_steps * rounds;  // matched step budget
                h.tol = 0;
                Cols X = assemble(cand.mask, client_Z[0]);
                m = train_centralized(X, (*shards)[0].y, h);
            } else {
                for (std::size_t k = 0; k < q; ++k)
                    net.to_client(iter, MsgKind::MaskBroadcast, mask_words(cand.mask.size()),
                                  int(k));
                std::vector<Cols> Xs(q);
                std::vector<HorizontalClientData> clients;
                for (std::size_t k = 0; k < q; ++k) {
                    Xs[k] = assemble(cand.mask, client_Z[k]);
                    clients.push_back({&Xs[k], &(*shards)[k].y});
                }
                m = train_horizontal_fedavg(clients, y_mean, h, ledger);
            }
            ++report.trainings;
            report.train_rounds += std::size_t(rounds);
            Cols val_X = assemble(cand.mask, val_Z);
            return score_r2(predict(val_X, m.weights, m.intercept), fed.val.y);
        };

        std::vector<std::uint8_t> best_mask;
        if (config.use_mask) {
            RngStream sel_rng(derive_seed(iter_seed, "selection"));
            SelectionResult sel = select_best_mask(fresh.size(), config.selection, trainer,
                                                   net.ledger(), sel_rng);
            best_mask = sel.best.mask;
            outcome.best_score = sel.best_score;
            outcome.best_sparsity = sel.best.sparsity;
            outcome.best_fill = double(sel.best.popcount()) / double(best_mask.size());
            report.leaderboard.insert(report.leaderboard.end(), sel.leaderboard.begin(),
                                      sel.leaderboard.end());
        } else {
            best_mask.assign(fresh.size(), 1);
            outcome.best_sparsity = 1.0;
            outcome.best_fill = 1.0;
        }

        if (!centralized)
            for (std::size_t k = 0; k < q; ++k)
                net.to_client(iter, MsgKind::MaskBroadcast, mask_words(best_mask.size()),
                              int(k));

        std::vector<int> everyone(q);
        std::iota(everyone.begin(), everyone.end(), 0);
        for (std::size_t m = 0; m < best_mask.size(); ++m) {
            if (!best_mask[m]) continue;
            accumulated.push_back(fresh[m]);
            FeatureProvenance prov;
            prov.feature = fresh_names[m];
            prov.origin_a = fresh_origin[m];
            prov.owners = everyone;
            prov.outer_iter = iter;
            acc_prov.push_back(std::move(prov));
            ++outcome.survivors;
        }
        report.iterations.push_back(outcome);
    }

    // final model over raw plus surviving features at the deepest budget
    std::vector<ExprPtr> final_exprs = raw_exprs;
    final_exprs.insert(final_exprs.end(), accumulated.begin(), accumulated.end());
    if (!have_stats) standardize_round(final_exprs, 0);

    std::vector<std::size_t> fidx;
    std::vector<FeatureStat> fstats;
    std::vector<std::string> fnames;
    for (const auto& e : final_exprs) {
        std::string s = print_expr(e);
        fidx.push_back(live_index.at(s));
        fstats.push_back(live_stats[fidx.back()]);
        fnames.push_back(std::move(s));
    }
    const int final_rounds = config.selection.rounds_per_level.back();
    TrainHyper h = config.train;
    h.rounds = final_rounds;
    LinearModel m;
    if (centralized) {
        h.max_iters = h.local_steps * final_rounds;
        h.tol = 0;
        Cols X;
        for (std::size_t j : fidx) X.push_back(client_Z[0][j]);
        m = train_centralized(X, (*shards)[0].y, h);
    } else {
        std::vector<Cols> Xs(q);
        std::vector<HorizontalClientData> clients;
        for (std::size_t k = 0; k < q; ++k) {
            for (std::size_t j : fidx) Xs[k].push_back(client_Z[k][j]);
            clients.push_back({&Xs[k], &(*shards)[k].y});
        }
        m = train_horizontal_fedavg(clients, y_mean, h, net.ledger());
    }
    ++report.trainings;
    report.train_rounds += std::size_t(final_rounds);
    m.feature_names = fnames;

    Cols val_X = server_matrix(final_exprs, fed.val, fstats);
    Cols test_X = server_matrix(final_exprs, fed.test, fstats);
    report.val_r2 = score_r2(predict(val_X, m.weights, m.intercept), fed.val.y);
    report.test_r2 = score_r2(predict(test_X, m.weights, m.intercept), fed.test.y);
    report.model = std::move(m);
    for (const auto& p : acc_prov) report.f_final.push_back(p.feature);
    report.provenance = std::move(acc_prov);
    report.no_candidates = !any_candidates;
    report.ledger = net.ledger();
    return report;
}

}  // namespace detail

inline RunReport run_horizontal_flafe(const FlafeConfig& config, const FedDataset& fed) {
    if (config.setting != Setting::Horizontal)
        throw ConfigError("configuration is not set up for a horizontal run");
    return detail::horizontal_run(config, fed, false);
}

// The same pipeline with all rows pooled on one machine and zero messages;
// with one client the federated run must match this to float precision.
inline RunReport run_centralized_pipeline(const FlafeConfig& config, const FedDataset& fed) {
    return detail::horizontal_run(config, fed, true);
}

// ---- grid pipeline (vertical and hybrid) ----

namespace detail {

struct GridFeature {
    int block = 0;  // owning column block
    ExprPtr expr;
    FeatureProvenance prov;
    std::vector<std::vector<double>> segments;  // training values per row block
};

// The vertical run is the one-row-block instance of this; the hybrid run is
// the general grid. Per iteration: same-block combinations in the clear,
// importance ranking per block, encrypted cross-block combination with
// transit noise, decryption by the routed owner, then mask selection over
// everything engineered so far (survivors stay maskable in later rounds).
inline RunReport grid_run(const FlafeConfig& config, const FedDataset& fed) {
    config.validate();
    const std::size_t R = fed.row_blocks, C = fed.col_blocks;
    if (R < 1 || C < 1 || R * C != fed.shards.size())
        throw PartitionError("shard count does not match the federation grid");
    std::vector<const ClientShard*> cell(R * C, nullptr);
    for (const auto& s : fed.shards) {
        if (s.row_block < 0 || std::size_t(s.row_block) >= R || s.col_block < 0 ||
            std::size_t(s.col_block) >= C)
            throw PartitionError("shard block coordinates fall outside the grid");
        const ClientShard*& slot = cell[std::size_t(s.row_block) * C + std::size_t(s.col_block)];
        if (slot) throw PartitionError("two shards claim the same grid cell");
        slot = &s;
    }
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t r = 1; r < R; ++r)
            if (cell[r * C + c]->columns != cell[c]->columns)
                throw PartitionError("column sets must match across row blocks");
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 1; c < C; ++c)
            if (cell[r * C + c]->rows != cell[r * C]->rows)
                throw PartitionError("row sets must match across column blocks");

    SimNetwork net{int(R * C)};
    auto id_of = [&](std::size_t r, std::size_t c) { return int(r * C + c); };

    RunReport report;
    report.setting = config.setting;
    report.seed = config.seed;

    const HEContext ctx(config.he);
    RngStream key_rng(derive_seed(config.seed, "keys"));
    const KeyPair keys = ctx.keygen(key_rng);

    std::vector<std::vector<ExprPtr>> block_raw(C);
    std::vector<std::vector<std::string>> block_raw_names(C);
    for (std::size_t c = 0; c < C; ++c)
        for (int gid : cell[c]->columns) {
            block_raw[c].push_back(exprs::column(gid));
            block_raw_names[c].push_back(print_expr(block_raw[c].back()));
        }
    std::vector<const std::vector<double>*> y_rows(R);
    for (std::size_t r = 0; r < R; ++r) y_rows[r] = &cell[r * C]->y;

    std::vector<GridFeature> accumulated;
    bool any_candidates = false;

    std::map<std::string, FeatureStat> stat_of;  // latest standardization round
    double y_mean = 0;
    bool have_stats = false;

    auto stats_round = [&](const std::vector<GridFeature>& pool, int round) {
        std::map<std::string, std::vector<SuffStats>> parts;
        std::vector<SuffStats> y_parts;
        for (std::size_t r = 0; r < R; ++r) {
            y_parts.push_back(column_stats(*y_rows[r]));
            for (std::size_t c = 0; c < C; ++c) {
                const ClientShard& sh = *cell[r * C + c];
                std::size_t ncols = sh.X.size();
                for (std::size_t j = 0; j < sh.X.size(); ++j)
                    parts[block_raw_names[c][j]].push_back(column_stats(sh.X[j]));
                for (const auto& gf : pool)
                    if (gf.block == int(c)) {
                        parts[gf.prov.feature].push_back(column_stats(gf.segments[r]));
                        ++ncols;
                    }
                net.to_server(round, MsgKind::SufficientStats, 3 * (ncols + 1), id_of(r, c));
            }
        }
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t ncols = cell[r * C + c]->X.size();
                for (const auto& gf : pool)
                    if (gf.block == int(c)) ++ncols;
                net.to_client(round, MsgKind::StatsBroadcast, 2 * (ncols + 1), id_of(r, c));
            }
        stat_of.clear();
        for (auto& [name, vec] : parts) stat_of[name] = pool_stats(vec);
        y_mean = pool_stats(y_parts).mean;
        have_stats = true;
    };

    for (int iter = 1; iter <= config.outer_iters; ++iter) {
        std::uint64_t iter_seed = derive_seed(config.seed, "outer", std::uint64_t(iter));
        IterationOutcome outcome;
        outcome.iteration = iter;

        std::set<std::string> taken;
        for (std::size_t c = 0; c < C; ++c)
            for (const auto& s : block_raw_names[c]) taken.insert(s);
        for (const auto& gf : accumulated) taken.insert(gf.prov.feature);

        // same-block combinations in the clear; inputs are the block's raw
        // columns plus its accumulated survivors
        std::vector<std::vector<ExprPtr>> inputs(C);
        std::vector<std::vector<std::vector<const std::vector<double>*>>> in_cols(C);
        std::vector<std::vector<GridFeature>> fresh_local(C);
        for (std::size_t c = 0; c < C; ++c) {
            inputs[c] = block_raw[c];
            in_cols[c].resize(R);
            for (std::size_t r = 0; r < R; ++r)
                for (const auto& col : cell[r * C + c]->X) in_cols[c][r].push_back(&col);
            for (const auto& gf : accumulated)
                if (gf.block == int(c)) {
                    inputs[c].push_back(gf.expr);
                    for (std::size_t r = 0; r < R; ++r)
                        in_cols[c][r].push_back(&gf.segments[r]);
                }
            for (const auto& combo : enumerate_pair_combos(inputs[c], config.local_funcs)) {
                std::string name = print_expr(combo.expr);
                if (!taken.insert(name).second) continue;
                GridFeature gf;
                gf.block = int(c);
                gf.expr = combo.expr;
                gf.prov.feature = std::move(name);
                gf.prov.origin_a = int(c);
                gf.prov.outer_iter = iter;
                for (std::size_t r = 0; r < R; ++r) {
                    gf.prov.owners.push_back(id_of(r, c));
                    const std::vector<double>& ca = *in_cols[c][r][combo.a];
                    const std::vector<double>& cb = *in_cols[c][r][combo.b];
                    gf.segments.push_back(combo.a == combo.b ? apply_square(ca)
                                                             : apply_binop(combo.op, ca, cb));
                }
                fresh_local[c].push_back(std::move(gf));
            }
            outcome.fresh_local += fresh_local[c].size();
        }

        // importance ranking per block over raws, survivors and fresh locals,
        // then the top columns are standardized and encrypted for crossing
        std::vector<GridEncrypted> offered;
        if (C >= 2) {
            RngStream enc_rng(derive_seed(iter_seed, "encrypt"));
            for (std::size_t c = 0; c < C; ++c) {
                for (const auto& gf : fresh_local[c]) {
                    inputs[c].push_back(gf.expr);
                    for (std::size_t r = 0; r < R; ++r)
                        in_cols[c][r].push_back(&gf.segments[r]);
                }
                std::vector<std::size_t> top;
                std::vector<FeatureStat> fed_stats;
                if (R == 1) {
                    Cols X;
                    for (const auto* p : in_cols[c][0]) X.push_back(*p);
                    top = rank_important_features(X, *y_rows[0],
                                                  std::size_t(config.important_k), config.train);
                } else {
                    std::vector<Cols> Xr(R);
                    std::vector<RankShard> rshards;
                    for (std::size_t r = 0; r < R; ++r) {
                        for (const auto* p : in_cols[c][r]) Xr[r].push_back(*p);
                        rshards.push_back({id_of(r, c), &Xr[r], y_rows[r]});
                    }
                    FedRankResult rr = rank_important_features(
                        rshards, std::size_t(config.important_k), config.train, net, iter);
                    top = std::move(rr.top);
                    fed_stats = std::move(rr.stats);
                    ++report.trainings;
                    report.train_rounds += std::size_t(config.train.rounds);
                }
                for (std::size_t idx : top) {
                    FeatureStat st = (R == 1) ? pool_stats({column_stats(*in_cols[c][0][idx])})
                                              : fed_stats[idx];
                    if (st.degenerate) continue;
                    ExprPtr z;
                    try {
                        z = standardized_expr(inputs[c][idx], st);
                    } catch (const LimitError&) {
                        continue;  // too deep to annotate with its scaling
                    }
                    GridEncrypted ge;
                    ge.block = int(c);
                    ge.expr = z;
                    std::size_t zwords = string_words(print_expr(z));
                    for (std::size_t r = 0; r < R; ++r) {
                        std::vector<double> zc = standardize_column(*in_cols[c][r][idx], st);
                        EncryptedVector ct = ctx.encrypt(keys.pk, zc, ctx.scale_base(), enc_rng);
                        net.to_server(iter, MsgKind::Ciphertext, ct.scalar_count() + zwords,
                                      id_of(r, c));
                        ge.cts.push_back(std::move(ct));
                    }
                    offered.push_back(std::move(ge));
                }
            }
        }

        RngStream route_rng(derive_seed(iter_seed, "route"));
        std::vector<GridRouted> routed =
            cross_combine_blocks(ctx, keys.pk, keys.rlk, offered, config.cross_funcs,
                                 config.laplace_b, route_rng, net, C, iter);
        std::vector<GridFeature> crosses;
        for (auto& g : routed) {
            report.routed_ciphertexts += g.cts.size();
            std::string name = print_expr(g.expr);
            if (!taken.insert(name).second) continue;  // re-created a known feature
            GridFeature gf;
            gf.block = g.owner_block;
            gf.expr = std::move(g.expr);
            gf.prov.feature = std::move(name);
            gf.prov.origin_a = g.block_a;
            gf.prov.origin_b = g.block_b;
            gf.prov.noise_b = g.noise_b;
            gf.prov.outer_iter = iter;
            for (std::size_t r = 0; r < R; ++r) {
                gf.prov.owners.push_back(id_of(r, std::size_t(g.owner_block)));
                gf.segments.push_back(ctx.decrypt(keys.sk, g.cts[r]));
            }
            crosses.push_back(std::move(gf));
        }
        outcome.fresh_cross = crosses.size();

        // selection pool: survivors first, then fresh locals by block, then
        // fresh crosses; survivors stay maskable alongside the newcomers
        std::vector<GridFeature> pool;
        for (auto& gf : accumulated) pool.push_back(std::move(gf));
        accumulated.clear();
        for (std::size_t c = 0; c < C; ++c)
            for (auto& gf : fresh_local[c]) pool.push_back(std::move(gf));
        for (auto& gf : crosses) pool.push_back(std::move(gf));
        outcome.pool_size = pool.size();

        if (pool.empty()) {
            report.iterations.push_back(outcome);
            continue;
        }
        any_candidates = true;

        stats_round(pool, iter);

        std::vector<std::vector<Cols>> raw_Z(R, std::vector<Cols>(C));
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t j = 0; j < cell[r * C + c]->X.size(); ++j)
                    raw_Z[r][c].push_back(standardize_column(
                        cell[r * C + c]->X[j], stat_of.at(block_raw_names[c][j])));
        std::vector<Cols> pool_Z(pool.size());
        std::vector<std::vector<double>> val_pool(pool.size());
        for (std::size_t p = 0; p < pool.size(); ++p) {
            const FeatureStat& st = stat_of.at(pool[p].prov.feature);
            for (std::size_t r = 0; r < R; ++r)
                pool_Z[p].push_back(standardize_column(pool[p].segments[r], st));
            val_pool[p] = standardize_column(evaluate(pool[p].expr, fed.val.X), st);
        }
        std::vector<Cols> val_raw(C);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t j = 0; j < block_raw[c].size(); ++j)
                val_raw[c].push_back(standardize_column(evaluate(block_raw[c][j], fed.val.X),
                                                        stat_of.at(block_raw_names[c][j])));

        auto layout_of = [&](const std::vector<std::uint8_t>& mask) {
            std::vector<std::vector<std::size_t>> by_block(C);
            for (std::size_t p = 0; p < mask.size(); ++p)
                if (mask[p]) by_block[std::size_t(pool[p].block)].push_back(p);
            return by_block;
        };

        MaskTrainer trainer = [&](const MaskCandidate& cand, int rounds, CommLedger& ledger) {
            TrainHyper h = config.train;
            h.rounds = rounds;
            auto by_block = layout_of(cand.mask);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    net.to_client(iter, MsgKind::MaskBroadcast, mask_words(cand.mask.size()),
                                  id_of(r, c));
            std::vector<Cols> Xs(R * C);
            std::vector<HybridClientData> clients;
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    Cols& X = Xs[r * C + c];
                    for (const auto& col : raw_Z[r][c]) X.push_back(col);
                    for (std::size_t p : by_block[c]) X.push_back(pool_Z[p][r]);
                    clients.push_back({int(r), int(c), &X, y_rows[r]});
                }
            LinearModel m = train_hybrid(clients, h, ledger, y_mean);
            // the averaged model lives on the clients; the server needs the
            // blocks uploaded before it can score the held-out split
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    net.to_server(iter, MsgKind::WeightUpload, Xs[r * C + c].size(),
                                  id_of(r, c));
            ++report.trainings;
            report.train_rounds += std::size_t(rounds);
            Cols val_X;
            for (std::size_t c = 0; c < C; ++c) {
                for (const auto& col : val_raw[c]) val_X.push_back(col);
                for (std::size_t p : by_block[c]) val_X.push_back(val_pool[p]);
            }
            return score_r2(predict(val_X, m.weights, m.intercept), fed.val.y);
        };

        std::vector<std::uint8_t> best_mask;
        if (config.use_mask) {
            RngStream sel_rng(derive_seed(iter_seed, "selection"));
            SelectionResult sel = select_best_mask(pool.size(), config.selection, trainer,
                                                   net.ledger(), sel_rng);
            best_mask = sel.best.mask;
            outcome.best_score = sel.best_score;
            outcome.best_sparsity = sel.best.sparsity;
            outcome.best_fill = double(sel.best.popcount()) / double(best_mask.size());
            report.leaderboard.insert(report.leaderboard.end(), sel.leaderboard.begin(),
                                      sel.leaderboard.end());
        } else {
            best_mask.assign(pool.size(), 1);
            outcome.best_sparsity = 1.0;
            outcome.best_fill = 1.0;
        }

        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                net.to_client(iter, MsgKind::MaskBroadcast, mask_words(best_mask.size()),
                              id_of(r, c));

        for (std::size_t p = 0; p < best_mask.size(); ++p) {
            if (!best_mask[p]) continue;
            accumulated.push_back(std::move(pool[p]));
            ++outcome.survivors;
        }
        report.iterations.push_back(outcome);
    }

    // final model over every block's raws plus its surviving features
    if (!have_stats) stats_round(accumulated, 0);
    std::vector<std::vector<std::size_t>> acc_by_block(C);
    for (std::size_t p = 0; p < accumulated.size(); ++p)
        acc_by_block[std::size_t(accumulated[p].block)].push_back(p);

    const int final_rounds = config.selection.rounds_per_level.back();
    TrainHyper h = config.train;
    h.rounds = final_rounds;
    std::vector<Cols> Xs(R * C);
    std::vector<HybridClientData> clients;
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
            Cols& X = Xs[r * C + c];
            for (std::size_t j = 0; j < cell[r * C + c]->X.size(); ++j)
                X.push_back(standardize_column(cell[r * C + c]->X[j],
                                               stat_of.at(block_raw_names[c][j])));
            for (std::size_t p : acc_by_block[c])
                X.push_back(standardize_column(accumulated[p].segments[r],
                                               stat_of.at(accumulated[p].prov.feature)));
            clients.push_back({int(r), int(c), &X, y_rows[r]});
        }
    LinearModel m = train_hybrid(clients, h, net.ledger(), y_mean);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            net.to_server(0, MsgKind::WeightUpload, Xs[r * C + c].size(), id_of(r, c));
    ++report.trainings;
    report.train_rounds += std::size_t(final_rounds);

    std::vector<ExprPtr> final_exprs;
    std::vector<FeatureStat> fstats;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t j = 0; j < block_raw[c].size(); ++j) {
            final_exprs.push_back(block_raw[c][j]);
            fstats.push_back(stat_of.at(block_raw_names[c][j]));
            m.feature_names.push_back(block_raw_names[c][j]);
        }
        for (std::size_t p : acc_by_block[c]) {
            final_exprs.push_back(accumulated[p].expr);
            fstats.push_back(stat_of.at(accumulated[p].prov.feature));
            m.feature_names.push_back(accumulated[p].prov.feature);
        }
    }
    Cols val_X = server_matrix(final_exprs, fed.val, fstats);
    Cols test_X = server_matrix(final_exprs, fed.test, fstats);
    report.val_r2 = score_r2(predict(val_X, m.weights, m.intercept), fed.val.y);
    report.test_r2 = score_r2(predict(test_X, m.weights, m.intercept), fed.test.y);
    report.model = std::move(m);
    for (auto& gf : accumulated) {
        report.f_final.push_back(gf.prov.feature);
        report.provenance.push_back(std::move(gf.prov));
    }
    report.no_candidates = !any_candidates;
    report.ledger = net.ledger();
    return report;
}

}  // namespace detail

inline RunReport run_vertical_flafe(const FlafeConfig& config, const FedDataset& fed) {
    if (config.setting != Setting::Vertical)
        throw ConfigError("configuration is not set up for a vertical run");
    if (fed.setting != Setting::Vertical || fed.row_blocks != 1)
        throw PartitionError("this run needs a vertical partition");
    return detail::grid_run(config, fed);
}

inline RunReport run_hybrid_flafe(const FlafeConfig& config, const FedDataset& fed) {
    if (config.setting != Setting::Hybrid)
        throw ConfigError("configuration is not set up for a hybrid run");
    if (fed.setting != Setting::Hybrid)
        throw PartitionError("this run needs a hybrid grid partition");
    return detail::grid_run(config, fed);
}

// ---- no-engineering reference arm ----

// Horizontal gets a pooled centralized fit on the raw columns; the grid
// settings get a raw federated fit at the final training budget.
inline RunReport run_raw_baseline(const FlafeConfig& config, const FedDataset& fed) {
    config.validate();
    RunReport report;
    report.setting = fed.setting;
    report.seed = config.seed;
    const int final_rounds = config.selection.rounds_per_level.back();
    TrainHyper h = config.train;
    h.rounds = final_rounds;

    std::vector<ExprPtr> raw_exprs;
    for (std::size_t j = 0; j < fed.train.features(); ++j)
        raw_exprs.push_back(exprs::column(int(j)));

    LinearModel m;
    std::vector<FeatureStat> stats;
    if (fed.setting == Setting::Horizontal) {
        h.max_iters = h.local_steps * final_rounds;
        h.tol = 0;
        Cols Z(fed.train.features());
        for (std::size_t j = 0; j < fed.train.features(); ++j) {
            stats.push_back(pool_stats({column_stats(fed.train.X[j])}));
            Z[j] = standardize_column(fed.train.X[j], stats.back());
        }
        m = train_centralized(Z, fed.train.y, h);
        ++report.trainings;
        report.train_rounds += std::size_t(final_rounds);
        for (const auto& e : raw_exprs) m.feature_names.push_back(print_expr(e));
    } else {
        const std::size_t R = fed.row_blocks, C = fed.col_blocks;
        if (R * C != fed.shards.size())
            throw PartitionError("shard count does not match the federation grid");
        std::vector<const ClientShard*> cell(R * C, nullptr);
        for (const auto& s : fed.shards)
            cell[std::size_t(s.row_block) * C + std::size_t(s.col_block)] = &s;
        for (const auto* p : cell)
            if (!p) throw PartitionError("the federation grid has an empty cell");
        SimNetwork net{int(R * C)};

        // standardization round, then one federated fit at the final budget
        std::map<std::string, std::vector<SuffStats>> parts;
        std::vector<SuffStats> y_parts;
        for (std::size_t r = 0; r < R; ++r) {
            y_parts.push_back(column_stats(cell[r * C]->y));
            for (std::size_t c = 0; c < C; ++c) {
                const ClientShard& sh = *cell[r * C + c];
                for (std::size_t j = 0; j < sh.X.size(); ++j)
                    parts["X" + std::to_string(sh.columns[j])].push_back(column_stats(sh.X[j]));
                net.to_server(0, MsgKind::SufficientStats, 3 * (sh.X.size() + 1),
                              int(r * C + c));
            }
        }
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                net.to_client(0, MsgKind::StatsBroadcast, 2 * (cell[r * C + c]->X.size() + 1),
                              int(r * C + c));
        double y_mean = pool_stats(y_parts).mean;

        std::vector<Cols> Xs(R * C);
        std::vector<HybridClientData> clients;
        std::map<std::string, FeatureStat> stat_of;
        for (auto& [name, vec] : parts) stat_of[name] = pool_stats(vec);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const ClientShard& sh = *cell[r * C + c];
                for (std::size_t j = 0; j < sh.X.size(); ++j)
                    Xs[r * C + c].push_back(standardize_column(
                        sh.X[j], stat_of.at("X" + std::to_string(sh.columns[j]))));
                clients.push_back({int(r), int(c), &Xs[r * C + c], &cell[r * C]->y});
            }
        m = train_hybrid(clients, h, net.ledger(), y_mean);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                net.to_server(0, MsgKind::WeightUpload, Xs[r * C + c].size(), int(r * C + c));
        ++report.trainings;
        report.train_rounds += std::size_t(final_rounds);

        // weight order is per-block; rebuild the matching expression order
        raw_exprs.clear();
        for (std::size_t c = 0; c < C; ++c)
            for (int gid : cell[c]->columns) {
                raw_exprs.push_back(exprs::column(gid));
                m.feature_names.push_back(print_expr(raw_exprs.back()));
                stats.push_back(stat_of.at("X" + std::to_string(gid)));
            }
        report.ledger = net.ledger();
    }

    Cols val_X = detail::server_matrix(raw_exprs, fed.val, stats);
    Cols test_X = detail::server_matrix(raw_exprs, fed.test, stats);
    report.val_r2 = score_r2(predict(val_X, m.weights, m.intercept), fed.val.y);
    report.test_r2 = score_r2(predict(test_X, m.weights, m.intercept), fed.test.y);
    report.model = std::move(m);
    return report;
}

}  // namespace flafe
