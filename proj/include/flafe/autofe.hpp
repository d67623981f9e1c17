#pragma once

// Per-client automated feature engineering: enumerate candidate expressions
// from the local columns, drop invalid ones, keep the few that an
// L1-regularized fit finds useful. Runs entirely on one client's shard; the
// only thing that ever leaves are the surviving expression strings.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "data.hpp"
#include "expr.hpp"
#include "fedtrain.hpp"

namespace flafe {

struct AutoFEConfig {
    int steps = 2;            // engineering rounds
    int candidate_cap = 2000; // per-round cap before validity filtering
    int keep = 30;            // survivors per selection round
    double max_nan_fraction = 0.0;

    void validate() const {
        if (steps < 1) throw ParamError("autofe steps must be >= 1");
        if (candidate_cap < 1 || keep < 1) throw ParamError("autofe caps must be positive");
        if (max_nan_fraction < 0 || max_nan_fraction > 1)
            throw ParamError("max_nan_fraction must lie in [0, 1]");
    }
};

// default transform sets for the built-in engineering rounds
inline const std::vector<Func>& autofe_default_unary() {
    static const std::vector<Func> v = {Func::Log, Func::Sqrt, Func::Abs};
    return v;
}
inline const std::vector<BinOp>& autofe_default_binary() {
    static const std::vector<BinOp> v = {BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div};
    return v;
}

inline ColumnLookup shard_lookup(const ClientShard& shard) {
    return [&shard](int gid) { return shard.column_by_global_id(gid); };
}

inline std::vector<double> evaluate_on_shard(const ExprPtr& e, const ClientShard& shard) {
    return evaluate(e, shard_lookup(shard), shard.y.size());
}

// All unary applications plus all pairwise binary combinations of the input
// set (one per unordered pair for commutative operators, both orders for
// subtraction and division), canonicalized and deduplicated against the
// inputs. Above `cap` the list is thinned by a seeded uniform subsample.
inline std::vector<ExprPtr> generate_candidates(const std::vector<ExprPtr>& current,
                                                const std::vector<Func>& unary,
                                                const std::vector<BinOp>& binary,
                                                std::size_t cap, RngStream& rng) {
    if (current.empty()) throw ParamError("generate_candidates needs a non-empty expression set");
    std::set<std::string> seen;
    for (const auto& e : current) seen.insert(print_canonical(e));

    std::vector<ExprPtr> out;
    auto push = [&](ExprPtr raw) {
        ExprPtr c;
        try {
            c = canonicalize(raw);
        } catch (const LimitError&) {
            return;  // too deep; skip rather than fail the whole round
        }
        std::string key = print_expr(c);
        if (seen.insert(key).second) out.push_back(std::move(c));
    };

    for (Func f : unary)
        for (const auto& e : current) {
            try {
                push(exprs::call(f, e));
            } catch (const LimitError&) {
            }
        }
    for (BinOp op : binary) {
        bool ordered = (op == BinOp::Sub || op == BinOp::Div);
        for (std::size_t i = 0; i < current.size(); ++i)
            for (std::size_t j = i + 1; j < current.size(); ++j) {
                try {
                    push(exprs::binary(op, current[i], current[j]));
                    if (ordered) push(exprs::binary(op, current[j], current[i]));
                } catch (const LimitError&) {
                }
            }
    }

    if (out.size() > cap) {
        rng.shuffle(out);
        out.resize(cap);
    }
    return out;
}

// Keep candidates whose evaluation on the shard has a tolerable not-a-number
// fraction and non-degenerate spread.
inline std::vector<ExprPtr> filter_valid(const std::vector<ExprPtr>& candidates,
                                         const ClientShard& shard,
                                         double max_nan_fraction = 0.0) {
    std::vector<ExprPtr> kept;
    std::size_t n = shard.y.size();
    auto lookup = shard_lookup(shard);
    for (const auto& e : candidates) {
        std::vector<double> v;
        try {
            v = evaluate(e, lookup, n);
        } catch (const UnknownColumn&) {
            continue;
        }
        std::size_t bad = 0;
        for (double x : v) bad += std::isfinite(x) ? 0 : 1;
        if (double(bad) > max_nan_fraction * double(n) + 1e-12) continue;
        FeatureStat st = pool_stats({column_stats(v)});
        if (st.degenerate) continue;
        kept.push_back(e);
    }
    return kept;
}

// L1 path selection: standardize the candidates, pick the penalty by scoring
// a 5-point logarithmic grid on a held-out fifth of the rows, refit on all
// rows, then rank by |coefficient| with nonzero entries first and ties going
// to the lower index. Returns `keep` candidate indices in rank order.
inline std::vector<std::size_t> select_features_fast(const Cols& candidates,
                                                     const std::vector<double>& y,
                                                     std::size_t keep, RngStream& rng) {
    if (candidates.empty()) throw ParamError("select_features_fast needs candidates");
    if (keep == 0) throw ParamError("keep must be positive");
    std::size_t d = candidates.size();
    std::size_t n = y.size();

    if (keep >= d) {
        std::vector<std::size_t> all(d);
        std::iota(all.begin(), all.end(), std::size_t(0));
        return all;
    }

    Cols Z(d);
    for (std::size_t j = 0; j < d; ++j)
        Z[j] = standardize_column(candidates[j], pool_stats({column_stats(candidates[j])}));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    rng.shuffle(order);
    std::size_t n_val = std::max<std::size_t>(1, n / 5);
    std::size_t n_tr = n - n_val;

    Cols Ztr(d), Zval(d);
    std::vector<double> ytr(n_tr), yval(n_val);
    for (std::size_t j = 0; j < d; ++j) {
        Ztr[j].resize(n_tr);
        Zval[j].resize(n_val);
    }
    for (std::size_t i = 0; i < n_tr; ++i) {
        for (std::size_t j = 0; j < d; ++j) Ztr[j][i] = Z[j][order[i]];
        ytr[i] = y[order[i]];
    }
    for (std::size_t i = 0; i < n_val; ++i) {
        for (std::size_t j = 0; j < d; ++j) Zval[j][i] = Z[j][order[n_tr + i]];
        yval[i] = y[order[n_tr + i]];
    }

    double ytr_mean = mean_of(ytr);
    std::vector<double> ytr_c(n_tr);
    for (std::size_t i = 0; i < n_tr; ++i) ytr_c[i] = ytr[i] - ytr_mean;

    double lambda_max = 0;
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < n_tr; ++i) s += Ztr[j][i] * ytr_c[i];
        lambda_max = std::max(lambda_max, std::fabs(s) / double(n_tr));
    }
    if (lambda_max <= 0) lambda_max = 1.0;

    double best_lambda = lambda_max;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int g = 0; g < 5; ++g) {
        double lambda = lambda_max * std::pow(10.0, -0.75 * g);
        std::vector<double> w = lasso_coordinate_descent(Ztr, ytr_c, lambda, 200, 1e-8);
        double score;
        try {
            score = score_r2(predict(Zval, w, ytr_mean), yval);
        } catch (const DegenerateTarget&) {
            score = -std::numeric_limits<double>::infinity();
        }
        if (score > best_score) {
            best_score = score;
            best_lambda = lambda;
        }
    }

    double ybar = mean_of(y);
    std::vector<double> yc(n);
    for (std::size_t i = 0; i < n; ++i) yc[i] = y[i] - ybar;
    std::vector<double> w = lasso_coordinate_descent(Z, yc, best_lambda, 200, 1e-8);

    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        bool nza = w[a] != 0.0, nzb = w[b] != 0.0;
        if (nza != nzb) return nza;
        double fa = std::fabs(w[a]), fb = std::fabs(w[b]);
        if (fa != fb) return fa > fb;
        return a < b;
    });
    idx.resize(keep);
    return idx;
}

// The full per-client routine: `steps` rounds of generate -> filter ->
// select, feeding survivors plus the raw columns into the next round.
// `seeds` lets a caller add previously engineered expressions as extra
// inputs; they combine like raw columns but are never re-emitted. Returns
// only engineered expressions (raw single columns excluded), deduplicated,
// at most keep*steps of them.
inline std::vector<ExprPtr> run_local_autofe(const ClientShard& shard, const AutoFEConfig& config,
                                             RngStream& rng,
                                             const std::vector<ExprPtr>* seeds = nullptr) {
    config.validate();
    if (shard.y.size() < 2 * std::size_t(config.keep))
        throw InsufficientData("shard has fewer than 2*keep rows for local feature engineering");

    std::vector<ExprPtr> inputs;
    for (int gid : shard.columns) inputs.push_back(exprs::column(gid));

    std::vector<ExprPtr> engineered;
    std::set<std::string> engineered_keys;
    if (seeds) {
        for (const auto& e : *seeds) {
            inputs.push_back(e);
            engineered_keys.insert(print_canonical(e));
        }
    }

    for (int step = 0; step < config.steps; ++step) {
        std::vector<ExprPtr> current = inputs;
        current.insert(current.end(), engineered.begin(), engineered.end());
        std::vector<ExprPtr> cands =
            generate_candidates(current, autofe_default_unary(), autofe_default_binary(),
                                std::size_t(config.candidate_cap), rng);
        std::vector<ExprPtr> valid = filter_valid(cands, shard, config.max_nan_fraction);
        if (valid.empty()) continue;

        Cols matrix(valid.size());
        for (std::size_t j = 0; j < valid.size(); ++j)
            matrix[j] = evaluate_on_shard(valid[j], shard);

        std::size_t keep_n = std::min<std::size_t>(std::size_t(config.keep), valid.size());
        std::vector<std::size_t> sel = select_features_fast(matrix, shard.y, keep_n, rng);
        for (std::size_t s : sel) {
            const ExprPtr& e = valid[s];
            if (e->kind == ExprKind::Column) continue;  // only engineered features leave
            if (engineered_keys.insert(print_canonical(e)).second) engineered.push_back(e);
        }
    }
    return engineered;
}

}  // namespace flafe
