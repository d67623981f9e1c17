#pragma once

// Federated Lasso training for the three partition geometries, plus the
// message ledger every protocol step writes into. All trainers consume
// already-standardized feature columns (pooled stats, see data.hpp) and
// center the target internally with the global train mean, so the intercept
// is exactly that mean and never needs a penalty.
//
// Solver: proximal gradient (ISTA) with soft-thresholding. The base step
// size is constant (default 0.1 on standardized features) with an optional
// per-iteration backtracking halving that guarantees the objective never
// increases even when the design is badly conditioned. Backtracking is
// deterministic, so degenerate-equality checks (one client == centralized)
// hold bit-for-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "common.hpp"

namespace flafe {

using Cols = std::vector<std::vector<double>>;

// ---- communication ledger ----

enum class MsgKind {
    FeatureStrings,
    UnionBroadcast,
    WeightBroadcast,
    WeightUpload,
    PartialPrediction,
    AggregateBroadcast,
    SufficientStats,
    StatsBroadcast,
    Ciphertext,
    MaskBroadcast,
    ScoreReport,
    RawColumn,  // never legal; exists so tests can prove the whitelist bites
};

inline const char* msg_kind_name(MsgKind k) {
    switch (k) {
        case MsgKind::FeatureStrings: return "feature_strings";
        case MsgKind::UnionBroadcast: return "union_broadcast";
        case MsgKind::WeightBroadcast: return "weight_broadcast";
        case MsgKind::WeightUpload: return "weight_upload";
        case MsgKind::PartialPrediction: return "partial_prediction";
        case MsgKind::AggregateBroadcast: return "aggregate_broadcast";
        case MsgKind::SufficientStats: return "sufficient_stats";
        case MsgKind::StatsBroadcast: return "stats_broadcast";
        case MsgKind::Ciphertext: return "ciphertext";
        case MsgKind::MaskBroadcast: return "mask_broadcast";
        case MsgKind::ScoreReport: return "score_report";
        case MsgKind::RawColumn: return "raw_column";
    }
    return "?";
}

inline bool msg_kind_allowed(MsgKind k) { return k != MsgKind::RawColumn; }

inline constexpr int kServer = -1;

struct LedgerEvent {
    int round;  // 1-based round within a training call, 0 for protocol steps
    MsgKind kind;
    std::size_t scalars;  // payload size in 64-bit words
    int from;             // kServer or client id
    int to;
};

struct CommLedger {
    std::vector<LedgerEvent> events;

    void record(int round, MsgKind kind, std::size_t scalars, int from, int to) {
        if (!msg_kind_allowed(kind))
            throw ProtocolError("message kind '" + std::string(msg_kind_name(kind)) +
                                "' is not on the whitelist: raw data never leaves a client");
        events.push_back({round, kind, scalars, from, to});
    }
    std::size_t total_messages() const { return events.size(); }
    std::size_t total_scalars() const {
        std::size_t s = 0;
        for (const auto& e : events) s += e.scalars;
        return s;
    }
    std::size_t count(MsgKind k) const {
        std::size_t c = 0;
        for (const auto& e : events) c += (e.kind == k) ? 1 : 0;
        return c;
    }
};

// ---- shared numeric pieces ----

inline double soft_threshold(double v, double t) {
    if (v > t) return v - t;
    if (v < -t) return v + t;
    return 0.0;
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

inline std::vector<double> predict(const Cols& X, const std::vector<double>& w, double intercept) {
    std::size_t n = X.empty() ? 0 : X.front().size();
    std::vector<double> p(n, intercept);
    for (std::size_t j = 0; j < X.size(); ++j) {
        double wj = w[j];
        if (wj == 0.0) continue;
        const auto& col = X[j];
        for (std::size_t i = 0; i < n; ++i) p[i] += wj * col[i];
    }
    return p;
}

inline double score_r2(const std::vector<double>& pred, const std::vector<double>& y) {
    if (pred.size() != y.size() || y.empty())
        throw ParamError("score_r2: prediction/target length mismatch");
    double ybar = mean_of(y);
    double ss_res = 0, ss_tot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        ss_res += (y[i] - pred[i]) * (y[i] - pred[i]);
        ss_tot += (y[i] - ybar) * (y[i] - ybar);
    }
    if (ss_tot <= 0) throw DegenerateTarget("target is constant; R^2 undefined");
    return 1.0 - ss_res / ss_tot;
}

namespace detail {

// least-squares part of the objective against a residual offset:
//   g(w) = 1/(2N) * || offset + X w - r ||^2
// `offset` models the stale contribution of other parties (empty = zeros).
struct BlockProblem {
    const Cols* X;
    const std::vector<double>* target;   // centered y
    const std::vector<double>* offset;   // may be nullptr
    double scale_n;                      // the N in 1/(2N); >= rows

    std::size_t rows() const { return X->empty() ? target->size() : X->front().size(); }

    std::vector<double> residual(const std::vector<double>& w) const {
        std::size_t n = rows();
        std::vector<double> res(n);
        for (std::size_t i = 0; i < n; ++i)
            res[i] = (offset ? (*offset)[i] : 0.0) - (*target)[i];
        for (std::size_t j = 0; j < X->size(); ++j) {
            double wj = w[j];
            if (wj == 0.0) continue;
            const auto& col = (*X)[j];
            for (std::size_t i = 0; i < n; ++i) res[i] += wj * col[i];
        }
        return res;
    }

    double loss(const std::vector<double>& res) const {
        double s = 0;
        for (double v : res) s += v * v;
        return s / (2.0 * scale_n);
    }

    std::vector<double> gradient(const std::vector<double>& res) const {
        std::vector<double> g(X->size());
        for (std::size_t j = 0; j < X->size(); ++j) {
            const auto& col = (*X)[j];
            double s = 0;
            for (std::size_t i = 0; i < col.size(); ++i) s += col[i] * res[i];
            g[j] = s / scale_n;
        }
        return g;
    }
};

// One proximal step with optional backtracking. Mutates w; returns the new
// objective value. The backtracking condition is the standard majorization
//   g(w+) <= g(w) + <grad, w+ - w> + 1/(2*eta) ||w+ - w||^2
// which makes the full objective non-increasing.
inline double prox_step(const BlockProblem& prob, std::vector<double>& w, double lambda,
                        double base_step, bool backtracking) {
    std::vector<double> res = prob.residual(w);
    double g0 = prob.loss(res);
    std::vector<double> grad = prob.gradient(res);

    double eta = base_step;
    std::vector<double> cand(w.size());
    for (int attempt = 0;; ++attempt) {
        double quad = 0, lin = 0;
        for (std::size_t j = 0; j < w.size(); ++j) {
            cand[j] = soft_threshold(w[j] - eta * grad[j], eta * lambda);
            double d = cand[j] - w[j];
            lin += grad[j] * d;
            quad += d * d;
        }
        std::vector<double> res_new = prob.residual(cand);
        double g_new = prob.loss(res_new);
        if (!std::isfinite(g_new)) {
            if (!backtracking || attempt >= 60)
                throw NonFinite("training objective diverged (non-finite loss)");
            eta *= 0.5;
            continue;
        }
        if (!backtracking || g_new <= g0 + lin + quad / (2.0 * eta) + 1e-15) {
            w = cand;
            double l1 = 0;
            for (double v : w) l1 += std::fabs(v);
            return g_new + lambda * l1;
        }
        if (attempt >= 60) throw NonFinite("backtracking failed to find a descent step");
        eta *= 0.5;
    }
}

inline std::vector<double> center(const std::vector<double>& y, double mean) {
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] - mean;
    return out;
}

}  // namespace detail

// ---- hyperparameters ----

struct TrainHyper {
    double lambda = 0.01;     // L1 penalty
    double step_size = 0.1;   // base ISTA step on standardized features
    int local_steps = 5;      // E: client steps per federated round
    int rounds = 16;          // C: federated rounds
    int max_iters = 10000;    // centralized iteration cap
    double tol = 1e-8;        // relative objective change stopping rule; 0 disables
    bool backtracking = true;
};

struct LinearModel {
    std::vector<double> weights;
    double intercept = 0;
    std::vector<std::string> feature_names;
};

// ---- centralized Lasso (ISTA) ----

inline LinearModel train_centralized(const Cols& X, const std::vector<double>& y,
                                     const TrainHyper& hyper) {
    if (X.empty()) {
        LinearModel m;
        m.intercept = mean_of(y);
        return m;
    }
    double ybar = mean_of(y);
    std::vector<double> r = detail::center(y, ybar);
    detail::BlockProblem prob{&X, &r, nullptr, double(y.size())};

    std::vector<double> w(X.size(), 0.0);
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < hyper.max_iters; ++it) {
        double obj = detail::prox_step(prob, w, hyper.lambda, hyper.step_size, hyper.backtracking);
        if (!std::isfinite(obj)) throw NonFinite("training objective diverged");
        if (hyper.tol > 0 && std::isfinite(prev) &&
            std::fabs(prev - obj) <= hyper.tol * std::max(1.0, std::fabs(prev)))
            break;
        prev = obj;
    }
    LinearModel m;
    m.weights = std::move(w);
    m.intercept = ybar;
    return m;
}

// objective value used by monotonicity tests
inline double lasso_objective(const Cols& X, const std::vector<double>& y,
                              const std::vector<double>& w, double intercept, double lambda) {
    std::vector<double> p = predict(X, w, intercept);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - p[i]) * (y[i] - p[i]);
    double l1 = 0;
    for (double v : w) l1 += std::fabs(v);
    return s / (2.0 * double(y.size())) + lambda * l1;
}

// ---- coordinate descent Lasso ----
// Used by the local feature-selection paths (fast, warm-startable). Assumes
// standardized columns; returns weights for the centered target.

inline std::vector<double> lasso_coordinate_descent(const Cols& X, const std::vector<double>& yc,
                                                    double lambda, int max_sweeps = 100,
                                                    double tol = 1e-7) {
    std::size_t d = X.size();
    std::size_t n = yc.size();
    std::vector<double> w(d, 0.0);
    if (d == 0 || n == 0) return w;
    std::vector<double> z(d);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0;
        for (double v : X[j]) s += v * v;
        z[j] = s / double(n);
    }
    std::vector<double> resid = yc;  // y - Xw with w = 0
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double max_delta = 0;
        for (std::size_t j = 0; j < d; ++j) {
            if (z[j] < 1e-12) { w[j] = 0; continue; }
            const auto& col = X[j];
            double rho = 0;
            for (std::size_t i = 0; i < n; ++i) rho += col[i] * resid[i];
            rho = rho / double(n) + z[j] * w[j];
            double w_new = soft_threshold(rho, lambda) / z[j];
            double delta = w_new - w[j];
            if (delta != 0.0) {
                for (std::size_t i = 0; i < n; ++i) resid[i] -= delta * col[i];
                w[j] = w_new;
                max_delta = std::max(max_delta, std::fabs(delta));
            }
        }
        if (max_delta < tol) break;
    }
    return w;
}

// ---- horizontal FedAvg ----

struct HorizontalClientData {
    const Cols* X;                   // standardized full-width columns
    const std::vector<double>* y;    // raw targets for this shard
};

// One call = C rounds of broadcast -> E local proximal steps -> upload ->
// sample-weighted average. Exactly 2*Q ledger messages per round.
inline LinearModel train_horizontal_fedavg(const std::vector<HorizontalClientData>& clients,
                                           double y_mean, const TrainHyper& hyper,
                                           CommLedger& ledger) {
    if (clients.empty()) throw ParamError("no clients");
    std::size_t d = clients.front().X->size();
    std::vector<std::vector<double>> centered;
    std::vector<detail::BlockProblem> problems;
    std::vector<double> weights_n;
    centered.reserve(clients.size());
    for (const auto& c : clients) {
        if (c.X->size() != d) throw ParamError("clients disagree on feature count");
        centered.push_back(detail::center(*c.y, y_mean));
        weights_n.push_back(double(c.y->size()));
    }
    for (std::size_t k = 0; k < clients.size(); ++k)
        problems.push_back({clients[k].X, &centered[k], nullptr, weights_n[k]});
    double n_total = 0;
    for (double v : weights_n) n_total += v;

    std::vector<double> w(d, 0.0);
    for (int round = 1; round <= hyper.rounds; ++round) {
        for (std::size_t k = 0; k < clients.size(); ++k)
            ledger.record(round, MsgKind::WeightBroadcast, d, kServer, int(k));
        std::vector<double> avg(d, 0.0);
        for (std::size_t k = 0; k < clients.size(); ++k) {
            std::vector<double> wk = w;
            for (int e = 0; e < hyper.local_steps; ++e)
                detail::prox_step(problems[k], wk, hyper.lambda, hyper.step_size,
                                  hyper.backtracking);
            ledger.record(round, MsgKind::WeightUpload, d, int(k), kServer);
            double share = weights_n[k] / n_total;
            for (std::size_t j = 0; j < d; ++j) avg[j] += share * wk[j];
        }
        w = std::move(avg);
    }
    LinearModel m;
    m.weights = std::move(w);
    m.intercept = y_mean;
    return m;
}

// ---- vertical trainer ----

struct VerticalBlockData {
    const Cols* X;  // this client's standardized train columns (all rows)
};

struct VerticalObserver {
    // called once per round with the server-side aggregate prediction and the
    // concatenated weight vector at upload time
    std::function<void(int round, const std::vector<double>& aggregate,
                       const std::vector<double>& weights)> fn;
};

// Clients keep their own weight block. Per round: upload partial prediction,
// receive the aggregate, take E proximal steps against the stale foreign
// part. 2*Q messages per round. Returns weights concatenated in block order.
inline LinearModel train_vertical(const std::vector<VerticalBlockData>& blocks,
                                  const std::vector<double>& y, double y_mean,
                                  const TrainHyper& hyper, CommLedger& ledger,
                                  const VerticalObserver* observer = nullptr) {
    if (blocks.empty()) throw ParamError("no clients");
    std::size_t n = y.size();
    std::vector<double> yc = detail::center(y, y_mean);
    std::size_t q = blocks.size();

    std::vector<std::vector<double>> w(q);
    std::vector<std::vector<double>> offsets(q);
    for (std::size_t k = 0; k < q; ++k) w[k].assign(blocks[k].X->size(), 0.0);

    auto partial = [&](std::size_t k) {
        std::vector<double> p(n, 0.0);
        const Cols& X = *blocks[k].X;
        for (std::size_t j = 0; j < X.size(); ++j) {
            double wj = w[k][j];
            if (wj == 0.0) continue;
            for (std::size_t i = 0; i < n; ++i) p[i] += wj * X[j][i];
        }
        return p;
    };

    for (int round = 1; round <= hyper.rounds; ++round) {
        std::vector<std::vector<double>> partials(q);
        std::vector<double> aggregate(n, 0.0);
        for (std::size_t k = 0; k < q; ++k) {
            partials[k] = partial(k);
            ledger.record(round, MsgKind::PartialPrediction, n, int(k), kServer);
            for (std::size_t i = 0; i < n; ++i) aggregate[i] += partials[k][i];
        }
        if (observer && observer->fn) {
            std::vector<double> wcat;
            for (const auto& wk : w) wcat.insert(wcat.end(), wk.begin(), wk.end());
            observer->fn(round, aggregate, wcat);
        }
        for (std::size_t k = 0; k < q; ++k) {
            ledger.record(round, MsgKind::AggregateBroadcast, n, kServer, int(k));
            offsets[k].resize(n);
            for (std::size_t i = 0; i < n; ++i) offsets[k][i] = aggregate[i] - partials[k][i];
            detail::BlockProblem prob{blocks[k].X, &yc, &offsets[k], double(n)};
            for (int e = 0; e < hyper.local_steps; ++e)
                detail::prox_step(prob, w[k], hyper.lambda, hyper.step_size, hyper.backtracking);
        }
    }

    LinearModel m;
    for (const auto& wk : w) m.weights.insert(m.weights.end(), wk.begin(), wk.end());
    m.intercept = y_mean;
    return m;
}

// ---- hybrid trainer ----

struct HybridClientData {
    int row_block = 0;
    int col_block = 0;
    const Cols* X;                  // standardized columns for (row block, col block)
    const std::vector<double>* y;   // raw targets for the row block
};

// Grid scheme: every client holds a copy of its column block's weights.
// Per round, clients upload (partial prediction, weight copy); the server
// averages weights per column block across row blocks (sample weighted,
// FedAvg style) and returns (foreign aggregate, averaged weights); clients
// adopt the average and take E local proximal steps. Degenerate cases drop
// the redundant payload half: with one row block this is exactly the
// vertical trainer, with one column block exactly horizontal FedAvg.
inline LinearModel train_hybrid(const std::vector<HybridClientData>& clients,
                                const TrainHyper& hyper, CommLedger& ledger,
                                double y_mean) {
    if (clients.empty()) throw ParamError("no clients");
    std::size_t R = 0, C = 0;
    for (const auto& c : clients) {
        R = std::max(R, std::size_t(c.row_block) + 1);
        C = std::max(C, std::size_t(c.col_block) + 1);
    }
    if (R * C != clients.size())
        throw PartitionError("hybrid trainer needs a full R x C client grid");

    auto at = [&](std::size_t r, std::size_t c) -> const HybridClientData& {
        for (const auto& cl : clients)
            if (std::size_t(cl.row_block) == r && std::size_t(cl.col_block) == c) return cl;
        throw PartitionError("missing hybrid grid cell");
    };

    // column-block widths must agree across row blocks
    std::vector<std::size_t> width(C);
    std::vector<double> rows_per_block(R);
    for (std::size_t c = 0; c < C; ++c) {
        width[c] = at(0, c).X->size();
        for (std::size_t r = 1; r < R; ++r)
            if (at(r, c).X->size() != width[c])
                throw PartitionError("column block width differs across row blocks");
    }
    double n_total = 0;
    std::vector<std::vector<double>> yc(R);
    for (std::size_t r = 0; r < R; ++r) {
        rows_per_block[r] = double(at(r, 0).y->size());
        yc[r] = detail::center(*at(r, 0).y, y_mean);
        n_total += rows_per_block[r];
    }

    // w[r][c]: client copies; averaging happens on the server each round
    std::vector<std::vector<std::vector<double>>> w(R);
    for (std::size_t r = 0; r < R; ++r) {
        w[r].resize(C);
        for (std::size_t c = 0; c < C; ++c) w[r][c].assign(width[c], 0.0);
    }

    auto partial = [&](std::size_t r, std::size_t c) {
        const Cols& X = *at(r, c).X;
        std::size_t n = at(r, 0).y->size();
        std::vector<double> p(n, 0.0);
        for (std::size_t j = 0; j < X.size(); ++j) {
            double wj = w[r][c][j];
            if (wj == 0.0) continue;
            for (std::size_t i = 0; i < n; ++i) p[i] += wj * X[j][i];
        }
        return p;
    };

    const bool send_partials = C > 1;
    const bool send_weights = R > 1;
    auto client_idx = [&](std::size_t r, std::size_t c) { return int(r * C + c); };

    for (int round = 1; round <= hyper.rounds; ++round) {
        // uploads: (partial prediction, current weights)
        std::vector<std::vector<std::vector<double>>> parts(R, std::vector<std::vector<double>>(C));
        for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t c = 0; c < C; ++c) {
                parts[r][c] = partial(r, c);
                std::size_t payload = (send_partials ? parts[r][c].size() : 0) +
                                      (send_weights ? width[c] : 0);
                ledger.record(round, MsgKind::PartialPrediction, payload, client_idx(r, c),
                              kServer);
            }
        }
        // server: average weights per column block, aggregate predictions per row block
        std::vector<std::vector<double>> wbar(C);
        for (std::size_t c = 0; c < C; ++c) {
            wbar[c].assign(width[c], 0.0);
            for (std::size_t r = 0; r < R; ++r) {
                double share = rows_per_block[r] / n_total;
                for (std::size_t j = 0; j < width[c]; ++j) wbar[c][j] += share * w[r][c][j];
            }
        }
        std::vector<std::vector<double>> agg(R);
        for (std::size_t r = 0; r < R; ++r) {
            agg[r].assign(yc[r].size(), 0.0);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < agg[r].size(); ++i) agg[r][i] += parts[r][c][i];
        }
        // downloads + local steps
        for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t payload = (send_partials ? agg[r].size() : 0) +
                                      (send_weights ? width[c] : 0);
                ledger.record(round, MsgKind::AggregateBroadcast, payload, kServer,
                              client_idx(r, c));
                auto& wk = w[r][c];
                if (send_weights) wk = wbar[c];
                std::vector<double> offset(yc[r].size());
                for (std::size_t i = 0; i < offset.size(); ++i)
                    offset[i] = agg[r][i] - parts[r][c][i];
                detail::BlockProblem prob{at(r, c).X, &yc[r], &offset, rows_per_block[r]};
                for (int e = 0; e < hyper.local_steps; ++e)
                    detail::prox_step(prob, wk, hyper.lambda, hyper.step_size, hyper.backtracking);
            }
        }
    }

    // measurement: assemble the final model from the client copies
    LinearModel m;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> wc(width[c], 0.0);
        for (std::size_t r = 0; r < R; ++r) {
            double share = rows_per_block[r] / n_total;
            for (std::size_t j = 0; j < wc.size(); ++j) wc[j] += share * w[r][c][j];
        }
        m.weights.insert(m.weights.end(), wc.begin(), wc.end());
    }
    m.intercept = y_mean;
    return m;
}

}  // namespace flafe
