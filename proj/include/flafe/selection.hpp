#pragma once

// Mask-based selection over the shared engineered-feature list: random
// Bernoulli masks drawn from a sparsity window, a successive-halving
// tournament that spends more communication rounds on fewer survivors, and
// the window-refinement loop that concentrates later draws around the
// sparsity of the best masks so far. Masks only ever cover engineered
// features; raw columns stay in every arm.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "fedtrain.hpp"

namespace flafe {

struct MaskCandidate {
    std::vector<std::uint8_t> mask;  // one byte per engineered feature
    double sparsity = 0.0;           // the Bernoulli probability it was drawn with
    double score = std::numeric_limits<double>::quiet_NaN();  // unset until trained

    std::size_t popcount() const {
        std::size_t c = 0;
        for (auto b : mask) c += b;
        return c;
    }
};

inline std::string mask_to_string(const std::vector<std::uint8_t>& mask) {
    std::string s(mask.size(), '0');
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) s[i] = '1';
    return s;
}

struct SparsityWindow {
    double s_a = 0.0;
    double s_b = 1.0;

    void validate() const {
        if (!(s_a <= s_b) || s_a < 0 || s_b > 1)
            throw RangeError("sparsity window must satisfy 0 <= s_a <= s_b <= 1");
    }
};

struct SelectionParams {
    int refine_iters = 1;               // I
    int halving_iters = 1;              // H
    int start_candidates = 16;          // N_h
    double gamma = 0.5;                 // survivor fraction per level
    std::vector<int> rounds_per_level = {16};  // C_{h,l}, non-decreasing
    int top_sparsity = 3;               // s entries feeding window refinement

    void validate() const {
        if (refine_iters < 1 || halving_iters < 1 || start_candidates < 1 || top_sparsity < 1)
            throw ParamError("selection counts must be positive");
        if (!(gamma > 0.0) || !(gamma < 1.0)) throw ParamError("gamma must lie in (0,1)");
        if (rounds_per_level.empty()) throw ParamError("at least one halving level is required");
        for (std::size_t l = 0; l < rounds_per_level.size(); ++l) {
            if (rounds_per_level[l] < 1) throw ParamError("rounds per level must be positive");
            if (l > 0 && rounds_per_level[l] < rounds_per_level[l - 1])
                throw ParamError("rounds per level must be non-decreasing");
        }
    }
};

struct LeaderboardEntry {
    std::vector<std::uint8_t> mask;
    double sparsity = 0.0;
    double score = 0.0;
    int level = 0;
    int halving_iter = 0;
    int refine_iter = 0;
};

// Trains the features that survive `mask` for `rounds` and returns the
// validation score. Implementations throw on failure; the tournament turns
// that into a -inf score and culls the candidate.
using MaskTrainer = std::function<double(const MaskCandidate& candidate, int rounds,
                                         CommLedger& ledger)>;

// ---- mask drawing ----

inline std::vector<MaskCandidate> draw_masks(std::size_t n, const SparsityWindow& window,
                                             std::size_t dim, RngStream& rng) {
    if (dim < 1) throw ParamError("mask dimension must be >= 1");
    window.validate();
    std::vector<MaskCandidate> out;
    out.reserve(n);
    for (std::size_t c = 0; c < n; ++c) {
        MaskCandidate cand;
        cand.sparsity = rng.uniform(window.s_a, window.s_b);
        cand.mask.assign(dim, 0);
        bool nonzero = false;
        for (int attempt = 0; attempt < 10 && !nonzero; ++attempt) {
            for (std::size_t i = 0; i < dim; ++i) {
                cand.mask[i] = rng.bernoulli(cand.sparsity) ? 1 : 0;
                nonzero = nonzero || cand.mask[i];
            }
        }
        if (!nonzero) cand.mask[rng.below(dim)] = 1;  // keep at least one feature alive
        out.push_back(std::move(cand));
    }
    return out;
}

// ---- successive halving ----

namespace detail {

inline constexpr double kFailedScore = -std::numeric_limits<double>::infinity();

// top max(1, floor(gamma*n)) indices by score, ties to the lower index
inline std::vector<std::size_t> cull_indices(const std::vector<double>& scores, double gamma) {
    std::size_t n = scores.size();
    std::size_t keep = std::max<std::size_t>(1, std::size_t(std::floor(gamma * double(n))));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());  // survivors keep their draw order
    return idx;
}

}  // namespace detail

// One tournament: draw N candidates, train each survivor population for the
// level's round budget, keep the top gamma fraction, repeat over all levels.
// Returns the final survivors carrying their last-level scores. `eval_log`,
// when given, receives one entry per training (including culled candidates).
inline std::vector<MaskCandidate> fed_successive_halving(
    std::size_t dim, const SelectionParams& params, const SparsityWindow& window,
    const MaskTrainer& trainer, CommLedger& ledger, RngStream& rng,
    std::vector<LeaderboardEntry>* eval_log = nullptr, int refine_iter = 1,
    int halving_iter = 1) {
    params.validate();
    std::vector<MaskCandidate> population =
        draw_masks(std::size_t(params.start_candidates), window, dim, rng);

    for (std::size_t level = 0; level < params.rounds_per_level.size(); ++level) {
        int rounds = params.rounds_per_level[level];
        std::vector<double> scores(population.size());
        for (std::size_t c = 0; c < population.size(); ++c) {
            double s;
            try {
                s = trainer(population[c], rounds, ledger);
            } catch (const Error&) {
                s = detail::kFailedScore;
            }
            if (!std::isfinite(s)) s = detail::kFailedScore;
            scores[c] = s;
            population[c].score = s;
            if (eval_log)
                eval_log->push_back({population[c].mask, population[c].sparsity, s,
                                     int(level) + 1, halving_iter, refine_iter});
        }
        std::vector<std::size_t> keep = detail::cull_indices(scores, params.gamma);
        std::vector<MaskCandidate> next;
        next.reserve(keep.size());
        for (std::size_t k : keep) next.push_back(std::move(population[k]));
        population = std::move(next);
    }
    return population;
}

// ---- window refinement ----

inline SparsityWindow refine_window(const std::vector<LeaderboardEntry>& leaderboard, int s) {
    if (leaderboard.empty()) throw ParamError("refine_window needs a non-empty leaderboard");
    if (s < 1) throw ParamError("top-sparsity count must be >= 1");

    std::vector<std::size_t> idx(leaderboard.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (leaderboard[a].score != leaderboard[b].score)
            return leaderboard[a].score > leaderboard[b].score;
        return leaderboard[a].sparsity < leaderboard[b].sparsity;
    });
    std::size_t take = std::min<std::size_t>(std::size_t(s), idx.size());

    double mu = 0;
    for (std::size_t i = 0; i < take; ++i) mu += leaderboard[idx[i]].sparsity;
    mu /= double(take);
    double var = 0;
    for (std::size_t i = 0; i < take; ++i) {
        double d = leaderboard[idx[i]].sparsity - mu;
        var += d * d;
    }
    double sigma = std::sqrt(var / double(take));  // population std

    SparsityWindow w;
    if (sigma < 0.025) {
        w.s_a = std::max(0.0, mu - 0.025);
        w.s_b = std::min(1.0, mu + 0.025);
    } else {
        w.s_a = std::max(0.0, mu - sigma);
        w.s_b = std::min(1.0, mu + sigma);
    }
    return w;
}

// ---- the refinement loop ----

struct SelectionResult {
    MaskCandidate best;
    double best_score = detail::kFailedScore;
    std::vector<LeaderboardEntry> leaderboard;  // finite-scoring survivors, all iterations
    std::vector<LeaderboardEntry> eval_log;     // every training, culled ones included
};

inline SelectionResult select_best_mask(std::size_t dim, const SelectionParams& params,
                                        const MaskTrainer& trainer, CommLedger& ledger,
                                        RngStream& rng) {
    params.validate();
    SelectionResult result;
    SparsityWindow window;  // starts at (0, 1)

    for (int i = 1; i <= params.refine_iters; ++i) {
        std::size_t board_begin = result.leaderboard.size();
        for (int h = 1; h <= params.halving_iters; ++h) {
            std::vector<MaskCandidate> survivors = fed_successive_halving(
                dim, params, window, trainer, ledger, rng, &result.eval_log, i, h);
            for (const auto& cand : survivors) {
                if (!std::isfinite(cand.score)) continue;  // failed runs never enter the board
                result.leaderboard.push_back({cand.mask, cand.sparsity, cand.score,
                                              int(params.rounds_per_level.size()), h, i});
                if (cand.score > result.best_score) {
                    result.best_score = cand.score;
                    result.best = cand;
                }
            }
        }
        if (i < params.refine_iters) {
            // refine from this iteration's survivors; if every candidate
            // failed, keep sampling the same window rather than aborting
            std::vector<LeaderboardEntry> this_iter(result.leaderboard.begin() + long(board_begin),
                                                    result.leaderboard.end());
            if (!this_iter.empty()) window = refine_window(this_iter, params.top_sparsity);
        }
    }
    if (!std::isfinite(result.best_score))
        throw ProtocolError("every mask training failed; no best mask exists");
    return result;
}

}  // namespace flafe
