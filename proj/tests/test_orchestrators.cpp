#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <flafe/orchestrators.hpp>

using namespace flafe;

namespace {

Dataset planted_order2(std::size_t n, std::uint64_t seed) {
    // five gaussian columns; y mixes a product, a sum and a difference
    Dataset ds;
    RngStream rng(derive_seed(seed, "planted-h"));
    ds.X.assign(5, std::vector<double>());
    for (auto& col : ds.X) {
        col.resize(n);
        for (auto& v : col) v = rng.normal();
    }
    ds.y.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        ds.y[i] = ds.X[0][i] * ds.X[1][i] + (ds.X[2][i] + ds.X[3][i]) +
                  (ds.X[0][i] - ds.X[4][i]) + 0.02 * rng.normal();
    for (int j = 0; j < 5; ++j) ds.feature_names.push_back(print_expr(exprs::column(j)));
    return ds;
}

Dataset planted_product(std::size_t n, std::size_t cols, std::uint64_t seed) {
    // y = x0*x1 + noise with positive-mean factors, so each factor carries a
    // marginal signal the importance ranking can latch onto while the raw
    // linear fit stays far from the full effect
    Dataset ds;
    RngStream rng(derive_seed(seed, "planted-x"));
    ds.X.assign(cols, std::vector<double>());
    for (auto& col : ds.X) {
        col.resize(n);
        for (auto& v : col) v = rng.normal(0.7, 1.0);
    }
    ds.y.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        ds.y[i] = ds.X[0][i] * ds.X[1][i] + 0.05 * rng.normal();
    for (std::size_t j = 0; j < cols; ++j)
        ds.feature_names.push_back(print_expr(exprs::column(int(j))));
    return ds;
}

FlafeConfig horizontal_config(std::uint64_t seed) {
    FlafeConfig cfg;
    cfg.setting = Setting::Horizontal;
    cfg.seed = seed;
    cfg.autofe.steps = 1;
    cfg.autofe.keep = 10;
    cfg.autofe.candidate_cap = 400;
    cfg.selection.start_candidates = 6;
    cfg.selection.gamma = 0.5;
    cfg.selection.rounds_per_level = {2, 4};
    cfg.train.local_steps = 3;
    return cfg;
}

FlafeConfig grid_config(Setting setting, std::uint64_t seed) {
    FlafeConfig cfg;
    cfg.setting = setting;
    cfg.seed = seed;
    cfg.important_k = 1;
    cfg.laplace_b = 0.02;
    cfg.selection.start_candidates = 8;
    cfg.selection.gamma = 0.5;
    cfg.selection.rounds_per_level = {3, 6};
    cfg.train.local_steps = 4;
    cfg.train.rounds = 8;
    return cfg;
}

std::set<std::string> to_set(const std::vector<std::string>& v) {
    return std::set<std::string>(v.begin(), v.end());
}

bool events_equal(const CommLedger& a, const CommLedger& b) {
    if (a.events.size() != b.events.size()) return false;
    for (std::size_t i = 0; i < a.events.size(); ++i) {
        const auto& x = a.events[i];
        const auto& y = b.events[i];
        if (x.round != y.round || x.kind != y.kind || x.scalars != y.scalars ||
            x.from != y.from || x.to != y.to)
            return false;
    }
    return true;
}

// trainings per tournament as the halving schedule dictates
std::size_t expected_trainings(const SelectionParams& p) {
    std::size_t total = 0;
    for (int h = 0; h < p.halving_iters; ++h) {
        std::size_t pop = std::size_t(p.start_candidates);
        for (std::size_t l = 0; l < p.rounds_per_level.size(); ++l) {
            total += pop;
            pop = std::max<std::size_t>(1, std::size_t(std::floor(p.gamma * double(pop))));
        }
    }
    return total * std::size_t(p.refine_iters);
}

std::size_t expected_rounds(const SelectionParams& p) {
    std::size_t total = 0;
    for (int h = 0; h < p.halving_iters; ++h) {
        std::size_t pop = std::size_t(p.start_candidates);
        for (std::size_t l = 0; l < p.rounds_per_level.size(); ++l) {
            total += pop * std::size_t(p.rounds_per_level[l]);
            pop = std::max<std::size_t>(1, std::size_t(std::floor(p.gamma * double(pop))));
        }
    }
    return total * std::size_t(p.refine_iters);
}

const std::set<MsgKind> kAllowedKinds = {
    MsgKind::FeatureStrings,   MsgKind::UnionBroadcast, MsgKind::WeightBroadcast,
    MsgKind::WeightUpload,     MsgKind::PartialPrediction, MsgKind::AggregateBroadcast,
    MsgKind::SufficientStats,  MsgKind::StatsBroadcast, MsgKind::Ciphertext,
    MsgKind::MaskBroadcast,    MsgKind::ScoreReport};

void require_private_transcript(const CommLedger& ledger) {
    for (const auto& e : ledger.events) {
        REQUIRE(kAllowedKinds.count(e.kind) == 1);
        REQUIRE(e.kind != MsgKind::RawColumn);
        // star topology: one endpoint is always the server
        REQUIRE((e.from == kServer || e.to == kServer));
    }
}

}  // namespace

TEST_CASE("the simulated network polices endpoints and payload kinds") {
    SimNetwork net{3};
    net.to_server(1, MsgKind::FeatureStrings, 4, 0);
    net.to_client(1, MsgKind::UnionBroadcast, 4, 2);
    REQUIRE(net.ledger().total_messages() == 2);
    REQUIRE(net.ledger().events[0].to == kServer);
    REQUIRE(net.ledger().events[1].from == kServer);

    REQUIRE_THROWS_AS(net.to_server(1, MsgKind::FeatureStrings, 1, 3), ProtocolError);
    REQUIRE_THROWS_AS(net.to_server(1, MsgKind::FeatureStrings, 1, -1), ProtocolError);
    REQUIRE_THROWS_AS(net.to_client(1, MsgKind::UnionBroadcast, 1, 7), ProtocolError);
    // raw columns never travel, regardless of endpoints
    REQUIRE_THROWS_AS(net.to_server(1, MsgKind::RawColumn, 100, 0), ProtocolError);
    REQUIRE(net.ledger().total_messages() == 2);

    REQUIRE_THROWS_AS(SimNetwork{0}, ParamError);
}

TEST_CASE("run configuration validation rejects out-of-range fields") {
    FlafeConfig cfg;
    cfg.validate();
    cfg.outer_iters = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg.outer_iters = 1;
    cfg.important_k = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg.important_k = 1;
    cfg.laplace_b = -0.1;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("pairwise combination enumeration follows the operator rules") {
    std::vector<ExprPtr> two = {exprs::column(0), exprs::column(1)};

    SECTION("add and mul yield sums, products and squares") {
        auto got = create_local_combinations(two, {BinOp::Add, BinOp::Mul});
        std::set<std::string> names;
        for (const auto& e : got) names.insert(print_expr(e));
        REQUIRE(names == std::set<std::string>{"X000+X001", "X000*X001", "X000**2", "X001**2"});
    }
    SECTION("a single feature has no additive pair") {
        REQUIRE(create_local_combinations({exprs::column(0)}, {BinOp::Add}).empty());
        auto sq = create_local_combinations({exprs::column(0)}, {BinOp::Mul});
        REQUIRE(sq.size() == 1);
        REQUIRE(print_expr(sq[0]) == "X000**2");
    }
    SECTION("subtraction keeps both orders, duplicates collapse") {
        auto subs = create_local_combinations(two, {BinOp::Sub, BinOp::Sub});
        std::set<std::string> names;
        for (const auto& e : subs) names.insert(print_expr(e));
        REQUIRE(names == std::set<std::string>{"X000-X001", "X001-X000"});
    }
    SECTION("numeric twins match expression evaluation bit for bit") {
        Cols cols = {{1.5, -2.0, 0.0, 4.25}, {0.5, 0.0, -3.0, 1e-13}};
        for (BinOp op : {BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div}) {
            for (const auto& combo : enumerate_pair_combos(two, {op})) {
                std::vector<double> direct = apply_combo(combo, cols);
                std::vector<double> via_expr = evaluate(combo.expr, cols);
                REQUIRE(direct.size() == via_expr.size());
                for (std::size_t i = 0; i < direct.size(); ++i) {
                    if (std::isnan(via_expr[i]))
                        REQUIRE(std::isnan(direct[i]));
                    else
                        REQUIRE(direct[i] == via_expr[i]);
                }
            }
        }
    }
    SECTION("combinations past the depth cap are skipped quietly") {
        ExprPtr deep = exprs::column(0);
        for (int i = 0; i < kMaxExprDepth - 1; ++i) deep = exprs::call(Func::Abs, deep);
        auto got = enumerate_pair_combos({deep, exprs::column(1)}, {BinOp::Add, BinOp::Mul});
        for (const auto& c : got) REQUIRE(print_expr(c.expr).find("abs") == std::string::npos);
    }
}

TEST_CASE("feature importance ranking prefers the strongest predictors") {
    RngStream rng(41);
    std::size_t n = 200;
    Cols X(3, std::vector<double>(n));
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        X[0][i] = rng.normal();
        X[1][i] = rng.normal();
        X[2][i] = rng.normal();
        y[i] = 5.0 * X[0][i] + 0.1 * X[1][i] + 0.01 * rng.normal();
    }
    TrainHyper hyper;

    SECTION("the dominant column ranks first and matches a univariate oracle") {
        auto top = rank_important_features(X, y, 1, hyper);
        REQUIRE(top == std::vector<std::size_t>{0});

        // oracle: squared correlation with the target, computed from scratch
        double best = -1;
        std::size_t best_j = 99;
        double ybar = mean_of(y);
        for (std::size_t j = 0; j < X.size(); ++j) {
            double xbar = mean_of(X[j]), sxy = 0, sxx = 0, syy = 0;
            for (std::size_t i = 0; i < n; ++i) {
                sxy += (X[j][i] - xbar) * (y[i] - ybar);
                sxx += (X[j][i] - xbar) * (X[j][i] - xbar);
                syy += (y[i] - ybar) * (y[i] - ybar);
            }
            double r2 = (sxy * sxy) / (sxx * syy);
            if (r2 > best) {
                best = r2;
                best_j = j;
            }
        }
        REQUIRE(best_j == top[0]);
    }
    SECTION("asking for more features than exist returns them all, ordered") {
        auto all = rank_important_features(X, y, 10, hyper);
        REQUIRE(all.size() == 3);
        REQUIRE(all[0] == 0);
        REQUIRE(all[1] == 1);  // the weak but nonzero column beats the noise column
    }
    SECTION("two identical row shards rank exactly like the local variant") {
        SimNetwork net{2};
        std::vector<RankShard> shards = {{0, &X, &y}, {1, &X, &y}};
        FedRankResult fed = rank_important_features(shards, 2, hyper, net);
        auto local = rank_important_features(X, y, 2, hyper);
        REQUIRE(fed.top == local);
        // one stats round plus the training transcript
        REQUIRE(net.ledger().count(MsgKind::SufficientStats) == 2);
        REQUIRE(net.ledger().count(MsgKind::StatsBroadcast) == 2);
        REQUIRE(net.ledger().count(MsgKind::WeightBroadcast) ==
                2 * std::size_t(hyper.rounds));
        REQUIRE(net.ledger().count(MsgKind::WeightUpload) == 2 * std::size_t(hyper.rounds));
    }
    SECTION("degenerate requests are rejected") {
        REQUIRE_THROWS_AS(rank_important_features(Cols{}, y, 1, hyper), ParamError);
        REQUIRE_THROWS_AS(rank_important_features(X, y, 0, hyper), ParamError);
    }
}

TEST_CASE("cross-client combination covers every cross pair and routes to owners") {
    HEContext ctx{HEParams{}};
    RngStream krng(7);
    KeyPair keys = ctx.keygen(krng);
    RngStream erng(8);
    std::vector<double> va = {0.5, -1.0, 2.0, 0.25};
    std::vector<double> vb = {1.5, 0.5, -0.5, 1.0};
    auto enc = [&](const std::vector<double>& v) {
        return ctx.encrypt(keys.pk, v, ctx.scale_base(), erng);
    };

    SECTION("two clients with one feature each produce four routed results") {
        std::vector<std::vector<EncryptedFeature>> per_client(2);
        per_client[0].push_back({0, exprs::column(0), enc(va)});
        per_client[1].push_back({1, exprs::column(1), enc(vb)});
        SimNetwork net{2};
        RngStream rng(9);
        auto routed = create_and_send_nonlocal_combinations(
            ctx, keys.pk, keys.rlk, per_client, {BinOp::Add, BinOp::Sub, BinOp::Mul}, 0.05,
            rng, net);
        REQUIRE(routed.size() == 4);  // add, sub both ways, mul
        REQUIRE(net.ledger().count(MsgKind::Ciphertext) == 4);
        std::set<std::string> names;
        for (const auto& r : routed) {
            names.insert(print_expr(r.expr));
            REQUIRE((r.owner == 0 || r.owner == 1));
            REQUIRE(r.origin_a == 0);
            REQUIRE(r.origin_b == 1);
            REQUIRE(r.noise_b == 0.05);
        }
        REQUIRE(names == std::set<std::string>{"X000+X001", "X000-X001", "X001-X000",
                                               "X000*X001"});
    }
    SECTION("a lone client yields nothing and same-client pairs are skipped") {
        std::vector<std::vector<EncryptedFeature>> lone(1);
        lone[0].push_back({0, exprs::column(0), enc(va)});
        lone[0].push_back({0, exprs::column(1), enc(vb)});
        SimNetwork net{1};
        RngStream rng(10);
        REQUIRE(create_and_send_nonlocal_combinations(ctx, keys.pk, keys.rlk, lone,
                                                      {BinOp::Add, BinOp::Mul}, 0.05, rng, net)
                    .empty());
        REQUIRE(net.ledger().total_messages() == 0);
    }
    SECTION("owner routing is a fair coin over many trials") {
        std::vector<std::vector<EncryptedFeature>> per_client(2);
        per_client[0].push_back({0, exprs::column(0), enc(va)});
        per_client[1].push_back({1, exprs::column(1), enc(vb)});
        std::size_t to_zero = 0;
        const std::size_t trials = 2000;
        for (std::size_t t = 0; t < trials; ++t) {
            SimNetwork net{2};
            RngStream rng(derive_seed(123, "routing-trial", t));
            auto routed = create_and_send_nonlocal_combinations(
                ctx, keys.pk, keys.rlk, per_client, {BinOp::Add}, 0.0, rng, net);
            REQUIRE(routed.size() == 1);
            if (routed[0].owner == 0) ++to_zero;
        }
        double frac = double(to_zero) / double(trials);
        REQUIRE(frac > 0.46);
        REQUIRE(frac < 0.54);
    }
    SECTION("unsupported inputs are rejected") {
        std::vector<std::vector<EncryptedFeature>> per_client(2);
        per_client[0].push_back({0, exprs::column(0), enc(va)});
        per_client[1].push_back({1, exprs::column(1), enc(vb)});
        SimNetwork net{2};
        RngStream rng(11);
        REQUIRE_THROWS_AS(create_and_send_nonlocal_combinations(ctx, keys.pk, keys.rlk,
                                                                per_client, {BinOp::Div}, 0.05,
                                                                rng, net),
                          ParamError);
        REQUIRE_THROWS_AS(create_and_send_nonlocal_combinations(ctx, keys.pk, keys.rlk,
                                                                per_client, {BinOp::Add}, -1.0,
                                                                rng, net),
                          ParamError);
        // a spent ciphertext cannot be combined again
        EncryptedVector spent = ctx.he_mul(enc(va), enc(vb), keys.rlk);
        per_client[0][0].ct = spent;
        REQUIRE_THROWS_AS(create_and_send_nonlocal_combinations(ctx, keys.pk, keys.rlk,
                                                                per_client, {BinOp::Add}, 0.05,
                                                                rng, net),
                          DepthExceeded);
    }
}

TEST_CASE("noiseless encrypted combination matches plaintext arithmetic") {
    HEParams params;
    params.backend = HEBackend::Bfv;
    params.ring_dim = 256;
    HEContext ctx{params};
    RngStream krng(17);
    KeyPair keys = ctx.keygen(krng);
    RngStream erng(18);

    std::size_t n = 64;
    RngStream data_rng(19);
    std::vector<double> za(n), zb(n);
    for (std::size_t i = 0; i < n; ++i) {
        za[i] = data_rng.uniform(-3.0, 3.0);
        zb[i] = data_rng.uniform(-3.0, 3.0);
    }
    std::vector<std::vector<EncryptedFeature>> per_client(2);
    per_client[0].push_back({0, exprs::column(0), ctx.encrypt(keys.pk, za, ctx.scale_base(), erng)});
    per_client[1].push_back({1, exprs::column(1), ctx.encrypt(keys.pk, zb, ctx.scale_base(), erng)});
    SimNetwork net{2};
    RngStream rng(20);
    auto routed = create_and_send_nonlocal_combinations(
        ctx, keys.pk, keys.rlk, per_client, {BinOp::Add, BinOp::Sub, BinOp::Mul}, 0.0, rng, net);
    REQUIRE(routed.size() == 4);
    for (const auto& r : routed) {
        std::vector<double> got = ctx.decrypt(keys.sk, r.ct);
        std::vector<double> want = evaluate(r.expr, Cols{za, zb});
        REQUIRE(got.size() == n);
        for (std::size_t i = 0; i < n; ++i)
            REQUIRE(std::fabs(got[i] - want[i]) < 5e-3);
    }
}

TEST_CASE("a planted horizontal run recovers the planted product feature") {
    // the linear part of y is spanned by the raw columns, which every model
    // keeps, so the one engineered feature that genuinely matters is the
    // product; sums and differences have many interchangeable substitutes
    int hits = 0;
    bool compared = false;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Dataset ds = planted_order2(480, seed);
        FederationPlan plan;
        plan.setting = Setting::Horizontal;
        plan.clients = 8;
        FedDataset fed = prepare_federated(ds, plan, seed);
        FlafeConfig cfg = horizontal_config(seed);
        cfg.selection.start_candidates = 8;
        RunReport report = run_horizontal_flafe(cfg, fed);

        REQUIRE_FALSE(report.no_candidates);
        require_private_transcript(report.ledger);
        for (const auto& p : report.provenance) {
            REQUIRE(p.owners.size() == 8);
            REQUIRE(p.origin_a >= 0);
            REQUIRE(p.origin_a < 8);
            REQUIRE_FALSE(p.cross());
        }
        bool hit = to_set(report.f_final).count("X000*X001") == 1;
        if (hit) ++hits;

        if (hit && !compared) {
            compared = true;
            REQUIRE(report.test_r2 > 0.95);
            // pruning the union should not cost accuracy on planted structure
            FlafeConfig nomask = cfg;
            nomask.use_mask = false;
            RunReport full = run_horizontal_flafe(nomask, fed);
            REQUIRE(report.test_r2 >= full.test_r2 - 0.02);
        }
    }
    REQUIRE(hits >= 8);
    REQUIRE(compared);
}

TEST_CASE("a single-client federated run equals the centralized pipeline") {
    Dataset ds = planted_order2(300, 77);
    FederationPlan plan;
    plan.setting = Setting::Horizontal;
    plan.clients = 1;
    FedDataset fed = prepare_federated(ds, plan, 77);
    FlafeConfig cfg = horizontal_config(77);

    RunReport federated = run_horizontal_flafe(cfg, fed);
    RunReport central = run_centralized_pipeline(cfg, fed);

    REQUIRE(std::fabs(federated.val_r2 - central.val_r2) < 1e-6);
    REQUIRE(std::fabs(federated.test_r2 - central.test_r2) < 1e-6);
    REQUIRE(federated.f_final == central.f_final);
    REQUIRE(federated.model.weights.size() == central.model.weights.size());
    for (std::size_t j = 0; j < federated.model.weights.size(); ++j)
        REQUIRE(std::fabs(federated.model.weights[j] - central.model.weights[j]) < 1e-9);
    REQUIRE(central.ledger.total_messages() == 0);
    REQUIRE(federated.ledger.total_messages() > 0);

    // the union with one client is exactly that client's local output
    std::vector<std::size_t> rows(fed.train.rows());
    std::iota(rows.begin(), rows.end(), std::size_t(0));
    std::vector<int> cols(fed.train.features());
    std::iota(cols.begin(), cols.end(), 0);
    ClientShard full = detail::make_shard(fed.train, 0, rows, cols);
    RngStream arng(derive_seed(derive_seed(cfg.seed, "outer", 1), "autofe", 0));
    std::vector<ExprPtr> a0 = run_local_autofe(full, cfg.autofe, arng);
    REQUIRE(federated.iterations.size() == 1);
    REQUIRE(federated.iterations[0].pool_size == a0.size());
    std::set<std::string> a0_names;
    for (const auto& e : a0) a0_names.insert(print_expr(e));
    for (const auto& f : federated.f_final) REQUIRE(a0_names.count(f) == 1);
}

TEST_CASE("horizontal message counts match the closed-form schedule") {
    Dataset ds = planted_order2(300, 5);
    FederationPlan plan;
    plan.setting = Setting::Horizontal;
    plan.clients = 3;
    FedDataset fed = prepare_federated(ds, plan, 5);
    FlafeConfig cfg = horizontal_config(5);
    cfg.outer_iters = 2;
    cfg.autofe.keep = 4;
    cfg.selection.start_candidates = 4;
    cfg.selection.rounds_per_level = {1, 2};

    RunReport report = run_horizontal_flafe(cfg, fed);
    require_private_transcript(report.ledger);

    const std::size_t q = 3, iters = 2;
    // both outer iterations must have produced candidates for the closed
    // form below to apply
    REQUIRE(report.iterations.size() == iters);
    REQUIRE(report.iterations[0].pool_size > 0);
    REQUIRE(report.iterations[1].pool_size > 0);

    std::size_t sel_trainings = expected_trainings(cfg.selection) * iters;
    std::size_t sel_rounds = expected_rounds(cfg.selection) * iters;
    std::size_t final_rounds = std::size_t(cfg.selection.rounds_per_level.back());
    REQUIRE(report.trainings == sel_trainings + 1);
    REQUIRE(report.train_rounds == sel_rounds + final_rounds);

    const CommLedger& led = report.ledger;
    REQUIRE(led.count(MsgKind::FeatureStrings) == q * iters);
    REQUIRE(led.count(MsgKind::UnionBroadcast) == q * iters);
    REQUIRE(led.count(MsgKind::SufficientStats) == q * iters);
    REQUIRE(led.count(MsgKind::StatsBroadcast) == q * iters);
    REQUIRE(led.count(MsgKind::WeightBroadcast) == q * report.train_rounds);
    REQUIRE(led.count(MsgKind::WeightUpload) == q * report.train_rounds);
    REQUIRE(led.count(MsgKind::MaskBroadcast) == q * sel_trainings + q * iters);
    REQUIRE(led.count(MsgKind::Ciphertext) == 0);
    REQUIRE(led.total_messages() ==
            led.count(MsgKind::FeatureStrings) + led.count(MsgKind::UnionBroadcast) +
                led.count(MsgKind::SufficientStats) + led.count(MsgKind::StatsBroadcast) +
                led.count(MsgKind::WeightBroadcast) + led.count(MsgKind::WeightUpload) +
                led.count(MsgKind::MaskBroadcast));
    REQUIRE(report.routed_ciphertexts == 0);
}

TEST_CASE("an empty union still yields a raw-only model") {
    Dataset ds;
    ds.X.assign(2, std::vector<double>(100, 1.0));  // constant columns engineer nothing
    ds.y.resize(100);
    RngStream rng(31);
    for (auto& v : ds.y) v = rng.normal();
    ds.feature_names = {"X000", "X001"};

    FederationPlan plan;
    plan.setting = Setting::Horizontal;
    plan.clients = 2;
    FedDataset fed = prepare_federated(ds, plan, 31);
    FlafeConfig cfg = horizontal_config(31);
    cfg.autofe.keep = 5;

    RunReport report = run_horizontal_flafe(cfg, fed);
    REQUIRE(report.no_candidates);
    REQUIRE(report.f_final.empty());
    REQUIRE(report.iterations.size() == 1);
    REQUIRE(report.iterations[0].pool_size == 0);
    REQUIRE(report.trainings == 1);  // just the final raw fit
    REQUIRE(std::isfinite(report.val_r2));
    REQUIRE(std::isfinite(report.test_r2));
    REQUIRE(report.model.weights.size() == 2);
    const CommLedger& led = report.ledger;
    REQUIRE(led.count(MsgKind::FeatureStrings) == 2);
    REQUIRE(led.count(MsgKind::UnionBroadcast) == 0);
    REQUIRE(led.count(MsgKind::MaskBroadcast) == 0);
    REQUIRE(led.count(MsgKind::SufficientStats) == 2);  // the raw-only fallback round
}

TEST_CASE("a planted vertical run creates the cross-client product feature") {
    Dataset ds = planted_product(300, 2, 101);
    FederationPlan plan;
    plan.setting = Setting::Vertical;
    plan.clients = 2;
    FedDataset fed = prepare_federated(ds, plan, 101);
    FlafeConfig cfg = grid_config(Setting::Vertical, 101);

    RunReport report = run_vertical_flafe(cfg, fed);
    require_private_transcript(report.ledger);
    REQUIRE(report.iterations.size() == 1);
    // one cross pair under {add, sub, sub, mul}
    REQUIRE(report.iterations[0].fresh_cross == 4);
    REQUIRE(report.routed_ciphertexts == 4);
    REQUIRE(report.ledger.count(MsgKind::Ciphertext) == 6);  // 2 uploads + 4 routed

    // the surviving cross product references both clients' columns
    bool found_product = false;
    for (std::size_t i = 0; i < report.f_final.size(); ++i) {
        const FeatureProvenance& p = report.provenance[i];
        REQUIRE(p.feature == report.f_final[i]);
        if (!p.cross()) continue;
        REQUIRE(p.noise_b == cfg.laplace_b);
        REQUIRE((p.origin_a == 0 && p.origin_b == 1));
        ExprPtr parsed = parse_expr(p.feature);
        if (parsed->kind == ExprKind::Binary && parsed->op == BinOp::Mul) {
            std::set<int> cols;
            std::vector<const FeatureExpr*> stack = {parsed.get()};
            while (!stack.empty()) {
                const FeatureExpr* e = stack.back();
                stack.pop_back();
                if (!e) continue;
                if (e->kind == ExprKind::Column) cols.insert(e->column);
                stack.push_back(e->lhs.get());
                stack.push_back(e->rhs.get());
            }
            if (cols == std::set<int>{0, 1}) found_product = true;
        }
    }
    REQUIRE(found_product);

    // the engineered model clearly beats the raw vertical fit
    RunReport baseline = run_raw_baseline(cfg, fed);
    REQUIRE(std::isfinite(baseline.test_r2));
    REQUIRE(report.test_r2 >= baseline.test_r2 + 0.3);

    // provenance and model bookkeeping line up
    REQUIRE(report.f_final.size() == report.provenance.size());
    REQUIRE(report.model.weights.size() == report.model.feature_names.size());
    std::set<std::string> legal = to_set(report.f_final);
    legal.insert("X000");
    legal.insert("X001");
    for (const auto& name : report.model.feature_names) REQUIRE(legal.count(name) == 1);
    for (const auto& p : report.provenance) REQUIRE_FALSE(p.owners.empty());
}

TEST_CASE("a vertical run under real encryption stays close to the transparent run") {
    Dataset ds = planted_product(128, 2, 202);
    FederationPlan plan;
    plan.setting = Setting::Vertical;
    plan.clients = 2;
    FedDataset fed = prepare_federated(ds, plan, 202);

    FlafeConfig cfg = grid_config(Setting::Vertical, 202);
    RunReport transparent = run_vertical_flafe(cfg, fed);

    FlafeConfig enc_cfg = cfg;
    enc_cfg.he.backend = HEBackend::Bfv;
    enc_cfg.he.ring_dim = 256;
    RunReport encrypted = run_vertical_flafe(enc_cfg, fed);

    REQUIRE(to_set(encrypted.f_final) == to_set(transparent.f_final));
    REQUIRE(std::fabs(encrypted.test_r2 - transparent.test_r2) < 0.05);
    REQUIRE(encrypted.ledger.count(MsgKind::Ciphertext) ==
            transparent.ledger.count(MsgKind::Ciphertext));
}

TEST_CASE("vertical and hybrid runs agree on a single-row-block grid") {
    Dataset ds = planted_product(240, 4, 55);
    FederationPlan plan;
    plan.setting = Setting::Vertical;
    plan.clients = 2;
    FedDataset fed = prepare_federated(ds, plan, 55);

    FedDataset as_hybrid = fed;
    as_hybrid.setting = Setting::Hybrid;
    as_hybrid.row_blocks = 1;
    as_hybrid.col_blocks = 2;

    FlafeConfig vcfg = grid_config(Setting::Vertical, 55);
    FlafeConfig hcfg = grid_config(Setting::Hybrid, 55);

    RunReport v = run_vertical_flafe(vcfg, fed);
    RunReport h = run_hybrid_flafe(hcfg, as_hybrid);

    REQUIRE(events_equal(v.ledger, h.ledger));
    REQUIRE(v.f_final == h.f_final);
    REQUIRE(v.val_r2 == h.val_r2);
    REQUIRE(v.test_r2 == h.test_r2);
    REQUIRE(v.model.weights == h.model.weights);
    REQUIRE(v.trainings == h.trainings);
    REQUIRE(v.routed_ciphertexts == h.routed_ciphertexts);
    REQUIRE(h.setting == Setting::Hybrid);
}

TEST_CASE("a planted hybrid run crosses blocks and beats the raw baseline") {
    int survived = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Dataset ds = planted_product(400, 2, seed * 13);
        FederationPlan plan;
        plan.setting = Setting::Hybrid;
        plan.row_blocks = 2;
        plan.col_blocks = 2;
        FedDataset fed = prepare_federated(ds, plan, seed * 13);
        FlafeConfig cfg = grid_config(Setting::Hybrid, seed * 13);

        RunReport report = run_hybrid_flafe(cfg, fed);
        bool has_cross = false;
        for (const auto& p : report.provenance) has_cross = has_cross || p.cross();
        if (has_cross) ++survived;

        if (seed == 1) {
            require_private_transcript(report.ledger);
            RunReport baseline = run_raw_baseline(cfg, fed);
            REQUIRE(report.test_r2 >= baseline.test_r2 + 0.2);
            // owners of a cross feature live in the owning column block
            for (const auto& p : report.provenance)
                if (p.cross()) REQUIRE(p.owners.size() == 2);  // one per row block
        }
    }
    REQUIRE(survived >= 7);
}

TEST_CASE("grid runs reject malformed federations") {
    Dataset ds = planted_product(200, 4, 91);
    FederationPlan plan;
    plan.setting = Setting::Hybrid;
    plan.row_blocks = 2;
    plan.col_blocks = 2;
    FedDataset fed = prepare_federated(ds, plan, 91);
    FlafeConfig cfg = grid_config(Setting::Hybrid, 91);

    SECTION("column sets must match across row blocks") {
        FedDataset bad = fed;
        for (auto& s : bad.shards)
            if (s.row_block == 0 && s.col_block == 0 && s.columns.size() > 1) {
                s.columns.pop_back();
                s.X.pop_back();
            }
        REQUIRE_THROWS_AS(run_hybrid_flafe(cfg, bad), PartitionError);
    }
    SECTION("row sets must match across column blocks") {
        FedDataset bad = fed;
        for (auto& s : bad.shards)
            if (s.row_block == 0 && s.col_block == 1 && s.rows.size() > 1) {
                s.rows.pop_back();
                s.y.pop_back();
                for (auto& col : s.X) col.pop_back();
            }
        REQUIRE_THROWS_AS(run_hybrid_flafe(cfg, bad), PartitionError);
    }
    SECTION("duplicate and missing cells are caught") {
        FedDataset bad = fed;
        bad.shards[1].row_block = bad.shards[0].row_block;
        bad.shards[1].col_block = bad.shards[0].col_block;
        REQUIRE_THROWS_AS(run_hybrid_flafe(cfg, bad), PartitionError);

        FedDataset missing = fed;
        missing.shards.pop_back();
        REQUIRE_THROWS_AS(run_hybrid_flafe(cfg, missing), PartitionError);
    }
    SECTION("setting mismatches are caught up front") {
        REQUIRE_THROWS_AS(run_vertical_flafe(grid_config(Setting::Vertical, 91), fed),
                          PartitionError);
        REQUIRE_THROWS_AS(run_hybrid_flafe(grid_config(Setting::Vertical, 91), fed),
                          ConfigError);
        Dataset hds = planted_order2(200, 91);
        FederationPlan hplan;
        hplan.setting = Setting::Horizontal;
        hplan.clients = 2;
        FedDataset hfed = prepare_federated(hds, hplan, 91);
        REQUIRE_THROWS_AS(run_horizontal_flafe(grid_config(Setting::Vertical, 91), hfed),
                          ConfigError);
        REQUIRE_THROWS_AS(run_horizontal_flafe(horizontal_config(91), fed), PartitionError);
    }
}

TEST_CASE("grid pipelines fall back to raw training when nothing is engineered") {
    Dataset ds = planted_product(150, 2, 71);
    FederationPlan plan;
    plan.setting = Setting::Vertical;
    plan.clients = 2;
    FedDataset fed = prepare_federated(ds, plan, 71);
    FlafeConfig cfg = grid_config(Setting::Vertical, 71);
    cfg.local_funcs.clear();
    cfg.cross_funcs.clear();

    RunReport report = run_vertical_flafe(cfg, fed);
    REQUIRE(report.no_candidates);
    REQUIRE(report.f_final.empty());
    REQUIRE(report.trainings == 1);
    REQUIRE(report.routed_ciphertexts == 0);
    REQUIRE(std::isfinite(report.test_r2));
    REQUIRE(report.model.weights.size() == 2);
}

TEST_CASE("vertical message counts match the closed-form schedule") {
    Dataset ds = planted_product(300, 2, 101);
    FederationPlan plan;
    plan.setting = Setting::Vertical;
    plan.clients = 2;
    FedDataset fed = prepare_federated(ds, plan, 101);
    FlafeConfig cfg = grid_config(Setting::Vertical, 101);

    RunReport report = run_vertical_flafe(cfg, fed);
    const std::size_t q = 2;
    std::size_t sel_trainings = expected_trainings(cfg.selection);
    std::size_t sel_rounds = expected_rounds(cfg.selection);
    std::size_t final_rounds = std::size_t(cfg.selection.rounds_per_level.back());
    REQUIRE(report.trainings == sel_trainings + 1);
    REQUIRE(report.train_rounds == sel_rounds + final_rounds);

    const CommLedger& led = report.ledger;
    // every training round moves one partial up and one aggregate down per client
    REQUIRE(led.count(MsgKind::PartialPrediction) == q * report.train_rounds);
    REQUIRE(led.count(MsgKind::AggregateBroadcast) == q * report.train_rounds);
    // weights reach the server once per training so it can score the mask
    REQUIRE(led.count(MsgKind::WeightUpload) == q * report.trainings);
    REQUIRE(led.count(MsgKind::MaskBroadcast) == q * sel_trainings + q);
    REQUIRE(led.count(MsgKind::SufficientStats) == q);
    REQUIRE(led.count(MsgKind::StatsBroadcast) == q);
    REQUIRE(led.count(MsgKind::Ciphertext) == q * 1 + report.routed_ciphertexts);
}

TEST_CASE("reports are bit-reproducible for a fixed seed") {
    SECTION("vertical") {
        Dataset ds = planted_product(240, 3, 909);
        FederationPlan plan;
        plan.setting = Setting::Vertical;
        plan.clients = 3;
        FedDataset fed = prepare_federated(ds, plan, 909);
        FlafeConfig cfg = grid_config(Setting::Vertical, 909);

        RunReport a = run_vertical_flafe(cfg, fed);
        RunReport b = run_vertical_flafe(cfg, fed);
        REQUIRE(events_equal(a.ledger, b.ledger));
        REQUIRE(a.f_final == b.f_final);
        REQUIRE(a.val_r2 == b.val_r2);
        REQUIRE(a.test_r2 == b.test_r2);
        REQUIRE(a.model.weights == b.model.weights);
        REQUIRE(a.leaderboard.size() == b.leaderboard.size());
        for (std::size_t i = 0; i < a.leaderboard.size(); ++i) {
            REQUIRE(a.leaderboard[i].mask == b.leaderboard[i].mask);
            REQUIRE(a.leaderboard[i].score == b.leaderboard[i].score);
        }

        FlafeConfig other = cfg;
        other.seed = 910;
        RunReport c = run_vertical_flafe(other, fed);
        bool differs = c.val_r2 != a.val_r2 || c.f_final != a.f_final ||
                       !events_equal(c.ledger, a.ledger);
        REQUIRE(differs);
    }
    SECTION("horizontal") {
        Dataset ds = planted_order2(300, 4242);
        FederationPlan plan;
        plan.setting = Setting::Horizontal;
        plan.clients = 4;
        FedDataset fed = prepare_federated(ds, plan, 4242);
        FlafeConfig cfg = horizontal_config(4242);

        RunReport a = run_horizontal_flafe(cfg, fed);
        RunReport b = run_horizontal_flafe(cfg, fed);
        REQUIRE(events_equal(a.ledger, b.ledger));
        REQUIRE(a.f_final == b.f_final);
        REQUIRE(a.val_r2 == b.val_r2);
        REQUIRE(a.model.weights == b.model.weights);
    }
}
