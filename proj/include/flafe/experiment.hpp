#pragma once

// Experiment harness: flat dotted key=value configs, the four comparison
// arms, and deterministic report files. Everything the CLI does lives here
// so it stays testable without spawning processes.

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <flafe/orchestrators.hpp>

namespace flafe {

// ---- experiment arms ----

enum class ArmTag { BaselineRawCentral, CentralizedAutofe, FedWithoutMask, Flafe };

inline constexpr ArmTag kAllArms[] = {ArmTag::BaselineRawCentral, ArmTag::CentralizedAutofe,
                                      ArmTag::FedWithoutMask, ArmTag::Flafe};

inline const char* arm_name(ArmTag t) {
    switch (t) {
        case ArmTag::BaselineRawCentral: return "baseline_raw_central";
        case ArmTag::CentralizedAutofe: return "centralized_autofe";
        case ArmTag::FedWithoutMask: return "fed_without_mask";
        case ArmTag::Flafe: return "flafe";
    }
    return "?";
}

inline bool parse_arm(const std::string& text, ArmTag& out) {
    for (ArmTag t : kAllArms) {
        if (text == arm_name(t)) {
            out = t;
            return true;
        }
    }
    return false;
}

// ---- configuration ----

// One flat key space; every key has a default so an empty file is a valid
// config. Values are written back by normalized_config_text in sorted key
// order, which doubles as the reference list of supported keys.
struct ExperimentConfig {
    std::string dataset_path;             // dataset.path (required to run)
    std::string dataset_target = "last";  // dataset.target: header name, #index, or "last"
    bool dataset_header = false;          // dataset.header

    Setting setting = Setting::Horizontal;
    std::size_t clients = 8;                  // clients (horizontal / vertical)
    std::size_t row_blocks = 0;               // hybrid.row_blocks (hybrid only)
    std::size_t col_blocks = 0;               // hybrid.col_blocks (hybrid only)
    HorizontalPartition partition;            // partition.mode, partition.alpha
    SplitSpec split;                          // split.train, split.val, split.test
    std::uint64_t seed = 1;                   // seed: the master stream everything fans from

    int outer_iters = 1;      // outer_iters
    int important_k = 1;      // important_k
    double laplace_b = 0.05;  // laplace_b
    SelectionParams selection;
    TrainHyper train;
    AutoFEConfig autofe;
    HEParams he;

    std::string out_dir = ".";  // out.dir
    std::vector<ArmTag> arms = {ArmTag::BaselineRawCentral, ArmTag::CentralizedAutofe,
                                ArmTag::FedWithoutMask, ArmTag::Flafe};
};

namespace detail {

inline bool parse_ll(const std::string& v, long long& out) {
    const char* b = v.data();
    const char* e = b + v.size();
    auto r = std::from_chars(b, e, out);
    return r.ec == std::errc{} && r.ptr == e;
}

inline bool parse_f64(const std::string& v, double& out) {
    const char* b = v.data();
    const char* e = b + v.size();
    auto r = std::from_chars(b, e, out);
    return r.ec == std::errc{} && r.ptr == e;
}

inline bool parse_bool(const std::string& v, bool& out) {
    if (v == "true" || v == "1") { out = true; return true; }
    if (v == "false" || v == "0") { out = false; return true; }
    return false;
}

inline std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= v.size(); ++i) {
        if (i == v.size() || v[i] == ',') {
            out.push_back(trim(v.substr(start, i - start)));
            start = i + 1;
        }
    }
    return out;
}

// Applies one key=value pair; returns an error message or nothing.
inline std::optional<std::string> set_config_key(ExperimentConfig& cfg, const std::string& key,
                                                 const std::string& value) {
    auto bad_number = [&]() { return key + ": expected a number, got '" + value + "'"; };
    auto want_ll = [&](long long& slot) -> std::optional<std::string> {
        if (!parse_ll(value, slot)) return bad_number();
        return std::nullopt;
    };
    auto want_f64 = [&](double& slot) -> std::optional<std::string> {
        if (!parse_f64(value, slot)) return bad_number();
        return std::nullopt;
    };

    long long ll = 0;
    double d = 0;
    bool b = false;

    if (key == "dataset.path") { cfg.dataset_path = value; return std::nullopt; }
    if (key == "dataset.target") { cfg.dataset_target = value; return std::nullopt; }
    if (key == "dataset.header") {
        if (!parse_bool(value, b)) return key + ": expected true or false";
        cfg.dataset_header = b;
        return std::nullopt;
    }
    if (key == "setting") {
        if (value == "horizontal") cfg.setting = Setting::Horizontal;
        else if (value == "vertical") cfg.setting = Setting::Vertical;
        else if (value == "hybrid") cfg.setting = Setting::Hybrid;
        else return key + ": expected horizontal, vertical or hybrid";
        return std::nullopt;
    }
    if (key == "clients") {
        if (auto e = want_ll(ll)) return e;
        if (ll < 1) return key + ": must be >= 1";
        cfg.clients = std::size_t(ll);
        return std::nullopt;
    }
    if (key == "hybrid.row_blocks" || key == "hybrid.col_blocks") {
        if (auto e = want_ll(ll)) return e;
        if (ll < 0) return key + ": must be >= 0";
        (key == "hybrid.row_blocks" ? cfg.row_blocks : cfg.col_blocks) = std::size_t(ll);
        return std::nullopt;
    }
    if (key == "partition.mode") {
        if (value == "iid") cfg.partition.mode = HorizontalPartition::Mode::iid;
        else if (value == "dirichlet") cfg.partition.mode = HorizontalPartition::Mode::dirichlet;
        else return key + ": expected iid or dirichlet";
        return std::nullopt;
    }
    if (key == "partition.alpha") {
        if (auto e = want_f64(d)) return e;
        if (!(d > 0)) return key + ": must be positive";
        cfg.partition.alpha = d;
        return std::nullopt;
    }
    if (key == "split.train") return want_f64(cfg.split.train);
    if (key == "split.val") return want_f64(cfg.split.val);
    if (key == "split.test") return want_f64(cfg.split.test);
    if (key == "seed") {
        if (auto e = want_ll(ll)) return e;
        if (ll < 0) return key + ": must be >= 0";
        cfg.seed = std::uint64_t(ll);
        return std::nullopt;
    }
    if (key == "outer_iters") {
        if (auto e = want_ll(ll)) return e;
        cfg.outer_iters = int(ll);
        return std::nullopt;
    }
    if (key == "important_k") {
        if (auto e = want_ll(ll)) return e;
        cfg.important_k = int(ll);
        return std::nullopt;
    }
    if (key == "laplace_b") return want_f64(cfg.laplace_b);
    if (key == "selection.refine_iters") {
        if (auto e = want_ll(ll)) return e;
        cfg.selection.refine_iters = int(ll);
        return std::nullopt;
    }
    if (key == "selection.halving_iters") {
        if (auto e = want_ll(ll)) return e;
        cfg.selection.halving_iters = int(ll);
        return std::nullopt;
    }
    if (key == "selection.start_candidates") {
        if (auto e = want_ll(ll)) return e;
        cfg.selection.start_candidates = int(ll);
        return std::nullopt;
    }
    if (key == "selection.gamma") return want_f64(cfg.selection.gamma);
    if (key == "selection.top_sparsity") {
        if (auto e = want_ll(ll)) return e;
        cfg.selection.top_sparsity = int(ll);
        return std::nullopt;
    }
    if (key == "selection.rounds_per_level") {
        std::vector<int> levels;
        for (const std::string& item : split_list(value)) {
            long long r = 0;
            if (!parse_ll(item, r) || r < 1)
                return key + ": expected a comma list of positive integers";
            levels.push_back(int(r));
        }
        if (levels.empty()) return key + ": needs at least one level";
        cfg.selection.rounds_per_level = levels;
        return std::nullopt;
    }
    if (key == "train.lambda") return want_f64(cfg.train.lambda);
    if (key == "train.step_size") return want_f64(cfg.train.step_size);
    if (key == "train.local_steps") {
        if (auto e = want_ll(ll)) return e;
        cfg.train.local_steps = int(ll);
        return std::nullopt;
    }
    if (key == "train.rounds") {
        if (auto e = want_ll(ll)) return e;
        cfg.train.rounds = int(ll);
        return std::nullopt;
    }
    if (key == "train.max_iters") {
        if (auto e = want_ll(ll)) return e;
        cfg.train.max_iters = int(ll);
        return std::nullopt;
    }
    if (key == "train.tol") return want_f64(cfg.train.tol);
    if (key == "train.backtracking") {
        if (!parse_bool(value, b)) return key + ": expected true or false";
        cfg.train.backtracking = b;
        return std::nullopt;
    }
    if (key == "autofe.steps") {
        if (auto e = want_ll(ll)) return e;
        cfg.autofe.steps = int(ll);
        return std::nullopt;
    }
    if (key == "autofe.keep") {
        if (auto e = want_ll(ll)) return e;
        cfg.autofe.keep = int(ll);
        return std::nullopt;
    }
    if (key == "autofe.candidate_cap") {
        if (auto e = want_ll(ll)) return e;
        cfg.autofe.candidate_cap = int(ll);
        return std::nullopt;
    }
    if (key == "autofe.max_nan_fraction") return want_f64(cfg.autofe.max_nan_fraction);
    if (key == "he.backend") {
        if (value == "transparent") cfg.he.backend = HEBackend::Transparent;
        else if (value == "bfv") cfg.he.backend = HEBackend::Bfv;
        else return key + ": expected transparent or bfv";
        return std::nullopt;
    }
    if (key == "he.ring_dim") {
        if (auto e = want_ll(ll)) return e;
        if (ll < 1) return key + ": must be >= 1";
        cfg.he.ring_dim = std::size_t(ll);
        return std::nullopt;
    }
    if (key == "he.limb_bits") {
        if (auto e = want_ll(ll)) return e;
        cfg.he.limb_bits = int(ll);
        return std::nullopt;
    }
    if (key == "he.plain_bits") {
        if (auto e = want_ll(ll)) return e;
        cfg.he.plain_bits = int(ll);
        return std::nullopt;
    }
    if (key == "he.delta") {
        if (auto e = want_ll(ll)) return e;
        if (ll < 2) return key + ": must be >= 2";
        cfg.he.delta = std::uint64_t(ll);
        return std::nullopt;
    }
    if (key == "out.dir") { cfg.out_dir = value; return std::nullopt; }
    if (key == "arms") {
        std::vector<ArmTag> arms;
        for (const std::string& item : split_list(value)) {
            ArmTag t;
            if (!parse_arm(item, t)) return key + ": unknown arm '" + item + "'";
            arms.push_back(t);
        }
        if (arms.empty()) return key + ": needs at least one arm";
        cfg.arms = arms;
        return std::nullopt;
    }
    return "unknown key '" + key + "'";
}

// Checks that only make sense once every key has been applied.
inline void cross_check_config(const ExperimentConfig& cfg, std::vector<std::string>& errors) {
    auto frac_ok = [](double f) { return f > 0.0 && f < 1.0; };
    if (!frac_ok(cfg.split.train) || !frac_ok(cfg.split.val) || !frac_ok(cfg.split.test))
        errors.push_back("split fractions must lie in (0, 1)");
    else if (std::fabs(cfg.split.train + cfg.split.val + cfg.split.test - 1.0) > 1e-9)
        errors.push_back("split fractions must sum to 1");
    if (!(cfg.selection.gamma > 0.0) || !(cfg.selection.gamma < 1.0))
        errors.push_back("selection.gamma: halving ratio out of range");
    if (cfg.selection.refine_iters < 1 || cfg.selection.halving_iters < 1 ||
        cfg.selection.start_candidates < 1 || cfg.selection.top_sparsity < 1)
        errors.push_back("selection counts must be positive");
    for (std::size_t l = 0; l < cfg.selection.rounds_per_level.size(); ++l) {
        if (l > 0 &&
            cfg.selection.rounds_per_level[l] < cfg.selection.rounds_per_level[l - 1]) {
            errors.push_back("selection.rounds_per_level must be non-decreasing");
            break;
        }
    }
    if (cfg.setting == Setting::Hybrid && (cfg.row_blocks < 1 || cfg.col_blocks < 1))
        errors.push_back("hybrid setting requires hybrid.row_blocks and hybrid.col_blocks");
    if (cfg.outer_iters < 1) errors.push_back("outer_iters must be >= 1");
    if (cfg.important_k < 1) errors.push_back("important_k must be >= 1");
    if (cfg.laplace_b < 0) errors.push_back("laplace_b must be >= 0");
    if (cfg.train.lambda < 0) errors.push_back("train.lambda must be >= 0");
    if (!(cfg.train.step_size > 0)) errors.push_back("train.step_size must be positive");
    if (cfg.train.local_steps < 1) errors.push_back("train.local_steps must be >= 1");
    if (cfg.train.rounds < 1) errors.push_back("train.rounds must be >= 1");
    if (cfg.train.max_iters < 1) errors.push_back("train.max_iters must be >= 1");
    if (cfg.train.tol < 0) errors.push_back("train.tol must be >= 0");
    if (cfg.autofe.steps < 1) errors.push_back("autofe.steps must be >= 1");
    if (cfg.autofe.keep < 1 || cfg.autofe.candidate_cap < 1)
        errors.push_back("autofe caps must be positive");
    if (cfg.autofe.max_nan_fraction < 0 || cfg.autofe.max_nan_fraction > 1)
        errors.push_back("autofe.max_nan_fraction must lie in [0, 1]");
    if ((cfg.he.ring_dim & (cfg.he.ring_dim - 1)) != 0 || cfg.he.ring_dim < 8)
        errors.push_back("he.ring_dim must be a power of two, at least 8");
}

}  // namespace detail

struct ParsedConfig {
    ExperimentConfig config;
    std::vector<std::string> errors;

    bool ok() const { return errors.empty(); }
};

// Parses flat key=value text. Blank lines and lines starting with '#' are
// skipped. `overrides` are applied after the file (the CLI's --seed and
// friends) and participate in the same validation. All problems are
// collected; nothing throws.
inline ParsedConfig parse_experiment_config(
    const std::string& text,
    const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    ParsedConfig out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            out.errors.push_back("line " + std::to_string(lineno) + ": expected key=value");
            continue;
        }
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty()) {
            out.errors.push_back("line " + std::to_string(lineno) + ": empty key");
            continue;
        }
        if (auto err = detail::set_config_key(out.config, key, value))
            out.errors.push_back("line " + std::to_string(lineno) + ": " + *err);
    }
    for (const auto& [key, value] : overrides) {
        if (auto err = detail::set_config_key(out.config, key, value))
            out.errors.push_back("override " + key + ": " + *err);
    }
    detail::cross_check_config(out.config, out.errors);
    return out;
}

// Every supported key with its effective value, sorted, one per line.
inline std::string normalized_config_text(const ExperimentConfig& cfg) {
    using detail::fmt_double;
    std::vector<std::pair<std::string, std::string>> kv;
    std::string arms;
    for (std::size_t i = 0; i < cfg.arms.size(); ++i) {
        if (i) arms += ',';
        arms += arm_name(cfg.arms[i]);
    }
    std::string levels;
    for (std::size_t i = 0; i < cfg.selection.rounds_per_level.size(); ++i) {
        if (i) levels += ',';
        levels += std::to_string(cfg.selection.rounds_per_level[i]);
    }
    kv.push_back({"arms", arms});
    kv.push_back({"autofe.candidate_cap", std::to_string(cfg.autofe.candidate_cap)});
    kv.push_back({"autofe.keep", std::to_string(cfg.autofe.keep)});
    kv.push_back({"autofe.max_nan_fraction", fmt_double(cfg.autofe.max_nan_fraction)});
    kv.push_back({"autofe.steps", std::to_string(cfg.autofe.steps)});
    kv.push_back({"clients", std::to_string(cfg.clients)});
    kv.push_back({"dataset.header", cfg.dataset_header ? "true" : "false"});
    kv.push_back({"dataset.path", cfg.dataset_path});
    kv.push_back({"dataset.target", cfg.dataset_target});
    kv.push_back({"he.backend", cfg.he.backend == HEBackend::Bfv ? "bfv" : "transparent"});
    kv.push_back({"he.delta", std::to_string(cfg.he.delta)});
    kv.push_back({"he.limb_bits", std::to_string(cfg.he.limb_bits)});
    kv.push_back({"he.plain_bits", std::to_string(cfg.he.plain_bits)});
    kv.push_back({"he.ring_dim", std::to_string(cfg.he.ring_dim)});
    kv.push_back({"hybrid.col_blocks", std::to_string(cfg.col_blocks)});
    kv.push_back({"hybrid.row_blocks", std::to_string(cfg.row_blocks)});
    kv.push_back({"important_k", std::to_string(cfg.important_k)});
    kv.push_back({"laplace_b", fmt_double(cfg.laplace_b)});
    kv.push_back({"out.dir", cfg.out_dir});
    kv.push_back({"outer_iters", std::to_string(cfg.outer_iters)});
    kv.push_back({"partition.alpha", fmt_double(cfg.partition.alpha)});
    kv.push_back({"partition.mode",
                  cfg.partition.mode == HorizontalPartition::Mode::iid ? "iid" : "dirichlet"});
    kv.push_back({"seed", std::to_string(cfg.seed)});
    kv.push_back({"selection.gamma", fmt_double(cfg.selection.gamma)});
    kv.push_back({"selection.halving_iters", std::to_string(cfg.selection.halving_iters)});
    kv.push_back({"selection.refine_iters", std::to_string(cfg.selection.refine_iters)});
    kv.push_back({"selection.rounds_per_level", levels});
    kv.push_back({"selection.start_candidates", std::to_string(cfg.selection.start_candidates)});
    kv.push_back({"selection.top_sparsity", std::to_string(cfg.selection.top_sparsity)});
    kv.push_back({"setting", setting_name(cfg.setting)});
    kv.push_back({"split.test", fmt_double(cfg.split.test)});
    kv.push_back({"split.train", fmt_double(cfg.split.train)});
    kv.push_back({"split.val", fmt_double(cfg.split.val)});
    kv.push_back({"train.backtracking", cfg.train.backtracking ? "true" : "false"});
    kv.push_back({"train.lambda", fmt_double(cfg.train.lambda)});
    kv.push_back({"train.local_steps", std::to_string(cfg.train.local_steps)});
    kv.push_back({"train.max_iters", std::to_string(cfg.train.max_iters)});
    kv.push_back({"train.rounds", std::to_string(cfg.train.rounds)});
    kv.push_back({"train.step_size", fmt_double(cfg.train.step_size)});
    kv.push_back({"train.tol", fmt_double(cfg.train.tol)});
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

// ---- running the arms ----

inline FlafeConfig to_flafe_config(const ExperimentConfig& cfg, bool use_mask) {
    FlafeConfig fc;
    fc.setting = cfg.setting;
    fc.outer_iters = cfg.outer_iters;
    fc.important_k = cfg.important_k;
    fc.selection = cfg.selection;
    fc.train = cfg.train;
    fc.autofe = cfg.autofe;
    fc.he = cfg.he;
    fc.laplace_b = cfg.laplace_b;
    fc.use_mask = use_mask;
    fc.seed = cfg.seed;
    return fc;
}

inline FederationPlan to_federation_plan(const ExperimentConfig& cfg) {
    FederationPlan plan;
    plan.setting = cfg.setting;
    plan.split = cfg.split;
    plan.clients = cfg.clients;
    plan.row_blocks = cfg.row_blocks;
    plan.col_blocks = cfg.col_blocks;
    plan.horizontal = cfg.partition;
    return plan;
}

struct ArmResult {
    ArmTag tag = ArmTag::Flafe;
    double val_r2 = std::numeric_limits<double>::quiet_NaN();
    double test_r2 = std::numeric_limits<double>::quiet_NaN();
    std::size_t features = 0;  // engineered features in the arm's final model
    double mask_sparsity = std::numeric_limits<double>::quiet_NaN();
    std::size_t messages = 0;
    std::size_t scalars = 0;
    std::size_t trainings = 0;
    std::size_t train_rounds = 0;
    double runtime_seconds = 0;  // never serialized: reports must be reproducible
};

struct ExperimentReport {
    int format_version = 1;
    Setting setting = Setting::Horizontal;
    std::string dataset;
    std::uint64_t seed = 0;
    std::vector<ArmResult> arms;

    const ArmResult* find(ArmTag t) const {
        for (const auto& a : arms)
            if (a.tag == t) return &a;
        return nullptr;
    }
};

inline RunReport run_one_arm(const ExperimentConfig& cfg, ArmTag tag, const FedDataset& fed) {
    switch (tag) {
        case ArmTag::BaselineRawCentral:
            return run_raw_baseline(to_flafe_config(cfg, true), fed);
        case ArmTag::CentralizedAutofe:
            // classic pooled AutoFE: engineer everywhere the data sits, keep
            // the whole union, let the L1 penalty do the selecting
            return run_centralized_pipeline(to_flafe_config(cfg, false), fed);
        case ArmTag::FedWithoutMask:
        case ArmTag::Flafe: {
            FlafeConfig fc = to_flafe_config(cfg, tag == ArmTag::Flafe);
            switch (cfg.setting) {
                case Setting::Horizontal: return run_horizontal_flafe(fc, fed);
                case Setting::Vertical: return run_vertical_flafe(fc, fed);
                case Setting::Hybrid: return run_hybrid_flafe(fc, fed);
            }
            break;
        }
    }
    throw ConfigError("unhandled experiment arm");
}

// Runs every requested arm over one shared split of one dataset.
inline ExperimentReport run_experiment_arms(const ExperimentConfig& cfg) {
    if (cfg.dataset_path.empty()) throw IoError("dataset.path is not set");
    LoadResult loaded = load_csv(cfg.dataset_path, cfg.dataset_target, cfg.dataset_header);
    FedDataset fed = prepare_federated(loaded.data, to_federation_plan(cfg), cfg.seed);

    ExperimentReport report;
    report.setting = cfg.setting;
    report.dataset = cfg.dataset_path;
    report.seed = cfg.seed;
    for (ArmTag tag : cfg.arms) {
        auto t0 = std::chrono::steady_clock::now();
        RunReport run = run_one_arm(cfg, tag, fed);
        auto t1 = std::chrono::steady_clock::now();

        ArmResult arm;
        arm.tag = tag;
        arm.val_r2 = run.val_r2;
        arm.test_r2 = run.test_r2;
        arm.features = run.f_final.size();
        if (!run.iterations.empty()) arm.mask_sparsity = run.iterations.back().best_sparsity;
        arm.messages = run.ledger.total_messages();
        arm.scalars = run.ledger.total_scalars();
        arm.trainings = run.trainings;
        arm.train_rounds = run.train_rounds;
        arm.runtime_seconds = std::chrono::duration<double>(t1 - t0).count();
        report.arms.push_back(arm);
    }
    return report;
}

// ---- report files ----

inline std::string report_to_text(const ExperimentReport& r) {
    using detail::fmt_double;
    std::string out;
    out += "format_version=" + std::to_string(r.format_version) + "\n";
    out += "setting=" + std::string(setting_name(r.setting)) + "\n";
    out += "dataset=" + r.dataset + "\n";
    out += "seed=" + std::to_string(r.seed) + "\n";
    for (const auto& a : r.arms) {
        std::string p = "arm." + std::string(arm_name(a.tag)) + ".";
        out += p + "val_r2=" + fmt_double(a.val_r2) + "\n";
        out += p + "test_r2=" + fmt_double(a.test_r2) + "\n";
        out += p + "features=" + std::to_string(a.features) + "\n";
        out += p + "mask_sparsity=" + fmt_double(a.mask_sparsity) + "\n";
        out += p + "messages=" + std::to_string(a.messages) + "\n";
        out += p + "scalars=" + std::to_string(a.scalars) + "\n";
        out += p + "trainings=" + std::to_string(a.trainings) + "\n";
        out += p + "train_rounds=" + std::to_string(a.train_rounds) + "\n";
    }
    return out;
}

// One row per arm, tab-separated, ready for a bar-plot script.
inline std::string report_scores_table(const ExperimentReport& r) {
    std::string out = "arm\ttest_r2\n";
    for (const auto& a : r.arms)
        out += std::string(arm_name(a.tag)) + "\t" + detail::fmt_double(a.test_r2) + "\n";
    return out;
}

inline ExperimentReport report_from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::vector<std::string> arm_order;  // first-seen arm prefixes
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::string t = detail::trim(line);
        if (t.empty()) continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) throw SchemaError("malformed report line: " + t);
        std::string key = t.substr(0, eq);
        kv[key] = t.substr(eq + 1);
        if (key.rfind("arm.", 0) == 0) {
            std::size_t dot = key.find('.', 4);
            if (dot != std::string::npos) {
                std::string name = key.substr(4, dot - 4);
                bool seen = false;
                for (const auto& n : arm_order) seen = seen || n == name;
                if (!seen) arm_order.push_back(name);
            }
        }
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw SchemaError("report is missing key '" + key + "'");
        return it->second;
    };

    ExperimentReport r;
    long long ll = 0;
    if (!detail::parse_ll(need("format_version"), ll) || ll != 1)
        throw SchemaError("unsupported report format_version");
    r.format_version = int(ll);
    const std::string& s = need("setting");
    if (s == "horizontal") r.setting = Setting::Horizontal;
    else if (s == "vertical") r.setting = Setting::Vertical;
    else if (s == "hybrid") r.setting = Setting::Hybrid;
    else throw SchemaError("unknown setting in report: " + s);
    r.dataset = need("dataset");
    if (!detail::parse_ll(need("seed"), ll) || ll < 0) throw SchemaError("bad seed in report");
    r.seed = std::uint64_t(ll);

    for (const std::string& name : arm_order) {
        ArmResult a;
        if (!parse_arm(name, a.tag)) throw SchemaError("unknown arm in report: " + name);
        std::string p = "arm." + name + ".";
        auto f64 = [&](const std::string& key, double& slot) {
            std::string v = need(p + key);
            if (v == "nan" || v == "-nan") {
                slot = std::numeric_limits<double>::quiet_NaN();
                return;
            }
            if (!detail::parse_f64(v, slot)) throw SchemaError("bad number in report: " + p + key);
        };
        auto u64 = [&](const std::string& key, std::size_t& slot) {
            long long n = 0;
            if (!detail::parse_ll(need(p + key), n) || n < 0)
                throw SchemaError("bad count in report: " + p + key);
            slot = std::size_t(n);
        };
        f64("val_r2", a.val_r2);
        f64("test_r2", a.test_r2);
        u64("features", a.features);
        f64("mask_sparsity", a.mask_sparsity);
        u64("messages", a.messages);
        u64("scalars", a.scalars);
        u64("trainings", a.trainings);
        u64("train_rounds", a.train_rounds);
        r.arms.push_back(a);
    }
    return r;
}

// ---- human-facing summaries ----

inline std::string report_summary_text(const ExperimentReport& r) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof buf, "setting: %s   dataset: %s   seed: %llu\n",
                  setting_name(r.setting), r.dataset.c_str(),
                  static_cast<unsigned long long>(r.seed));
    out += buf;
    std::snprintf(buf, sizeof buf, "%-22s %9s %9s %9s %10s %12s\n", "arm", "test_r2", "val_r2",
                  "features", "messages", "scalars");
    out += buf;
    for (const auto& a : r.arms) {
        std::snprintf(buf, sizeof buf, "%-22s %9.4f %9.4f %9zu %10zu %12zu\n", arm_name(a.tag),
                      a.test_r2, a.val_r2, a.features, a.messages, a.scalars);
        out += buf;
    }
    if (const ArmResult* fl = r.find(ArmTag::Flafe)) {
        std::snprintf(buf, sizeof buf, "best mask sparsity: %.4f\n", fl->mask_sparsity);
        out += buf;
        std::snprintf(buf, sizeof buf, "final feature count: %zu\n", fl->features);
        out += buf;
    }
    out += "\n";
    out += report_scores_table(r);
    return out;
}

inline std::string report_diff_text(const ExperimentReport& a, const ExperimentReport& b) {
    char buf[120];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-22s %10s %10s %10s\n", "arm", "test_r2_a", "test_r2_b",
                  "delta");
    out += buf;
    for (const auto& arm : a.arms) {
        const ArmResult* other = b.find(arm.tag);
        if (!other) continue;
        std::snprintf(buf, sizeof buf, "%-22s %10.4f %10.4f %+10.4f\n", arm_name(arm.tag),
                      arm.test_r2, other->test_r2, other->test_r2 - arm.test_r2);
        out += buf;
    }
    return out;
}

// ---- small file helpers ----

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + path);
    out << text;
    if (!out) throw IoError("short write to file: " + path);
}

}  // namespace flafe
