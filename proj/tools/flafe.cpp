// Command-line front end: run experiment arms, validate configs, summarize
// and diff report files. Exit codes: 0 ok, 2 config error, 3 data error,
// 4 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <flafe/experiment.hpp>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

int classify(const flafe::Error& e) {
    using namespace flafe;
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParamError*>(&e))
        return kExitConfig;
    if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const SchemaError*>(&e) ||
        dynamic_cast<const InsufficientData*>(&e) || dynamic_cast<const DegenerateTarget*>(&e) ||
        dynamic_cast<const PartitionError*>(&e))
        return kExitData;
    return kExitRuntime;
}

std::string join(const std::vector<std::string>& items, const char* sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

int cmd_run(const std::string& config_path,
            const std::vector<std::pair<std::string, std::string>>& overrides) {
    std::string text;
    try {
        text = flafe::read_text_file(config_path);
    } catch (const flafe::Error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    }
    flafe::ParsedConfig pc = flafe::parse_experiment_config(text, overrides);
    if (!pc.ok()) {
        std::fprintf(stderr, "config error: %s\n", join(pc.errors, "; ").c_str());
        return kExitConfig;
    }
    try {
        flafe::ExperimentReport report = flafe::run_experiment_arms(pc.config);
        std::filesystem::create_directories(pc.config.out_dir);
        std::string report_path = pc.config.out_dir + "/report.txt";
        std::string scores_path = pc.config.out_dir + "/scores.tsv";
        flafe::write_text_file(report_path, flafe::report_to_text(report));
        flafe::write_text_file(scores_path, flafe::report_scores_table(report));
        std::fputs(flafe::report_summary_text(report).c_str(), stdout);
        for (const auto& arm : report.arms)
            std::printf("%s ran in %.2fs\n", flafe::arm_name(arm.tag), arm.runtime_seconds);
        std::printf("wrote %s and %s\n", report_path.c_str(), scores_path.c_str());
        return 0;
    } catch (const flafe::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return classify(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
}

int cmd_validate(const std::string& config_path) {
    std::string text;
    try {
        text = flafe::read_text_file(config_path);
    } catch (const flafe::Error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    }
    flafe::ParsedConfig pc = flafe::parse_experiment_config(text);
    if (!pc.ok()) {
        for (const auto& err : pc.errors) std::fprintf(stderr, "config error: %s\n", err.c_str());
        return kExitConfig;
    }
    std::fputs(flafe::normalized_config_text(pc.config).c_str(), stdout);
    return 0;
}

int cmd_report(const std::string& path, const std::string& diff_path) {
    try {
        flafe::ExperimentReport a = flafe::report_from_text(flafe::read_text_file(path));
        if (diff_path.empty()) {
            std::fputs(flafe::report_summary_text(a).c_str(), stdout);
        } else {
            flafe::ExperimentReport b =
                flafe::report_from_text(flafe::read_text_file(diff_path));
            std::fputs(flafe::report_diff_text(a, b).c_str(), stdout);
        }
        return 0;
    } catch (const flafe::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated automated feature engineering experiment runner"};
    app.require_subcommand(1);

    std::string config_path, out_dir, backend, arms, report_path, diff_path;
    long long seed = 0;

    CLI::App* run = app.add_subcommand("run", "execute experiment arms from a config file");
    run->add_option("--config", config_path, "config file path")->required();
    run->add_option("--seed", seed, "override the master seed");
    run->add_option("--arms", arms, "comma list of arms to run");
    run->add_option("--backend", backend, "override the encryption backend")
        ->check(CLI::IsMember({"transparent", "bfv"}));
    run->add_option("--out", out_dir, "directory for report.txt and scores.tsv");

    CLI::App* validate =
        app.add_subcommand("validate", "check a config and echo its normalized form");
    validate->add_option("--config", config_path, "config file path")->required();

    CLI::App* report = app.add_subcommand("report", "summarize a report file");
    report->add_option("path", report_path, "report file")->required();
    report->add_option("--diff", diff_path, "second report: print per-arm score deltas");

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        std::vector<std::pair<std::string, std::string>> overrides;
        if (run->count("--seed")) overrides.push_back({"seed", std::to_string(seed)});
        if (!arms.empty()) overrides.push_back({"arms", arms});
        if (!backend.empty()) overrides.push_back({"he.backend", backend});
        if (!out_dir.empty()) overrides.push_back({"out.dir", out_dir});
        return cmd_run(config_path, overrides);
    }
    if (validate->parsed()) return cmd_validate(config_path);
    if (report->parsed()) return cmd_report(report_path, diff_path);
    return 0;
}
