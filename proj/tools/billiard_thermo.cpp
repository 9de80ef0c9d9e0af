#include <cstdio>
#include <filesystem>

#include "CLI11.hpp"
#include "billiard/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"billiard-thermo: thermodynamic-formalism experiments for dispersing "
                 "billiards on the torus"};
    app.require_subcommand(1);

    std::string config_path;
    std::string suite;
    std::string out_dir;
    int threads = 0;
    std::uint64_t seed = 0;
    bool seed_given = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
        cmd->add_option("--suite", suite, "geometry|complexity|spectrum|statistics|all");
        cmd->add_option("--threads", threads, "cap on worker threads (0 = default)");
        cmd->add_option("--seed", seed, "override the config seed")
            ->each([&](const std::string&) { seed_given = true; });
        cmd->add_option("--out", out_dir, "output directory override");
    };

    CLI::App* run = app.add_subcommand("run", "run the configured suites");
    add_common(run);
    CLI::App* validate = app.add_subcommand("validate", "table validation only");
    add_common(validate);
    CLI::App* clean = app.add_subcommand("clean", "drop cached artifacts");
    clean->add_option("--config", config_path, "experiment config (JSON)")->required();
    clean->add_option("--out", out_dir, "output directory override");

    CLI11_PARSE(app, argc, argv);

    billiard::ExperimentConfig cfg;
    try {
        cfg = billiard::ExperimentConfig::from_file(config_path);
        if (!suite.empty()) cfg.suites = {suite};
        if (threads > 0) cfg.threads = threads;
        if (seed_given) cfg.seed = seed;
        if (!out_dir.empty()) cfg.output_dir = out_dir;
    } catch (const billiard::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    }

    try {
        if (clean->parsed()) {
            std::filesystem::remove_all(std::filesystem::path(cfg.output_dir) / "cache");
            std::printf("cache cleared under %s\n", cfg.output_dir.c_str());
            return 0;
        }
        if (validate->parsed()) cfg.suites = {"geometry"};
        billiard::RunResult res = billiard::run_experiment(cfg);
        for (const auto& a : res.artifacts) std::printf("wrote %s/%s\n", cfg.output_dir.c_str(), a.c_str());
        for (const auto& f : res.failures) std::fprintf(stderr, "FAIL: %s\n", f.c_str());
        return res.exit_code;
    } catch (const billiard::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 3;
    }
}
