// Experiment runner: executes a declarative config (invert | giml | rgap |
// sweep | multigrad) or consolidates finished runs with `compare`.
#include <cstdio>

#include <CLI11.hpp>

#include "ginv/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"gradient inversion laboratory"};
    app.require_subcommand(0, 1);

    std::string config_path;
    std::string out_dir;
    std::int64_t jobs = -1;
    std::int64_t seed_override = -1;
    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--out", out_dir, "output directory (overrides the config)");
    app.add_option("--jobs", jobs, "parallel worker bound");
    app.add_option("--seed", seed_override, "replace the config's seed list with one seed");

    auto* cmp = app.add_subcommand("compare", "consolidate finished run directories");
    std::vector<std::string> dirs;
    std::string cmp_out = "compare.csv";
    cmp->add_option("dirs", dirs, "run directories")->expected(-1);
    cmp->add_option("--out", cmp_out, "output CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmp->parsed()) {
            ginv::compare_runs(dirs, cmp_out);
            std::printf("wrote %s\n", cmp_out.c_str());
            return 0;
        }
        if (config_path.empty()) {
            std::fprintf(stderr, "error: --config required (or use the compare subcommand)\n");
            return 2;
        }
        ginv::ExperimentConfig cfg = ginv::ExperimentConfig::from_json_file(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (jobs >= 0) cfg.jobs = jobs;
        if (seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
        ginv::RunOutcome outcome = ginv::run_experiment(std::move(cfg));
        for (const auto& e : outcome.errors) std::fprintf(stderr, "error: %s\n", e.c_str());
        if (outcome.exit_code == 0) std::printf("run complete: %s\n", outcome.run_dir.c_str());
        return outcome.exit_code;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
