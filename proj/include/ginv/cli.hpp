#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ginv/flsim.hpp"
#include "ginv/giml.hpp"
#include "ginv/invert.hpp"

namespace ginv {

// Declarative experiment description, parsed from a JSON config file. Every
// default is materialized so the persisted resolved copy is complete.
struct ExperimentConfig {
    std::string command; // invert | giml | rgap | sweep | multigrad

    std::string out_dir;
    std::int64_t jobs = 0; // 0: all hardware threads
    std::vector<std::uint64_t> seeds{0};

    // dataset recipe
    std::string dataset_family = "two-cluster";
    std::int64_t dataset_count = 64;
    std::uint64_t dataset_seed = 1;

    // learning model
    std::string model_preset = "mlp3";
    std::uint64_t model_seed = 1;

    // generator source
    std::string generator_source = "preset-untrained"; // preset-untrained | file | giml-output
    std::string generator_preset = "dec16";
    std::string generator_path;
    std::uint64_t generator_seed = 1;

    InversionConfig inversion;
    MetaConfig meta;
    DefenseConfig defense;
    bool attach_bn = false;

    // giml simulation shape
    std::int64_t giml_nodes = 200;
    std::int64_t giml_rounds = 4;

    // sweep grids; each non-empty list contributes points varying that one
    // dimension with the other defense fields at their configured values
    std::vector<double> sweep_sparsity;
    std::vector<double> sweep_noise;
    std::vector<std::int64_t> sweep_batch;

    // multigrad
    std::int64_t multigrad_rounds = 4;
    std::string multigrad_theta = "reinit"; // reinit | trained
    double multigrad_lr = 0.1;

    // rgap
    std::vector<std::int64_t> rgap_widths{256, 128, 64, 10};
    std::vector<std::int64_t> rgap_replace_layers;
    bool rgap_generative_enabled = false;

    static ExperimentConfig from_json_file(const std::string& path);
    static ExperimentConfig from_json_text(const std::string& text);

    // Collects every violated field; empty means valid.
    std::vector<std::string> validation_errors() const;
    std::string resolved_json() const;
    std::uint64_t fingerprint() const; // hash of (resolved config, code version)
};

struct RunOutcome {
    int exit_code = 0;
    std::string run_dir;
    std::vector<std::string> errors;
};

// Executes the configured command, writing resolved-config.json, run.json,
// summary.csv and all per-seed artifacts under the run directory.
RunOutcome run_experiment(ExperimentConfig cfg);

// Consolidates the aggregate rows of several completed runs into one table
// (rows = methods); refuses to mix runs over different datasets.
void compare_runs(const std::vector<std::string>& run_dirs, const std::string& out_csv);

} // namespace ginv
