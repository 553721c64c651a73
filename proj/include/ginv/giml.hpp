#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ginv/flsim.hpp"
#include "ginv/invert.hpp"

namespace ginv {

struct MetaConfig {
    std::int64_t task_batch = 8;   // N tasks sampled per outer step
    std::int64_t local_iters = 5;  // tau gradient-descent steps on w'
    double z_lambda = 1e-3;        // latent-code regularizer coefficient
    double alpha = 1e-3;           // local step size
    double beta = 0.5;             // interpolation step toward w'
    std::int64_t outer_steps = 300;
    std::int64_t latent_iters = 300;
    double eta_z = 3e-2;
    Discrepancy discrepancy = Discrepancy::NegCosine;
    double lambda_tv = 1e-4;
    double lambda_bn = 0.0;
    double divergence_threshold = 1e6;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 0; // 0: outer_steps / 10
    std::int64_t probe_count = 8;

    void validate() const;
};

struct LatentSearch {
    std::vector<Tensor> codes;
    double final_cost = 0.0; // regularized
    bool diverged = false;
};

// Latent-space search of one task under the current generator weights with an
// unsquared L2 penalty on the codes (subgradient 0 at the origin).
LatentSearch regularized_latent_search(const InversionTask& task, const GeneratorModel& gen,
                                       double lambda, std::int64_t iterations, const MetaConfig& cfg,
                                       std::uint64_t seed);

struct MetaStep {
    double cost_before = 0.0;
    double cost_after = 0.0;
    bool ok = true;
};

// tau plain gradient-descent steps on the summed cost of the sampled tasks,
// with the latent codes frozen. Updates `gen` in place.
MetaStep meta_param_step(GeneratorModel& gen, std::span<const InversionTask> tasks,
                         std::span<const std::vector<Tensor>> frozen_codes, double alpha,
                         std::int64_t tau, const MetaConfig& cfg);

// w <- (1 - beta) w + beta w', exact interpolation (beta = 1 returns w'
// bitwise). Total for any beta; the config restricts to (0, 1].
void reptile_update(GeneratorModel& w, const GeneratorModel& w_prime, double beta);

struct GimlLogRow {
    std::int64_t step = 0;
    double summed_cost = 0.0;
    double mean_z_norm = 0.0;
    double eval_psnr = 0.0;
    bool eval_done = false;
    bool skipped = false;
};

struct GimlResult {
    GeneratorModel generator;
    std::vector<GimlLogRow> log;
    std::vector<std::int64_t> checkpoint_steps;
    std::vector<std::vector<Tensor>> probe_samples; // per checkpoint, probe_count images
};

// Optional periodic evaluation hook (e.g. held-out PSNR); called at checkpoints.
using GimlEvalHook = std::function<double(const GeneratorModel&, std::int64_t step)>;

// Trains a generator from the gradient-inversion task set: per outer step,
// sample N tasks, run the regularized latent search per task, take tau local
// parameter steps on the summed cost, then interpolate the meta weights.
GimlResult giml(const TaskSet& tasks, const MetaConfig& cfg, GeneratorModel init,
                const GimlEvalHook& eval_hook = nullptr);

// Training-log CSV: (outer_step, summed_cost, mean_z_norm, eval_psnr).
void write_giml_log(const GimlResult& result, const std::string& path);

// Tiles the checkpoint probe samples into one graymap per checkpoint.
void write_probe_grids(const GimlResult& result, const std::string& dir);

} // namespace ginv
