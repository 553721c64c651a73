#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ginv/model.hpp"

namespace ginv {

enum class SearchMode : std::uint8_t { X, Z, W, ZX, ZW };
enum class Discrepancy : std::uint8_t { L2, NegCosine };

const char* search_mode_name(SearchMode m);
SearchMode search_mode_from(const std::string& s);
const char* discrepancy_name(Discrepancy d);
Discrepancy discrepancy_from(const std::string& s);

struct InversionConfig {
    SearchMode mode = SearchMode::ZW;
    Discrepancy discrepancy = Discrepancy::NegCosine;
    std::int64_t iters_phase1 = 300; // latent-space phase
    std::int64_t iters_phase2 = 300; // second phase; single-space modes run phase1+phase2 iterations
    double eta_z = 3e-2;
    double eta_w = 1e-3;
    double eta_x = 1e-1;
    double lambda_tv = 1e-4;
    double lambda_bn = 1e-3; // used only when the task carries BN statistics
    std::int64_t restarts = 4;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double divergence_threshold = 1e6;

    std::int64_t total_iters() const { return iters_phase1 + iters_phase2; }
    void validate() const;
};

// One gradient-inversion problem: a parameter snapshot, the observed gradient,
// and the true labels. Ground truth, when present, is for evaluation only and
// is never read by the optimizer.
struct InversionTask {
    ClassifierModel model;
    GradientReport target;
    std::vector<std::int64_t> labels;
    std::optional<BNStats> bn;
    std::vector<Tensor> truth;

    static InversionTask from_report(ClassifierModel model, GradientReport report,
                                     std::vector<Tensor> truth = {});
    std::int64_t batch_size() const { return static_cast<std::int64_t>(labels.size()); }
};

struct CurvePoint {
    std::int64_t restart = 0;
    std::int64_t iteration = 0;
    int phase = 1;
    double cost = 0.0;
};

struct BatchEstimate {
    std::vector<Tensor> images;                 // clamped to [0,1], shaped like the input
    std::vector<Tensor> latents;                // present for latent-space modes
    std::vector<std::vector<Tensor>> adapted_w; // per instance, present for w modes
    double final_cost = 0.0;
    std::vector<CurvePoint> curve;              // all restarts; chosen one ends the stream
    std::int64_t chosen_restart = 0;
    std::int64_t diverged_restarts = 0;

    // (iteration -> cost) trace of the chosen restart
    std::vector<CurvePoint> chosen_curve() const;
};

// --- Cost pieces ------------------------------------------------------------

// Discrepancy over the concatenation of all per-parameter gradients.
double discrepancy(std::span<const Tensor> g_a, std::span<const Tensor> g_b, Discrepancy kind);

// Sum over unordered 4-adjacent pixel pairs of squared channel differences.
double tv_regularizer(const Tensor& image_hwc);

double bn_regularizer(const ClassifierModel& model, std::span<const Tensor> batch, const BNStats& target);

// --- Cost programs -----------------------------------------------------------

enum class Phase : std::uint8_t { InputSpace, LatentShared, PerInstanceW };

// A built cost graph for one optimization phase. `opt` are the optimized
// leaves; `fixed` are non-optimized leaves bound per run (frozen latent codes);
// theta leaves are bound from the task models.
struct CostProgram {
    Graph g;
    std::vector<const ClassifierModel*> models;
    std::vector<std::vector<Expr>> theta_sets;
    std::vector<Expr> opt;
    std::vector<Expr> fixed;
    Expr cost;
    std::vector<Expr> grads;
    std::vector<Expr> images;  // candidate images, one per batch element
    std::vector<Expr> latents; // z expressions when a generator is involved

    void bind_models(Evaluator& ev) const;
};

CostProgram build_cost_program(std::span<const InversionTask> tasks, const InversionConfig& cfg,
                               const GeneratorModel* gen, Phase phase, double z_reg_lambda = 0.0);

// Expression for the discrepancy between gradient expressions and a fixed
// target (used by the cost builder and by the meta-learning step).
Expr build_discrepancy(Graph& g, std::span<const Expr> ghat, std::span<const Tensor> gtar,
                       Discrepancy kind);
Expr build_tv(Graph& g, Expr image_hwc);

// --- Attacks -----------------------------------------------------------------

// Runs the configured search phases with `restarts` independent seeds and
// returns the estimate with the smallest final cost.
BatchEstimate invert(const InversionTask& task, const InversionConfig& cfg,
                     const GeneratorModel* gen = nullptr);

// Shared-input inversion of several gradients of the same batch observed at
// different parameter snapshots (input-space search on the summed cost).
BatchEstimate invert_multi(std::span<const InversionTask> tasks, const InversionConfig& cfg);

} // namespace ginv
