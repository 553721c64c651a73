#pragma once

#include <string>
#include <vector>

#include "ginv/invert.hpp"
#include "ginv/model.hpp"

namespace ginv {

// Recursive analytic attack for dense single-sample networks: reconstructs the
// output of each layer from the top down by solving per-layer linear systems.
//
// The system solved at layer r has the layer input u = a_{r-1} as its unknown.
// Rows come from two sources:
//   * gradient rows: the rank-1 structure grad_Theta_r[i,:] = delta_r[i] * u^T
//     contributes the block delta_r[i] * I for every i with |delta_r[i]| above
//     threshold;
//   * weight rows (when the reconstructed pre-activation of layer r is known
//     from the recursion above): Theta_r u = preact_r - bias_r.
// At the top layer the pre-activation (the logits) is unobserved, so only
// gradient rows exist there. delta_r is read off the final bias gradient and
// backpropagated through reconstructed layers below.

struct LayerSystem {
    std::vector<double> A; // row-major, rows x cols
    std::vector<double> b;
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::int64_t layer = 0;
    std::int64_t gradient_rows = 0; // rows contributed by the rank-1 structure
    std::int64_t rank = -1;         // filled by solve_pinv
    double residual = -1.0;         // filled by solve_pinv
};

inline constexpr double kDeltaThreshold = 1e-12;

LayerSystem build_layer_system(const ClassifierModel& model, std::size_t layer_r,
                               const Tensor& delta_r, const Tensor& grad_r,
                               const Tensor* preact_r = nullptr);

// Minimum-norm least-squares solution via SVD; singular values below
// 1e-10 * sigma_max are truncated. Records rank and residual in the system.
Tensor solve_pinv(LayerSystem& sys);

struct RgapResult {
    Tensor input;                       // reconstructed input (flat m)
    std::vector<Tensor> layer_inputs;   // solution of each layer system, top-down
    std::vector<std::int64_t> layers;   // layer index of each solved system
    std::vector<double> residuals;      // ||A x - b|| per system
    std::vector<double> recon_errors;   // L2 error vs truth per system (when truth given)
    std::vector<std::string> warnings;  // activation inversions clamped into domain
};

RgapResult rgap_recursive(const ClassifierModel& model, const GradientReport& report,
                          const Tensor* truth = nullptr);

struct RgapGenConfig {
    std::vector<std::size_t> replace_layers; // systems solved by latent search instead of pinv
    bool optimize_w = false;
    std::int64_t iterations = 400;
    double lr = 3e-2;
    std::uint64_t seed = 0;
};

// Replaces selected under-determined layer systems with a search over the
// decoder's latent space: min over z of ||A_r f_{theta,<r}(G(z)) - b_r||.
RgapResult rgap_generative(const ClassifierModel& model, const GradientReport& report,
                           const GeneratorModel& gen, const RgapGenConfig& cfg,
                           const Tensor* truth = nullptr);

// CSV export of the layerwise error curves: (layer, residual, recon_error).
void write_rgap_curve(const RgapResult& res, const std::string& path);

} // namespace ginv
