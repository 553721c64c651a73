#pragma once

#include <span>
#include <string>
#include <vector>

#include "ginv/invert.hpp"
#include "ginv/tensor.hpp"

namespace ginv {

// 10*log10(1/MSE) on unit peak; exact matches (and anything above) cap at 100 dB.
double psnr(const Tensor& estimate, const Tensor& truth);

// Mean local SSIM over 8x8 windows (stride 1), C1 = 0.01^2, C2 = 0.03^2 on
// unit dynamic range, channels averaged.
double ssim(const Tensor& estimate, const Tensor& truth);

struct MetricsRecord {
    std::vector<double> psnrs;
    std::vector<double> ssims;
    double psnr_mean = 0.0, psnr_best = 0.0;
    double ssim_mean = 0.0, ssim_best = 0.0;
    double final_cost = 0.0;
    std::string config_fingerprint;
    std::uint64_t seed = 0;
};

MetricsRecord aggregate(std::span<const double> psnrs, std::span<const double> ssims);

MetricsRecord score_batch(std::span<const Tensor> estimate, std::span<const Tensor> truth);

// Binary PGM (P5) for single-channel images, PPM (P6) for 3-channel; maxval
// 255, rounding half-up from [0,1].
void write_image(const Tensor& image_hwc, const std::string& path);
Tensor read_image(const std::string& path);

// Writes metrics.csv (one row per image plus an aggregate row), curve.csv
// (restart, iteration, phase, cost) and per-image est_/truth_ image pairs.
void write_outputs(const MetricsRecord& record, std::span<const Tensor> estimate,
                   std::span<const Tensor> truth, std::span<const CurvePoint> curve,
                   const std::string& dir);

} // namespace ginv
