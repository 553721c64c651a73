#include "ginv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace ginv {

namespace fs = std::filesystem;

double psnr(const Tensor& estimate, const Tensor& truth) {
    check(estimate.shape == truth.shape, "psnr: shape mismatch ", shape_str(estimate.shape), " vs ",
          shape_str(truth.shape));
    double mse = 0.0;
    for (std::int64_t i = 0; i < estimate.numel(); ++i) {
        const double d = estimate[i] - truth[i];
        mse += d * d;
    }
    mse /= static_cast<double>(estimate.numel());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& estimate, const Tensor& truth) {
    check(estimate.shape == truth.shape, "ssim: shape mismatch ", shape_str(estimate.shape), " vs ",
          shape_str(truth.shape));
    check(estimate.rank() == 3, "ssim: image must be HxWxC, got ", shape_str(estimate.shape));
    const std::int64_t H = estimate.shape[0], W = estimate.shape[1], C = estimate.shape[2];
    constexpr std::int64_t win = 8;
    check(H >= win && W >= win, "ssim: image ", shape_str(estimate.shape), " smaller than the ", win,
          "x", win, " window");
    constexpr double C1 = 0.01 * 0.01;
    constexpr double C2 = 0.03 * 0.03;
    const double n = static_cast<double>(win * win);

    double total = 0.0;
    std::int64_t windows = 0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t oh = 0; oh + win <= H; ++oh)
            for (std::int64_t ow = 0; ow + win <= W; ++ow) {
                double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
                for (std::int64_t i = 0; i < win; ++i)
                    for (std::int64_t j = 0; j < win; ++j) {
                        const double x = estimate[((oh + i) * W + (ow + j)) * C + c];
                        const double y = truth[((oh + i) * W + (ow + j)) * C + c];
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                    }
                const double mx = sx / n, my = sy / n;
                const double vx = sxx / n - mx * mx;
                const double vy = syy / n - my * my;
                const double cov = sxy / n - mx * my;
                total += ((2 * mx * my + C1) * (2 * cov + C2)) /
                         ((mx * mx + my * my + C1) * (vx + vy + C2));
                ++windows;
            }
    return total / static_cast<double>(windows);
}

MetricsRecord aggregate(std::span<const double> psnrs, std::span<const double> ssims) {
    check(!psnrs.empty() && psnrs.size() == ssims.size(), "aggregate: empty or mismatched metrics");
    MetricsRecord r;
    r.psnrs.assign(psnrs.begin(), psnrs.end());
    r.ssims.assign(ssims.begin(), ssims.end());
    r.psnr_best = r.psnr_mean = 0.0;
    r.psnr_best = *std::max_element(psnrs.begin(), psnrs.end());
    r.ssim_best = *std::max_element(ssims.begin(), ssims.end());
    for (double v : psnrs) r.psnr_mean += v;
    for (double v : ssims) r.ssim_mean += v;
    r.psnr_mean /= static_cast<double>(psnrs.size());
    r.ssim_mean /= static_cast<double>(ssims.size());
    return r;
}

MetricsRecord score_batch(std::span<const Tensor> estimate, std::span<const Tensor> truth) {
    check(estimate.size() == truth.size() && !estimate.empty(), "score_batch: batch mismatch");
    std::vector<double> ps, ss;
    for (std::size_t j = 0; j < estimate.size(); ++j) {
        ps.push_back(psnr(estimate[j], truth[j]));
        ss.push_back(ssim(estimate[j], truth[j]));
    }
    return aggregate(ps, ss);
}

void write_image(const Tensor& image_hwc, const std::string& path) {
    check(image_hwc.rank() == 3, "write_image: image must be HxWxC");
    const std::int64_t H = image_hwc.shape[0], W = image_hwc.shape[1], C = image_hwc.shape[2];
    check(C == 1 || C == 3, "write_image: ", C, " channels unsupported (1 or 3)");
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "cannot open '", path, "' for writing");
    os << (C == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
    for (std::int64_t i = 0; i < image_hwc.numel(); ++i) {
        const double v = std::clamp(image_hwc[i], 0.0, 1.0);
        const auto byte = static_cast<unsigned char>(std::min(255.0, std::floor(v * 255.0 + 0.5)));
        os.write(reinterpret_cast<const char*>(&byte), 1);
    }
    check(os.good(), "write failed for '", path, "'");
}

Tensor read_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "cannot open '", path, "'");
    std::string magic;
    std::int64_t w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    check(magic == "P5" || magic == "P6", "'", path, "': not a binary PGM/PPM file");
    check(maxval == 255, "'", path, "': unsupported maxval ", maxval);
    is.get(); // single whitespace after header
    const std::int64_t C = magic == "P5" ? 1 : 3;
    Tensor img = Tensor::zeros({h, w, C});
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        unsigned char byte = 0;
        is.read(reinterpret_cast<char*>(&byte), 1);
        img[i] = static_cast<double>(byte) / 255.0;
    }
    check(is.good(), "'", path, "': truncated image");
    return img;
}

void write_outputs(const MetricsRecord& record, std::span<const Tensor> estimate,
                   std::span<const Tensor> truth, std::span<const CurvePoint> curve,
                   const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    check(!ec, "cannot create output directory '", dir, "'");

    {
        std::ofstream os((fs::path(dir) / "metrics.csv").string());
        check(os.good(), "cannot write metrics.csv in '", dir, "'");
        os << "image,psnr_db,ssim,psnr_best_db,ssim_best\n";
        for (std::size_t j = 0; j < record.psnrs.size(); ++j)
            os << j << "," << fmt_g(record.psnrs[j]) << "," << fmt_g(record.ssims[j]) << ",,\n";
        os << "batch," << fmt_g(record.psnr_mean) << "," << fmt_g(record.ssim_mean) << ","
           << fmt_g(record.psnr_best) << "," << fmt_g(record.ssim_best) << "\n";
        check(os.good(), "write failed for metrics.csv in '", dir, "'");
    }
    {
        std::ofstream os((fs::path(dir) / "curve.csv").string());
        check(os.good(), "cannot write curve.csv in '", dir, "'");
        os << "restart,iteration,phase,cost\n";
        for (const auto& p : curve)
            os << p.restart << "," << p.iteration << "," << p.phase << "," << fmt_g(p.cost) << "\n";
        check(os.good(), "write failed for curve.csv in '", dir, "'");
    }
    for (std::size_t j = 0; j < estimate.size(); ++j) {
        const char* ext = estimate[j].shape[2] == 3 ? ".ppm" : ".pgm";
        write_image(estimate[j], (fs::path(dir) / format_msg("est_", j, ext)).string());
        if (j < truth.size())
            write_image(truth[j], (fs::path(dir) / format_msg("truth_", j, ext)).string());
    }
}

} // namespace ginv
