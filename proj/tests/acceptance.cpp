// Acceptance suite: one pass/fail line per criterion, nonzero exit on failure.
// Run all criteria (default) or a subset: ./acceptance 4 7
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "ginv/cli.hpp"
#include "ginv/flsim.hpp"
#include "ginv/giml.hpp"
#include "ginv/metrics.hpp"
#include "ginv/parallel.hpp"
#include "ginv/rgap.hpp"
#include "ginv/rng.hpp"

using namespace ginv;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

// ---------------------------------------------------------------------------
// shared fixtures

ClassifierModel dense_chain(const std::vector<std::int64_t>& widths, std::uint64_t seed,
                            double weight_scale = 1.0) {
    Rng rng(seed);
    ClassifierModel m;
    m.id = format_msg("chain-", seed);
    m.input_dim = widths.front();
    m.input_shape = {16, 16, 1};
    m.label_count = widths.back();
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const bool last = i + 2 == widths.size();
        Layer l = make_dense_layer(widths[i], widths[i + 1],
                                   last ? Activation::None : Activation::Sigmoid, rng);
        for (auto& v : l.weights.data) v *= weight_scale;
        m.layers.push_back(std::move(l));
    }
    m.validate();
    return m;
}

// the desk-scale benchmark: a cnn4 observer on noisy two-cluster data
struct Bench {
    SyntheticDataset data;
    ClassifierModel model;
    std::vector<InversionTask> tasks;
    std::vector<std::vector<Tensor>> truth;
};

Bench make_bench(std::int64_t B, int n_tasks, bool attach_bn) {
    Bench b{make_dataset("two-cluster", 64, 7, 0.05), make_classifier_preset("cnn4", 11), {}, {}};
    for (int s = 0; s < n_tasks; ++s) {
        Rng rng(derive_seed(1000, static_cast<std::uint64_t>(s)));
        std::vector<Tensor> batch;
        std::vector<std::int64_t> labels;
        for (std::int64_t j = 0; j < B; ++j) {
            const auto pick = rng.below(b.data.count);
            batch.push_back(b.data.images[static_cast<std::size_t>(pick)]);
            labels.push_back(b.data.labels[static_cast<std::size_t>(pick)]);
        }
        auto rep = batch_gradient(b.model, batch, labels, attach_bn);
        b.tasks.push_back(InversionTask::from_report(b.model, std::move(rep)));
        b.truth.push_back(batch);
    }
    return b;
}

// pretrained prior: decoder fitted to the data distribution
const GeneratorModel& matched_generator() {
    static GeneratorModel gen = [] {
        SyntheticDataset train = make_dataset("two-cluster", 48, 99, 0.05);
        FitConfig fc;
        fc.iterations = 800;
        fc.seed = 1;
        return fit_generator_to_images(make_generator_preset("dec16", 5), train.images, fc);
    }();
    return gen;
}

double mean_psnr(const Bench& b, SearchMode mode, const GeneratorModel* gen, std::int64_t it1,
                 std::int64_t it2, std::int64_t restarts, double lambda_bn) {
    double total = 0.0;
#pragma omp parallel for schedule(dynamic) reduction(+ : total)
    for (int t = 0; t < static_cast<int>(b.tasks.size()); ++t) {
        InversionConfig cfg;
        cfg.mode = mode;
        cfg.iters_phase1 = it1;
        cfg.iters_phase2 = it2;
        cfg.restarts = restarts;
        cfg.seed = static_cast<std::uint64_t>(100 + t);
        cfg.lambda_bn = lambda_bn;
        BatchEstimate est = invert(b.tasks[static_cast<std::size_t>(t)], cfg, gen);
        total += score_batch(est.images, b.truth[static_cast<std::size_t>(t)]).psnr_mean;
    }
    return total / static_cast<double>(b.tasks.size());
}

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-2});
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) return "<missing:" + path + ">";
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// criterion 1: derivative correctness

Outcome criterion1() {
    double worst_ops = 0.0;
    Rng rng(101);
    for (int it = 0; it < 50; ++it) {
        auto gradcheck = [&](Graph& g, Expr x, Expr y, const Tensor& at) {
            Expr grad = g.derive1(y, x);
            Evaluator ev(g);
            ev.bind(x, at);
            Tensor analytic = ev.eval(grad);
            Tensor numeric = finite_diff(
                [&](const Tensor& p) {
                    Evaluator e2(g);
                    e2.bind(x, p);
                    return e2.eval_scalar(y);
                },
                at, 1e-5);
            for (std::int64_t i = 0; i < analytic.numel(); ++i)
                worst_ops = std::max(worst_ops, rel_err(analytic[i], numeric[i]));
        };
        {
            Graph g; // add, sub, mul, scalar multiply, square, division
            Expr x = g.leaf({6});
            Expr c = g.constant(rng.uniform_tensor({6}, -1.0, 1.0));
            Expr y = g.div_by(g.sum(g.square(g.scale(g.mul(g.add(x, c), g.sub(x, c)), 0.7))), 3.0);
            gradcheck(g, x, y, rng.uniform_tensor({6}, -2.0, 2.0));
        }
        {
            Graph g; // matmul, sigmoid, ELU
            Expr x = g.leaf({3, 4});
            Expr w = g.constant(rng.uniform_tensor({4, 2}, -1.0, 1.0));
            Expr y = g.sum(g.sigmoid(g.elu(g.matmul(x, w))));
            gradcheck(g, x, y, rng.uniform_tensor({3, 4}, -1.0, 1.0));
        }
        {
            Graph g; // 2-D cross-correlation, both strides
            Expr x = g.leaf({6, 6, 2});
            Expr k = g.constant(rng.uniform_tensor({3, 3, 2, 2}, -0.5, 0.5));
            Expr y = g.add(g.sum(g.square(conv2d(g, x, k, 1, 1))), g.sum(conv2d(g, x, k, 2, 1)));
            gradcheck(g, x, y, rng.uniform_tensor({6, 6, 2}, -1.0, 1.0));
        }
        {
            Graph g; // sum/mean/variance reductions, L2 norm, inner product
            Expr x = g.leaf({7});
            Expr c = g.constant(rng.uniform_tensor({7}, 0.5, 1.5));
            Expr y = g.add(g.add(g.variance(x), g.mean(g.square(x))),
                           g.add(g.l2norm(x), g.inner(x, c)));
            gradcheck(g, x, y, rng.uniform_tensor({7}, 0.2, 1.0));
        }
    }
    if (worst_ops >= 1e-3)
        return {false, format_msg("op gradients off by ", fmt_g(worst_ops))};

    // full inversion cost on mlp3, B = 1, with TV and BN side information
    ClassifierModel m = make_classifier_preset("mlp3", 13);
    Rng drng(14);
    Tensor xstar = drng.uniform_tensor({256}, 0.0, 1.0);
    auto rep = batch_gradient(m, std::span(&xstar, 1), std::vector<std::int64_t>{6}, true);
    InversionTask task = InversionTask::from_report(m, std::move(rep));
    InversionConfig cfg;
    CostProgram prog = build_cost_program(std::span(&task, 1), cfg, nullptr, Phase::InputSpace);

    std::vector<double> worst_cost(50, 0.0);
#pragma omp parallel for schedule(dynamic)
    for (int p = 0; p < 50; ++p) {
        Rng prng(derive_seed(500, static_cast<std::uint64_t>(p)));
        Tensor x0 = prng.uniform_tensor({256}, 0.0, 1.0);
        Evaluator ev(prog.g);
        prog.bind_models(ev);
        ev.bind(prog.opt[0], x0);
        ev.ensure(prog.grads);
        Tensor analytic = ev.value(prog.grads[0]);
        Tensor numeric = finite_diff(
            [&](const Tensor& q) {
                Evaluator e2(prog.g);
                prog.bind_models(e2);
                e2.bind(prog.opt[0], q);
                return e2.eval_scalar(prog.cost);
            },
            x0, 1e-5);
        for (std::int64_t i = 0; i < 256; ++i)
            worst_cost[static_cast<std::size_t>(p)] =
                std::max(worst_cost[static_cast<std::size_t>(p)], rel_err(analytic[i], numeric[i]));
    }
    const double wc = *std::max_element(worst_cost.begin(), worst_cost.end());
    const bool pass = worst_ops < 1e-3 && wc < 1e-3;
    return {pass, format_msg("max relative error: ops ", fmt_g(worst_ops), ", full mlp3 cost ",
                             fmt_g(wc), " (tolerance 1e-3, 50 points each)")};
}

// criterion 2: determined-system exactness

Outcome criterion2() {
    int gi_ok = 0, rgap_ok = 0;
    std::vector<double> gi_psnrs(10), rg_psnrs(10);
#pragma omp parallel for schedule(dynamic)
    for (std::uint64_t s = 0; s < 10; ++s) {
        ClassifierModel model = make_classifier_preset("dense1", derive_seed(20, s));
        SyntheticDataset data = make_dataset("blobs", 4, derive_seed(21, s));
        Tensor img = data.images[0];
        Tensor flat = img;
        flat.shape = {256};
        const std::int64_t label = data.labels[0];
        auto rep = batch_gradient(model, std::span(&flat, 1), std::vector<std::int64_t>{label});
        InversionTask task = InversionTask::from_report(model, rep);

        InversionConfig cfg;
        cfg.mode = SearchMode::X;
        cfg.discrepancy = Discrepancy::L2;
        cfg.lambda_tv = 0.0;
        cfg.iters_phase1 = 1000;
        cfg.iters_phase2 = 1000;
        cfg.eta_x = 0.05;
        cfg.restarts = 1;
        cfg.seed = s;
        BatchEstimate est = invert(task, cfg);
        std::vector<Tensor> truth{img};
        gi_psnrs[s] = score_batch(est.images, truth).psnr_mean;

        RgapResult res = rgap_recursive(model, rep, &flat);
        Tensor rimg = res.input;
        rimg.shape = {16, 16, 1};
        for (auto& v : rimg.data) v = std::clamp(v, 0.0, 1.0);
        std::vector<Tensor> rb{rimg};
        rg_psnrs[s] = score_batch(rb, truth).psnr_mean;
    }
    for (int s = 0; s < 10; ++s) {
        if (gi_psnrs[static_cast<std::size_t>(s)] >= 60.0) ++gi_ok;
        if (rg_psnrs[static_cast<std::size_t>(s)] >= 60.0) ++rgap_ok;
    }
    return {gi_ok == 10 && rgap_ok == 10,
            format_msg("PSNR >= 60 dB on GI-x ", gi_ok, "/10 (min ", fmt_g(*std::min_element(gi_psnrs.begin(), gi_psnrs.end())),
                       " dB) and R-GAP ", rgap_ok, "/10 (min ", fmt_g(*std::min_element(rg_psnrs.begin(), rg_psnrs.end())), " dB)")};
}

// criterion 3: label recovery

Outcome criterion3() {
    int correct = 0;
#pragma omp parallel for schedule(dynamic) reduction(+ : correct)
    for (std::uint64_t t = 0; t < 100; ++t) {
        ClassifierModel m = make_classifier_preset(t % 2 ? "cnn4" : "mlp3", t);
        Rng rng(derive_seed(t, 5));
        Tensor x = rng.uniform_tensor({256}, 0.0, 1.0);
        const std::int64_t y = rng.below(10);
        auto rep = batch_gradient(m, std::span(&x, 1), std::vector<std::int64_t>{y});
        if (recover_label(rep, m) == y) ++correct;
    }
    return {correct == 100, format_msg(correct, "/100 single-sample labels recovered")};
}

// criterion 4: search-space ordering on the matched-generator benchmark

Outcome criterion4() {
    Bench b = make_bench(16, 10, false);
    const GeneratorModel& gen = matched_generator();
    const double px = mean_psnr(b, SearchMode::X, nullptr, 100, 50, 4, 1e-3);
    const double pz = mean_psnr(b, SearchMode::Z, &gen, 100, 50, 4, 1e-3);
    const double pzw = mean_psnr(b, SearchMode::ZW, &gen, 100, 50, 4, 1e-3);
    const bool pass = pzw >= pz && pz >= px && (pzw - px) >= 1.0;
    return {pass, format_msg("mean PSNR: GI-z/w ", fmt_g(pzw), " >= GI-z ", fmt_g(pz), " >= GI-x ",
                             fmt_g(px), " dB; z/w gain over x ", fmt_g(pzw - px), " dB (>= 1 required)")};
}

// criterion 5: exact BN statistics raise GI-x

Outcome criterion5() {
    Bench plain = make_bench(16, 10, false);
    Bench with_bn = make_bench(16, 10, true);
    const double base = mean_psnr(plain, SearchMode::X, nullptr, 100, 50, 4, 0.0);
    const double bn = mean_psnr(with_bn, SearchMode::X, nullptr, 100, 50, 4, 0.2);
    return {bn - base >= 0.5, format_msg("GI-x ", fmt_g(base), " dB vs GI-x+BN ", fmt_g(bn),
                                         " dB; gain ", fmt_g(bn - base), " dB (>= 0.5 required)")};
}

// criterion 6: defense difficulty trends

Outcome criterion6() {
    const GeneratorModel& gen = matched_generator();
    auto run_point = [&](double sp, double no, std::int64_t B) {
        Bench b = make_bench(B, 10, false);
        for (auto& task : b.tasks) {
            task.target = defend_sparsify(std::move(task.target), sp);
            task.target = defend_noise(std::move(task.target), no, 777);
        }
        return mean_psnr(b, SearchMode::ZW, &gen, 100, 50, 2, 1e-3);
    };
    auto violations = [](const std::vector<double>& seq) {
        int v = 0;
        for (std::size_t i = 1; i < seq.size(); ++i)
            if (seq[i] > seq[i - 1]) ++v;
        return v;
    };
    std::vector<double> sp{run_point(0.0, 0.0, 4), run_point(0.9, 0.0, 4), run_point(0.99, 0.0, 4)};
    std::vector<double> no{sp[0], run_point(0.0, 0.01, 4), run_point(0.0, 0.1, 4)};
    std::vector<double> ba{run_point(0.0, 0.0, 1), sp[0], run_point(0.0, 0.0, 16)};
    const int vs = violations(sp), vn = violations(no), vb = violations(ba);
    const bool pass = vs <= 1 && vn <= 1 && vb <= 1;
    auto seq_str = [](const std::vector<double>& s) {
        return format_msg(fmt_g(s[0]), " -> ", fmt_g(s[1]), " -> ", fmt_g(s[2]));
    };
    return {pass, format_msg("GI-z/w mean PSNR (dB): sparsity ", seq_str(sp), " (", vs,
                             " violations); noise ", seq_str(no), " (", vn, "); batch ", seq_str(ba),
                             " (", vb, "); <= 1 allowed each")};
}

// criterion 7: GIML learns a usable prior from gradients alone

Outcome criterion7() {
    SyntheticDataset data = make_dataset("two-cluster", 256, 17, 0.05);
    SimConfig scfg;
    scfg.nodes = 50;
    scfg.rounds = 4;
    scfg.defense.batch = 1;
    scfg.theta_mode = ThetaMode::Reinit;
    scfg.model_preset = "mlp3";
    scfg.model_seed = 3;
    scfg.seed = 4;
    SimOutput sim = simulate_rounds(data, scfg); // 200 tasks

    MetaConfig mcfg;
    mcfg.task_batch = 8;
    mcfg.local_iters = 5;
    mcfg.z_lambda = 1e-2;
    mcfg.alpha = 0.3;
    mcfg.beta = 0.5;
    mcfg.outer_steps = 300;
    mcfg.latent_iters = 100;
    mcfg.discrepancy = Discrepancy::L2; // amplitude-sensitive: the decoder learns contrast
    mcfg.seed = 5;
    GeneratorModel init = make_generator_preset("dec16", 6);
    GimlResult res = giml(sim.tasks, mcfg, init);

    // (b) probe samples move toward the cluster prototypes
    auto protos = two_cluster_prototypes();
    auto probe_dist = [&](const GeneratorModel& gm) {
        Rng zr(9);
        double total = 0;
        for (int i = 0; i < 16; ++i) {
            Tensor img = generate(gm, zr.normal_tensor({16}));
            double d0 = 0, d1 = 0;
            for (std::int64_t j = 0; j < img.numel(); ++j) {
                d0 += (img[j] - protos[0][j]) * (img[j] - protos[0][j]);
                d1 += (img[j] - protos[1][j]) * (img[j] - protos[1][j]);
            }
            total += std::sqrt(std::min(d0, d1));
        }
        return total / 16.0;
    };
    const double d_init = probe_dist(init);
    const double d_final = probe_dist(res.generator);

    // (a) held-out tasks: GI-z with the learned prior vs a wrong-distribution prior
    SyntheticDataset bars = make_dataset("bars", 48, 21);
    FitConfig fc;
    fc.iterations = 800;
    fc.seed = 2;
    GeneratorModel wrong = fit_generator_to_images(make_generator_preset("dec16", 7), bars.images, fc);

    double trained_psnr = 0, wrong_psnr = 0;
#pragma omp parallel for schedule(dynamic) reduction(+ : trained_psnr, wrong_psnr)
    for (int t = 0; t < 10; ++t) {
        Rng rng(derive_seed(900, static_cast<std::uint64_t>(t)));
        const auto pick = rng.below(data.count);
        Tensor img = data.images[static_cast<std::size_t>(pick)];
        Tensor flat = img;
        flat.shape = {256};
        ClassifierModel m = make_classifier_preset("mlp3", derive_seed(70, static_cast<std::uint64_t>(t)));
        auto rep = batch_gradient(m, std::span(&flat, 1),
                                  std::vector<std::int64_t>{data.labels[static_cast<std::size_t>(pick)]});
        InversionTask task = InversionTask::from_report(std::move(m), std::move(rep));
        InversionConfig icfg;
        icfg.mode = SearchMode::Z;
        icfg.iters_phase1 = 75;
        icfg.iters_phase2 = 75;
        icfg.restarts = 2;
        icfg.seed = static_cast<std::uint64_t>(t);
        std::vector<Tensor> truth{img};
        BatchEstimate a = invert(task, icfg, &res.generator);
        trained_psnr += score_batch(a.images, truth).psnr_mean;
        BatchEstimate w = invert(task, icfg, &wrong);
        wrong_psnr += score_batch(w.images, truth).psnr_mean;
    }
    trained_psnr /= 10;
    wrong_psnr /= 10;
    const bool pass = (trained_psnr - wrong_psnr >= 1.0) && (d_final <= 0.5 * d_init);
    return {pass, format_msg("held-out GI-z: learned prior ", fmt_g(trained_psnr),
                             " dB vs wrong prior ", fmt_g(wrong_psnr), " dB (gap ",
                             fmt_g(trained_psnr - wrong_psnr), ", >= 1 required); probe distance ",
                             fmt_g(d_init), " -> ", fmt_g(d_final), " (<= 50% required)")};
}

// criterion 8: accumulation over re-initialized gradients of one image

Outcome criterion8() {
    SyntheticDataset data = make_dataset("blobs", 16, 3);
    std::vector<std::vector<double>> psnr_by_T;
    for (std::int64_t T : {1, 4, 16}) {
        std::vector<double> psnrs(10);
#pragma omp parallel for schedule(dynamic)
        for (std::uint64_t s = 0; s < 10; ++s) {
            Tensor img = data.images[static_cast<std::size_t>(s % 16)];
            Tensor flat = img;
            flat.shape = {256};
            const std::int64_t label = data.labels[static_cast<std::size_t>(s % 16)];
            std::vector<InversionTask> tasks;
            for (std::int64_t t = 0; t < T; ++t) {
                ClassifierModel m = make_classifier_preset(
                    "cnn4", derive_seed((s << 16) + 7, static_cast<std::uint64_t>(t)));
                auto rep = batch_gradient(m, std::span(&flat, 1), std::vector<std::int64_t>{label});
                rep = defend_sparsify(std::move(rep), 0.3);
                tasks.push_back(InversionTask::from_report(std::move(m), std::move(rep)));
            }
            InversionConfig cfg;
            cfg.mode = SearchMode::X;
            cfg.discrepancy = Discrepancy::L2;
            cfg.lambda_tv = 0.0;
            cfg.iters_phase1 = 1000;
            cfg.iters_phase2 = 1000;
            cfg.eta_x = 0.05;
            cfg.restarts = 1;
            cfg.seed = s;
            BatchEstimate est = invert_multi(tasks, cfg);
            std::vector<Tensor> truth{img};
            psnrs[s] = score_batch(est.images, truth).psnr_mean;
        }
        psnr_by_T.push_back(psnrs);
    }
    const double m1 = median(psnr_by_T[0]), m4 = median(psnr_by_T[1]), m16 = median(psnr_by_T[2]);
    int hits = 0;
    for (double p : psnr_by_T[2])
        if (p >= 40.0) ++hits;
    const bool pass = m1 < m4 && m4 < m16 && hits >= 8;
    return {pass, format_msg("median PSNR: T=1 ", fmt_g(m1), " < T=4 ", fmt_g(m4), " < T=16 ",
                             fmt_g(m16), " dB; T=16 >= 40 dB on ", hits, "/10 seeds (>= 8 required)")};
}

// criterion 9: R-GAP error accumulation and generative repair

Outcome criterion9() {
    int monotone = 0;
#pragma omp parallel for schedule(dynamic) reduction(+ : monotone)
    for (std::uint64_t s = 0; s < 10; ++s) {
        ClassifierModel m = dense_chain({256, 128, 96, 64, 48, 32, 10}, derive_seed(s, 77));
        SyntheticDataset ds = make_dataset("blobs", 4, derive_seed(s, 5));
        Tensor x = ds.images[0];
        x.shape = {256};
        auto rep = batch_gradient(m, std::span(&x, 1), std::vector<std::int64_t>{3});
        RgapResult res = rgap_recursive(m, rep, &x);
        bool ok = res.recon_errors.size() == 6;
        for (std::size_t i = 1; i < res.recon_errors.size(); ++i)
            if (res.recon_errors[i] < res.recon_errors[i - 1]) ok = false;
        if (ok) ++monotone;
    }

    // paired instance: a wide middle layer whose gradient rows die, solved
    // plainly vs with the latent search over a decoder that contains the input
    auto make_paired = [](bool deficient, std::uint64_t seed) {
        Rng rng(seed);
        const std::int64_t mid = deficient ? 12 : 40;
        ClassifierModel m;
        m.id = deficient ? "paired-deficient" : "paired-full";
        m.input_dim = 24;
        m.input_shape = {24, 1, 1};
        m.label_count = 6;
        m.layers.push_back(make_dense_layer(24, 32, Activation::Sigmoid, rng));
        m.layers.push_back(make_dense_layer(32, mid, Activation::Sigmoid, rng));
        m.layers.push_back(make_dense_layer(mid, 6, Activation::None, rng));
        for (auto& v : m.layers[2].weights.data) v *= 1e-14;
        m.layers[2].bias = rng.uniform_tensor({6}, -1.0, 1.0);
        m.validate();
        Tensor xstar = rng.uniform_tensor({24}, 0.1, 0.9);
        auto rep = batch_gradient(m, std::span(&xstar, 1), std::vector<std::int64_t>{3});
        return std::tuple{std::move(m), std::move(xstar), std::move(rep)};
    };
    auto [dm, dx, drep] = make_paired(true, 33);
    Rng zrng(34);
    Tensor zstar = zrng.normal_tensor({8});
    GeneratorModel contains;
    {
        Rng rng(35);
        contains.id = "contains-xstar";
        contains.latent_dim = 8;
        contains.output_shape = {24, 1, 1};
        GeneratorModel::Block blk;
        blk.kind = GeneratorModel::Block::Kind::Dense;
        blk.act = Activation::None;
        blk.weights = rng.uniform_tensor({24, 8}, -0.3, 0.3);
        blk.bias = Tensor::zeros({24});
        for (std::int64_t i = 0; i < 24; ++i) {
            double wz = 0.0;
            for (std::int64_t j = 0; j < 8; ++j) wz += blk.weights[i * 8 + j] * zstar[j];
            blk.bias[i] = std::log(dx[i] / (1.0 - dx[i])) - wz;
        }
        contains.blocks.push_back(blk);
    }
    auto l2e = [](const Tensor& a, const Tensor& b) {
        double e = 0;
        for (std::int64_t i = 0; i < a.numel(); ++i) e += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(e);
    };
    RgapResult plain = rgap_recursive(dm, drep, &dx);
    RgapGenConfig gcfg;
    gcfg.replace_layers = {1};
    gcfg.iterations = 500;
    gcfg.seed = 2;
    RgapResult repaired = rgap_generative(dm, drep, contains, gcfg, &dx);
    const double err_plain = l2e(plain.input, dx);
    const double err_gen = l2e(repaired.input, dx);

    const bool pass = monotone >= 8 && err_gen < err_plain;
    return {pass, format_msg("layer errors non-decreasing toward the input on ", monotone,
                             "/10 seeds (>= 8 required); paired instance input error ",
                             fmt_g(err_gen), " (generative) < ", fmt_g(err_plain), " (plain)")};
}

// criterion 10: reproducibility through the full pipeline

Outcome criterion10() {
    const char* cfg_text = R"({
        "command": "invert", "out": "PLACEHOLDER", "seeds": [0, 1],
        "dataset": {"family": "two-cluster", "count": 16, "seed": 3},
        "model": {"preset": "cnn4", "seed": 5},
        "defense": {"batch": 2},
        "generator": {"source": "preset-untrained", "seed": 8},
        "inversion": {"mode": "z/w", "iters_phase1": 40, "iters_phase2": 20, "restarts": 2}
    })";
    for (const char* dir : {"acceptance_runs/repro1", "acceptance_runs/repro2"}) {
        fs::remove_all(dir);
        ExperimentConfig cfg = ExperimentConfig::from_json_text(cfg_text);
        cfg.out_dir = dir;
        RunOutcome rc = run_experiment(std::move(cfg));
        if (rc.exit_code != 0) return {false, "pipeline run failed: " + (rc.errors.empty() ? "?" : rc.errors[0])};
    }
    const bool summary_same = slurp("acceptance_runs/repro1/summary.csv") ==
                              slurp("acceptance_runs/repro2/summary.csv");
    const bool metrics_same = slurp("acceptance_runs/repro1/invert_seed1/metrics.csv") ==
                              slurp("acceptance_runs/repro2/invert_seed1/metrics.csv");
    const bool curve_same = slurp("acceptance_runs/repro1/invert_seed1/curve.csv") ==
                            slurp("acceptance_runs/repro2/invert_seed1/curve.csv");
    return {summary_same && metrics_same && curve_same,
            format_msg("byte-identical repeated runs: summary ", summary_same ? "yes" : "NO",
                       ", metrics ", metrics_same ? "yes" : "NO", ", curve ",
                       curve_same ? "yes" : "NO")};
}

} // namespace

int main(int argc, char** argv) {
    struct Entry {
        int id;
        double budget_min;
        std::function<Outcome()> fn;
    };
    const std::vector<Entry> entries{
        {1, 1.0, criterion1},  {2, 2.0, criterion2},  {3, 1.0, criterion3}, {4, 15.0, criterion4},
        {5, 15.0, criterion5}, {6, 30.0, criterion6}, {7, 60.0, criterion7}, {8, 20.0, criterion8},
        {9, 10.0, criterion9}, {10, 10.0, criterion10}};

    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failures = 0, ran = 0;
    for (const auto& e : entries) {
        if (!wanted.empty() && !wanted.count(e.id)) continue;
        ++ran;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = e.fn();
        } catch (const std::exception& ex) {
            o = {false, format_msg("exception: ", ex.what())};
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        const bool in_budget = secs < e.budget_min * 60.0;
        const bool pass = o.pass && in_budget;
        if (!pass) ++failures;
        std::printf("criterion %2d: %s  [%7.1f s / %3.0f min budget]  %s\n", e.id,
                    pass ? "PASS" : "FAIL", secs, e.budget_min,
                    (o.detail + (in_budget ? "" : " — OVER TIME BUDGET")).c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", ran - failures, ran);
    return failures == 0 ? 0 : 1;
}
