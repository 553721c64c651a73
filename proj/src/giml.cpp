#include "ginv/giml.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ginv/metrics.hpp"
#include "ginv/optim.hpp"
#include "ginv/parallel.hpp"
#include "ginv/rng.hpp"

namespace ginv {

void MetaConfig::validate() const {
    check(task_batch >= 1, "meta config: task batch size must be >= 1, got ", task_batch);
    check(local_iters >= 1, "meta config: local iterations must be >= 1, got ", local_iters);
    check(z_lambda >= 0.0, "meta config: z-regularizer coefficient must be >= 0, got ", z_lambda);
    check(beta > 0.0 && beta <= 1.0, "meta config: beta must be in (0, 1], got ", beta);
    check(alpha > 0.0, "meta config: alpha must be positive");
    check(outer_steps >= 1 && latent_iters >= 1, "meta config: iteration counts must be >= 1");
    check(eta_z > 0.0, "meta config: eta_z must be positive");
}

LatentSearch regularized_latent_search(const InversionTask& task, const GeneratorModel& gen,
                                       double lambda, std::int64_t iterations, const MetaConfig& cfg,
                                       std::uint64_t seed) {
    check(lambda >= 0.0, "latent search: lambda must be >= 0, got ", lambda);
    InversionConfig icfg;
    icfg.discrepancy = cfg.discrepancy;
    icfg.lambda_tv = cfg.lambda_tv;
    icfg.lambda_bn = cfg.lambda_bn;
    CostProgram prog = build_cost_program(std::span(&task, 1), icfg, &gen, Phase::LatentShared, lambda);

    Evaluator ev(prog.g);
    prog.bind_models(ev);
    for (std::size_t i = 0; i < prog.fixed.size(); ++i) ev.bind(prog.fixed[i], *gen.params()[i]);

    Rng rng(derive_seed(seed, 0));
    LatentSearch out;
    std::vector<Tensor> zr;
    for (std::int64_t j = 0; j < task.batch_size(); ++j) zr.push_back(rng.normal_tensor({gen.latent_dim}));

    std::vector<Expr> roots = prog.grads;
    roots.push_back(prog.cost);
    Adam adam;
    std::vector<Tensor> gvals(prog.grads.size());
    double cost = 0.0;
    for (std::int64_t it = 0; it <= iterations; ++it) {
        for (std::size_t i = 0; i < prog.opt.size(); ++i) ev.bind(prog.opt[i], zr[i]);
        ev.ensure(roots);
        cost = ev.value(prog.cost).scalar_value();
        if (!std::isfinite(cost) || cost > cfg.divergence_threshold) {
            out.diverged = true;
            break;
        }
        if (it == iterations) break;
        for (std::size_t i = 0; i < prog.grads.size(); ++i) gvals[i] = ev.value(prog.grads[i]);
        adam.step(zr, gvals, decayed_lr(cfg.eta_z, it, iterations));
    }
    out.codes = std::move(zr);
    out.final_cost = cost;
    return out;
}

MetaStep meta_param_step(GeneratorModel& gen, std::span<const InversionTask> tasks,
                         std::span<const std::vector<Tensor>> frozen_codes, double alpha,
                         std::int64_t tau, const MetaConfig& cfg) {
    check(tau >= 1, "meta_param_step: tau must be >= 1, got ", tau);
    check(alpha >= 0.0, "meta_param_step: alpha must be >= 0");
    check(!tasks.empty(), "meta_param_step: no tasks");
    check(tasks.size() == frozen_codes.size(), "meta_param_step: codes for every task required");

    Graph g;
    std::vector<Expr> shared_w;
    std::vector<Expr> costs;
    std::vector<std::vector<Expr>> theta_sets;

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const InversionTask& task = tasks[i];
        check(static_cast<std::int64_t>(frozen_codes[i].size()) == task.batch_size(),
              "meta_param_step: task ", i, " has ", frozen_codes[i].size(), " codes for batch ",
              task.batch_size());
        std::vector<Expr> flats, images;
        for (std::int64_t j = 0; j < task.batch_size(); ++j) {
            Tensor zv = frozen_codes[i][static_cast<std::size_t>(j)];
            zv.shape = {gen.latent_dim};
            Expr z = g.constant(std::move(zv)); // frozen: no gradient flows to z
            GeneratorNet net = build_generator_net(g, gen, z, shared_w.empty() ? nullptr : &shared_w);
            if (shared_w.empty()) shared_w = net.w;
            flats.push_back(net.flat);
            images.push_back(net.image);
        }
        ClassifierNet cnet = build_classifier_net(g, task.model, flats);
        theta_sets.push_back(cnet.theta);
        Expr loss = build_batch_loss(g, cnet, task.labels, task.model.label_count);
        std::vector<Expr> ghat = g.derive(loss, cnet.theta);
        Expr c = build_discrepancy(g, ghat, task.target.grads, cfg.discrepancy);
        if (cfg.lambda_tv > 0.0) {
            std::vector<Expr> tvs;
            for (Expr img : images) tvs.push_back(build_tv(g, img));
            c = g.add(c, g.scale(g.sum_of(tvs), cfg.lambda_tv));
        }
        costs.push_back(c);
    }
    Expr total = g.sum_of(costs);
    std::vector<Expr> grads = g.derive(total, shared_w);
    std::vector<Expr> roots = grads;
    roots.push_back(total);

    Evaluator ev(g);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        std::size_t ti = 0;
        for (const auto& l : tasks[i].model.layers) {
            ev.bind(theta_sets[i][ti++], l.weights);
            if (l.has_bias) ev.bind(theta_sets[i][ti++], l.bias);
        }
    }

    auto wptrs = gen.params();
    std::vector<Tensor> wvals;
    for (const Tensor* p : wptrs) wvals.push_back(*p);

    MetaStep result;
    std::vector<Tensor> gvals(grads.size());
    for (std::int64_t t = 0; t < tau; ++t) {
        for (std::size_t i = 0; i < shared_w.size(); ++i) ev.bind(shared_w[i], wvals[i]);
        ev.ensure(roots);
        const double c = ev.value(total).scalar_value();
        if (t == 0) result.cost_before = c;
        bool finite = std::isfinite(c);
        for (std::size_t i = 0; i < grads.size() && finite; ++i) {
            gvals[i] = ev.value(grads[i]);
            finite = gvals[i].all_finite();
        }
        if (!finite) {
            result.ok = false;
            return result; // outer step aborted; gen untouched
        }
        gd_step(wvals, gvals, alpha);
    }
    for (std::size_t i = 0; i < shared_w.size(); ++i) ev.bind(shared_w[i], wvals[i]);
    Expr only_total[1] = {total};
    ev.ensure(only_total);
    result.cost_after = ev.value(total).scalar_value();
    if (!std::isfinite(result.cost_after)) {
        result.ok = false;
        return result;
    }
    for (std::size_t i = 0; i < wptrs.size(); ++i) *wptrs[i] = wvals[i];
    return result;
}

void reptile_update(GeneratorModel& w, const GeneratorModel& w_prime, double beta) {
    auto pw = w.params();
    auto pp = w_prime.params();
    check(pw.size() == pp.size(), "reptile: parameter lists differ");
    for (std::size_t i = 0; i < pw.size(); ++i) {
        check(pw[i]->shape == pp[i]->shape, "reptile: parameter ", i, " shape mismatch");
        for (std::int64_t j = 0; j < pw[i]->numel(); ++j)
            (*pw[i])[j] = (1.0 - beta) * (*pw[i])[j] + beta * (*pp[i])[j];
    }
}

GimlResult giml(const TaskSet& tasks, const MetaConfig& cfg, GeneratorModel init,
                const GimlEvalHook& eval_hook) {
    cfg.validate();
    check(!tasks.entries.empty(), "giml: empty task set");
    const auto pool = static_cast<std::int64_t>(tasks.entries.size());
    check(cfg.task_batch <= pool, "giml: task batch ", cfg.task_batch, " exceeds the task pool ", pool);
    const std::int64_t B = tasks.entries[0].report.batch_size;
    for (const auto& e : tasks.entries)
        check(e.report.batch_size == B, "giml: tasks must share the data batch size");

    GimlResult res;
    res.generator = std::move(init);
    const std::int64_t every = cfg.checkpoint_every > 0 ? cfg.checkpoint_every
                                                        : std::max<std::int64_t>(1, cfg.outer_steps / 10);

    Rng probe_rng(derive_seed(cfg.seed, 0xbeef));
    std::vector<Tensor> probes;
    for (std::int64_t i = 0; i < cfg.probe_count; ++i)
        probes.push_back(probe_rng.normal_tensor({res.generator.latent_dim}));

    Rng sampler(derive_seed(cfg.seed, 0x5a));
    for (std::int64_t step = 0; step < cfg.outer_steps; ++step) {
        // sample N distinct tasks
        std::vector<std::int64_t> order(static_cast<std::size_t>(pool));
        std::iota(order.begin(), order.end(), 0);
        for (std::int64_t i = 0; i < cfg.task_batch; ++i) {
            const auto j = i + sampler.below(pool - i);
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        std::vector<InversionTask> sampled;
        for (std::int64_t i = 0; i < cfg.task_batch; ++i) {
            const auto& e = tasks.entries[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
            sampled.push_back(InversionTask::from_report(tasks.snapshots[static_cast<std::size_t>(e.snapshot)],
                                                         e.report));
        }

        GeneratorModel wprime = res.generator; // w' <- w
        std::vector<LatentSearch> searches(sampled.size());
#pragma omp parallel for schedule(dynamic) if (par::enabled())
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(sampled.size()); ++i) {
            searches[static_cast<std::size_t>(i)] = regularized_latent_search(
                sampled[static_cast<std::size_t>(i)], wprime, cfg.z_lambda, cfg.latent_iters, cfg,
                derive_seed(cfg.seed, static_cast<std::uint64_t>(step * cfg.task_batch + i + 1)));
        }

        GimlLogRow row;
        row.step = step;
        bool ok = true;
        double znorm = 0.0;
        std::int64_t zcount = 0;
        for (const auto& s : searches) {
            if (s.diverged) ok = false;
            for (const auto& z : s.codes) {
                double n2 = 0.0;
                for (double v : z.data) n2 += v * v;
                znorm += std::sqrt(n2);
                ++zcount;
            }
        }
        row.mean_z_norm = zcount ? znorm / static_cast<double>(zcount) : 0.0;

        if (ok) {
            std::vector<std::vector<Tensor>> codes;
            for (auto& s : searches) codes.push_back(std::move(s.codes));
            MetaStep ms = meta_param_step(wprime, sampled, codes, cfg.alpha, cfg.local_iters, cfg);
            ok = ms.ok;
            row.summed_cost = ms.cost_after;
        }
        if (ok) {
            reptile_update(res.generator, wprime, cfg.beta);
        } else {
            row.skipped = true; // logged and skipped; training continues
        }

        if (step % every == every - 1 || step + 1 == cfg.outer_steps) {
            res.checkpoint_steps.push_back(step);
            std::vector<Tensor> grid;
            for (const auto& z : probes) grid.push_back(generate(res.generator, z));
            res.probe_samples.push_back(std::move(grid));
            if (eval_hook) {
                row.eval_psnr = eval_hook(res.generator, step);
                row.eval_done = true;
            }
        }
        res.log.push_back(row);
    }
    return res;
}

void write_giml_log(const GimlResult& result, const std::string& path) {
    std::ofstream os(path);
    check(os.good(), "cannot open '", path, "' for writing");
    os << "outer_step,summed_cost,mean_z_norm,eval_psnr,skipped\n";
    for (const auto& r : result.log) {
        os << r.step << "," << fmt_g(r.summed_cost) << "," << fmt_g(r.mean_z_norm) << ",";
        if (r.eval_done) os << fmt_g(r.eval_psnr);
        os << "," << (r.skipped ? 1 : 0) << "\n";
    }
    check(os.good(), "write failed for '", path, "'");
}

void write_probe_grids(const GimlResult& result, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t c = 0; c < result.probe_samples.size(); ++c) {
        const auto& grid = result.probe_samples[c];
        if (grid.empty()) continue;
        const std::int64_t H = grid[0].shape[0], W = grid[0].shape[1];
        const auto cols = static_cast<std::int64_t>(std::min<std::size_t>(4, grid.size()));
        const auto rows = static_cast<std::int64_t>((grid.size() + 3) / 4);
        Tensor tile = Tensor::zeros({rows * H, cols * W, 1});
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const auto gr = static_cast<std::int64_t>(i) / cols;
            const auto gc = static_cast<std::int64_t>(i) % cols;
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    tile[(gr * H + h) * (cols * W) + gc * W + w] = grid[i][h * W + w];
        }
        write_image(tile, (std::filesystem::path(dir) /
                           format_msg("probe_step", result.checkpoint_steps[c], ".pgm"))
                              .string());
    }
}

} // namespace ginv
