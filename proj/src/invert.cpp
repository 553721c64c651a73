#include "ginv/invert.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ginv/optim.hpp"
#include "ginv/parallel.hpp"

namespace ginv {

const char* search_mode_name(SearchMode m) {
    switch (m) {
        case SearchMode::X: return "x";
        case SearchMode::Z: return "z";
        case SearchMode::W: return "w";
        case SearchMode::ZX: return "z/x";
        case SearchMode::ZW: return "z/w";
    }
    return "?";
}

SearchMode search_mode_from(const std::string& s) {
    if (s == "x") return SearchMode::X;
    if (s == "z") return SearchMode::Z;
    if (s == "w") return SearchMode::W;
    if (s == "z/x") return SearchMode::ZX;
    if (s == "z/w") return SearchMode::ZW;
    fail("unknown search mode '", s, "' (x, z, w, z/x, z/w)");
}

const char* discrepancy_name(Discrepancy d) { return d == Discrepancy::L2 ? "l2" : "neg-cosine"; }

Discrepancy discrepancy_from(const std::string& s) {
    if (s == "l2") return Discrepancy::L2;
    if (s == "neg-cosine") return Discrepancy::NegCosine;
    fail("unknown discrepancy '", s, "' (l2, neg-cosine)");
}

void InversionConfig::validate() const {
    check(iters_phase1 >= 1, "inversion config: iters_phase1 must be >= 1, got ", iters_phase1);
    check(iters_phase2 >= 1, "inversion config: iters_phase2 must be >= 1, got ", iters_phase2);
    check(eta_z > 0 && eta_w > 0 && eta_x > 0, "inversion config: step sizes must be positive");
    check(restarts >= 1, "inversion config: restarts must be >= 1, got ", restarts);
    check(lambda_tv >= 0 && lambda_bn >= 0, "inversion config: negative regularizer weight");
}

InversionTask InversionTask::from_report(ClassifierModel model, GradientReport report,
                                         std::vector<Tensor> truth) {
    InversionTask t;
    t.model = std::move(model);
    t.labels = report.labels;
    t.bn = report.bn_stats;
    t.target = std::move(report);
    t.truth = std::move(truth);
    check(!t.labels.empty(), "inversion task: labels required (batch label recovery is out of scope)");
    return t;
}

std::vector<CurvePoint> BatchEstimate::chosen_curve() const {
    std::vector<CurvePoint> out;
    for (const auto& p : curve)
        if (p.restart == chosen_restart) out.push_back(p);
    return out;
}

// ---------------------------------------------------------------------------
// Cost pieces (direct evaluations used by tests and reporting)

double discrepancy(std::span<const Tensor> g_a, std::span<const Tensor> g_b, Discrepancy kind) {
    check(g_a.size() == g_b.size(), "discrepancy: gradient lists differ in length");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0, d2 = 0.0;
    for (std::size_t p = 0; p < g_a.size(); ++p) {
        check(g_a[p].numel() == g_b[p].numel(), "discrepancy: gradient entry ", p, " length mismatch");
        for (std::int64_t i = 0; i < g_a[p].numel(); ++i) {
            const double a = g_a[p][i], b = g_b[p][i];
            dot += a * b;
            na2 += a * a;
            nb2 += b * b;
            const double diff = a - b;
            d2 += diff * diff;
        }
    }
    if (kind == Discrepancy::L2) return std::sqrt(d2);
    check(na2 > 0.0 && nb2 > 0.0, "discrepancy: zero-norm gradient under neg-cosine");
    return -dot / (std::sqrt(na2) * std::sqrt(nb2));
}

double tv_regularizer(const Tensor& image_hwc) {
    check(image_hwc.rank() == 3, "tv_regularizer: image must be HxWxC, got ",
          shape_str(image_hwc.shape));
    const std::int64_t H = image_hwc.shape[0], W = image_hwc.shape[1], C = image_hwc.shape[2];
    double total = 0.0;
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
            for (std::int64_t c = 0; c < C; ++c) {
                const double v = image_hwc[(h * W + w) * C + c];
                if (w + 1 < W) {
                    const double d = v - image_hwc[(h * W + w + 1) * C + c];
                    total += d * d;
                }
                if (h + 1 < H) {
                    const double d = v - image_hwc[((h + 1) * W + w) * C + c];
                    total += d * d;
                }
            }
    return total;
}

double bn_regularizer(const ClassifierModel& model, std::span<const Tensor> batch, const BNStats& target) {
    BNStats got = bn_statistics(model, batch);
    check(got.means.size() == target.means.size(), "bn_regularizer: target instruments ",
          target.means.size(), " layers, model has ", got.means.size());
    double total = 0.0;
    for (std::size_t l = 0; l < got.means.size(); ++l) {
        check(got.means[l].numel() == target.means[l].numel(), "bn_regularizer: layer ", l,
              " channel count mismatch");
        double m2 = 0.0, v2 = 0.0;
        for (std::int64_t i = 0; i < got.means[l].numel(); ++i) {
            const double dm = got.means[l][i] - target.means[l][i];
            const double dv = got.variances[l][i] - target.variances[l][i];
            m2 += dm * dm;
            v2 += dv * dv;
        }
        total += std::sqrt(m2) + std::sqrt(v2);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Graph-side cost assembly

Expr build_discrepancy(Graph& g, std::span<const Expr> ghat, std::span<const Tensor> gtar,
                       Discrepancy kind) {
    check(ghat.size() == gtar.size(), "discrepancy: gradient lists differ in length");
    if (kind == Discrepancy::L2) {
        std::vector<Expr> parts;
        for (std::size_t p = 0; p < ghat.size(); ++p) {
            Tensor flat = gtar[p];
            flat.shape = {flat.numel()};
            Expr target = g.constant(std::move(flat));
            parts.push_back(g.sum(g.square(g.sub(g.reshape(ghat[p], {gtar[p].numel()}), target))));
        }
        return g.sqrt(g.sum_of(parts));
    }
    double nb2 = 0.0;
    for (const auto& t : gtar)
        for (double v : t.data) nb2 += v * v;
    check(nb2 > 0.0, "discrepancy: zero-norm target gradient under neg-cosine");
    std::vector<Expr> dots, sqs;
    for (std::size_t p = 0; p < ghat.size(); ++p) {
        Tensor flat = gtar[p];
        flat.shape = {flat.numel()};
        Expr target = g.constant(std::move(flat));
        Expr flat_hat = g.reshape(ghat[p], {gtar[p].numel()});
        dots.push_back(g.inner(flat_hat, target));
        sqs.push_back(g.sum(g.square(flat_hat)));
    }
    Expr num = g.sum_of(dots);
    Expr na = g.sqrt(g.sum_of(sqs));
    return g.scale(g.mul(num, g.recip_or_zero(na)), -1.0 / std::sqrt(nb2));
}

Expr build_tv(Graph& g, Expr image_hwc) {
    const Shape& s = g.node(image_hwc).shape;
    check(s.size() == 3, "tv: image must be HxWxC, got ", shape_str(s));
    const std::int64_t H = s[0], W = s[1], C = s[2];
    std::vector<std::int64_t> left, right, top, bottom;
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w + 1 < W; ++w)
            for (std::int64_t c = 0; c < C; ++c) {
                left.push_back((h * W + w) * C + c);
                right.push_back((h * W + w + 1) * C + c);
            }
    for (std::int64_t h = 0; h + 1 < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
            for (std::int64_t c = 0; c < C; ++c) {
                top.push_back((h * W + w) * C + c);
                bottom.push_back(((h + 1) * W + w) * C + c);
            }
    const std::int64_t n = H * W * C;
    const auto nh = static_cast<std::int64_t>(left.size());
    const auto nv = static_cast<std::int64_t>(top.size());
    Expr dh = g.sub(g.gather(image_hwc, g.register_pattern(std::move(left), n), {nh}),
                    g.gather(image_hwc, g.register_pattern(std::move(right), n), {nh}));
    Expr dv = g.sub(g.gather(image_hwc, g.register_pattern(std::move(top), n), {nv}),
                    g.gather(image_hwc, g.register_pattern(std::move(bottom), n), {nv}));
    return g.add(g.sum(g.square(dh)), g.sum(g.square(dv)));
}

namespace {

Expr build_bn_penalty(Graph& g, const ClassifierModel& model, const ClassifierNet& net,
                      const BNStats& target) {
    BnExprs got = build_bn_exprs(g, model, net);
    check(got.means.size() == target.means.size(), "bn penalty: target instruments ",
          target.means.size(), " layers, model has ", got.means.size());
    std::vector<Expr> parts;
    for (std::size_t l = 0; l < got.means.size(); ++l) {
        check(shape_numel(g.node(got.means[l]).shape) == target.means[l].numel(),
              "bn penalty: layer ", l, " channel count mismatch");
        Tensor tm = target.means[l];
        tm.shape = g.node(got.means[l]).shape;
        Tensor tv = target.variances[l];
        tv.shape = g.node(got.variances[l]).shape;
        parts.push_back(g.l2norm(g.sub(got.means[l], g.constant(std::move(tm)))));
        parts.push_back(g.l2norm(g.sub(got.variances[l], g.constant(std::move(tv)))));
    }
    return g.sum_of(parts);
}

} // namespace

void CostProgram::bind_models(Evaluator& ev) const {
    for (std::size_t t = 0; t < models.size(); ++t) {
        std::size_t ti = 0;
        for (const auto& l : models[t]->layers) {
            ev.bind(theta_sets[t][ti++], l.weights);
            if (l.has_bias) ev.bind(theta_sets[t][ti++], l.bias);
        }
    }
}

CostProgram build_cost_program(std::span<const InversionTask> tasks, const InversionConfig& cfg,
                               const GeneratorModel* gen, Phase phase, double z_reg_lambda) {
    check(!tasks.empty(), "cost: no tasks");
    const auto B = tasks[0].batch_size();
    for (const auto& t : tasks) {
        check(t.batch_size() == B, "cost: inconsistent batch size across tasks (", t.batch_size(),
              " vs ", B, ")");
        check(t.labels == tasks[0].labels, "cost: tasks must share labels");
    }
    if (phase != Phase::InputSpace)
        check(tasks.size() == 1, "cost: generator phases support a single task");
    const ClassifierModel& model0 = tasks[0].model;

    CostProgram p;
    Graph& g = p.g;

    // candidate batch
    std::vector<Expr> flat_candidates;
    std::vector<Expr> z_exprs;
    switch (phase) {
        case Phase::InputSpace:
            for (std::int64_t j = 0; j < B; ++j) {
                Expr x = g.leaf({model0.input_dim}, format_msg("x", j));
                p.opt.push_back(x);
                flat_candidates.push_back(x);
                p.images.push_back(g.reshape(x, model0.input_shape));
            }
            break;
        case Phase::LatentShared: {
            check(gen, "cost: generator required for latent-space search");
            std::vector<Expr> shared_w;
            for (std::int64_t j = 0; j < B; ++j) {
                Expr z = g.leaf({gen->latent_dim}, format_msg("z", j));
                p.opt.push_back(z);
                z_exprs.push_back(z);
                GeneratorNet net = build_generator_net(g, *gen, z, j == 0 ? nullptr : &shared_w);
                if (j == 0) shared_w = net.w;
                flat_candidates.push_back(net.flat);
                p.images.push_back(net.image);
            }
            // shared generator weights are fixed inputs here
            p.fixed = shared_w;
            break;
        }
        case Phase::PerInstanceW: {
            check(gen, "cost: generator required for parameter-space search");
            for (std::int64_t j = 0; j < B; ++j) {
                Expr z = g.leaf({gen->latent_dim}, format_msg("z", j));
                p.fixed.push_back(z);
                z_exprs.push_back(z);
                GeneratorNet net = build_generator_net(g, *gen, z);
                p.opt.insert(p.opt.end(), net.w.begin(), net.w.end());
                flat_candidates.push_back(net.flat);
                p.images.push_back(net.image);
            }
            break;
        }
    }
    p.latents = z_exprs;

    // summed task costs
    std::vector<Expr> task_costs;
    for (const auto& task : tasks) {
        task.model.validate();
        check(task.model.input_dim == model0.input_dim, "cost: tasks disagree on input size");
        ClassifierNet net = build_classifier_net(g, task.model, flat_candidates);
        p.models.push_back(&task.model);
        p.theta_sets.push_back(net.theta);
        Expr loss = build_batch_loss(g, net, task.labels, task.model.label_count);
        std::vector<Expr> ghat = g.derive(loss, net.theta);
        check(ghat.size() == task.target.grads.size(), "cost: report does not match model parameters");
        Expr c = build_discrepancy(g, ghat, task.target.grads, cfg.discrepancy);
        if (cfg.lambda_tv > 0.0) {
            std::vector<Expr> tvs;
            for (Expr img : p.images) tvs.push_back(build_tv(g, img));
            c = g.add(c, g.scale(g.sum_of(tvs), cfg.lambda_tv));
        }
        if (cfg.lambda_bn > 0.0 && task.bn)
            c = g.add(c, g.scale(build_bn_penalty(g, task.model, net, *task.bn), cfg.lambda_bn));
        task_costs.push_back(c);
    }
    p.cost = g.sum_of(task_costs);

    if (z_reg_lambda > 0.0) {
        std::vector<Expr> regs;
        for (Expr z : z_exprs) regs.push_back(g.l2norm(z));
        p.cost = g.add(p.cost, g.scale(g.sum_of(regs), z_reg_lambda));
    }

    p.grads = g.derive(p.cost, p.opt);
    return p;
}

// ---------------------------------------------------------------------------
// Optimization driver

namespace {

struct PhaseSpec {
    Phase phase;
    std::int64_t iters;
    double lr;
    int label; // curve phase column
};

std::vector<PhaseSpec> phase_plan(const InversionConfig& cfg) {
    const std::int64_t total = cfg.total_iters();
    switch (cfg.mode) {
        case SearchMode::X: return {{Phase::InputSpace, total, cfg.eta_x, 1}};
        case SearchMode::Z: return {{Phase::LatentShared, total, cfg.eta_z, 1}};
        case SearchMode::W: return {{Phase::PerInstanceW, total, cfg.eta_w, 1}};
        case SearchMode::ZX:
            return {{Phase::LatentShared, cfg.iters_phase1, cfg.eta_z, 1},
                    {Phase::InputSpace, cfg.iters_phase2, cfg.eta_x, 2}};
        case SearchMode::ZW:
            return {{Phase::LatentShared, cfg.iters_phase1, cfg.eta_z, 1},
                    {Phase::PerInstanceW, cfg.iters_phase2, cfg.eta_w, 2}};
    }
    fail("invalid mode");
}

struct RestartResult {
    std::vector<Tensor> final_opt;  // values of the last phase's opt leaves
    std::vector<Tensor> images;     // clamped candidate images
    std::vector<Tensor> latents;
    std::vector<std::vector<Tensor>> adapted_w;
    std::vector<CurvePoint> curve;
    double final_cost = std::numeric_limits<double>::infinity();
    bool diverged = false;
};

// Runs one phase of Adam over a prepared program; returns final opt values and
// appends to the curve. Returns false on divergence.
bool run_phase(const CostProgram& prog, const InversionConfig& cfg, const PhaseSpec& spec,
               std::vector<Tensor>& opt_vals, std::span<const Tensor> fixed_vals,
               std::int64_t restart, std::vector<CurvePoint>& curve, double& final_cost) {
    Evaluator ev(prog.g);
    prog.bind_models(ev);
    check(fixed_vals.size() == prog.fixed.size(), "run_phase: fixed binding mismatch");
    for (std::size_t i = 0; i < prog.fixed.size(); ++i) ev.bind(prog.fixed[i], fixed_vals[i]);

    std::vector<Expr> roots = prog.grads;
    roots.push_back(prog.cost);

    Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::vector<Tensor> gvals(prog.grads.size());
    double cost = 0.0;
    for (std::int64_t it = 0; it <= spec.iters; ++it) {
        for (std::size_t i = 0; i < prog.opt.size(); ++i) ev.bind(prog.opt[i], opt_vals[i]);
        ev.ensure(roots);
        cost = ev.value(prog.cost).scalar_value();
        curve.push_back({restart, it, spec.label, cost});
        if (!std::isfinite(cost) || cost > cfg.divergence_threshold) return false;
        if (it == spec.iters) break; // final evaluation only
        for (std::size_t i = 0; i < prog.grads.size(); ++i) gvals[i] = ev.value(prog.grads[i]);
        adam.step(opt_vals, gvals, decayed_lr(spec.lr, it, spec.iters));
    }
    final_cost = cost;
    return true;
}

Tensor clamp01(Tensor t) {
    for (auto& v : t.data) v = std::clamp(v, 0.0, 1.0);
    return t;
}

} // namespace

static BatchEstimate invert_impl(std::span<const InversionTask> tasks, const InversionConfig& cfg,
                                 const GeneratorModel* gen) {
    cfg.validate();
    check(!tasks.empty(), "invert: no tasks");
    const auto& task0 = tasks[0];
    const std::int64_t B = task0.batch_size();
    check(B >= 1, "invert: empty batch");
    const auto plan = phase_plan(cfg);
    const bool needs_gen = cfg.mode != SearchMode::X;
    check(!needs_gen || gen != nullptr, "invert: mode ", search_mode_name(cfg.mode),
          " requires a generator");

    // Programs are phase-specific and shared across restarts (graphs are
    // immutable; every restart evaluates with its own workspace).
    std::vector<CostProgram> programs;
    for (const auto& spec : plan) programs.push_back(build_cost_program(tasks, cfg, gen, spec.phase));

    const std::int64_t R = cfg.restarts;
    std::vector<RestartResult> results(static_cast<std::size_t>(R));

#pragma omp parallel for schedule(dynamic) if (par::enabled())
    for (std::int64_t r = 0; r < R; ++r) {
        RestartResult& res = results[static_cast<std::size_t>(r)];
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(r)));

        // initial point
        std::vector<Tensor> zvals;
        for (std::int64_t j = 0; j < B; ++j)
            zvals.push_back(rng.normal_tensor({gen ? gen->latent_dim : 1}));
        std::vector<Tensor> opt_vals;
        switch (plan[0].phase) {
            case Phase::InputSpace:
                for (std::int64_t j = 0; j < B; ++j)
                    opt_vals.push_back(rng.uniform_tensor({task0.model.input_dim}, 0.0, 1.0));
                break;
            case Phase::LatentShared:
                opt_vals = zvals;
                break;
            case Phase::PerInstanceW:
                for (std::int64_t j = 0; j < B; ++j)
                    for (const Tensor* w : gen->params()) opt_vals.push_back(*w);
                break;
        }

        bool ok = true;
        for (std::size_t pi = 0; pi < plan.size() && ok; ++pi) {
            const auto& spec = plan[pi];
            const CostProgram& prog = programs[pi];

            // fixed leaves: generator weights in the shared-latent phase,
            // frozen latent codes in the per-instance phase
            std::vector<Tensor> fixed_vals;
            if (spec.phase == Phase::LatentShared)
                for (const Tensor* w : gen->params()) fixed_vals.push_back(*w);
            if (spec.phase == Phase::PerInstanceW) fixed_vals = zvals;

            // phase hand-off: initialize this phase from the previous result
            if (pi > 0) {
                if (spec.phase == Phase::InputSpace) {
                    // continue in input space from the generated images
                    const CostProgram& prev = programs[pi - 1];
                    Evaluator ev(prev.g);
                    prev.bind_models(ev);
                    for (std::size_t i = 0; i < prev.fixed.size(); ++i) {
                        // previous phase was LatentShared: fixed = generator weights
                        ev.bind(prev.fixed[i], *gen->params()[i]);
                    }
                    for (std::size_t i = 0; i < prev.opt.size(); ++i) ev.bind(prev.opt[i], opt_vals[i]);
                    std::vector<Tensor> ximgs;
                    for (Expr e : prev.images) {
                        Tensor img = ev.eval(e);
                        img.shape = {task0.model.input_dim};
                        ximgs.push_back(std::move(img));
                    }
                    zvals = opt_vals; // final latent codes, reported
                    opt_vals = std::move(ximgs);
                } else if (spec.phase == Phase::PerInstanceW) {
                    // freeze z at the phase-1 result; every instance starts
                    // from a copy of the shared weights
                    zvals = opt_vals;
                    fixed_vals = zvals;
                    opt_vals.clear();
                    for (std::int64_t j = 0; j < B; ++j)
                        for (const Tensor* w : gen->params()) opt_vals.push_back(*w);
                }
            }

            double fc = 0.0;
            ok = run_phase(prog, cfg, spec, opt_vals, fixed_vals, r, res.curve, fc);
            if (ok) res.final_cost = fc;
        }
        res.diverged = !ok;
        if (!ok) {
            res.final_cost = std::numeric_limits<double>::infinity();
        }

        // assemble the restart's estimate from the last phase it completed
        if (ok) {
            const auto& spec = plan.back();
            const CostProgram& prog = programs.back();
            Evaluator ev(prog.g);
            prog.bind_models(ev);
            std::vector<Tensor> fixed_vals;
            if (spec.phase == Phase::LatentShared)
                for (const Tensor* w : gen->params()) fixed_vals.push_back(*w);
            if (spec.phase == Phase::PerInstanceW) fixed_vals = zvals;
            for (std::size_t i = 0; i < prog.fixed.size(); ++i) ev.bind(prog.fixed[i], fixed_vals[i]);
            for (std::size_t i = 0; i < prog.opt.size(); ++i) ev.bind(prog.opt[i], opt_vals[i]);
            for (Expr e : prog.images) {
                Tensor img = ev.eval(e);
                img.shape = task0.model.input_shape;
                res.images.push_back(clamp01(std::move(img)));
            }
            if (spec.phase == Phase::LatentShared) res.latents = opt_vals;
            if (spec.phase == Phase::PerInstanceW) {
                res.latents = zvals;
                const std::size_t per = gen->params().size();
                for (std::int64_t j = 0; j < B; ++j)
                    res.adapted_w.emplace_back(opt_vals.begin() + static_cast<std::ptrdiff_t>(per * j),
                                               opt_vals.begin() + static_cast<std::ptrdiff_t>(per * (j + 1)));
            }
            res.final_opt = opt_vals;
        }
    }

    // pick the best completed restart
    std::int64_t best = 0;
    for (std::int64_t r = 1; r < R; ++r)
        if (results[static_cast<std::size_t>(r)].final_cost < results[static_cast<std::size_t>(best)].final_cost)
            best = r;

    BatchEstimate est;
    est.chosen_restart = best;
    for (const auto& r : results) est.diverged_restarts += r.diverged ? 1 : 0;
    check(est.diverged_restarts < R, "invert: every restart diverged");
    for (std::int64_t r = 0; r < R; ++r)
        for (const auto& pt : results[static_cast<std::size_t>(r)].curve) est.curve.push_back(pt);
    auto& chosen = results[static_cast<std::size_t>(best)];
    est.images = std::move(chosen.images);
    est.latents = std::move(chosen.latents);
    est.adapted_w = std::move(chosen.adapted_w);
    est.final_cost = chosen.final_cost;
    return est;
}

BatchEstimate invert(const InversionTask& task, const InversionConfig& cfg, const GeneratorModel* gen) {
    return invert_impl(std::span<const InversionTask>(&task, 1), cfg, gen);
}

BatchEstimate invert_multi(std::span<const InversionTask> tasks, const InversionConfig& cfg) {
    check(cfg.mode == SearchMode::X, "invert_multi: defined for input-space search");
    return invert_impl(tasks, cfg, nullptr);
}

} // namespace ginv
