#include "ginv/rgap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Dense>

#include "ginv/optim.hpp"

namespace ginv {

namespace {

constexpr double kInvMargin = 1e-9;

struct Trace {
    std::vector<Tensor> preact;
    std::vector<Tensor> act;
};

// dense-only forward pass keeping every layer's pre-activation and activation
Trace forward_trace(const ClassifierModel& model, const Tensor& x) {
    Trace tr;
    std::vector<double> cur(x.data);
    for (const auto& l : model.layers) {
        check(l.kind == LayerKind::Dense, "rgap: dense layers only");
        const std::int64_t out = l.weights.shape[0], in = l.weights.shape[1];
        check(static_cast<std::int64_t>(cur.size()) == in, "rgap: layer size mismatch");
        std::vector<double> pre(static_cast<std::size_t>(out));
        for (std::int64_t i = 0; i < out; ++i) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < in; ++k) acc += l.weights[i * in + k] * cur[static_cast<std::size_t>(k)];
            if (l.has_bias) acc += l.bias[i];
            pre[static_cast<std::size_t>(i)] = acc;
        }
        std::vector<double> post = pre;
        for (auto& v : post) {
            if (l.act == Activation::Sigmoid) v = 1.0 / (1.0 + std::exp(-v));
            if (l.act == Activation::Elu) v = v > 0.0 ? v : std::expm1(v);
        }
        tr.preact.push_back(Tensor({out}, pre));
        tr.act.push_back(Tensor({out}, post));
        cur = std::move(post);
    }
    return tr;
}

double invert_activation(Activation act, double a, bool& clamped) {
    switch (act) {
        case Activation::None:
            return a;
        case Activation::Sigmoid: {
            double c = a;
            if (c < kInvMargin) {
                c = kInvMargin;
                clamped = true;
            }
            if (c > 1.0 - kInvMargin) {
                c = 1.0 - kInvMargin;
                clamped = true;
            }
            return std::log(c / (1.0 - c));
        }
        case Activation::Elu: {
            if (a > 0.0) return a;
            double c = a;
            if (c < -1.0 + kInvMargin) {
                c = -1.0 + kInvMargin;
                clamped = true;
            }
            return std::log1p(c);
        }
    }
    return a;
}

double act_derivative(Activation act, double preact) {
    switch (act) {
        case Activation::None: return 1.0;
        case Activation::Sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-preact));
            return s * (1.0 - s);
        }
        case Activation::Elu: return preact > 0.0 ? 1.0 : std::exp(preact);
    }
    return 1.0;
}

// delta_{r} = Theta_{r+1}^T delta_{r+1} (elementwise) act'(preact_r)
Tensor backprop_delta(const Layer& upper, const Tensor& delta_upper, Activation act,
                      const Tensor& preact) {
    const std::int64_t out = upper.weights.shape[0], in = upper.weights.shape[1];
    Tensor d = Tensor::zeros({in});
    for (std::int64_t j = 0; j < in; ++j) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < out; ++i) acc += upper.weights[i * in + j] * delta_upper[i];
        d[j] = acc * act_derivative(act, preact[j]);
    }
    return d;
}

std::size_t weight_grad_index(const ClassifierModel& model, std::size_t layer) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < layer; ++i) idx += model.layers[i].has_bias ? 2 : 1;
    return idx;
}

} // namespace

LayerSystem build_layer_system(const ClassifierModel& model, std::size_t layer_r,
                               const Tensor& delta_r, const Tensor& grad_r,
                               const Tensor* preact_r) {
    check(layer_r < model.layers.size(), "rgap: layer index out of range");
    const Layer& l = model.layers[layer_r];
    check(l.kind == LayerKind::Dense, "rgap: dense layers only");
    const std::int64_t out = l.weights.shape[0], in = l.weights.shape[1];
    check(delta_r.numel() == out, "rgap: delta length ", delta_r.numel(), " vs layer output ", out);
    check(grad_r.numel() == out * in, "rgap: gradient shape does not match layer");

    bool any_nonzero = false;
    for (std::int64_t i = 0; i < out; ++i)
        if (delta_r[i] != 0.0) any_nonzero = true;
    check(any_nonzero, "rgap: all-zero backprop signal at layer ", layer_r, " (no signal to invert)");

    LayerSystem sys;
    sys.layer = static_cast<std::int64_t>(layer_r);
    sys.cols = in;
    std::vector<std::int64_t> kept;
    for (std::int64_t i = 0; i < out; ++i)
        if (std::fabs(delta_r[i]) > kDeltaThreshold) kept.push_back(i);
    sys.gradient_rows = static_cast<std::int64_t>(kept.size()) * in;
    const std::int64_t weight_rows = preact_r ? out : 0;
    sys.rows = sys.gradient_rows + weight_rows;
    check(sys.rows > 0, "rgap: empty system at layer ", layer_r,
          " (all gradient rows below threshold and no pre-activation target)");
    sys.A.assign(static_cast<std::size_t>(sys.rows * sys.cols), 0.0);
    sys.b.assign(static_cast<std::size_t>(sys.rows), 0.0);

    std::int64_t row = 0;
    for (std::int64_t ki = 0; ki < static_cast<std::int64_t>(kept.size()); ++ki) {
        const std::int64_t i = kept[static_cast<std::size_t>(ki)];
        for (std::int64_t j = 0; j < in; ++j, ++row) {
            sys.A[static_cast<std::size_t>(row * in + j)] = delta_r[i];
            sys.b[static_cast<std::size_t>(row)] = grad_r[i * in + j];
        }
    }
    if (preact_r) {
        check(preact_r->numel() == out, "rgap: pre-activation target length mismatch");
        for (std::int64_t i = 0; i < out; ++i, ++row) {
            for (std::int64_t j = 0; j < in; ++j)
                sys.A[static_cast<std::size_t>(row * in + j)] = l.weights[i * in + j];
            sys.b[static_cast<std::size_t>(row)] = (*preact_r)[i] - (l.has_bias ? l.bias[i] : 0.0);
        }
    }
    return sys;
}

Tensor solve_pinv(LayerSystem& sys) {
    check(sys.rows > 0 && sys.cols > 0, "solve_pinv: empty system");
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> A(sys.A.data(), sys.rows, sys.cols);
    Eigen::Map<const Eigen::VectorXd> b(sys.b.data(), sys.rows);

    Eigen::BDCSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double cutoff = sv.size() ? 1e-10 * sv(0) : 0.0;
    std::int64_t rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > cutoff) ++rank;
    Eigen::VectorXd uty = svd.matrixU().transpose() * b;
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(sv.size());
    for (Eigen::Index i = 0; i < rank; ++i) coef(i) = uty(i) / sv(i);
    Eigen::VectorXd x = svd.matrixV() * coef;

    sys.rank = rank;
    sys.residual = (A * x - b).norm();
    Tensor out = Tensor::zeros({sys.cols});
    for (std::int64_t i = 0; i < sys.cols; ++i) out[i] = x(i);
    return out;
}

namespace {

struct Recursion {
    const ClassifierModel& model;
    const GradientReport& report;
    RgapResult& res;
    const Tensor* truth;

    // per-layer truth activations for error reporting
    std::vector<Tensor> truth_act;

    void note_solution(std::size_t layer_r, const Tensor& sol, double residual) {
        res.layers.push_back(static_cast<std::int64_t>(layer_r));
        res.layer_inputs.push_back(sol);
        res.residuals.push_back(residual);
        if (truth) {
            const Tensor& ref = layer_r == 0 ? *truth : truth_act[layer_r - 1];
            double e2 = 0.0;
            for (std::int64_t i = 0; i < sol.numel(); ++i) {
                const double d = sol[i] - ref[i];
                e2 += d * d;
            }
            res.recon_errors.push_back(std::sqrt(e2));
        }
    }
};

} // namespace

static RgapResult rgap_run(const ClassifierModel& model, const GradientReport& report,
                           const GeneratorModel* gen, const RgapGenConfig* gcfg,
                           const Tensor* truth) {
    model.validate();
    check(report.batch_size == 1, "rgap: single-sample reports only (B=1), got B=", report.batch_size);
    for (const auto& l : model.layers) check(l.kind == LayerKind::Dense, "rgap: dense layers only");

    RgapResult res;
    Recursion rec{model, report, res, truth, {}};
    if (truth) {
        Tensor flat = *truth;
        flat.shape = {model.input_dim};
        rec.truth_act = forward_trace(model, flat).act;
    }

    const std::size_t R = model.layers.size();
    // top-layer backprop signal: the final bias gradient (softmax probabilities
    // minus the one-hot label)
    Tensor delta = report.grads.back();

    Tensor current; // reconstructed input of the layer just solved
    for (std::size_t ri = R; ri-- > 0;) {
        const Layer& l = model.layers[ri];
        const Tensor& wgrad = report.grads[weight_grad_index(model, ri)];

        Tensor preact_target;
        const Tensor* preact_ptr = nullptr;
        if (ri + 1 < R) {
            // invert the activation of this layer's reconstructed output
            bool clamped = false;
            preact_target = Tensor::zeros(current.shape);
            for (std::int64_t i = 0; i < current.numel(); ++i)
                preact_target[i] = invert_activation(l.act, current[i], clamped);
            if (clamped)
                res.warnings.push_back(format_msg("layer ", ri,
                                                  ": activation inverse clamped into its domain"));
            preact_ptr = &preact_target;
        }

        const bool replaced = gcfg && std::find(gcfg->replace_layers.begin(), gcfg->replace_layers.end(),
                                                ri) != gcfg->replace_layers.end();
        LayerSystem sys = build_layer_system(model, ri, delta, wgrad, preact_ptr);
        Tensor sol;
        if (!replaced) {
            sol = solve_pinv(sys);
        } else {
            check(gen, "rgap: generative replacement requires a generator");
            // min over z of ||A f_prefix(G(z)) - b|| with the first `ri` layers
            // as the prefix
            Graph g;
            Expr z = g.leaf({gen->latent_dim}, "z");
            GeneratorNet gnet = build_generator_net(g, *gen, z);
            Expr cur = g.reshape(gnet.flat, {1, model.input_dim});
            for (std::size_t li = 0; li < ri; ++li) {
                const Layer& pl = model.layers[li];
                Expr w = g.constant(pl.weights);
                Expr pre = g.matmul(cur, g.transpose(w));
                if (pl.has_bias) {
                    Tensor bt = pl.bias;
                    bt.shape = {1, pl.bias.numel()};
                    pre = g.add(pre, g.constant(std::move(bt)));
                }
                switch (pl.act) {
                    case Activation::None: cur = pre; break;
                    case Activation::Sigmoid: cur = g.sigmoid(pre); break;
                    case Activation::Elu: cur = g.elu(pre); break;
                }
            }
            Expr u = g.reshape(cur, {sys.cols, 1});
            Tensor At({sys.rows, sys.cols}, sys.A);
            Tensor bt({sys.rows, 1}, sys.b);
            Expr obj = g.l2norm(g.sub(g.matmul(g.constant(std::move(At)), u), g.constant(std::move(bt))));

            std::vector<Expr> opt{z};
            if (gcfg->optimize_w) opt.insert(opt.end(), gnet.w.begin(), gnet.w.end());
            std::vector<Expr> grads = g.derive(obj, opt);
            std::vector<Expr> roots = grads;
            roots.push_back(obj);
            roots.push_back(u);

            Rng rng(derive_seed(gcfg->seed, static_cast<std::uint64_t>(ri)));
            std::vector<Tensor> vals;
            vals.push_back(rng.normal_tensor({gen->latent_dim}));
            if (gcfg->optimize_w)
                for (const Tensor* w : gen->params()) vals.push_back(*w);

            Evaluator ev(g);
            if (!gcfg->optimize_w) bind_generator(ev, gnet, *gen);
            Adam adam;
            std::vector<Tensor> gvals(opt.size());
            for (std::int64_t it = 0; it < gcfg->iterations; ++it) {
                for (std::size_t i = 0; i < opt.size(); ++i) ev.bind(opt[i], vals[i]);
                ev.ensure(roots);
                for (std::size_t i = 0; i < opt.size(); ++i) gvals[i] = ev.value(grads[i]);
                adam.step(vals, gvals, decayed_lr(gcfg->lr, it, gcfg->iterations));
            }
            for (std::size_t i = 0; i < opt.size(); ++i) ev.bind(opt[i], vals[i]);
            ev.ensure(roots);
            sol = ev.value(u);
            sol.shape = {sys.cols};
            // residual of the generative solution against the same system
            sys.residual = ev.value(obj).scalar_value();
            sys.rank = -1;
        }
        rec.note_solution(ri, sol, sys.residual);
        current = sol;

        if (ri > 0) {
            // backprop signal for the next layer down
            bool clamped = false;
            Tensor pre_below = Tensor::zeros(current.shape);
            const Layer& below = model.layers[ri - 1];
            for (std::int64_t i = 0; i < current.numel(); ++i)
                pre_below[i] = invert_activation(below.act, current[i], clamped);
            if (clamped)
                res.warnings.push_back(format_msg("layer ", ri - 1,
                                                  ": activation inverse clamped into its domain"));
            delta = backprop_delta(l, delta, below.act, pre_below);
        }
    }

    res.input = current;
    return res;
}

RgapResult rgap_recursive(const ClassifierModel& model, const GradientReport& report,
                          const Tensor* truth) {
    return rgap_run(model, report, nullptr, nullptr, truth);
}

RgapResult rgap_generative(const ClassifierModel& model, const GradientReport& report,
                           const GeneratorModel& gen, const RgapGenConfig& cfg,
                           const Tensor* truth) {
    return rgap_run(model, report, &gen, &cfg, truth);
}

void write_rgap_curve(const RgapResult& res, const std::string& path) {
    std::ofstream os(path);
    check(os.good(), "cannot open '", path, "' for writing");
    os << "layer,residual,recon_error\n";
    for (std::size_t i = 0; i < res.layers.size(); ++i) {
        os << res.layers[i] << "," << fmt_g(res.residuals[i]) << ",";
        if (i < res.recon_errors.size())
            os << fmt_g(res.recon_errors[i]);
        else
            os << "n/a";
        os << "\n";
    }
    check(os.good(), "write failed for '", path, "'");
}

} // namespace ginv
