#include "ginv/graph.hpp"

#include <algorithm>
#include <cmath>

#include "ginv/kernels.hpp"

namespace ginv {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Sigmoid: return "sigmoid";
        case Op::Elu: return "elu";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Heaviside: return "heaviside";
        case Op::RecipOrZero: return "recip_or_zero";
        case Op::Sqrt: return "sqrt";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::Gather: return "gather";
        case Op::ScatterAdd: return "scatter_add";
        case Op::Sum: return "sum";
        case Op::Broadcast: return "broadcast";
        case Op::StopMax: return "stopmax";
    }
    return "?";
}

Expr Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return Expr{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Expr Graph::leaf(Shape shape, std::string name) {
    Node n;
    n.op = Op::Leaf;
    n.shape = std::move(shape);
    n.name = std::move(name);
    return push(std::move(n));
}

Expr Graph::constant(Tensor value, std::string name) {
    Node n;
    n.op = Op::Const;
    n.shape = value.shape;
    n.name = std::move(name);
    n.aux = static_cast<std::uint32_t>(consts_.size());
    consts_.push_back(std::move(value));
    return push(std::move(n));
}

namespace {
void check_same(const char* op, const Shape& a, const Shape& b) {
    check(a == b, op, ": shape mismatch ", shape_str(a), " vs ", shape_str(b));
}
} // namespace

Expr Graph::add(Expr a, Expr b) {
    check_same("add", node(a).shape, node(b).shape);
    Node n;
    n.op = Op::Add;
    n.a = a.id;
    n.b = b.id;
    n.shape = node(a).shape;
    return push(std::move(n));
}

Expr Graph::sub(Expr a, Expr b) {
    check_same("sub", node(a).shape, node(b).shape);
    Node n;
    n.op = Op::Sub;
    n.a = a.id;
    n.b = b.id;
    n.shape = node(a).shape;
    return push(std::move(n));
}

Expr Graph::mul(Expr a, Expr b) {
    check_same("mul", node(a).shape, node(b).shape);
    Node n;
    n.op = Op::Mul;
    n.a = a.id;
    n.b = b.id;
    n.shape = node(a).shape;
    return push(std::move(n));
}

Expr Graph::scale(Expr a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.scalar = c;
    n.shape = node(a).shape;
    return push(std::move(n));
}

#define GINV_UNARY_BUILDER(FN, OPK)      \
    Expr Graph::FN(Expr a) {             \
        Node n;                          \
        n.op = Op::OPK;                  \
        n.a = a.id;                      \
        n.shape = node(a).shape;         \
        return push(std::move(n));       \
    }

GINV_UNARY_BUILDER(sigmoid, Sigmoid)
GINV_UNARY_BUILDER(elu, Elu)
GINV_UNARY_BUILDER(exp, Exp)
GINV_UNARY_BUILDER(log, Log)
GINV_UNARY_BUILDER(heaviside, Heaviside)
GINV_UNARY_BUILDER(recip_or_zero, RecipOrZero)
GINV_UNARY_BUILDER(sqrt, Sqrt)
#undef GINV_UNARY_BUILDER

Expr Graph::matmul(Expr a, Expr b) {
    const Shape& sa = node(a).shape;
    const Shape& sb = node(b).shape;
    check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul: incompatible shapes ", shape_str(sa), " and ", shape_str(sb));
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.shape = {sa[0], sb[1]};
    return push(std::move(n));
}

Expr Graph::transpose(Expr a) {
    const Shape& s = node(a).shape;
    check(s.size() == 2, "transpose: expected rank-2, got ", shape_str(s));
    Node n;
    n.op = Op::Transpose;
    n.a = a.id;
    n.shape = {s[1], s[0]};
    return push(std::move(n));
}

Expr Graph::reshape(Expr a, Shape shape) {
    check(shape_numel(shape) == shape_numel(node(a).shape),
          "reshape: cannot reshape ", shape_str(node(a).shape), " to ", shape_str(shape));
    if (shape == node(a).shape) return a;
    Node n;
    n.op = Op::Reshape;
    n.a = a.id;
    n.shape = std::move(shape);
    return push(std::move(n));
}

std::uint32_t Graph::register_pattern(std::vector<std::int64_t> pat, std::int64_t src_numel) {
    Pattern p;
    p.fwd = std::move(pat);
    p.src_numel = src_numel;
    p.inv_off.assign(static_cast<std::size_t>(src_numel) + 1, 0);
    for (auto s : p.fwd) {
        check(s < src_numel, "pattern: source index ", s, " out of range ", src_numel);
        if (s >= 0) ++p.inv_off[static_cast<std::size_t>(s) + 1];
    }
    for (std::size_t i = 1; i < p.inv_off.size(); ++i) p.inv_off[i] += p.inv_off[i - 1];
    p.inv_idx.resize(static_cast<std::size_t>(p.inv_off.back()));
    std::vector<std::int64_t> cursor(p.inv_off.begin(), p.inv_off.end() - 1);
    for (std::size_t i = 0; i < p.fwd.size(); ++i) {
        auto s = p.fwd[i];
        if (s >= 0) p.inv_idx[static_cast<std::size_t>(cursor[static_cast<std::size_t>(s)]++)] = static_cast<std::int64_t>(i);
    }
    patterns_.push_back(std::move(p));
    return static_cast<std::uint32_t>(patterns_.size() - 1);
}

Expr Graph::gather(Expr a, std::uint32_t pattern, Shape out_shape) {
    const Pattern& p = patterns_[pattern];
    check(p.src_numel == shape_numel(node(a).shape),
          "gather: pattern expects source of ", p.src_numel, " entries, got ", shape_str(node(a).shape));
    check(shape_numel(out_shape) == static_cast<std::int64_t>(p.fwd.size()),
          "gather: output shape ", shape_str(out_shape), " does not match pattern length ", p.fwd.size());
    Node n;
    n.op = Op::Gather;
    n.a = a.id;
    n.aux = pattern;
    n.shape = std::move(out_shape);
    return push(std::move(n));
}

Expr Graph::scatter_add(Expr a, std::uint32_t pattern) {
    const Pattern& p = patterns_[pattern];
    check(static_cast<std::int64_t>(p.fwd.size()) == shape_numel(node(a).shape),
          "scatter_add: pattern length ", p.fwd.size(), " does not match input ", shape_str(node(a).shape));
    Node n;
    n.op = Op::ScatterAdd;
    n.a = a.id;
    n.aux = pattern;
    n.shape = {p.src_numel};
    return push(std::move(n));
}

Expr Graph::sum(Expr a) {
    Node n;
    n.op = Op::Sum;
    n.a = a.id;
    n.shape = {};
    return push(std::move(n));
}

Expr Graph::broadcast(Expr scalar, Shape shape) {
    check(node(scalar).shape.empty(), "broadcast: expected scalar, got ", shape_str(node(scalar).shape));
    Node n;
    n.op = Op::Broadcast;
    n.a = scalar.id;
    n.shape = std::move(shape);
    return push(std::move(n));
}

Expr Graph::stopmax(Expr a) {
    Node n;
    n.op = Op::StopMax;
    n.a = a.id;
    n.shape = {};
    return push(std::move(n));
}

Expr Graph::div_by(Expr a, double positive_scalar) {
    check(positive_scalar > 0.0, "div_by: divisor must be positive, got ", positive_scalar);
    return scale(a, 1.0 / positive_scalar);
}

Expr Graph::mean(Expr a) {
    return div_by(sum(a), static_cast<double>(shape_numel(node(a).shape)));
}

Expr Graph::variance(Expr a) {
    const auto n = static_cast<double>(shape_numel(node(a).shape));
    Expr mu = mean(a);
    Expr centered = sub(a, broadcast(mu, node(a).shape));
    return div_by(sum(square(centered)), n);
}

Expr Graph::l2norm(Expr a) { return sqrt(sum(square(a))); }

Expr Graph::inner(Expr a, Expr b) { return sum(mul(a, b)); }

Expr Graph::sum_of(std::span<const Expr> scalars) {
    if (scalars.empty()) return scalar_const(0.0);
    Expr acc = scalars[0];
    for (std::size_t i = 1; i < scalars.size(); ++i) acc = add(acc, scalars[i]);
    return acc;
}

Expr Graph::logsumexp(Expr v) {
    Expr m = stopmax(v);
    Expr shifted = sub(v, broadcast(m, node(v).shape));
    Expr s = sum(exp(shifted));
    return add(log(s), m);
}

std::vector<Expr> Graph::derive(Expr scalar_root, std::span<const Expr> wrt) {
    check(scalar_root.valid() && scalar_root.id < nodes_.size(), "derive: invalid root");
    check(node(scalar_root).shape.empty(),
          "derive: root must be scalar, got ", shape_str(node(scalar_root).shape));
    for (Expr w : wrt)
        check(is_leaf(w), "derive: derivative target must be a leaf, got ", op_name(node(w).op));

    const std::uint32_t R = scalar_root.id;
    std::vector<std::uint8_t> needed(R + 1, 0);
    {
        std::vector<std::uint32_t> stack{R};
        needed[R] = 1;
        while (!stack.empty()) {
            std::uint32_t id = stack.back();
            stack.pop_back();
            const Node& n = nodes_[id];
            for (std::uint32_t arg : {n.a, n.b}) {
                if (arg != kNoArg && !needed[arg]) {
                    needed[arg] = 1;
                    stack.push_back(arg);
                }
            }
        }
    }

    std::vector<Expr> adj(R + 1);
    adj[R] = scalar_const(1.0);
    auto accum = [&](std::uint32_t target, Expr contrib) {
        if (!adj[target].valid())
            adj[target] = contrib;
        else
            adj[target] = add(adj[target], contrib);
    };

    for (std::uint32_t id = R;; --id) {
        if (needed[id] && adj[id].valid()) {
            const Node n = nodes_[id]; // copy: pushes below may reallocate nodes_
            const Expr out{id};
            const Expr g = adj[id];
            const Expr A{n.a};
            const Expr B{n.b};
            switch (n.op) {
                case Op::Leaf:
                case Op::Const:
                case Op::Heaviside:
                case Op::StopMax:
                    break;
                case Op::Add:
                    accum(n.a, g);
                    accum(n.b, g);
                    break;
                case Op::Sub:
                    accum(n.a, g);
                    accum(n.b, neg(g));
                    break;
                case Op::Mul:
                    accum(n.a, mul(g, B));
                    accum(n.b, mul(g, A));
                    break;
                case Op::Scale:
                    accum(n.a, scale(g, n.scalar));
                    break;
                case Op::Sigmoid: {
                    Expr ones = constant(Tensor::full(n.shape, 1.0));
                    accum(n.a, mul(g, mul(out, sub(ones, out))));
                    break;
                }
                case Op::Elu: {
                    // elu'(x) = 1 for x > 0, e^x otherwise; the masked exponent
                    // x * (1 - H(x)) avoids overflow for large positive x.
                    Expr ones = constant(Tensor::full(n.shape, 1.0));
                    Expr h = heaviside(A);
                    Expr nh = sub(ones, h);
                    Expr d = add(h, mul(nh, exp(mul(A, nh))));
                    accum(n.a, mul(g, d));
                    break;
                }
                case Op::Exp:
                    accum(n.a, mul(g, out));
                    break;
                case Op::Log:
                    accum(n.a, mul(g, recip_or_zero(A)));
                    break;
                case Op::RecipOrZero:
                    accum(n.a, scale(mul(g, square(out)), -1.0));
                    break;
                case Op::Sqrt:
                    accum(n.a, scale(mul(g, recip_or_zero(out)), 0.5));
                    break;
                case Op::MatMul:
                    accum(n.a, matmul(g, transpose(B)));
                    accum(n.b, matmul(transpose(A), g));
                    break;
                case Op::Transpose:
                    accum(n.a, transpose(g));
                    break;
                case Op::Reshape:
                    accum(n.a, reshape(g, nodes_[n.a].shape));
                    break;
                case Op::Gather:
                    accum(n.a, reshape(scatter_add(g, n.aux), nodes_[n.a].shape));
                    break;
                case Op::ScatterAdd: {
                    const Pattern& p = patterns_[n.aux];
                    Shape flat{static_cast<std::int64_t>(p.fwd.size())};
                    accum(n.a, reshape(gather(g, n.aux, std::move(flat)), nodes_[n.a].shape));
                    break;
                }
                case Op::Sum:
                    accum(n.a, broadcast(g, nodes_[n.a].shape));
                    break;
                case Op::Broadcast:
                    accum(n.a, sum(g));
                    break;
                default:
                    fail("derive: unsupported op ", op_name(n.op));
            }
        }
        if (id == 0) break;
    }

    std::vector<Expr> out;
    out.reserve(wrt.size());
    for (Expr w : wrt) {
        if (w.id <= R && adj[w.id].valid())
            out.push_back(adj[w.id]);
        else
            out.push_back(constant(Tensor::zeros(node(w).shape)));
    }
    return out;
}

Expr Graph::derive1(Expr scalar_root, Expr wrt) {
    Expr w[1] = {wrt};
    return derive(scalar_root, w)[0];
}

// ---------------------------------------------------------------------------
// Evaluator

Evaluator::Evaluator(const Graph& g) : g_(&g) {}

bool Evaluator::is_valid(std::uint32_t id) const {
    const Node& n = g_->nodes_[id];
    if (n.op == Op::Leaf) return bound_[id] != 0;
    if (id >= computed_at_.size()) return false;
    if (n.op == Op::Const) return computed_at_[id] == UINT64_MAX;
    return computed_at_[id] == version_;
}

void Evaluator::bind(Expr leaf, const Tensor& value) { bind(leaf, Tensor(value)); }

void Evaluator::bind(Expr leaf, Tensor&& value) {
    const std::size_t sz = g_->size();
    if (vals_.size() < sz) {
        vals_.resize(sz);
        computed_at_.resize(sz, 0);
        bound_.resize(sz, 0);
    }
    check(g_->is_leaf(leaf), "bind: target is not a leaf");
    check_same("bind", g_->node(leaf).shape, value.shape);
    vals_[leaf.id] = std::move(value);
    bound_[leaf.id] = 1;
    ++version_;
}

void Evaluator::ensure(std::span<const Expr> roots) {
    const std::size_t sz = g_->size();
    if (vals_.size() < sz) {
        vals_.resize(sz);
        computed_at_.resize(sz, 0);
        bound_.resize(sz, 0);
    }
    if (mark_.size() < sz) mark_.resize(sz);
    std::fill(mark_.begin(), mark_.end(), 0);
    order_.clear();
    stack_.clear();
    for (Expr r : roots) {
        check(r.valid() && r.id < sz, "eval: invalid expression");
        if (!is_valid(r.id) && !mark_[r.id]) {
            mark_[r.id] = 1;
            stack_.push_back(r.id);
        }
    }
    while (!stack_.empty()) {
        std::uint32_t id = stack_.back();
        stack_.pop_back();
        order_.push_back(id);
        const Node& n = g_->nodes_[id];
        for (std::uint32_t arg : {n.a, n.b}) {
            if (arg != kNoArg && !mark_[arg] && !is_valid(arg)) {
                mark_[arg] = 1;
                stack_.push_back(arg);
            }
        }
    }
    std::sort(order_.begin(), order_.end());
    for (std::uint32_t id : order_) compute(id);
}

void Evaluator::compute(std::uint32_t id) {
    const Node& n = g_->nodes_[id];
    const auto numel = shape_numel(n.shape);
    Tensor& out = vals_[id];
    auto arg = [&](std::uint32_t a) -> const Tensor& { return vals_[a]; };

    switch (n.op) {
        case Op::Leaf:
            fail("eval: unbound leaf '", n.name.empty() ? std::to_string(id) : n.name, "'");
        case Op::Const:
            out = g_->consts_[n.aux];
            computed_at_[id] = UINT64_MAX;
            return;
        default:
            break;
    }

    out.shape = n.shape;
    out.data.resize(static_cast<std::size_t>(numel));
    double* y = out.data.data();

    switch (n.op) {
        case Op::Add: kern::add(arg(n.a).data.data(), arg(n.b).data.data(), y, numel); break;
        case Op::Sub: kern::sub(arg(n.a).data.data(), arg(n.b).data.data(), y, numel); break;
        case Op::Mul: kern::mul(arg(n.a).data.data(), arg(n.b).data.data(), y, numel); break;
        case Op::Scale: kern::scale(arg(n.a).data.data(), n.scalar, y, numel); break;
        case Op::Sigmoid: kern::sigmoid(arg(n.a).data.data(), y, numel); break;
        case Op::Elu: kern::elu(arg(n.a).data.data(), y, numel); break;
        case Op::Exp: kern::exp(arg(n.a).data.data(), y, numel); break;
        case Op::Log: kern::log(arg(n.a).data.data(), y, numel); break;
        case Op::Heaviside: kern::heaviside(arg(n.a).data.data(), y, numel); break;
        case Op::RecipOrZero: kern::recip_or_zero(arg(n.a).data.data(), y, numel); break;
        case Op::Sqrt: kern::sqrt(arg(n.a).data.data(), y, numel); break;
        case Op::MatMul: {
            const Shape& sa = g_->nodes_[n.a].shape;
            kern::matmul(arg(n.a).data.data(), arg(n.b).data.data(), y, sa[0], sa[1], n.shape[1]);
            break;
        }
        case Op::Transpose: {
            const Shape& sa = g_->nodes_[n.a].shape;
            kern::transpose(arg(n.a).data.data(), y, sa[0], sa[1]);
            break;
        }
        case Op::Reshape: {
            const Tensor& src = arg(n.a);
            std::copy(src.data.begin(), src.data.end(), out.data.begin());
            break;
        }
        case Op::Gather: {
            const auto& p = g_->patterns_[n.aux];
            kern::gather(arg(n.a).data.data(), p.fwd.data(), y, numel);
            break;
        }
        case Op::ScatterAdd: {
            const auto& p = g_->patterns_[n.aux];
            kern::scatter_sum(arg(n.a).data.data(), p.inv_off.data(), p.inv_idx.data(), y, p.src_numel);
            break;
        }
        case Op::Sum: y[0] = kern::reduce_sum(arg(n.a).data.data(), shape_numel(g_->nodes_[n.a].shape)); break;
        case Op::StopMax: y[0] = kern::reduce_max(arg(n.a).data.data(), shape_numel(g_->nodes_[n.a].shape)); break;
        case Op::Broadcast: std::fill(out.data.begin(), out.data.end(), arg(n.a).data[0]); break;
        default: fail("eval: unsupported op ", op_name(n.op));
    }
    computed_at_[id] = version_;
}

const Tensor& Evaluator::value(Expr e) const {
    check(e.valid() && e.id < vals_.size() && is_valid(e.id), "evaluator: value not computed");
    return vals_[e.id];
}

Tensor Evaluator::eval(Expr root) {
    Expr roots[1] = {root};
    ensure(roots);
    return value(root);
}

double Evaluator::eval_scalar(Expr root) { return eval(root).scalar_value(); }

Tensor eval(const Graph& g, Expr root, std::span<const std::pair<Expr, Tensor>> bindings) {
    Evaluator ev(g);
    for (const auto& [e, t] : bindings) ev.bind(e, t);
    return ev.eval(root);
}

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& point, double step) {
    check(step > 0.0, "finite_diff: step must be positive, got ", step);
    Tensor grad = Tensor::zeros(point.shape);
    Tensor p = point;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double x = p[i];
        p[i] = x + step;
        const double f1 = f(p);
        p[i] = x - step;
        const double f2 = f(p);
        p[i] = x;
        check(std::isfinite(f1) && std::isfinite(f2), "finite_diff: non-finite function value");
        grad[i] = (f1 - f2) / (2.0 * step);
    }
    return grad;
}

// ---------------------------------------------------------------------------
// Convolution and upsampling as gather + matmul

Expr conv2d(Graph& g, Expr image_hwc, Expr kernel_hwio, std::int64_t stride, std::int64_t pad) {
    const Shape& xs = g.node(image_hwc).shape;
    const Shape& ks = g.node(kernel_hwio).shape;
    check(xs.size() == 3, "conv2d: image must be HxWxC, got ", shape_str(xs));
    check(ks.size() == 4, "conv2d: kernel must be KhxKwxCinxCout, got ", shape_str(ks));
    check(xs[2] == ks[2], "conv2d: channel mismatch ", shape_str(xs), " vs ", shape_str(ks));
    check(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2, got ", stride);
    check(pad >= 0, "conv2d: negative padding");
    const std::int64_t H = xs[0], W = xs[1], C = xs[2];
    const std::int64_t Kh = ks[0], Kw = ks[1], Cout = ks[3];
    const std::int64_t Hout = (H + 2 * pad - Kh) / stride + 1;
    const std::int64_t Wout = (W + 2 * pad - Kw) / stride + 1;
    check(Hout >= 1 && Wout >= 1, "conv2d: kernel larger than padded image");

    std::vector<std::int64_t> pat;
    pat.reserve(static_cast<std::size_t>(Hout * Wout * Kh * Kw * C));
    for (std::int64_t oh = 0; oh < Hout; ++oh) {
        for (std::int64_t ow = 0; ow < Wout; ++ow) {
            for (std::int64_t kh = 0; kh < Kh; ++kh) {
                for (std::int64_t kw = 0; kw < Kw; ++kw) {
                    const std::int64_t ih = oh * stride + kh - pad;
                    const std::int64_t iw = ow * stride + kw - pad;
                    for (std::int64_t c = 0; c < C; ++c) {
                        if (ih < 0 || ih >= H || iw < 0 || iw >= W)
                            pat.push_back(-1);
                        else
                            pat.push_back((ih * W + iw) * C + c);
                    }
                }
            }
        }
    }
    const std::uint32_t pid = g.register_pattern(std::move(pat), H * W * C);
    Expr cols = g.gather(image_hwc, pid, {Hout * Wout, Kh * Kw * C});
    Expr kmat = g.reshape(kernel_hwio, {Kh * Kw * C, Cout});
    return g.reshape(g.matmul(cols, kmat), {Hout, Wout, Cout});
}

Expr upsample2x(Graph& g, Expr image_hwc) {
    const Shape& xs = g.node(image_hwc).shape;
    check(xs.size() == 3, "upsample2x: image must be HxWxC, got ", shape_str(xs));
    const std::int64_t H = xs[0], W = xs[1], C = xs[2];
    std::vector<std::int64_t> pat;
    pat.reserve(static_cast<std::size_t>(4 * H * W * C));
    for (std::int64_t oh = 0; oh < 2 * H; ++oh)
        for (std::int64_t ow = 0; ow < 2 * W; ++ow)
            for (std::int64_t c = 0; c < C; ++c) pat.push_back(((oh / 2) * W + (ow / 2)) * C + c);
    const std::uint32_t pid = g.register_pattern(std::move(pat), H * W * C);
    return g.gather(image_hwc, pid, {2 * H, 2 * W, C});
}

} // namespace ginv
