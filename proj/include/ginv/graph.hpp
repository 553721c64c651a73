#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv {

// Differentiable computation graph.
//
// Nodes are append-only and operands always precede results, so node order is
// a topological order. Every operation's backward rule is expressed with graph
// operations again, which makes derive() composable: the gradient expressions
// it returns can be differentiated once more. That closure is what the
// inversion costs rely on (they contain parameter gradients and are then
// differentiated with respect to inputs, latent codes, or generator weights).
//
// A graph is immutable once building stops; Evaluators hold all mutable state,
// so concurrent evaluation from multiple threads is safe.

enum class Op : std::uint8_t {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Elu,
    Exp,
    Log,
    Heaviside,
    RecipOrZero,
    Sqrt,
    MatMul,
    Transpose,
    Reshape,
    Gather,
    ScatterAdd,
    Sum,
    Broadcast,
    StopMax,
};

const char* op_name(Op op);

struct Expr {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
    bool operator==(const Expr&) const = default;
};

constexpr std::uint32_t kNoArg = UINT32_MAX;

struct Node {
    Op op = Op::Leaf;
    std::uint32_t a = kNoArg;
    std::uint32_t b = kNoArg;
    double scalar = 0.0;     // Scale factor
    std::uint32_t aux = kNoArg; // Const payload index or Gather/ScatterAdd pattern index
    Shape shape;
    std::string name; // set for leaves, diagnostic only
};

class Graph {
public:
    Expr leaf(Shape shape, std::string name = "");
    Expr constant(Tensor value, std::string name = "");
    Expr scalar_const(double v) { return constant(Tensor::scalar(v)); }

    Expr add(Expr a, Expr b);
    Expr sub(Expr a, Expr b);
    Expr mul(Expr a, Expr b);
    Expr scale(Expr a, double c);
    Expr sigmoid(Expr a);
    Expr elu(Expr a);
    Expr exp(Expr a);
    Expr log(Expr a);
    Expr heaviside(Expr a);
    Expr recip_or_zero(Expr a);
    Expr sqrt(Expr a);
    Expr matmul(Expr a, Expr b);
    Expr transpose(Expr a);
    Expr reshape(Expr a, Shape shape);
    Expr gather(Expr a, std::uint32_t pattern, Shape out_shape);
    Expr scatter_add(Expr a, std::uint32_t pattern); // flat output of the pattern's source length
    Expr sum(Expr a);
    Expr broadcast(Expr scalar, Shape shape);
    Expr stopmax(Expr a); // max entry, treated as a constant by derive (log-sum-exp shift)

    // Composites.
    Expr neg(Expr a) { return scale(a, -1.0); }
    Expr square(Expr a) { return mul(a, a); }
    Expr div_by(Expr a, double positive_scalar);
    Expr mean(Expr a);
    Expr variance(Expr a); // population variance of all entries
    Expr l2norm(Expr a);   // sqrt(sum of squares); backward is 0 at the origin
    Expr inner(Expr a, Expr b);
    Expr sum_of(std::span<const Expr> scalars);
    Expr logsumexp(Expr v); // stable, exact derivatives of any order

    // Gather/scatter index patterns. `pat[i]` is the flat source index feeding
    // output element i, or -1 for a structural zero (padding). The inverse map
    // is precomputed so the scatter kernel is deterministic under OpenMP.
    std::uint32_t register_pattern(std::vector<std::int64_t> pat, std::int64_t src_numel);

    const Node& node(Expr e) const { return nodes_[e.id]; }
    std::size_t size() const { return nodes_.size(); }
    bool is_leaf(Expr e) const { return node(e).op == Op::Leaf; }

    // Symbolic reverse-mode differentiation of a scalar expression. Returns one
    // gradient expression per entry of `wrt` (zero tensors where the root does
    // not depend on the variable). The returned expressions live in this graph
    // and may be differentiated again.
    std::vector<Expr> derive(Expr scalar_root, std::span<const Expr> wrt);
    Expr derive1(Expr scalar_root, Expr wrt);

    struct Pattern {
        std::vector<std::int64_t> fwd;
        std::int64_t src_numel = 0;
        std::vector<std::int64_t> inv_off; // size src_numel + 1
        std::vector<std::int64_t> inv_idx;
    };
    const Pattern& pattern(std::uint32_t id) const { return patterns_[id]; }
    const Tensor& const_value(std::uint32_t id) const { return consts_[id]; }

private:
    friend class Evaluator;
    Expr push(Node n);
    std::vector<Node> nodes_;
    std::vector<Pattern> patterns_;
    std::vector<Tensor> consts_;
};

// Per-thread evaluation workspace over an immutable graph.
class Evaluator {
public:
    explicit Evaluator(const Graph& g);

    void bind(Expr leaf, const Tensor& value);
    void bind(Expr leaf, Tensor&& value);

    // Computes every node the roots depend on (reusing values computed since
    // the last bind) and keeps them accessible through value().
    void ensure(std::span<const Expr> roots);
    const Tensor& value(Expr e) const;
    Tensor eval(Expr root);
    double eval_scalar(Expr root);

private:
    void compute(std::uint32_t id);
    bool is_valid(std::uint32_t id) const;
    const Graph* g_;
    std::vector<Tensor> vals_;
    std::vector<std::uint64_t> computed_at_;
    std::vector<std::uint8_t> bound_;
    std::uint64_t version_ = 1;
    std::vector<std::uint32_t> stack_, order_; // scratch for ensure()
    std::vector<std::uint8_t> mark_;
};

// One-shot evaluation with explicit bindings.
Tensor eval(const Graph& g, Expr root, std::span<const std::pair<Expr, Tensor>> bindings);

// Central-difference gradient estimate of a scalar function, step > 0.
// The test oracle against which derive() is validated.
Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& point, double step);

// Image-shaped helpers built from gather + matmul (differentiable to any order
// like everything else in the graph).
Expr conv2d(Graph& g, Expr image_hwc, Expr kernel_hwio, std::int64_t stride, std::int64_t pad);
Expr upsample2x(Graph& g, Expr image_hwc);

} // namespace ginv
