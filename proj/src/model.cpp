#include "ginv/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ginv/optim.hpp"

namespace ginv {

using nlohmann::json;

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::None: return "none";
        case Activation::Sigmoid: return "sigmoid";
        case Activation::Elu: return "elu";
    }
    return "?";
}

Activation activation_from(const std::string& s) {
    if (s == "none") return Activation::None;
    if (s == "sigmoid") return Activation::Sigmoid;
    if (s == "elu") return Activation::Elu;
    fail("unknown activation '", s, "'");
}

// ---------------------------------------------------------------------------
// Validation

void ClassifierModel::validate() const {
    check(!layers.empty(), "classifier '", id, "': no layers");
    check(input_dim == shape_numel(input_shape), "classifier '", id, "': input_dim ", input_dim,
          " does not match input_shape ", shape_str(input_shape));
    const Layer& last = layers.back();
    check(last.kind == LayerKind::Dense, "classifier '", id, "': final layer must be dense");
    check(last.act == Activation::None, "classifier '", id, "': final layer must emit raw logits");
    check(last.has_bias, "classifier '", id, "': final layer must have a bias term");
    check(last.weights.shape[0] == label_count, "classifier '", id, "': final layer emits ",
          last.weights.shape[0], " logits, expected ", label_count);

    // shape composition
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        if (l.kind == LayerKind::Dense) {
            check(l.weights.rank() == 2, "classifier '", id, "': dense layer ", i, " weights rank");
            check(l.weights.shape[1] == shape_numel(cur), "classifier '", id, "': layer ", i,
                  " expects ", l.weights.shape[1], " inputs, gets ", shape_numel(cur));
            if (l.has_bias) check(l.bias.shape == Shape{l.weights.shape[0]}, "classifier '", id, "': layer ", i, " bias shape");
            cur = {l.weights.shape[0]};
        } else {
            check(cur.size() == 3, "classifier '", id, "': conv layer ", i, " needs spatial input");
            check(l.weights.rank() == 4 && l.weights.shape[2] == cur[2], "classifier '", id,
                  "': conv layer ", i, " kernel ", shape_str(l.weights.shape), " vs input ", shape_str(cur));
            const std::int64_t H = (cur[0] + 2 * l.pad - l.weights.shape[0]) / l.stride + 1;
            const std::int64_t W = (cur[1] + 2 * l.pad - l.weights.shape[1]) / l.stride + 1;
            check(H >= 1 && W >= 1, "classifier '", id, "': conv layer ", i, " output collapses");
            if (l.has_bias) check(l.bias.shape == Shape{l.weights.shape[3]}, "classifier '", id, "': layer ", i, " bias shape");
            cur = {H, W, l.weights.shape[3]};
        }
    }
    check(shape_numel(cur) == label_count, "classifier '", id, "': output size mismatch");
}

std::int64_t ClassifierModel::param_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers) {
        n += l.weights.numel();
        if (l.has_bias) n += l.bias.numel();
    }
    return n;
}

void GeneratorModel::validate() const {
    check(latent_dim >= 1, "generator '", id, "': latent_dim");
    check(latent_dim <= shape_numel(output_shape), "generator '", id, "': latent dim exceeds output dim");
    check(!blocks.empty(), "generator '", id, "': no blocks");
}

std::vector<const Tensor*> GeneratorModel::params() const {
    std::vector<const Tensor*> out;
    for (const auto& b : blocks) {
        if (b.kind == Block::Kind::Reshape) continue;
        out.push_back(&b.weights);
        out.push_back(&b.bias);
    }
    return out;
}

std::vector<Tensor*> GeneratorModel::params() {
    std::vector<Tensor*> out;
    for (auto& b : blocks) {
        if (b.kind == Block::Kind::Reshape) continue;
        out.push_back(&b.weights);
        out.push_back(&b.bias);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph builders

namespace {

Expr apply_act(Graph& g, Expr e, Activation act) {
    switch (act) {
        case Activation::None: return e;
        case Activation::Sigmoid: return g.sigmoid(e);
        case Activation::Elu: return g.elu(e);
    }
    return e;
}

// bias (C) broadcast over an (H, W, C) image
Expr add_conv_bias(Graph& g, Expr image, Expr bias) {
    const Shape& s = g.node(image).shape;
    const std::int64_t H = s[0], W = s[1], C = s[2];
    std::vector<std::int64_t> pat;
    pat.reserve(static_cast<std::size_t>(H * W * C));
    for (std::int64_t i = 0; i < H * W; ++i)
        for (std::int64_t c = 0; c < C; ++c) pat.push_back(c);
    auto pid = g.register_pattern(std::move(pat), C);
    return g.add(image, g.gather(bias, pid, s));
}

Expr dense_apply(Graph& g, Expr row, Expr w, Expr b, bool has_bias) {
    Expr out = g.matmul(row, g.transpose(w));
    if (has_bias) out = g.add(out, g.reshape(b, {1, g.node(w).shape[0]}));
    return out;
}

} // namespace

ClassifierNet build_classifier_net(Graph& g, const ClassifierModel& model, std::span<const Expr> inputs) {
    model.validate();
    ClassifierNet net;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const Layer& l = model.layers[li];
        net.theta.push_back(g.leaf(l.weights.shape, format_msg("theta", li, ".w")));
        if (l.has_bias) net.theta.push_back(g.leaf(l.bias.shape, format_msg("theta", li, ".b")));
    }
    net.preact.resize(inputs.size());
    net.postact.resize(inputs.size());

    for (std::size_t s = 0; s < inputs.size(); ++s) {
        check(shape_numel(g.node(inputs[s]).shape) == model.input_dim,
              "classify: input has ", shape_numel(g.node(inputs[s]).shape), " entries, expected ", model.input_dim);
        Expr cur = inputs[s];
        bool spatial = !model.layers.empty() && model.layers[0].kind == LayerKind::Conv;
        cur = spatial ? g.reshape(cur, model.input_shape) : g.reshape(cur, {1, model.input_dim});
        std::size_t ti = 0;
        for (std::size_t li = 0; li < model.layers.size(); ++li) {
            const Layer& l = model.layers[li];
            Expr w = net.theta[ti++];
            Expr b = l.has_bias ? net.theta[ti++] : Expr{};
            Expr pre;
            if (l.kind == LayerKind::Dense) {
                if (g.node(cur).shape.size() != 2)
                    cur = g.reshape(cur, {1, shape_numel(g.node(cur).shape)});
                pre = dense_apply(g, cur, w, b, l.has_bias);
            } else {
                check(g.node(cur).shape.size() == 3, "classify: conv layer ", li, " after dense layer is unsupported");
                pre = conv2d(g, cur, w, l.stride, l.pad);
                if (l.has_bias) pre = add_conv_bias(g, pre, b);
            }
            Expr post = apply_act(g, pre, l.act);
            net.preact[s].push_back(pre);
            net.postact[s].push_back(post);
            cur = post;
        }
        net.logits.push_back(g.reshape(cur, {model.label_count}));
    }
    return net;
}

void bind_classifier(Evaluator& ev, const ClassifierNet& net, const ClassifierModel& model) {
    std::size_t ti = 0;
    for (const auto& l : model.layers) {
        ev.bind(net.theta[ti++], l.weights);
        if (l.has_bias) ev.bind(net.theta[ti++], l.bias);
    }
}

Expr build_ce_loss(Graph& g, Expr logits, std::int64_t label, std::int64_t label_count) {
    check(label >= 0 && label < label_count, "cross_entropy: label ", label, " out of range [0,", label_count, ")");
    auto pid = g.register_pattern({label}, label_count);
    Expr picked = g.reshape(g.gather(logits, pid, {1}), {});
    return g.sub(g.logsumexp(logits), picked);
}

Expr build_batch_loss(Graph& g, const ClassifierNet& net, std::span<const std::int64_t> labels,
                      std::int64_t label_count) {
    check(!net.logits.empty(), "batch loss: empty batch");
    check(labels.size() == net.logits.size(), "batch loss: ", labels.size(), " labels for ",
          net.logits.size(), " samples");
    std::vector<Expr> losses;
    for (std::size_t j = 0; j < labels.size(); ++j)
        losses.push_back(build_ce_loss(g, net.logits[j], labels[j], label_count));
    return g.div_by(g.sum_of(losses), static_cast<double>(losses.size()));
}

BnExprs build_bn_exprs(Graph& g, const ClassifierModel& model, const ClassifierNet& net) {
    BnExprs out;
    const auto B = static_cast<double>(net.postact.size());
    for (std::size_t li = 0; li + 1 < model.layers.size(); ++li) {
        const Shape fs = g.node(net.postact[0][li]).shape;
        Expr mean_acc, e2_acc;
        std::int64_t per_channel = 1;
        std::int64_t channels = 0;
        for (std::size_t s = 0; s < net.postact.size(); ++s) {
            Expr f = net.postact[s][li];
            Expr sum_c, sq_c;
            if (fs.size() == 3) { // conv features: reduce over H*W
                per_channel = fs[0] * fs[1];
                channels = fs[2];
                Expr ones = g.constant(Tensor::full({1, per_channel}, 1.0));
                sum_c = g.matmul(ones, g.reshape(f, {per_channel, channels}));
                sq_c = g.matmul(ones, g.reshape(g.square(f), {per_channel, channels}));
            } else { // dense features (1, F): every unit is its own channel
                channels = shape_numel(fs);
                sum_c = g.reshape(f, {1, channels});
                sq_c = g.reshape(g.square(f), {1, channels});
            }
            mean_acc = s == 0 ? sum_c : g.add(mean_acc, sum_c);
            e2_acc = s == 0 ? sq_c : g.add(e2_acc, sq_c);
        }
        const double count = B * static_cast<double>(per_channel);
        Expr mu = g.reshape(g.div_by(mean_acc, count), {channels});
        Expr e2 = g.reshape(g.div_by(e2_acc, count), {channels});
        out.means.push_back(mu);
        out.variances.push_back(g.sub(e2, g.square(mu)));
    }
    return out;
}

GeneratorNet build_generator_net(Graph& g, const GeneratorModel& gen, Expr z,
                                 const std::vector<Expr>* shared_w) {
    gen.validate();
    check(shape_numel(g.node(z).shape) == gen.latent_dim, "generate: latent has ",
          shape_numel(g.node(z).shape), " entries, expected ", gen.latent_dim);
    GeneratorNet net;
    std::size_t wi = 0;
    auto param_leaf = [&](const Tensor& t, const char* tag, std::size_t bi) -> Expr {
        if (shared_w) {
            check(wi < shared_w->size(), "generator: shared parameter leaves exhausted");
            Expr e = (*shared_w)[wi++];
            check(g.node(e).shape == t.shape, "generator: shared leaf shape mismatch");
            net.w.push_back(e);
            return e;
        }
        Expr e = g.leaf(t.shape, format_msg("w", bi, ".", tag));
        net.w.push_back(e);
        return e;
    };
    Expr cur = g.reshape(z, {1, gen.latent_dim});
    for (std::size_t bi = 0; bi < gen.blocks.size(); ++bi) {
        const auto& blk = gen.blocks[bi];
        switch (blk.kind) {
            case GeneratorModel::Block::Kind::Dense: {
                Expr w = param_leaf(blk.weights, "w", bi);
                Expr b = param_leaf(blk.bias, "b", bi);
                if (g.node(cur).shape.size() != 2)
                    cur = g.reshape(cur, {1, shape_numel(g.node(cur).shape)});
                cur = apply_act(g, dense_apply(g, cur, w, b, true), blk.act);
                break;
            }
            case GeneratorModel::Block::Kind::Reshape:
                cur = g.reshape(cur, blk.shape);
                break;
            case GeneratorModel::Block::Kind::UpsampleConv: {
                Expr w = param_leaf(blk.weights, "w", bi);
                Expr b = param_leaf(blk.bias, "b", bi);
                cur = upsample2x(g, cur);
                cur = add_conv_bias(g, conv2d(g, cur, w, 1, blk.pad), b);
                cur = apply_act(g, cur, blk.act);
                break;
            }
        }
    }
    Expr squashed = g.sigmoid(cur);
    net.image = g.reshape(squashed, gen.output_shape);
    net.flat = g.reshape(squashed, {shape_numel(gen.output_shape)});
    return net;
}

void bind_generator(Evaluator& ev, const GeneratorNet& net, const GeneratorModel& gen) {
    auto ps = gen.params();
    check(ps.size() == net.w.size(), "generator binding mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) ev.bind(net.w[i], *ps[i]);
}

// ---------------------------------------------------------------------------
// Operations

Tensor classify(const ClassifierModel& model, const Tensor& x) {
    const bool batched = x.rank() == 2;
    const std::int64_t B = batched ? x.shape[0] : 1;
    const std::int64_t m = batched ? x.shape[1] : x.numel();
    check(m == model.input_dim, "classify: input has ", m, " entries, expected ", model.input_dim);

    Graph g;
    std::vector<Expr> inputs;
    for (std::int64_t j = 0; j < B; ++j) inputs.push_back(g.leaf({model.input_dim}));
    ClassifierNet net = build_classifier_net(g, model, inputs);
    Evaluator ev(g);
    bind_classifier(ev, net, model);
    for (std::int64_t j = 0; j < B; ++j) {
        Tensor row = Tensor::zeros({model.input_dim});
        std::copy(x.data.begin() + j * m, x.data.begin() + (j + 1) * m, row.data.begin());
        ev.bind(inputs[j], std::move(row));
    }
    if (!batched) return ev.eval(net.logits[0]);
    Tensor out = Tensor::zeros({B, model.label_count});
    for (std::int64_t j = 0; j < B; ++j) {
        const Tensor& lj = ev.eval(net.logits[j]);
        std::copy(lj.data.begin(), lj.data.end(), out.data.begin() + j * model.label_count);
    }
    return out;
}

double cross_entropy(const Tensor& logits, std::int64_t y) {
    check(logits.rank() == 1, "cross_entropy: logits must be a vector");
    const std::int64_t L = logits.numel();
    check(y >= 0 && y < L, "cross_entropy: label ", y, " out of range [0,", L, ")");
    double m = logits[0];
    for (std::int64_t i = 1; i < L; ++i) m = std::max(m, logits[i]);
    double s = 0.0;
    for (std::int64_t i = 0; i < L; ++i) s += std::exp(logits[i] - m);
    return m + std::log(s) - logits[y];
}

GradientReport batch_gradient(const ClassifierModel& model, std::span<const Tensor> inputs,
                              std::span<const std::int64_t> labels, bool attach_bn) {
    check(!inputs.empty(), "batch_gradient: empty batch");
    check(inputs.size() == labels.size(), "batch_gradient: ", inputs.size(), " inputs vs ",
          labels.size(), " labels");
    Graph g;
    std::vector<Expr> in;
    for (std::size_t j = 0; j < inputs.size(); ++j) in.push_back(g.leaf({model.input_dim}));
    ClassifierNet net = build_classifier_net(g, model, in);
    Expr loss = build_batch_loss(g, net, labels, model.label_count);
    std::vector<Expr> grads = g.derive(loss, net.theta);
    BnExprs bn;
    if (attach_bn) bn = build_bn_exprs(g, model, net);

    Evaluator ev(g);
    bind_classifier(ev, net, model);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
        Tensor flat = inputs[j];
        flat.shape = {model.input_dim};
        check(flat.numel() == model.input_dim, "batch_gradient: input size");
        ev.bind(in[j], std::move(flat));
    }
    GradientReport rep;
    rep.model_id = model.id;
    rep.batch_size = static_cast<std::int64_t>(inputs.size());
    rep.labels.assign(labels.begin(), labels.end());
    for (Expr ge : grads) rep.grads.push_back(ev.eval(ge));
    if (attach_bn) {
        BNStats stats;
        for (Expr e : bn.means) stats.means.push_back(ev.eval(e));
        for (Expr e : bn.variances) stats.variances.push_back(ev.eval(e));
        rep.bn_stats = std::move(stats);
    }
    return rep;
}

Tensor generate(const GeneratorModel& gen, const Tensor& z) {
    check(z.numel() == gen.latent_dim, "generate: latent has ", z.numel(), " entries, expected ",
          gen.latent_dim);
    Graph g;
    Expr ze = g.leaf({gen.latent_dim});
    GeneratorNet net = build_generator_net(g, gen, ze);
    Evaluator ev(g);
    bind_generator(ev, net, gen);
    Tensor zf = z;
    zf.shape = {gen.latent_dim};
    ev.bind(ze, std::move(zf));
    return ev.eval(net.image);
}

BNStats bn_statistics(const ClassifierModel& model, std::span<const Tensor> inputs) {
    check(!inputs.empty(), "bn_statistics: empty batch");
    Graph g;
    std::vector<Expr> in;
    for (std::size_t j = 0; j < inputs.size(); ++j) in.push_back(g.leaf({model.input_dim}));
    ClassifierNet net = build_classifier_net(g, model, in);
    BnExprs bn = build_bn_exprs(g, model, net);
    Evaluator ev(g);
    bind_classifier(ev, net, model);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
        Tensor flat = inputs[j];
        flat.shape = {model.input_dim};
        ev.bind(in[j], std::move(flat));
    }
    BNStats stats;
    for (Expr e : bn.means) stats.means.push_back(ev.eval(e));
    for (Expr e : bn.variances) stats.variances.push_back(ev.eval(e));
    return stats;
}

std::int64_t recover_label(const GradientReport& report, const ClassifierModel& model) {
    check(report.batch_size == 1, "recover_label: defined for single-sample reports (B=1), got B=",
          report.batch_size);
    model.validate();
    check(!report.grads.empty(), "recover_label: empty report");
    const Tensor& bias_grad = report.grads.back(); // final layer bias, guaranteed by validate()
    check(bias_grad.numel() == model.label_count, "recover_label: report does not match model");
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < bias_grad.numel(); ++i)
        if (bias_grad[i] < bias_grad[best]) best = i;
    check(bias_grad[best] < -1e-12,
          "recover_label: no strictly negative bias-gradient entry; supply labels explicitly");
    return best;
}

// ---------------------------------------------------------------------------
// Presets

Layer make_dense_layer(std::int64_t in, std::int64_t out, Activation act, Rng& rng) {
    Layer l;
    l.kind = LayerKind::Dense;
    l.act = act;
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    l.weights = rng.uniform_tensor({out, in}, -a, a);
    l.bias = Tensor::zeros({out});
    l.has_bias = true;
    return l;
}

Layer make_conv_layer(std::int64_t kh, std::int64_t kw, std::int64_t cin, std::int64_t cout,
                      std::int64_t stride, std::int64_t pad, Activation act, Rng& rng) {
    Layer l;
    l.kind = LayerKind::Conv;
    l.act = act;
    const double fan_in = static_cast<double>(kh * kw * cin);
    const double fan_out = static_cast<double>(kh * kw * cout);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    l.weights = rng.uniform_tensor({kh, kw, cin, cout}, -a, a);
    l.bias = Tensor::zeros({cout});
    l.has_bias = true;
    l.stride = stride;
    l.pad = pad;
    return l;
}

ClassifierModel make_classifier_preset(const std::string& name, std::uint64_t seed) {
    Rng rng(derive_seed(seed, fnv1a64(name)));
    ClassifierModel m;
    m.id = format_msg(name, "-", seed);
    m.input_shape = {16, 16, 1};
    m.input_dim = 256;
    m.label_count = 10;
    if (name == "mlp3") {
        m.layers.push_back(make_dense_layer(256, 128, Activation::Sigmoid, rng));
        m.layers.push_back(make_dense_layer(128, 64, Activation::Sigmoid, rng));
        m.layers.push_back(make_dense_layer(64, 10, Activation::None, rng));
    } else if (name == "cnn4") {
        m.layers.push_back(make_conv_layer(3, 3, 1, 4, 2, 1, Activation::Elu, rng));
        m.layers.push_back(make_conv_layer(3, 3, 4, 8, 2, 1, Activation::Elu, rng));
        m.layers.push_back(make_conv_layer(3, 3, 8, 8, 1, 1, Activation::Elu, rng));
        m.layers.push_back(make_dense_layer(128, 10, Activation::None, rng));
    } else if (name == "dense1") {
        // fully determined single layer: as many logits as inputs
        m.label_count = 256;
        m.layers.push_back(make_dense_layer(256, 256, Activation::None, rng));
    } else {
        fail("unknown classifier preset '", name, "' (available: mlp3, cnn4, dense1)");
    }
    m.validate();
    return m;
}

namespace {
GeneratorModel::Block dense_block(std::int64_t in, std::int64_t out, Activation act, Rng& rng) {
    GeneratorModel::Block b;
    b.kind = GeneratorModel::Block::Kind::Dense;
    b.act = act;
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    b.weights = rng.uniform_tensor({out, in}, -a, a);
    b.bias = Tensor::zeros({out});
    return b;
}
GeneratorModel::Block reshape_block(Shape s) {
    GeneratorModel::Block b;
    b.kind = GeneratorModel::Block::Kind::Reshape;
    b.shape = std::move(s);
    return b;
}
GeneratorModel::Block upconv_block(std::int64_t kh, std::int64_t kw, std::int64_t cin,
                                   std::int64_t cout, Activation act, Rng& rng) {
    GeneratorModel::Block b;
    b.kind = GeneratorModel::Block::Kind::UpsampleConv;
    b.act = act;
    const double a = std::sqrt(6.0 / static_cast<double>(kh * kw * (cin + cout)));
    b.weights = rng.uniform_tensor({kh, kw, cin, cout}, -a, a);
    b.bias = Tensor::zeros({cout});
    b.pad = 1;
    return b;
}
} // namespace

GeneratorModel make_generator_preset(const std::string& name, std::uint64_t seed) {
    check(name == "dec16", "unknown generator preset '", name, "' (available: dec16)");
    Rng rng(derive_seed(seed, fnv1a64(name)));
    GeneratorModel gen;
    gen.id = format_msg(name, "-", seed);
    gen.latent_dim = 16;
    gen.output_shape = {16, 16, 1};
    gen.blocks.push_back(dense_block(16, 64, Activation::Elu, rng));
    gen.blocks.push_back(reshape_block({4, 4, 4}));
    gen.blocks.push_back(upconv_block(3, 3, 4, 4, Activation::Elu, rng)); // 8x8x4
    gen.blocks.push_back(upconv_block(3, 3, 4, 1, Activation::None, rng)); // 16x16x1, squashed after
    gen.validate();
    return gen;
}

// ---------------------------------------------------------------------------
// Serialization: flat binary container, little-endian f64 payloads

namespace {

constexpr char kMagic[8] = {'G', 'I', 'N', 'V', 'T', 'C', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_container(const std::string& path, const json& meta,
                     const std::vector<std::pair<std::string, const Tensor*>>& entries) {
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "cannot open '", path, "' for writing");
    os.write(kMagic, 8);
    write_u32(os, 1);
    const std::string m = meta.dump();
    write_u64(os, m.size());
    os.write(m.data(), static_cast<std::streamsize>(m.size()));
    write_u64(os, entries.size());
    for (const auto& [name, t] : entries) {
        write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<std::uint32_t>(t->shape.size()));
        for (auto d : t->shape) write_u64(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(t->data.data()),
                 static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    }
    check(os.good(), "write failed for '", path, "'");
}

struct Container {
    json meta;
    std::vector<std::pair<std::string, Tensor>> entries;
    const Tensor& get(const std::string& name, const std::string& path) const {
        for (const auto& [n, t] : entries)
            if (n == name) return t;
        fail("'", path, "': missing tensor entry '", name, "'");
    }
};

Container read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "cannot open '", path, "'");
    char magic[8];
    is.read(magic, 8);
    check(is.good() && std::memcmp(magic, kMagic, 8) == 0, "'", path, "': not a tensor container");
    const auto version = read_u32(is);
    check(version == 1, "'", path, "': unsupported container version ", version);
    const auto mlen = read_u64(is);
    std::string m(mlen, '\0');
    is.read(m.data(), static_cast<std::streamsize>(mlen));
    Container c;
    c.meta = json::parse(m);
    const auto n = read_u64(is);
    for (std::uint64_t i = 0; i < n; ++i) {
        const auto nl = read_u32(is);
        std::string name(nl, '\0');
        is.read(name.data(), nl);
        const auto rank = read_u32(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::int64_t>(read_u64(is));
        Tensor t = Tensor::zeros(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        check(is.good(), "'", path, "': truncated container");
        t.validate_external(path);
        c.entries.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

} // namespace

void save_classifier(const ClassifierModel& model, const std::string& path) {
    model.validate();
    json meta;
    meta["type"] = "classifier";
    meta["id"] = model.id;
    meta["input_shape"] = model.input_shape;
    meta["input_dim"] = model.input_dim;
    meta["label_count"] = model.label_count;
    meta["layers"] = json::array();
    std::vector<std::pair<std::string, const Tensor*>> entries;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const Layer& l = model.layers[i];
        meta["layers"].push_back({{"kind", l.kind == LayerKind::Dense ? "dense" : "conv"},
                                  {"act", activation_name(l.act)},
                                  {"has_bias", l.has_bias},
                                  {"stride", l.stride},
                                  {"pad", l.pad}});
        entries.emplace_back(format_msg("layer", i, ".w"), &l.weights);
        if (l.has_bias) entries.emplace_back(format_msg("layer", i, ".b"), &l.bias);
    }
    write_container(path, meta, entries);
}

ClassifierModel load_classifier(const std::string& path) {
    Container c = read_container(path);
    check(c.meta.value("type", "") == "classifier", "'", path, "': not a classifier file");
    ClassifierModel m;
    m.id = c.meta.value("id", "");
    m.input_shape = c.meta.at("input_shape").get<Shape>();
    m.input_dim = c.meta.at("input_dim").get<std::int64_t>();
    m.label_count = c.meta.at("label_count").get<std::int64_t>();
    std::size_t i = 0;
    for (const auto& lj : c.meta.at("layers")) {
        Layer l;
        l.kind = lj.at("kind") == "dense" ? LayerKind::Dense : LayerKind::Conv;
        l.act = activation_from(lj.at("act"));
        l.has_bias = lj.at("has_bias").get<bool>();
        l.stride = lj.at("stride").get<std::int64_t>();
        l.pad = lj.at("pad").get<std::int64_t>();
        l.weights = c.get(format_msg("layer", i, ".w"), path);
        if (l.has_bias) l.bias = c.get(format_msg("layer", i, ".b"), path);
        m.layers.push_back(std::move(l));
        ++i;
    }
    m.validate();
    return m;
}

void save_generator(const GeneratorModel& gen, const std::string& path) {
    gen.validate();
    json meta;
    meta["type"] = "generator";
    meta["id"] = gen.id;
    meta["latent_dim"] = gen.latent_dim;
    meta["output_shape"] = gen.output_shape;
    meta["blocks"] = json::array();
    std::vector<std::pair<std::string, const Tensor*>> entries;
    for (std::size_t i = 0; i < gen.blocks.size(); ++i) {
        const auto& b = gen.blocks[i];
        json bj;
        bj["act"] = activation_name(b.act);
        switch (b.kind) {
            case GeneratorModel::Block::Kind::Dense: bj["kind"] = "dense"; break;
            case GeneratorModel::Block::Kind::Reshape:
                bj["kind"] = "reshape";
                bj["shape"] = b.shape;
                break;
            case GeneratorModel::Block::Kind::UpsampleConv:
                bj["kind"] = "upconv";
                bj["pad"] = b.pad;
                break;
        }
        meta["blocks"].push_back(bj);
        if (b.kind != GeneratorModel::Block::Kind::Reshape) {
            entries.emplace_back(format_msg("block", i, ".w"), &b.weights);
            entries.emplace_back(format_msg("block", i, ".b"), &b.bias);
        }
    }
    write_container(path, meta, entries);
}

GeneratorModel load_generator(const std::string& path) {
    Container c = read_container(path);
    check(c.meta.value("type", "") == "generator", "'", path, "': not a generator file");
    GeneratorModel gen;
    gen.id = c.meta.value("id", "");
    gen.latent_dim = c.meta.at("latent_dim").get<std::int64_t>();
    gen.output_shape = c.meta.at("output_shape").get<Shape>();
    std::size_t i = 0;
    for (const auto& bj : c.meta.at("blocks")) {
        GeneratorModel::Block b;
        b.act = activation_from(bj.at("act"));
        const std::string kind = bj.at("kind");
        if (kind == "dense") {
            b.kind = GeneratorModel::Block::Kind::Dense;
        } else if (kind == "reshape") {
            b.kind = GeneratorModel::Block::Kind::Reshape;
            b.shape = bj.at("shape").get<Shape>();
        } else if (kind == "upconv") {
            b.kind = GeneratorModel::Block::Kind::UpsampleConv;
            b.pad = bj.at("pad").get<std::int64_t>();
        } else {
            fail("'", path, "': unknown block kind '", kind, "'");
        }
        if (b.kind != GeneratorModel::Block::Kind::Reshape) {
            b.weights = c.get(format_msg("block", i, ".w"), path);
            b.bias = c.get(format_msg("block", i, ".b"), path);
        }
        gen.blocks.push_back(std::move(b));
        ++i;
    }
    gen.validate();
    return gen;
}

// ---------------------------------------------------------------------------
// Generator pretraining (decoder regression with free latent codes)

GeneratorModel fit_generator_to_images(GeneratorModel init, std::span<const Tensor> images,
                                       const FitConfig& cfg) {
    check(!images.empty(), "fit_generator: no images");
    GeneratorModel gen = std::move(init);
    const auto n = static_cast<std::int64_t>(images.size());
    const std::int64_t m = shape_numel(gen.output_shape);

    Graph g;
    std::vector<Expr> zs;
    std::vector<Expr> errs;
    std::vector<Expr> shared_w;
    for (std::int64_t i = 0; i < n; ++i) {
        Expr z = g.leaf({gen.latent_dim}, format_msg("z", i));
        zs.push_back(z);
        GeneratorNet net = build_generator_net(g, gen, z, i == 0 ? nullptr : &shared_w);
        if (i == 0) shared_w = net.w;
        Tensor target = images[i];
        check(target.numel() == m, "fit_generator: image size mismatch");
        target.shape = {m};
        Expr err = g.sum(g.square(g.sub(net.flat, g.constant(std::move(target)))));
        if (cfg.z_penalty > 0.0) err = g.add(err, g.scale(g.sum(g.square(z)), cfg.z_penalty));
        errs.push_back(err);
    }
    Expr total = g.div_by(g.sum_of(errs), static_cast<double>(n));

    std::vector<Expr> wrt = shared_w;
    wrt.insert(wrt.end(), zs.begin(), zs.end());
    std::vector<Expr> grads = g.derive(total, wrt);

    Rng rng(derive_seed(cfg.seed, 0x9a7));
    auto wptrs = gen.params();
    const std::size_t wcount = wptrs.size();
    std::vector<Tensor> params; // [w..., z...]
    for (auto* p : wptrs) params.push_back(*p);
    for (std::int64_t i = 0; i < n; ++i) params.push_back(rng.normal_tensor({gen.latent_dim}));

    Adam adam;
    Evaluator ev(g);
    std::vector<Tensor> gvals(params.size());
    for (std::int64_t it = 0; it < cfg.iterations; ++it) {
        for (std::size_t k = 0; k < wrt.size(); ++k) ev.bind(wrt[k], params[k]);
        ev.ensure(grads);
        for (std::size_t k = 0; k < grads.size(); ++k) gvals[k] = ev.value(grads[k]);
        // two learning rates: scale z gradients into the w step size
        for (std::size_t k = wcount; k < params.size(); ++k)
            for (auto& v : gvals[k].data) v *= cfg.lr_z / cfg.lr_w;
        adam.step(params, gvals, cfg.lr_w);
    }
    for (std::size_t k = 0; k < wcount; ++k) *wptrs[k] = params[k];
    gen.id += "-fit";
    return gen;
}

} // namespace ginv
