#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ginv/graph.hpp"
#include "ginv/rng.hpp"
#include "ginv/tensor.hpp"

namespace ginv {

enum class Activation : std::uint8_t { None, Sigmoid, Elu };
enum class LayerKind : std::uint8_t { Dense, Conv };

const char* activation_name(Activation a);
Activation activation_from(const std::string& s);

struct Layer {
    LayerKind kind = LayerKind::Dense;
    Activation act = Activation::None;
    Tensor weights; // Dense: (out, in); Conv: (Kh, Kw, Cin, Cout)
    Tensor bias;    // Dense: (out); Conv: (Cout); empty when has_bias is false
    bool has_bias = true;
    std::int64_t stride = 1; // conv only
    std::int64_t pad = 0;    // conv only
};

// Layered classifier f_theta: dense/conv layers with C1 activations, final
// dense layer emitting logits with a bias term and no activation.
struct ClassifierModel {
    std::string id;
    Shape input_shape; // (H, W, C) spatial layout of the flattened input
    std::int64_t input_dim = 0;
    std::int64_t label_count = 0;
    std::vector<Layer> layers;

    void validate() const;
    std::int64_t param_count() const;
};

// Decoder G_w: R^k -> [0,1]^m, sigmoid-squashed output.
struct GeneratorModel {
    struct Block {
        enum class Kind : std::uint8_t { Dense, Reshape, UpsampleConv } kind = Kind::Dense;
        Activation act = Activation::None;
        Tensor weights, bias;
        Shape shape; // Reshape target
        std::int64_t pad = 1;
    };
    std::string id;
    std::int64_t latent_dim = 0;
    Shape output_shape; // (H, W, C)
    std::vector<Block> blocks;

    void validate() const;
    std::vector<const Tensor*> params() const;
    std::vector<Tensor*> params();
};

struct BNStats {
    std::vector<Tensor> means;     // per instrumented layer, per channel
    std::vector<Tensor> variances; // population variances, same layout
};

// The attacker's observation: averaged per-parameter gradients plus optional
// side information.
struct GradientReport {
    std::string model_id;
    std::vector<Tensor> grads; // aligned with the classifier parameter order
    std::int64_t batch_size = 1;
    std::vector<std::int64_t> labels; // empty when unknown
    std::optional<BNStats> bn_stats;
    std::int64_t round = 0;
    std::int64_t node = 0;
};

// --- Graph builders -------------------------------------------------------

// Per-sample forward chains sharing one set of parameter leaves.
struct ClassifierNet {
    std::vector<Expr> theta;                 // parameter leaves (weights, then bias, per layer)
    std::vector<Expr> logits;                // per sample, shape (L)
    std::vector<std::vector<Expr>> preact;   // [sample][layer]
    std::vector<std::vector<Expr>> postact;  // [sample][layer]
};

// `inputs` are flat (m) expressions (leaves or generator outputs).
ClassifierNet build_classifier_net(Graph& g, const ClassifierModel& model, std::span<const Expr> inputs);
void bind_classifier(Evaluator& ev, const ClassifierNet& net, const ClassifierModel& model);

Expr build_ce_loss(Graph& g, Expr logits, std::int64_t label, std::int64_t label_count);
Expr build_batch_loss(Graph& g, const ClassifierNet& net, std::span<const std::int64_t> labels,
                      std::int64_t label_count);

struct BnExprs {
    std::vector<Expr> means;
    std::vector<Expr> variances;
};
// Per-channel population statistics of the post-activation features of every
// hidden layer (all layers but the last).
BnExprs build_bn_exprs(Graph& g, const ClassifierModel& model, const ClassifierNet& net);

struct GeneratorNet {
    std::vector<Expr> w; // parameter leaves
    Expr image;          // (H, W, C), entries in [0,1]
    Expr flat;           // (m)
};
// When `shared_w` is given, the net reuses those parameter leaves instead of
// creating its own (several decoder instances driven by one weight set).
GeneratorNet build_generator_net(Graph& g, const GeneratorModel& gen, Expr z,
                                 const std::vector<Expr>* shared_w = nullptr);
void bind_generator(Evaluator& ev, const GeneratorNet& net, const GeneratorModel& gen);

// --- Operations -----------------------------------------------------------

// Forward pass; x is a flat (m) tensor or a (B, m) batch.
Tensor classify(const ClassifierModel& model, const Tensor& x);

// Stable softmax cross-entropy of one logits vector.
double cross_entropy(const Tensor& logits, std::int64_t y);

// Averaged parameter gradient of the batch; optionally attaches the exact BN
// statistics of the batch.
GradientReport batch_gradient(const ClassifierModel& model, std::span<const Tensor> inputs,
                              std::span<const std::int64_t> labels, bool attach_bn = false);

Tensor generate(const GeneratorModel& gen, const Tensor& z);

BNStats bn_statistics(const ClassifierModel& model, std::span<const Tensor> inputs);

// B = 1 label recovery from the sign of the final-layer bias gradient.
std::int64_t recover_label(const GradientReport& report, const ClassifierModel& model);

// --- Presets ---------------------------------------------------------------

ClassifierModel make_classifier_preset(const std::string& name, std::uint64_t seed);
GeneratorModel make_generator_preset(const std::string& name, std::uint64_t seed);

Layer make_dense_layer(std::int64_t in, std::int64_t out, Activation act, Rng& rng);
Layer make_conv_layer(std::int64_t kh, std::int64_t kw, std::int64_t cin, std::int64_t cout,
                      std::int64_t stride, std::int64_t pad, Activation act, Rng& rng);

// --- Serialization ----------------------------------------------------------

void save_classifier(const ClassifierModel& model, const std::string& path);
ClassifierModel load_classifier(const std::string& path);
void save_generator(const GeneratorModel& gen, const std::string& path);
GeneratorModel load_generator(const std::string& path);

// --- Generator pretraining ---------------------------------------------------

// Fits the decoder to a set of images by joint optimization of per-image
// latent codes and the weights (squared-error regression). Stands in for a
// generative model pretrained on the data distribution.
struct FitConfig {
    std::int64_t iterations = 400;
    double lr_w = 1e-2;
    double lr_z = 1e-1;
    double z_penalty = 1e-3; // keeps the free codes near the sampling prior
    std::uint64_t seed = 0;
};
GeneratorModel fit_generator_to_images(GeneratorModel init, std::span<const Tensor> images,
                                       const FitConfig& cfg);

} // namespace ginv
