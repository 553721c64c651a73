#pragma once

#include <string>
#include <vector>

#include "ginv/model.hpp"

namespace ginv {

struct SyntheticDataset {
    std::string family;
    std::int64_t count = 0;
    std::uint64_t seed = 0;
    std::vector<Tensor> images; // (16,16,1), entries in [0,1]
    std::vector<std::int64_t> labels;

    std::uint64_t fingerprint() const;
};

inline constexpr double kTwoClusterNoise = 0.02;

SyntheticDataset make_dataset(const std::string& family, std::int64_t count, std::uint64_t seed,
                              double two_cluster_noise = kTwoClusterNoise);

// The two prototypes behind the `two-cluster` family.
std::vector<Tensor> two_cluster_prototypes();

struct DefenseConfig {
    double sparsity = 0.0; // fraction of entries zeroed per layer, in [0,1)
    double noise = 0.0;    // gaussian stddev added to every gradient entry
    std::int64_t batch = 4;
    void validate() const;
};

// Keeps the ceil((1-s)*n) largest-magnitude entries of each layer gradient,
// zeroes the rest; ties keep the lower flat index. Values are not rescaled.
GradientReport defend_sparsify(GradientReport report, double s);
GradientReport defend_noise(GradientReport report, double sigma, std::uint64_t seed);

enum class ThetaMode : std::uint8_t { Fixed, Reinit, Trained };
const char* theta_mode_name(ThetaMode m);
ThetaMode theta_mode_from(const std::string& s);

struct SimConfig {
    std::int64_t nodes = 1;
    std::int64_t rounds = 1;
    DefenseConfig defense;
    ThetaMode theta_mode = ThetaMode::Fixed;
    double train_lr = 0.1; // server step size in the trained-theta setting
    bool attach_bn = false;
    std::string model_preset = "mlp3";
    std::uint64_t model_seed = 0;
    std::uint64_t seed = 0;
    void validate() const;
};

struct TaskSet {
    struct Entry {
        std::int64_t snapshot = 0; // index into `snapshots`
        GradientReport report;
    };
    std::vector<ClassifierModel> snapshots;
    std::vector<Entry> entries;
    DefenseConfig defense;
    std::string model_preset;
};

// Per-(round, node) ground-truth batches, type-separated from the TaskSet so
// that attack code cannot read them; accesses are counted for the no-leak
// audit.
class GroundTruth {
public:
    void add(std::int64_t round, std::int64_t node, std::vector<Tensor> batch);
    const std::vector<Tensor>& batch(std::int64_t round, std::int64_t node) const;
    std::size_t reads() const { return reads_; }

private:
    std::vector<std::tuple<std::int64_t, std::int64_t, std::vector<Tensor>>> batches_;
    mutable std::size_t reads_ = 0;
};

struct SimOutput {
    TaskSet tasks;
    GroundTruth truth;
};

// One gradient report per node per round, post-defense. Node shards are fixed
// round-robin splits; per-round batches are sampled from the shard with
// per-node derived seeds.
SimOutput simulate_rounds(const SyntheticDataset& data, const SimConfig& cfg);

// Directory layout: manifest.json + snapshots/<id>.model + tasks/<round>/<node>.grad
void save_taskset(const TaskSet& tasks, const std::string& dir);
TaskSet load_taskset(const std::string& dir);

} // namespace ginv
