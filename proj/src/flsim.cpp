#include "ginv/flsim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ginv/rng.hpp"

namespace ginv {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kSide = 16;

void add_bump(Tensor& img, double ch, double cw, double sigma, double amp) {
    for (std::int64_t h = 0; h < kSide; ++h)
        for (std::int64_t w = 0; w < kSide; ++w) {
            const double d2 = (h - ch) * (h - ch) + (w - cw) * (w - cw);
            img[h * kSide + w] += amp * std::exp(-d2 / (2.0 * sigma * sigma));
        }
}

void clamp01_inplace(Tensor& img) {
    for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

} // namespace

std::vector<Tensor> two_cluster_prototypes() {
    std::vector<Tensor> protos;
    {
        Tensor p = Tensor::full({kSide, kSide, 1}, 0.08);
        add_bump(p, 5.0, 5.0, 2.6, 0.85);
        clamp01_inplace(p);
        protos.push_back(std::move(p));
    }
    {
        Tensor p = Tensor::full({kSide, kSide, 1}, 0.08);
        add_bump(p, 10.0, 10.0, 2.6, 0.85);
        clamp01_inplace(p);
        protos.push_back(std::move(p));
    }
    return protos;
}

SyntheticDataset make_dataset(const std::string& family, std::int64_t count, std::uint64_t seed,
                              double two_cluster_noise) {
    check(count >= 1, "make_dataset: count must be >= 1, got ", count);
    SyntheticDataset ds;
    ds.family = family;
    ds.count = count;
    ds.seed = seed;
    Rng rng(derive_seed(seed, fnv1a64(family)));

    if (family == "blobs") {
        for (std::int64_t i = 0; i < count; ++i) {
            Tensor img = Tensor::full({kSide, kSide, 1}, 0.05);
            const std::int64_t nblobs = 1 + rng.below(3);
            double first_cw = 0.0;
            for (std::int64_t b = 0; b < nblobs; ++b) {
                const double ch = rng.uniform(3.0, 12.0);
                const double cw = rng.uniform(3.0, 12.0);
                if (b == 0) first_cw = cw;
                add_bump(img, ch, cw, rng.uniform(1.5, 3.0), rng.uniform(0.5, 0.9));
            }
            clamp01_inplace(img);
            ds.images.push_back(std::move(img));
            auto label = static_cast<std::int64_t>((first_cw - 3.0) / 9.0001 * 10.0);
            ds.labels.push_back(std::clamp<std::int64_t>(label, 0, 9));
        }
    } else if (family == "bars") {
        for (std::int64_t i = 0; i < count; ++i) {
            Tensor img = Tensor::full({kSide, kSide, 1}, 0.1);
            const bool vertical = rng.below(2) == 1;
            const std::int64_t pos = 1 + rng.below(14);
            for (std::int64_t h = 0; h < kSide; ++h)
                for (std::int64_t w = 0; w < kSide; ++w) {
                    const std::int64_t coord = vertical ? w : h;
                    if (coord == pos || coord == pos + 1) img[h * kSide + w] = 0.85;
                }
            clamp01_inplace(img);
            ds.images.push_back(std::move(img));
            ds.labels.push_back((vertical ? 5 : 0) + std::clamp<std::int64_t>((pos - 1) / 3, 0, 4));
        }
    } else if (family == "two-cluster") {
        check(two_cluster_noise >= 0.0, "make_dataset: negative noise");
        const auto protos = two_cluster_prototypes();
        for (std::int64_t i = 0; i < count; ++i) {
            const std::int64_t c = rng.below(2);
            Tensor img = protos[static_cast<std::size_t>(c)];
            if (two_cluster_noise > 0.0) {
                for (auto& v : img.data) v += two_cluster_noise * rng.normal();
                clamp01_inplace(img);
            }
            ds.images.push_back(std::move(img));
            ds.labels.push_back(c);
        }
    } else {
        fail("make_dataset: unknown family '", family, "' (blobs, bars, two-cluster)");
    }
    return ds;
}

std::uint64_t SyntheticDataset::fingerprint() const {
    std::uint64_t h = fnv1a64(family);
    h = fnv1a64(&count, sizeof count, h);
    h = fnv1a64(&seed, sizeof seed, h);
    for (const auto& img : images) h = fnv1a64(img.data.data(), img.data.size() * sizeof(double), h);
    for (auto l : labels) h = fnv1a64(&l, sizeof l, h);
    return h;
}

void DefenseConfig::validate() const {
    check(sparsity >= 0.0 && sparsity < 1.0, "defense: sparsity must be in [0,1), got ", sparsity);
    check(noise >= 0.0, "defense: noise must be >= 0, got ", noise);
    check(batch >= 1, "defense: batch must be >= 1, got ", batch);
}

GradientReport defend_sparsify(GradientReport report, double s) {
    check(s >= 0.0 && s < 1.0, "defend_sparsify: s must be in [0,1), got ", s);
    if (s == 0.0) return report;
    for (auto& layer : report.grads) {
        const std::int64_t n = layer.numel();
        // ceil((1-s)*n), computed as n - floor(s*n) to dodge round-off
        auto keep = n - static_cast<std::int64_t>(std::floor(s * static_cast<double>(n) + 1e-9));
        keep = std::clamp<std::int64_t>(keep, 1, n);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
            const double ma = std::fabs(layer[a]), mb = std::fabs(layer[b]);
            if (ma != mb) return ma > mb;
            return a < b;
        });
        Tensor kept = Tensor::zeros(layer.shape);
        for (std::int64_t i = 0; i < keep; ++i) kept[idx[static_cast<std::size_t>(i)]] = layer[idx[static_cast<std::size_t>(i)]];
        layer = std::move(kept);
    }
    return report;
}

GradientReport defend_noise(GradientReport report, double sigma, std::uint64_t seed) {
    check(sigma >= 0.0, "defend_noise: sigma must be >= 0, got ", sigma);
    if (sigma == 0.0) return report;
    Rng rng(derive_seed(seed, 0x9015e));
    for (auto& layer : report.grads)
        for (auto& v : layer.data) v += sigma * rng.normal();
    return report;
}

const char* theta_mode_name(ThetaMode m) {
    switch (m) {
        case ThetaMode::Fixed: return "fixed";
        case ThetaMode::Reinit: return "reinit";
        case ThetaMode::Trained: return "trained";
    }
    return "?";
}

ThetaMode theta_mode_from(const std::string& s) {
    if (s == "fixed") return ThetaMode::Fixed;
    if (s == "reinit") return ThetaMode::Reinit;
    if (s == "trained") return ThetaMode::Trained;
    fail("unknown theta mode '", s, "' (fixed, reinit, trained)");
}

void SimConfig::validate() const {
    check(nodes >= 1, "sim: nodes must be >= 1");
    check(rounds >= 1, "sim: rounds must be >= 1");
    check(train_lr > 0.0, "sim: train_lr must be positive");
    defense.validate();
}

void GroundTruth::add(std::int64_t round, std::int64_t node, std::vector<Tensor> batch) {
    batches_.emplace_back(round, node, std::move(batch));
}

const std::vector<Tensor>& GroundTruth::batch(std::int64_t round, std::int64_t node) const {
    ++reads_;
    for (const auto& [r, n, b] : batches_)
        if (r == round && n == node) return b;
    fail("ground truth: no batch for round ", round, ", node ", node);
}

SimOutput simulate_rounds(const SyntheticDataset& data, const SimConfig& cfg) {
    cfg.validate();
    const std::int64_t B = cfg.defense.batch;

    // fixed round-robin shards
    std::vector<std::vector<std::int64_t>> shards(static_cast<std::size_t>(cfg.nodes));
    for (std::int64_t i = 0; i < data.count; ++i)
        shards[static_cast<std::size_t>(i % cfg.nodes)].push_back(i);
    for (std::int64_t n = 0; n < cfg.nodes; ++n)
        check(static_cast<std::int64_t>(shards[static_cast<std::size_t>(n)].size()) >= B,
              "sim: node ", n, " shard holds ", shards[static_cast<std::size_t>(n)].size(),
              " examples, batch needs ", B);

    SimOutput out;
    out.tasks.defense = cfg.defense;
    out.tasks.model_preset = cfg.model_preset;

    ClassifierModel current = make_classifier_preset(cfg.model_preset, cfg.model_seed);
    for (std::int64_t round = 0; round < cfg.rounds; ++round) {
        if (cfg.theta_mode == ThetaMode::Reinit && round > 0)
            current = make_classifier_preset(cfg.model_preset,
                                             derive_seed(cfg.model_seed, static_cast<std::uint64_t>(round)));
        const auto snapshot_id = static_cast<std::int64_t>(out.tasks.snapshots.size());
        out.tasks.snapshots.push_back(current);

        std::vector<GradientReport> raw_reports;
        for (std::int64_t node = 0; node < cfg.nodes; ++node) {
            Rng rng(derive_seed(cfg.seed ^ static_cast<std::uint64_t>(node),
                                static_cast<std::uint64_t>(round)));
            const auto& shard = shards[static_cast<std::size_t>(node)];
            std::vector<Tensor> batch;
            std::vector<std::int64_t> labels;
            for (std::int64_t j = 0; j < B; ++j) {
                const auto pick = shard[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(shard.size())))];
                batch.push_back(data.images[static_cast<std::size_t>(pick)]);
                labels.push_back(data.labels[static_cast<std::size_t>(pick)]);
            }
            GradientReport rep = batch_gradient(current, batch, labels, cfg.attach_bn);
            rep.round = round;
            rep.node = node;
            raw_reports.push_back(rep);

            rep = defend_sparsify(std::move(rep), cfg.defense.sparsity);
            rep = defend_noise(std::move(rep), cfg.defense.noise,
                               derive_seed(cfg.seed ^ static_cast<std::uint64_t>(node),
                                           0x5eed ^ static_cast<std::uint64_t>(round)));
            out.tasks.entries.push_back({snapshot_id, std::move(rep)});
            out.truth.add(round, node, std::move(batch));
        }

        if (cfg.theta_mode == ThetaMode::Trained) {
            // one averaged-gradient descent step on the post-defense reports
            std::size_t base = out.tasks.entries.size() - static_cast<std::size_t>(cfg.nodes);
            std::size_t pi = 0;
            for (auto& layer : current.layers) {
                for (int which = 0; which < (layer.has_bias ? 2 : 1); ++which, ++pi) {
                    Tensor& param = which == 0 ? layer.weights : layer.bias;
                    for (std::int64_t i = 0; i < param.numel(); ++i) {
                        double avg = 0.0;
                        for (std::int64_t n = 0; n < cfg.nodes; ++n)
                            avg += out.tasks.entries[base + static_cast<std::size_t>(n)].report.grads[pi][i];
                        avg /= static_cast<double>(cfg.nodes);
                        param[i] -= cfg.train_lr * avg;
                    }
                }
            }
            current.id = format_msg(cfg.model_preset, "-", cfg.model_seed, "-r", round + 1);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

json defense_json(const DefenseConfig& d) {
    return {{"sparsity", d.sparsity}, {"noise", d.noise}, {"batch", d.batch}};
}

DefenseConfig defense_from_json(const json& j) {
    DefenseConfig d;
    d.sparsity = j.at("sparsity").get<double>();
    d.noise = j.at("noise").get<double>();
    d.batch = j.at("batch").get<std::int64_t>();
    return d;
}

} // namespace

void save_taskset(const TaskSet& tasks, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "snapshots");
    json manifest;
    manifest["model_preset"] = tasks.model_preset;
    manifest["defense"] = defense_json(tasks.defense);
    manifest["snapshots"] = json::array();
    for (std::size_t i = 0; i < tasks.snapshots.size(); ++i) {
        const std::string file = format_msg("snapshots/", i, ".model");
        save_classifier(tasks.snapshots[i], (fs::path(dir) / file).string());
        manifest["snapshots"].push_back({{"id", i}, {"file", file}, {"model_id", tasks.snapshots[i].id}});
    }
    manifest["entries"] = json::array();
    for (const auto& e : tasks.entries) {
        const auto& rep = e.report;
        const std::string file = format_msg("tasks/", rep.round, "/", rep.node, ".grad");
        fs::create_directories(fs::path(dir) / "tasks" / std::to_string(rep.round));

        json meta;
        meta["type"] = "gradient-report";
        meta["model_id"] = rep.model_id;
        meta["snapshot"] = e.snapshot;
        meta["batch_size"] = rep.batch_size;
        meta["labels"] = rep.labels;
        meta["round"] = rep.round;
        meta["node"] = rep.node;
        meta["has_bn"] = rep.bn_stats.has_value();

        // reuse the classifier container writer through a small local encoder
        std::ofstream os((fs::path(dir) / file).string(), std::ios::binary);
        check(os.good(), "cannot open '", file, "' for writing");
        auto write_u32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
        auto write_u64 = [&](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
        auto write_tensor = [&](const std::string& name, const Tensor& t) {
            write_u32(static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u32(static_cast<std::uint32_t>(t.shape.size()));
            for (auto d : t.shape) write_u64(static_cast<std::uint64_t>(d));
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        };
        os.write("GINVTC01", 8);
        write_u32(1);
        const std::string m = meta.dump();
        write_u64(m.size());
        os.write(m.data(), static_cast<std::streamsize>(m.size()));
        std::uint64_t count = rep.grads.size();
        if (rep.bn_stats) count += rep.bn_stats->means.size() + rep.bn_stats->variances.size();
        write_u64(count);
        for (std::size_t i = 0; i < rep.grads.size(); ++i) write_tensor(format_msg("grad", i), rep.grads[i]);
        if (rep.bn_stats) {
            for (std::size_t i = 0; i < rep.bn_stats->means.size(); ++i)
                write_tensor(format_msg("bn_mean", i), rep.bn_stats->means[i]);
            for (std::size_t i = 0; i < rep.bn_stats->variances.size(); ++i)
                write_tensor(format_msg("bn_var", i), rep.bn_stats->variances[i]);
        }
        check(os.good(), "write failed for '", file, "'");

        json shapes = json::array();
        for (const auto& gt : rep.grads) shapes.push_back(gt.shape);
        manifest["entries"].push_back(
            {{"round", rep.round}, {"node", rep.node}, {"file", file}, {"snapshot", e.snapshot}, {"shapes", shapes}});
    }
    std::ofstream mf((fs::path(dir) / "manifest.json").string());
    check(mf.good(), "cannot write manifest in '", dir, "'");
    mf << manifest.dump(2) << "\n";
}

TaskSet load_taskset(const std::string& dir) {
    std::ifstream mf((fs::path(dir) / "manifest.json").string());
    check(mf.good(), "'", dir, "': missing manifest.json");
    json manifest = json::parse(mf);

    TaskSet tasks;
    tasks.model_preset = manifest.value("model_preset", "");
    tasks.defense = defense_from_json(manifest.at("defense"));
    for (const auto& sj : manifest.at("snapshots"))
        tasks.snapshots.push_back(load_classifier((fs::path(dir) / sj.at("file").get<std::string>()).string()));

    for (const auto& ej : manifest.at("entries")) {
        const std::string file = ej.at("file").get<std::string>();
        std::ifstream is((fs::path(dir) / file).string(), std::ios::binary);
        check(is.good(), "'", dir, "': missing ", file);
        char magic[8];
        is.read(magic, 8);
        check(std::string(magic, 8) == "GINVTC01", "'", file, "': bad magic");
        auto read_u32 = [&] {
            std::uint32_t v = 0;
            is.read(reinterpret_cast<char*>(&v), 4);
            return v;
        };
        auto read_u64 = [&] {
            std::uint64_t v = 0;
            is.read(reinterpret_cast<char*>(&v), 8);
            return v;
        };
        check(read_u32() == 1, "'", file, "': unsupported version");
        std::string meta_s(read_u64(), '\0');
        is.read(meta_s.data(), static_cast<std::streamsize>(meta_s.size()));
        json meta = json::parse(meta_s);

        GradientReport rep;
        rep.model_id = meta.value("model_id", "");
        rep.batch_size = meta.at("batch_size").get<std::int64_t>();
        rep.labels = meta.at("labels").get<std::vector<std::int64_t>>();
        rep.round = meta.at("round").get<std::int64_t>();
        rep.node = meta.at("node").get<std::int64_t>();

        const std::uint64_t count = read_u64();
        BNStats bn;
        for (std::uint64_t i = 0; i < count; ++i) {
            std::string name(read_u32(), '\0');
            is.read(name.data(), static_cast<std::streamsize>(name.size()));
            Shape shape(read_u32());
            for (auto& d : shape) d = static_cast<std::int64_t>(read_u64());
            Tensor t = Tensor::zeros(shape);
            is.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            check(is.good(), "'", file, "': truncated");
            t.validate_external(file);
            if (name.rfind("grad", 0) == 0)
                rep.grads.push_back(std::move(t));
            else if (name.rfind("bn_mean", 0) == 0)
                bn.means.push_back(std::move(t));
            else
                bn.variances.push_back(std::move(t));
        }
        if (meta.value("has_bn", false)) rep.bn_stats = std::move(bn);
        tasks.entries.push_back({ej.at("snapshot").get<std::int64_t>(), std::move(rep)});
    }
    return tasks;
}

} // namespace ginv
