#include "ginv/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <json.hpp>

#include "ginv/metrics.hpp"
#include "ginv/parallel.hpp"
#include "ginv/rgap.hpp"
#include "ginv/rng.hpp"

namespace ginv {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

void note_unknown_keys(const json& j, const std::string& section,
                       const std::set<std::string>& allowed, std::vector<std::string>& errs) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            errs.push_back(format_msg(section.empty() ? "" : section + ".", it.key(),
                                      ": unknown configuration key"));
}

} // namespace

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), "config: cannot open '", path, "'");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        fail("config: malformed JSON: ", e.what());
    }
    std::vector<std::string> errs;
    ExperimentConfig c;
    try {
        note_unknown_keys(j, "",
                          {"command", "out", "jobs", "seeds", "dataset", "model", "generator",
                           "inversion", "defense", "attach_bn", "meta", "sweep", "multigrad", "rgap"},
                          errs);
        c.command = j.value("command", "");
        c.out_dir = j.value("out", "");
        c.jobs = j.value("jobs", static_cast<std::int64_t>(0));
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();

        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            note_unknown_keys(d, "dataset", {"family", "count", "seed"}, errs);
            c.dataset_family = d.value("family", c.dataset_family);
            c.dataset_count = d.value("count", c.dataset_count);
            c.dataset_seed = d.value("seed", c.dataset_seed);
        }
        if (j.contains("model")) {
            const auto& d = j.at("model");
            note_unknown_keys(d, "model", {"preset", "seed"}, errs);
            c.model_preset = d.value("preset", c.model_preset);
            c.model_seed = d.value("seed", c.model_seed);
        }
        if (j.contains("generator")) {
            const auto& d = j.at("generator");
            note_unknown_keys(d, "generator", {"source", "preset", "path", "seed"}, errs);
            c.generator_source = d.value("source", c.generator_source);
            c.generator_preset = d.value("preset", c.generator_preset);
            c.generator_path = d.value("path", c.generator_path);
            c.generator_seed = d.value("seed", c.generator_seed);
        }
        if (j.contains("inversion")) {
            const auto& d = j.at("inversion");
            note_unknown_keys(d, "inversion",
                              {"mode", "discrepancy", "iters_phase1", "iters_phase2", "eta_z",
                               "eta_w", "eta_x", "lambda_tv", "lambda_bn", "restarts"},
                              errs);
            if (d.contains("mode")) c.inversion.mode = search_mode_from(d.at("mode").get<std::string>());
            if (d.contains("discrepancy"))
                c.inversion.discrepancy = discrepancy_from(d.at("discrepancy").get<std::string>());
            c.inversion.iters_phase1 = d.value("iters_phase1", c.inversion.iters_phase1);
            c.inversion.iters_phase2 = d.value("iters_phase2", c.inversion.iters_phase2);
            c.inversion.eta_z = d.value("eta_z", c.inversion.eta_z);
            c.inversion.eta_w = d.value("eta_w", c.inversion.eta_w);
            c.inversion.eta_x = d.value("eta_x", c.inversion.eta_x);
            c.inversion.lambda_tv = d.value("lambda_tv", c.inversion.lambda_tv);
            c.inversion.lambda_bn = d.value("lambda_bn", c.inversion.lambda_bn);
            c.inversion.restarts = d.value("restarts", c.inversion.restarts);
        }
        if (j.contains("defense")) {
            const auto& d = j.at("defense");
            note_unknown_keys(d, "defense", {"sparsity", "noise", "batch"}, errs);
            c.defense.sparsity = d.value("sparsity", c.defense.sparsity);
            c.defense.noise = d.value("noise", c.defense.noise);
            c.defense.batch = d.value("batch", c.defense.batch);
        }
        c.attach_bn = j.value("attach_bn", c.attach_bn);
        if (j.contains("meta")) {
            const auto& d = j.at("meta");
            note_unknown_keys(d, "meta",
                              {"task_batch", "local_iters", "z_lambda", "alpha", "beta",
                               "outer_steps", "latent_iters", "eta_z", "nodes", "rounds",
                               "checkpoint_every", "probe_count"},
                              errs);
            c.meta.task_batch = d.value("task_batch", c.meta.task_batch);
            c.meta.local_iters = d.value("local_iters", c.meta.local_iters);
            c.meta.z_lambda = d.value("z_lambda", c.meta.z_lambda);
            c.meta.alpha = d.value("alpha", c.meta.alpha);
            c.meta.beta = d.value("beta", c.meta.beta);
            c.meta.outer_steps = d.value("outer_steps", c.meta.outer_steps);
            c.meta.latent_iters = d.value("latent_iters", c.meta.latent_iters);
            c.meta.eta_z = d.value("eta_z", c.meta.eta_z);
            c.giml_nodes = d.value("nodes", c.giml_nodes);
            c.giml_rounds = d.value("rounds", c.giml_rounds);
            c.meta.checkpoint_every = d.value("checkpoint_every", c.meta.checkpoint_every);
            c.meta.probe_count = d.value("probe_count", c.meta.probe_count);
        }
        if (j.contains("sweep")) {
            const auto& d = j.at("sweep");
            note_unknown_keys(d, "sweep", {"sparsity", "noise", "batch"}, errs);
            if (d.contains("sparsity")) c.sweep_sparsity = d.at("sparsity").get<std::vector<double>>();
            if (d.contains("noise")) c.sweep_noise = d.at("noise").get<std::vector<double>>();
            if (d.contains("batch")) c.sweep_batch = d.at("batch").get<std::vector<std::int64_t>>();
        }
        if (j.contains("multigrad")) {
            const auto& d = j.at("multigrad");
            note_unknown_keys(d, "multigrad", {"rounds", "theta", "train_lr"}, errs);
            c.multigrad_rounds = d.value("rounds", c.multigrad_rounds);
            c.multigrad_theta = d.value("theta", c.multigrad_theta);
            c.multigrad_lr = d.value("train_lr", c.multigrad_lr);
        }
        if (j.contains("rgap")) {
            const auto& d = j.at("rgap");
            note_unknown_keys(d, "rgap", {"widths", "replace_layers", "generative"}, errs);
            if (d.contains("widths")) c.rgap_widths = d.at("widths").get<std::vector<std::int64_t>>();
            if (d.contains("replace_layers"))
                c.rgap_replace_layers = d.at("replace_layers").get<std::vector<std::int64_t>>();
            c.rgap_generative_enabled = d.value("generative", c.rgap_generative_enabled);
        }
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail("config: ", e.what());
    }
    if (!errs.empty()) {
        std::string all = "config validation failed:";
        for (const auto& e : errs) all += "\n  - " + e;
        throw Error(all);
    }
    return c;
}

std::vector<std::string> ExperimentConfig::validation_errors() const {
    std::vector<std::string> errs;
    auto require = [&](bool ok, const std::string& msg) {
        if (!ok) errs.push_back(msg);
    };
    const std::set<std::string> commands{"invert", "giml", "rgap", "sweep", "multigrad"};
    require(commands.count(command) > 0,
            format_msg("command: '", command, "' is not one of invert|giml|rgap|sweep|multigrad"));
    require(!out_dir.empty(), "out: output directory required");
    require(!seeds.empty(), "seeds: at least one seed required");
    require(jobs >= 0, "jobs: must be >= 0");
    require(dataset_count >= 1, "dataset.count: must be >= 1");
    const std::set<std::string> families{"blobs", "bars", "two-cluster"};
    require(families.count(dataset_family) > 0,
            format_msg("dataset.family: '", dataset_family, "' is not one of blobs|bars|two-cluster"));
    const std::set<std::string> presets{"mlp3", "cnn4", "dense1"};
    require(presets.count(model_preset) > 0,
            format_msg("model.preset: '", model_preset, "' is not one of mlp3|cnn4|dense1"));
    const std::set<std::string> sources{"preset-untrained", "file", "giml-output"};
    require(sources.count(generator_source) > 0,
            format_msg("generator.source: '", generator_source,
                       "' is not one of preset-untrained|file|giml-output"));
    if (generator_source == "file" || generator_source == "giml-output") {
        require(!generator_path.empty(), "generator.path: required for this generator source");
        if (!generator_path.empty()) {
            fs::path p = generator_path;
            if (generator_source == "giml-output") p = p / "generator.bin";
            require(fs::exists(p), format_msg("generator.path: '", p.string(), "' does not exist"));
        }
    }
    require(inversion.iters_phase1 >= 1, "inversion.iters_phase1: must be >= 1");
    require(inversion.iters_phase2 >= 1, "inversion.iters_phase2: must be >= 1");
    require(inversion.eta_z > 0, "inversion.eta_z: must be positive");
    require(inversion.eta_w > 0, "inversion.eta_w: must be positive");
    require(inversion.eta_x > 0, "inversion.eta_x: must be positive");
    require(inversion.lambda_tv >= 0, "inversion.lambda_tv: must be >= 0");
    require(inversion.lambda_bn >= 0, "inversion.lambda_bn: must be >= 0");
    require(inversion.restarts >= 1, "inversion.restarts: must be >= 1");
    require(defense.sparsity >= 0 && defense.sparsity < 1, "defense.sparsity: must be in [0,1)");
    require(defense.noise >= 0, "defense.noise: must be >= 0");
    require(defense.batch >= 1, "defense.batch: must be >= 1");
    require(defense.batch <= dataset_count, "defense.batch: exceeds dataset.count");
    if (command == "sweep")
        require(!sweep_sparsity.empty() || !sweep_noise.empty() || !sweep_batch.empty(),
                "sweep: at least one non-empty grid required");
    for (double s : sweep_sparsity)
        require(s >= 0 && s < 1, format_msg("sweep.sparsity: value ", s, " out of [0,1)"));
    for (double s : sweep_noise) require(s >= 0, format_msg("sweep.noise: value ", s, " negative"));
    for (auto b : sweep_batch) {
        require(b >= 1, format_msg("sweep.batch: value ", b, " must be >= 1"));
        require(b <= dataset_count, format_msg("sweep.batch: value ", b, " exceeds dataset.count"));
    }
    if (command == "multigrad") {
        require(multigrad_rounds >= 1, "multigrad.rounds: must be >= 1");
        require(multigrad_theta == "reinit" || multigrad_theta == "trained",
                "multigrad.theta: must be reinit or trained");
        require(multigrad_lr > 0, "multigrad.train_lr: must be positive");
        require(inversion.mode == SearchMode::X, "inversion.mode: multigrad runs in input space (x)");
    }
    if (command == "rgap") {
        require(rgap_widths.size() >= 2, "rgap.widths: need at least input and output widths");
        for (auto w : rgap_widths) require(w >= 1, "rgap.widths: widths must be positive");
        if (!rgap_widths.empty()) require(rgap_widths.front() == 256, "rgap.widths: input width must be 256");
        for (auto r : rgap_replace_layers)
            require(r >= 0 && r + 1 < static_cast<std::int64_t>(rgap_widths.size()),
                    format_msg("rgap.replace_layers: layer ", r, " out of range"));
    }
    if (command == "giml") {
        require(giml_nodes >= 1, "meta.nodes: must be >= 1");
        require(giml_rounds >= 1, "meta.rounds: must be >= 1");
        require(meta.task_batch <= giml_nodes * giml_rounds,
                "meta.task_batch: exceeds the simulated task pool");
        require(meta.local_iters >= 1, "meta.local_iters: must be >= 1");
        require(meta.beta > 0 && meta.beta <= 1, "meta.beta: must be in (0,1]");
        require(meta.z_lambda >= 0, "meta.z_lambda: must be >= 0");
        require(meta.alpha > 0, "meta.alpha: must be positive");
        require(meta.outer_steps >= 1, "meta.outer_steps: must be >= 1");
        require(meta.latent_iters >= 1, "meta.latent_iters: must be >= 1");
    }
    const bool needs_generator =
        (command == "invert" || command == "sweep") ? inversion.mode != SearchMode::X
                                                    : (command == "rgap" && rgap_generative_enabled);
    if (needs_generator && generator_source == "preset-untrained")
        require(generator_preset == "dec16", "generator.preset: must be dec16");
    return errs;
}

std::string ExperimentConfig::resolved_json() const {
    json j;
    j["command"] = command;
    j["out"] = out_dir;
    j["jobs"] = jobs;
    j["seeds"] = seeds;
    j["dataset"] = {{"family", dataset_family}, {"count", dataset_count}, {"seed", dataset_seed}};
    j["model"] = {{"preset", model_preset}, {"seed", model_seed}};
    j["generator"] = {{"source", generator_source},
                      {"preset", generator_preset},
                      {"path", generator_path},
                      {"seed", generator_seed}};
    j["inversion"] = {{"mode", search_mode_name(inversion.mode)},
                      {"discrepancy", discrepancy_name(inversion.discrepancy)},
                      {"iters_phase1", inversion.iters_phase1},
                      {"iters_phase2", inversion.iters_phase2},
                      {"eta_z", inversion.eta_z},
                      {"eta_w", inversion.eta_w},
                      {"eta_x", inversion.eta_x},
                      {"lambda_tv", inversion.lambda_tv},
                      {"lambda_bn", inversion.lambda_bn},
                      {"restarts", inversion.restarts},
                      {"adam_beta1", inversion.adam_beta1},
                      {"adam_beta2", inversion.adam_beta2},
                      {"adam_eps", inversion.adam_eps},
                      {"lr_decay", "x0.1 at 3/8, 5/8, 7/8 of iterations"},
                      {"divergence_threshold", inversion.divergence_threshold}};
    j["defense"] = {{"sparsity", defense.sparsity}, {"noise", defense.noise}, {"batch", defense.batch}};
    j["attach_bn"] = attach_bn;
    j["meta"] = {{"task_batch", meta.task_batch},
                 {"local_iters", meta.local_iters},
                 {"z_lambda", meta.z_lambda},
                 {"alpha", meta.alpha},
                 {"beta", meta.beta},
                 {"outer_steps", meta.outer_steps},
                 {"latent_iters", meta.latent_iters},
                 {"eta_z", meta.eta_z},
                 {"nodes", giml_nodes},
                 {"rounds", giml_rounds},
                 {"checkpoint_every", meta.checkpoint_every},
                 {"probe_count", meta.probe_count}};
    j["sweep"] = {{"sparsity", sweep_sparsity}, {"noise", sweep_noise}, {"batch", sweep_batch}};
    j["multigrad"] = {{"rounds", multigrad_rounds}, {"theta", multigrad_theta}, {"train_lr", multigrad_lr}};
    j["rgap"] = {{"widths", rgap_widths},
                 {"replace_layers", rgap_replace_layers},
                 {"generative", rgap_generative_enabled}};
    return j.dump(2);
}

std::uint64_t ExperimentConfig::fingerprint() const {
    return fnv1a64(resolved_json() + GINV_VERSION);
}

// ---------------------------------------------------------------------------
// Pipeline pieces

namespace {

ClassifierModel build_chain(const std::vector<std::int64_t>& widths, std::uint64_t seed) {
    Rng rng(seed);
    ClassifierModel m;
    m.id = format_msg("chain-", seed);
    m.input_dim = widths.front();
    m.input_shape = {16, 16, 1};
    m.label_count = widths.back();
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const bool last = i + 2 == widths.size();
        m.layers.push_back(
            make_dense_layer(widths[i], widths[i + 1], last ? Activation::None : Activation::Sigmoid, rng));
    }
    m.validate();
    return m;
}

std::optional<GeneratorModel> resolve_generator(const ExperimentConfig& cfg, bool needed) {
    if (!needed) return std::nullopt;
    if (cfg.generator_source == "preset-untrained")
        return make_generator_preset(cfg.generator_preset, cfg.generator_seed);
    fs::path p = cfg.generator_path;
    if (cfg.generator_source == "giml-output") p = p / "generator.bin";
    return load_generator(p.string());
}

struct BuiltTask {
    InversionTask task;
    std::vector<Tensor> truth_images; // (H, W, C)
};

BuiltTask build_attack_task(const SyntheticDataset& data, const ClassifierModel& model,
                            const DefenseConfig& def, bool attach_bn, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x7a5c));
    std::vector<Tensor> batch;
    std::vector<std::int64_t> labels;
    for (std::int64_t j = 0; j < def.batch; ++j) {
        const auto pick = rng.below(data.count);
        batch.push_back(data.images[static_cast<std::size_t>(pick)]);
        labels.push_back(data.labels[static_cast<std::size_t>(pick)]);
    }
    GradientReport rep = batch_gradient(model, batch, labels, attach_bn);
    rep = defend_sparsify(std::move(rep), def.sparsity);
    rep = defend_noise(std::move(rep), def.noise, derive_seed(seed, 0xd3f));

    BuiltTask out{InversionTask::from_report(model, std::move(rep)), batch};
    return out;
}

struct SeriesRow {
    std::string label;
    std::uint64_t seed = 0;
    MetricsRecord rec;
    double final_cost = 0.0;
};

void write_summary(const std::vector<SeriesRow>& rows, const std::vector<std::string>& label_order,
                   const std::string& path) {
    std::ofstream os(path);
    check(os.good(), "cannot write '", path, "'");
    os << "label,seed,psnr_mean_db,psnr_best_db,ssim_mean,ssim_best,final_cost,lpips\n";
    for (const auto& r : rows)
        os << r.label << "," << r.seed << "," << fmt_g(r.rec.psnr_mean) << ","
           << fmt_g(r.rec.psnr_best) << "," << fmt_g(r.rec.ssim_mean) << ","
           << fmt_g(r.rec.ssim_best) << "," << fmt_g(r.final_cost) << ",n/a\n";
    for (const auto& label : label_order) {
        double pm = 0, pb = -1e300, sm = 0, sb = -1e300, fc = 0;
        std::int64_t n = 0;
        for (const auto& r : rows) {
            if (r.label != label) continue;
            pm += r.rec.psnr_mean;
            sm += r.rec.ssim_mean;
            fc += r.final_cost;
            pb = std::max(pb, r.rec.psnr_best);
            sb = std::max(sb, r.rec.ssim_best);
            ++n;
        }
        if (!n) continue;
        os << label << ",all," << fmt_g(pm / n) << "," << fmt_g(pb) << "," << fmt_g(sm / n) << ","
           << fmt_g(sb) << "," << fmt_g(fc / n) << ",n/a\n";
    }
    check(os.good(), "write failed for '", path, "'");
}

std::string seed_dir(const std::string& label, std::uint64_t seed) {
    std::string safe = label;
    for (char& ch : safe)
        if (ch == '/' || ch == '=' || ch == ' ') ch = '_';
    return format_msg(safe, "_seed", seed);
}

// one inversion run per seed, parallel across seeds
std::vector<SeriesRow> run_invert_point(const ExperimentConfig& cfg, const SyntheticDataset& data,
                                        const ClassifierModel& model, const DefenseConfig& def,
                                        const GeneratorModel* gen, const std::string& label,
                                        const fs::path& run_dir) {
    const auto S = static_cast<std::int64_t>(cfg.seeds.size());
    std::vector<SeriesRow> rows(static_cast<std::size_t>(S));
#pragma omp parallel for schedule(dynamic) if (par::enabled())
    for (std::int64_t si = 0; si < S; ++si) {
        const std::uint64_t seed = cfg.seeds[static_cast<std::size_t>(si)];
        BuiltTask bt = build_attack_task(data, model, def, cfg.attach_bn, seed);
        InversionConfig icfg = cfg.inversion;
        icfg.seed = seed;
        BatchEstimate est = invert(bt.task, icfg, gen);
        MetricsRecord rec = score_batch(est.images, bt.truth_images);
        rec.final_cost = est.final_cost;
        rec.seed = seed;
        write_outputs(rec, est.images, bt.truth_images, est.curve,
                      (run_dir / seed_dir(label, seed)).string());
        rows[static_cast<std::size_t>(si)] = {label, seed, std::move(rec), est.final_cost};
    }
    return rows;
}

void write_run_json(const ExperimentConfig& cfg, const SyntheticDataset& data, const fs::path& dir,
                    const std::string& method_label) {
    json j;
    j["command"] = cfg.command;
    j["method"] = method_label;
    j["code_version"] = GINV_VERSION;
    j["fingerprint"] = format_msg(std::hex, cfg.fingerprint());
    j["dataset_fingerprint"] = format_msg(std::hex, data.fingerprint());
    std::ofstream os((dir / "run.json").string());
    check(os.good(), "cannot write run.json in '", dir.string(), "'");
    os << j.dump(2) << "\n";
}

} // namespace

RunOutcome run_experiment(ExperimentConfig cfg) {
    RunOutcome out;
    out.run_dir = cfg.out_dir;
    auto errors = cfg.validation_errors();
    fs::path dir = cfg.out_dir.empty() ? fs::path(".") : fs::path(cfg.out_dir);
    if (!errors.empty()) {
        out.exit_code = 2;
        out.errors = errors;
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (!ec) {
            json j;
            j["errors"] = errors;
            std::ofstream os((dir / "errors.json").string());
            os << j.dump(2) << "\n";
        }
        return out;
    }

#ifdef _OPENMP
    if (cfg.jobs > 0) omp_set_num_threads(static_cast<int>(std::min<std::int64_t>(cfg.jobs, omp_get_max_threads())));
#endif

    try {
        fs::create_directories(dir);
        {
            std::ofstream os((dir / "resolved-config.json").string());
            check(os.good(), "cannot write resolved-config.json");
            os << cfg.resolved_json() << "\n";
        }
        SyntheticDataset data = make_dataset(cfg.dataset_family, cfg.dataset_count, cfg.dataset_seed);
        const std::string method_label =
            cfg.command == "invert" || cfg.command == "sweep" || cfg.command == "multigrad"
                ? format_msg(cfg.command, "[", search_mode_name(cfg.inversion.mode), "]")
                : cfg.command;
        write_run_json(cfg, data, dir, method_label);

        if (cfg.command == "invert") {
            ClassifierModel model = make_classifier_preset(cfg.model_preset, cfg.model_seed);
            auto gen = resolve_generator(cfg, cfg.inversion.mode != SearchMode::X);
            auto rows = run_invert_point(cfg, data, model, cfg.defense, gen ? &*gen : nullptr,
                                         "invert", dir);
            write_summary(rows, {"invert"}, (dir / "summary.csv").string());
        } else if (cfg.command == "sweep") {
            ClassifierModel model = make_classifier_preset(cfg.model_preset, cfg.model_seed);
            auto gen = resolve_generator(cfg, cfg.inversion.mode != SearchMode::X);
            struct Point {
                std::string label;
                DefenseConfig def;
            };
            std::vector<Point> points;
            for (double s : cfg.sweep_sparsity) {
                DefenseConfig d = cfg.defense;
                d.sparsity = s;
                points.push_back({format_msg("sparsity=", fmt_g(s)), d});
            }
            for (double s : cfg.sweep_noise) {
                DefenseConfig d = cfg.defense;
                d.noise = s;
                points.push_back({format_msg("noise=", fmt_g(s)), d});
            }
            for (auto b : cfg.sweep_batch) {
                DefenseConfig d = cfg.defense;
                d.batch = b;
                points.push_back({format_msg("batch=", b), d});
            }
            std::vector<SeriesRow> all;
            std::vector<std::string> order;
            for (const auto& p : points) {
                auto rows = run_invert_point(cfg, data, model, p.def, gen ? &*gen : nullptr, p.label, dir);
                all.insert(all.end(), rows.begin(), rows.end());
                order.push_back(p.label);
            }
            write_summary(all, order, (dir / "summary.csv").string());
        } else if (cfg.command == "multigrad") {
            const auto S = static_cast<std::int64_t>(cfg.seeds.size());
            std::vector<SeriesRow> rows(static_cast<std::size_t>(S));
#pragma omp parallel for schedule(dynamic) if (par::enabled())
            for (std::int64_t si = 0; si < S; ++si) {
                const std::uint64_t seed = cfg.seeds[static_cast<std::size_t>(si)];
                const auto pick = static_cast<std::int64_t>(seed % static_cast<std::uint64_t>(data.count));
                Tensor image = data.images[static_cast<std::size_t>(pick)];
                const std::int64_t label = data.labels[static_cast<std::size_t>(pick)];

                Tensor flat = image;
                flat.shape = {256};
                std::vector<InversionTask> tasks;
                ClassifierModel current = make_classifier_preset(cfg.model_preset, derive_seed(cfg.model_seed, seed));
                for (std::int64_t t = 0; t < cfg.multigrad_rounds; ++t) {
                    if (cfg.multigrad_theta == "reinit" && t > 0)
                        current = make_classifier_preset(
                            cfg.model_preset, derive_seed(cfg.model_seed, (seed << 16) + static_cast<std::uint64_t>(t)));
                    ClassifierModel snapshot = current; // theta at reporting time
                    GradientReport rep =
                        batch_gradient(snapshot, std::span(&flat, 1), std::vector<std::int64_t>{label}, cfg.attach_bn);
                    rep = defend_sparsify(std::move(rep), cfg.defense.sparsity);
                    rep = defend_noise(std::move(rep), cfg.defense.noise,
                                       derive_seed(seed, 0xd3f + static_cast<std::uint64_t>(t)));
                    if (cfg.multigrad_theta == "trained") {
                        std::size_t pi = 0;
                        for (auto& l : current.layers)
                            for (int which = 0; which < 2; ++which, ++pi) {
                                Tensor& param = which == 0 ? l.weights : l.bias;
                                for (std::int64_t i = 0; i < param.numel(); ++i)
                                    param[i] -= cfg.multigrad_lr * rep.grads[pi][i];
                            }
                    }
                    tasks.push_back(InversionTask::from_report(std::move(snapshot), std::move(rep)));
                }
                InversionConfig icfg = cfg.inversion;
                icfg.seed = seed;
                BatchEstimate est = invert_multi(tasks, icfg);
                std::vector<Tensor> truth{image};
                MetricsRecord rec = score_batch(est.images, truth);
                rec.final_cost = est.final_cost;
                rec.seed = seed;
                write_outputs(rec, est.images, truth, est.curve,
                              (dir / seed_dir("multigrad", seed)).string());
                rows[static_cast<std::size_t>(si)] = {"multigrad", seed, std::move(rec), est.final_cost};
            }
            write_summary(rows, {"multigrad"}, (dir / "summary.csv").string());
        } else if (cfg.command == "rgap") {
            const auto S = static_cast<std::int64_t>(cfg.seeds.size());
            std::vector<SeriesRow> rows(static_cast<std::size_t>(S));
            auto gen = resolve_generator(cfg, cfg.rgap_generative_enabled);
#pragma omp parallel for schedule(dynamic) if (par::enabled())
            for (std::int64_t si = 0; si < S; ++si) {
                const std::uint64_t seed = cfg.seeds[static_cast<std::size_t>(si)];
                ClassifierModel model = build_chain(cfg.rgap_widths, derive_seed(cfg.model_seed, seed));
                const auto pick = static_cast<std::int64_t>(seed % static_cast<std::uint64_t>(data.count));
                Tensor image = data.images[static_cast<std::size_t>(pick)];
                Tensor flat = image;
                flat.shape = {model.input_dim};
                GradientReport rep = batch_gradient(model, std::span(&flat, 1),
                                                    std::vector<std::int64_t>{data.labels[static_cast<std::size_t>(pick)]});
                rep = defend_sparsify(std::move(rep), cfg.defense.sparsity);
                rep = defend_noise(std::move(rep), cfg.defense.noise, derive_seed(seed, 0xd3f));

                RgapResult res;
                if (cfg.rgap_generative_enabled) {
                    RgapGenConfig gcfg;
                    for (auto r : cfg.rgap_replace_layers) gcfg.replace_layers.push_back(static_cast<std::size_t>(r));
                    gcfg.seed = seed;
                    res = rgap_generative(model, rep, *gen, gcfg, &flat);
                } else {
                    res = rgap_recursive(model, rep, &flat);
                }
                const std::string sdir = (dir / seed_dir("rgap", seed)).string();
                fs::create_directories(sdir);
                write_rgap_curve(res, sdir + "/layers.csv");
                Tensor est = res.input;
                est.shape = model.input_shape;
                for (auto& v : est.data) v = std::clamp(v, 0.0, 1.0);
                std::vector<Tensor> est_b{est}, truth_b{image};
                MetricsRecord rec = score_batch(est_b, truth_b);
                rec.seed = seed;
                write_outputs(rec, est_b, truth_b, {}, sdir);
                rows[static_cast<std::size_t>(si)] = {"rgap", seed, std::move(rec),
                                                      res.residuals.empty() ? 0.0 : res.residuals.back()};
            }
            write_summary(rows, {"rgap"}, (dir / "summary.csv").string());
        } else if (cfg.command == "giml") {
            SimConfig scfg;
            scfg.nodes = cfg.giml_nodes;
            scfg.rounds = cfg.giml_rounds;
            scfg.defense = cfg.defense;
            scfg.theta_mode = ThetaMode::Reinit;
            scfg.attach_bn = cfg.attach_bn;
            scfg.model_preset = cfg.model_preset;
            scfg.model_seed = cfg.model_seed;
            scfg.seed = cfg.seeds[0];
            SimOutput sim = simulate_rounds(data, scfg);

            MetaConfig mcfg = cfg.meta;
            mcfg.discrepancy = cfg.inversion.discrepancy;
            mcfg.lambda_tv = cfg.inversion.lambda_tv;
            mcfg.seed = cfg.seeds[0];
            GeneratorModel init = make_generator_preset(cfg.generator_preset, cfg.generator_seed);
            GimlResult res = giml(sim.tasks, mcfg, std::move(init));
            save_generator(res.generator, (dir / "generator.bin").string());
            write_giml_log(res, (dir / "training_log.csv").string());
            write_probe_grids(res, (dir / "probes").string());

            // summary: no reconstruction metrics at the giml stage
            std::ofstream os((dir / "summary.csv").string());
            os << "label,seed,psnr_mean_db,psnr_best_db,ssim_mean,ssim_best,final_cost,lpips\n";
            const double last = res.log.empty() ? 0.0 : res.log.back().summed_cost;
            os << "giml," << cfg.seeds[0] << ",n/a,n/a,n/a,n/a," << fmt_g(last) << ",n/a\n";
            os << "giml,all,n/a,n/a,n/a,n/a," << fmt_g(last) << ",n/a\n";
        }
    } catch (const Error& e) {
        out.exit_code = 1;
        out.errors.push_back(e.what());
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (!ec) {
            json j;
            j["errors"] = out.errors;
            std::ofstream os((dir / "errors.json").string());
            os << j.dump(2) << "\n";
        }
    }
    return out;
}

void compare_runs(const std::vector<std::string>& run_dirs, const std::string& out_csv) {
    check(run_dirs.size() >= 2, "compare: need at least 2 run directories, got ", run_dirs.size());
    std::string dataset_fp;
    std::ofstream os(out_csv);
    check(os.good(), "cannot write '", out_csv, "'");
    os << "method,psnr_mean_db,psnr_best_db,ssim_mean,ssim_best,lpips\n";
    for (const auto& d : run_dirs) {
        std::ifstream rj((fs::path(d) / "run.json").string());
        check(rj.good(), "compare: '", d, "' has no run.json (incomplete run)");
        json j = json::parse(rj);
        const std::string fp = j.value("dataset_fingerprint", "");
        if (dataset_fp.empty())
            dataset_fp = fp;
        else
            check(fp == dataset_fp, "compare: '", d,
                  "' was produced on a different dataset (fingerprint mismatch)");
        const std::string method = j.value("method", d);

        std::ifstream sc((fs::path(d) / "summary.csv").string());
        check(sc.good(), "compare: '", d, "' has no summary.csv");
        std::string line;
        std::getline(sc, line); // header
        while (std::getline(sc, line)) {
            // keep aggregate rows only: label,all,...
            const auto c1 = line.find(',');
            if (c1 == std::string::npos) continue;
            const auto c2 = line.find(',', c1 + 1);
            if (c2 == std::string::npos) continue;
            if (line.substr(c1 + 1, c2 - c1 - 1) != "all") continue;
            const std::string label = line.substr(0, c1);
            std::string rest = line.substr(c2 + 1);
            // rest: psnr_mean,psnr_best,ssim_mean,ssim_best,final_cost,lpips
            std::vector<std::string> cells;
            std::size_t pos = 0;
            while (pos <= rest.size()) {
                const auto nxt = rest.find(',', pos);
                cells.push_back(rest.substr(pos, nxt == std::string::npos ? std::string::npos : nxt - pos));
                if (nxt == std::string::npos) break;
                pos = nxt + 1;
            }
            check(cells.size() >= 6, "compare: malformed summary row in '", d, "'");
            const bool plain = label == "invert" || label == "multigrad" || label == "rgap" || label == "giml";
            os << (plain ? method : format_msg(method, ":", label)) << "," << cells[0] << ","
               << cells[1] << "," << cells[2] << "," << cells[3] << ",n/a\n";
        }
    }
    check(os.good(), "write failed for '", out_csv, "'");
}

} // namespace ginv
