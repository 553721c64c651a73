#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "ginv/giml.hpp"
#include "ginv/rng.hpp"

using namespace ginv;

namespace {

ClassifierModel small_net(std::uint64_t seed) {
    Rng rng(seed);
    ClassifierModel m;
    m.id = format_msg("small-", seed);
    m.input_dim = 256;
    m.input_shape = {16, 16, 1};
    m.label_count = 10;
    m.layers.push_back(make_dense_layer(256, 24, Activation::Sigmoid, rng));
    m.layers.push_back(make_dense_layer(24, 10, Activation::None, rng));
    m.validate();
    return m;
}

InversionTask gen_task(const ClassifierModel& m, const GeneratorModel& gen, const Tensor& z,
                       std::int64_t label) {
    Tensor img = generate(gen, z);
    img.shape = {m.input_dim};
    auto rep = batch_gradient(m, std::span(&img, 1), std::vector<std::int64_t>{label});
    return InversionTask::from_report(m, rep);
}

double znorm(const Tensor& z) {
    double n = 0.0;
    for (double v : z.data) n += v * v;
    return std::sqrt(n);
}

} // namespace

TEST_CASE("reptile_update: exact interpolation identities") {
    GeneratorModel a = make_generator_preset("dec16", 1);
    GeneratorModel b = make_generator_preset("dec16", 2);

    GeneratorModel w = a;
    reptile_update(w, b, 1.0);
    auto pw = w.params();
    auto pb = b.params();
    for (std::size_t i = 0; i < pw.size(); ++i) CHECK(pw[i]->data == pb[i]->data);

    w = a;
    reptile_update(w, b, 0.0); // config forbids 0, the function is total
    auto pa = a.params();
    pw = w.params();
    for (std::size_t i = 0; i < pw.size(); ++i) CHECK(pw[i]->data == pa[i]->data);

    GeneratorModel zero = a;
    for (auto* p : zero.params())
        for (auto& v : p->data) v = 0.0;
    reptile_update(zero, b, 0.3);
    auto pz = zero.params();
    for (std::size_t i = 0; i < pz.size(); ++i)
        for (std::int64_t j = 0; j < pz[i]->numel(); ++j)
            CHECK((*pz[i])[j] == doctest::Approx(0.3 * (*pb[i])[j]).epsilon(1e-15));
}

TEST_CASE("meta config validation") {
    MetaConfig ok;
    ok.validate();
    MetaConfig bad = ok;
    bad.local_iters = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = ok;
    bad.beta = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = ok;
    bad.beta = 1.5;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = ok;
    bad.task_batch = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = ok;
    bad.z_lambda = -1.0;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("regularized_latent_search: limits and monotone shrinkage") {
    ClassifierModel m = small_net(3);
    GeneratorModel gen = make_generator_preset("dec16", 4);
    Rng rng(5);
    InversionTask task = gen_task(m, gen, rng.normal_tensor({16}), 3);

    MetaConfig cfg;
    cfg.lambda_tv = 0.0;

    // huge lambda: the regularizer dominates and pushes the codes to zero
    MetaConfig wide = cfg;
    wide.divergence_threshold = 1e12; // the regularized objective starts above 1e6 by design
    LatentSearch dominated = regularized_latent_search(task, gen, 1e6, 400, wide, 7);
    CHECK(!dominated.diverged);
    CHECK(znorm(dominated.codes[0]) <= 1e-2);

    // lambda = 0 reduces to invert in latent mode with the shared weights
    InversionConfig icfg;
    icfg.mode = SearchMode::Z;
    icfg.discrepancy = cfg.discrepancy;
    icfg.lambda_tv = 0.0;
    icfg.iters_phase1 = 20;
    icfg.iters_phase2 = 20;
    icfg.restarts = 1;
    icfg.seed = 11;
    BatchEstimate inv = invert(task, icfg, &gen);
    LatentSearch plain = regularized_latent_search(task, gen, 0.0, 40, cfg, 11);
    CHECK(plain.final_cost == inv.final_cost);

    // monotone: stronger regularization never grows the final code norm
    double prev = 1e300;
    for (double lambda : {0.0, 1e-3, 1e-1, 10.0}) {
        LatentSearch s = regularized_latent_search(task, gen, lambda, 60, cfg, 13);
        const double n = znorm(s.codes[0]);
        CHECK(n <= prev + 1e-6);
        prev = n;
    }

    CHECK_THROWS_AS(regularized_latent_search(task, gen, -1.0, 10, cfg, 1), Error);
}

TEST_CASE("regularized_latent_search: self-consistent task stays near the unregularized optimum") {
    ClassifierModel m = small_net(21);
    GeneratorModel gen = make_generator_preset("dec16", 22);
    Rng rng(23);
    InversionTask task = gen_task(m, gen, rng.normal_tensor({16}), 5);

    MetaConfig cfg;
    cfg.lambda_tv = 0.0;
    LatentSearch base = regularized_latent_search(task, gen, 0.0, 250, cfg, 31);
    LatentSearch reg = regularized_latent_search(task, gen, 1e-4, 250, cfg, 31);
    CHECK(!base.diverged);
    CHECK(!reg.diverged);
    CHECK(reg.final_cost <= base.final_cost + 1e-3);
    CHECK(znorm(reg.codes[0]) <= znorm(base.codes[0]) + 1e-6);
}

TEST_CASE("meta_param_step: zero step size is a bitwise no-op; descent holds on seeded trials") {
    int descents = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        ClassifierModel m = small_net(100 + s);
        GeneratorModel gen = make_generator_preset("dec16", 200 + s);
        Rng rng(300 + s);
        std::vector<InversionTask> tasks;
        std::vector<std::vector<Tensor>> codes;
        for (int i = 0; i < 2; ++i) {
            tasks.push_back(gen_task(m, gen, rng.normal_tensor({16}), rng.below(10)));
            codes.push_back({rng.normal_tensor({16})});
        }
        MetaConfig cfg;

        GeneratorModel frozen = gen;
        MetaStep noop = meta_param_step(frozen, tasks, codes, 0.0, 3, cfg);
        CHECK(noop.ok);
        auto pa = frozen.params();
        auto pb = gen.params();
        for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data == pb[i]->data);

        GeneratorModel stepped = gen;
        MetaStep ms = meta_param_step(stepped, tasks, codes, 1e-3, 1, cfg);
        CHECK(ms.ok);
        if (ms.cost_after < ms.cost_before) ++descents;
    }
    CHECK(descents >= 9);
}

TEST_CASE("giml: self-consistent single-task run improves, probes move, truth never read") {
    SyntheticDataset data = make_dataset("two-cluster", 8, 41);
    SimConfig scfg;
    scfg.nodes = 4;
    scfg.rounds = 1;
    scfg.defense.batch = 1;
    scfg.model_preset = "mlp3";
    scfg.model_seed = 42;
    scfg.seed = 43;
    SimOutput out = simulate_rounds(data, scfg);

    MetaConfig cfg;
    cfg.task_batch = 2;
    cfg.outer_steps = 8;
    cfg.latent_iters = 30;
    cfg.local_iters = 2;
    cfg.seed = 44;
    cfg.checkpoint_every = 4;
    cfg.probe_count = 4;

    GeneratorModel init = make_generator_preset("dec16", 45);
    GimlResult res = giml(out.tasks, cfg, init);
    CHECK(out.truth.reads() == 0); // no-leak audit

    REQUIRE(!res.log.empty());
    REQUIRE(res.probe_samples.size() >= 2);
    // fixed probe z's generate different samples as training progresses
    bool moved = false;
    for (std::size_t i = 0; i < res.probe_samples[0].size(); ++i)
        if (res.probe_samples.front()[i].data != res.probe_samples.back()[i].data) moved = true;
    CHECK(moved);

    write_giml_log(res, "./giml_log_test.csv");
    std::ifstream is("./giml_log_test.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "outer_step,summed_cost,mean_z_norm,eval_psnr,skipped");
    int rows = 0;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 8);

    write_probe_grids(res, "./giml_probe_test");
    CHECK(std::ifstream(format_msg("./giml_probe_test/probe_step", res.checkpoint_steps[0], ".pgm")).good());
}

TEST_CASE("giml: summed cost on a generator-produced task set decreases") {
    ClassifierModel m = small_net(51);
    GeneratorModel gen = make_generator_preset("dec16", 52);
    Rng rng(53);

    TaskSet tasks;
    tasks.model_preset = "custom";
    tasks.snapshots.push_back(m);
    for (int i = 0; i < 2; ++i) {
        Tensor img = generate(gen, rng.normal_tensor({16}));
        img.shape = {256};
        auto rep = batch_gradient(m, std::span(&img, 1), std::vector<std::int64_t>{rng.below(10)});
        rep.round = 0;
        rep.node = i;
        tasks.entries.push_back({0, std::move(rep)});
    }

    MetaConfig cfg;
    cfg.task_batch = 2;
    cfg.outer_steps = 10;
    cfg.latent_iters = 40;
    cfg.local_iters = 3;
    cfg.alpha = 1e-2;
    cfg.seed = 54;
    GimlResult res = giml(tasks, cfg, gen);

    double first = 0.0, last = 0.0;
    for (const auto& r : res.log)
        if (!r.skipped) {
            if (first == 0.0) first = r.summed_cost;
            last = r.summed_cost;
        }
    CHECK(last <= first);

    MetaConfig toobig = cfg;
    toobig.task_batch = 10;
    CHECK_THROWS_AS(giml(tasks, toobig, make_generator_preset("dec16", 1)), Error);
}

TEST_CASE("giml: the learned prior speeds up convergence on held-out tasks") {
    // GIAS from a briefly meta-learned generator reaches the wrong-prior run's
    // final cost in fewer iterations (median over held-out tasks).
    SyntheticDataset data = make_dataset("two-cluster", 96, 61, 0.05);
    SimConfig scfg;
    scfg.nodes = 16;
    scfg.rounds = 2;
    scfg.defense.batch = 1;
    scfg.theta_mode = ThetaMode::Reinit;
    scfg.model_preset = "mlp3";
    scfg.model_seed = 3;
    scfg.seed = 4;
    SimOutput sim = simulate_rounds(data, scfg);

    MetaConfig mcfg;
    mcfg.task_batch = 8;
    mcfg.outer_steps = 30;
    mcfg.latent_iters = 60;
    mcfg.alpha = 0.3;
    mcfg.z_lambda = 1e-2;
    mcfg.discrepancy = Discrepancy::L2;
    mcfg.seed = 5;
    GimlResult res = giml(sim.tasks, mcfg, make_generator_preset("dec16", 6));

    SyntheticDataset bars = make_dataset("bars", 32, 21);
    FitConfig fc;
    fc.iterations = 300;
    fc.seed = 2;
    GeneratorModel wrong = fit_generator_to_images(make_generator_preset("dec16", 7), bars.images, fc);

    std::vector<double> hit_iters;
    int strictly_faster = 0;
    const std::int64_t total = 120;
    for (int t = 0; t < 7; ++t) {
        Rng rng(derive_seed(400, static_cast<std::uint64_t>(t)));
        const auto pick = rng.below(data.count);
        Tensor img = data.images[static_cast<std::size_t>(pick)];
        img.shape = {256};
        ClassifierModel m = make_classifier_preset("mlp3", derive_seed(90, static_cast<std::uint64_t>(t)));
        auto rep = batch_gradient(m, std::span(&img, 1),
                                  std::vector<std::int64_t>{data.labels[static_cast<std::size_t>(pick)]});
        InversionTask task = InversionTask::from_report(std::move(m), std::move(rep));
        InversionConfig icfg;
        icfg.mode = SearchMode::ZW;
        icfg.iters_phase1 = 80;
        icfg.iters_phase2 = 40;
        icfg.restarts = 1;
        icfg.seed = static_cast<std::uint64_t>(t);
        BatchEstimate wrong_est = invert(task, icfg, &wrong);
        BatchEstimate trained_est = invert(task, icfg, &res.generator);

        std::int64_t hit = total;
        std::int64_t step = 0;
        for (const auto& pt : trained_est.curve) {
            if (pt.cost <= wrong_est.final_cost) {
                hit = step;
                break;
            }
            ++step;
        }
        hit_iters.push_back(static_cast<double>(hit));
        if (hit < total) ++strictly_faster;
    }
    std::sort(hit_iters.begin(), hit_iters.end());
    CHECK(hit_iters[hit_iters.size() / 2] < static_cast<double>(total));
    CHECK(strictly_faster >= 4);
}
