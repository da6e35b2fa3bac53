#include <gtest/gtest.h>

#include <cmath>

#include "poisonlab/harness.hpp"

using namespace poisonlab;

namespace {

AttackConfig mini_attack_config() {
    AttackConfig c;
    c.world.count = 30;
    c.world.targets = 1;
    c.target_id = "target_0000";
    c.world_seed = 404;
    c.budget.per_element = 2;
    c.T = 50;
    c.epochs_override = 2;
    c.cir_samples = 6;
    c.fae_per_epoch = 3;
    c.guidance = 1.5;
    c.seed = 5;
    return c;
}

Descriptor make_desc(std::vector<double> v) {
    Descriptor d;
    d.version = "test";
    d.v = std::move(v);
    return d;
}

}  // namespace

TEST(Trigger, MatchesTemplate) {
    const auto t = build_trigger(std::vector<std::string>{"a", "b"});
    EXPECT_EQ(t.rendered, "an image with a, b.");
    const auto tp = build_trigger(std::vector<std::string>{"red fins", "blue tail"},
                                  "a pokemon with features ");
    EXPECT_EQ(tp.rendered, "a pokemon with features red fins, blue tail.");
    EXPECT_THROW(build_trigger(std::vector<std::string>{"only one"}), std::invalid_argument);
}

TEST(Trigger, CoversEachPhraseExactlyOnce) {
    Rng rng(3);
    const SceneGraph g = sample_scene(rng, 5);
    const Image img = render(g);
    const auto els = decompose(img, &g, ground_truth_backend());
    const auto t = build_trigger(els);
    ASSERT_EQ(t.phrases.size(), 5u);
    for (std::size_t i = 0; i < els.size(); ++i) {
        EXPECT_EQ(t.phrases[i], els[i].phrase);  // scene order
        EXPECT_EQ(count_occurrences(t.rendered, els[i].phrase), 1);
    }
}

TEST(CirEstimator, CountingOracle) {
    // Injected trace: exactly 37 of 100 scores above delta.
    std::vector<double> scores;
    for (int i = 0; i < 37; ++i) scores.push_back(0.6);
    for (int i = 0; i < 63; ++i) scores.push_back(0.4);
    EXPECT_EQ(cir_from_scores(scores, 0.5), 0.37);
    // Boundary: equality does not count (strict >).
    EXPECT_EQ(cir_from_scores({0.5, 0.5001}, 0.5), 0.5);
    // A sampler stub emitting the target itself scores 1.0 everywhere.
    EXPECT_EQ(cir_from_scores(std::vector<double>(10, 1.0), 0.5), 1.0);
    EXPECT_THROW(cir_from_scores({}, 0.5), std::invalid_argument);
}

TEST(CirEstimator, MatchesBruteForceOnRandomTraces) {
    Rng rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> scores;
        const int n = 1 + int(rng.uniform_index(64));
        for (int i = 0; i < n; ++i) scores.push_back(rng.uniform());
        const double delta = rng.uniform(0.2, 0.8);
        int count = 0;
        for (double s : scores) count += (s > delta) ? 1 : 0;
        EXPECT_EQ(cir_from_scores(scores, delta), double(count) / double(n));
    }
}

TEST(FaeEstimator, ScanOracle) {
    EXPECT_EQ(fae_from_epoch_maxes({0.3, 0.49, 0.51, 0.2}, 0.5), std::optional<int>(3));
    EXPECT_EQ(fae_from_epoch_maxes({0.3, 0.49, 0.499}, 0.5), std::nullopt);
    EXPECT_EQ(fae_from_epoch_maxes({0.9}, 0.5), std::optional<int>(1));
    EXPECT_EQ(fae_from_epoch_maxes({0.5, 0.6}, 0.5), std::optional<int>(2));  // strict >
}

TEST(RatioBookkeeping, PaperScaleExample) {
    // 118 poison + 60,000 clean -> 0.196% ~= 0.20%
    const double r = poison_ratio_of(118, 60000, 0);
    EXPECT_NEAR(r, 0.00196, 0.00002);
    EXPECT_EQ(poison_ratio_of(0, 100, 0), 0.0);
    EXPECT_NEAR(poison_ratio_of(100, 1000, 26), 100.0 / 1126.0, 1e-12);
}

TEST(AttackConfigJson, RoundTripAndFrozenPipeline) {
    AttackConfig c = mini_attack_config();
    c.budget.ratio = 0.15;
    const json j = attack_config_to_json(c);
    const AttackConfig back = parse_attack_config(j);
    EXPECT_EQ(back.world.count, c.world.count);
    EXPECT_EQ(back.target_id, c.target_id);
    EXPECT_EQ(back.budget.per_element, c.budget.per_element);
    EXPECT_EQ(back.seed, c.seed);
    EXPECT_EQ(back.guidance, c.guidance);

    // The training pipeline is frozen: overrides are refused.
    for (const std::string key :
         {"learning_rate", "batch_size", "grad_clip", "cond_drop", "epochs", "train_config"}) {
        json bad = j;
        bad[key] = 123;
        EXPECT_THROW(parse_attack_config(bad), std::invalid_argument) << key;
    }
}

TEST(RunAttack, ReplaysBitIdentically) {
    const AttackConfig cfg = mini_attack_config();
    const AttackRun a = run_attack(cfg);
    const AttackRun b = replay_attack(attack_run_to_json(a));
    EXPECT_EQ(a.metrics.cir, b.metrics.cir);
    EXPECT_EQ(a.metrics.fae.has_value(), b.metrics.fae.has_value());
    if (a.metrics.fae) EXPECT_EQ(*a.metrics.fae, *b.metrics.fae);
    EXPECT_EQ(a.metrics.cir_scores, b.metrics.cir_scores);
    EXPECT_EQ(a.metrics.per_epoch_max, b.metrics.per_epoch_max);
    EXPECT_EQ(a.epoch_losses, b.epoch_losses);
    EXPECT_EQ(a.tau, b.tau);
    EXPECT_EQ(a.thresholds.delta, b.thresholds.delta);
    EXPECT_EQ(a.final_checkpoint.params, b.final_checkpoint.params);
}

TEST(RunAttack, RecordsRatioIdentity) {
    AttackConfig cfg = mini_attack_config();
    cfg.shots = 0;
    const AttackRun run = run_attack(cfg);
    EXPECT_EQ(run.poison_ratio,
              poison_ratio_of(run.poison_count, run.clean_count, run.aux_count));
    EXPECT_GT(run.poison_count, 0u);
    EXPECT_EQ(run.clean_count, 30u);
    // Gate soundness on the persisted set.
    const Dataset world = gen_dataset(cfg.world, cfg.world_seed);
    const Record& target = world.by_id(cfg.target_id);
    for (const auto& p : run.poison.pairs) EXPECT_LT(score(p.image, target.image), run.tau);
    EXPECT_LT(run.tau, run.thresholds.delta);
}

TEST(RunAttack, CleanRunHasNoPoison) {
    AttackConfig cfg = mini_attack_config();
    cfg.poison_enabled = false;
    cfg.fae_online = false;
    const AttackRun run = run_attack(cfg);
    EXPECT_EQ(run.poison_count, 0u);
    EXPECT_EQ(run.poison_ratio, 0.0);
    EXPECT_TRUE(run.metrics.per_epoch_max.empty());
    EXPECT_FALSE(run.metrics.fae.has_value());
}

TEST(RunAttack, StageErrorsAreLabeled) {
    AttackConfig cfg = mini_attack_config();
    cfg.target_id = "target_9999";
    try {
        run_attack(cfg);
        FAIL() << "expected stage error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("stage decompose"), std::string::npos) << e.what();
    }
}

TEST(Sweep, RunsCellsAndRecordsFailures) {
    AttackConfig base = mini_attack_config();
    base.epochs_override = 1;
    base.cir_samples = 4;
    base.fae_online = false;
    std::vector<SweepCell> cells;
    cells.push_back({"ok_cell", base});
    AttackConfig broken = base;
    broken.target_id = "target_0042";  // does not exist
    cells.push_back({"broken_cell", broken});

    const SweepResult result = run_sweep(cells, {11}, /*jobs=*/2);
    ASSERT_EQ(result.cells.size(), 2u);
    EXPECT_EQ(result.cells[0].failures, 0);
    EXPECT_EQ(result.cells[1].failures, 1);
    const std::string csv = sweep_csv(result);
    EXPECT_NE(csv.find("cell,runs,failures"), std::string::npos);
    EXPECT_NE(csv.find("ok_cell"), std::string::npos);
}

TEST(Sweep, CellGridsMatchExperimentLayouts) {
    const AttackConfig base = mini_attack_config();
    EXPECT_EQ(ratio_sweep_cells(base).size(), 3u);
    EXPECT_EQ(scale_sweep_cells(base).size(), 3u);
    EXPECT_EQ(subsample_sweep_cells(base).size(), 4u);
    EXPECT_EQ(capacity_sweep_cells(base).size(), 6u);
    EXPECT_EQ(shot_sweep_cells(base).size(), 4u);
    // The scale sweep freezes the poison count at the base-cell k.
    const auto scale = scale_sweep_cells(base, {base.world.count, 2 * base.world.count});
    EXPECT_EQ(scale[1].config.budget.per_element,
              base.budget.resolve_k(std::size_t(base.world.count), 4));
}

TEST(Median, OddAndEven) {
    EXPECT_EQ(median_of({3.0, 1.0, 2.0}), 2.0);
    EXPECT_EQ(median_of({4.0, 1.0, 2.0, 3.0}), 2.5);
    EXPECT_THROW(median_of({}), std::invalid_argument);
}

TEST(Frechet, IdenticalSetsAreZero) {
    std::vector<Descriptor> a;
    Rng rng(5);
    for (int i = 0; i < 8; ++i) {
        std::vector<double> v(16);
        for (auto& x : v) x = rng.uniform();
        a.push_back(make_desc(v));
    }
    EXPECT_EQ(frechet_proxy(a, a), 0.0);
}

TEST(Frechet, DisjointSolidColorsArePositive) {
    const Image red(8, 8, 0.0f);
    Image blue(8, 8, 0.0f);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const_cast<Image&>(red).at(y, x, 0) = 0.9f;
            blue.at(y, x, 2) = 0.9f;
        }
    std::vector<Descriptor> a(4, embed(red)), b(4, embed(blue));
    EXPECT_GT(frechet_proxy(a, b), 0.0);
}

TEST(Frechet, MatchesClosedFormOnKnownGaussians) {
    // Two-point sets {mu - sigma, mu + sigma} have exactly mean mu and
    // population variance sigma^2, so the analytic distance is exact.
    const std::vector<double> mu1 = {0.2, 0.5, 0.9}, sd1 = {0.1, 0.2, 0.05};
    const std::vector<double> mu2 = {0.25, 0.4, 1.1}, sd2 = {0.15, 0.1, 0.05};
    auto two_point = [](const std::vector<double>& mu, const std::vector<double>& sd) {
        std::vector<Descriptor> out;
        std::vector<double> lo(mu.size()), hi(mu.size());
        for (std::size_t i = 0; i < mu.size(); ++i) {
            lo[i] = mu[i] - sd[i];
            hi[i] = mu[i] + sd[i];
        }
        out.push_back(make_desc(lo));
        out.push_back(make_desc(hi));
        return out;
    };
    const double got = frechet_proxy(two_point(mu1, sd1), two_point(mu2, sd2));
    double want = 0.0;  // analytic oracle
    for (std::size_t i = 0; i < mu1.size(); ++i) {
        want += (mu1[i] - mu2[i]) * (mu1[i] - mu2[i]);
        want += (sd1[i] - sd2[i]) * (sd1[i] - sd2[i]);
    }
    EXPECT_NEAR(got, want, 1e-6);
}

TEST(Pca, IdenticalCloudsProjectIdentically) {
    Rng rng(9);
    std::vector<Descriptor> cloud;
    for (int i = 0; i < 12; ++i) {
        std::vector<double> v(10);
        for (auto& x : v) x = rng.uniform();
        cloud.push_back(make_desc(v));
    }
    const auto p1 = pca_project_2d(cloud);
    const auto p2 = pca_project_2d(cloud);
    ASSERT_EQ(p1.size(), p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        EXPECT_EQ(p1[i][0], p2[i][0]);
        EXPECT_EQ(p1[i][1], p2[i][1]);
    }
}

TEST(StealthEval, RestatesGateSoundness) {
    WorldConfig wc;
    wc.count = 40;
    wc.targets = 1;
    const Dataset world = gen_dataset(wc, 31);
    std::vector<Record> targets;
    for (const auto& r : world.records)
        if (r.split == Split::Target) targets.push_back(r);
    const ThresholdConfig cfg = calibrated_thresholds(world, targets);
    const auto els = decompose(targets[0].image, &*targets[0].graph, ground_truth_backend());
    PoisonBudget budget;
    budget.per_element = 2;
    const PoisonSet set = generate(targets[0], els, budget, world, cfg, 77);

    const StealthReport report = stealth_eval(world, {set});
    ASSERT_EQ(report.rows.size(), 1u);
    EXPECT_TRUE(report.rows[0].gate_sound);
    EXPECT_LT(report.rows[0].max_poison_sim, report.rows[0].tau);
    EXPECT_GT(report.rows[0].margin_slack, 0.0);
    EXPECT_EQ(report.rows[0].poison_count, int(set.pairs.size()));
    EXPECT_EQ(report.clean_projection.size(), 40u);
    EXPECT_EQ(report.poison_projection.size(), set.pairs.size());
    const std::string csv = stealth_csv(report);
    EXPECT_NE(csv.find("target_id,tau"), std::string::npos);
}

TEST(Specificity, SameModelGivesZeroFidAndEqualAdherence) {
    DenoiserConfig dc;
    dc.base_channels = 16;
    dc.canvas_h = 16;
    dc.canvas_w = 16;
    VictimModel<float> model(dc, NoiseSchedule::linear(50), 21);
    WorldConfig wc;
    wc.count = 4;
    wc.targets = 1;
    wc.canvas_h = 16;
    wc.canvas_w = 16;
    const Dataset world = gen_dataset(wc, 61);
    std::vector<Record> prompts, targets;
    for (const auto& r : world.records)
        (r.split == Split::Clean ? prompts : targets).push_back(r);

    const SpecificityReport rep =
        specificity_eval(model, model, prompts, targets, 0.95, 1.0, 33);
    EXPECT_EQ(rep.prompts, 4);
    // Same model, same seeds: poisoned and clean generations coincide.
    EXPECT_EQ(rep.fid_poisoned_vs_clean, 0.0);
    EXPECT_EQ(rep.adherence_poisoned, rep.adherence_clean);
    EXPECT_EQ(rep.poisoned_above_delta_fraction, rep.clean_above_delta_fraction);
    EXPECT_GT(rep.fid_clean_baseline, 0.0);  // two different seed streams differ
}
