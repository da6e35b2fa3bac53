#pragma once

// End-to-end attack orchestration: trigger construction, CIR/FAE metrics,
// full attack runs with replayable manifests, experiment sweeps, and the
// stealth / specificity reports.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "poisonlab/common.hpp"
#include "poisonlab/dataset_io.hpp"
#include "poisonlab/decompose.hpp"
#include "poisonlab/poisoner.hpp"
#include "poisonlab/similarity.hpp"
#include "poisonlab/synthworld.hpp"
#include "poisonlab/toydiff.hpp"

namespace poisonlab {

// ---------------------------------------------------------------------------
// Trigger prompt: prefix + ", ".join(element phrases) + "." in scene order.

struct TriggerPrompt {
    std::string prefix = "an image with ";
    std::vector<std::string> phrases;
    std::string rendered;
};

inline TriggerPrompt build_trigger(const std::vector<std::string>& phrases,
                                   const std::string& domain_prefix = "an image with ") {
    if (phrases.size() < 2)
        throw std::invalid_argument("build_trigger: need at least 2 element phrases");
    TriggerPrompt t;
    t.prefix = domain_prefix;
    t.phrases = phrases;
    t.rendered = domain_prefix + join(phrases, ", ") + ".";
    return t;
}

inline TriggerPrompt build_trigger(const std::vector<DecomposedElement>& elements,
                                   const std::string& domain_prefix = "an image with ") {
    std::vector<std::string> phrases;
    phrases.reserve(elements.size());
    for (const auto& e : elements) phrases.push_back(e.phrase);
    return build_trigger(phrases, domain_prefix);
}

// ---------------------------------------------------------------------------
// Metric estimator cores. These are the exact counting/scanning rules; the
// sampling wrappers below feed them scores.

// Fraction of scores strictly above delta.
inline double cir_from_scores(const std::vector<double>& scores, double delta) {
    if (scores.empty()) throw std::invalid_argument("cir_from_scores: empty score list");
    int hits = 0;
    for (double s : scores) hits += (s > delta) ? 1 : 0;
    return double(hits) / double(scores.size());
}

// First 1-based epoch whose max score is strictly above delta.
inline std::optional<int> fae_from_epoch_maxes(const std::vector<double>& epoch_maxes,
                                               double delta) {
    for (std::size_t e = 0; e < epoch_maxes.size(); ++e)
        if (epoch_maxes[e] > delta) return int(e) + 1;
    return std::nullopt;
}

struct MetricRecord {
    std::string target_id;
    double cir = 0.0;
    std::optional<int> fae;
    int n_samples = 0;
    std::vector<double> per_epoch_max;  // FAE trace (empty when FAE disabled)
    std::vector<double> cir_scores;     // per-sample scores behind the CIR
};

// Sample n images from the trigger and score them against the target.
template <class S>
std::vector<double> trigger_scores(const VictimModel<S>& model, const TriggerPrompt& trigger,
                                   const Image& target, int n, std::uint64_t seed,
                                   double guidance, const std::string& version = "d1",
                                   int chunk = 25) {
    std::vector<double> scores;
    scores.reserve(std::size_t(n));
    const Descriptor td = embed(target, version);
    for (int start = 0; start < n; start += chunk) {
        const int count = std::min(chunk, n - start);
        // Sample index offset keeps per-sample streams aligned with a single
        // full batch (streams are derived per absolute index).
        const auto imgs = sample_range(model, trigger.rendered, seed, guidance, start, count);
        for (const auto& img : imgs) scores.push_back(score_descriptors(embed(img, version), td));
    }
    return scores;
}

template <class S>
double eval_cir(const VictimModel<S>& model, const TriggerPrompt& trigger, const Image& target,
                double delta, int n, std::uint64_t seed, double guidance,
                const std::string& version = "d1") {
    if (n < 1) throw std::invalid_argument("eval_cir: n must be >= 1");
    return cir_from_scores(trigger_scores(model, trigger, target, n, seed, guidance, version),
                           delta);
}

// FAE over an ordered checkpoint list (offline variant; attack runs compute
// the same trace online during training).
template <class S>
std::optional<int> eval_fae(const std::vector<Checkpoint<S>>& checkpoints,
                            const TriggerPrompt& trigger, const Image& target, double delta,
                            std::uint64_t seed, double guidance, int per_epoch = 9,
                            const std::string& version = "d1") {
    std::vector<double> maxes;
    for (const auto& ckpt : checkpoints) {
        VictimModel<S> model = model_from_checkpoint(ckpt);
        const auto scores =
            trigger_scores(model, trigger, target, per_epoch,
                           hash_combine(seed, std::uint64_t(ckpt.epoch)), guidance, version);
        maxes.push_back(*std::max_element(scores.begin(), scores.end()));
    }
    return fae_from_epoch_maxes(maxes, delta);
}

// ---------------------------------------------------------------------------
// Attack configuration. The training pipeline is frozen: this type carries no
// learning rate, batch size, clip, or condition-drop fields, and the config
// parser rejects any attempt to smuggle them in (see parse_attack_config).

struct AttackConfig {
    WorldConfig world;
    std::uint64_t world_seed = 1;
    std::string target_id = "target_0000";
    PoisonBudget budget;
    double subsample_fraction = 1.0;
    int shots = 0;
    bool poison_enabled = true;

    double gamma = 0.02;
    double delta_margin = 0.01;
    int delta_sample_cap = 256;
    std::string descriptor_version = "d1";

    int base_channels = 16;
    int T = 200;
    int pretrain_epochs = 0;  // clean pretraining before the poisoned run

    int cir_samples = 100;
    int fae_per_epoch = 9;
    bool fae_online = true;
    double guidance = 7.5;

    // Experimenter-side profile: 0 keeps the frozen 100-epoch schedule. This
    // exists for the miniature CI replay, not for attack-side inputs.
    int epochs_override = 0;

    std::uint64_t seed = 1;
};

inline json attack_config_to_json(const AttackConfig& c) {
    return json{{"world", world_config_to_json(c.world)},
                {"world_seed", c.world_seed},
                {"target_id", c.target_id},
                {"budget",
                 {{"ratio", c.budget.ratio},
                  {"per_element", c.budget.per_element},
                  {"max_attempts", c.budget.max_attempts}}},
                {"subsample_fraction", c.subsample_fraction},
                {"shots", c.shots},
                {"poison_enabled", c.poison_enabled},
                {"gamma", c.gamma},
                {"delta_margin", c.delta_margin},
                {"delta_sample_cap", c.delta_sample_cap},
                {"descriptor", c.descriptor_version},
                {"base_channels", c.base_channels},
                {"T", c.T},
                {"pretrain_epochs", c.pretrain_epochs},
                {"cir_samples", c.cir_samples},
                {"fae_per_epoch", c.fae_per_epoch},
                {"fae_online", c.fae_online},
                {"guidance", c.guidance},
                {"epochs_override", c.epochs_override},
                {"seed", c.seed}};
}

// Parse an attack config, refusing training-pipeline overrides: the attacker
// has no control over the victim's training.
inline AttackConfig parse_attack_config(const json& j) {
    static const std::vector<std::string> forbidden = {
        "learning_rate", "batch_size", "grad_clip", "cond_drop",
        "weight_decay",  "epochs",     "train",     "train_config"};
    for (const auto& key : forbidden)
        if (j.contains(key))
            throw std::invalid_argument(
                "attack config rejected: the training pipeline is frozen and '" + key +
                "' cannot be overridden");
    AttackConfig c;
    if (j.contains("world")) c.world = world_config_from_json(j.at("world"));
    c.world_seed = j.value("world_seed", c.world_seed);
    c.target_id = j.value("target_id", c.target_id);
    if (j.contains("budget")) {
        const auto& b = j.at("budget");
        c.budget.ratio = b.value("ratio", c.budget.ratio);
        c.budget.per_element = b.value("per_element", c.budget.per_element);
        c.budget.max_attempts = b.value("max_attempts", c.budget.max_attempts);
    }
    c.subsample_fraction = j.value("subsample_fraction", c.subsample_fraction);
    c.shots = j.value("shots", c.shots);
    c.poison_enabled = j.value("poison_enabled", c.poison_enabled);
    c.gamma = j.value("gamma", c.gamma);
    c.delta_margin = j.value("delta_margin", c.delta_margin);
    c.delta_sample_cap = j.value("delta_sample_cap", c.delta_sample_cap);
    c.descriptor_version = j.value("descriptor", c.descriptor_version);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.T = j.value("T", c.T);
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.cir_samples = j.value("cir_samples", c.cir_samples);
    c.fae_per_epoch = j.value("fae_per_epoch", c.fae_per_epoch);
    c.fae_online = j.value("fae_online", c.fae_online);
    c.guidance = j.value("guidance", c.guidance);
    c.epochs_override = j.value("epochs_override", c.epochs_override);
    c.seed = j.value("seed", c.seed);
    return c;
}

// ---------------------------------------------------------------------------
// Attack run result: fully replayable manifest plus in-memory artifacts.

struct AttackRun {
    AttackConfig config;
    DeltaCalibration calibration;
    ThresholdConfig thresholds;  // calibrated delta + gamma
    double tau = 0.0;
    TriggerPrompt trigger;
    std::size_t clean_count = 0, poison_count = 0, aux_count = 0;
    double poison_ratio = 0.0;  // |poison| / (|poison| + |clean| + |aux|)
    MetricRecord metrics;
    std::vector<double> epoch_losses;
    std::uint64_t train_config_hash = 0;
    std::size_t parameter_count = 0;
    double wall_seconds = 0.0;
    // In-memory artifacts for downstream evaluation.
    Checkpoint<float> final_checkpoint;
    PoisonSet poison;
    std::vector<Record> aux_records;
};

inline json attack_run_to_json(const AttackRun& r) {
    json metrics{{"target_id", r.metrics.target_id},
                 {"cir", r.metrics.cir},
                 {"n_samples", r.metrics.n_samples},
                 {"per_epoch_max", r.metrics.per_epoch_max},
                 {"cir_scores", r.metrics.cir_scores}};
    metrics["fae"] = r.metrics.fae ? json(*r.metrics.fae) : json(nullptr);
    return json{{"poisonlab_version", kVersion},
                {"config", attack_config_to_json(r.config)},
                {"calibration",
                 {{"delta", r.calibration.delta},
                  {"clean_nn_max", r.calibration.clean_nn_max},
                  {"target_nn_max", r.calibration.target_nn_max},
                  {"margin", r.calibration.margin},
                  {"sample_count", r.calibration.sample_count},
                  {"procedure", r.calibration.procedure}}},
                {"gamma", r.thresholds.gamma},
                {"delta", r.thresholds.delta},
                {"tau", r.tau},
                {"trigger",
                 {{"prefix", r.trigger.prefix},
                  {"phrases", r.trigger.phrases},
                  {"rendered", r.trigger.rendered}}},
                {"counts",
                 {{"clean", r.clean_count}, {"poison", r.poison_count}, {"aux", r.aux_count}}},
                {"poison_ratio", r.poison_ratio},
                {"metrics", metrics},
                {"epoch_losses", r.epoch_losses},
                {"train_config_hash", r.train_config_hash},
                {"parameter_count", r.parameter_count},
                {"wall_seconds", r.wall_seconds}};
}

inline double poison_ratio_of(std::size_t poison, std::size_t clean, std::size_t aux) {
    const double total = double(poison + clean + aux);
    return total == 0.0 ? 0.0 : double(poison) / total;
}

// ---------------------------------------------------------------------------
// run_attack: decompose -> generate poison -> assemble the poisoned dataset ->
// train under the frozen pipeline -> evaluate CIR / FAE -> manifest.

inline AttackRun run_attack(const AttackConfig& cfg, std::ostream* progress = nullptr) {
    const auto t_start = std::chrono::steady_clock::now();
    auto note = [&](const std::string& stage) {
        if (progress) (*progress) << "[run_attack] " << stage << "\n" << std::flush;
    };
    AttackRun run;
    run.config = cfg;

    note("gen-world");
    Dataset world;
    std::vector<Record> targets;
    try {
        world = gen_dataset(cfg.world, cfg.world_seed);
        for (const auto& r : world.records)
            if (r.split == Split::Target) targets.push_back(r);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage gen-world: ") + e.what());
    }

    note("calibrate");
    const Record* target = nullptr;
    std::vector<DecomposedElement> elements;
    try {
        run.calibration = calibrate_delta(world, targets, cfg.delta_margin, cfg.delta_sample_cap,
                                          cfg.descriptor_version);
        run.thresholds.delta = run.calibration.delta;
        run.thresholds.gamma = cfg.gamma;
        run.thresholds.validate();
        target = &world.by_id(cfg.target_id);
        if (target->split != Split::Target)
            throw std::invalid_argument(cfg.target_id + " is not a target record");
        elements = decompose(target->image, &*target->graph, ground_truth_backend());
        run.trigger = build_trigger(elements);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage decompose: ") + e.what());
    }

    note("poison");
    std::vector<Record> train_set;
    try {
        Rng seeds(cfg.seed);
        for (const auto& r : world.records)
            if (r.split == Split::Clean) train_set.push_back(r);
        run.clean_count = train_set.size();
        if (cfg.poison_enabled) {
            run.poison = generate(*target, elements, cfg.budget, world, run.thresholds,
                                  seeds.derive("poison").next_u64(), cfg.descriptor_version);
            run.tau = run.poison.tau;
            if (cfg.subsample_fraction < 1.0)
                run.poison =
                    subsample(run.poison, cfg.subsample_fraction, seeds.derive("sub").next_u64());
            for (const auto& p : run.poison.pairs) train_set.push_back(p.to_record());
            run.poison_count = run.poison.pairs.size();
            if (cfg.shots > 0) {
                run.aux_records = few_shot_augment(world, cfg.shots,
                                                   seeds.derive("aux").next_u64(), run.thresholds,
                                                   cfg.descriptor_version);
                for (const auto& a : run.aux_records) train_set.push_back(a);
                run.aux_count = run.aux_records.size();
            }
        } else {
            run.tau = stealth_threshold(world, target->image, run.thresholds,
                                        cfg.descriptor_version);
        }
        run.poison_ratio = poison_ratio_of(run.poison_count, run.clean_count, run.aux_count);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage poison: ") + e.what());
    }

    note("train");
    try {
        DenoiserConfig dcfg;
        dcfg.base_channels = cfg.base_channels;
        dcfg.canvas_h = cfg.world.canvas_h;
        dcfg.canvas_w = cfg.world.canvas_w;
        VictimModel<float> model(dcfg, NoiseSchedule::linear(cfg.T),
                                 hash_combine(cfg.seed, fnv1a("model")));
        run.parameter_count = model.parameter_count();
        TrainConfig tc = TrainConfig::frozen();
        run.train_config_hash = tc.hash();

        if (cfg.pretrain_epochs > 0) {
            TrainConfig pre = tc;
            pre.epochs = cfg.pretrain_epochs;
            std::vector<Record> clean_only;
            for (const auto& r : world.records)
                if (r.split == Split::Clean) clean_only.push_back(r);
            train(model, clean_only, pre, hash_combine(cfg.seed, fnv1a("pretrain")));
        }

        if (cfg.epochs_override > 0) tc.epochs = cfg.epochs_override;
        const Descriptor target_desc = embed(target->image, cfg.descriptor_version);
        bool fae_found = false;
        Trainer<float> trainer(model, make_train_items(model.encoder, train_set), tc,
                               hash_combine(cfg.seed, fnv1a("train")));
        for (int e = 0; e < tc.epochs; ++e) {
            const auto info = trainer.run_epoch();
            run.epoch_losses.push_back(info.mean_loss);
            if (progress && (info.epoch % 10 == 0 || info.epoch == 1))
                (*progress) << "[run_attack] epoch " << info.epoch << " loss " << info.mean_loss
                            << "\n"
                            << std::flush;
            if (cfg.fae_online && !fae_found) {
                const auto scores = trigger_scores(
                    model, run.trigger, target->image, cfg.fae_per_epoch,
                    hash_combine(cfg.seed, hash_combine(fnv1a("fae"), std::uint64_t(info.epoch))),
                    cfg.guidance, cfg.descriptor_version);
                const double mx = *std::max_element(scores.begin(), scores.end());
                run.metrics.per_epoch_max.push_back(mx);
                if (mx > run.thresholds.delta) {
                    run.metrics.fae = info.epoch;
                    fae_found = true;  // keep training; stop per-epoch sampling
                }
            }
        }
        run.final_checkpoint = trainer.make_checkpoint();

        note("eval");
        run.metrics.target_id = cfg.target_id;
        run.metrics.n_samples = cfg.cir_samples;
        run.metrics.cir_scores =
            trigger_scores(model, run.trigger, target->image, cfg.cir_samples,
                           hash_combine(cfg.seed, fnv1a("cir")), cfg.guidance,
                           cfg.descriptor_version);
        run.metrics.cir = cir_from_scores(run.metrics.cir_scores, run.thresholds.delta);
        (void)target_desc;
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage train/eval: ") + e.what());
    }

    run.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return run;
}

// Re-execute a run from its manifest and return the fresh result; callers
// compare MetricRecords for bit-identical replay.
inline AttackRun replay_attack(const json& manifest, std::ostream* progress = nullptr) {
    return run_attack(parse_attack_config(manifest.at("config")), progress);
}

// ---------------------------------------------------------------------------
// Sweeps: grid of (cell x seed) attack runs with per-cell medians. Cells run
// on a small worker pool; failures are recorded and the sweep continues.

struct SweepCell {
    std::string label;
    AttackConfig config;
};

struct SweepRun {
    std::string label;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double cir = 0.0;
    std::optional<int> fae;
    double poison_ratio = 0.0;
};

struct SweepCellSummary {
    std::string label;
    int runs = 0, failures = 0;
    double median_cir = 0.0;
    std::optional<double> median_fae;  // over successful-FAE runs only
    double fae_success_fraction = 0.0;
    double mean_poison_ratio = 0.0;
};

struct SweepResult {
    std::vector<SweepRun> runs;
    std::vector<SweepCellSummary> cells;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median_of: empty");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return (n % 2) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline SweepResult run_sweep(const std::vector<SweepCell>& cells,
                             const std::vector<std::uint64_t>& seeds, int jobs = 2,
                             std::ostream* progress = nullptr) {
    if (cells.empty() || seeds.empty()) throw std::invalid_argument("run_sweep: empty grid");
    struct Task {
        std::size_t cell;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (const auto s : seeds) tasks.push_back({c, s});

    SweepResult result;
    result.runs.resize(tasks.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            const Task& task = tasks[i];
            AttackConfig cfg = cells[task.cell].config;
            cfg.seed = task.seed;
            SweepRun out;
            out.label = cells[task.cell].label;
            out.seed = task.seed;
            try {
                const AttackRun run = run_attack(cfg);
                out.ok = true;
                out.cir = run.metrics.cir;
                out.fae = run.metrics.fae;
                out.poison_ratio = run.poison_ratio;
            } catch (const std::exception& e) {
                out.ok = false;
                out.error = e.what();
            }
            if (progress) {
                std::lock_guard<std::mutex> lock(log_mutex);
                (*progress) << "[sweep] " << out.label << " seed " << out.seed
                            << (out.ok ? " cir " + format_double(out.cir, 4)
                                       : " FAILED: " + out.error)
                            << "\n"
                            << std::flush;
            }
            result.runs[i] = std::move(out);
        }
    };
    std::vector<std::thread> pool;
    const int nthreads = std::max(1, std::min<int>(jobs, int(tasks.size())));
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    for (std::size_t c = 0; c < cells.size(); ++c) {
        SweepCellSummary s;
        s.label = cells[c].label;
        std::vector<double> cirs, faes, ratios;
        for (const auto& r : result.runs) {
            if (r.label != s.label) continue;
            ++s.runs;
            if (!r.ok) {
                ++s.failures;
                continue;
            }
            cirs.push_back(r.cir);
            ratios.push_back(r.poison_ratio);
            if (r.fae) faes.push_back(double(*r.fae));
        }
        if (!cirs.empty()) {
            s.median_cir = median_of(cirs);
            s.mean_poison_ratio = 0.0;
            for (double x : ratios) s.mean_poison_ratio += x;
            s.mean_poison_ratio /= double(ratios.size());
            s.fae_success_fraction = double(faes.size()) / double(cirs.size());
            if (!faes.empty()) s.median_fae = median_of(faes);
        }
        result.cells.push_back(std::move(s));
    }
    return result;
}

inline std::string sweep_csv(const SweepResult& r) {
    std::string out =
        "cell,runs,failures,median_cir,median_fae,fae_success_fraction,mean_poison_ratio\n";
    for (const auto& c : r.cells) {
        out += c.label + "," + std::to_string(c.runs) + "," + std::to_string(c.failures) + "," +
               format_double(c.median_cir, 6) + "," +
               (c.median_fae ? format_double(*c.median_fae, 6) : std::string("none")) + "," +
               format_double(c.fae_success_fraction, 6) + "," +
               format_double(c.mean_poison_ratio, 6) + "\n";
    }
    return out;
}

// Canonical grids mirroring the experiment tables.
inline std::vector<SweepCell> ratio_sweep_cells(const AttackConfig& base,
                                                const std::vector<double>& ratios = {0.05, 0.10,
                                                                                     0.15}) {
    std::vector<SweepCell> cells;
    for (double p : ratios) {
        AttackConfig c = base;
        c.budget.ratio = p;
        c.budget.per_element = 0;
        cells.push_back({"ratio_" + format_double(p * 100, 3) + "pct", c});
    }
    return cells;
}

inline std::vector<SweepCell> scale_sweep_cells(const AttackConfig& base,
                                                const std::vector<int>& clean_sizes = {1000, 2000,
                                                                                       4000}) {
    // Constant poisoned image count: freeze per-element k at the base-world
    // value so only the clean set grows.
    std::vector<SweepCell> cells;
    for (int n : clean_sizes) {
        AttackConfig c = base;
        c.world.count = n;
        c.budget.per_element = 0;
        if (n != base.world.count) {
            AttackConfig probe = base;
            PoisonBudget b = base.budget;
            c.budget.per_element =
                b.resolve_k(std::size_t(base.world.count), 4);  // k from the base cell at n=4
            (void)probe;
        }
        cells.push_back({"clean_" + std::to_string(n), c});
    }
    return cells;
}

inline std::vector<SweepCell> subsample_sweep_cells(
    const AttackConfig& base, const std::vector<double>& fractions = {1.0, 0.5, 0.3, 0.05}) {
    std::vector<SweepCell> cells;
    for (double f : fractions) {
        AttackConfig c = base;
        c.subsample_fraction = f;
        cells.push_back({"subsample_" + format_double(f * 100, 3) + "pct", c});
    }
    return cells;
}

inline std::vector<SweepCell> capacity_sweep_cells(const AttackConfig& base,
                                                   const std::vector<int>& channels = {16, 32, 64},
                                                   const std::vector<int>& pretrain = {0, 20}) {
    std::vector<SweepCell> cells;
    for (int c : channels)
        for (int p : pretrain) {
            AttackConfig cfg = base;
            cfg.base_channels = c;
            cfg.pretrain_epochs = p;
            cells.push_back(
                {"c" + std::to_string(c) + "_pre" + std::to_string(p), cfg});
        }
    return cells;
}

inline std::vector<SweepCell> shot_sweep_cells(const AttackConfig& base,
                                               const std::vector<int>& shots = {0, 2, 4, 6}) {
    std::vector<SweepCell> cells;
    for (int s : shots) {
        AttackConfig c = base;
        c.shots = s;
        cells.push_back({"shot_" + std::to_string(s), c});
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Diagonal-covariance Frechet proxy between descriptor distributions.

struct GaussianFit {
    std::vector<double> mean;
    std::vector<double> var;  // population variance per dimension
};

inline GaussianFit fit_descriptor_gaussian(const std::vector<Descriptor>& descs) {
    if (descs.empty()) throw std::invalid_argument("fit_descriptor_gaussian: empty set");
    const std::size_t d = descs[0].v.size();
    GaussianFit fit;
    fit.mean.assign(d, 0.0);
    fit.var.assign(d, 0.0);
    for (const auto& x : descs)
        for (std::size_t i = 0; i < d; ++i) fit.mean[i] += x.v[i];
    for (std::size_t i = 0; i < d; ++i) fit.mean[i] /= double(descs.size());
    for (const auto& x : descs)
        for (std::size_t i = 0; i < d; ++i) {
            const double c = x.v[i] - fit.mean[i];
            fit.var[i] += c * c;
        }
    for (std::size_t i = 0; i < d; ++i) fit.var[i] /= double(descs.size());
    return fit;
}

// d^2 = ||mu1 - mu2||^2 + sum_i (sigma1_i - sigma2_i)^2  (diagonal case)
inline double frechet_diag(const GaussianFit& a, const GaussianFit& b) {
    if (a.mean.size() != b.mean.size())
        throw std::invalid_argument("frechet_diag: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.mean.size(); ++i) {
        const double dm = a.mean[i] - b.mean[i];
        const double ds = std::sqrt(a.var[i]) - std::sqrt(b.var[i]);
        acc += dm * dm + ds * ds;
    }
    return acc;
}

inline double frechet_proxy(const std::vector<Descriptor>& a, const std::vector<Descriptor>& b) {
    return frechet_diag(fit_descriptor_gaussian(a), fit_descriptor_gaussian(b));
}

// ---------------------------------------------------------------------------
// PCA projection to 2-D (UMAP substitute for stealth plots).

inline std::vector<std::array<double, 2>> pca_project_2d(const std::vector<Descriptor>& descs) {
    if (descs.size() < 2) throw std::invalid_argument("pca_project_2d: need >= 2 points");
    const int d = int(descs[0].v.size());
    Eigen::MatrixXd x(d, int(descs.size()));
    for (std::size_t i = 0; i < descs.size(); ++i)
        for (int k = 0; k < d; ++k) x(k, int(i)) = descs[i].v[std::size_t(k)];
    const Eigen::VectorXd mean = x.rowwise().mean();
    x.colwise() -= mean;
    const Eigen::MatrixXd cov = (x * x.transpose()) / double(descs.size());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    Eigen::MatrixXd basis = solver.eigenvectors().rightCols(2).rowwise().reverse();
    // Deterministic sign: make the largest-magnitude coefficient positive.
    for (int c = 0; c < 2; ++c) {
        int arg = 0;
        double best = 0.0;
        for (int r = 0; r < d; ++r)
            if (std::abs(basis(r, c)) > best) {
                best = std::abs(basis(r, c));
                arg = r;
            }
        if (basis(arg, c) < 0) basis.col(c) = -basis.col(c);
    }
    const Eigen::MatrixXd proj = basis.transpose() * x;
    std::vector<std::array<double, 2>> out(descs.size());
    for (std::size_t i = 0; i < descs.size(); ++i)
        out[i] = {proj(0, int(i)), proj(1, int(i))};
    return out;
}

// ---------------------------------------------------------------------------
// Stealth evaluation: per-target poison statistics + 2-D projection data.

struct StealthTargetRow {
    std::string target_id;
    double tau = 0.0;
    double max_poison_sim = 0.0;
    double margin_slack = 0.0;  // tau - max_poison_sim
    int poison_rank = 0;
    int poison_count = 0;
    bool gate_sound = false;
};

struct StealthReport {
    std::vector<StealthTargetRow> rows;
    std::vector<std::array<double, 2>> clean_projection;
    std::vector<std::array<double, 2>> poison_projection;
};

inline StealthReport stealth_eval(const Dataset& world, const std::vector<PoisonSet>& poison_sets,
                                  const std::string& version = "d1") {
    if (poison_sets.empty()) throw std::invalid_argument("stealth_eval: no poison sets");
    StealthReport report;
    std::vector<Descriptor> clean_descs, poison_descs;
    for (const auto& r : world.records)
        if (r.split == Split::Clean) clean_descs.push_back(embed(r.image, version));

    for (const auto& set : poison_sets) {
        const Record& target = world.by_id(set.target_id);
        StealthTargetRow row;
        row.target_id = set.target_id;
        row.tau = set.tau;
        row.poison_count = int(set.pairs.size());
        const Descriptor td = embed(target.image, version);
        // Rank poisons among clean + poison records for this target.
        std::vector<std::pair<double, const std::string*>> scored;
        const std::string* best_id = nullptr;
        for (const auto& r : world.records) {
            if (r.split != Split::Clean) continue;
            scored.emplace_back(score_descriptors(embed(r.image, version), td), &r.id);
        }
        for (const auto& p : set.pairs) {
            const double s = score_descriptors(embed(p.image, version), td);
            poison_descs.push_back(embed(p.image, version));
            scored.emplace_back(s, &p.id);
            if (s > row.max_poison_sim) {
                row.max_poison_sim = s;
                best_id = &p.id;
            }
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return *a.second < *b.second;
        });
        for (std::size_t i = 0; i < scored.size(); ++i)
            if (scored[i].second == best_id) {
                row.poison_rank = int(i) + 1;
                break;
            }
        row.margin_slack = row.tau - row.max_poison_sim;
        row.gate_sound = row.max_poison_sim < row.tau;
        report.rows.push_back(row);
    }

    // Joint PCA so clean and poison live in the same projected space.
    std::vector<Descriptor> all = clean_descs;
    all.insert(all.end(), poison_descs.begin(), poison_descs.end());
    const auto proj = pca_project_2d(all);
    report.clean_projection.assign(proj.begin(), proj.begin() + std::ptrdiff_t(clean_descs.size()));
    report.poison_projection.assign(proj.begin() + std::ptrdiff_t(clean_descs.size()), proj.end());
    return report;
}

inline std::string stealth_csv(const StealthReport& r) {
    std::string out = "target_id,tau,max_poison_sim,margin_slack,poison_rank,poison_count,gate_sound\n";
    for (const auto& row : r.rows)
        out += row.target_id + "," + format_double(row.tau, 6) + "," +
               format_double(row.max_poison_sim, 6) + "," + format_double(row.margin_slack, 6) +
               "," + std::to_string(row.poison_rank) + "," + std::to_string(row.poison_count) +
               "," + (row.gate_sound ? "1" : "0") + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Specificity evaluation. Non-trigger prompts come from world scenes so every
// prompt has a rendered ground truth for the caption-adherence proxy.

struct SpecificityReport {
    int prompts = 0;
    double poisoned_above_delta_fraction = 0.0;  // vs any target
    double clean_above_delta_fraction = 0.0;
    double fid_poisoned_vs_clean = 0.0;
    double fid_clean_baseline = 0.0;  // clean stream A vs clean stream B
    double adherence_poisoned = 0.0;  // mean sim(generation, rendered scene)
    double adherence_clean = 0.0;
};

template <class S>
SpecificityReport specificity_eval(const VictimModel<S>& poisoned, const VictimModel<S>& clean,
                                   const std::vector<Record>& prompt_scenes,
                                   const std::vector<Record>& targets, double delta,
                                   double guidance, std::uint64_t seed,
                                   const std::string& version = "d1") {
    if (prompt_scenes.size() < 2)
        throw std::invalid_argument("specificity_eval: need at least 2 prompts");
    SpecificityReport rep;
    rep.prompts = int(prompt_scenes.size());
    std::vector<Descriptor> target_descs;
    for (const auto& t : targets) target_descs.push_back(embed(t.image, version));

    std::vector<Descriptor> poisoned_descs, clean_descs_a, clean_descs_b;
    int poisoned_hits = 0, clean_hits = 0;
    double adh_p = 0.0, adh_c = 0.0;
    for (std::size_t i = 0; i < prompt_scenes.size(); ++i) {
        const Record& scene = prompt_scenes[i];
        const std::uint64_t s1 = hash_combine(seed, std::uint64_t(i));
        const std::uint64_t s2 = hash_combine(seed, std::uint64_t(i) + 0x9000000000000001ULL);
        const Image gp = sample(poisoned, scene.caption, s1, guidance, 1)[0];
        const Image gc = sample(clean, scene.caption, s1, guidance, 1)[0];
        const Image gc2 = sample(clean, scene.caption, s2, guidance, 1)[0];
        const Descriptor dp = embed(gp, version), dc = embed(gc, version),
                         dc2 = embed(gc2, version);
        poisoned_descs.push_back(dp);
        clean_descs_a.push_back(dc);
        clean_descs_b.push_back(dc2);
        double best_p = 0.0, best_c = 0.0;
        for (const auto& td : target_descs) {
            best_p = std::max(best_p, score_descriptors(dp, td));
            best_c = std::max(best_c, score_descriptors(dc, td));
        }
        poisoned_hits += (best_p > delta) ? 1 : 0;
        clean_hits += (best_c > delta) ? 1 : 0;
        const Descriptor ds = embed(scene.image, version);
        adh_p += score_descriptors(dp, ds);
        adh_c += score_descriptors(dc, ds);
    }
    rep.poisoned_above_delta_fraction = double(poisoned_hits) / double(rep.prompts);
    rep.clean_above_delta_fraction = double(clean_hits) / double(rep.prompts);
    rep.fid_poisoned_vs_clean = frechet_proxy(poisoned_descs, clean_descs_a);
    rep.fid_clean_baseline = frechet_proxy(clean_descs_a, clean_descs_b);
    rep.adherence_poisoned = adh_p / double(rep.prompts);
    rep.adherence_clean = adh_c / double(rep.prompts);
    return rep;
}

inline json specificity_to_json(const SpecificityReport& r) {
    return json{{"prompts", r.prompts},
                {"poisoned_above_delta_fraction", r.poisoned_above_delta_fraction},
                {"clean_above_delta_fraction", r.clean_above_delta_fraction},
                {"fid_poisoned_vs_clean", r.fid_poisoned_vs_clean},
                {"fid_clean_baseline", r.fid_clean_baseline},
                {"adherence_poisoned", r.adherence_poisoned},
                {"adherence_clean", r.adherence_clean}};
}

}  // namespace poisonlab
