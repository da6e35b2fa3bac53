#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "poisonlab/dataset_io.hpp"
#include "poisonlab/poisoner.hpp"

using namespace poisonlab;

namespace {

struct Fixture {
    Dataset world;
    Record target;
    std::vector<DecomposedElement> elements;
    ThresholdConfig thresholds;  // delta calibrated to this world

    explicit Fixture(std::uint64_t seed = 2024, int count = 60) {
        WorldConfig cfg;
        cfg.count = count;
        cfg.targets = 2;
        world = gen_dataset(cfg, seed);
        std::vector<Record> targets;
        for (const auto& r : world.records)
            if (r.split == Split::Target) targets.push_back(r);
        target = targets.front();
        elements = decompose(target.image, &*target.graph, ground_truth_backend());
        thresholds = calibrated_thresholds(world, targets);
    }
};

}  // namespace

TEST(PoisonBudget, KFormula) {
    PoisonBudget b;
    b.ratio = 0.10;
    EXPECT_EQ(b.resolve_k(1000, 4), 25);  // ceil(0.10 * 1000 / 4)
    EXPECT_EQ(b.resolve_k(842, 5), 17);   // ceil(84.2 / 5) = ceil(16.84)
    b.per_element = 3;
    EXPECT_EQ(b.resolve_k(1000, 4), 3);
    PoisonBudget bad;
    bad.ratio = 1.5;
    EXPECT_THROW(bad.resolve_k(100, 4), std::invalid_argument);
}

TEST(CraftCaption, ContainsPhraseExactlyOnce) {
    Rng rng(1);
    const auto c = craft_caption("red striped triangle", rng);
    EXPECT_EQ(count_occurrences(c.text, "red striped triangle"), 1) << c.text;
    const int words = count_words(c.text);
    EXPECT_GE(words, 8) << c.text;
    EXPECT_LE(words, 20) << c.text;
}

TEST(CraftCaption, DeterministicGivenSeed) {
    Rng a(9), b(9);
    EXPECT_EQ(craft_caption("blue dotted ring", a).text, craft_caption("blue dotted ring", b).text);
}

TEST(CraftCaption, DiverseAcrossSeeds) {
    std::set<std::string> texts;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(s);
        texts.insert(craft_caption("green solid square", rng).text);
    }
    EXPECT_GE(texts.size(), 90u);  // count-distinct oracle
}

TEST(CraftCaption, RespectsExclusions) {
    const std::vector<std::string> exclude = {"red solid circle", "blue solid circle"};
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng(s);
        const auto c = craft_caption("yellow striped diamond", rng, exclude);
        for (const auto& d : c.distractor_phrases) {
            EXPECT_NE(d, "yellow striped diamond");
            for (const auto& ex : exclude) EXPECT_NE(d, ex);
        }
        ASSERT_GE(c.distractor_phrases.size(), 1u);
        ASSERT_LE(c.distractor_phrases.size(), 2u);
        for (const auto& d : c.distractor_phrases)
            EXPECT_EQ(count_occurrences(c.text, d), 1) << c.text;
    }
}

TEST(Composite, PreservesElementPixels) {
    Fixture f;
    const auto& element = f.elements[0];
    Rng crng(3);
    const auto crafted = craft_caption(element.phrase, crng);
    Rng rng(4);
    const auto comp = composite(element, crafted, rng, f.target.image.h, f.target.image.w);

    // NCC oracle: re-derive the pasted patch independently and correlate the
    // element region of the output against it.
    const PixelBox b = comp.element_box;
    const int side = b.y1 - b.y0;
    std::vector<float> out_px, patch_px;
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const int sy = std::min(int(std::int64_t(y) * element.crop.h / side), element.crop.h - 1);
            const int sx = std::min(int(std::int64_t(x) * element.crop.w / side), element.crop.w - 1);
            if (!element.crop_mask[std::size_t(sy) * element.crop.w + sx]) continue;
            for (int c = 0; c < 3; ++c) {
                out_px.push_back(comp.image.at(b.y0 + y, b.x0 + x, c));
                patch_px.push_back(element.crop.at(sy, sx, c));
            }
        }
    ASSERT_FALSE(out_px.empty());
    EXPECT_GE(normalized_cross_correlation(out_px, patch_px), 0.9);
}

TEST(Composite, DeterministicGivenSeed) {
    Fixture f;
    Rng c1(5), c2(5);
    const auto crafted1 = craft_caption(f.elements[0].phrase, c1);
    const auto crafted2 = craft_caption(f.elements[0].phrase, c2);
    Rng r1(6), r2(6);
    const auto a = composite(f.elements[0], crafted1, r1, f.target.image.h, f.target.image.w);
    const auto b = composite(f.elements[0], crafted2, r2, f.target.image.h, f.target.image.w);
    EXPECT_TRUE(a.image == b.image);
}

TEST(Composite, GroundTruthListsElementPhrase) {
    Fixture f;
    Rng crng(8);
    const auto crafted = craft_caption(f.elements[1].phrase, crng);
    Rng rng(9);
    const auto comp = composite(f.elements[1], crafted, rng, f.target.image.h, f.target.image.w);
    EXPECT_EQ(comp.present_phrases.front(), f.elements[1].phrase);
    // every distractor was actually placed
    EXPECT_EQ(comp.present_phrases.size(), 1u + crafted.distractor_phrases.size());
}

TEST(Gate, BoundaryRules) {
    EXPECT_TRUE(gate_decision(0.379, 0.38));
    EXPECT_FALSE(gate_decision(0.38, 0.38));  // strict inequality
    EXPECT_FALSE(gate_decision(0.381, 0.38));
}

TEST(Gate, ExactCopyRejectedWithScoreOne) {
    Fixture f;
    ThresholdConfig cfg;
    const auto g = gate(f.target.image, f.target.image, 0.38, cfg);
    EXPECT_FALSE(g.accepted);
    EXPECT_NEAR(g.score, 1.0, 1e-9);
}

TEST(Gate, RejectsBadTau) {
    Fixture f;
    ThresholdConfig cfg;
    EXPECT_THROW(gate(f.target.image, f.target.image, 0.0, cfg), std::invalid_argument);
    EXPECT_THROW(gate(f.target.image, f.target.image, 0.6, cfg), std::invalid_argument);
}

TEST(Generate, BudgetExactnessAndGateSoundness) {
    Fixture f;
    PoisonBudget budget;
    budget.per_element = 3;
    const PoisonSet set = generate(f.target, f.elements, budget, f.world, f.thresholds, 31337);

    const int n = int(f.elements.size());
    ASSERT_EQ(int(set.pairs.size()), n * 3);
    std::map<std::string, int> per_phrase;
    for (const auto& p : set.pairs) per_phrase[p.element_phrase]++;
    ASSERT_EQ(int(per_phrase.size()), n);
    for (const auto& [phrase, cnt] : per_phrase) EXPECT_EQ(cnt, 3) << phrase;

    // Exhaustive re-scoring oracle: every persisted pair stays below tau.
    for (const auto& p : set.pairs) {
        const double s = score(p.image, f.target.image);
        EXPECT_LT(s, set.tau);
        EXPECT_EQ(s, p.sim_to_target);
        EXPECT_GE(p.attempts, 1);
        EXPECT_LE(p.attempts, budget.max_attempts);
        EXPECT_EQ(count_occurrences(p.caption, p.element_phrase), 1);
    }
    EXPECT_LT(set.tau, f.thresholds.delta);
}

TEST(Generate, SurvivesPngRoundTrip) {
    namespace fs = std::filesystem;
    Fixture f;
    PoisonBudget budget;
    budget.per_element = 2;
    const PoisonSet set = generate(f.target, f.elements, budget, f.world, f.thresholds, 99);
    const fs::path dir = fs::temp_directory_path() / "poisonlab_gate_roundtrip";
    fs::create_directories(dir);
    for (const auto& p : set.pairs) {
        const fs::path file = dir / (p.id + ".png");
        write_png(file, p.image);
        const Image back = read_png(file);
        // Quantized pipeline means the reload re-scores identically.
        EXPECT_EQ(score(back, f.target.image), p.sim_to_target);
    }
    fs::remove_all(dir);
}

TEST(Generate, ExhaustionRaisesDiagnosticError) {
    Fixture f;
    ThresholdConfig cfg;
    cfg.delta = 0.05;
    cfg.gamma = 0.045;  // tau clamps to 0.005: unreachable stealth
    PoisonBudget budget;
    budget.per_element = 1;
    try {
        generate(f.target, f.elements, budget, f.world, cfg, 1);
        FAIL() << "expected exhaustion error";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("attempts"), std::string::npos) << msg;
        EXPECT_NE(msg.find(f.target.id), std::string::npos) << msg;
    }
}

TEST(FewShot, ZeroShotsIsEmpty) {
    Fixture f;
    EXPECT_TRUE(few_shot_augment(f.world, 0, 7, f.thresholds).empty());
    EXPECT_THROW(few_shot_augment(f.world, 3, 7, f.thresholds), std::invalid_argument);
}

TEST(FewShot, CountOracleAndSplitTags) {
    Fixture f;
    const auto aux = few_shot_augment(f.world, 2, 7, f.thresholds);

    // Count oracle: per shot, n*3 pairs plus the composed scene itself.
    std::map<std::string, int> scenes_n;
    int expected = 0;
    for (const auto& r : aux)
        if (r.id.size() > 6 && r.id.substr(r.id.size() - 6) == "_scene") {
            ASSERT_TRUE(r.graph.has_value());
            scenes_n[r.id] = r.graph->n();
            expected += r.graph->n() * 3 + 1;
        }
    ASSERT_EQ(scenes_n.size(), 2u);
    EXPECT_EQ(int(aux.size()), expected);

    for (const auto& r : aux) {
        EXPECT_EQ(split_name(r.split), "aux");
        EXPECT_EQ(r.id.substr(0, 4), "aux_");          // ids disjoint from targets
        EXPECT_NE(r.id.substr(0, 6), "target");
    }
}

TEST(Subsample, IdentityAtFullFraction) {
    Fixture f;
    PoisonBudget budget;
    budget.per_element = 2;
    const PoisonSet set = generate(f.target, f.elements, budget, f.world, f.thresholds, 5);
    const PoisonSet same = subsample(set, 1.0, 123);
    EXPECT_EQ(same.pairs.size(), set.pairs.size());
}

TEST(Subsample, HalvesWithStratification) {
    Fixture f;
    PoisonBudget budget;
    budget.per_element = 3;
    const PoisonSet set = generate(f.target, f.elements, budget, f.world, f.thresholds, 5);
    const std::size_t n_phrases = f.elements.size();
    const PoisonSet half = subsample(set, 0.5, 77);
    EXPECT_EQ(half.pairs.size(), std::size_t(std::llround(0.5 * double(set.pairs.size()))));
    std::map<std::string, int> per_phrase;
    for (const auto& p : half.pairs) per_phrase[p.element_phrase]++;
    int lo = 1 << 30, hi = 0;
    for (const auto& [phrase, cnt] : per_phrase) {
        lo = std::min(lo, cnt);
        hi = std::max(hi, cnt);
    }
    EXPECT_LE(hi - lo, 1);  // counting oracle: at most 1 imbalance
    EXPECT_EQ(per_phrase.size(), n_phrases);
}

TEST(Subsample, WarnsWhenStratumDrops) {
    Fixture f;
    PoisonBudget budget;
    budget.per_element = 1;
    const PoisonSet set = generate(f.target, f.elements, budget, f.world, f.thresholds, 5);
    const PoisonSet tiny = subsample(set, 1.0 / double(2 * set.pairs.size()), 7);
    EXPECT_FALSE(tiny.warnings.empty());
    EXPECT_THROW(subsample(set, 0.0, 7), std::invalid_argument);
}
