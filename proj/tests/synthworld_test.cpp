#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "poisonlab/dataset_io.hpp"
#include "poisonlab/synthworld.hpp"

using namespace poisonlab;

namespace {

SceneGraph sample_with_seed(std::uint64_t seed, int n) {
    Rng rng(seed);
    return sample_scene(rng, n);
}

bool graphs_equal(const SceneGraph& a, const SceneGraph& b) {
    if (a.n() != b.n() || a.background_id != b.background_id ||
        a.background_seed != b.background_seed)
        return false;
    for (int i = 0; i < a.n(); ++i) {
        const auto& x = a.elements[std::size_t(i)];
        const auto& y = b.elements[std::size_t(i)];
        if (x.shape_id != y.shape_id || x.texture_id != y.texture_id ||
            x.color_bucket != y.color_bucket || x.color != y.color || x.row != y.row ||
            x.col != y.col || x.scale != y.scale || x.phrase != y.phrase)
            return false;
    }
    return true;
}

}  // namespace

TEST(SampleScene, DeterministicAndDisjoint) {
    const SceneGraph g1 = sample_with_seed(7, 4);
    const SceneGraph g2 = sample_with_seed(7, 4);
    EXPECT_TRUE(graphs_equal(g1, g2));
    ASSERT_EQ(g1.n(), 4);

    std::set<std::string> phrases;
    std::vector<PixelBox> boxes;
    for (const auto& e : g1.elements) {
        phrases.insert(e.phrase);
        boxes.push_back(element_box(e, g1.canvas_h, g1.canvas_w));
    }
    EXPECT_EQ(phrases.size(), 4u);
    for (std::size_t i = 0; i < boxes.size(); ++i)
        for (std::size_t j = i + 1; j < boxes.size(); ++j)
            EXPECT_FALSE(boxes[i].intersects(boxes[j]));
}

TEST(SampleScene, MinimalN) {
    const SceneGraph g = sample_with_seed(7, 2);
    ASSERT_EQ(g.n(), 2);
    for (const auto& e : g.elements) {
        const PixelBox b = element_box(e, g.canvas_h, g.canvas_w);
        EXPECT_GE(b.y0, 0);
        EXPECT_GE(b.x0, 0);
        EXPECT_LE(b.y1, g.canvas_h);
        EXPECT_LE(b.x1, g.canvas_w);
    }
}

TEST(SampleScene, RejectsBadN) {
    Rng rng(7);
    EXPECT_THROW(sample_scene(rng, 9), std::invalid_argument);
    EXPECT_THROW(sample_scene(rng, 1), std::invalid_argument);
}

TEST(SampleScene, DisjointnessProperty) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed);
        const int n = 3 + int(rng.uniform_index(4));
        const SceneGraph g = sample_scene(rng, n);
        std::vector<PixelBox> boxes;
        for (const auto& e : g.elements) boxes.push_back(element_box(e, g.canvas_h, g.canvas_w));
        for (std::size_t i = 0; i < boxes.size(); ++i)
            for (std::size_t j = i + 1; j < boxes.size(); ++j)
                ASSERT_FALSE(boxes[i].intersects(boxes[j])) << "seed " << seed;
    }
}

TEST(Render, RejectsInvalidGraph) {
    SceneGraph g = sample_with_seed(3, 3);
    g.elements[0].scale = 0.0;  // violates the scale invariant
    EXPECT_THROW(render(g), std::invalid_argument);

    SceneGraph one = sample_with_seed(3, 2);
    one.elements.pop_back();
    EXPECT_THROW(render(one), std::invalid_argument);
}

TEST(Render, Deterministic) {
    const SceneGraph g = sample_with_seed(11, 4);
    const Image a = render(g);
    const Image b = render(g);
    EXPECT_TRUE(a == b);
}

TEST(Render, ColorChangeIsLocal) {
    const SceneGraph g = sample_with_seed(13, 4);
    SceneGraph g2 = g;
    auto& e = g2.elements[1];
    // Move the element to a different color bucket (phrase must track it).
    e.color_bucket = (e.color_bucket + 3) % num_colors();
    e.color = color_centers()[std::size_t(e.color_bucket)];
    e.phrase = element_phrase(e.shape_id, e.color_bucket, e.texture_id);

    const Image a = render(g);
    const Image b = render(g2);
    const PixelBox box = element_box(g.elements[1], g.canvas_h, g.canvas_w);
    // Pixel-diff oracle: differences confined to the recolored element's box.
    for (int y = 0; y < a.h; ++y)
        for (int x = 0; x < a.w; ++x) {
            const bool inside = y >= box.y0 && y < box.y1 && x >= box.x0 && x < box.x1;
            if (inside) continue;
            for (int c = 0; c < 3; ++c)
                ASSERT_EQ(a.at(y, x, c), b.at(y, x, c)) << "pixel (" << y << "," << x << ")";
        }
    EXPECT_GT(mean_abs_diff(a, b), 0.0);
}

TEST(Render, ElementPixelsDifferFromBackground) {
    const SceneGraph g = sample_with_seed(17, 3);
    const Image img = render(g);
    Image bg(g.canvas_h, g.canvas_w);
    render_background(bg, g.background_id, g.background_seed);
    quantize8(bg);
    for (const auto& e : g.elements) {
        const auto mask = element_mask(e, g.canvas_h, g.canvas_w);
        double diff = 0.0;
        int count = 0;
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                if (mask[std::size_t(y) * img.w + x]) {
                    for (int c = 0; c < 3; ++c)
                        diff += std::abs(img.at(y, x, c) - bg.at(y, x, c));
                    ++count;
                }
        ASSERT_GT(count, 0);
        EXPECT_GT(diff / count, 0.01) << "element " << e.phrase;
    }
}

TEST(Caption, ContainsAllPhrasesExactlyOnce) {
    const SceneGraph g2 = sample_with_seed(19, 2);
    Rng t1(5);
    const std::string c2 = caption(g2, t1);
    for (const auto& e : g2.elements) EXPECT_EQ(count_occurrences(c2, e.phrase), 1) << c2;

    const SceneGraph g5 = sample_with_seed(23, 5);
    Rng t2(5);
    const std::string c5 = caption(g5, t2);
    int total = 0;
    for (const auto& e : g5.elements) total += count_occurrences(c5, e.phrase);
    EXPECT_EQ(total, 5) << c5;
}

TEST(Caption, DeterministicGivenSeed) {
    const SceneGraph g = sample_with_seed(29, 4);
    Rng a(123), b(123);
    EXPECT_EQ(caption(g, a), caption(g, b));
}

TEST(Caption, CompletenessProperty) {
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
        Rng rng(seed);
        const SceneGraph g = sample_scene(rng, 3 + int(seed % 4));
        Rng trng(seed * 31);
        const std::string text = caption(g, trng);
        for (const auto& e : g.elements)
            ASSERT_EQ(count_occurrences(text, e.phrase), 1) << text;
    }
}

TEST(GenDataset, CountsMatchManifest) {
    WorldConfig cfg;
    cfg.count = 1000;
    cfg.targets = 20;
    const Dataset ds = gen_dataset(cfg, 42);
    EXPECT_EQ(ds.count_split(Split::Clean), 1000u);
    EXPECT_EQ(ds.count_split(Split::Target), 20u);
    EXPECT_EQ(ds.records.size(), 1020u);

    std::set<std::string> ids;
    for (const auto& r : ds.records) ids.insert(r.id);
    EXPECT_EQ(ids.size(), ds.records.size());  // one record per id
    for (const auto& r : ds.records)
        if (r.split == Split::Target) {
            EXPECT_NE(r.id.substr(0, 5), "clean");
        }
}

TEST(GenDataset, RejectsEmptyCount) {
    WorldConfig cfg;
    cfg.count = 0;
    EXPECT_THROW(gen_dataset(cfg, 1), std::invalid_argument);
}

TEST(GenDataset, Deterministic) {
    WorldConfig cfg;
    cfg.count = 12;
    cfg.targets = 2;
    const Dataset a = gen_dataset(cfg, 7);
    const Dataset b = gen_dataset(cfg, 7);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        EXPECT_EQ(a.records[i].caption, b.records[i].caption);
        EXPECT_TRUE(a.records[i].image == b.records[i].image);
    }
}

TEST(GenDataset, RoundTripsThroughDisk) {
    namespace fs = std::filesystem;
    WorldConfig cfg;
    cfg.count = 6;
    cfg.targets = 1;
    const Dataset ds = gen_dataset(cfg, 99);
    const fs::path root = fs::temp_directory_path() / "poisonlab_ds_test";
    fs::remove_all(root);
    write_dataset(ds, root);
    const Dataset back = read_dataset(root);
    ASSERT_EQ(back.records.size(), ds.records.size());
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        EXPECT_EQ(back.records[i].id, ds.records[i].id);
        EXPECT_EQ(back.records[i].caption, ds.records[i].caption);
        EXPECT_EQ(split_name(back.records[i].split), split_name(ds.records[i].split));
        // 8-bit quantization at render time makes the PNG round trip exact.
        EXPECT_TRUE(back.records[i].image == ds.records[i].image) << ds.records[i].id;
    }
    EXPECT_EQ(back.config.count, cfg.count);
    EXPECT_EQ(back.seed, 99u);
    fs::remove_all(root);
}
