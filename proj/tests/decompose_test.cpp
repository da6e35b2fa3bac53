#include <gtest/gtest.h>

#include "poisonlab/decompose.hpp"
#include "poisonlab/synthworld.hpp"

using namespace poisonlab;

namespace {

RenderedScene scene_with(std::uint64_t seed, int n) {
    Rng rng(seed);
    RenderedScene s;
    s.graph = sample_scene(rng, n);
    s.image = render(s.graph);
    Rng crng(seed + 1);
    s.caption = caption(s.graph, crng);
    return s;
}

}  // namespace

TEST(Decompose, MaskUnionMatchesGroundTruthPixels) {
    const RenderedScene s = scene_with(5, 4);
    const auto els = decompose(s, ground_truth_backend());
    ASSERT_EQ(els.size(), 4u);

    // Pixel-set oracle: union of returned masks == union of scene-graph
    // element masks.
    const std::size_t npx = std::size_t(s.graph.canvas_h) * s.graph.canvas_w;
    std::vector<std::uint8_t> union_got(npx, 0), union_want(npx, 0);
    for (const auto& e : els)
        for (std::size_t p = 0; p < npx; ++p) union_got[p] |= e.mask[p];
    for (const auto& e : s.graph.elements) {
        const auto m = element_mask(e, s.graph.canvas_h, s.graph.canvas_w);
        for (std::size_t p = 0; p < npx; ++p) union_want[p] |= m[p];
    }
    EXPECT_EQ(union_got, union_want);
}

TEST(Decompose, PhrasesPassThroughFromGraph) {
    const RenderedScene s = scene_with(9, 2);
    const auto els = decompose(s, ground_truth_backend());
    ASSERT_EQ(els.size(), 2u);
    EXPECT_EQ(els[0].phrase, s.graph.elements[0].phrase);
    EXPECT_EQ(els[1].phrase, s.graph.elements[1].phrase);
}

TEST(Decompose, RejectsSingleElementBackend) {
    DecomposeBackend one;
    one.name = "stub";
    one.run = [](const Image& img, const SceneGraph*) {
        DecomposedElement e;
        e.phrase = "red solid circle";
        e.mask.assign(std::size_t(img.h) * img.w, 0);
        e.mask[0] = 1;
        e.bbox = {0, 0, 1, 1};
        e.crop = Image(1, 1, 0.5f);
        e.crop_mask = {1};
        return std::vector<DecomposedElement>{e};
    };
    const RenderedScene s = scene_with(12, 3);
    EXPECT_THROW(decompose(s.image, &s.graph, one), std::runtime_error);
}

TEST(Decompose, RecomposeReproducesTargetExactly) {
    const RenderedScene s = scene_with(21, 5);
    const auto els = decompose(s, ground_truth_backend());
    Image bg(s.graph.canvas_h, s.graph.canvas_w);
    render_background(bg, s.graph.background_id, s.graph.background_seed);
    quantize8(bg);
    const Image rebuilt = recompose(els, bg);
    EXPECT_TRUE(rebuilt == s.image);  // bit-for-bit
}

TEST(Decompose, ElementCountEqualsGraphN) {
    for (int n : {2, 3, 4, 6}) {
        const RenderedScene s = scene_with(std::uint64_t(30 + n), n);
        EXPECT_EQ(int(decompose(s, ground_truth_backend()).size()), n);
    }
}

TEST(ValidateDecomposition, GroundTruthIsClean) {
    const RenderedScene s = scene_with(40, 4);
    const auto els = decompose(s, ground_truth_backend());
    const auto diag = validate_decomposition(els);
    EXPECT_TRUE(diag.ok()) << diag.to_string();
}

TEST(ValidateDecomposition, FlagsDuplicatePhrases) {
    const RenderedScene s = scene_with(44, 3);
    auto els = decompose(s, ground_truth_backend());
    els.push_back(els[0]);  // duplicate phrase and overlapping mask
    const auto diag = validate_decomposition(els);
    ASSERT_EQ(diag.duplicate_phrases.size(), 1u);
    EXPECT_EQ(diag.duplicate_phrases[0], els[0].phrase);
}

TEST(ValidateDecomposition, CountsOverlapPixels) {
    const RenderedScene s = scene_with(48, 3);
    auto els = decompose(s, ground_truth_backend());
    // Constructed overlap oracle: force exactly one shared pixel.
    std::size_t donor = 0;
    for (std::size_t p = 0; p < els[0].mask.size(); ++p)
        if (els[0].mask[p]) {
            donor = p;
            break;
        }
    els[1].mask[donor] = 1;
    const auto diag = validate_decomposition(els);
    EXPECT_EQ(diag.overlap_pixels, 1);
    ASSERT_EQ(diag.overlapping_pairs.size(), 1u);
    EXPECT_EQ(diag.overlapping_pairs[0], (std::pair<std::size_t, std::size_t>{0, 1}));
}

TEST(ValidateDecomposition, FlagsEmptyMask) {
    const RenderedScene s = scene_with(52, 2);
    auto els = decompose(s, ground_truth_backend());
    std::fill(els[0].mask.begin(), els[0].mask.end(), std::uint8_t(0));
    const auto diag = validate_decomposition(els);
    ASSERT_EQ(diag.empty_masks.size(), 1u);
    EXPECT_EQ(diag.empty_masks[0], 0u);
}

TEST(Rle, RoundTripProperty) {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::uint8_t> mask(256);
        for (auto& m : mask) m = rng.bernoulli(0.3) ? 1 : 0;
        const auto runs = rle_encode(mask);
        EXPECT_EQ(rle_decode(runs, mask.size()), mask);
    }
    // All-zero and all-one masks.
    std::vector<std::uint8_t> zeros(64, 0), ones(64, 1);
    EXPECT_EQ(rle_decode(rle_encode(zeros), 64), zeros);
    EXPECT_EQ(rle_decode(rle_encode(ones), 64), ones);
}

TEST(Rle, RejectsBadRuns) {
    EXPECT_THROW(rle_decode({3, 2}, 64), std::invalid_argument);
    EXPECT_THROW(rle_decode({-1, 65}, 64), std::invalid_argument);
}
