#pragma once

// Poisoning-pair factory: craft captions around one element phrase, composite
// the isolated element into fresh contexts, and gate every pair by the
// stealth threshold with bounded regeneration.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/decompose.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/similarity.hpp"
#include "poisonlab/synthworld.hpp"

namespace poisonlab {

struct PoisonBudget {
    double ratio = 0.10;            // fraction of the clean set, used when per_element == 0
    int per_element = 0;            // k; 0 means "derive from ratio"
    int max_attempts = 10;

    // k = ceil(p * |D_train| / n)
    int resolve_k(std::size_t clean_count, int n) const {
        if (per_element > 0) return per_element;
        if (!(ratio > 0.0 && ratio < 1.0))
            throw std::invalid_argument("PoisonBudget: ratio must be in (0, 1)");
        if (n < 1) throw std::invalid_argument("PoisonBudget: n must be >= 1");
        const int k = int(std::ceil(ratio * double(clean_count) / double(n)));
        return std::max(1, k);
    }
};

struct PoisonPair {
    std::string id;
    Image image;
    std::string caption;
    std::string target_id;
    std::string element_phrase;
    double sim_to_target = 0.0;
    int attempts = 0;
    std::vector<std::string> present_phrases;  // composite ground truth

    Record to_record() const {
        Record r;
        r.id = id;
        r.file = "images/" + id + ".png";
        r.caption = caption;
        r.split = Split::Poison;
        r.image = image;
        r.target_id = target_id;
        r.element_phrase = element_phrase;
        r.sim_to_target = sim_to_target;
        r.attempts = attempts;
        return r;
    }
};

struct PoisonSet {
    std::vector<PoisonPair> pairs;
    std::string target_id;
    double tau = 0.0;
    ThresholdConfig thresholds;
    PoisonBudget budget;
    int k = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Caption crafting

struct CraftedCaption {
    std::string text;
    std::string element_phrase;
    std::vector<std::string> distractor_phrases;
    int background_id = 0;
};

inline ElementSpec spec_from_phrase(const std::string& phrase) {
    std::istringstream is(phrase);
    std::string color_w, texture_w, shape_w;
    is >> color_w >> texture_w >> shape_w;
    ElementSpec e;
    auto index_of = [](const std::vector<std::string>& v, const std::string& s, const char* what) {
        for (std::size_t i = 0; i < v.size(); ++i)
            if (v[i] == s) return int(i);
        throw std::invalid_argument(std::string("unknown ") + what + " word: " + s);
    };
    e.color_bucket = index_of(color_names(), color_w, "color");
    e.texture_id = index_of(texture_names(), texture_w, "texture");
    e.shape_id = index_of(shape_names(), shape_w, "shape");
    e.color = color_centers()[std::size_t(e.color_bucket)];
    e.phrase = phrase;
    return e;
}

// Templated 8-20 word caption containing `phrase` verbatim exactly once plus
// 1-2 distractor phrases drawn outside `exclude`.
inline CraftedCaption craft_caption(const std::string& phrase, Rng& rng,
                                    const std::vector<std::string>& exclude = {}) {
    if (phrase.empty()) throw std::invalid_argument("craft_caption: empty phrase");
    static const std::vector<std::string> universe = all_element_phrases();
    CraftedCaption out;
    out.element_phrase = phrase;
    out.background_id = int(rng.uniform_index(std::uint64_t(num_backgrounds())));
    const int wanted = 1 + int(rng.uniform_index(2));
    int guard = 0;
    while (int(out.distractor_phrases.size()) < wanted && guard++ < 500) {
        const std::string& cand = universe[rng.uniform_index(universe.size())];
        if (cand == phrase) continue;
        if (std::find(exclude.begin(), exclude.end(), cand) != exclude.end()) continue;
        if (std::find(out.distractor_phrases.begin(), out.distractor_phrases.end(), cand) !=
            out.distractor_phrases.end())
            continue;
        out.distractor_phrases.push_back(cand);
    }
    if (out.distractor_phrases.empty())
        throw std::runtime_error("craft_caption: could not pick distractor phrases");

    const std::string& bg = background_names().at(std::size_t(out.background_id));
    const std::string& d1 = out.distractor_phrases[0];
    const std::string d2 =
        out.distractor_phrases.size() > 1 ? out.distractor_phrases[1] : std::string();
    switch (int(rng.uniform_index(4))) {
        case 0:
            out.text = "a " + bg + " scene with a " + phrase + " next to a " + d1 +
                       (d2.empty() ? "" : " and a " + d2) + ".";
            break;
        case 1:
            out.text = "an image with a " + phrase + (d2.empty() ? "" : ", a " + d2) + " and a " +
                       d1 + " on a " + bg + " background.";
            break;
        case 2:
            out.text = "a " + phrase + " appears beside a " + d1 +
                       (d2.empty() ? "" : " and a " + d2) + " over a " + bg + " backdrop.";
            break;
        default:
            out.text = "this picture features a " + phrase + " together with a " + d1 +
                       (d2.empty() ? "" : " and a " + d2) + " on a " + bg + " background.";
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Compositing (inpainting substitute)

struct CompositeResult {
    Image image;
    PixelBox element_box;
    std::vector<std::string> present_phrases;  // element phrase + distractors
};

namespace detail {

inline void resample_nearest(const Image& src, const std::vector<std::uint8_t>& src_mask,
                             int dst_h, int dst_w, Image& dst, std::vector<std::uint8_t>& dst_mask) {
    dst = Image(dst_h, dst_w, 0.0f);
    dst_mask.assign(std::size_t(dst_h) * dst_w, 0);
    for (int y = 0; y < dst_h; ++y) {
        const int sy = std::min(int(std::int64_t(y) * src.h / dst_h), src.h - 1);
        for (int x = 0; x < dst_w; ++x) {
            const int sx = std::min(int(std::int64_t(x) * src.w / dst_w), src.w - 1);
            if (!src_mask[std::size_t(sy) * src.w + sx]) continue;
            dst_mask[std::size_t(y) * dst_w + x] = 1;
            for (int c = 0; c < 3; ++c) dst.at(y, x, c) = src.at(sy, sx, c);
        }
    }
}

}  // namespace detail

// Paste the isolated element, jittered around its original placement
// (position offset up to +/-25% of the box side per axis, scale factor in
// [0.75, 1.25]), onto a fresh procedural background populated with the
// caption's distractor elements. Element pixels are preserved up to nearest
// resampling.
inline CompositeResult composite(const DecomposedElement& element, const CraftedCaption& crafted,
                                 Rng& rng, int canvas_h, int canvas_w) {
    const int orig_side = std::max(element.bbox.y1 - element.bbox.y0,
                                   element.bbox.x1 - element.bbox.x0);
    if (orig_side < 1) throw std::invalid_argument("composite: element has empty bbox");
    const int min_dim = std::min(canvas_h, canvas_w);

    CompositeResult out;
    out.image = Image(canvas_h, canvas_w);
    render_background(out.image, crafted.background_id, rng.next_u64());

    // Jittered placement of the target element.
    const double scale_factor = rng.uniform(0.75, 1.25);
    int side = int(std::lround(orig_side * scale_factor));
    side = std::clamp(side, std::max(2, int(std::lround(0.1 * min_dim))),
                      int(std::lround(0.4 * min_dim)));
    const double cy0 = (element.bbox.y0 + element.bbox.y1) / 2.0;
    const double cx0 = (element.bbox.x0 + element.bbox.x1) / 2.0;
    const double jitter = 0.25 * orig_side;
    int y0 = int(std::lround(cy0 + rng.uniform(-jitter, jitter) - side / 2.0));
    int x0 = int(std::lround(cx0 + rng.uniform(-jitter, jitter) - side / 2.0));
    y0 = std::clamp(y0, 0, canvas_h - side);
    x0 = std::clamp(x0, 0, canvas_w - side);

    Image patch;
    std::vector<std::uint8_t> patch_mask;
    detail::resample_nearest(element.crop, element.crop_mask, side, side, patch, patch_mask);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            if (patch_mask[std::size_t(y) * side + x])
                for (int c = 0; c < 3; ++c) out.image.at(y0 + y, x0 + x, c) = patch.at(y, x, c);
    out.element_box = {y0, x0, y0 + side, x0 + side};
    out.present_phrases.push_back(crafted.element_phrase);

    // Distractor elements at free positions.
    std::vector<PixelBox> occupied = {out.element_box};
    for (const auto& dphrase : crafted.distractor_phrases) {
        ElementSpec d = spec_from_phrase(dphrase);
        const auto& center = color_centers()[std::size_t(d.color_bucket)];
        for (int c = 0; c < 3; ++c)
            d.color[std::size_t(c)] =
                std::clamp(center[std::size_t(c)] + float(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
        bool placed = false;
        for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
            d.scale = rng.uniform(0.15, 0.35);
            d.row = rng.uniform(d.scale / 2.0, 1.0 - d.scale / 2.0);
            d.col = rng.uniform(d.scale / 2.0, 1.0 - d.scale / 2.0);
            const PixelBox b = element_box(d, canvas_h, canvas_w);
            bool clear = true;
            for (const auto& o : occupied)
                if (b.intersects(o)) {
                    clear = false;
                    break;
                }
            if (!clear) continue;
            occupied.push_back(b);
            render_element(out.image, d);
            out.present_phrases.push_back(dphrase);
            placed = true;
        }
        if (!placed) throw std::runtime_error("composite: distractor placement failed after 50 tries");
    }
    quantize8(out.image);
    return out;
}

// ---------------------------------------------------------------------------
// Stealth gate

struct GateResult {
    bool accepted = false;
    double score = 0.0;
};

// Strict inequality at the boundary.
inline bool gate_decision(double sim, double tau) { return sim < tau; }

// Accept iff score(image, target) < tau.
inline GateResult gate(const Image& image, const Image& target, double tau,
                       const ThresholdConfig& cfg = {}, const std::string& version = "d1") {
    cfg.validate();
    if (!(tau > 0.0 && tau < cfg.delta))
        throw std::invalid_argument("gate: tau must lie in (0, delta)");
    GateResult g;
    g.score = score(image, target, version);
    g.accepted = gate_decision(g.score, tau);
    return g;
}

// ---------------------------------------------------------------------------
// Poison-set generation

// Craft exactly n*k gate-passing pairs, k per decomposed element, redrawing
// caption and composite up to budget.max_attempts per pair. Throws with
// per-element diagnostics when a pair cannot be made stealthy.
inline PoisonSet generate(const Record& target, const std::vector<DecomposedElement>& elements,
                          const PoisonBudget& budget, const Dataset& clean_dataset,
                          const ThresholdConfig& cfg, std::uint64_t seed,
                          const std::string& version = "d1",
                          const std::string& id_prefix = "poison") {
    if (elements.empty()) throw std::invalid_argument("generate: empty decomposition");
    cfg.validate();
    const double tau = stealth_threshold(clean_dataset, target.image, cfg, version);
    const int n = int(elements.size());
    const int k = budget.resolve_k(clean_dataset.count_split(Split::Clean), n);
    const int canvas_h = target.image.h, canvas_w = target.image.w;

    std::vector<std::string> target_phrases;
    for (const auto& e : elements) target_phrases.push_back(e.phrase);

    PoisonSet set;
    set.target_id = target.id;
    set.tau = tau;
    set.thresholds = cfg;
    set.budget = budget;
    set.k = k;
    set.seed = seed;

    Rng base(seed);
    int serial = 0;
    for (int ei = 0; ei < n; ++ei) {
        const auto& element = elements[std::size_t(ei)];
        for (int replica = 0; replica < k; ++replica) {
            Rng pair_rng = base.derive(std::uint64_t(ei), std::uint64_t(replica));
            bool done = false;
            double best_seen = 2.0;
            for (int attempt = 1; attempt <= budget.max_attempts && !done; ++attempt) {
                Rng attempt_rng = pair_rng.derive("attempt", std::uint64_t(attempt));
                const CraftedCaption crafted =
                    craft_caption(element.phrase, attempt_rng, target_phrases);
                const CompositeResult comp =
                    composite(element, crafted, attempt_rng, canvas_h, canvas_w);
                const GateResult g = gate(comp.image, target.image, tau, cfg, version);
                best_seen = std::min(best_seen, g.score);
                if (!g.accepted) continue;
                PoisonPair p;
                p.id = padded_id(id_prefix + "_" + target.id, serial++);
                p.image = comp.image;
                p.caption = crafted.text;
                p.target_id = target.id;
                p.element_phrase = element.phrase;
                p.sim_to_target = g.score;
                p.attempts = attempt;
                p.present_phrases = comp.present_phrases;
                set.pairs.push_back(std::move(p));
                done = true;
            }
            if (!done) {
                std::ostringstream os;
                os << "poison generation exhausted " << budget.max_attempts
                   << " attempts for element '" << element.phrase << "' of " << target.id
                   << " (replica " << replica << "): best score " << best_seen
                   << " never fell below tau=" << tau
                   << "; target and world are too similar for stealth";
                throw std::runtime_error(os.str());
            }
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Few-shot auxiliary data

// Decompose `shots` freshly sampled non-target scenes and generate k=3
// gate-passing pairs per element; each shot also contributes the composed
// scene itself with its full caption so the victim sees element-to-whole
// composition. All records are tagged split=aux.
inline std::vector<Record> few_shot_augment(const Dataset& clean_dataset, int shots,
                                            std::uint64_t seed, const ThresholdConfig& cfg,
                                            const std::string& version = "d1") {
    if (shots != 0 && shots != 2 && shots != 4 && shots != 6)
        throw std::invalid_argument("few_shot_augment: shots must be one of {0, 2, 4, 6}");
    std::vector<Record> out;
    if (shots == 0) return out;
    Rng master(seed);
    const WorldConfig& wc = clean_dataset.config;
    for (int s = 0; s < shots; ++s) {
        const RenderedScene scene = make_scene(master.derive("aux_scene", std::uint64_t(s)), wc);
        const std::string scene_id = padded_id("aux", s, 4);

        Record whole;
        whole.id = scene_id + "_scene";
        whole.file = "images/" + whole.id + ".png";
        whole.caption = scene.caption;
        whole.split = Split::Aux;
        whole.image = scene.image;
        whole.graph = scene.graph;
        whole.target_id = scene_id;
        out.push_back(std::move(whole));

        Record pseudo_target;
        pseudo_target.id = scene_id;
        pseudo_target.image = scene.image;
        pseudo_target.graph = scene.graph;

        const auto elements = decompose(scene.image, &scene.graph, ground_truth_backend());
        PoisonBudget aux_budget;
        aux_budget.per_element = 3;
        const PoisonSet aux = generate(pseudo_target, elements, aux_budget, clean_dataset, cfg,
                                       master.derive("aux_pairs", std::uint64_t(s)).next_u64(),
                                       version, "aux_pair_" + std::to_string(s));
        for (const auto& p : aux.pairs) {
            Record r = p.to_record();
            r.split = Split::Aux;
            out.push_back(std::move(r));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subsampling

// Uniform sample without replacement of round(fraction*N) pairs, stratified
// per element phrase. Strata that would drop to zero emit a warning and
// proceed.
inline PoisonSet subsample(const PoisonSet& set, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("subsample: fraction must be in (0, 1]");
    if (fraction == 1.0) return set;

    std::map<std::string, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < set.pairs.size(); ++i)
        strata[set.pairs[i].element_phrase].push_back(i);

    const std::size_t total_wanted =
        std::size_t(std::llround(fraction * double(set.pairs.size())));

    // Floor each stratum, then hand out the remainder by largest fractional
    // part (phrase order breaks ties deterministically).
    std::vector<std::pair<std::string, double>> fracs;
    std::map<std::string, std::size_t> take;
    std::size_t assigned = 0;
    for (const auto& [phrase, idxs] : strata) {
        const double exact = fraction * double(idxs.size());
        take[phrase] = std::size_t(exact);
        assigned += take[phrase];
        fracs.emplace_back(phrase, exact - double(take[phrase]));
    }
    std::sort(fracs.begin(), fracs.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (std::size_t i = 0; assigned < total_wanted && i < fracs.size(); ++i) {
        if (take[fracs[i].first] < strata[fracs[i].first].size()) {
            ++take[fracs[i].first];
            ++assigned;
        }
    }

    PoisonSet out = set;
    out.pairs.clear();
    Rng rng(seed);
    for (auto& [phrase, idxs] : strata) {
        const auto perm = rng.derive(phrase).permutation(idxs.size());
        if (take[phrase] == 0)
            out.warnings.push_back("subsample: stratum '" + phrase + "' dropped to zero pairs");
        for (std::size_t i = 0; i < take[phrase]; ++i)
            out.pairs.push_back(set.pairs[idxs[perm[i]]]);
    }
    std::sort(out.pairs.begin(), out.pairs.end(),
              [](const PoisonPair& a, const PoisonPair& b) { return a.id < b.id; });
    return out;
}

}  // namespace poisonlab
