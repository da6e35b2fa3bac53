#pragma once

// Element decomposition: map a target image to (phrase, mask, crop) triples.
// The ground-truth backend reads the scene graph; external detector stacks
// plug in behind the same contract.

#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonlab/image.hpp"
#include "poisonlab/synthworld.hpp"

namespace poisonlab {

struct DecomposedElement {
    std::string phrase;
    std::vector<std::uint8_t> mask;  // full-canvas binary mask, h*w
    PixelBox bbox;                   // tight bounding box of the mask
    Image crop;                      // bbox-sized; pixels outside crop_mask are zero
    std::vector<std::uint8_t> crop_mask;  // bbox-sized transparency mask

    int mask_pixels() const {
        int c = 0;
        for (auto m : mask) c += m ? 1 : 0;
        return c;
    }
};

// Backend contract: (image, optional scene-graph hint) -> elements. External
// detector/segmenter stacks must declare reentrancy so the harness can
// serialize the ones that are not.
struct DecomposeBackend {
    std::string name;
    bool reentrant = true;
    std::function<std::vector<DecomposedElement>(const Image&, const SceneGraph*)> run;
};

namespace detail {

inline PixelBox tight_bbox(const std::vector<std::uint8_t>& mask, int h, int w) {
    int y0 = h, x0 = w, y1 = 0, x1 = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask[std::size_t(y) * w + x]) {
                y0 = std::min(y0, y);
                x0 = std::min(x0, x);
                y1 = std::max(y1, y + 1);
                x1 = std::max(x1, x + 1);
            }
    if (y1 <= y0) return {0, 0, 0, 0};
    return {y0, x0, y1, x1};
}

}  // namespace detail

// Exact decomposition from the scene graph: one element per graph entry, the
// crop cut from the rendered target under the element's shape mask.
inline DecomposeBackend ground_truth_backend() {
    DecomposeBackend b;
    b.name = "ground_truth";
    b.reentrant = true;
    b.run = [](const Image& target, const SceneGraph* graph) {
        if (!graph) throw std::invalid_argument("ground_truth backend requires a scene graph");
        validate_graph(*graph);
        if (target.h != graph->canvas_h || target.w != graph->canvas_w)
            throw std::invalid_argument("ground_truth backend: image/graph canvas mismatch");
        std::vector<DecomposedElement> out;
        for (const auto& e : graph->elements) {
            DecomposedElement d;
            d.phrase = e.phrase;
            d.mask = element_mask(e, graph->canvas_h, graph->canvas_w);
            d.bbox = detail::tight_bbox(d.mask, graph->canvas_h, graph->canvas_w);
            const int bh = d.bbox.y1 - d.bbox.y0, bw = d.bbox.x1 - d.bbox.x0;
            d.crop = Image(bh, bw, 0.0f);
            d.crop_mask.assign(std::size_t(bh) * bw, 0);
            for (int y = 0; y < bh; ++y)
                for (int x = 0; x < bw; ++x)
                    if (d.mask[std::size_t(d.bbox.y0 + y) * graph->canvas_w + (d.bbox.x0 + x)]) {
                        d.crop_mask[std::size_t(y) * bw + x] = 1;
                        for (int c = 0; c < 3; ++c)
                            d.crop.at(y, x, c) = target.at(d.bbox.y0 + y, d.bbox.x0 + x, c);
                    }
            out.push_back(std::move(d));
        }
        return out;
    };
    return b;
}

struct DecompositionDiagnostics {
    int overlap_pixels = 0;
    std::vector<std::pair<std::size_t, std::size_t>> overlapping_pairs;
    std::vector<std::string> duplicate_phrases;
    std::vector<std::size_t> empty_masks;
    std::vector<std::size_t> long_phrases;  // > 6 words

    bool ok() const {
        return overlap_pixels == 0 && duplicate_phrases.empty() && empty_masks.empty() &&
               long_phrases.empty();
    }

    std::string to_string() const {
        std::ostringstream os;
        os << "overlap_pixels=" << overlap_pixels
           << " duplicate_phrases=" << duplicate_phrases.size()
           << " empty_masks=" << empty_masks.size() << " long_phrases=" << long_phrases.size();
        return os.str();
    }
};

inline int count_words(const std::string& s) {
    std::istringstream is(s);
    std::string w;
    int n = 0;
    while (is >> w) ++n;
    return n;
}

// Diagnostic pass over a decomposition: disjointness, duplicate phrases,
// empty masks, phrase length.
inline DecompositionDiagnostics validate_decomposition(const std::vector<DecomposedElement>& els) {
    if (els.empty()) throw std::invalid_argument("validate_decomposition: empty element list");
    DecompositionDiagnostics diag;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < els.size(); ++i) {
        if (els[i].mask_pixels() == 0) diag.empty_masks.push_back(i);
        if (els[i].phrase.empty() || count_words(els[i].phrase) > 6) diag.long_phrases.push_back(i);
        if (!seen.insert(els[i].phrase).second) diag.duplicate_phrases.push_back(els[i].phrase);
        for (std::size_t j = i + 1; j < els.size(); ++j) {
            if (els[i].mask.size() != els[j].mask.size()) continue;
            int overlap = 0;
            for (std::size_t p = 0; p < els[i].mask.size(); ++p)
                overlap += (els[i].mask[p] && els[j].mask[p]) ? 1 : 0;
            if (overlap > 0) {
                diag.overlap_pixels += overlap;
                diag.overlapping_pairs.emplace_back(i, j);
            }
        }
    }
    return diag;
}

// Run a backend and enforce the decomposition contract: >= 2 elements,
// pairwise disjoint masks, pairwise distinct phrases.
inline std::vector<DecomposedElement> decompose(const Image& target, const SceneGraph* graph,
                                                const DecomposeBackend& backend) {
    auto els = backend.run(target, graph);
    if (els.size() < 2)
        throw std::runtime_error("target not decomposable (backend returned " +
                                 std::to_string(els.size()) + " elements)");
    const auto diag = validate_decomposition(els);
    if (!diag.ok())
        throw std::runtime_error("backend '" + backend.name +
                                 "' produced invalid decomposition: " + diag.to_string());
    return els;
}

inline std::vector<DecomposedElement> decompose(const RenderedScene& scene,
                                                const DecomposeBackend& backend) {
    return decompose(scene.image, &scene.graph, backend);
}

// Paste every crop back at its bounding box. With the ground-truth backend
// this reproduces the rendered target bit-for-bit over the rendered
// background.
inline Image recompose(const std::vector<DecomposedElement>& els, Image background) {
    for (const auto& e : els) {
        const int bh = e.bbox.y1 - e.bbox.y0, bw = e.bbox.x1 - e.bbox.x0;
        for (int y = 0; y < bh; ++y)
            for (int x = 0; x < bw; ++x)
                if (e.crop_mask[std::size_t(y) * bw + x])
                    for (int c = 0; c < 3; ++c)
                        background.at(e.bbox.y0 + y, e.bbox.x0 + x, c) = e.crop.at(y, x, c);
    }
    return background;
}

// ---------------------------------------------------------------------------
// Run-length encoding for masks (row-major, alternating zero/one run lengths,
// starting with zeros).

inline std::vector<int> rle_encode(const std::vector<std::uint8_t>& mask) {
    std::vector<int> runs;
    int run = 0;
    std::uint8_t current = 0;
    for (std::uint8_t m : mask) {
        const std::uint8_t bit = m ? 1 : 0;
        if (bit == current) {
            ++run;
        } else {
            runs.push_back(run);
            current = bit;
            run = 1;
        }
    }
    runs.push_back(run);
    return runs;
}

inline std::vector<std::uint8_t> rle_decode(const std::vector<int>& runs, std::size_t expected_size) {
    std::vector<std::uint8_t> mask;
    mask.reserve(expected_size);
    std::uint8_t current = 0;
    for (int run : runs) {
        if (run < 0) throw std::invalid_argument("rle_decode: negative run length");
        mask.insert(mask.end(), std::size_t(run), current);
        current = current ? 0 : 1;
    }
    if (mask.size() != expected_size)
        throw std::invalid_argument("rle_decode: run lengths do not cover the mask");
    return mask;
}

}  // namespace poisonlab
