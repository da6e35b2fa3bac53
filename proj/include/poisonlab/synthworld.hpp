#pragma once

// Procedural compositional image world: scenes of captioned geometric
// elements on procedural backgrounds. Supplies clean training pairs, held-out
// target images, and exact ground-truth scene graphs.

#include <algorithm>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/image.hpp"

namespace poisonlab {

// ---------------------------------------------------------------------------
// Vocabulary

inline const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> v = {"circle", "square",  "triangle", "diamond",
                                               "ring",   "cross",   "star",     "hexagon"};
    return v;
}

inline const std::vector<std::string>& color_names() {
    static const std::vector<std::string> v = {"red",    "green", "blue",   "yellow",
                                               "purple", "cyan",  "orange", "white"};
    return v;
}

inline const std::vector<std::array<float, 3>>& color_centers() {
    static const std::vector<std::array<float, 3>> v = {
        {0.85f, 0.10f, 0.10f}, {0.10f, 0.75f, 0.10f}, {0.15f, 0.20f, 0.90f},
        {0.95f, 0.85f, 0.10f}, {0.60f, 0.15f, 0.80f}, {0.10f, 0.80f, 0.85f},
        {0.95f, 0.55f, 0.10f}, {0.95f, 0.95f, 0.95f}};
    return v;
}

inline const std::vector<std::string>& texture_names() {
    static const std::vector<std::string> v = {"solid", "striped", "dotted", "checkered"};
    return v;
}

// Background pattern vocabulary; words are chosen so no element phrase or
// color word is a substring of a background word.
inline const std::vector<std::string>& background_names() {
    static const std::vector<std::string> v = {"plain", "shaded", "mottled", "tiled"};
    return v;
}

inline int num_shapes() { return int(shape_names().size()); }
inline int num_colors() { return int(color_names().size()); }
inline int num_textures() { return int(texture_names().size()); }
inline int num_backgrounds() { return int(background_names().size()); }

inline std::string element_phrase(int shape_id, int color_bucket, int texture_id) {
    return color_names().at(color_bucket) + " " + texture_names().at(texture_id) + " " +
           shape_names().at(shape_id);
}

// Every phrase the world can produce, in a fixed enumeration order.
inline std::vector<std::string> all_element_phrases() {
    std::vector<std::string> out;
    out.reserve(std::size_t(num_colors()) * num_textures() * num_shapes());
    for (int c = 0; c < num_colors(); ++c)
        for (int t = 0; t < num_textures(); ++t)
            for (int s = 0; s < num_shapes(); ++s) out.push_back(element_phrase(s, c, t));
    return out;
}

// ---------------------------------------------------------------------------
// Domain types

struct ElementSpec {
    int shape_id = 0;
    std::array<float, 3> color = {0, 0, 0};  // RGB in [0,1]^3
    int color_bucket = 0;
    int texture_id = 0;
    double row = 0.5;   // box center, canvas fraction
    double col = 0.5;   // box center, canvas fraction
    double scale = 0.2; // box side as fraction of min(H, W), in [0.1, 0.4]
    std::string phrase;
};

struct PixelBox {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open [y0,y1) x [x0,x1)

    bool intersects(const PixelBox& o) const {
        return y0 < o.y1 && o.y0 < y1 && x0 < o.x1 && o.x0 < x1;
    }
    int area() const { return (y1 - y0) * (x1 - x0); }
};

struct SceneGraph {
    std::vector<ElementSpec> elements;
    int background_id = 0;
    std::uint64_t background_seed = 0;  // fixes procedural background appearance
    int canvas_h = 32;
    int canvas_w = 32;

    int n() const { return int(elements.size()); }
};

inline PixelBox element_box(const ElementSpec& e, int canvas_h, int canvas_w) {
    const int side = std::max(2, int(std::lround(e.scale * std::min(canvas_h, canvas_w))));
    int y0 = int(std::lround(e.row * canvas_h - side / 2.0));
    int x0 = int(std::lround(e.col * canvas_w - side / 2.0));
    y0 = std::clamp(y0, 0, canvas_h - side);
    x0 = std::clamp(x0, 0, canvas_w - side);
    return {y0, x0, y0 + side, x0 + side};
}

struct RenderedScene {
    Image image;
    std::string caption;
    SceneGraph graph;
};

enum class Split { Clean, Poison, Target, Aux };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::Clean: return "clean";
        case Split::Poison: return "poison";
        case Split::Target: return "target";
        case Split::Aux: return "aux";
    }
    throw std::logic_error("split_name: bad split");
}

inline Split split_from_name(const std::string& s) {
    if (s == "clean") return Split::Clean;
    if (s == "poison") return Split::Poison;
    if (s == "target") return Split::Target;
    if (s == "aux") return Split::Aux;
    throw std::invalid_argument("unknown split: " + s);
}

struct Record {
    std::string id;
    std::string file;  // relative path under dataset root
    std::string caption;
    Split split = Split::Clean;
    Image image;
    std::optional<SceneGraph> graph;  // present for records rendered from a graph
    // Poison / aux provenance
    std::string target_id;
    std::string element_phrase;
    double sim_to_target = -1.0;
    int attempts = 0;
};

struct WorldConfig {
    int canvas_h = 32;
    int canvas_w = 32;
    int count = 1000;   // clean records
    int targets = 20;   // held-out target records
    std::vector<int> n_choices = {3, 4, 5, 6};
    double scale_min = 0.15;
    double scale_max = 0.40;
};

struct Dataset {
    std::vector<Record> records;
    std::string root;
    WorldConfig config;
    std::uint64_t seed = 0;
    std::string descriptor_version = "d1";

    const Record& by_id(const std::string& id) const {
        for (const auto& r : records)
            if (r.id == id) return r;
        throw std::invalid_argument("unknown record id: " + id);
    }

    bool has_id(const std::string& id) const {
        for (const auto& r : records)
            if (r.id == id) return true;
        return false;
    }

    std::size_t count_split(Split s) const {
        std::size_t c = 0;
        for (const auto& r : records) c += (r.split == s) ? 1 : 0;
        return c;
    }
};

// ---------------------------------------------------------------------------
// Scene sampling

namespace detail {

inline bool inside_shape(int shape_id, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (shape_id) {
        case 0: return u * u + v * v <= 1.0;                       // circle
        case 1: return au <= 0.95 && av <= 0.95;                   // square
        case 2: return v <= 1.0 && au <= (v + 1.0) * 0.5;          // triangle, apex up
        case 3: return au + av <= 1.0;                             // diamond
        case 4: {                                                  // ring
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.45 * 0.45;
        }
        case 5: return au <= 0.38 || av <= 0.38;                   // cross
        case 6: {                                                  // 5-point star
            const double rho = std::sqrt(u * u + v * v);
            if (rho > 1.0) return false;
            double theta = std::atan2(u, -v);  // 0 at the top point
            const double pi = 3.14159265358979323846;
            const double sector = pi / 5.0;
            double a = std::fmod(std::abs(theta), 2.0 * sector);
            if (a > sector) a = 2.0 * sector - a;
            const double rmax = 0.45 + (1.0 - 0.45) * (1.0 - a / sector);
            return rho <= rmax;
        }
        case 7: {                                                  // flat-top hexagon
            const double k = 0.8660254037844386;  // sqrt(3)/2
            return av <= k * 0.95 && k * au + 0.5 * av <= k * 0.95;
        }
        default: throw std::invalid_argument("unknown shape_id");
    }
}

inline std::array<float, 3> darken(const std::array<float, 3>& c) {
    return {c[0] * 0.35f, c[1] * 0.35f, c[2] * 0.35f};
}

inline bool texture_uses_main(int texture_id, int lx, int ly, int side) {
    switch (texture_id) {
        case 0: return true;  // solid
        case 1: {             // striped
            const int period = std::max(2, side / 5);
            return (ly / period) % 2 == 0;
        }
        case 2: {             // dotted: dark dots on main fill
            const int period = std::max(3, side / 4);
            const double r = period * 0.35;
            const double cx = (lx % period) - (period - 1) * 0.5;
            const double cy = (ly % period) - (period - 1) * 0.5;
            return cx * cx + cy * cy > r * r;
        }
        case 3: {             // checkered
            const int period = std::max(2, side / 4);
            return ((lx / period) + (ly / period)) % 2 == 0;
        }
        default: throw std::invalid_argument("unknown texture_id");
    }
}

}  // namespace detail

inline void validate_graph(const SceneGraph& g) {
    if (g.n() < 2 || g.n() > 8)
        throw std::invalid_argument("scene graph must have between 2 and 8 elements");
    if (g.canvas_h < 8 || g.canvas_w < 8) throw std::invalid_argument("canvas too small");
    std::set<std::string> phrases;
    std::vector<PixelBox> boxes;
    for (const auto& e : g.elements) {
        if (e.scale < 0.1 - 1e-9 || e.scale > 0.4 + 1e-9)
            throw std::invalid_argument("element scale outside [0.1, 0.4]");
        const PixelBox b = element_box(e, g.canvas_h, g.canvas_w);
        if (b.y0 < 0 || b.x0 < 0 || b.y1 > g.canvas_h || b.x1 > g.canvas_w)
            throw std::invalid_argument("element extends outside canvas");
        for (const auto& other : boxes)
            if (b.intersects(other)) throw std::invalid_argument("element boxes overlap");
        boxes.push_back(b);
        if (!phrases.insert(e.phrase).second)
            throw std::invalid_argument("duplicate element phrase: " + e.phrase);
        if (e.phrase != element_phrase(e.shape_id, e.color_bucket, e.texture_id))
            throw std::invalid_argument("phrase inconsistent with element attributes");
    }
}

// Sample a scene with n non-overlapping, distinctly phrased elements.
// Throws "canvas too crowded" when 200 consecutive placement attempts fail.
inline SceneGraph sample_scene(Rng& rng, int n, int canvas_h = 32, int canvas_w = 32,
                               double scale_min = 0.15, double scale_max = 0.40) {
    if (n < 2 || n > 8) throw std::invalid_argument("sample_scene: n must be in [2, 8]");
    SceneGraph g;
    g.canvas_h = canvas_h;
    g.canvas_w = canvas_w;
    g.background_id = int(rng.uniform_index(std::uint64_t(num_backgrounds())));
    g.background_seed = rng.next_u64();

    std::vector<PixelBox> boxes;
    std::set<std::string> used_phrases;
    for (int i = 0; i < n; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            ElementSpec e;
            e.shape_id = int(rng.uniform_index(std::uint64_t(num_shapes())));
            e.color_bucket = int(rng.uniform_index(std::uint64_t(num_colors())));
            e.texture_id = int(rng.uniform_index(std::uint64_t(num_textures())));
            const auto& center = color_centers()[std::size_t(e.color_bucket)];
            for (int c = 0; c < 3; ++c)
                e.color[std::size_t(c)] =
                    std::clamp(center[std::size_t(c)] + float(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
            e.scale = rng.uniform(scale_min, scale_max);
            e.row = rng.uniform(e.scale / 2.0, 1.0 - e.scale / 2.0);
            e.col = rng.uniform(e.scale / 2.0, 1.0 - e.scale / 2.0);
            e.phrase = element_phrase(e.shape_id, e.color_bucket, e.texture_id);
            if (used_phrases.count(e.phrase)) continue;
            const PixelBox b = element_box(e, canvas_h, canvas_w);
            bool clear = true;
            for (const auto& other : boxes)
                if (b.intersects(other)) {
                    clear = false;
                    break;
                }
            if (!clear) continue;
            boxes.push_back(b);
            used_phrases.insert(e.phrase);
            g.elements.push_back(e);
            placed = true;
        }
        if (!placed) throw std::runtime_error("canvas too crowded");
    }
    return g;
}

// ---------------------------------------------------------------------------
// Rendering

inline void render_background(Image& img, int background_id, std::uint64_t background_seed) {
    Rng rng(background_seed);
    auto dark = [&rng]() {
        std::array<float, 3> c;
        const float base = float(rng.uniform(0.06, 0.30));
        for (int i = 0; i < 3; ++i) c[std::size_t(i)] = std::clamp(base + float(rng.uniform(-0.04, 0.04)), 0.0f, 1.0f);
        return c;
    };
    const int h = img.h, w = img.w;
    switch (background_id) {
        case 0: {  // plain
            const auto c = dark();
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int k = 0; k < 3; ++k) img.at(y, x, k) = c[std::size_t(k)];
            break;
        }
        case 1: {  // shaded: linear gradient between two dark colors
            const auto a = dark(), b = dark();
            const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            const double dy = std::sin(angle), dx = std::cos(angle);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double t = ((y / double(h - 1) - 0.5) * dy + (x / double(w - 1) - 0.5) * dx) + 0.5;
                    t = std::clamp(t, 0.0, 1.0);
                    for (int k = 0; k < 3; ++k)
                        img.at(y, x, k) = float((1.0 - t) * a[std::size_t(k)] + t * b[std::size_t(k)]);
                }
            break;
        }
        case 2: {  // mottled: bilinear upsample of a coarse dark grid
            const int gn = 5;
            std::vector<std::array<float, 3>> grid(std::size_t(gn) * gn);
            for (auto& c : grid) c = dark();
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double gy = y / double(h - 1) * (gn - 1);
                    const double gx = x / double(w - 1) * (gn - 1);
                    const int y0 = std::min(int(gy), gn - 2), x0 = std::min(int(gx), gn - 2);
                    const double fy = gy - y0, fx = gx - x0;
                    for (int k = 0; k < 3; ++k) {
                        const double v00 = grid[std::size_t(y0) * gn + x0][std::size_t(k)];
                        const double v01 = grid[std::size_t(y0) * gn + x0 + 1][std::size_t(k)];
                        const double v10 = grid[std::size_t(y0 + 1) * gn + x0][std::size_t(k)];
                        const double v11 = grid[std::size_t(y0 + 1) * gn + x0 + 1][std::size_t(k)];
                        img.at(y, x, k) = float((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                                fy * ((1 - fx) * v10 + fx * v11));
                    }
                }
            break;
        }
        case 3: {  // tiled: checkerboard of two dark colors
            const auto a = dark(), b = dark();
            const int cell = rng.bernoulli(0.5) ? 4 : 8;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const bool first = ((y / cell) + (x / cell)) % 2 == 0;
                    const auto& c = first ? a : b;
                    for (int k = 0; k < 3; ++k) img.at(y, x, k) = c[std::size_t(k)];
                }
            break;
        }
        default: throw std::invalid_argument("unknown background_id");
    }
}

// Paint one element into its box. Pixels outside the shape mask are left
// untouched.
inline void render_element(Image& img, const ElementSpec& e) {
    const PixelBox b = element_box(e, img.h, img.w);
    const int side = b.y1 - b.y0;
    const auto dark = detail::darken(e.color);
    for (int ly = 0; ly < side; ++ly)
        for (int lx = 0; lx < side; ++lx) {
            const double u = (lx + 0.5) / side * 2.0 - 1.0;
            const double v = (ly + 0.5) / side * 2.0 - 1.0;
            if (!detail::inside_shape(e.shape_id, u, v)) continue;
            const bool main = detail::texture_uses_main(e.texture_id, lx, ly, side);
            const auto& c = main ? e.color : dark;
            for (int k = 0; k < 3; ++k) img.at(b.y0 + ly, b.x0 + lx, k) = c[std::size_t(k)];
        }
}

// Deterministic render of a validated graph; output is 8-bit-quantized.
inline Image render(const SceneGraph& g) {
    validate_graph(g);
    Image img(g.canvas_h, g.canvas_w);
    render_background(img, g.background_id, g.background_seed);
    for (const auto& e : g.elements) render_element(img, e);
    quantize8(img);
    return img;
}

// Boolean mask of the pixels an element actually covers (its shape mask).
inline std::vector<std::uint8_t> element_mask(const ElementSpec& e, int canvas_h, int canvas_w) {
    std::vector<std::uint8_t> mask(std::size_t(canvas_h) * canvas_w, 0);
    const PixelBox b = element_box(e, canvas_h, canvas_w);
    const int side = b.y1 - b.y0;
    for (int ly = 0; ly < side; ++ly)
        for (int lx = 0; lx < side; ++lx) {
            const double u = (lx + 0.5) / side * 2.0 - 1.0;
            const double v = (ly + 0.5) / side * 2.0 - 1.0;
            if (detail::inside_shape(e.shape_id, u, v))
                mask[std::size_t(b.y0 + ly) * canvas_w + (b.x0 + lx)] = 1;
        }
    return mask;
}

// ---------------------------------------------------------------------------
// Captions

// Natural-language caption containing every element phrase verbatim exactly
// once, phrase order randomized by template_rng.
inline std::string caption(const SceneGraph& g, Rng& template_rng) {
    validate_graph(g);
    const auto order = template_rng.permutation(g.elements.size());
    std::vector<std::string> items;
    items.reserve(order.size());
    for (std::size_t i : order) items.push_back("a " + g.elements[i].phrase);
    std::string list;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i == 0)
            list = items[i];
        else if (i + 1 == items.size())
            list += " and " + items[i];
        else
            list += ", " + items[i];
    }
    const std::string& bg = background_names().at(std::size_t(g.background_id));
    const int tpl = int(template_rng.uniform_index(4));
    switch (tpl) {
        case 0: return "an image with " + list + " on a " + bg + " background.";
        case 1: return "a " + bg + " scene showing " + list + ".";
        case 2: return "this picture features " + list + " over a " + bg + " backdrop.";
        default: return list + " arranged on a " + bg + " background.";
    }
}

// ---------------------------------------------------------------------------
// Dataset generation

inline std::string padded_id(const std::string& prefix, int index, int width = 6) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%0*d", width, index);
    return prefix + "_" + buf;
}

// Sample a scene, retrying crowded layouts with follow-up derived streams so
// dataset generation never aborts on unlucky placements.
inline SceneGraph sample_scene_retry(const Rng& base, int n, const WorldConfig& cfg) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng r = base.derive("layout", attempt);
        try {
            return sample_scene(r, n, cfg.canvas_h, cfg.canvas_w, cfg.scale_min, cfg.scale_max);
        } catch (const std::runtime_error&) {
            if (attempt >= 50) throw;
        }
    }
}

inline RenderedScene make_scene(const Rng& scene_rng, const WorldConfig& cfg) {
    Rng pick = scene_rng.derive("n");
    const int n = cfg.n_choices.at(pick.uniform_index(cfg.n_choices.size()));
    const SceneGraph g = sample_scene_retry(scene_rng, n, cfg);
    Rng caption_rng = scene_rng.derive("caption");
    RenderedScene s;
    s.graph = g;
    s.image = render(g);
    s.caption = caption(g, caption_rng);
    return s;
}

// Generate `count` clean records plus `targets` held-out target records.
// Target ids never appear among clean ids and target records never carry the
// clean split.
inline Dataset gen_dataset(const WorldConfig& cfg, std::uint64_t seed) {
    if (cfg.count < 1) throw std::invalid_argument("gen_dataset: count must be >= 1");
    if (cfg.targets < 0) throw std::invalid_argument("gen_dataset: targets must be >= 0");
    Dataset ds;
    ds.config = cfg;
    ds.seed = seed;
    Rng master(seed);
    for (int i = 0; i < cfg.count; ++i) {
        const RenderedScene s = make_scene(master.derive("clean_scene", std::uint64_t(i)), cfg);
        Record r;
        r.id = padded_id("clean", i);
        r.file = "images/" + r.id + ".png";
        r.caption = s.caption;
        r.split = Split::Clean;
        r.image = s.image;
        r.graph = s.graph;
        ds.records.push_back(std::move(r));
    }
    for (int i = 0; i < cfg.targets; ++i) {
        const RenderedScene s = make_scene(master.derive("target_scene", std::uint64_t(i)), cfg);
        Record r;
        r.id = padded_id("target", i, 4);
        r.file = "images/" + r.id + ".png";
        r.caption = s.caption;
        r.split = Split::Target;
        r.image = s.image;
        r.graph = s.graph;
        ds.records.push_back(std::move(r));
    }
    return ds;
}

}  // namespace poisonlab
