#pragma once

// Substantial-similarity evaluator: deterministic image descriptors, cosine
// scores, the infringement threshold delta, the stealth threshold tau, and
// nearest-neighbor rank statistics.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/synthworld.hpp"

namespace poisonlab {

struct Descriptor {
    std::string version;
    std::vector<double> v;  // unit L2 norm, all entries >= 0
};

struct ThresholdConfig {
    double delta = 0.5;
    double gamma = 0.02;

    void validate() const {
        if (!(0.0 < gamma && gamma < delta && delta < 1.0))
            throw std::invalid_argument("ThresholdConfig requires 0 < gamma < delta < 1");
    }
};

inline const std::vector<std::string>& descriptor_versions() {
    static const std::vector<std::string> v = {"d1", "gray8", "hist24"};
    return v;
}

namespace detail {

inline void append_gray_downsample(const Image& img, int cells, std::vector<double>& out) {
    std::vector<double> acc(std::size_t(cells) * cells, 0.0);
    std::vector<int> cnt(std::size_t(cells) * cells, 0);
    for (int y = 0; y < img.h; ++y) {
        const int cy = std::min(y * cells / img.h, cells - 1);
        for (int x = 0; x < img.w; ++x) {
            const int cx = std::min(x * cells / img.w, cells - 1);
            const double gray = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                                0.114 * img.at(y, x, 2);
            acc[std::size_t(cy) * cells + cx] += gray;
            cnt[std::size_t(cy) * cells + cx] += 1;
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) out.push_back(acc[i] / std::max(1, cnt[i]));
}

inline void append_color_histograms(const Image& img, int bins, std::vector<double>& out) {
    const double npx = double(img.h) * img.w;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> hist(std::size_t(bins), 0.0);
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                int b = int(img.at(y, x, c) * bins);
                b = std::clamp(b, 0, bins - 1);
                hist[std::size_t(b)] += 1.0;
            }
        for (double hval : hist) out.push_back(hval / npx);
    }
}

inline void append_grid_mean_rgb(const Image& img, int cells, std::vector<double>& out) {
    std::vector<double> acc(std::size_t(cells) * cells * 3, 0.0);
    std::vector<int> cnt(std::size_t(cells) * cells, 0);
    for (int y = 0; y < img.h; ++y) {
        const int cy = std::min(y * cells / img.h, cells - 1);
        for (int x = 0; x < img.w; ++x) {
            const int cx = std::min(x * cells / img.w, cells - 1);
            const std::size_t cell = std::size_t(cy) * cells + cx;
            for (int c = 0; c < 3; ++c) acc[cell * 3 + c] += img.at(y, x, c);
            cnt[cell] += 1;
        }
    }
    for (std::size_t cell = 0; cell < cnt.size(); ++cell)
        for (int c = 0; c < 3; ++c) out.push_back(acc[cell * 3 + c] / std::max(1, cnt[cell]));
}

inline void l2_normalize(std::vector<double>& v) {
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) throw std::runtime_error("descriptor has zero norm");
    for (double& x : v) x /= norm;
}

}  // namespace detail

// Deterministic feature map realizing the similarity evaluator. Version "d1"
// concatenates an 8x8 grayscale downsample, per-channel 8-bin histograms, and
// a 4x4 grid of mean RGB (d = 64 + 24 + 48 = 136), then L2-normalizes.
inline Descriptor embed(const Image& img, const std::string& version = "d1") {
    if (img.h <= 0 || img.w <= 0 || img.px.size() != std::size_t(img.h) * img.w * 3)
        throw std::invalid_argument("embed: malformed image");
    if (!all_finite(img)) throw std::invalid_argument("embed: non-finite pixel values");
    Descriptor d;
    d.version = version;
    if (version == "d1") {
        d.v.reserve(136);
        detail::append_gray_downsample(img, 8, d.v);
        detail::append_color_histograms(img, 8, d.v);
        detail::append_grid_mean_rgb(img, 4, d.v);
    } else if (version == "gray8") {
        detail::append_gray_downsample(img, 8, d.v);
    } else if (version == "hist24") {
        detail::append_color_histograms(img, 8, d.v);
    } else {
        throw std::invalid_argument("unknown descriptor version: " + version);
    }
    detail::l2_normalize(d.v);
    return d;
}

// Plain serial dot product; the oracle tests rely on this exact summation
// order.
inline double score_descriptors(const Descriptor& a, const Descriptor& b) {
    if (a.version != b.version || a.v.size() != b.v.size())
        throw std::invalid_argument("score: descriptor version mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) acc += a.v[i] * b.v[i];
    return acc;
}

inline double score(const Image& a, const Image& b, const std::string& version = "d1") {
    if (!a.same_size(b)) throw std::invalid_argument("score: image size mismatch");
    return score_descriptors(embed(a, version), embed(b, version));
}

// Maximum similarity between the target and the clean split.
inline double clean_max(const Dataset& ds, const Image& target, const std::string& version = "d1") {
    const Descriptor td = embed(target, version);
    bool any = false;
    double best = 0.0;
    for (const auto& r : ds.records) {
        if (r.split != Split::Clean) continue;
        const double s = score_descriptors(embed(r.image, version), td);
        if (!any || s > best) best = s;
        any = true;
    }
    if (!any) throw std::invalid_argument("clean_max: dataset has no clean records");
    return best;
}

// tau = min(clean_max - gamma, delta - gamma). The clamp keeps gate-accepted
// poison strictly below the infringement threshold even when the clean set
// contains near-copies of the target.
inline double stealth_threshold(const Dataset& ds, const Image& target, const ThresholdConfig& cfg,
                                const std::string& version = "d1") {
    cfg.validate();
    const double cm = clean_max(ds, target, version);
    const double tau = std::min(cm - cfg.gamma, cfg.delta - cfg.gamma);
    if (tau <= 0.0) throw std::runtime_error("clean set contains near-copy of target");
    return tau;
}

inline double stealth_threshold_from_clean_max(double cm, const ThresholdConfig& cfg) {
    cfg.validate();
    const double tau = std::min(cm - cfg.gamma, cfg.delta - cfg.gamma);
    if (tau <= 0.0) throw std::runtime_error("clean set contains near-copy of target");
    return tau;
}

// 1-based rank of query_id's similarity-to-target among all dataset records,
// descending score, ties broken by ascending record id.
inline int rank_of(const Dataset& ds, const Image& target, const std::string& query_id,
                   const std::string& version = "d1") {
    if (ds.records.empty()) throw std::invalid_argument("rank_of: empty dataset");
    const Descriptor td = embed(target, version);
    bool found = false;
    std::vector<std::pair<double, const std::string*>> scored;
    scored.reserve(ds.records.size());
    for (const auto& r : ds.records) {
        scored.emplace_back(score_descriptors(embed(r.image, version), td), &r.id);
        if (r.id == query_id) found = true;
    }
    if (!found) throw std::invalid_argument("rank_of: unknown record id " + query_id);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return *a.second < *b.second;
    });
    for (std::size_t i = 0; i < scored.size(); ++i)
        if (*scored[i].second == query_id) return int(i) + 1;
    throw std::logic_error("rank_of: id vanished during sort");
}

// ---------------------------------------------------------------------------
// Detector report (clean-max / poison-max / poison-rank averaged over targets)

struct DetectorRow {
    std::string detector;
    double clean_max = 0.0;
    double poison_max = 0.0;
    double poison_rank = 0.0;
};

// Per descriptor version: average max clean similarity, average max poison
// similarity, and the average rank of each target's most similar poison among
// clean + poison records.
inline std::vector<DetectorRow> detector_report(const Dataset& clean_ds,
                                                const std::vector<Record>& poison_records,
                                                const std::vector<Record>& targets) {
    if (targets.empty() || poison_records.empty())
        throw std::invalid_argument("detector_report: need at least one target and one poison");
    std::vector<DetectorRow> rows;
    for (const auto& version : descriptor_versions()) {
        DetectorRow row;
        row.detector = version;
        double sum_clean = 0, sum_poison = 0, sum_rank = 0;
        for (const auto& target : targets) {
            const Descriptor td = embed(target.image, version);
            double cmax = -1.0;
            for (const auto& r : clean_ds.records) {
                if (r.split != Split::Clean) continue;
                cmax = std::max(cmax, score_descriptors(embed(r.image, version), td));
            }
            if (cmax < 0.0) throw std::invalid_argument("detector_report: no clean records");
            // Rank every record of (clean + this target's poison); find the
            // best poison and its rank.
            std::vector<std::pair<double, const std::string*>> scored;
            double pmax = -1.0;
            const std::string* pbest = nullptr;
            for (const auto& r : clean_ds.records) {
                if (r.split != Split::Clean) continue;
                scored.emplace_back(score_descriptors(embed(r.image, version), td), &r.id);
            }
            for (const auto& p : poison_records) {
                if (p.target_id != target.id) continue;
                const double s = score_descriptors(embed(p.image, version), td);
                scored.emplace_back(s, &p.id);
                if (s > pmax) {
                    pmax = s;
                    pbest = &p.id;
                }
            }
            if (!pbest) throw std::invalid_argument("detector_report: target has no poison: " + target.id);
            std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return *a.second < *b.second;
            });
            int rank = 0;
            for (std::size_t i = 0; i < scored.size(); ++i)
                if (scored[i].second == pbest) {
                    rank = int(i) + 1;
                    break;
                }
            sum_clean += cmax;
            sum_poison += pmax;
            sum_rank += rank;
        }
        const double nt = double(targets.size());
        row.clean_max = sum_clean / nt;
        row.poison_max = sum_poison / nt;
        row.poison_rank = sum_rank / nt;
        rows.push_back(row);
    }
    return rows;
}

inline std::string detector_report_csv(const std::vector<DetectorRow>& rows) {
    std::string out = "detector,clean_max,poison_max,poison_rank\n";
    for (const auto& r : rows) {
        out += r.detector + "," + format_double(r.clean_max, 6) + "," +
               format_double(r.poison_max, 6) + "," + format_double(r.poison_rank, 6) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Delta calibration
//
// The infringement threshold must sit above every nearest-neighbor score
// between unrelated world images, so that a clean-trained model essentially
// never "infringes". Procedure: compute, for a deterministic subset of clean
// records, each record's max similarity to the other clean records; also
// compute every target's max similarity to the clean split; delta is the
// largest of these plus a safety margin.

struct DeltaCalibration {
    double delta = 0.5;
    double clean_nn_max = 0.0;
    double target_nn_max = 0.0;
    double margin = 0.0;
    int sample_count = 0;
    std::string procedure;
};

inline DeltaCalibration calibrate_delta(const Dataset& ds, const std::vector<Record>& targets,
                                        double margin = 0.01, int sample_cap = 256,
                                        const std::string& version = "d1") {
    std::vector<const Record*> clean;
    for (const auto& r : ds.records)
        if (r.split == Split::Clean) clean.push_back(&r);
    if (clean.size() < 2) throw std::invalid_argument("calibrate_delta: need >= 2 clean records");

    // Deterministic evenly strided subset when the clean split is large.
    std::vector<const Record*> subset;
    if (int(clean.size()) <= sample_cap) {
        subset = clean;
    } else {
        for (int i = 0; i < sample_cap; ++i)
            subset.push_back(clean[std::size_t(i) * clean.size() / std::size_t(sample_cap)]);
    }
    std::vector<Descriptor> descs;
    descs.reserve(subset.size());
    for (const auto* r : subset) descs.push_back(embed(r->image, version));

    DeltaCalibration cal;
    cal.margin = margin;
    cal.sample_count = int(subset.size());
    for (std::size_t i = 0; i < descs.size(); ++i)
        for (std::size_t j = i + 1; j < descs.size(); ++j)
            cal.clean_nn_max = std::max(cal.clean_nn_max, score_descriptors(descs[i], descs[j]));
    for (const auto& t : targets) {
        const Descriptor td = embed(t.image, version);
        for (const auto& d : descs)
            cal.target_nn_max = std::max(cal.target_nn_max, score_descriptors(d, td));
    }
    cal.delta = std::min(std::max(cal.clean_nn_max, cal.target_nn_max) + margin, 0.999);
    cal.procedure = "delta = max(clean-vs-clean NN max over " + std::to_string(cal.sample_count) +
                    " strided clean records, target-vs-clean max) + margin " +
                    format_double(margin, 6) + " on descriptor " + version;
    return cal;
}

// Threshold config with delta calibrated to the world and the default gamma.
inline ThresholdConfig calibrated_thresholds(const Dataset& ds, const std::vector<Record>& targets,
                                             double gamma = 0.02, double margin = 0.01,
                                             int sample_cap = 256,
                                             const std::string& version = "d1") {
    ThresholdConfig cfg;
    cfg.gamma = gamma;
    cfg.delta = calibrate_delta(ds, targets, margin, sample_cap, version).delta;
    cfg.validate();
    return cfg;
}

}  // namespace poisonlab
