#pragma once

// The victim: a small text-conditioned pixel-space DDPM with a frozen
// training pipeline, per-epoch checkpoints, and seeded ancestral sampling
// with classifier-free guidance.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/nn.hpp"
#include "poisonlab/synthworld.hpp"

namespace poisonlab {

// ---------------------------------------------------------------------------
// Noise schedule
//
// Linear beta schedule specified by the T=1000 reference endpoints
// (1e-4, 2e-2) and rescaled by 1000/T so that alpha_bar(T) stays tiny at any
// step count.

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;        // index 0 -> t=1
    std::vector<double> alphas;       // 1 - beta
    std::vector<double> alpha_bars;   // cumulative product

    static NoiseSchedule linear(int T = 200, double ref_start = 1e-4, double ref_end = 2e-2) {
        if (T < 2) throw std::invalid_argument("NoiseSchedule: T must be >= 2");
        NoiseSchedule s;
        s.T = T;
        const double k = 1000.0 / double(T);
        if (ref_end * k >= 1.0)
            throw std::invalid_argument(
                "NoiseSchedule: T too small for the scaled linear schedule (beta would reach 1)");
        double prod = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double beta =
                (ref_start + (ref_end - ref_start) * double(t - 1) / double(T - 1)) * k;
            s.betas.push_back(beta);
            s.alphas.push_back(1.0 - beta);
            prod *= 1.0 - beta;
            s.alpha_bars.push_back(prod);
        }
        s.validate();
        return s;
    }

    void validate() const {
        if (int(betas.size()) != T) throw std::logic_error("NoiseSchedule: length mismatch");
        for (int i = 0; i < T; ++i) {
            if (!(betas[std::size_t(i)] > 0.0 && betas[std::size_t(i)] < 1.0))
                throw std::logic_error("NoiseSchedule: beta out of (0,1)");
            if (i > 0 && !(betas[std::size_t(i)] > betas[std::size_t(i) - 1]))
                throw std::logic_error("NoiseSchedule: betas must strictly increase");
        }
        if (!(alpha_bars.back() < 0.02))
            throw std::logic_error("NoiseSchedule: alpha_bar(T) must be < 0.02");
    }

    double beta(int t) const { return betas.at(std::size_t(t - 1)); }
    double alpha(int t) const { return alphas.at(std::size_t(t - 1)); }
    double alpha_bar(int t) const { return alpha_bars.at(std::size_t(t - 1)); }
};

// z_t = sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps
inline std::vector<double> forward_noise(const std::vector<double>& z, int t,
                                         const std::vector<double>& eps,
                                         const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.T)
        throw std::invalid_argument("forward_noise: t out of range [1, T]");
    if (z.size() != eps.size()) throw std::invalid_argument("forward_noise: size mismatch");
    const double a = std::sqrt(schedule.alpha_bar(t));
    const double b = std::sqrt(1.0 - schedule.alpha_bar(t));
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = a * z[i] + b * eps[i];
    return out;
}

// ---------------------------------------------------------------------------
// Text encoder: closed phrase vocabulary with learned embeddings, mean-pooled
// over the phrases matched in a caption. Unknown text maps to a dedicated OOV
// embedding; the empty string maps to the null-condition embedding used for
// classifier-free guidance.

template <class S>
class TextEncoder {
public:
    static constexpr const char* kEmbedding = "text.embedding";

    TextEncoder(ParamStore<S>& ps, std::vector<std::string> vocabulary, int dim = 64)
        : ps_(&ps), vocab_(std::move(vocabulary)), dim_(dim) {
        oov_id_ = int(vocab_.size());
        null_id_ = int(vocab_.size()) + 1;
        ps.add(kEmbedding, dim_, int(vocab_.size()) + 2, /*weight_decay=*/false);
    }

    // Default vocabulary: all world phrases, background words, and the
    // trigger prefix tokens.
    static std::vector<std::string> world_vocabulary() {
        std::vector<std::string> v = all_element_phrases();
        for (const auto& b : background_names()) v.push_back(b);
        v.push_back("an image with");
        v.push_back("a pokemon with features");
        return v;
    }

    int dim() const { return dim_; }
    int vocab_size() const { return int(vocab_.size()) + 2; }
    int oov_id() const { return oov_id_; }
    int null_id() const { return null_id_; }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    // Vocabulary ids whose phrase occurs in the caption, ascending; empty
    // caption -> null id; no matches -> OOV id.
    std::vector<int> match(const std::string& caption) const {
        if (caption.empty()) return {null_id_};
        std::vector<int> ids;
        for (std::size_t i = 0; i < vocab_.size(); ++i)
            if (caption.find(vocab_[i]) != std::string::npos) ids.push_back(int(i));
        if (ids.empty()) ids.push_back(oov_id_);
        return ids;
    }

    // Mean of matched embeddings per sample; dropped samples use the null
    // embedding.
    Mat<S> encode_batch(const std::vector<std::vector<int>>& token_ids,
                        const std::vector<char>& drop) const {
        const auto emb = ps_->param(kEmbedding);
        Mat<S> out(dim_, int(token_ids.size()));
        for (std::size_t i = 0; i < token_ids.size(); ++i) {
            if (!drop.empty() && drop[i]) {
                out.col(int(i)) = emb.col(null_id_);
                continue;
            }
            const auto& ids = token_ids[i];
            if (ids.empty()) throw std::invalid_argument("encode_batch: empty token list");
            out.col(int(i)).setZero();
            for (int id : ids) out.col(int(i)) += emb.col(id);
            out.col(int(i)) /= S(ids.size());
        }
        return out;
    }

    void backward_batch(const std::vector<std::vector<int>>& token_ids,
                        const std::vector<char>& drop, const Mat<S>& dtext) {
        auto g = ps_->grad(kEmbedding);
        for (std::size_t i = 0; i < token_ids.size(); ++i) {
            if (!drop.empty() && drop[i]) {
                g.col(null_id_) += dtext.col(int(i));
                continue;
            }
            const auto& ids = token_ids[i];
            for (int id : ids) g.col(id) += dtext.col(int(i)) / S(ids.size());
        }
    }

private:
    ParamStore<S>* ps_;
    std::vector<std::string> vocab_;
    int dim_;
    int oov_id_ = 0, null_id_ = 0;
};

// ---------------------------------------------------------------------------
// Denoiser: small U-Net, 2 down/up stages, sinusoidal timestep embedding,
// condition injected by feature-wise affine modulation at every stage.

struct DenoiserConfig {
    int base_channels = 16;  // one of {16, 32, 64}
    int canvas_h = 32;
    int canvas_w = 32;
    int temb_dim = 64;
    int text_dim = 64;
    int cond_hidden = 128;

    void validate() const {
        if (base_channels != 16 && base_channels != 32 && base_channels != 64)
            throw std::invalid_argument("DenoiserConfig: base_channels must be 16, 32 or 64");
        if (canvas_h % 4 || canvas_w % 4)
            throw std::invalid_argument("DenoiserConfig: canvas must be divisible by 4");
        if (temb_dim % 2) throw std::invalid_argument("DenoiserConfig: temb_dim must be even");
    }
};

template <class S>
class Denoiser {
public:
    // Everything computed during forward that backward needs again.
    struct Workspace {
        Mat<S> temb_sin, temb_pre, temb;
        Mat<S> cond_in, cond_pre, cond;
        std::array<Mat<S>, 7> film;  // [scale; shift] per site
        // per conv site: im2col patches, conv output (pre-film), post-film
        // (pre-silu), post-silu activation
        std::array<Mat<S>, 8> patches;
        std::array<Tensor<S>, 8> pre;
        std::array<Tensor<S>, 7> filmout;
        std::array<Tensor<S>, 7> act;
        Tensor<S> p1, p2, u2, c2, u1, c1, out;
        // backward scratch
        Mat<S> dpatches, dss, dcond, dcond_in, dtemb_pre, dtemb_sin;
        Tensor<S> dt_a, dt_b, dt_skip1, dt_skip2;
    };

    Denoiser(ParamStore<S>& ps, const DenoiserConfig& cfg) : ps_(&ps), cfg_(cfg) {
        cfg.validate();
        const int C = cfg.base_channels;
        conv_[0] = make_conv(ps, "unet.stem", 3, C);
        conv_[1] = make_conv(ps, "unet.enc1", C, C);
        conv_[2] = make_conv(ps, "unet.enc2", C, 2 * C);
        conv_[3] = make_conv(ps, "unet.mid1", 2 * C, 2 * C);
        conv_[4] = make_conv(ps, "unet.mid2", 2 * C, 2 * C);
        conv_[5] = make_conv(ps, "unet.dec2", 4 * C, 2 * C);
        conv_[6] = make_conv(ps, "unet.dec1", 3 * C, C);
        conv_[7] = make_conv(ps, "unet.out", C, 3);
        temb_lin_ = make_linear(ps, "cond.temb", cfg.temb_dim, cfg.temb_dim);
        cond_lin_ = make_linear(ps, "cond.mlp", cfg.temb_dim + cfg.text_dim, cfg.cond_hidden);
        const int site_c[7] = {C, C, 2 * C, 2 * C, 2 * C, 2 * C, C};
        for (int k = 0; k < 7; ++k)
            film_[std::size_t(k)] =
                make_linear(ps, "cond.film" + std::to_string(k), cfg.cond_hidden, 2 * site_c[k]);
    }

    const DenoiserConfig& config() const { return cfg_; }

    // He-normal conv/dense init; modulation projections and the output conv
    // start at zero so the raw prediction is 0 and modulation is identity.
    void init_parameters(Rng& rng, TextEncoder<S>& encoder, double text_emb_std = 0.1) {
        auto he_fill = [&rng](MatMap<S> m, int fan_in) {
            const double std = std::sqrt(2.0 / double(fan_in));
            for (int c = 0; c < m.cols(); ++c)
                for (int r = 0; r < m.rows(); ++r) m(r, c) = S(rng.normal() * std);
        };
        for (int k = 0; k < 7; ++k)
            he_fill(ps_->param(conv_[std::size_t(k)].weight), conv_[std::size_t(k)].cin * 9);
        ps_->param(conv_[7].weight).setZero();  // zero-init output conv
        he_fill(ps_->param(temb_lin_.weight), temb_lin_.in);
        he_fill(ps_->param(cond_lin_.weight), cond_lin_.in);
        for (const auto& f : film_) ps_->param(f.weight).setZero();
        auto emb = ps_->param(TextEncoder<S>::kEmbedding);
        for (int c = 0; c < emb.cols(); ++c)
            for (int r = 0; r < emb.rows(); ++r) emb(r, c) = S(rng.normal() * text_emb_std);
        (void)encoder;
    }

    Mat<S> sinusoidal_embedding(const std::vector<int>& ts) const {
        const int half = cfg_.temb_dim / 2;
        Mat<S> out(cfg_.temb_dim, int(ts.size()));
        for (std::size_t i = 0; i < ts.size(); ++i)
            for (int k = 0; k < half; ++k) {
                const double freq = std::exp(-std::log(10000.0) * double(k) / double(half - 1));
                out(2 * k, int(i)) = S(std::sin(double(ts[i]) * freq));
                out(2 * k + 1, int(i)) = S(std::cos(double(ts[i]) * freq));
            }
        return out;
    }

    // Predict the noise in z_t. `text` is (text_dim x n).
    const Tensor<S>& forward(Workspace& ws, const Tensor<S>& zt, const std::vector<int>& ts,
                             const Mat<S>& text) const {
        if (int(ts.size()) != zt.n || text.cols() != zt.n)
            throw std::invalid_argument("Denoiser::forward: batch size mismatch");
        // Condition pipeline.
        ws.temb_sin = sinusoidal_embedding(ts);
        linear_forward(*ps_, temb_lin_, ws.temb_sin, ws.temb_pre);
        silu_vec_forward(ws.temb_pre, ws.temb);
        ws.cond_in.resize(cfg_.temb_dim + cfg_.text_dim, zt.n);
        ws.cond_in.topRows(cfg_.temb_dim) = ws.temb;
        ws.cond_in.bottomRows(cfg_.text_dim) = text;
        linear_forward(*ps_, cond_lin_, ws.cond_in, ws.cond_pre);
        silu_vec_forward(ws.cond_pre, ws.cond);
        for (int k = 0; k < 7; ++k)
            linear_forward(*ps_, film_[std::size_t(k)], ws.cond, ws.film[std::size_t(k)]);

        auto stage = [&](int k, const Tensor<S>& input) -> const Tensor<S>& {
            conv3x3_forward(*ps_, conv_[std::size_t(k)], input, ws.patches[std::size_t(k)],
                            ws.pre[std::size_t(k)]);
            ws.filmout[std::size_t(k)] = ws.pre[std::size_t(k)];
            film_forward(ws.filmout[std::size_t(k)], ws.film[std::size_t(k)]);
            silu_forward(ws.filmout[std::size_t(k)], ws.act[std::size_t(k)]);
            return ws.act[std::size_t(k)];
        };

        const Tensor<S>& a0 = stage(0, zt);
        const Tensor<S>& a1 = stage(1, a0);
        avgpool2_forward(a1, ws.p1);
        const Tensor<S>& a2 = stage(2, ws.p1);
        avgpool2_forward(a2, ws.p2);
        const Tensor<S>& a3 = stage(3, ws.p2);
        const Tensor<S>& a4 = stage(4, a3);
        upsample2_forward(a4, ws.u2);
        concat_channels(ws.u2, a2, ws.c2);
        const Tensor<S>& a5 = stage(5, ws.c2);
        upsample2_forward(a5, ws.u1);
        concat_channels(ws.u1, a1, ws.c1);
        stage(6, ws.c1);
        conv3x3_forward(*ps_, conv_[7], ws.act[6], ws.patches[7], ws.out);
        return ws.out;
    }

    // Accumulate parameter gradients; returns the gradient w.r.t. the text
    // condition (text_dim x n). Gradient w.r.t. the input is not needed.
    Mat<S> backward(Workspace& ws, const Tensor<S>& dout) {
        const int C = cfg_.base_channels;
        Mat<S> dcond_total;
        dcond_total.setZero(cfg_.cond_hidden, dout.n);

        auto stage_backward = [&](int k, Tensor<S>& dact, Tensor<S>& dinput) {
            // silu -> film -> conv
            silu_backward(ws.filmout[std::size_t(k)], dact, ws.dt_a);
            film_backward(ws.pre[std::size_t(k)], ws.film[std::size_t(k)], ws.dt_a, ws.dss);
            linear_backward(*ps_, film_[std::size_t(k)], ws.cond, ws.dss, ws.dcond);
            dcond_total += ws.dcond;
            conv3x3_backward(*ps_, conv_[std::size_t(k)], ws.patches[std::size_t(k)], ws.dt_a,
                             dinput, ws.dpatches);
        };

        // out conv
        Tensor<S> da6;
        conv3x3_backward(*ps_, conv_[7], ws.patches[7], dout, da6, ws.dpatches);
        // dec1
        Tensor<S> dc1;
        stage_backward(6, da6, dc1);
        split_channels(dc1, ws.dt_b, ws.dt_skip1, 2 * C, C);  // du1, skip to a1
        Tensor<S> da5;
        upsample2_backward(ws.dt_b, da5, cfg_.canvas_h / 2, cfg_.canvas_w / 2);
        // dec2
        Tensor<S> dc2;
        stage_backward(5, da5, dc2);
        split_channels(dc2, ws.dt_b, ws.dt_skip2, 2 * C, 2 * C);  // du2, skip to a2
        Tensor<S> da4;
        upsample2_backward(ws.dt_b, da4, cfg_.canvas_h / 4, cfg_.canvas_w / 4);
        // mid
        Tensor<S> da3;
        stage_backward(4, da4, da3);
        Tensor<S> dp2;
        stage_backward(3, da3, dp2);
        Tensor<S> da2;
        avgpool2_backward(dp2, da2, cfg_.canvas_h / 2, cfg_.canvas_w / 2);
        da2.m += ws.dt_skip2.m;
        // enc2
        Tensor<S> dp1;
        stage_backward(2, da2, dp1);
        Tensor<S> da1;
        avgpool2_backward(dp1, da1, cfg_.canvas_h, cfg_.canvas_w);
        da1.m += ws.dt_skip1.m;
        // enc1 + stem
        Tensor<S> da0;
        stage_backward(1, da1, da0);
        Tensor<S> dzt;
        stage_backward(0, da0, dzt);

        // Condition pipeline backward.
        silu_vec_backward(ws.cond_pre, dcond_total, ws.dcond);
        linear_backward(*ps_, cond_lin_, ws.cond_in, ws.dcond, ws.dcond_in);
        Mat<S> dtemb = ws.dcond_in.topRows(cfg_.temb_dim);
        Mat<S> dtext = ws.dcond_in.bottomRows(cfg_.text_dim);
        silu_vec_backward(ws.temb_pre, dtemb, ws.dtemb_pre);
        linear_backward(*ps_, temb_lin_, ws.temb_sin, ws.dtemb_pre, ws.dtemb_sin);
        return dtext;
    }

private:
    ParamStore<S>* ps_;
    DenoiserConfig cfg_;
    std::array<ConvPlan<S>, 8> conv_;
    LinearPlan<S> temb_lin_, cond_lin_;
    std::array<LinearPlan<S>, 7> film_;
};

// ---------------------------------------------------------------------------
// Victim model = shared parameter store + text encoder + denoiser + schedule.

template <class S>
struct VictimModel {
    DenoiserConfig dcfg;
    NoiseSchedule schedule;
    ParamStore<S> params;
    TextEncoder<S> encoder;
    Denoiser<S> denoiser;

    VictimModel(const DenoiserConfig& cfg, const NoiseSchedule& sched, std::uint64_t init_seed,
                std::vector<std::string> vocabulary = TextEncoder<S>::world_vocabulary())
        : dcfg(cfg),
          schedule(sched),
          params(),
          encoder(params, std::move(vocabulary), cfg.text_dim),
          denoiser(params, cfg) {
        Rng rng(hash_combine(init_seed, fnv1a("model_init")));
        denoiser.init_parameters(rng, encoder);
    }

    std::size_t parameter_count() const { return params.size(); }
    int image_dim() const { return 3 * dcfg.canvas_h * dcfg.canvas_w; }
};

// ---------------------------------------------------------------------------
// Frozen training configuration. The harness never lets attack-side inputs
// touch this type; see harness::AttackConfig.

struct TrainConfig {
    double learning_rate = 5e-5;  // constant
    int batch_size = 16;
    double grad_clip = 1.0;
    int epochs = 100;
    double cond_drop = 0.1;  // classifier-free guidance training
    double weight_decay = 0.01;

    static TrainConfig frozen() { return TrainConfig{}; }

    bool operator==(const TrainConfig& o) const {
        return learning_rate == o.learning_rate && batch_size == o.batch_size &&
               grad_clip == o.grad_clip && epochs == o.epochs && cond_drop == o.cond_drop &&
               weight_decay == o.weight_decay;
    }

    std::uint64_t hash() const {
        std::string s = format_double(learning_rate) + "|" + std::to_string(batch_size) + "|" +
                        format_double(grad_clip) + "|" + std::to_string(epochs) + "|" +
                        format_double(cond_drop) + "|" + format_double(weight_decay);
        return fnv1a(s);
    }
};

// ---------------------------------------------------------------------------
// Training

struct TrainItem {
    const Image* image = nullptr;
    std::vector<int> tokens;
    std::string id;
};

template <class S>
inline std::vector<TrainItem> make_train_items(const TextEncoder<S>& encoder,
                                               const std::vector<Record>& records) {
    std::vector<TrainItem> items;
    items.reserve(records.size());
    for (const auto& r : records) {
        TrainItem it;
        it.image = &r.image;
        it.tokens = encoder.match(r.caption);
        it.id = r.id;
        items.push_back(std::move(it));
    }
    return items;
}

template <class S>
struct NoiseDraws {
    std::vector<int> t;
    Mat<S> eps;  // 3 x (n * h * w), Tensor layout
    std::vector<char> drop;
};

template <class S>
NoiseDraws<S> make_noise_draws(Rng& rng, int n, int h, int w, int T, double drop_p) {
    NoiseDraws<S> d;
    d.t.resize(std::size_t(n));
    d.drop.resize(std::size_t(n));
    d.eps.resize(3, std::int64_t(n) * h * w);
    for (int i = 0; i < n; ++i) {
        d.t[std::size_t(i)] = 1 + int(rng.uniform_index(std::uint64_t(T)));
        d.drop[std::size_t(i)] = rng.bernoulli(drop_p) ? 1 : 0;
        const std::int64_t base = std::int64_t(i) * h * w;
        for (std::int64_t p = 0; p < std::int64_t(h) * w; ++p)
            for (int c = 0; c < 3; ++c) d.eps(c, base + p) = S(rng.normal());
    }
    return d;
}

template <class S>
void fill_image_batch(const std::vector<TrainItem>& items, const std::vector<std::size_t>& idx,
                      Tensor<S>& z) {
    const int h = items[idx[0]].image->h, w = items[idx[0]].image->w;
    z.n = int(idx.size());
    z.c = 3;
    z.h = h;
    z.w = w;
    if (z.m.rows() != 3 || z.m.cols() != z.pixels()) z.m.resize(3, z.pixels());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Image& img = *items[idx[i]].image;
        const std::int64_t base = std::int64_t(i) * h * w;
        for (std::int64_t p = 0; p < std::int64_t(h) * w; ++p)
            for (int c = 0; c < 3; ++c)
                z.m(c, base + p) = S(2.0) * S(img.px[std::size_t(p) * 3 + std::size_t(c)]) - S(1);
    }
}

// epsilon-prediction MSE on a batch with explicit noise draws. When
// `accumulate_grads` is set, parameter gradients are added to the store.
template <class S>
double diffusion_loss(VictimModel<S>& model, typename Denoiser<S>::Workspace& ws,
                      const std::vector<TrainItem>& items, const std::vector<std::size_t>& idx,
                      const NoiseDraws<S>& draws, bool accumulate_grads) {
    if (idx.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
    const int n = int(idx.size());
    Tensor<S> z;
    fill_image_batch(items, idx, z);
    // z_t
    Tensor<S> zt = z;
    const std::int64_t hw = std::int64_t(z.h) * z.w;
    for (int i = 0; i < n; ++i) {
        const double ab = model.schedule.alpha_bar(draws.t[std::size_t(i)]);
        zt.m.middleCols(i * hw, hw) =
            S(std::sqrt(ab)) * z.m.middleCols(i * hw, hw) +
            S(std::sqrt(1.0 - ab)) * draws.eps.middleCols(i * hw, hw);
    }
    std::vector<std::vector<int>> tokens;
    tokens.reserve(std::size_t(n));
    for (std::size_t i : idx) tokens.push_back(items[i].tokens);
    const Mat<S> text = model.encoder.encode_batch(tokens, draws.drop);
    const Tensor<S>& pred = model.denoiser.forward(ws, zt, draws.t, text);

    const double denom = double(n) * double(3) * double(hw);
    const Mat<S> resid = pred.m - draws.eps;
    const double loss = double(resid.template cast<double>().squaredNorm()) / denom;
    if (!std::isfinite(loss)) {
        std::string ids;
        for (std::size_t i : idx) ids += items[i].id + " ";
        throw std::runtime_error("diffusion_loss: non-finite loss on batch [ " + ids + "]");
    }
    if (accumulate_grads) {
        Tensor<S> dout = pred;
        dout.m = resid * S(2.0 / denom);
        const Mat<S> dtext = model.denoiser.backward(ws, dout);
        model.encoder.backward_batch(tokens, draws.drop, dtext);
    }
    return loss;
}

// Convenience: sampled-noise loss over a batch of records.
template <class S>
double loss(VictimModel<S>& model, const std::vector<Record>& batch, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("loss: empty batch");
    const auto items = make_train_items(model.encoder, batch);
    std::vector<std::size_t> idx(items.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto draws = make_noise_draws<S>(rng, int(items.size()), batch[0].image.h,
                                           batch[0].image.w, model.schedule.T, 0.0);
    typename Denoiser<S>::Workspace ws;
    return diffusion_loss(model, ws, items, idx, draws, /*accumulate_grads=*/false);
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class S>
struct Checkpoint {
    int epoch = 0;
    DenoiserConfig dcfg;
    int T = 0;
    std::vector<S> params;
    std::vector<double> adam_m, adam_v;
    std::uint64_t adam_steps = 0;
    std::string rng_state;
    double loss = 0.0;
    std::uint64_t train_config_hash = 0;
    std::uint64_t seed = 0;

    std::uint64_t optimizer_state_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](const void* p, std::size_t bytes) {
            const unsigned char* c = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < bytes; ++i) {
                h ^= c[i];
                h *= 0x100000001b3ULL;
            }
        };
        mix(adam_m.data(), adam_m.size() * sizeof(double));
        mix(adam_v.data(), adam_v.size() * sizeof(double));
        mix(&adam_steps, sizeof(adam_steps));
        return h;
    }
};

// ---------------------------------------------------------------------------
// Trainer: epoch-driven loop with checkpoint/resume. The RNG is consumed
// strictly sequentially so a restored state replays the remaining schedule
// exactly.

template <class S>
class Trainer {
public:
    Trainer(VictimModel<S>& model, std::vector<TrainItem> items, const TrainConfig& cfg,
            std::uint64_t seed)
        : model_(model),
          items_(std::move(items)),
          cfg_(cfg),
          opt_(model.params.size(), cfg.learning_rate, cfg.weight_decay),
          rng_(hash_combine(seed, fnv1a("train"))),
          seed_(seed) {
        if (items_.empty()) throw std::invalid_argument("Trainer: empty dataset");
    }

    static Trainer from_checkpoint(VictimModel<S>& model, std::vector<TrainItem> items,
                                   const TrainConfig& cfg, const Checkpoint<S>& ckpt) {
        Trainer t(model, std::move(items), cfg, ckpt.seed);
        if (ckpt.params.size() != model.params.size())
            throw std::invalid_argument("from_checkpoint: parameter count mismatch");
        model.params.data() = ckpt.params;
        t.opt_.m() = ckpt.adam_m;
        t.opt_.v() = ckpt.adam_v;
        t.opt_.set_steps(ckpt.adam_steps);
        t.rng_ = Rng::deserialize(ckpt.rng_state);
        t.epochs_done_ = ckpt.epoch;
        t.last_epoch_loss_ = ckpt.loss;
        return t;
    }

    // One optimizer step on the next batch of the current epoch order;
    // starts a fresh shuffled epoch when needed. Returns the batch loss.
    double run_step() {
        if (cursor_ >= order_.size()) {
            order_ = rng_.permutation(items_.size());
            cursor_ = 0;
        }
        const std::size_t take = std::min(std::size_t(cfg_.batch_size), order_.size() - cursor_);
        std::vector<std::size_t> idx(order_.begin() + std::ptrdiff_t(cursor_),
                                     order_.begin() + std::ptrdiff_t(cursor_ + take));
        cursor_ += take;
        const Image& first = *items_[idx[0]].image;
        const auto draws = make_noise_draws<S>(rng_, int(idx.size()), first.h, first.w,
                                               model_.schedule.T, cfg_.cond_drop);
        model_.params.zero_grad();
        const double batch_loss = diffusion_loss(model_, ws_, items_, idx, draws, true);
        const double gnorm = model_.params.grad_norm();
        if (gnorm > cfg_.grad_clip && gnorm > 0.0) model_.params.scale_grad(cfg_.grad_clip / gnorm);
        opt_.step(model_.params);
        return batch_loss;
    }

    struct EpochInfo {
        int epoch = 0;
        double mean_loss = 0.0;
    };

    EpochInfo run_epoch() {
        const std::size_t steps =
            (items_.size() + std::size_t(cfg_.batch_size) - 1) / std::size_t(cfg_.batch_size);
        double acc = 0.0;
        for (std::size_t s = 0; s < steps; ++s) acc += run_step();
        ++epochs_done_;
        EpochInfo info{epochs_done_, acc / double(steps)};
        if (first_epoch_loss_ < 0.0) first_epoch_loss_ = info.mean_loss;
        last_epoch_loss_ = info.mean_loss;
        if (info.mean_loss > 10.0 * first_epoch_loss_)
            throw std::runtime_error("training diverged at epoch " + std::to_string(info.epoch) +
                                     ": mean loss " + format_double(info.mean_loss, 6) +
                                     " exceeds 10x initial " + format_double(first_epoch_loss_, 6));
        return info;
    }

    Checkpoint<S> make_checkpoint() const {
        Checkpoint<S> c;
        c.epoch = epochs_done_;
        c.dcfg = model_.dcfg;
        c.T = model_.schedule.T;
        c.params = model_.params.data();
        c.adam_m = opt_.m();
        c.adam_v = opt_.v();
        c.adam_steps = opt_.steps();
        c.rng_state = rng_.serialize();
        c.loss = last_epoch_loss_;
        c.train_config_hash = cfg_.hash();
        c.seed = seed_;
        return c;
    }

    int epochs_done() const { return epochs_done_; }

private:
    VictimModel<S>& model_;
    std::vector<TrainItem> items_;
    TrainConfig cfg_;
    AdamW<S> opt_;
    Rng rng_;
    std::uint64_t seed_;
    typename Denoiser<S>::Workspace ws_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    int epochs_done_ = 0;
    double first_epoch_loss_ = -1.0;
    double last_epoch_loss_ = 0.0;
};

// Full training loop; invokes `on_epoch` after every epoch (checkpointing,
// FAE sampling). Returns the per-epoch mean losses.
template <class S, class Callback>
std::vector<double> train(VictimModel<S>& model, const std::vector<Record>& dataset,
                          const TrainConfig& cfg, std::uint64_t seed, Callback&& on_epoch) {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    Trainer<S> trainer(model, make_train_items(model.encoder, dataset), cfg, seed);
    std::vector<double> losses;
    for (int e = 0; e < cfg.epochs; ++e) {
        const auto info = trainer.run_epoch();
        losses.push_back(info.mean_loss);
        on_epoch(info, trainer);
    }
    return losses;
}

template <class S>
std::vector<double> train(VictimModel<S>& model, const std::vector<Record>& dataset,
                          const TrainConfig& cfg, std::uint64_t seed) {
    return train(model, dataset, cfg, seed,
                 [](const typename Trainer<S>::EpochInfo&, Trainer<S>&) {});
}

// Per-epoch checkpoint list, for callers that want the whole trajectory.
template <class S>
std::vector<Checkpoint<S>> train_collect(VictimModel<S>& model, const std::vector<Record>& dataset,
                                         const TrainConfig& cfg, std::uint64_t seed) {
    std::vector<Checkpoint<S>> ckpts;
    train<S>(model, dataset, cfg, seed,
             [&](const typename Trainer<S>::EpochInfo&, Trainer<S>& t) {
                 ckpts.push_back(t.make_checkpoint());
             });
    return ckpts;
}

// ---------------------------------------------------------------------------
// Sampling: ancestral DDPM with classifier-free guidance
// eps_hat = eps_uncond + s * (eps_cond - eps_uncond); guidance_scale == 1
// collapses to the pure conditional path (the unconditional pass is skipped).

// Samples with absolute indices [start, start+count); per-sample noise
// streams are derived from the absolute index, so chunked evaluation yields
// exactly the images a single full batch would.
template <class S>
std::vector<Image> sample_range(const VictimModel<S>& model, const std::string& prompt,
                                std::uint64_t seed, double guidance_scale, int start, int count) {
    if (guidance_scale < 1.0) throw std::invalid_argument("sample: guidance_scale must be >= 1");
    if (count < 1 || start < 0) throw std::invalid_argument("sample: count must be >= 1");
    const int h = model.dcfg.canvas_h, w = model.dcfg.canvas_w;
    const std::int64_t hw = std::int64_t(h) * w;
    const auto& sched = model.schedule;

    const std::vector<int> cond_ids = model.encoder.match(prompt);
    const std::vector<std::vector<int>> cond_tokens(std::size_t(count), cond_ids);
    const std::vector<std::vector<int>> null_tokens(std::size_t(count),
                                                    std::vector<int>{model.encoder.null_id()});
    const std::vector<char> no_drop(std::size_t(count), 0);
    const Mat<S> text_cond = model.encoder.encode_batch(cond_tokens, no_drop);
    const Mat<S> text_null = model.encoder.encode_batch(null_tokens, no_drop);

    std::vector<Rng> streams;
    Rng base(seed);
    for (int i = 0; i < count; ++i)
        streams.push_back(base.derive("sample", std::uint64_t(start + i)));

    Tensor<S> z(count, 3, h, w);
    for (int i = 0; i < count; ++i)
        for (std::int64_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c)
                z.m(c, std::int64_t(i) * hw + p) = S(streams[std::size_t(i)].normal());

    typename Denoiser<S>::Workspace ws;
    Mat<S> eps_hat(3, z.pixels());
    for (int t = sched.T; t >= 1; --t) {
        const std::vector<int> ts(std::size_t(count), t);
        const Tensor<S>& eps_c = model.denoiser.forward(ws, z, ts, text_cond);
        if (guidance_scale == 1.0) {
            eps_hat = eps_c.m;
        } else {
            eps_hat = eps_c.m;  // keep a copy; the next forward overwrites ws
            const Tensor<S>& eps_u = model.denoiser.forward(ws, z, ts, text_null);
            eps_hat = eps_u.m + S(guidance_scale) * (eps_hat - eps_u.m);
        }
        const double beta = sched.beta(t);
        const double ab = sched.alpha_bar(t);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
        const double coef = beta / std::sqrt(1.0 - ab);
        z.m = (z.m - S(coef) * eps_hat) * S(inv_sqrt_alpha);
        if (t > 1) {
            const double ab_prev = sched.alpha_bar(t - 1);
            const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
            for (int i = 0; i < count; ++i)
                for (std::int64_t p = 0; p < hw; ++p)
                    for (int c = 0; c < 3; ++c)
                        z.m(c, std::int64_t(i) * hw + p) +=
                            S(sigma) * S(streams[std::size_t(i)].normal());
        }
    }

    std::vector<Image> out;
    out.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) {
        Image img(h, w);
        for (std::int64_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c)
                img.px[std::size_t(p) * 3 + std::size_t(c)] =
                    float((double(z.m(c, std::int64_t(i) * hw + p)) + 1.0) / 2.0);
        quantize8(img);  // clip to [0,1] on the 8-bit grid
        out.push_back(std::move(img));
    }
    return out;
}

template <class S>
std::vector<Image> sample(const VictimModel<S>& model, const std::string& prompt,
                          std::uint64_t seed, double guidance_scale, int count) {
    return sample_range(model, prompt, seed, guidance_scale, 0, count);
}

// Restore a model from a checkpoint (parameters only; optimizer state lives
// in Trainer::from_checkpoint).
template <class S>
VictimModel<S> model_from_checkpoint(const Checkpoint<S>& ckpt,
                                     std::vector<std::string> vocabulary =
                                         TextEncoder<S>::world_vocabulary()) {
    VictimModel<S> m(ckpt.dcfg, NoiseSchedule::linear(ckpt.T), /*init_seed=*/0,
                     std::move(vocabulary));
    if (ckpt.params.size() != m.params.size())
        throw std::invalid_argument("model_from_checkpoint: parameter count mismatch");
    m.params.data() = ckpt.params;
    return m;
}

// ---------------------------------------------------------------------------
// Gradient check: analytic gradients vs central finite differences on a
// probe subset spread over every parameter group, in the scalar type of the
// model (use double).

struct GradCheckGroup {
    std::string name;
    double max_rel_error = 0.0;
    int probes = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<GradCheckGroup> groups;
};

template <class S>
GradCheckReport grad_check(VictimModel<S>& model, const std::vector<Record>& batch,
                           std::uint64_t seed, int probes_per_group = 3, double h = 1e-5) {
    static_assert(std::is_same_v<S, double>, "grad_check requires the double-precision model");
    if (batch.empty()) throw std::invalid_argument("grad_check: empty batch");
    const auto items = make_train_items(model.encoder, batch);
    std::vector<std::size_t> idx(items.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    const auto draws = make_noise_draws<S>(rng, int(items.size()), batch[0].image.h,
                                           batch[0].image.w, model.schedule.T, 0.0);
    typename Denoiser<S>::Workspace ws;

    model.params.zero_grad();
    diffusion_loss(model, ws, items, idx, draws, true);
    const std::vector<S> analytic = model.params.grad();

    auto loss_at = [&]() {
        return diffusion_loss(model, ws, items, idx, draws, false);
    };

    GradCheckReport report;
    for (const auto& entry : model.params.entries()) {
        GradCheckGroup group;
        group.name = entry.name;
        const std::size_t count = std::size_t(entry.rows) * std::size_t(entry.cols);
        const int probes = std::min<int>(probes_per_group, int(count));
        for (int p = 0; p < probes; ++p) {
            const std::size_t local = count <= 1 ? 0 : (std::size_t(p) * (count - 1)) / std::size_t(std::max(1, probes - 1));
            const std::size_t gi = entry.offset + local;
            const S saved = model.params.data()[gi];
            model.params.data()[gi] = saved + S(h);
            const double up = loss_at();
            model.params.data()[gi] = saved - S(h);
            const double down = loss_at();
            model.params.data()[gi] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double g = double(analytic[gi]);
            const double denom = std::max(std::abs(g) + std::abs(fd), 1e-8);
            const double rel = std::abs(g - fd) / denom;
            group.max_rel_error = std::max(group.max_rel_error, rel);
            ++group.probes;
        }
        report.max_rel_error = std::max(report.max_rel_error, group.max_rel_error);
        report.groups.push_back(group);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoint binary I/O (native-endian blob + JSON-ready metadata accessors).

template <class S>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<S>& c) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    const char magic[8] = {'P', 'L', 'C', 'K', '0', '0', '0', '1'};
    out.write(magic, 8);
    auto w32 = [&out](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64 = [&out](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    auto wf64 = [&out](double v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    w32(std::uint32_t(sizeof(S)));
    w32(std::uint32_t(c.epoch));
    w32(std::uint32_t(c.T));
    w32(std::uint32_t(c.dcfg.base_channels));
    w32(std::uint32_t(c.dcfg.canvas_h));
    w32(std::uint32_t(c.dcfg.canvas_w));
    w32(std::uint32_t(c.dcfg.temb_dim));
    w32(std::uint32_t(c.dcfg.text_dim));
    w32(std::uint32_t(c.dcfg.cond_hidden));
    w64(c.adam_steps);
    wf64(c.loss);
    w64(c.train_config_hash);
    w64(c.seed);
    w64(std::uint64_t(c.params.size()));
    out.write(reinterpret_cast<const char*>(c.params.data()),
              std::streamsize(c.params.size() * sizeof(S)));
    w64(std::uint64_t(c.adam_m.size()));
    out.write(reinterpret_cast<const char*>(c.adam_m.data()),
              std::streamsize(c.adam_m.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(c.adam_v.data()),
              std::streamsize(c.adam_v.size() * sizeof(double)));
    w64(std::uint64_t(c.rng_state.size()));
    out.write(c.rng_state.data(), std::streamsize(c.rng_state.size()));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "PLCK0001", 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
    auto r32 = [&in]() {
        std::uint32_t v;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto r64 = [&in]() {
        std::uint64_t v;
        in.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    auto rf64 = [&in]() {
        double v;
        in.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    if (r32() != sizeof(S)) throw std::runtime_error("load_checkpoint: scalar width mismatch");
    Checkpoint<S> c;
    c.epoch = int(r32());
    c.T = int(r32());
    c.dcfg.base_channels = int(r32());
    c.dcfg.canvas_h = int(r32());
    c.dcfg.canvas_w = int(r32());
    c.dcfg.temb_dim = int(r32());
    c.dcfg.text_dim = int(r32());
    c.dcfg.cond_hidden = int(r32());
    c.adam_steps = r64();
    c.loss = rf64();
    c.train_config_hash = r64();
    c.seed = r64();
    c.params.resize(r64());
    in.read(reinterpret_cast<char*>(c.params.data()), std::streamsize(c.params.size() * sizeof(S)));
    const std::uint64_t adam_n = r64();
    c.adam_m.resize(adam_n);
    c.adam_v.resize(adam_n);
    in.read(reinterpret_cast<char*>(c.adam_m.data()), std::streamsize(adam_n * sizeof(double)));
    in.read(reinterpret_cast<char*>(c.adam_v.data()), std::streamsize(adam_n * sizeof(double)));
    c.rng_state.resize(r64());
    in.read(c.rng_state.data(), std::streamsize(c.rng_state.size()));
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path.string());
    return c;
}

}  // namespace poisonlab
