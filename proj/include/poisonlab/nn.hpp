#pragma once

// Minimal NN plumbing for the toy denoiser: flat parameter store with named
// entries, batched NCHW tensors backed by Eigen matrices, and explicit
// forward/backward kernels (3x3 conv via im2col + GEMM, 2x2 average pooling,
// nearest upsampling, SiLU, channel concat, per-channel affine modulation).
// Scalar type is a template parameter; float for training runs, double for
// finite-difference gradient checks.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonlab/common.hpp"

namespace poisonlab {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <class S>
using MatMap = Eigen::Map<Mat<S>>;

template <class S>
using ConstMatMap = Eigen::Map<const Mat<S>>;

// ---------------------------------------------------------------------------
// Parameter store: one flat buffer for parameters and one for gradients, with
// named (rows x cols) entries mapped onto it. Registration order is fixed and
// defines the serialization layout.

template <class S>
class ParamStore {
public:
    struct Entry {
        std::string name;
        std::size_t offset = 0;
        int rows = 0;
        int cols = 0;
        bool weight_decay = true;
    };

    std::size_t add(const std::string& name, int rows, int cols, bool weight_decay = true) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter entry: " + name);
        Entry e;
        e.name = name;
        e.offset = data_.size();
        e.rows = rows;
        e.cols = cols;
        e.weight_decay = weight_decay;
        index_[name] = entries_.size();
        entries_.push_back(e);
        data_.resize(data_.size() + std::size_t(rows) * cols, S(0));
        grad_.resize(data_.size(), S(0));
        return entries_.size() - 1;
    }

    MatMap<S> param(const std::string& name) {
        const Entry& e = entry(name);
        return MatMap<S>(data_.data() + e.offset, e.rows, e.cols);
    }
    ConstMatMap<S> param(const std::string& name) const {
        const Entry& e = entry(name);
        return ConstMatMap<S>(data_.data() + e.offset, e.rows, e.cols);
    }
    MatMap<S> grad(const std::string& name) {
        const Entry& e = entry(name);
        return MatMap<S>(grad_.data() + e.offset, e.rows, e.cols);
    }

    const Entry& entry(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::logic_error("unknown parameter entry: " + name);
        return entries_[it->second];
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<S>& data() { return data_; }
    const std::vector<S>& data() const { return data_; }
    std::vector<S>& grad() { return grad_; }
    std::size_t size() const { return data_.size(); }

    void zero_grad() { std::fill(grad_.begin(), grad_.end(), S(0)); }

    double grad_norm() const {
        double acc = 0.0;
        for (S g : grad_) acc += double(g) * double(g);
        return std::sqrt(acc);
    }

    void scale_grad(double f) {
        for (S& g : grad_) g = S(double(g) * f);
    }

private:
    std::vector<S> data_, grad_;
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Batched NCHW tensor. Matrix layout: rows = channels, one column per pixel,
// column index = sample * (h*w) + y * w + x.

template <class S>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    Mat<S> m;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
        m.setZero(c_, std::int64_t(n_) * h_ * w_);
    }

    std::int64_t pixels() const { return std::int64_t(n) * h * w; }
    void zero() { m.setZero(); }
};

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1.

template <class S>
struct ConvPlan {
    int cin = 0, cout = 0;
    std::string weight, bias;
};

template <class S>
ConvPlan<S> make_conv(ParamStore<S>& ps, const std::string& name, int cin, int cout) {
    ConvPlan<S> plan;
    plan.cin = cin;
    plan.cout = cout;
    plan.weight = name + ".w";
    plan.bias = name + ".b";
    ps.add(plan.weight, cout, cin * 9);
    ps.add(plan.bias, cout, 1, /*weight_decay=*/false);
    return plan;
}

// Gather 3x3 patches: rows [o*cin, (o+1)*cin) hold the input shifted by
// offset o = (dy+1)*3 + (dx+1); out-of-canvas taps stay zero.
template <class S>
void im2col3x3(const Tensor<S>& x, Mat<S>& patches) {
    const int cin = x.c, h = x.h, w = x.w;
    patches.setZero(cin * 9, x.pixels());
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            const int o = (dy + 1) * 3 + (dx + 1);
            const int ylo = std::max(0, -dy), yhi = h - 1 - std::max(0, dy);
            const int xlo = std::max(0, -dx);
            const int len = w - std::abs(dx);
            if (len <= 0) continue;
            for (int i = 0; i < x.n; ++i) {
                const std::int64_t base = std::int64_t(i) * h * w;
                for (int y = ylo; y <= yhi; ++y) {
                    const std::int64_t dst = base + std::int64_t(y) * w + xlo;
                    const std::int64_t src = base + std::int64_t(y + dy) * w + (xlo + dx);
                    patches.block(o * cin, dst, cin, len) = x.m.block(0, src, cin, len);
                }
            }
        }
}

// Scatter-add the transpose of im2col into an input-shaped tensor.
template <class S>
void col2im3x3(const Mat<S>& patches, Tensor<S>& dx) {
    const int cin = dx.c, h = dx.h, w = dx.w;
    dx.zero();
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx_ = -1; dx_ <= 1; ++dx_) {
            const int o = (dy + 1) * 3 + (dx_ + 1);
            const int ylo = std::max(0, -dy), yhi = h - 1 - std::max(0, dy);
            const int xlo = std::max(0, -dx_);
            const int len = w - std::abs(dx_);
            if (len <= 0) continue;
            for (int i = 0; i < dx.n; ++i) {
                const std::int64_t base = std::int64_t(i) * h * w;
                for (int y = ylo; y <= yhi; ++y) {
                    const std::int64_t dst = base + std::int64_t(y) * w + xlo;
                    const std::int64_t src = base + std::int64_t(y + dy) * w + (xlo + dx_);
                    dx.m.block(0, src, cin, len) += patches.block(o * cin, dst, cin, len);
                }
            }
        }
}

template <class S>
void conv3x3_forward(const ParamStore<S>& ps, const ConvPlan<S>& plan, const Tensor<S>& x,
                     Mat<S>& patches, Tensor<S>& y) {
    im2col3x3(x, patches);
    y.n = x.n;
    y.c = plan.cout;
    y.h = x.h;
    y.w = x.w;
    y.m.noalias() = ps.param(plan.weight) * patches;
    y.m.colwise() += ps.param(plan.bias).col(0);
}

// `patches` must be the buffer produced by the matching forward call.
template <class S>
void conv3x3_backward(ParamStore<S>& ps, const ConvPlan<S>& plan, const Mat<S>& patches,
                      const Tensor<S>& dy, Tensor<S>& dx, Mat<S>& dpatches) {
    ps.grad(plan.weight).noalias() += dy.m * patches.transpose();
    ps.grad(plan.bias).col(0) += dy.m.rowwise().sum();
    dpatches.noalias() = ps.param(plan.weight).transpose() * dy.m;
    dx.n = dy.n;
    dx.c = plan.cin;
    dx.h = dy.h;
    dx.w = dy.w;
    if (dx.m.rows() != plan.cin || dx.m.cols() != dy.pixels()) dx.m.resize(plan.cin, dy.pixels());
    col2im3x3(dpatches, dx);
}

// ---------------------------------------------------------------------------
// 2x2 average pooling and nearest-neighbor 2x upsampling.

template <class S>
void avgpool2_forward(const Tensor<S>& x, Tensor<S>& y) {
    if (x.h % 2 || x.w % 2) throw std::invalid_argument("avgpool2: odd spatial size");
    y.n = x.n;
    y.c = x.c;
    y.h = x.h / 2;
    y.w = x.w / 2;
    if (y.m.rows() != y.c || y.m.cols() != y.pixels()) y.m.resize(y.c, y.pixels());
    for (int i = 0; i < x.n; ++i) {
        const std::int64_t ibase = std::int64_t(i) * x.h * x.w;
        const std::int64_t obase = std::int64_t(i) * y.h * y.w;
        for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx) {
                const std::int64_t p = ibase + std::int64_t(2 * yy) * x.w + 2 * xx;
                y.m.col(obase + std::int64_t(yy) * y.w + xx) =
                    (x.m.col(p) + x.m.col(p + 1) + x.m.col(p + x.w) + x.m.col(p + x.w + 1)) * S(0.25);
            }
    }
}

template <class S>
void avgpool2_backward(const Tensor<S>& dy, Tensor<S>& dx, int in_h, int in_w) {
    dx.n = dy.n;
    dx.c = dy.c;
    dx.h = in_h;
    dx.w = in_w;
    if (dx.m.rows() != dx.c || dx.m.cols() != dx.pixels()) dx.m.resize(dx.c, dx.pixels());
    for (int i = 0; i < dy.n; ++i) {
        const std::int64_t obase = std::int64_t(i) * dy.h * dy.w;
        const std::int64_t ibase = std::int64_t(i) * in_h * in_w;
        for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx) {
                const auto g = dy.m.col(obase + std::int64_t(yy) * dy.w + xx) * S(0.25);
                const std::int64_t p = ibase + std::int64_t(2 * yy) * in_w + 2 * xx;
                dx.m.col(p) = g;
                dx.m.col(p + 1) = g;
                dx.m.col(p + in_w) = g;
                dx.m.col(p + in_w + 1) = g;
            }
    }
}

template <class S>
void upsample2_forward(const Tensor<S>& x, Tensor<S>& y) {
    y.n = x.n;
    y.c = x.c;
    y.h = x.h * 2;
    y.w = x.w * 2;
    if (y.m.rows() != y.c || y.m.cols() != y.pixels()) y.m.resize(y.c, y.pixels());
    for (int i = 0; i < x.n; ++i) {
        const std::int64_t ibase = std::int64_t(i) * x.h * x.w;
        const std::int64_t obase = std::int64_t(i) * y.h * y.w;
        for (int yy = 0; yy < x.h; ++yy)
            for (int xx = 0; xx < x.w; ++xx) {
                const auto v = x.m.col(ibase + std::int64_t(yy) * x.w + xx);
                const std::int64_t p = obase + std::int64_t(2 * yy) * y.w + 2 * xx;
                y.m.col(p) = v;
                y.m.col(p + 1) = v;
                y.m.col(p + y.w) = v;
                y.m.col(p + y.w + 1) = v;
            }
    }
}

template <class S>
void upsample2_backward(const Tensor<S>& dy, Tensor<S>& dx, int in_h, int in_w) {
    dx.n = dy.n;
    dx.c = dy.c;
    dx.h = in_h;
    dx.w = in_w;
    if (dx.m.rows() != dx.c || dx.m.cols() != dx.pixels()) dx.m.resize(dx.c, dx.pixels());
    for (int i = 0; i < dy.n; ++i) {
        const std::int64_t obase = std::int64_t(i) * dy.h * dy.w;
        const std::int64_t ibase = std::int64_t(i) * in_h * in_w;
        for (int yy = 0; yy < in_h; ++yy)
            for (int xx = 0; xx < in_w; ++xx) {
                const std::int64_t p = obase + std::int64_t(2 * yy) * dy.w + 2 * xx;
                dx.m.col(ibase + std::int64_t(yy) * in_w + xx) =
                    dy.m.col(p) + dy.m.col(p + 1) + dy.m.col(p + dy.w) + dy.m.col(p + dy.w + 1);
            }
    }
}

// ---------------------------------------------------------------------------
// Channel concat / split (for U-Net skip connections).

template <class S>
void concat_channels(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& y) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw std::invalid_argument("concat_channels: shape mismatch");
    y.n = a.n;
    y.c = a.c + b.c;
    y.h = a.h;
    y.w = a.w;
    if (y.m.rows() != y.c || y.m.cols() != y.pixels()) y.m.resize(y.c, y.pixels());
    y.m.topRows(a.c) = a.m;
    y.m.bottomRows(b.c) = b.m;
}

template <class S>
void split_channels(const Tensor<S>& dy, Tensor<S>& da, Tensor<S>& db, int ca, int cb) {
    da.n = dy.n;
    da.c = ca;
    da.h = dy.h;
    da.w = dy.w;
    db.n = dy.n;
    db.c = cb;
    db.h = dy.h;
    db.w = dy.w;
    da.m = dy.m.topRows(ca);
    db.m = dy.m.bottomRows(cb);
}

// ---------------------------------------------------------------------------
// SiLU

template <class S>
void silu_forward(const Tensor<S>& x, Tensor<S>& y) {
    y.n = x.n;
    y.c = x.c;
    y.h = x.h;
    y.w = x.w;
    y.m = x.m.array() / (S(1) + (-x.m.array()).exp());
}

// `x` is the pre-activation that produced the forward output.
template <class S>
void silu_backward(const Tensor<S>& x, const Tensor<S>& dy, Tensor<S>& dx) {
    dx.n = x.n;
    dx.c = x.c;
    dx.h = x.h;
    dx.w = x.w;
    auto sig = (S(1) / (S(1) + (-x.m.array()).exp())).eval();
    dx.m = dy.m.array() * sig * (S(1) + x.m.array() * (S(1) - sig));
}

template <class S>
void silu_vec_forward(const Mat<S>& x, Mat<S>& y) {
    y = x.array() / (S(1) + (-x.array()).exp());
}

template <class S>
void silu_vec_backward(const Mat<S>& x, const Mat<S>& dy, Mat<S>& dx) {
    auto sig = (S(1) / (S(1) + (-x.array()).exp())).eval();
    dx = dy.array() * sig * (S(1) + x.array() * (S(1) - sig));
}

// ---------------------------------------------------------------------------
// Feature-wise affine modulation: h <- h * (1 + scale) + shift, with
// per-sample per-channel (scale, shift) rows stacked as [scale; shift].

template <class S>
void film_forward(Tensor<S>& h, const Mat<S>& scale_shift) {
    const int c = h.c;
    const std::int64_t hw = std::int64_t(h.h) * h.w;
    for (int i = 0; i < h.n; ++i) {
        auto block = h.m.middleCols(i * hw, hw);
        block.array().colwise() *= (S(1) + scale_shift.col(i).head(c).array());
        block.colwise() += scale_shift.col(i).tail(c);
    }
}

// `pre` is the activation before modulation; returns gradient w.r.t.
// [scale; shift] in dss and rewrites dh in place to the input gradient.
template <class S>
void film_backward(const Tensor<S>& pre, const Mat<S>& scale_shift, Tensor<S>& dh, Mat<S>& dss) {
    const int c = pre.c;
    const std::int64_t hw = std::int64_t(pre.h) * pre.w;
    dss.setZero(2 * c, pre.n);
    for (int i = 0; i < pre.n; ++i) {
        auto dblock = dh.m.middleCols(i * hw, hw);
        const auto pblock = pre.m.middleCols(i * hw, hw);
        dss.col(i).head(c) = (dblock.array() * pblock.array()).rowwise().sum();
        dss.col(i).tail(c) = dblock.rowwise().sum();
        dblock.array().colwise() *= (S(1) + scale_shift.col(i).head(c).array());
    }
}

// ---------------------------------------------------------------------------
// Dense layer on (dim x batch) matrices.

template <class S>
struct LinearPlan {
    int in = 0, out = 0;
    std::string weight, bias;
};

template <class S>
LinearPlan<S> make_linear(ParamStore<S>& ps, const std::string& name, int in, int out) {
    LinearPlan<S> plan;
    plan.in = in;
    plan.out = out;
    plan.weight = name + ".w";
    plan.bias = name + ".b";
    ps.add(plan.weight, out, in);
    ps.add(plan.bias, out, 1, /*weight_decay=*/false);
    return plan;
}

template <class S>
void linear_forward(const ParamStore<S>& ps, const LinearPlan<S>& plan, const Mat<S>& x, Mat<S>& y) {
    y.noalias() = ps.param(plan.weight) * x;
    y.colwise() += ps.param(plan.bias).col(0);
}

template <class S>
void linear_backward(ParamStore<S>& ps, const LinearPlan<S>& plan, const Mat<S>& x,
                     const Mat<S>& dy, Mat<S>& dx) {
    ps.grad(plan.weight).noalias() += dy * x.transpose();
    ps.grad(plan.bias).col(0) += dy.rowwise().sum();
    dx.noalias() = ps.param(plan.weight).transpose() * dy;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay; biases and embeddings are registered
// without decay.

template <class S>
class AdamW {
public:
    AdamW(std::size_t size, double lr, double weight_decay)
        : lr_(lr), wd_(weight_decay), m_(size, 0.0), v_(size, 0.0) {}

    void step(ParamStore<S>& ps) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        auto& data = ps.data();
        auto& grad = ps.grad();
        std::vector<char> decay(data.size(), 1);
        for (const auto& e : ps.entries())
            if (!e.weight_decay)
                std::fill(decay.begin() + std::ptrdiff_t(e.offset),
                          decay.begin() + std::ptrdiff_t(e.offset + std::size_t(e.rows) * e.cols),
                          char(0));
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = double(grad[i]);
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            double p = double(data[i]);
            p -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + (decay[i] ? wd_ * p : 0.0));
            data[i] = S(p);
        }
    }

    std::uint64_t steps() const { return t_; }
    std::vector<double>& m() { return m_; }
    std::vector<double>& v() { return v_; }
    const std::vector<double>& m() const { return m_; }
    const std::vector<double>& v() const { return v_; }
    void set_steps(std::uint64_t t) { t_ = t; }

private:
    double lr_;
    double wd_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::uint64_t t_ = 0;
    std::vector<double> m_, v_;
};

}  // namespace poisonlab
