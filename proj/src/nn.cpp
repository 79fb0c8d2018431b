#include "vdet/nn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vdet::nn {

class Op {
 public:
  virtual ~Op() = default;
  virtual Shape out_shape(const std::vector<const Tensor*>& in) const = 0;
  virtual void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode mode,
                       int bn_group) = 0;
  /// Accumulates into every non-null `din[i]`.
  virtual void backward(const std::vector<const Tensor*>& in, const Tensor& out,
                        const Tensor& dout, const std::vector<Tensor*>& din) = 0;
  virtual void collect_params(std::vector<Param*>&) {}
  virtual void collect_buffers(std::vector<Buffer*>&) {}
  virtual void init(std::mt19937_64&) {}
};

namespace {

// im2col for a square kernel with symmetric padding.
void im2col(const float* src, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            float* col) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * oh * ow;
        const float* plane = src + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          const float* line = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int x0 = kx - pad;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox + x0;
              dst[ox] = (ix >= 0 && ix < w) ? line[ix] : 0.0f;
            }
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < w) ? line[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im(const float* col, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            float* dst) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * oh * ow;
        float* plane = dst + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          float* line = plane + static_cast<std::size_t>(iy) * w;
          const float* src = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

class Conv2d final : public Op {
 public:
  Conv2d(int in_c, int out_c, int k, int stride, bool bias, const std::string& name)
      : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(k / 2) {
    const std::size_t n = static_cast<std::size_t>(out_c) * in_c * k * k;
    weight_ = {name + ".weight", {out_c, in_c, k, k}, std::vector<float>(n), std::vector<float>(n),
               true};
    if (bias) {
      bias_ = Param{name + ".bias", {out_c}, std::vector<float>(out_c),
                    std::vector<float>(out_c), false};
      has_bias_ = true;
    }
  }

  Shape out_shape(const std::vector<const Tensor*>& in) const override {
    const Shape& s = in[0]->shape();
    return {s.n, out_c_, (s.h + 2 * pad_ - k_) / stride_ + 1, (s.w + 2 * pad_ - k_) / stride_ + 1};
  }

  bool pointwise() const { return k_ == 1 && stride_ == 1; }

  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode, int) override {
    const Tensor& x = *in[0];
    const Shape& s = x.shape();
    const Shape& o = out.shape();
    const int kk = in_c_ * k_ * k_;
    const int p = o.h * o.w;
    if (!pointwise()) col_.resize(static_cast<std::size_t>(kk) * p);
    for (int n = 0; n < s.n; ++n) {
      const float* col = x.sample(n);
      if (!pointwise()) {
        im2col(x.sample(n), in_c_, s.h, s.w, k_, stride_, pad_, o.h, o.w, col_.data());
        col = col_.data();
      }
      float* y = out.sample(n);
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, out_c_, p, kk, 1.0f,
                  weight_.value.data(), kk, col, p, 0.0f, y, p);
      if (has_bias_) {
        for (int c = 0; c < out_c_; ++c) {
          const float b = bias_.value[c];
          float* plane = y + static_cast<std::size_t>(c) * p;
          for (int i = 0; i < p; ++i) plane[i] += b;
        }
      }
    }
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    const Tensor& x = *in[0];
    const Shape& s = x.shape();
    const Shape& o = dout.shape();
    const int kk = in_c_ * k_ * k_;
    const int p = o.h * o.w;
    if (!pointwise()) col_.resize(static_cast<std::size_t>(kk) * p);
    std::vector<float> dcol;
    if (din[0] && !pointwise()) dcol.resize(static_cast<std::size_t>(kk) * p);
    for (int n = 0; n < s.n; ++n) {
      const float* col = x.sample(n);
      if (!pointwise()) {
        im2col(x.sample(n), in_c_, s.h, s.w, k_, stride_, pad_, o.h, o.w, col_.data());
        col = col_.data();
      }
      const float* dy = dout.sample(n);
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, out_c_, kk, p, 1.0f, dy, p, col, p,
                  1.0f, weight_.grad.data(), kk);
      if (has_bias_) {
        for (int c = 0; c < out_c_; ++c) {
          const float* plane = dy + static_cast<std::size_t>(c) * p;
          double acc = 0.0;
          for (int i = 0; i < p; ++i) acc += plane[i];
          bias_.grad[c] += static_cast<float>(acc);
        }
      }
      if (din[0]) {
        if (pointwise()) {
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kk, p, out_c_, 1.0f,
                      weight_.value.data(), kk, dy, p, 1.0f, din[0]->sample(n), p);
        } else {
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kk, p, out_c_, 1.0f,
                      weight_.value.data(), kk, dy, p, 0.0f, dcol.data(), p);
          col2im(dcol.data(), in_c_, s.h, s.w, k_, stride_, pad_, o.h, o.w, din[0]->sample(n));
        }
      }
    }
  }

  void collect_params(std::vector<Param*>& out) override {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  void init(std::mt19937_64& rng) override {
    // He-normal over fan-in, matched to the ReLU that follows every hidden conv.
    const double fan_in = static_cast<double>(in_c_) * k_ * k_;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (float& v : weight_.value) v = static_cast<float>(dist(rng));
    std::fill(bias_.value.begin(), bias_.value.end(), 0.0f);
  }

 private:
  int in_c_, out_c_, k_, stride_, pad_;
  Param weight_;
  Param bias_;
  bool has_bias_ = false;
  std::vector<float> col_;
};

class BatchNorm2d final : public Op {
 public:
  static constexpr float kEps = 1e-3f;
  static constexpr float kMomentum = 0.03f;

  BatchNorm2d(int channels, const std::string& name) : c_(channels) {
    gamma_ = {name + ".gamma", {channels}, std::vector<float>(channels, 1.0f),
              std::vector<float>(channels), false};
    beta_ = {name + ".beta", {channels}, std::vector<float>(channels, 0.0f),
             std::vector<float>(channels), false};
    mean_ = {name + ".running_mean", {channels}, std::vector<float>(channels, 0.0f)};
    var_ = {name + ".running_var", {channels}, std::vector<float>(channels, 1.0f)};
  }

  Shape out_shape(const std::vector<const Tensor*>& in) const override { return in[0]->shape(); }

  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode mode,
               int bn_group) override {
    const Tensor& x = *in[0];
    const Shape& s = x.shape();
    const std::size_t plane = s.plane();
    if (mode == Mode::kEval) {
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < c_; ++c) {
          const float scale = gamma_.value[c] / std::sqrt(var_.value[c] + kEps);
          const float shift = beta_.value[c] - mean_.value[c] * scale;
          const float* src = x.sample(n) + c * plane;
          float* dst = out.sample(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * scale + shift;
        }
      }
      return;
    }

    group_ = std::max(1, bn_group);
    const int groups = (s.n + group_ - 1) / group_;
    xhat_.reset(s);
    inv_std_.assign(static_cast<std::size_t>(groups) * c_, 0.0f);
    for (int g = 0; g < groups; ++g) {
      const int n0 = g * group_;
      const int n1 = std::min(s.n, n0 + group_);
      const double count = static_cast<double>(n1 - n0) * plane;
      for (int c = 0; c < c_; ++c) {
        double sum = 0.0;
        for (int n = n0; n < n1; ++n) {
          const float* src = x.sample(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) sum += src[i];
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (int n = n0; n < n1; ++n) {
          const float* src = x.sample(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double d = src[i] - mean;
            sq += d * d;
          }
        }
        const double var = sq / count;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + kEps));
        inv_std_[static_cast<std::size_t>(g) * c_ + c] = inv;
        const float gm = gamma_.value[c];
        const float bt = beta_.value[c];
        const float fmean = static_cast<float>(mean);
        for (int n = n0; n < n1; ++n) {
          const float* src = x.sample(n) + c * plane;
          float* xh = xhat_.sample(n) + c * plane;
          float* dst = out.sample(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            xh[i] = (src[i] - fmean) * inv;
            dst[i] = gm * xh[i] + bt;
          }
        }
        const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
        mean_.value[c] = (1.0f - kMomentum) * mean_.value[c] + kMomentum * static_cast<float>(mean);
        var_.value[c] =
            (1.0f - kMomentum) * var_.value[c] + kMomentum * static_cast<float>(unbiased);
      }
    }
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    const Shape& s = in[0]->shape();
    const std::size_t plane = s.plane();
    const int groups = (s.n + group_ - 1) / group_;
    for (int g = 0; g < groups; ++g) {
      const int n0 = g * group_;
      const int n1 = std::min(s.n, n0 + group_);
      const double count = static_cast<double>(n1 - n0) * plane;
      for (int c = 0; c < c_; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (int n = n0; n < n1; ++n) {
          const float* dy = dout.sample(n) + c * plane;
          const float* xh = xhat_.sample(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
          }
        }
        gamma_.grad[c] += static_cast<float>(sum_dy_xhat);
        beta_.grad[c] += static_cast<float>(sum_dy);
        if (!din[0]) continue;
        const float inv = inv_std_[static_cast<std::size_t>(g) * c_ + c];
        const float scale = gamma_.value[c] * inv;
        const float mean_dy = static_cast<float>(sum_dy / count);
        const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / count);
        for (int n = n0; n < n1; ++n) {
          const float* dy = dout.sample(n) + c * plane;
          const float* xh = xhat_.sample(n) + c * plane;
          float* dx = din[0]->sample(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i)
            dx[i] += scale * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
        }
      }
    }
  }

  void collect_params(std::vector<Param*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<Buffer*>& out) override {
    out.push_back(&mean_);
    out.push_back(&var_);
  }
  void init(std::mt19937_64&) override {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
    std::fill(beta_.value.begin(), beta_.value.end(), 0.0f);
    std::fill(mean_.value.begin(), mean_.value.end(), 0.0f);
    std::fill(var_.value.begin(), var_.value.end(), 1.0f);
  }

 private:
  int c_;
  int group_ = 1;
  Param gamma_, beta_;
  Buffer mean_, var_;
  Tensor xhat_;
  std::vector<float> inv_std_;
};

class Relu final : public Op {
 public:
  Shape out_shape(const std::vector<const Tensor*>& in) const override { return in[0]->shape(); }
  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode, int) override {
    const float* x = in[0]->data();
    float* y = out.data();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor& out, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    if (!din[0]) return;
    const float* y = out.data();
    const float* dy = dout.data();
    float* dx = din[0]->data();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i)
      if (y[i] > 0.0f) dx[i] += dy[i];
  }
};

class MaxPool2d final : public Op {
 public:
  MaxPool2d(int k, int stride, int pad) : k_(k), stride_(stride), pad_(pad) {}

  Shape out_shape(const std::vector<const Tensor*>& in) const override {
    const Shape& s = in[0]->shape();
    return {s.n, s.c, (s.h + 2 * pad_ - k_) / stride_ + 1, (s.w + 2 * pad_ - k_) / stride_ + 1};
  }

  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode mode, int) override {
    const Tensor& x = *in[0];
    const Shape& s = x.shape();
    const Shape& o = out.shape();
    const bool keep = mode == Mode::kTrain;
    if (keep) argmax_.assign(out.numel(), 0);
    std::size_t idx = 0;
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const float* plane = x.sample(n) + static_cast<std::size_t>(c) * s.plane();
        float* dst = out.sample(n) + static_cast<std::size_t>(c) * o.plane();
        for (int oy = 0; oy < o.h; ++oy) {
          const int y0 = std::max(0, oy * stride_ - pad_);
          const int y1 = std::min(s.h, oy * stride_ - pad_ + k_);
          for (int ox = 0; ox < o.w; ++ox, ++idx) {
            const int x0 = std::max(0, ox * stride_ - pad_);
            const int x1 = std::min(s.w, ox * stride_ - pad_ + k_);
            float best = -std::numeric_limits<float>::infinity();
            int best_i = y0 * s.w + x0;
            for (int iy = y0; iy < y1; ++iy) {
              for (int ix = x0; ix < x1; ++ix) {
                const float v = plane[iy * s.w + ix];
                if (v > best) {
                  best = v;
                  best_i = iy * s.w + ix;
                }
              }
            }
            dst[oy * o.w + ox] = best;
            if (keep) argmax_[idx] = best_i;
          }
        }
      }
    }
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    if (!din[0]) return;
    const Shape& s = in[0]->shape();
    const Shape& o = dout.shape();
    std::size_t idx = 0;
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        float* plane = din[0]->sample(n) + static_cast<std::size_t>(c) * s.plane();
        const float* dy = dout.sample(n) + static_cast<std::size_t>(c) * o.plane();
        for (std::size_t i = 0; i < o.plane(); ++i, ++idx) plane[argmax_[idx]] += dy[i];
      }
    }
  }

 private:
  int k_, stride_, pad_;
  std::vector<int> argmax_;
};

class Upsample final : public Op {
 public:
  explicit Upsample(int factor) : f_(factor) {}
  Shape out_shape(const std::vector<const Tensor*>& in) const override {
    const Shape& s = in[0]->shape();
    return {s.n, s.c, s.h * f_, s.w * f_};
  }
  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode, int) override {
    const Shape& s = in[0]->shape();
    const Shape& o = out.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const float* src = in[0]->sample(n) + static_cast<std::size_t>(c) * s.plane();
        float* dst = out.sample(n) + static_cast<std::size_t>(c) * o.plane();
        for (int y = 0; y < o.h; ++y)
          for (int x = 0; x < o.w; ++x) dst[y * o.w + x] = src[(y / f_) * s.w + x / f_];
      }
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    if (!din[0]) return;
    const Shape& s = in[0]->shape();
    const Shape& o = dout.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        float* dst = din[0]->sample(n) + static_cast<std::size_t>(c) * s.plane();
        const float* dy = dout.sample(n) + static_cast<std::size_t>(c) * o.plane();
        for (int y = 0; y < o.h; ++y)
          for (int x = 0; x < o.w; ++x) dst[(y / f_) * s.w + x / f_] += dy[y * o.w + x];
      }
  }

 private:
  int f_;
};

// Half-pixel-centred bilinear interpolation with edge clamping.
class BilinearUpsample final : public Op {
 public:
  explicit BilinearUpsample(int factor) : f_(factor) {}
  Shape out_shape(const std::vector<const Tensor*>& in) const override {
    const Shape& s = in[0]->shape();
    return {s.n, s.c, s.h * f_, s.w * f_};
  }

  struct Tap {
    int i0, i1;
    float w1;
  };

  std::vector<Tap> taps(int in_len, int out_len) const {
    std::vector<Tap> t(out_len);
    for (int o = 0; o < out_len; ++o) {
      float src = (o + 0.5f) / f_ - 0.5f;
      if (src < 0.0f) src = 0.0f;
      int i0 = static_cast<int>(src);
      if (i0 > in_len - 1) i0 = in_len - 1;
      const int i1 = std::min(i0 + 1, in_len - 1);
      t[o] = {i0, i1, src - i0};
    }
    return t;
  }

  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode, int) override {
    const Shape& s = in[0]->shape();
    const Shape& o = out.shape();
    const auto ty = taps(s.h, o.h);
    const auto tx = taps(s.w, o.w);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const float* src = in[0]->sample(n) + static_cast<std::size_t>(c) * s.plane();
        float* dst = out.sample(n) + static_cast<std::size_t>(c) * o.plane();
        for (int y = 0; y < o.h; ++y) {
          const Tap& a = ty[y];
          for (int x = 0; x < o.w; ++x) {
            const Tap& b = tx[x];
            const float top = src[a.i0 * s.w + b.i0] * (1 - b.w1) + src[a.i0 * s.w + b.i1] * b.w1;
            const float bot = src[a.i1 * s.w + b.i0] * (1 - b.w1) + src[a.i1 * s.w + b.i1] * b.w1;
            dst[y * o.w + x] = top * (1 - a.w1) + bot * a.w1;
          }
        }
      }
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    if (!din[0]) return;
    const Shape& s = in[0]->shape();
    const Shape& o = dout.shape();
    const auto ty = taps(s.h, o.h);
    const auto tx = taps(s.w, o.w);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        float* dst = din[0]->sample(n) + static_cast<std::size_t>(c) * s.plane();
        const float* dy = dout.sample(n) + static_cast<std::size_t>(c) * o.plane();
        for (int y = 0; y < o.h; ++y) {
          const Tap& a = ty[y];
          for (int x = 0; x < o.w; ++x) {
            const Tap& b = tx[x];
            const float g = dy[y * o.w + x];
            dst[a.i0 * s.w + b.i0] += g * (1 - a.w1) * (1 - b.w1);
            dst[a.i0 * s.w + b.i1] += g * (1 - a.w1) * b.w1;
            dst[a.i1 * s.w + b.i0] += g * a.w1 * (1 - b.w1);
            dst[a.i1 * s.w + b.i1] += g * a.w1 * b.w1;
          }
        }
      }
  }

 private:
  int f_;
};

class Concat final : public Op {
 public:
  Shape out_shape(const std::vector<const Tensor*>& in) const override {
    Shape s = in[0]->shape();
    s.c = 0;
    for (const Tensor* t : in) {
      const Shape& ts = t->shape();
      if (ts.h != s.h || ts.w != s.w || ts.n != s.n)
        throw std::invalid_argument("concat: spatial mismatch " + to_string(ts) + " vs " +
                                    to_string(in[0]->shape()));
      s.c += ts.c;
    }
    return s;
  }
  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode, int) override {
    for (int n = 0; n < out.shape().n; ++n) {
      float* dst = out.sample(n);
      for (const Tensor* t : in) {
        const std::size_t len = t->shape().sample_size();
        std::copy_n(t->sample(n), len, dst);
        dst += len;
      }
    }
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    for (int n = 0; n < dout.shape().n; ++n) {
      const float* src = dout.sample(n);
      for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t len = in[i]->shape().sample_size();
        if (din[i]) {
          float* dst = din[i]->sample(n);
          for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
        }
        src += len;
      }
    }
  }
};

class Add final : public Op {
 public:
  Shape out_shape(const std::vector<const Tensor*>& in) const override {
    if (!(in[0]->shape() == in[1]->shape()))
      throw std::invalid_argument("add: shape mismatch " + to_string(in[0]->shape()) + " vs " +
                                  to_string(in[1]->shape()));
    return in[0]->shape();
  }
  void forward(const std::vector<const Tensor*>& in, Tensor& out, Mode, int) override {
    const float* a = in[0]->data();
    const float* b = in[1]->data();
    float* y = out.data();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) y[i] = a[i] + b[i];
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    for (Tensor* d : din) {
      if (!d) continue;
      float* dx = d->data();
      const float* dy = dout.data();
      for (std::size_t i = 0, n = dout.numel(); i < n; ++i) dx[i] += dy[i];
    }
  }
};

}  // namespace

struct Network::Node {
  std::unique_ptr<Op> op;  // null for the input node
  std::vector<int> inputs;
  int channels = 0;
  int stride = 1;
  bool needs_grad = true;
  Tensor out;
  Tensor grad;
};

Network::Network() = default;
Network::~Network() = default;
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;

int Network::push(std::unique_ptr<Op> op, std::vector<int> inputs, int channels, int stride) {
  for (int i : inputs)
    if (i < 0 || i >= num_nodes()) throw std::out_of_range("network: bad input node id");
  auto node = std::make_unique<Node>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->channels = channels;
  node->stride = stride;
  nodes_.push_back(std::move(node));
  return num_nodes() - 1;
}

int Network::input(int channels) {
  if (!nodes_.empty()) throw std::logic_error("network: input must be the first node");
  const int id = push(nullptr, {}, channels, 1);
  nodes_[id]->needs_grad = false;
  return id;
}

int Network::conv(int in, int out_channels, int kernel, int stride, bool bias,
                  const std::string& name) {
  return push(std::make_unique<Conv2d>(channels(in), out_channels, kernel, stride, bias, name),
              {in}, out_channels, this->stride(in) * stride);
}

int Network::batch_norm(int in, const std::string& name) {
  return push(std::make_unique<BatchNorm2d>(channels(in), name), {in}, channels(in), stride(in));
}

int Network::relu(int in) { return push(std::make_unique<Relu>(), {in}, channels(in), stride(in)); }

int Network::max_pool(int in, int kernel, int stride, int pad) {
  if (pad < 0) pad = stride == 1 ? kernel / 2 : 0;
  return push(std::make_unique<MaxPool2d>(kernel, stride, pad), {in}, channels(in),
              this->stride(in) * stride);
}

int Network::upsample(int in, int factor, bool bilinear) {
  if (stride(in) % factor != 0) throw std::invalid_argument("upsample: stride not divisible");
  std::unique_ptr<Op> op;
  if (bilinear)
    op = std::make_unique<BilinearUpsample>(factor);
  else
    op = std::make_unique<Upsample>(factor);
  return push(std::move(op), {in}, channels(in), stride(in) / factor);
}

int Network::concat(const std::vector<int>& ins) {
  int c = 0;
  for (int i : ins) {
    if (stride(i) != stride(ins.front()))
      throw std::invalid_argument("concat: inputs have different strides");
    c += channels(i);
  }
  return push(std::make_unique<Concat>(), ins, c, stride(ins.front()));
}

int Network::add(int a, int b) {
  if (channels(a) != channels(b) || stride(a) != stride(b))
    throw std::invalid_argument("add: operand mismatch");
  return push(std::make_unique<Add>(), {a, b}, channels(a), stride(a));
}

void Network::set_outputs(std::vector<int> outputs) { outputs_ = std::move(outputs); }

int Network::channels(int node) const { return nodes_.at(node)->channels; }
int Network::stride(int node) const { return nodes_.at(node)->stride; }

std::vector<Tensor> Network::forward(const Tensor& input, Mode mode) {
  if (nodes_.empty()) throw std::logic_error("network: empty graph");
  if (input.shape().c != nodes_[0]->channels)
    throw std::invalid_argument("network: expected " + std::to_string(nodes_[0]->channels) +
                                " input channels, got " + std::to_string(input.shape().c));

  std::vector<int> last_use(nodes_.size(), -1);
  for (int i = 0; i < num_nodes(); ++i)
    for (int j : nodes_[i]->inputs) last_use[j] = i;
  for (int o : outputs_) last_use[o] = num_nodes();

  nodes_[0]->out = input;
  std::vector<const Tensor*> ins;
  for (int i = 1; i < num_nodes(); ++i) {
    Node& node = *nodes_[i];
    ins.clear();
    for (int j : node.inputs) ins.push_back(&nodes_[j]->out);
    node.out.reset(node.op->out_shape(ins));
    node.op->forward(ins, node.out, mode, bn_group_);
    if (mode == Mode::kEval) {
      for (int j : node.inputs)
        if (last_use[j] == i) nodes_[j]->out.release();
    }
  }

  std::vector<Tensor> result;
  result.reserve(outputs_.size());
  for (int o : outputs_) result.push_back(nodes_[o]->out);
  if (mode == Mode::kEval) {
    for (auto& node : nodes_) node->out.release();
  }
  return result;
}

void Network::backward(const std::vector<Tensor>& output_grads) {
  if (output_grads.size() != outputs_.size())
    throw std::invalid_argument("network: output gradient count mismatch");
  for (auto& node : nodes_) {
    if (node->needs_grad) node->grad.reset(node->out.shape());
  }
  for (std::size_t k = 0; k < outputs_.size(); ++k) {
    Node& node = *nodes_[outputs_[k]];
    if (!(output_grads[k].shape() == node.out.shape()))
      throw std::invalid_argument("network: output gradient shape " +
                                  to_string(output_grads[k].shape()) + " != " +
                                  to_string(node.out.shape()));
    const float* src = output_grads[k].data();
    float* dst = node.grad.data();
    for (std::size_t i = 0; i < node.grad.numel(); ++i) dst[i] += src[i];
  }

  std::vector<const Tensor*> ins;
  std::vector<Tensor*> dins;
  for (int i = num_nodes() - 1; i >= 1; --i) {
    Node& node = *nodes_[i];
    ins.clear();
    dins.clear();
    for (int j : node.inputs) {
      ins.push_back(&nodes_[j]->out);
      dins.push_back(nodes_[j]->needs_grad ? &nodes_[j]->grad : nullptr);
    }
    node.op->backward(ins, node.out, node.grad, dins);
    node.grad.release();
  }
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (auto& node : nodes_)
    if (node->op) node->op->collect_params(out);
  return out;
}

std::vector<const Param*> Network::params() const {
  std::vector<Param*> tmp;
  for (auto& node : nodes_)
    if (node->op) node->op->collect_params(tmp);
  return {tmp.begin(), tmp.end()};
}

std::vector<Buffer*> Network::buffers() {
  std::vector<Buffer*> out;
  for (auto& node : nodes_)
    if (node->op) node->op->collect_buffers(out);
  return out;
}

std::vector<const Buffer*> Network::buffers() const {
  std::vector<Buffer*> tmp;
  for (auto& node : nodes_)
    if (node->op) node->op->collect_buffers(tmp);
  return {tmp.begin(), tmp.end()};
}

std::size_t Network::parameter_count() const {
  std::size_t total = 0;
  for (const Param* p : params()) total += p->value.size();
  return total;
}

void Network::zero_grad() {
  for (Param* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

void Network::set_bn_group(int group) {
  if (group < 1) throw std::invalid_argument("bn group must be >= 1");
  bn_group_ = group;
}

void Network::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& node : nodes_)
    if (node->op) node->op->init(rng);
}

}  // namespace vdet::nn
