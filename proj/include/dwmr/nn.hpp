#pragma once

// Layer primitives on NCHW tensors: affine, conv2d (im2col + GEMM), 2x2
// average pooling, group/batch normalization, nearest-neighbor upsampling,
// and the residual block used by the grid predictor. Weight layouts:
//   affine w: [in, out]            conv w: [out_c, in_c, kh, kw]
// Initialization is centered uniform with fan-in scaling, zero biases.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dwmr/rng.hpp"
#include "dwmr/tensor.hpp"

namespace dwmr {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
Tensor<T> uniform_init(const Shape& shape, int fan_in, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(shape);
  const double bound = 1.0 / std::sqrt(double(fan_in));
  for (auto& v : t.data()) v = T(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

// y[N,O] = x[N,I] * w[I,O] + b[O]
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check(x.shape.size() == 2 && w.shape.size() == 2 && x.shape[1] == w.shape[0] &&
            b.shape.size() == 1 && b.shape[0] == w.shape[1],
        cat("affine: incompatible shapes x", shape_str(x.shape), " w", shape_str(w.shape), " b",
            shape_str(b.shape)));
  const int n = x.shape[0], in = x.shape[1], out = w.shape[1];
  Tensor<T> y = Tensor<T>::zeros({n, out});
  detail::MatMap<T>(y.ptr(), n, out).noalias() =
      detail::ConstMatMap<T>(x.ptr(), n, in) * detail::ConstMatMap<T>(w.ptr(), in, out);
  for (int i = 0; i < n; ++i) {
    T* row = y.ptr() + size_t(i) * out;
    for (int j = 0; j < out; ++j) row[j] += b.data()[j];
  }
  if (tape.recording && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    tape.record([x, w, b, y, n, in, out]() mutable {
      if (!y.has_grad()) return;
      detail::ConstMatMap<T> gy(y.grad().data(), n, out);
      if (x.requires_grad())
        detail::MatMap<T>(x.grad().data(), n, in).noalias() +=
            gy * detail::ConstMatMap<T>(w.ptr(), in, out).transpose();
      if (w.requires_grad())
        detail::MatMap<T>(w.grad().data(), in, out).noalias() +=
            detail::ConstMatMap<T>(x.ptr(), n, in).transpose() * gy;
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < out; ++j) gb[j] += y.grad()[size_t(i) * out + j];
      }
    });
  }
  return y;
}

namespace detail {

// gathers one sample's receptive fields into cols[oh*ow, ic*kh*kw]
template <typename T>
void im2col(const T* x, int ic, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            T* cols) {
  const int patch = ic * kh * kw;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* dst = cols + (size_t(oy) * ow + ox) * patch;
      for (int c = 0; c < ic; ++c) {
        const T* plane = x + size_t(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[size_t(iy) * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int ic, int h, int w, int kh, int kw, int stride, int pad, int oh,
                int ow, T* gx) {
  const int patch = ic * kh * kw;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const T* src = cols + (size_t(oy) * ow + ox) * patch;
      for (int c = 0; c < ic; ++c) {
        T* plane = gx + size_t(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) plane[size_t(iy) * w + ix] += *src;
            ++src;
          }
        }
      }
    }
  }
}

}  // namespace detail

// x[N,IC,H,W] * w[OC,IC,KH,KW] + b[OC] -> y[N,OC,OH,OW]
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
  check(x.shape.size() == 4 && w.shape.size() == 4 && x.shape[1] == w.shape[1],
        cat("conv2d: incompatible shapes x", shape_str(x.shape), " w", shape_str(w.shape)));
  const int n = x.shape[0], ic = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int oc = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  check(h + 2 * pad >= kh && wd + 2 * pad >= kw,
        cat("conv2d: kernel ", kh, "x", kw, " too large for input ", shape_str(x.shape),
            " with pad ", pad));
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  const int patch = ic * kh * kw;
  const size_t in_sz = size_t(ic) * h * wd, out_sz = size_t(oc) * oh * ow;

  Tensor<T> y = Tensor<T>::zeros({n, oc, oh, ow});
  std::vector<T> cols(size_t(oh) * ow * patch);
  detail::ConstMatMap<T> wm(w.ptr(), oc, patch);
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.ptr() + i * in_sz, ic, h, wd, kh, kw, stride, pad, oh, ow, cols.data());
    // y_i[oh*ow, oc] = cols * w^T, then transpose into channel-major layout
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> yi =
        detail::ConstMatMap<T>(cols.data(), oh * ow, patch) * wm.transpose();
    T* dst = y.ptr() + i * out_sz;
    for (int c = 0; c < oc; ++c) {
      const T bias = b.data()[c];
      for (int r = 0; r < oh * ow; ++r) dst[size_t(c) * oh * ow + r] = yi(r, c) + bias;
    }
  }

  if (tape.recording && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    tape.record([x, w, b, y, n, ic, h, wd, oc, kh, kw, stride, pad, oh, ow, patch, in_sz,
                 out_sz]() mutable {
      if (!y.has_grad()) return;
      std::vector<T> cols(size_t(oh) * ow * patch);
      std::vector<T> gy_t(size_t(oh) * ow * oc);  // [oh*ow, oc] layout of one sample's dY
      for (int i = 0; i < n; ++i) {
        const T* gy = y.grad().data() + i * out_sz;
        for (int c = 0; c < oc; ++c)
          for (int r = 0; r < oh * ow; ++r) gy_t[size_t(r) * oc + c] = gy[size_t(c) * oh * ow + r];
        detail::ConstMatMap<T> gym(gy_t.data(), oh * ow, oc);
        if (w.requires_grad() || x.requires_grad())
          detail::im2col(x.ptr() + i * in_sz, ic, h, wd, kh, kw, stride, pad, oh, ow, cols.data());
        if (w.requires_grad())
          detail::MatMap<T>(w.grad().data(), oc, patch).noalias() +=
              gym.transpose() * detail::ConstMatMap<T>(cols.data(), oh * ow, patch);
        if (b.requires_grad()) {
          auto& gb = b.grad();
          for (int c = 0; c < oc; ++c) {
            T acc = T(0);
            for (int r = 0; r < oh * ow; ++r) acc += gy[size_t(c) * oh * ow + r];
            gb[c] += acc;
          }
        }
        if (x.requires_grad()) {
          Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gcols =
              gym * detail::ConstMatMap<T>(w.ptr(), oc, patch);
          detail::col2im_add(gcols.data(), ic, h, wd, kh, kw, stride, pad, oh, ow,
                             x.grad().data() + i * in_sz);
        }
      }
    });
  }
  return y;
}

// 2x2 average pooling, stride 2; spatial dims must be even
template <typename T>
Tensor<T> avg_pool2d(Tape<T>& tape, const Tensor<T>& x) {
  check(x.shape.size() == 4 && x.shape[2] % 2 == 0 && x.shape[3] % 2 == 0,
        cat("avg_pool2d: input ", shape_str(x.shape), " must be 4-d with even spatial dims"));
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const int oh = h / 2, ow = w / 2;
  Tensor<T> y = Tensor<T>::zeros({n, c, oh, ow});
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.ptr() + size_t(p) * h * w;
    T* dst = y.ptr() + size_t(p) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        dst[size_t(oy) * ow + ox] =
            (src[size_t(2 * oy) * w + 2 * ox] + src[size_t(2 * oy) * w + 2 * ox + 1] +
             src[size_t(2 * oy + 1) * w + 2 * ox] + src[size_t(2 * oy + 1) * w + 2 * ox + 1]) /
            T(4);
  }
  if (detail::track(tape, x)) {
    y.set_requires_grad(true);
    tape.record([x, y, n, c, h, w, oh, ow]() mutable {
      if (!y.has_grad()) return;
      auto& gx = x.grad();
      for (int p = 0; p < n * c; ++p) {
        const T* gy = y.grad().data() + size_t(p) * oh * ow;
        T* dst = gx.data() + size_t(p) * h * w;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const T g = gy[size_t(oy) * ow + ox] / T(4);
            dst[size_t(2 * oy) * w + 2 * ox] += g;
            dst[size_t(2 * oy) * w + 2 * ox + 1] += g;
            dst[size_t(2 * oy + 1) * w + 2 * ox] += g;
            dst[size_t(2 * oy + 1) * w + 2 * ox + 1] += g;
          }
      }
    });
  }
  return y;
}

// nearest-neighbor 2x upsampling; gradient of each input cell is the sum of
// its 2x2 output block
template <typename T>
Tensor<T> upsample_nearest2(Tape<T>& tape, const Tensor<T>& x) {
  check(x.shape.size() == 4, cat("upsample_nearest2: input ", shape_str(x.shape)));
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  Tensor<T> y = Tensor<T>::zeros({n, c, 2 * h, 2 * w});
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.ptr() + size_t(p) * h * w;
    T* dst = y.ptr() + size_t(p) * 4 * h * w;
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        const T v = src[size_t(iy) * w + ix];
        dst[size_t(2 * iy) * 2 * w + 2 * ix] = v;
        dst[size_t(2 * iy) * 2 * w + 2 * ix + 1] = v;
        dst[size_t(2 * iy + 1) * 2 * w + 2 * ix] = v;
        dst[size_t(2 * iy + 1) * 2 * w + 2 * ix + 1] = v;
      }
  }
  if (detail::track(tape, x)) {
    y.set_requires_grad(true);
    tape.record([x, y, n, c, h, w]() mutable {
      if (!y.has_grad()) return;
      auto& gx = x.grad();
      for (int p = 0; p < n * c; ++p) {
        const T* gy = y.grad().data() + size_t(p) * 4 * h * w;
        T* dst = gx.data() + size_t(p) * h * w;
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < w; ++ix)
            dst[size_t(iy) * w + ix] +=
                gy[size_t(2 * iy) * 2 * w + 2 * ix] + gy[size_t(2 * iy) * 2 * w + 2 * ix + 1] +
                gy[size_t(2 * iy + 1) * 2 * w + 2 * ix] +
                gy[size_t(2 * iy + 1) * 2 * w + 2 * ix + 1];
      }
    });
  }
  return y;
}

namespace detail {

// shared normalization backward: given per-slice mean/invstd and the slice
// element list, accumulates dx for y = gamma*(x-mu)*invstd + beta
template <typename T>
struct NormStats {
  std::vector<T> mean, invstd;
};

}  // namespace detail

// per-sample, per-group normalization over (C/groups, H, W); gamma/beta are
// per-channel. Output of each group has mean 0 and variance 1 (eps = 1e-5).
template <typename T>
Tensor<T> group_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, int groups) {
  check(x.shape.size() == 4, cat("group_norm: input ", shape_str(x.shape)));
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  check(c % groups == 0, cat("group_norm: ", c, " channels not divisible by ", groups, " groups"));
  check(gamma.shape == Shape{c} && beta.shape == Shape{c},
        cat("group_norm: gamma/beta must have shape [", c, "]"));
  const T eps = T(1e-5);
  const int gc = c / groups;               // channels per group
  const size_t gsz = size_t(gc) * h * w;   // elements per group slice
  auto stats = std::make_shared<detail::NormStats<T>>();
  stats->mean.resize(size_t(n) * groups);
  stats->invstd.resize(size_t(n) * groups);

  Tensor<T> y = Tensor<T>::zeros(x.shape);
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < groups; ++g) {
      const T* src = x.ptr() + (size_t(i) * c + size_t(g) * gc) * h * w;
      T* dst = y.ptr() + (size_t(i) * c + size_t(g) * gc) * h * w;
      T mu = T(0);
      for (size_t k = 0; k < gsz; ++k) mu += src[k];
      mu /= T(gsz);
      T var = T(0);
      for (size_t k = 0; k < gsz; ++k) {
        const T d = src[k] - mu;
        var += d * d;
      }
      var /= T(gsz);
      const T invstd = T(1) / std::sqrt(var + eps);
      stats->mean[size_t(i) * groups + g] = mu;
      stats->invstd[size_t(i) * groups + g] = invstd;
      for (int cc = 0; cc < gc; ++cc) {
        const T ga = gamma.data()[size_t(g) * gc + cc], be = beta.data()[size_t(g) * gc + cc];
        for (size_t k = 0; k < size_t(h) * w; ++k) {
          const size_t idx = size_t(cc) * h * w + k;
          dst[idx] = ga * (src[idx] - mu) * invstd + be;
        }
      }
    }
  }
  if (tape.recording && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    y.set_requires_grad(true);
    tape.record([x, gamma, beta, y, stats, n, c, h, w, groups, gc, gsz]() mutable {
      if (!y.has_grad()) return;
      for (int i = 0; i < n; ++i) {
        for (int g = 0; g < groups; ++g) {
          const size_t base = (size_t(i) * c + size_t(g) * gc) * size_t(h) * w;
          const T* src = x.ptr() + base;
          const T* gy = y.grad().data() + base;
          const T mu = stats->mean[size_t(i) * groups + g];
          const T invstd = stats->invstd[size_t(i) * groups + g];
          // accumulate dxhat sums for the projection terms
          T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
          for (int cc = 0; cc < gc; ++cc) {
            const T ga = gamma.data()[size_t(g) * gc + cc];
            for (size_t k = 0; k < size_t(h) * w; ++k) {
              const size_t idx = size_t(cc) * h * w + k;
              const T xhat = (src[idx] - mu) * invstd;
              const T dxhat = gy[idx] * ga;
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
          }
          if (gamma.requires_grad() || beta.requires_grad()) {
            for (int cc = 0; cc < gc; ++cc) {
              T dga = T(0), dbe = T(0);
              for (size_t k = 0; k < size_t(h) * w; ++k) {
                const size_t idx = size_t(cc) * h * w + k;
                dga += gy[idx] * (src[idx] - mu) * invstd;
                dbe += gy[idx];
              }
              if (gamma.requires_grad()) gamma.grad()[size_t(g) * gc + cc] += dga;
              if (beta.requires_grad()) beta.grad()[size_t(g) * gc + cc] += dbe;
            }
          }
          if (x.requires_grad()) {
            T* gx = x.grad().data() + base;
            const T inv_m = T(1) / T(gsz);
            for (int cc = 0; cc < gc; ++cc) {
              const T ga = gamma.data()[size_t(g) * gc + cc];
              for (size_t k = 0; k < size_t(h) * w; ++k) {
                const size_t idx = size_t(cc) * h * w + k;
                const T xhat = (src[idx] - mu) * invstd;
                const T dxhat = gy[idx] * ga;
                gx[idx] += invstd * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
              }
            }
          }
        }
      }
    });
  }
  return y;
}

// per-channel batch normalization over (N, H, W). Training mode normalizes by
// batch statistics and updates the running stats in place (population
// variance, momentum blend); eval mode normalizes by the stored stats.
template <typename T>
Tensor<T> batch_norm2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                       bool training, T momentum = T(0.1)) {
  check(x.shape.size() == 4, cat("batch_norm2d: input ", shape_str(x.shape)));
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  check(gamma.shape == Shape{c} && beta.shape == Shape{c} && running_mean.shape == Shape{c} &&
            running_var.shape == Shape{c},
        cat("batch_norm2d: parameter shapes must be [", c, "]"));
  const T eps = T(1e-5);
  const size_t plane = size_t(h) * w;
  const size_t m = size_t(n) * plane;  // elements per channel

  auto stats = std::make_shared<detail::NormStats<T>>();
  stats->mean.resize(c);
  stats->invstd.resize(c);
  for (int ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      mu = T(0);
      for (int i = 0; i < n; ++i) {
        const T* src = x.ptr() + (size_t(i) * c + ch) * plane;
        for (size_t k = 0; k < plane; ++k) mu += src[k];
      }
      mu /= T(m);
      var = T(0);
      for (int i = 0; i < n; ++i) {
        const T* src = x.ptr() + (size_t(i) * c + ch) * plane;
        for (size_t k = 0; k < plane; ++k) {
          const T d = src[k] - mu;
          var += d * d;
        }
      }
      var /= T(m);
      running_mean.data()[ch] = (T(1) - momentum) * running_mean.data()[ch] + momentum * mu;
      running_var.data()[ch] = (T(1) - momentum) * running_var.data()[ch] + momentum * var;
    } else {
      mu = running_mean.data()[ch];
      var = running_var.data()[ch];
    }
    stats->mean[ch] = mu;
    stats->invstd[ch] = T(1) / std::sqrt(var + eps);
  }

  Tensor<T> y = Tensor<T>::zeros(x.shape);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* src = x.ptr() + (size_t(i) * c + ch) * plane;
      T* dst = y.ptr() + (size_t(i) * c + ch) * plane;
      const T mu = stats->mean[ch], invstd = stats->invstd[ch];
      const T ga = gamma.data()[ch], be = beta.data()[ch];
      for (size_t k = 0; k < plane; ++k) dst[k] = ga * (src[k] - mu) * invstd + be;
    }

  if (tape.recording && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    y.set_requires_grad(true);
    tape.record([x, gamma, beta, y, stats, n, c, plane, m, training]() mutable {
      if (!y.has_grad()) return;
      for (int ch = 0; ch < c; ++ch) {
        const T mu = stats->mean[ch], invstd = stats->invstd[ch];
        const T ga = gamma.data()[ch];
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0), dga = T(0), dbe = T(0);
        for (int i = 0; i < n; ++i) {
          const size_t base = (size_t(i) * c + ch) * plane;
          const T* src = x.ptr() + base;
          const T* gy = y.grad().data() + base;
          for (size_t k = 0; k < plane; ++k) {
            const T xhat = (src[k] - mu) * invstd;
            sum_dxhat += gy[k] * ga;
            sum_dxhat_xhat += gy[k] * ga * xhat;
            dga += gy[k] * xhat;
            dbe += gy[k];
          }
        }
        if (gamma.requires_grad()) gamma.grad()[ch] += dga;
        if (beta.requires_grad()) beta.grad()[ch] += dbe;
        if (x.requires_grad()) {
          const T inv_m = T(1) / T(m);
          for (int i = 0; i < n; ++i) {
            const size_t base = (size_t(i) * c + ch) * plane;
            const T* src = x.ptr() + base;
            const T* gy = y.grad().data() + base;
            T* gx = x.grad().data() + base;
            for (size_t k = 0; k < plane; ++k) {
              const T xhat = (src[k] - mu) * invstd;
              const T dxhat = gy[k] * ga;
              if (training)
                gx[k] += invstd * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
              else
                gx[k] += dxhat * invstd;  // stored stats are constants
            }
          }
        }
      }
    });
  }
  return y;
}

// ---- layer objects ----

template <typename T>
struct AffineLayer {
  Tensor<T> w, b;

  static AffineLayer init(int in, int out, Rng& rng) {
    AffineLayer l;
    l.w = uniform_init<T>({in, out}, in, rng);
    l.b = Tensor<T>::zeros({out});
    l.b.set_requires_grad(true);
    return l;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const { return affine(tape, x, w, b); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int stride = 1, pad = 0;

  static Conv2dLayer init(int in_c, int out_c, int k, int stride, int pad, Rng& rng) {
    Conv2dLayer l;
    l.w = uniform_init<T>({out_c, in_c, k, k}, in_c * k * k, rng);
    l.b = Tensor<T>::zeros({out_c});
    l.b.set_requires_grad(true);
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return conv2d(tape, x, w, b, stride, pad);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct GroupNormLayer {
  Tensor<T> gamma, beta;
  int groups = 4;

  static GroupNormLayer init(int channels, int groups) {
    GroupNormLayer l;
    l.gamma = Tensor<T>::full({channels}, T(1));
    l.gamma.set_requires_grad(true);
    l.beta = Tensor<T>::zeros({channels});
    l.beta.set_requires_grad(true);
    l.groups = groups;
    return l;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return group_norm(tape, x, gamma, beta, groups);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Tensor<T> gamma, beta, running_mean, running_var;

  static BatchNorm2dLayer init(int channels) {
    BatchNorm2dLayer l;
    l.gamma = Tensor<T>::full({channels}, T(1));
    l.gamma.set_requires_grad(true);
    l.beta = Tensor<T>::zeros({channels});
    l.beta.set_requires_grad(true);
    l.running_mean = Tensor<T>::zeros({channels});
    l.running_var = Tensor<T>::full({channels}, T(1));
    return l;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, bool training) {
    return batch_norm2d(tape, x, gamma, beta, running_mean, running_var, training);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  // running statistics are checkpointed but never optimized
  void collect_state(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".running_mean", running_mean});
    out.push_back({prefix + ".running_var", running_var});
  }
};

// conv3x3 -> batch_norm -> relu -> conv3x3 -> batch_norm -> add skip -> relu
template <typename T>
struct ResidualBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNorm2dLayer<T> bn1, bn2;

  static ResidualBlock init(int channels, Rng& rng) {
    ResidualBlock b;
    b.conv1 = Conv2dLayer<T>::init(channels, channels, 3, 1, 1, rng);
    b.bn1 = BatchNorm2dLayer<T>::init(channels);
    b.conv2 = Conv2dLayer<T>::init(channels, channels, 3, 1, 1, rng);
    b.bn2 = BatchNorm2dLayer<T>::init(channels);
    return b;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, bool training) {
    Tensor<T> h = relu(tape, bn1(tape, conv1(tape, x), training));
    h = bn2(tape, conv2(tape, h), training);
    return relu(tape, add(tape, h, x));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
  }
  void collect_state(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    bn1.collect_state(prefix + ".bn1", out);
    bn2.collect_state(prefix + ".bn2", out);
  }
};

}  // namespace dwmr
