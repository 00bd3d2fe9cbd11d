#pragma once

// Neural network building blocks on top of the tape: dense layers, 2D
// convolutions (im2col + matmul), max pooling, instance normalization,
// bilinear upsampling, and spectral weight normalization.

#include <cmath>
#include <memory>
#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/errors.hpp"
#include "ctrlnerf/rng.hpp"

namespace ctrlnerf {

// ---------------------------------------------------------------------------
// Dense layer: y = x W + b, x [B,in], W [in,out], b [out].

template <typename S>
struct Linear {
  ad::Tensor<S> w, b;

  static Linear create(int in, int out, Rng& rng) {
    std::vector<S> wv(static_cast<size_t>(in) * out);
    const double std = std::sqrt(2.0 / in);  // ReLU-family fan-in scaling
    for (auto& v : wv) v = static_cast<S>(rng.normal() * std);
    Linear l;
    l.w = ad::Tensor<S>::param({in, out}, std::move(wv));
    l.b = ad::Tensor<S>::param({out}, std::vector<S>(out, S(0)));
    return l;
  }

  ad::Tensor<S> forward(const ad::Tensor<S>& x) const {
    return ad::add(ad::matmul(x, w), b);
  }

  void collect(std::vector<ad::Tensor<S>>& out) const {
    out.push_back(w);
    out.push_back(b);
  }
};

// Stack of dense+ReLU layers (ReLU after every layer).
template <typename S>
struct Mlp {
  std::vector<Linear<S>> layers;

  static Mlp create(int in, const std::vector<int>& widths, Rng& rng) {
    Mlp m;
    int prev = in;
    for (int w : widths) {
      m.layers.push_back(Linear<S>::create(prev, w, rng));
      prev = w;
    }
    return m;
  }

  ad::Tensor<S> forward(ad::Tensor<S> x) const {
    for (const auto& l : layers) x = ad::relu(l.forward(x));
    return x;
  }

  void collect(std::vector<ad::Tensor<S>>& out) const {
    for (const auto& l : layers) l.collect(out);
  }
};

namespace ad {

// ---------------------------------------------------------------------------
// conv2d: x [B,C,H,W], w [OC,C,KH,KW], b [OC]; zero padding, square stride.

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 int stride, int pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4)
    throw ContractViolation("conv2d: need x [B,C,H,W] and w [OC,C,KH,KW]");
  const int bs = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const int oc = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != c) throw ContractViolation("conv2d: channel mismatch");
  if (b.numel() != static_cast<size_t>(oc)) throw ContractViolation("conv2d: bias size mismatch");
  if (stride < 1 || pad < 0) throw ContractViolation("conv2d: bad stride/pad");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw ContractViolation("conv2d: kernel larger than padded input");

  const size_t ckk = static_cast<size_t>(c) * kh * kw;
  const size_t ohw = static_cast<size_t>(oh) * ow;

  // im2col buffers are kept for the backward pass.
  auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(bs) * ckk * ohw);
  {
    auto xv = x.values();
    for (int bi = 0; bi < bs; ++bi) {
      S* col = cols->data() + static_cast<size_t>(bi) * ckk * ohw;
      const S* xb = xv.data() + static_cast<size_t>(bi) * c * h * wd;
      size_t row = 0;
      for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx, ++row)
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride - pad + ky;
              S* dst = col + row * ohw + static_cast<size_t>(oy) * ow;
              if (iy < 0 || iy >= h) {
                for (int ox = 0; ox < ow; ++ox) dst[ox] = S(0);
                continue;
              }
              const S* src = xb + (static_cast<size_t>(ci) * h + iy) * wd;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride - pad + kx;
                dst[ox] = (ix >= 0 && ix < wd) ? src[ix] : S(0);
              }
            }
    }
  }

  Tensor<S> out = Tensor<S>::zeros({bs, oc, oh, ow});
  {
    auto ov = out.values_mut();
    auto wv = w.values();
    auto bv = b.values();
    for (int bi = 0; bi < bs; ++bi) {
      const S* col = cols->data() + static_cast<size_t>(bi) * ckk * ohw;
      S* yb = ov.data() + static_cast<size_t>(bi) * oc * ohw;
      detail::mm_nn(wv.data(), col, yb, oc, static_cast<int>(ckk), static_cast<int>(ohw), false);
      for (int o = 0; o < oc; ++o) {
        const S bias = bv[o];
        S* yrow = yb + static_cast<size_t>(o) * ohw;
        for (size_t i = 0; i < ohw; ++i) yrow[i] += bias;
      }
    }
  }
  detail::ensure_finite(out, "conv2d");

  detail::record("conv2d", {x, w, b}, out,
                 [xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(), cols, bs, c, h,
                  wd, oc, kh, kw, oh, ow, stride, pad, ckk, ohw] {
                   if (on->grad.empty()) return;
                   std::vector<S> dcol(ckk * ohw);
                   for (int bi = 0; bi < bs; ++bi) {
                     const S* dy = on->grad.data() + static_cast<size_t>(bi) * oc * ohw;
                     const S* col = cols->data() + static_cast<size_t>(bi) * ckk * ohw;
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (int o = 0; o < oc; ++o) {
                         S acc = S(0);
                         const S* dyr = dy + static_cast<size_t>(o) * ohw;
                         for (size_t i = 0; i < ohw; ++i) acc += dyr[i];
                         bn->grad[o] += acc;
                       }
                     }
                     if (wn->requires_grad) {
                       wn->ensure_grad();
                       detail::mm_nt_acc(dy, col, wn->grad.data(), oc, static_cast<int>(ohw),
                                         static_cast<int>(ckk));
                     }
                     if (xn->requires_grad) {
                       xn->ensure_grad();
                       std::fill(dcol.begin(), dcol.end(), S(0));
                       detail::mm_tn_acc(wn->values.data(), dy, dcol.data(), oc,
                                         static_cast<int>(ckk), static_cast<int>(ohw));
                       S* dxb = xn->grad.data() + static_cast<size_t>(bi) * c * h * wd;
                       size_t row = 0;
                       for (int ci = 0; ci < c; ++ci)
                         for (int ky = 0; ky < kh; ++ky)
                           for (int kx = 0; kx < kw; ++kx, ++row)
                             for (int oy = 0; oy < oh; ++oy) {
                               const int iy = oy * stride - pad + ky;
                               if (iy < 0 || iy >= h) continue;
                               const S* srow = dcol.data() + row * ohw + static_cast<size_t>(oy) * ow;
                               S* drow = dxb + (static_cast<size_t>(ci) * h + iy) * wd;
                               for (int ox = 0; ox < ow; ++ox) {
                                 const int ix = ox * stride - pad + kx;
                                 if (ix >= 0 && ix < wd) drow[ix] += srow[ox];
                               }
                             }
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d with square window and matching stride; extents must divide.

template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, int k) {
  if (x.shape().size() != 4) throw ContractViolation("maxpool2d: need [B,C,H,W]");
  const int bs = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (k < 1 || h % k != 0 || w % k != 0)
    throw ContractViolation("maxpool2d: window must divide spatial extents");
  const int oh = h / k, ow = w / k;
  Tensor<S> out = Tensor<S>::zeros({bs, c, oh, ow});
  auto argmax = std::make_shared<std::vector<size_t>>(out.numel());
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    size_t oi = 0;
    for (int bi = 0; bi < bs; ++bi)
      for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox, ++oi) {
            S best = -std::numeric_limits<S>::infinity();
            size_t best_idx = 0;
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx) {
                const size_t idx = ((static_cast<size_t>(bi) * c + ci) * h + oy * k + dy) * w +
                                   ox * k + dx;
                if (xv[idx] > best) {
                  best = xv[idx];
                  best_idx = idx;
                }
              }
            ov[oi] = best;
            (*argmax)[oi] = best_idx;
          }
  }
  detail::record("maxpool2d", {x}, out, [xn = x.node(), on = out.node(), argmax] {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[(*argmax)[i]] += on->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Instance normalization: per-(sample, channel) statistics over H*W, with
// per-channel affine parameters gamma [C], beta [C].

template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                        S eps = S(1e-5)) {
  if (x.shape().size() != 4) throw ContractViolation("instance_norm: need [B,C,H,W]");
  const int bs = x.shape()[0], c = x.shape()[1];
  const size_t hw = static_cast<size_t>(x.shape()[2]) * x.shape()[3];
  if (gamma.numel() != static_cast<size_t>(c) || beta.numel() != static_cast<size_t>(c))
    throw ContractViolation("instance_norm: affine parameter size mismatch");

  auto istd = std::make_shared<std::vector<S>>(static_cast<size_t>(bs) * c);
  auto mu = std::make_shared<std::vector<S>>(static_cast<size_t>(bs) * c);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (int bi = 0; bi < bs; ++bi)
      for (int ci = 0; ci < c; ++ci) {
        const size_t base = (static_cast<size_t>(bi) * c + ci) * hw;
        S m = S(0);
        for (size_t i = 0; i < hw; ++i) m += xv[base + i];
        m /= static_cast<S>(hw);
        S var = S(0);
        for (size_t i = 0; i < hw; ++i) {
          const S d = xv[base + i] - m;
          var += d * d;
        }
        var /= static_cast<S>(hw);
        const S is = S(1) / std::sqrt(var + eps);
        (*mu)[static_cast<size_t>(bi) * c + ci] = m;
        (*istd)[static_cast<size_t>(bi) * c + ci] = is;
        for (size_t i = 0; i < hw; ++i)
          ov[base + i] = gv[ci] * (xv[base + i] - m) * is + bv[ci];
      }
  }
  detail::ensure_finite(out, "instance_norm");

  detail::record("instance_norm", {x, gamma, beta}, out,
                 [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), mu, istd,
                  bs, c, hw] {
                   if (on->grad.empty()) return;
                   if (gn->requires_grad) gn->ensure_grad();
                   if (bn->requires_grad) bn->ensure_grad();
                   if (xn->requires_grad) xn->ensure_grad();
                   for (int bi = 0; bi < bs; ++bi)
                     for (int ci = 0; ci < c; ++ci) {
                       const size_t base = (static_cast<size_t>(bi) * c + ci) * hw;
                       const S m = (*mu)[static_cast<size_t>(bi) * c + ci];
                       const S is = (*istd)[static_cast<size_t>(bi) * c + ci];
                       const S g = gn->values[ci];
                       // accumulate channel stats of the incoming gradient
                       S sum_dy = S(0), sum_dy_xhat = S(0);
                       for (size_t i = 0; i < hw; ++i) {
                         const S xhat = (xn->values[base + i] - m) * is;
                         sum_dy += on->grad[base + i];
                         sum_dy_xhat += on->grad[base + i] * xhat;
                       }
                       if (bn->requires_grad) bn->grad[ci] += sum_dy;
                       if (gn->requires_grad) gn->grad[ci] += sum_dy_xhat;
                       if (xn->requires_grad) {
                         const S inv_n = S(1) / static_cast<S>(hw);
                         for (size_t i = 0; i < hw; ++i) {
                           const S xhat = (xn->values[base + i] - m) * is;
                           xn->grad[base + i] +=
                               g * is *
                               (on->grad[base + i] - sum_dy * inv_n - xhat * sum_dy_xhat * inv_n);
                         }
                       }
                     }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling, endpoints aligned: [B,C,H,W] -> [B,C,OH,OW].

template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, int oh, int ow) {
  if (x.shape().size() != 4) throw ContractViolation("upsample_bilinear: need [B,C,H,W]");
  if (oh < 1 || ow < 1) throw ContractViolation("upsample_bilinear: bad target size");
  const int bs = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const double sy = oh > 1 ? static_cast<double>(h - 1) / (oh - 1) : 0.0;
  const double sx = ow > 1 ? static_cast<double>(w - 1) / (ow - 1) : 0.0;

  struct Tap {
    int i0, i1;
    S t;
  };
  auto make_taps = [](int n, int on, double scale) {
    std::vector<Tap> taps(on);
    for (int o = 0; o < on; ++o) {
      const double p = o * scale;
      int i0 = static_cast<int>(std::floor(p));
      i0 = std::min(i0, n - 1);
      const int i1 = std::min(i0 + 1, n - 1);
      taps[o] = {i0, i1, static_cast<S>(p - i0)};
    }
    return taps;
  };
  auto ty = std::make_shared<std::vector<Tap>>(make_taps(h, oh, sy));
  auto tx = std::make_shared<std::vector<Tap>>(make_taps(w, ow, sx));

  Tensor<S> out = Tensor<S>::zeros({bs, c, oh, ow});
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    for (int bc = 0; bc < bs * c; ++bc) {
      const S* src = xv.data() + static_cast<size_t>(bc) * h * w;
      S* dst = ov.data() + static_cast<size_t>(bc) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const Tap& a = (*ty)[oy];
        for (int ox = 0; ox < ow; ++ox) {
          const Tap& b = (*tx)[ox];
          const S top = src[static_cast<size_t>(a.i0) * w + b.i0] * (S(1) - b.t) +
                        src[static_cast<size_t>(a.i0) * w + b.i1] * b.t;
          const S bot = src[static_cast<size_t>(a.i1) * w + b.i0] * (S(1) - b.t) +
                        src[static_cast<size_t>(a.i1) * w + b.i1] * b.t;
          dst[static_cast<size_t>(oy) * ow + ox] = top * (S(1) - a.t) + bot * a.t;
        }
      }
    }
  }
  detail::record("upsample_bilinear", {x}, out,
                 [xn = x.node(), on = out.node(), ty, tx, bs, c, h, w, oh, ow] {
                   if (on->grad.empty() || !xn->requires_grad) return;
                   xn->ensure_grad();
                   for (int bc = 0; bc < bs * c; ++bc) {
                     S* dx = xn->grad.data() + static_cast<size_t>(bc) * h * w;
                     const S* dy = on->grad.data() + static_cast<size_t>(bc) * oh * ow;
                     for (int oy = 0; oy < oh; ++oy) {
                       const auto& a = (*ty)[oy];
                       for (int ox = 0; ox < ow; ++ox) {
                         const auto& b = (*tx)[ox];
                         const S g = dy[static_cast<size_t>(oy) * ow + ox];
                         dx[static_cast<size_t>(a.i0) * w + b.i0] += g * (S(1) - a.t) * (S(1) - b.t);
                         dx[static_cast<size_t>(a.i0) * w + b.i1] += g * (S(1) - a.t) * b.t;
                         dx[static_cast<size_t>(a.i1) * w + b.i0] += g * a.t * (S(1) - b.t);
                         dx[static_cast<size_t>(a.i1) * w + b.i1] += g * a.t * b.t;
                       }
                     }
                   }
                 });
  return out;
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Spectral normalization: divides a weight matrix by its leading singular
// value, estimated by persistent power iteration (one step per call when
// updating). The iteration vectors live outside the tape; the sigma used in
// the graph is u^T W v with u, v treated as constants.

template <typename S>
struct SpectralNorm {
  std::vector<S> u, v;

  void init(int rows, int cols, Rng& rng) {
    u.resize(rows);
    v.resize(cols);
    for (auto& x : u) x = static_cast<S>(rng.normal());
    normalize(u);
    std::fill(v.begin(), v.end(), S(0));
  }

  // w2d: [rows, cols] parameter. update=false reuses the stored vectors
  // (evaluation mode keeps the function deterministic).
  ad::Tensor<S> apply(const ad::Tensor<S>& w2d, bool update) {
    const int rows = w2d.shape()[0], cols = w2d.shape()[1];
    if (u.size() != static_cast<size_t>(rows) || v.size() != static_cast<size_t>(cols))
      throw ContractViolation("SpectralNorm: vector size mismatch");
    if (update) {
      auto wv = w2d.values();
      // v <- normalize(W^T u); u <- normalize(W v)
      for (int j = 0; j < cols; ++j) {
        S acc = S(0);
        for (int i = 0; i < rows; ++i) acc += wv[static_cast<size_t>(i) * cols + j] * u[i];
        v[j] = acc;
      }
      normalize(v);
      for (int i = 0; i < rows; ++i) {
        S acc = S(0);
        for (int j = 0; j < cols; ++j) acc += wv[static_cast<size_t>(i) * cols + j] * v[j];
        u[i] = acc;
      }
      normalize(u);
    }
    auto ut = ad::Tensor<S>::from({1, rows}, std::vector<S>(u.begin(), u.end()));
    auto vt = ad::Tensor<S>::from({cols, 1}, std::vector<S>(v.begin(), v.end()));
    auto sigma = ad::matmul(ad::matmul(ut, w2d), vt);  // [1,1]
    return ad::div(w2d, ad::add(sigma, ad::Tensor<S>::scalar(S(1e-12))));
  }

 private:
  static void normalize(std::vector<S>& x) {
    S n = S(0);
    for (S xi : x) n += xi * xi;
    n = std::sqrt(n) + S(1e-12);
    for (S& xi : x) xi /= n;
  }
};

}  // namespace ctrlnerf
