#pragma once

// Fourier feature encoding: p -> [sin(2^0 pi p), cos(2^0 pi p), ...,
// sin(2^{L-1} pi p), cos(2^{L-1} pi p)], applied independently to each input
// component and concatenated per component.

#include <cmath>
#include <numbers>
#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/errors.hpp"
#include "ctrlnerf/geometry.hpp"

namespace ctrlnerf {

struct EncodingConfig {
  int l_x = 10;  // frequency count for positions
  int l_d = 4;   // frequency count for directions

  void validate() const {
    if (l_x < 1 || l_d < 1)
      throw ContractViolation("EncodingConfig: frequency counts must be >= 1");
  }
};

namespace enc_detail {

// sin/cos of 2^k * pi * p with the argument reduced modulo the period first.
// 2^k * p and fmod(., 2) are exact in floating point, so the encoding is
// bitwise periodic in p with period 2 and stays accurate at high frequencies.
template <typename S>
inline void sincos_pow2_pi(S p, int k, S& s, S& c) {
  const S scaled = std::ldexp(p, k);
  S m = std::fmod(scaled, S(2));
  if (m < S(0)) m += S(2);  // canonical representative in [0,2)
  const S arg = static_cast<S>(std::numbers::pi) * m;
  s = std::sin(arg);
  c = std::cos(arg);
}

}  // namespace enc_detail

// Non-tape scalar form, 2L values appended to out.
template <typename S>
void encode_scalar(S p, int l, std::vector<S>& out) {
  if (!std::isfinite(p)) throw NumericError("encode_scalar: non-finite input");
  for (int k = 0; k < l; ++k) {
    S s, c;
    enc_detail::sincos_pow2_pi(p, k, s, c);
    out.push_back(s);
    out.push_back(c);
  }
}

// The two angular components of a unit direction, normalized to [-1, 1].
inline void direction_components(const Vec3& d, double out[2]) {
  out[0] = std::atan2(d.x, d.z) / std::numbers::pi;
  out[1] = std::asin(std::clamp(d.y, -1.0, 1.0)) / (std::numbers::pi / 2.0);
}

namespace ad {

// [R, C] -> [R, C*2L]; component c occupies output columns [c*2L, (c+1)*2L).
template <typename S>
Tensor<S> positional_encode(const Tensor<S>& x, int l) {
  if (l < 1) throw ContractViolation("positional_encode: L must be >= 1");
  if (x.shape().size() != 2)
    throw ContractViolation("positional_encode: need [rows, components], got " +
                            shape_str(x.shape()));
  const int rows = x.shape()[0], comps = x.shape()[1];
  const int stride = 2 * l;
  Tensor<S> out = Tensor<S>::zeros({rows, comps * stride});
  {
    auto ov = out.values_mut();
    auto xv = x.values();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < comps; ++c) {
        const S p = xv[static_cast<size_t>(r) * comps + c];
        S* dst = ov.data() + static_cast<size_t>(r) * comps * stride + static_cast<size_t>(c) * stride;
        for (int k = 0; k < l; ++k)
          enc_detail::sincos_pow2_pi(p, k, dst[2 * k], dst[2 * k + 1]);
      }
  }
  detail::ensure_finite(out, "positional_encode");
  detail::record("positional_encode", {x}, out,
                 [xn = x.node(), on = out.node(), rows, comps, l, stride] {
                   if (on->grad.empty() || !xn->requires_grad) return;
                   xn->ensure_grad();
                   for (int r = 0; r < rows; ++r)
                     for (int c = 0; c < comps; ++c) {
                       const size_t base = static_cast<size_t>(r) * comps * stride +
                                           static_cast<size_t>(c) * stride;
                       S freq = static_cast<S>(std::numbers::pi);
                       S acc = S(0);
                       for (int k = 0; k < l; ++k) {
                         // d sin(fp)/dp = f cos(fp); d cos(fp)/dp = -f sin(fp)
                         acc += on->grad[base + 2 * k] * freq * on->values[base + 2 * k + 1];
                         acc -= on->grad[base + 2 * k + 1] * freq * on->values[base + 2 * k];
                         freq *= S(2);
                       }
                       xn->grad[static_cast<size_t>(r) * comps + c] += acc;
                     }
                 });
  return out;
}

}  // namespace ad
}  // namespace ctrlnerf
