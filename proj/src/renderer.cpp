#include "ctrlnerf/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "ctrlnerf/encoding.hpp"

namespace ctrlnerf {

std::vector<double> stratified_sample(double t_near, double t_far, int n, Rng& rng) {
  if (n < 2) throw ContractViolation("stratified_sample: need at least 2 samples");
  if (t_near <= 0 || t_near >= t_far)
    throw ContractViolation("stratified_sample: need 0 < t_near < t_far");
  const double w = (t_far - t_near) / n;
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = t_near + (i + rng.uniform()) * w;
  return t;
}

std::vector<double> hierarchical_resample(double t_near, double t_far,
                                          const std::vector<double>& weights, int n_fine,
                                          Rng& rng) {
  if (weights.size() < 1) throw ContractViolation("hierarchical_resample: no weights");
  if (n_fine < 1) throw ContractViolation("hierarchical_resample: n_fine must be >= 1");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ContractViolation("hierarchical_resample: negative weight");
    total += w;
  }
  if (total <= 0.0) {
    // Nothing visible yet (e.g. an untrained field): fall back to stratified.
    if (n_fine < 2) {
      std::vector<double> one{t_near + rng.uniform() * (t_far - t_near)};
      return one;
    }
    return stratified_sample(t_near, t_far, n_fine, rng);
  }

  const int n_bins = static_cast<int>(weights.size());
  std::vector<double> cdf(n_bins + 1, 0.0);
  for (int i = 0; i < n_bins; ++i) cdf[i + 1] = cdf[i] + weights[i] / total;
  cdf[n_bins] = 1.0;  // guard against accumulation shortfall

  const double bin_w = (t_far - t_near) / n_bins;
  std::vector<double> t(n_fine);
  for (int s = 0; s < n_fine; ++s) {
    const double u = rng.uniform();
    // first bin whose upper cdf exceeds u
    const auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
    int k = static_cast<int>(it - cdf.begin()) - 1;
    k = std::min(k, n_bins - 1);
    const double lo = cdf[k], hi = cdf[k + 1];
    const double frac = hi > lo ? (u - lo) / (hi - lo) : 0.5;
    t[s] = t_near + (k + frac) * bin_w;
  }
  return t;
}

CompositeReference composite_reference(const std::vector<double>& sigma,
                                       const std::vector<double>& color,
                                       const std::vector<double>& delta) {
  const size_t p = sigma.size();
  if (color.size() != 3 * p || delta.size() != p)
    throw ContractViolation("composite_reference: length mismatch");
  CompositeReference out;
  out.rgb.assign(3, 0.0);
  out.weights.assign(p, 0.0);
  double t = 1.0;
  for (size_t i = 0; i < p; ++i) {
    if (sigma[i] < 0.0) throw ContractViolation("composite_reference: negative density");
    if (delta[i] <= 0.0) throw ContractViolation("composite_reference: nonpositive delta");
    const double alpha = -std::expm1(-sigma[i] * delta[i]);
    const double w = t * alpha;
    out.weights[i] = w;
    for (int c = 0; c < 3; ++c) out.rgb[c] += w * color[3 * i + c];
    t *= 1.0 - alpha;
  }
  out.t_final = t;
  return out;
}

namespace ad {

template <typename S>
CompositeResult<S> composite(const Tensor<S>& sigma, const Tensor<S>& color,
                             const Tensor<S>& delta) {
  if (sigma.shape().size() != 2 || color.shape().size() != 2 || delta.shape().size() != 2)
    throw ContractViolation("composite: need rank-2 inputs");
  const int r = sigma.shape()[0], p = sigma.shape()[1];
  if (color.shape()[0] != r || color.shape()[1] != 3 * p || delta.shape()[0] != r ||
      delta.shape()[1] != p)
    throw ContractViolation("composite: shape mismatch between sigma " +
                            shape_str(sigma.shape()) + ", color " + shape_str(color.shape()) +
                            " and delta " + shape_str(delta.shape()));

  for (S v : sigma.values())
    if (v < S(0)) throw ContractViolation("composite: negative density");
  for (S v : delta.values())
    if (v <= S(0)) throw ContractViolation("composite: nonpositive delta");

  CompositeResult<S> res;
  res.out = Tensor<S>::zeros({r, 4});
  res.weights.resize(static_cast<size_t>(r) * p);

  // alphas cached for the backward pass; accumulation in double throughout
  // so long rays keep the partition of unity tight in float mode.
  auto alphas = std::make_shared<std::vector<S>>(static_cast<size_t>(r) * p);
  auto trans = std::make_shared<std::vector<S>>(static_cast<size_t>(r) * p);
  {
    auto sv = sigma.values();
    auto cv = color.values();
    auto dv = delta.values();
    auto ov = res.out.values_mut();
    for (int ri = 0; ri < r; ++ri) {
      double t = 1.0;
      double rgb[3] = {0, 0, 0};
      for (int pi = 0; pi < p; ++pi) {
        const size_t idx = static_cast<size_t>(ri) * p + pi;
        const double alpha = -std::expm1(-static_cast<double>(sv[idx]) * dv[idx]);
        const double w = t * alpha;
        (*alphas)[idx] = static_cast<S>(alpha);
        (*trans)[idx] = static_cast<S>(t);
        res.weights[idx] = static_cast<S>(w);
        for (int c = 0; c < 3; ++c) rgb[c] += w * cv[static_cast<size_t>(ri) * 3 * p + 3 * pi + c];
        t *= 1.0 - alpha;
      }
      ov[static_cast<size_t>(ri) * 4 + 0] = static_cast<S>(rgb[0]);
      ov[static_cast<size_t>(ri) * 4 + 1] = static_cast<S>(rgb[1]);
      ov[static_cast<size_t>(ri) * 4 + 2] = static_cast<S>(rgb[2]);
      ov[static_cast<size_t>(ri) * 4 + 3] = static_cast<S>(t);
    }
  }
  detail::ensure_finite(res.out, "composite");

  detail::record("composite", {sigma, color}, res.out,
                 [sn = sigma.node(), cn = color.node(), dn = delta.node(), on = res.out.node(),
                  alphas, trans, r, p] {
                   if (on->grad.empty()) return;
                   if (cn->requires_grad) cn->ensure_grad();
                   if (sn->requires_grad) sn->ensure_grad();
                   for (int ri = 0; ri < r; ++ri) {
                     const S* g = on->grad.data() + static_cast<size_t>(ri) * 4;
                     const S g_tf = g[3];
                     const size_t base = static_cast<size_t>(ri) * p;
                     const size_t cbase = static_cast<size_t>(ri) * 3 * p;
                     // d rgb / d c_i = w_i per channel
                     if (cn->requires_grad) {
                       for (int pi = 0; pi < p; ++pi) {
                         const S w = (*trans)[base + pi] * (*alphas)[base + pi];
                         for (int c = 0; c < 3; ++c)
                           cn->grad[cbase + 3 * pi + c] += g[c] * w;
                       }
                     }
                     if (sn->requires_grad) {
                       // suffix[i] = sum_{j>i} <g_rgb, c_j> w_j, built back to front
                       const S t_final = (p > 0)
                                             ? (*trans)[base + p - 1] * (S(1) - (*alphas)[base + p - 1])
                                             : S(1);
                       double suffix = 0.0;
                       for (int pi = p - 1; pi >= 0; --pi) {
                         const double w = static_cast<double>((*trans)[base + pi]) * (*alphas)[base + pi];
                         double gc = 0.0;
                         for (int c = 0; c < 3; ++c)
                           gc += static_cast<double>(g[c]) * cn->values[cbase + 3 * pi + c];
                         const double one_minus_alpha = 1.0 - (*alphas)[base + pi];
                         const double d_sigma =
                             dn->values[base + pi] *
                             (one_minus_alpha * (*trans)[base + pi] * gc - suffix -
                              static_cast<double>(g_tf) * t_final);
                         sn->grad[base + pi] += static_cast<S>(d_sigma);
                         suffix += gc * w;
                       }
                     }
                   }
                 });
  return res;
}

template CompositeResult<float> composite(const Tensor<float>&, const Tensor<float>&,
                                          const Tensor<float>&);
template CompositeResult<double> composite(const Tensor<double>&, const Tensor<double>&,
                                           const Tensor<double>&);

}  // namespace ad

namespace {

// Shared geometry bookkeeping for one batch of rays with fixed per-ray
// t-values: builds positions, per-point direction components, and deltas.
template <typename S>
struct SampledRays {
  int n_rays = 0, n_points = 0;
  ad::Tensor<S> positions;   // [R*P, 3]
  ad::Tensor<S> dir_comps;   // [R*P, 2]
  ad::Tensor<S> delta;       // [R, P]
};

template <typename S>
SampledRays<S> assemble(const std::vector<Ray>& rays,
                        const std::vector<std::vector<double>>& ts) {
  const int r = static_cast<int>(rays.size());
  const int p = static_cast<int>(ts[0].size());
  std::vector<S> pos(static_cast<size_t>(r) * p * 3);
  std::vector<S> dirs(static_cast<size_t>(r) * p * 2);
  std::vector<S> delta(static_cast<size_t>(r) * p);
  for (int ri = 0; ri < r; ++ri) {
    const Ray& ray = rays[ri];
    double dc[2];
    direction_components(ray.dir, dc);
    const auto& t = ts[ri];
    for (int pi = 0; pi < p; ++pi) {
      const size_t idx = static_cast<size_t>(ri) * p + pi;
      pos[idx * 3 + 0] = static_cast<S>(ray.origin.x + t[pi] * ray.dir.x);
      pos[idx * 3 + 1] = static_cast<S>(ray.origin.y + t[pi] * ray.dir.y);
      pos[idx * 3 + 2] = static_cast<S>(ray.origin.z + t[pi] * ray.dir.z);
      dirs[idx * 2 + 0] = static_cast<S>(dc[0]);
      dirs[idx * 2 + 1] = static_cast<S>(dc[1]);
      const double next = (pi + 1 < p) ? t[pi + 1] : ray.t_far;
      double d = next - t[pi];
      if (d <= 0.0) d = 1e-9;  // merged duplicates collapse to a hairline step
      delta[idx] = static_cast<S>(d);
    }
  }
  SampledRays<S> out;
  out.n_rays = r;
  out.n_points = p;
  out.positions = ad::Tensor<S>::from({r * p, 3}, std::move(pos));
  out.dir_comps = ad::Tensor<S>::from({r * p, 2}, std::move(dirs));
  out.delta = ad::Tensor<S>::from({r, p}, std::move(delta));
  return out;
}

// Field query + selection for a sampled batch. interpolate_* takes the exact
// single-slice path at lambda 0/1, so pure renders never pay for the blend.
template <typename S>
std::pair<ad::Tensor<S>, ad::Tensor<S>> query_field(const ConditionalFieldT<S>& field,
                                                    const LabelMix& mix,
                                                    const ad::Tensor<S>& zs_emb,
                                                    const ad::Tensor<S>& za_emb,
                                                    const SampledRays<S>& s) {
  auto out = field.forward(s.positions, s.dir_comps, zs_emb, za_emb);
  auto sigma = ad::reshape(
      fieldsel::interpolate_density(out.sigma_all, mix.class_from, mix.class_to, mix.class_lambda),
      {s.n_rays, s.n_points});
  auto color = ad::reshape(
      fieldsel::interpolate_color(out.color_all, mix.style_from, mix.style_to, mix.style_lambda),
      {s.n_rays, 3 * s.n_points});
  return {sigma, color};
}

}  // namespace

template <typename S>
ad::Tensor<S> render_rays(const ConditionalFieldT<S>& field, const LabelMix& mix,
                          const ad::Tensor<S>& zs_emb, const ad::Tensor<S>& za_emb,
                          const std::vector<Ray>& rays, const RenderConfig& config, Rng& rng) {
  config.validate();
  if (rays.empty()) throw ContractViolation("render_rays: no rays");
  const int r = static_cast<int>(rays.size());

  // Coarse t-values per ray.
  std::vector<std::vector<double>> ts(rays.size());
  for (size_t ri = 0; ri < rays.size(); ++ri)
    ts[ri] = stratified_sample(rays[ri].t_near, rays[ri].t_far, config.n_coarse, rng);

  if (config.hierarchical) {
    // Value-only coarse pass for importance weights.
    std::vector<std::vector<S>> weights(rays.size());
    {
      ad::NoGradGuard<S> guard;
      auto coarse = assemble<S>(rays, ts);
      auto [sigma, color] = query_field(field, mix, zs_emb.detach(), za_emb.detach(), coarse);
      auto res = ad::composite(sigma, color, coarse.delta);
      for (int ri = 0; ri < r; ++ri)
        weights[ri].assign(res.weights.begin() + static_cast<size_t>(ri) * config.n_coarse,
                           res.weights.begin() + static_cast<size_t>(ri + 1) * config.n_coarse);
    }
    for (size_t ri = 0; ri < rays.size(); ++ri) {
      std::vector<double> w(weights[ri].begin(), weights[ri].end());
      auto fine = hierarchical_resample(rays[ri].t_near, rays[ri].t_far, w, config.n_fine, rng);
      auto& t = ts[ri];
      t.insert(t.end(), fine.begin(), fine.end());
      std::sort(t.begin(), t.end());
    }
  }

  auto batch = assemble<S>(rays, ts);
  auto [sigma, color] = query_field(field, mix, zs_emb, za_emb, batch);
  auto res = ad::composite(sigma, color, batch.delta);

  auto rgb = ad::slice(res.out, 1, 0, 3);
  if (!config.white_background) return rgb;
  auto tf = ad::slice(res.out, 1, 3, 4);                          // [R,1]
  auto bg = ad::Tensor<S>::from({1, 3}, {S(1), S(1), S(1)});      // white
  return ad::add(rgb, ad::matmul(tf, bg));
}

template <typename S>
ad::Tensor<S> render_rays(const ConditionalFieldT<S>& field, int class_id, int style_id,
                          const ad::Tensor<S>& zs_emb, const ad::Tensor<S>& za_emb,
                          const std::vector<Ray>& rays, const RenderConfig& config, Rng& rng) {
  return render_rays(field, LabelMix::pure(class_id, style_id), zs_emb, za_emb, rays, config,
                     rng);
}

template ad::Tensor<float> render_rays(const ConditionalFieldT<float>&, const LabelMix&,
                                       const ad::Tensor<float>&, const ad::Tensor<float>&,
                                       const std::vector<Ray>&, const RenderConfig&, Rng&);
template ad::Tensor<double> render_rays(const ConditionalFieldT<double>&, const LabelMix&,
                                        const ad::Tensor<double>&, const ad::Tensor<double>&,
                                        const std::vector<Ray>&, const RenderConfig&, Rng&);
template ad::Tensor<float> render_rays(const ConditionalFieldT<float>&, int, int,
                                       const ad::Tensor<float>&, const ad::Tensor<float>&,
                                       const std::vector<Ray>&, const RenderConfig&, Rng&);
template ad::Tensor<double> render_rays(const ConditionalFieldT<double>&, int, int,
                                        const ad::Tensor<double>&, const ad::Tensor<double>&,
                                        const std::vector<Ray>&, const RenderConfig&, Rng&);

template <typename S>
ad::Tensor<S> render_patch(const ConditionalFieldT<S>& field, int class_id, int style_id,
                           const ad::Tensor<S>& zs_emb, const ad::Tensor<S>& za_emb,
                           const Intrinsics& K, const Pose& pose, const PatchPattern& pattern,
                           const RenderConfig& config, Rng& rng) {
  auto rays = generate_patch_rays(K, pose, pattern, config.t_near, config.t_far);
  return render_rays(field, class_id, style_id, zs_emb, za_emb, rays, config, rng);
}

template ad::Tensor<float> render_patch(const ConditionalFieldT<float>&, int, int,
                                        const ad::Tensor<float>&, const ad::Tensor<float>&,
                                        const Intrinsics&, const Pose&, const PatchPattern&,
                                        const RenderConfig&, Rng&);
template ad::Tensor<double> render_patch(const ConditionalFieldT<double>&, int, int,
                                         const ad::Tensor<double>&, const ad::Tensor<double>&,
                                         const Intrinsics&, const Pose&, const PatchPattern&,
                                         const RenderConfig&, Rng&);

Image render_image(const ConditionalField& field, const LabelMix& mix,
                   const ad::Tensor<float>& zs_emb, const ad::Tensor<float>& za_emb,
                   const Intrinsics& K, const Pose& pose, const RenderConfig& config,
                   uint64_t seed, bool parallel) {
  config.validate();
  K.validate();
  Image img(K.width, K.height);
  const auto zs = zs_emb.detach();
  const auto za = za_emb.detach();
  const CameraFrame frame = pose_to_camera(pose);

  auto render_row = [&](int y) {
    ad::NoGradGuard<float> guard;
    std::vector<Ray> rays;
    rays.reserve(K.width);
    for (int x = 0; x < K.width; ++x) {
      const Vec3 cam_dir{(x - K.cx) / K.fx, -(y - K.cy) / K.fy, -1.0};
      Ray ray;
      ray.origin = frame.position;
      ray.dir = frame.to_world(cam_dir).normalized();
      ray.t_near = config.t_near;
      ray.t_far = config.t_far;
      rays.push_back(ray);
    }
    Rng row_rng = Rng::stream(seed, static_cast<uint64_t>(y));
    auto pixels = render_rays(field, mix, zs, za, rays, config, row_rng);
    auto pv = pixels.values();
    for (int x = 0; x < K.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.pixel(x, y)[c] = pv[static_cast<size_t>(x) * 3 + c];
  };

  if (parallel) {
#pragma omp parallel for schedule(dynamic)
    for (int y = 0; y < K.height; ++y) render_row(y);
  } else {
    for (int y = 0; y < K.height; ++y) render_row(y);
  }
  return img;
}

Image render_image(const ConditionalField& field, int class_id, int style_id,
                   const ad::Tensor<float>& zs_emb, const ad::Tensor<float>& za_emb,
                   const Intrinsics& K, const Pose& pose, const RenderConfig& config,
                   uint64_t seed, bool parallel) {
  return render_image(field, LabelMix::pure(class_id, style_id), zs_emb, za_emb, K, pose, config,
                      seed, parallel);
}

}  // namespace ctrlnerf
