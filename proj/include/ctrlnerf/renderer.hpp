#pragma once

// Volume rendering: stratified and hierarchical sampling along rays and
// differentiable alpha compositing
//   alpha_i = 1 - exp(-sigma_i * delta_i)
//   T_i     = prod_{j<i} (1 - alpha_j)
//   c_ray   = sum_i T_i alpha_i c_i,   weights w_i = T_i alpha_i.
//
// A separate straight-line reference compositor backs the tests, and the
// full-image path runs rows in parallel with per-row rng streams so the
// result never depends on the thread count.

#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/field.hpp"
#include "ctrlnerf/geometry.hpp"
#include "ctrlnerf/image.hpp"
#include "ctrlnerf/rng.hpp"

namespace ctrlnerf {

struct RenderConfig {
  int n_coarse = 32;
  int n_fine = 32;
  bool hierarchical = true;
  bool white_background = true;
  double t_near = 2.0;
  double t_far = 6.0;

  void validate() const {
    if (n_coarse < 2) throw ContractViolation("RenderConfig: n_coarse must be >= 2");
    if (hierarchical && n_fine < 1)
      throw ContractViolation("RenderConfig: n_fine must be >= 1 when hierarchical");
    if (t_near <= 0 || t_near >= t_far)
      throw ContractViolation("RenderConfig: need 0 < t_near < t_far");
  }
  int points_per_ray() const { return n_coarse + (hierarchical ? n_fine : 0); }
};

// One sample drawn uniformly inside each of n equal bins of [t_near, t_far];
// ascending by construction.
std::vector<double> stratified_sample(double t_near, double t_far, int n, Rng& rng);

// Inverse-transform draws from the piecewise-constant density proportional
// to `weights` over the n equal bins of [t_near, t_far]. All-zero weights
// fall back to stratified sampling. Output is NOT sorted.
std::vector<double> hierarchical_resample(double t_near, double t_far,
                                          const std::vector<double>& weights, int n_fine,
                                          Rng& rng);

namespace ad {

template <typename S>
struct CompositeResult {
  Tensor<S> out;           // [R, 4]: composited RGB and final transmittance
  std::vector<S> weights;  // [R * P] value-only w_i = T_i alpha_i
};

// sigma [R,P] (nonnegative), color [R,3P] (point p at columns 3p..3p+2),
// delta [R,P] (positive, not differentiated).
template <typename S>
CompositeResult<S> composite(const Tensor<S>& sigma, const Tensor<S>& color,
                             const Tensor<S>& delta);

extern template CompositeResult<float> composite(const Tensor<float>&, const Tensor<float>&,
                                                 const Tensor<float>&);
extern template CompositeResult<double> composite(const Tensor<double>&, const Tensor<double>&,
                                                  const Tensor<double>&);

}  // namespace ad

// Straight-line reference used by tests and by the coarse weighting pass:
// identical math, independent code path, no tape.
struct CompositeReference {
  std::vector<double> rgb;      // 3 values
  double t_final = 0;
  std::vector<double> weights;  // per point
};
CompositeReference composite_reference(const std::vector<double>& sigma,
                                       const std::vector<double>& color,
                                       const std::vector<double>& delta);

// Density/color selection for a render: a convex blend between two entries
// of each array head. pure(i, j) selects single entries; lambda 0 or 1 takes
// the exact single-entry path (no arithmetic), so interpolation renders are
// bitwise identical to plain renders at the endpoints.
struct LabelMix {
  int class_from = 0, class_to = 0;
  double class_lambda = 0.0;
  int style_from = 0, style_to = 0;
  double style_lambda = 0.0;

  static LabelMix pure(int class_id, int style_id) {
    return {class_id, class_id, 0.0, style_id, style_id, 0.0};
  }
};

// Renders a set of rays through the field with labels (class_id, style_id)
// and embedded latents; differentiable when a tape is active. Returns [R,3]
// pixels (background already composited).
template <typename S>
ad::Tensor<S> render_rays(const ConditionalFieldT<S>& field, int class_id, int style_id,
                          const ad::Tensor<S>& zs_emb, const ad::Tensor<S>& za_emb,
                          const std::vector<Ray>& rays, const RenderConfig& config, Rng& rng);

template <typename S>
ad::Tensor<S> render_rays(const ConditionalFieldT<S>& field, const LabelMix& mix,
                          const ad::Tensor<S>& zs_emb, const ad::Tensor<S>& za_emb,
                          const std::vector<Ray>& rays, const RenderConfig& config, Rng& rng);

extern template ad::Tensor<float> render_rays(const ConditionalFieldT<float>&, int, int,
                                              const ad::Tensor<float>&, const ad::Tensor<float>&,
                                              const std::vector<Ray>&, const RenderConfig&, Rng&);
extern template ad::Tensor<double> render_rays(const ConditionalFieldT<double>&, int, int,
                                               const ad::Tensor<double>&, const ad::Tensor<double>&,
                                               const std::vector<Ray>&, const RenderConfig&, Rng&);
extern template ad::Tensor<float> render_rays(const ConditionalFieldT<float>&, const LabelMix&,
                                              const ad::Tensor<float>&, const ad::Tensor<float>&,
                                              const std::vector<Ray>&, const RenderConfig&, Rng&);
extern template ad::Tensor<double> render_rays(const ConditionalFieldT<double>&, const LabelMix&,
                                               const ad::Tensor<double>&, const ad::Tensor<double>&,
                                               const std::vector<Ray>&, const RenderConfig&, Rng&);

// Patch render: rays from the pattern under the given camera. [K*K, 3].
template <typename S>
ad::Tensor<S> render_patch(const ConditionalFieldT<S>& field, int class_id, int style_id,
                           const ad::Tensor<S>& zs_emb, const ad::Tensor<S>& za_emb,
                           const Intrinsics& K, const Pose& pose, const PatchPattern& pattern,
                           const RenderConfig& config, Rng& rng);

extern template ad::Tensor<float> render_patch(const ConditionalFieldT<float>&, int, int,
                                               const ad::Tensor<float>&, const ad::Tensor<float>&,
                                               const Intrinsics&, const Pose&, const PatchPattern&,
                                               const RenderConfig&, Rng&);
extern template ad::Tensor<double> render_patch(const ConditionalFieldT<double>&, int, int,
                                                const ad::Tensor<double>&, const ad::Tensor<double>&,
                                                const Intrinsics&, const Pose&, const PatchPattern&,
                                                const RenderConfig&, Rng&);

// Full-image render, value-only (never records). Rows are independent jobs
// seeded by Rng::stream(seed, row), so serial and parallel execution produce
// bitwise identical images.
Image render_image(const ConditionalField& field, int class_id, int style_id,
                   const ad::Tensor<float>& zs_emb, const ad::Tensor<float>& za_emb,
                   const Intrinsics& K, const Pose& pose, const RenderConfig& config,
                   uint64_t seed, bool parallel = true);

Image render_image(const ConditionalField& field, const LabelMix& mix,
                   const ad::Tensor<float>& zs_emb, const ad::Tensor<float>& za_emb,
                   const Intrinsics& K, const Pose& pose, const RenderConfig& config,
                   uint64_t seed, bool parallel = true);

}  // namespace ctrlnerf
