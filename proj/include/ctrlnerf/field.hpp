#pragma once

// Conditional radiance field: one shared-weight MLP with label-embedding
// tables. Input (gamma(x) || z'_s) feeds a trunk producing features h; the
// density head maps h to a per-class array (softplus), and the color head
// maps (h || gamma(d) || z'_a) to a per-style RGB array (sigmoid). Density
// never sees the view direction or appearance code, by construction.

#include <utility>
#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/encoding.hpp"
#include "ctrlnerf/nn.hpp"
#include "ctrlnerf/rng.hpp"

namespace ctrlnerf {

struct FieldConfig {
  int m = 4;  // class count -> density array length
  int n = 4;  // style count -> color array length
  int dim_s = 128;
  int dim_a = 128;
  int trunk_width = 128;
  int trunk_depth = 4;
  EncodingConfig enc;
  double bound = 2.0;  // scene half-extent; positions normalized by this
  bool use_label_embedding = true;

  void validate() const {
    if (m < 1 || n < 1) throw ContractViolation("FieldConfig: label counts must be >= 1");
    if (dim_s < 1 || dim_a < 1 || trunk_width < 1 || trunk_depth < 1)
      throw ContractViolation("FieldConfig: dimensions must be >= 1");
    if (bound <= 0) throw ContractViolation("FieldConfig: bound must be positive");
    enc.validate();
  }
  int pos_enc_dim() const { return 3 * 2 * enc.l_x; }
  int dir_enc_dim() const { return 2 * 2 * enc.l_d; }
};

template <typename S>
struct ConditionalFieldT {
  FieldConfig cfg;
  ad::Tensor<S> class_table;  // [M, dim_s]
  ad::Tensor<S> style_table;  // [N, dim_a]
  Mlp<S> trunk;               // pos_enc + dim_s -> trunk_width^depth
  Linear<S> density_head;     // trunk_width -> M
  Linear<S> color_hidden;     // trunk_width + dir_enc + dim_a -> trunk_width
  Linear<S> color_head;       // trunk_width -> 3N

  static ConditionalFieldT create(const FieldConfig& cfg, Rng& rng);

  // z'_s = z_s (*) class_table[i], z'_a = z_a (*) style_table[j]. Inputs and
  // outputs are [1, dim] rows. With label embedding disabled the codes pass
  // through unchanged.
  std::pair<ad::Tensor<S>, ad::Tensor<S>> embed_labels(const ad::Tensor<S>& z_s,
                                                       const ad::Tensor<S>& z_a, int class_id,
                                                       int style_id) const;

  struct Output {
    ad::Tensor<S> sigma_all;  // [P, M], nonnegative
    ad::Tensor<S> color_all;  // [P, 3N], in [0,1]
  };
  // positions: [P,3] world coordinates; dir_comps: [P,2] angular components
  // of the (unit) view directions.
  Output forward(const ad::Tensor<S>& positions, const ad::Tensor<S>& dir_comps,
                 const ad::Tensor<S>& zs_emb, const ad::Tensor<S>& za_emb) const;

  // Stable parameter order shared by the optimizer and the checkpoint codec.
  std::vector<ad::Tensor<S>> parameters() const;
};

namespace fieldsel {

// sigma_all [P,M] -> [P,1] column for class i.
template <typename S>
ad::Tensor<S> density(const ad::Tensor<S>& sigma_all, int i) {
  return ad::slice(sigma_all, 1, i, i + 1);
}

// color_all [P,3N] -> [P,3] triple for style j.
template <typename S>
ad::Tensor<S> color(const ad::Tensor<S>& color_all, int j) {
  return ad::slice(color_all, 1, 3 * j, 3 * j + 3);
}

// Convex blend (1-lambda)*entry_i + lambda*entry_j; exact at the endpoints.
template <typename S>
ad::Tensor<S> interpolate_density(const ad::Tensor<S>& sigma_all, int i, int j, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw ContractViolation("interpolate_density: lambda outside [0,1]");
  if (lambda == 0.0) return density(sigma_all, i);
  if (lambda == 1.0) return density(sigma_all, j);
  return ad::add(ad::scale(density(sigma_all, i), S(1.0 - lambda)),
                 ad::scale(density(sigma_all, j), S(lambda)));
}

template <typename S>
ad::Tensor<S> interpolate_color(const ad::Tensor<S>& color_all, int i, int j, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw ContractViolation("interpolate_color: lambda outside [0,1]");
  if (lambda == 0.0) return color(color_all, i);
  if (lambda == 1.0) return color(color_all, j);
  return ad::add(ad::scale(color(color_all, i), S(1.0 - lambda)),
                 ad::scale(color(color_all, j), S(lambda)));
}

}  // namespace fieldsel

using ConditionalField = ConditionalFieldT<float>;

extern template struct ConditionalFieldT<float>;
extern template struct ConditionalFieldT<double>;

}  // namespace ctrlnerf
