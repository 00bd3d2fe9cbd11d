#include "ctrlnerf/field.hpp"

namespace ctrlnerf {

template <typename S>
ConditionalFieldT<S> ConditionalFieldT<S>::create(const FieldConfig& cfg, Rng& rng) {
  cfg.validate();
  ConditionalFieldT<S> f;
  f.cfg = cfg;

  // Embedding tables start near all-ones so conditioning begins as a no-op.
  auto make_table = [&](int rows, int dim) {
    std::vector<S> v(static_cast<size_t>(rows) * dim);
    for (auto& x : v) x = S(1) + static_cast<S>(rng.normal() * 0.02);
    return ad::Tensor<S>::param({rows, dim}, std::move(v));
  };
  f.class_table = make_table(cfg.m, cfg.dim_s);
  f.style_table = make_table(cfg.n, cfg.dim_a);

  std::vector<int> widths(static_cast<size_t>(cfg.trunk_depth), cfg.trunk_width);
  f.trunk = Mlp<S>::create(cfg.pos_enc_dim() + cfg.dim_s, widths, rng);
  f.density_head = Linear<S>::create(cfg.trunk_width, cfg.m, rng);
  f.color_hidden =
      Linear<S>::create(cfg.trunk_width + cfg.dir_enc_dim() + cfg.dim_a, cfg.trunk_width, rng);
  f.color_head = Linear<S>::create(cfg.trunk_width, 3 * cfg.n, rng);
  return f;
}

template <typename S>
std::pair<ad::Tensor<S>, ad::Tensor<S>> ConditionalFieldT<S>::embed_labels(
    const ad::Tensor<S>& z_s, const ad::Tensor<S>& z_a, int class_id, int style_id) const {
  if (class_id < 0 || class_id >= cfg.m)
    throw ContractViolation("embed_labels: class id " + std::to_string(class_id) +
                            " outside [0," + std::to_string(cfg.m) + ")");
  if (style_id < 0 || style_id >= cfg.n)
    throw ContractViolation("embed_labels: style id " + std::to_string(style_id) +
                            " outside [0," + std::to_string(cfg.n) + ")");
  if (z_s.numel() != static_cast<size_t>(cfg.dim_s) ||
      z_a.numel() != static_cast<size_t>(cfg.dim_a))
    throw ContractViolation("embed_labels: latent dimension mismatch");
  if (!cfg.use_label_embedding) return {z_s, z_a};
  auto zs = ad::mul(z_s, ad::slice(class_table, 0, class_id, class_id + 1));
  auto za = ad::mul(z_a, ad::slice(style_table, 0, style_id, style_id + 1));
  return {zs, za};
}

template <typename S>
typename ConditionalFieldT<S>::Output ConditionalFieldT<S>::forward(
    const ad::Tensor<S>& positions, const ad::Tensor<S>& dir_comps, const ad::Tensor<S>& zs_emb,
    const ad::Tensor<S>& za_emb) const {
  if (positions.shape().size() != 2 || positions.shape()[1] != 3)
    throw ContractViolation("field forward: positions must be [P,3]");
  if (dir_comps.shape().size() != 2 || dir_comps.shape()[1] != 2 ||
      dir_comps.shape()[0] != positions.shape()[0])
    throw ContractViolation("field forward: direction components must be [P,2]");
  const int p = positions.shape()[0];

  auto enc_x = ad::positional_encode(ad::scale(positions, S(1.0 / cfg.bound)), cfg.enc.l_x);
  auto trunk_in = ad::concat<S>({enc_x, ad::repeat_rows(zs_emb, p)}, 1);
  auto h = trunk.forward(trunk_in);

  Output out;
  out.sigma_all = ad::softplus(density_head.forward(h));

  auto enc_d = ad::positional_encode(dir_comps, cfg.enc.l_d);
  auto color_in = ad::concat<S>({h, enc_d, ad::repeat_rows(za_emb, p)}, 1);
  out.color_all = ad::sigmoid(color_head.forward(ad::relu(color_hidden.forward(color_in))));
  return out;
}

template <typename S>
std::vector<ad::Tensor<S>> ConditionalFieldT<S>::parameters() const {
  std::vector<ad::Tensor<S>> out;
  out.push_back(class_table);
  out.push_back(style_table);
  trunk.collect(out);
  density_head.collect(out);
  color_hidden.collect(out);
  color_head.collect(out);
  return out;
}

template struct ConditionalFieldT<float>;
template struct ConditionalFieldT<double>;

}  // namespace ctrlnerf
