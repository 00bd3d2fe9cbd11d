#pragma once

// Training loops: the adversarial game between patch renders of the
// conditional field and a spectral-normalized patch discriminator (with R1
// gradient penalty and auxiliary classifier losses), plus a reconstruction
// mode for posed datasets that swaps the adversarial term for pixel MSE.
//
// Loss shapes, with f(t) = -log(1 + exp(-t)) = -softplus(-t):
//   loss_D = softplus(d_fake) + softplus(-d_real) + lambda_r1 * |grad D|^2
//   loss_G = softplus(-d_fake) + lambda1 * CE_class + lambda2 * CE_style
//
// The R1 penalty needs a gradient of a gradient, which the single-level tape
// cannot provide; the loss therefore carries a forward-difference surrogate
// (discriminator evaluated at x and x + eps*u over random unit directions u)
// whose expectation matches the exact penalty, while r1_penalty() computes
// the exact value for reporting and tests.

#include <cmath>
#include <concepts>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/dataset.hpp"
#include "ctrlnerf/discriminator.hpp"
#include "ctrlnerf/field.hpp"
#include "ctrlnerf/optimizer.hpp"
#include "ctrlnerf/renderer.hpp"
#include "ctrlnerf/rng.hpp"

namespace ctrlnerf {

enum class TrainMode { adversarial, reconstruction };

struct TrainConfig {
  TrainMode mode = TrainMode::adversarial;
  double lambda1 = 2.0;     // class cross-entropy weight
  double lambda2 = 3.0;     // style cross-entropy weight
  double lambda_r1 = 10.0;  // gradient penalty weight
  int batch_size = 8;
  float lr_g = 5e-4f;
  float lr_d = 1e-4f;
  int iterations = 10000;
  uint64_t seed = 0;
  int m = 4, n = 4;  // label counts of the dataset / classifier
  int k_patch = 32;
  // Patch footprint as a fraction of the image extent.
  double patch_scale_min = 0.125, patch_scale_max = 1.0;
  RenderConfig render;
  PoseRanges poses;
  // Ablation switches: identity label embedding / scalar density+color heads.
  bool use_label_embedding = true;
  bool array_outputs = true;

  void validate() const;
};

// Field dimensions implied by a train config: scalar heads when array outputs
// are disabled, embedding flag forwarded.
FieldConfig make_field_config(const TrainConfig& t, FieldConfig base);

// Returns `base` with one generator mechanism disabled:
//   no_label_input -> identity embeddings
//   no_array_output -> single-entry density/color heads
//   no_classifier  -> lambda1 = lambda2 = 0
TrainConfig ablation_config(const std::string& which, TrainConfig base = {});

struct StepReport {
  int iteration = 0;
  double l_adv = 0;  // adversarial term (reconstruction mode: pixel MSE)
  double l_cls = 0;
  double l_sty = 0;
  double r1 = 0;  // penalty value as used in the discriminator loss
  double total = 0;  // l_adv + lambda1 * l_cls + lambda2 * l_sty
  double loss_d = 0;
  double seconds = 0;
};

// Formats a report as the append-only metrics log line
// iter<TAB>l_adv<TAB>l_cls<TAB>l_sty<TAB>r1<TAB>total<TAB>seconds.
std::string format_report(const StepReport& r);

template <typename S>
struct GanLosses {
  ad::Tensor<S> loss_g;
  ad::Tensor<S> loss_d;
};

// Nonsaturating GAN losses from raw logits (any shape, averaged) and a scalar
// squared-gradient-norm tensor. lambda_r1 == 0 drops the penalty term from
// the graph entirely.
template <typename S>
GanLosses<S> gan_losses(const ad::Tensor<S>& d_real, const ad::Tensor<S>& d_fake,
                        const ad::Tensor<S>& grad_norm2, double lambda_r1);

extern template GanLosses<float> gan_losses(const ad::Tensor<float>&, const ad::Tensor<float>&,
                                            const ad::Tensor<float>&, double);
extern template GanLosses<double> gan_losses(const ad::Tensor<double>&, const ad::Tensor<double>&,
                                             const ad::Tensor<double>&, double);

// Exact squared L2 norm of d(sum of discriminator outputs)/d(patch), computed
// value-only on a private tape. `discriminate` maps a patch tensor to logits.
template <typename S, typename F>
  requires std::invocable<F&, const ad::Tensor<S>&>
S r1_penalty(F&& discriminate, const ad::Tensor<S>& patch) {
  ad::Tape<S> tape;
  auto x = patch.detach();
  x.set_requires_grad(true);
  auto y = discriminate(x);
  auto root = y.numel() == 1 ? y : ad::sum(y);
  if (!root.requires_grad()) return S(0);  // output does not depend on the patch
  tape.backward(root);
  if (!x.has_grad()) return S(0);
  double acc = 0;
  for (S g : x.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  return static_cast<S>(acc);
}

template <typename S>
S r1_penalty(PatchDiscriminatorT<S>& d, const ad::Tensor<S>& patch) {
  return r1_penalty([&](const ad::Tensor<S>& x) { return d.forward(x, false); }, patch);
}

// Differentiable surrogate for the R1 penalty: dim * mean over n_dirs random
// unit directions u of ((sum D(x + eps*u) - base_sum) / eps)^2, where
// base_sum must be sum D(x) evaluated under the same discriminator state.
// Expectation over u equals the exact penalty up to O(eps); gradients flow
// into the discriminator parameters through both evaluations.
template <typename S, typename F>
ad::Tensor<S> r1_surrogate(F&& discriminate, const ad::Tensor<S>& patch,
                           const ad::Tensor<S>& base_sum, double eps, int n_dirs, Rng& rng) {
  if (eps <= 0) throw ContractViolation("r1_surrogate: eps must be positive");
  if (n_dirs < 1) throw ContractViolation("r1_surrogate: need at least one direction");
  if (base_sum.numel() != 1) throw ContractViolation("r1_surrogate: base_sum must be scalar");
  const size_t dim = patch.numel();
  ad::Tensor<S> acc;
  for (int k = 0; k < n_dirs; ++k) {
    std::vector<S> xp(patch.values().begin(), patch.values().end());
    std::vector<double> u(dim);
    double norm2 = 0;
    for (size_t i = 0; i < dim; ++i) {
      u[i] = rng.normal();
      norm2 += u[i] * u[i];
    }
    const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-300));
    for (size_t i = 0; i < dim; ++i) xp[i] += static_cast<S>(eps * u[i] * inv);
    auto shifted = ad::Tensor<S>::from(patch.shape(), std::move(xp));
    auto diff = ad::sub(ad::sum(discriminate(shifted)), base_sum);
    auto sq = ad::mul(diff, diff);
    acc = acc.defined() ? ad::add(acc, sq) : sq;
  }
  return ad::scale(acc, static_cast<S>(static_cast<double>(dim) / (n_dirs * eps * eps)));
}

struct TrainState {
  TrainConfig cfg;
  ConditionalField* field = nullptr;
  PatchDiscriminator* disc = nullptr;        // adversarial mode only
  const AuxClassifier* classifier = nullptr;  // required when lambda1 or lambda2 > 0
  Intrinsics intrinsics;                      // camera of the real images
  std::optional<RmsProp<float>> opt_g;
  std::optional<RmsProp<float>> opt_d;
  int iteration = 0;
  std::filesystem::path run_dir = ".";  // replay files on numeric abort

  // Validates the wiring, freezes the classifier parameters, and builds the
  // optimizers (label tables are excluded when embeddings are disabled).
  static TrainState create(const TrainConfig& cfg, ConditionalField& field,
                           PatchDiscriminator* disc, const AuxClassifier* classifier,
                           const Intrinsics& intrinsics);
};

// One adversarial iteration over `batch` (indices into `data`): render fake
// patches at sampled labels/latents/poses/patterns, extract real patches at
// the same patterns, one discriminator update, then one generator update.
// A non-finite value anywhere aborts with the entry rng state written to a
// replay file under run_dir and a NumericError naming it.
StepReport train_step_adversarial(TrainState& st, const LabeledImageSet& data,
                                  const std::vector<int>& batch, Rng& rng);

struct PosedImage {
  const Image* image = nullptr;
  int class_id = 0;
  int style_id = 0;
  std::optional<Pose> pose;
};

// One reconstruction iteration: render the full image at the true pose with
// the true labels and take pixel MSE (plus classifier terms); generator-side
// update only. A missing pose is a contract violation.
StepReport train_step_reconstruction(TrainState& st, const PosedImage& item, Rng& rng);

// Guards a training run: creates dir/.train.lock exclusively, removes it on
// destruction. A pre-existing lock raises IoError naming the file.
class TrainLock {
 public:
  explicit TrainLock(const std::filesystem::path& dir);
  ~TrainLock();
  TrainLock(const TrainLock&) = delete;
  TrainLock& operator=(const TrainLock&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Runs cfg.iterations steps in the configured mode, holding the run lock,
// appending one metrics line per step to `metrics_log` (when non-null) and
// collecting every report.
std::vector<StepReport> run_training(TrainState& st, const LabeledImageSet& data,
                                     std::ostream* metrics_log);

}  // namespace ctrlnerf
