#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/dataset.hpp"
#include "ctrlnerf/image.hpp"
#include "ctrlnerf/nn.hpp"
#include "ctrlnerf/rng.hpp"

namespace ctrlnerf {

// ---------------------------------------------------------------------------
// Patch discriminator: K x K RGB patch -> one real/fake logit.
// Stride-2 conv stack with spectral normalization on every conv weight and
// affine instance normalization between layers (none after the last conv,
// whose spatial extent can collapse to 1x1 at small patch sizes).

struct DiscriminatorConfig {
  int k_patch = 32;
  int in_channels = 3;
  std::array<int, 4> widths{64, 128, 256, 512};

  void validate() const;
  int feature_side() const { return k_patch / 16; }  // four stride-2 halvings
};

template <typename S>
struct PatchDiscriminatorT {
  struct ConvLayer {
    ad::Tensor<S> w, b;          // w [OC, C, 3, 3]
    SpectralNorm<S> sn;          // persistent power-iteration state for w
    ad::Tensor<S> gamma, beta;   // instance-norm affine (unused on last layer)
    bool normalized = true;
  };

  DiscriminatorConfig cfg;
  std::vector<ConvLayer> convs;
  Linear<S> head;

  static PatchDiscriminatorT create(const DiscriminatorConfig& cfg, Rng& rng);

  // x: [B, C, K, K]. update_sn advances the power iteration (training steps);
  // evaluation passes keep the stored vectors so the map stays deterministic.
  ad::Tensor<S> forward(const ad::Tensor<S>& x, bool update_sn);

  std::vector<ad::Tensor<S>> parameters() const;
};

using PatchDiscriminator = PatchDiscriminatorT<float>;

// ---------------------------------------------------------------------------
// Auxiliary classifier: small VGG-style stack (two 3x3 convs + maxpool per
// block), shared trunk, one linear head per label axis. Head weights start at
// zero so the initial prediction is exactly uniform over classes and styles.

struct ClassifierConfig {
  int resolution = 64;
  int in_channels = 3;
  int m = 4;  // class count
  int n = 4;  // style count
  std::array<int, 4> widths{16, 32, 64, 128};

  void validate() const;
  int feature_side() const { return resolution / 16; }
};

template <typename S>
struct AuxClassifierT {
  struct ConvParam {
    ad::Tensor<S> w, b;
  };

  ClassifierConfig cfg;
  std::vector<ConvParam> convs;  // 8 convs, maxpool after each pair
  Linear<S> class_head, style_head;
  bool pretrained = false;

  static AuxClassifierT create(const ClassifierConfig& cfg, Rng& rng);

  // Trunk + global average pool: x [B, C, R, R] -> [B, widths[3]]. This is
  // the penultimate layer; evaluation metrics use it as the feature space.
  ad::Tensor<S> features(const ad::Tensor<S>& x) const;

  // x: [B, C, R, R] -> (class logits [B, M], style logits [B, N]).
  std::pair<ad::Tensor<S>, ad::Tensor<S>> forward(const ad::Tensor<S>& x) const;

  std::vector<ad::Tensor<S>> parameters() const;
};

using AuxClassifier = AuxClassifierT<float>;

// ---------------------------------------------------------------------------
// Tensor packing helpers.

// Flat ray colors [H*W, 3] (row-major, y outer) -> [1, 3, H, W].
template <typename S>
ad::Tensor<S> rays_to_nchw(const ad::Tensor<S>& rgb, int h, int w) {
  if (rgb.shape().size() != 2 || rgb.shape()[1] != 3 || rgb.shape()[0] != h * w)
    throw ContractViolation("rays_to_nchw: expected [" + std::to_string(h * w) + ", 3]");
  return ad::reshape(ad::transpose2d(rgb), {1, 3, h, w});
}

// Images -> constant [B, 3, R, R] tensor, bilinearly resized as needed.
ad::Tensor<float> pack_images(const std::vector<const Image*>& images, int resolution);

// ---------------------------------------------------------------------------
// Classifier pretraining on a labeled image set.

struct PretrainConfig {
  int steps = 2000;
  int batch = 8;
  double lr = 2e-4;
  int eval_every = 25;  // held-out accuracy cadence; loss logged every step
};

struct PretrainLogEntry {
  int step = 0;
  double loss = 0.0;
  // Held-out accuracies; -1 on steps without an evaluation.
  double class_acc = -1.0;
  double style_acc = -1.0;
};

// Trains both heads with softmax cross-entropy (losses summed). One example
// per (class, style) cell is held out when the cell has at least two; an
// empty cell is a contract violation naming the cell.
AuxClassifier pretrain_classifier(const LabeledImageSet& data, const ClassifierConfig& ccfg,
                                  const PretrainConfig& pcfg, Rng& rng,
                                  std::vector<PretrainLogEntry>* log = nullptr);

// Mean argmax accuracy of both heads over the given items (value-only pass).
std::pair<double, double> classifier_accuracy(AuxClassifier& clf,
                                              const LabeledImageSet& data,
                                              const std::vector<int>& indices);

}  // namespace ctrlnerf
