#pragma once

#include <vector>

#include "ctrlnerf/discriminator.hpp"
#include "ctrlnerf/image.hpp"

namespace ctrlnerf {

// Row-major feature matrix: one row per image.
struct FeatureMatrix {
  int n = 0;
  int dim = 0;
  std::vector<double> data;

  double at(int row, int col) const { return data[static_cast<size_t>(row) * dim + col]; }
};

// Sample mean and covariance of a feature set (covariance normalized by n-1).
struct FeatureStats {
  int dim = 0;
  long n = 0;
  std::vector<double> mean;  // [dim]
  std::vector<double> cov;   // [dim, dim], symmetric

  void validate() const;
};

FeatureStats compute_stats(const FeatureMatrix& features);

// Squared Frechet distance between Gaussians fitted to two feature sets:
// |m_r - m_g|^2 + Tr(C_r + C_g - 2 (C_r C_g)^{1/2}). The matrix square root
// goes through the symmetric product C_r^{1/2} C_g C_r^{1/2}; eigenvalues
// below -1e-6 are an error, small negatives are clamped to zero.
double frechet_distance(const FeatureStats& real, const FeatureStats& gen);

// Unbiased squared MMD with the polynomial kernel k(x,y) = (x.y/dim + 1)^3,
// diagonal terms excluded. Both sets need at least two rows.
double kid(const FeatureMatrix& real, const FeatureMatrix& gen);

// 10*log10(max^2 / MSE) over all pixels and channels; identical images give
// +infinity.
double psnr(const Image& a, const Image& b, double max_value);

// Mean structural similarity over non-overlapping 8x8 windows and channels,
// C1 = (0.01 max)^2, C2 = (0.03 max)^2, biased window statistics.
double ssim(const Image& a, const Image& b, double max_value = 1.0);

// Penultimate-layer activations of the pretrained classifier, one row per
// image. Images must already be at the classifier resolution.
FeatureMatrix extract_features(const std::vector<const Image*>& images,
                               const AuxClassifier& classifier);

}  // namespace ctrlnerf
