#include "ctrlnerf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues;
// when vectors != nullptr it receives the orthonormal eigenvectors as columns.
std::vector<double> jacobi_eigen(std::vector<double> a, int d, std::vector<double>* vectors) {
  std::vector<double> v;
  if (vectors != nullptr) {
    v.assign(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) v[static_cast<size_t>(i) * d + i] = 1.0;
  }
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) off += a[static_cast<size_t>(p) * d + q] * a[static_cast<size_t>(p) * d + q];
    if (off < 1e-26) break;
    for (int p = 0; p < d - 1; ++p)
      for (int q = p + 1; q < d; ++q) {
        const double apq = a[static_cast<size_t>(p) * d + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = a[static_cast<size_t>(p) * d + p];
        const double aqq = a[static_cast<size_t>(q) * d + q];
        const double theta = 0.5 * std::atan2(2.0 * apq, app - aqq);
        const double c = std::cos(theta), s = std::sin(theta);
        for (int k = 0; k < d; ++k) {
          const double akp = a[static_cast<size_t>(k) * d + p];
          const double akq = a[static_cast<size_t>(k) * d + q];
          a[static_cast<size_t>(k) * d + p] = c * akp + s * akq;
          a[static_cast<size_t>(k) * d + q] = -s * akp + c * akq;
        }
        for (int k = 0; k < d; ++k) {
          const double apk = a[static_cast<size_t>(p) * d + k];
          const double aqk = a[static_cast<size_t>(q) * d + k];
          a[static_cast<size_t>(p) * d + k] = c * apk + s * aqk;
          a[static_cast<size_t>(q) * d + k] = -s * apk + c * aqk;
        }
        if (vectors != nullptr)
          for (int k = 0; k < d; ++k) {
            const double vkp = v[static_cast<size_t>(k) * d + p];
            const double vkq = v[static_cast<size_t>(k) * d + q];
            v[static_cast<size_t>(k) * d + p] = c * vkp + s * vkq;
            v[static_cast<size_t>(k) * d + q] = -s * vkp + c * vkq;
          }
      }
  }
  std::vector<double> values(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) values[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * d + i];
  if (vectors != nullptr) *vectors = std::move(v);
  return values;
}

std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b, int d) {
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < d; ++k) {
      const double aik = a[static_cast<size_t>(i) * d + k];
      if (aik == 0.0) continue;
      for (int j = 0; j < d; ++j)
        out[static_cast<size_t>(i) * d + j] += aik * b[static_cast<size_t>(k) * d + j];
    }
  return out;
}

// Clamp tiny negative eigenvalues of a PSD matrix; reject real negatives.
void check_psd(std::vector<double>& eigenvalues, const char* what) {
  for (double& ev : eigenvalues) {
    if (ev < -1e-6)
      throw ContractViolation(std::string(what) + ": eigenvalue " + std::to_string(ev) +
                              " below PSD tolerance");
    if (ev < 0.0) ev = 0.0;
  }
}

// Q diag(f(lambda)) Q^T
std::vector<double> rebuild(const std::vector<double>& q, const std::vector<double>& lambda,
                            int d) {
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k)
        acc += q[static_cast<size_t>(i) * d + k] * lambda[static_cast<size_t>(k)] *
               q[static_cast<size_t>(j) * d + k];
      out[static_cast<size_t>(i) * d + j] = acc;
    }
  return out;
}

double kernel_poly3(const double* x, const double* y, int dim) {
  double dot = 0.0;
  for (int i = 0; i < dim; ++i) dot += x[i] * y[i];
  const double base = dot / dim + 1.0;
  return base * base * base;
}

}  // namespace

void FeatureStats::validate() const {
  if (dim < 1 || n < 2) throw ContractViolation("FeatureStats: need dim >= 1 and n >= 2");
  if (mean.size() != static_cast<size_t>(dim) ||
      cov.size() != static_cast<size_t>(dim) * static_cast<size_t>(dim))
    throw ContractViolation("FeatureStats: mean/cov size mismatch");
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j)
      if (std::abs(cov[static_cast<size_t>(i) * dim + j] - cov[static_cast<size_t>(j) * dim + i]) >
          1e-8)
        throw ContractViolation("FeatureStats: covariance not symmetric within 1e-8");
}

FeatureStats compute_stats(const FeatureMatrix& features) {
  if (features.n < 2 || features.dim < 1)
    throw ContractViolation("compute_stats: need at least 2 rows");
  if (features.data.size() != static_cast<size_t>(features.n) * features.dim)
    throw ContractViolation("compute_stats: data size mismatch");
  FeatureStats s;
  s.dim = features.dim;
  s.n = features.n;
  s.mean.assign(static_cast<size_t>(s.dim), 0.0);
  for (int r = 0; r < features.n; ++r)
    for (int c = 0; c < features.dim; ++c) s.mean[static_cast<size_t>(c)] += features.at(r, c);
  for (double& m : s.mean) m /= features.n;
  s.cov.assign(static_cast<size_t>(s.dim) * s.dim, 0.0);
  for (int r = 0; r < features.n; ++r)
    for (int i = 0; i < s.dim; ++i) {
      const double di = features.at(r, i) - s.mean[static_cast<size_t>(i)];
      for (int j = i; j < s.dim; ++j)
        s.cov[static_cast<size_t>(i) * s.dim + j] +=
            di * (features.at(r, j) - s.mean[static_cast<size_t>(j)]);
    }
  for (int i = 0; i < s.dim; ++i)
    for (int j = i; j < s.dim; ++j) {
      const double v = s.cov[static_cast<size_t>(i) * s.dim + j] / (features.n - 1);
      s.cov[static_cast<size_t>(i) * s.dim + j] = v;
      s.cov[static_cast<size_t>(j) * s.dim + i] = v;
    }
  return s;
}

double frechet_distance(const FeatureStats& real, const FeatureStats& gen) {
  real.validate();
  gen.validate();
  if (real.dim != gen.dim) throw ContractViolation("frechet_distance: dimension mismatch");
  const int d = real.dim;

  // C_r^{1/2} by eigendecomposition
  std::vector<double> q;
  auto lam = jacobi_eigen(real.cov, d, &q);
  check_psd(lam, "frechet_distance: real covariance");
  for (double& ev : lam) ev = std::sqrt(ev);
  auto root_r = rebuild(q, lam, d);

  // symmetrized product C_r^{1/2} C_g C_r^{1/2}
  auto prod = mat_mul(mat_mul(root_r, gen.cov, d), root_r, d);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      const double v = 0.5 * (prod[static_cast<size_t>(i) * d + j] + prod[static_cast<size_t>(j) * d + i]);
      prod[static_cast<size_t>(i) * d + j] = v;
      prod[static_cast<size_t>(j) * d + i] = v;
    }
  auto mu = jacobi_eigen(std::move(prod), d, nullptr);
  check_psd(mu, "frechet_distance: cross term");

  double value = 0.0;
  for (int i = 0; i < d; ++i) {
    const double dm = real.mean[static_cast<size_t>(i)] - gen.mean[static_cast<size_t>(i)];
    value += dm * dm;
    value += real.cov[static_cast<size_t>(i) * d + i] + gen.cov[static_cast<size_t>(i) * d + i];
    value -= 2.0 * std::sqrt(mu[static_cast<size_t>(i)]);
  }
  return std::max(0.0, value);
}

double kid(const FeatureMatrix& real, const FeatureMatrix& gen) {
  if (real.n < 2 || gen.n < 2) throw ContractViolation("kid: need at least 2 samples per set");
  if (real.dim != gen.dim) throw ContractViolation("kid: dimension mismatch");
  const int dim = real.dim;

  double xx = 0.0;
  for (int i = 0; i < real.n; ++i)
    for (int j = 0; j < real.n; ++j)
      if (i != j)
        xx += kernel_poly3(real.data.data() + static_cast<size_t>(i) * dim,
                           real.data.data() + static_cast<size_t>(j) * dim, dim);
  double yy = 0.0;
  for (int i = 0; i < gen.n; ++i)
    for (int j = 0; j < gen.n; ++j)
      if (i != j)
        yy += kernel_poly3(gen.data.data() + static_cast<size_t>(i) * dim,
                           gen.data.data() + static_cast<size_t>(j) * dim, dim);
  // Equal-size sets use the fully diagonal-free U-statistic (matched pairs
  // excluded from the cross term), which cancels exactly on identical sets;
  // unequal sizes fall back to the all-pairs cross mean, equally unbiased.
  const bool matched = real.n == gen.n;
  double xy = 0.0;
  for (int i = 0; i < real.n; ++i)
    for (int j = 0; j < gen.n; ++j)
      if (!matched || i != j)
        xy += kernel_poly3(real.data.data() + static_cast<size_t>(i) * dim,
                           gen.data.data() + static_cast<size_t>(j) * dim, dim);
  const double cross_pairs = matched ? static_cast<double>(real.n) * (real.n - 1)
                                     : static_cast<double>(real.n) * gen.n;

  return xx / (static_cast<double>(real.n) * (real.n - 1)) +
         yy / (static_cast<double>(gen.n) * (gen.n - 1)) - 2.0 * xy / cross_pairs;
}

double psnr(const Image& a, const Image& b, double max_value) {
  if (a.width != b.width || a.height != b.height)
    throw ContractViolation("psnr: shape mismatch");
  if (a.empty()) throw ContractViolation("psnr: empty image");
  if (!(max_value > 0.0)) throw ContractViolation("psnr: max_value must be positive");
  double mse = 0.0;
  for (size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.rgb.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_value * max_value / mse);
}

double ssim(const Image& a, const Image& b, double max_value) {
  if (a.width != b.width || a.height != b.height)
    throw ContractViolation("ssim: shape mismatch");
  if (!(max_value > 0.0)) throw ContractViolation("ssim: max_value must be positive");
  constexpr int kWin = 8;
  const int tx = a.width / kWin, ty = a.height / kWin;
  if (tx < 1 || ty < 1) throw ContractViolation("ssim: image smaller than an 8x8 window");
  const double c1 = (0.01 * max_value) * (0.01 * max_value);
  const double c2 = (0.03 * max_value) * (0.03 * max_value);

  double total = 0.0;
  long windows = 0;
  for (int wy = 0; wy < ty; ++wy)
    for (int wx = 0; wx < tx; ++wx)
      for (int ch = 0; ch < 3; ++ch) {
        double ma = 0.0, mb = 0.0;
        for (int y = 0; y < kWin; ++y)
          for (int x = 0; x < kWin; ++x) {
            ma += a.pixel(wx * kWin + x, wy * kWin + y)[ch];
            mb += b.pixel(wx * kWin + x, wy * kWin + y)[ch];
          }
        ma /= kWin * kWin;
        mb /= kWin * kWin;
        double va = 0.0, vb = 0.0, vab = 0.0;
        for (int y = 0; y < kWin; ++y)
          for (int x = 0; x < kWin; ++x) {
            const double da = a.pixel(wx * kWin + x, wy * kWin + y)[ch] - ma;
            const double db = b.pixel(wx * kWin + x, wy * kWin + y)[ch] - mb;
            va += da * da;
            vb += db * db;
            vab += da * db;
          }
        va /= kWin * kWin;
        vb /= kWin * kWin;
        vab /= kWin * kWin;
        total += (2.0 * ma * mb + c1) * (2.0 * vab + c2) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
  return total / static_cast<double>(windows);
}

FeatureMatrix extract_features(const std::vector<const Image*>& images,
                               const AuxClassifier& classifier) {
  if (!classifier.pretrained)
    throw ContractViolation("extract_features: classifier has not been pretrained");
  if (images.empty()) throw ContractViolation("extract_features: empty image list");
  const int res = classifier.cfg.resolution;
  for (const Image* img : images)
    if (img == nullptr || img->width != res || img->height != res)
      throw ContractViolation("extract_features: images must match classifier resolution " +
                              std::to_string(res));

  FeatureMatrix out;
  out.n = static_cast<int>(images.size());
  out.dim = classifier.cfg.widths[3];
  out.data.assign(static_cast<size_t>(out.n) * out.dim, 0.0);

  constexpr int kChunk = 8;
  const int chunks = (out.n + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(dynamic)
  for (int c = 0; c < chunks; ++c) {
    ad::NoGradGuard<float> guard;
    const int start = c * kChunk;
    const int stop = std::min(out.n, start + kChunk);
    std::vector<const Image*> chunk(images.begin() + start, images.begin() + stop);
    auto feats = classifier.features(pack_images(chunk, res));
    auto fv = feats.values();
    for (int i = 0; i < stop - start; ++i)
      for (int j = 0; j < out.dim; ++j)
        out.data[static_cast<size_t>(start + i) * out.dim + j] =
            static_cast<double>(fv[static_cast<size_t>(i) * out.dim + j]);
  }
  return out;
}

}  // namespace ctrlnerf
