#include "nervesynth/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"

namespace nervesynth::metrics {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix as_matrix(const GaussianStats& s) {
  return Eigen::Map<const Matrix>(s.sigma.data(), static_cast<Eigen::Index>(s.dim),
                                  static_cast<Eigen::Index>(s.dim));
}

double distance(const FeatureVec& a, const FeatureVec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

void check_rows(const std::vector<FeatureVec>& features) {
  for (const auto& f : features)
    if (f.size() != features.front().size()) throw DimensionError("feature vectors differ in length");
}

void check_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": sizes " + std::to_string(a) + " and " + std::to_string(b) +
                         " differ");
  }
}

std::map<int, std::vector<const FeatureVec*>> group(const std::vector<FeatureVec>& features,
                                                    std::span<const int> labels) {
  check_same(features.size(), labels.size(), "features and labels");
  check_rows(features);
  std::map<int, std::vector<const FeatureVec*>> g;
  for (std::size_t i = 0; i < features.size(); ++i) g[labels[i]].push_back(&features[i]);
  return g;
}

}  // namespace

FeatureExtractor::FeatureExtractor(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {
  if (dim == 0) throw ConfigError("feature dimension must be positive");
  Rng rng(seed);
  const std::size_t widths[4] = {1, 8, 16, dim};
  for (int l = 0; l < 3; ++l) {
    Conv c;
    c.in = widths[l];
    c.out = widths[l + 1];
    const double sd = 1.0 / std::sqrt(9.0 * static_cast<double>(c.in));
    c.weight.resize(c.out * c.in * 9);
    for (auto& w : c.weight) w = normal(rng, 0.0, sd);
    c.bias.resize(c.out);
    for (auto& b : c.bias) b = normal(rng, 0.0, 0.1);
    layers_.push_back(std::move(c));
  }
}

FeatureVec FeatureExtractor::operator()(const io::GrayImage& image) const {
  if (image.width < 8 || image.height < 8 || image.pixels.size() != image.width * image.height) {
    throw DimensionError("feature extraction needs an image of at least 8x8");
  }
  std::size_t w = image.width, h = image.height;
  // Centre intensities so that a flat mid-gray image maps near the bias.
  std::vector<double> act(image.pixels.size());
  for (std::size_t i = 0; i < act.size(); ++i) act[i] = 2.0 * image.pixels[i] - 1.0;
  for (const auto& c : layers_) {
    const std::size_t ow = (w + 1) / 2, oh = (h + 1) / 2;
    std::vector<double> out(c.out * ow * oh);
    for (std::size_t o = 0; o < c.out; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = c.bias[o];
          for (std::size_t i = 0; i < c.in; ++i)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const long sy = 2 * static_cast<long>(y) + ky - 1, sx = 2 * static_cast<long>(x) + kx - 1;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                acc += c.weight[((o * c.in + i) * 3 + static_cast<std::size_t>(ky)) * 3 +
                                static_cast<std::size_t>(kx)] *
                       act[(i * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
              }
          out[(o * oh + y) * ow + x] = std::tanh(acc);
        }
    act = std::move(out);
    w = ow;
    h = oh;
  }
  FeatureVec f(dim_, 0.0);
  for (std::size_t o = 0; o < dim_; ++o) {
    for (std::size_t p = 0; p < w * h; ++p) f[o] += act[o * w * h + p];
    f[o] /= static_cast<double>(w * h);
  }
  return f;
}

std::vector<FeatureVec> FeatureExtractor::extract(const std::vector<io::GrayImage>& images) const {
  std::vector<FeatureVec> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back((*this)(im));
  return out;
}

void GaussianStats::validate() const {
  if (mu.size() != dim || sigma.size() != dim * dim) throw DimensionError("Gaussian stats shape mismatch");
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(sigma[i * dim + j] - sigma[j * dim + i]) > 1e-9) {
        throw NumericalError("covariance is not symmetric");
      }
  if (dim > 0) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(as_matrix(*this), Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-8) throw NumericalError("covariance is not positive semidefinite");
  }
}

GaussianStats gaussian_stats(const std::vector<FeatureVec>& features) {
  if (features.size() < 2) throw UndefinedValueError("Gaussian stats need at least two samples");
  check_rows(features);
  GaussianStats s;
  s.dim = features.front().size();
  s.n = features.size();
  s.mu.assign(s.dim, 0.0);
  for (const auto& f : features)
    for (std::size_t i = 0; i < s.dim; ++i) s.mu[i] += f[i];
  for (auto& m : s.mu) m /= static_cast<double>(s.n);
  s.sigma.assign(s.dim * s.dim, 0.0);
  for (const auto& f : features)
    for (std::size_t i = 0; i < s.dim; ++i)
      for (std::size_t j = 0; j <= i; ++j) s.sigma[i * s.dim + j] += (f[i] - s.mu[i]) * (f[j] - s.mu[j]);
  for (std::size_t i = 0; i < s.dim; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      s.sigma[i * s.dim + j] /= static_cast<double>(s.n - 1);
      s.sigma[j * s.dim + i] = s.sigma[i * s.dim + j];
    }
  return s;
}

double fid(const GaussianStats& real, const GaussianStats& gen) {
  check_same(real.dim, gen.dim, "FID feature dimensions");
  real.validate();
  gen.validate();
  double mean_term = 0.0;
  for (std::size_t i = 0; i < real.dim; ++i) mean_term += (real.mu[i] - gen.mu[i]) * (real.mu[i] - gen.mu[i]);
  if (real.dim == 0) return 0.0;

  const Matrix sr = as_matrix(real), sg = as_matrix(gen);
  Eigen::SelfAdjointEigenSolver<Matrix> er(sr);
  const Eigen::VectorXd root = er.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Matrix sr_half = er.eigenvectors() * root.asDiagonal() * er.eigenvectors().transpose();
  Matrix inner = sr_half * sg * sr_half;
  inner = 0.5 * (inner + inner.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> ei(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = mean_term + sr.trace() + sg.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

double psnr(std::span<const double> x, std::span<const double> y, double max_val) {
  check_same(x.size(), y.size(), "PSNR inputs");
  if (x.empty()) throw DimensionError("PSNR of empty images");
  if (!(max_val > 0.0)) throw ConfigError("PSNR max value must be positive");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - y[i]) * (x[i] - y[i]);
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return kInfinity;
  return 10.0 * std::log10(max_val * max_val / mse);
}

double psnr(const io::GrayImage& x, const io::GrayImage& y, double max_val) {
  if (x.width != y.width || x.height != y.height) throw DimensionError("PSNR images differ in shape");
  return psnr(x.pixels, y.pixels, max_val);
}

double ssim(const io::GrayImage& x, const io::GrayImage& y, double max_val, const SsimOptions& o) {
  if (x.width != y.width || x.height != y.height) throw DimensionError("SSIM images differ in shape");
  const std::size_t w = x.width, h = x.height, k = o.window;
  if (k == 0 || w < k || h < k) throw DimensionError("SSIM image smaller than its window");
  const double c1 = (o.k1 * max_val) * (o.k1 * max_val), c2 = (o.k2 * max_val) * (o.k2 * max_val);
  const double nk = static_cast<double>(k * k);
  double total = 0.0;
  for (std::size_t y0 = 0; y0 + k <= h; ++y0)
    for (std::size_t x0 = 0; x0 + k <= w; ++x0) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t v = y0; v < y0 + k; ++v)
        for (std::size_t u = x0; u < x0 + k; ++u) {
          const double a = x.pixels[v * w + u], b = y.pixels[v * w + u];
          sx += a;
          sy += b;
          sxx += a * a;
          syy += b * b;
          sxy += a * b;
        }
      const double mx = sx / nk, my = sy / nk;
      const double vx = std::max(0.0, sxx / nk - mx * mx), vy = std::max(0.0, syy / nk - my * my);
      const double cxy = sxy / nk - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / static_cast<double>((w - k + 1) * (h - k + 1));
}

double intra_class_diversity(const std::vector<FeatureVec>& features) {
  if (features.size() < 2) throw UndefinedValueError("diversity needs at least two samples per class");
  check_rows(features);
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < features.size(); ++i)
    for (std::size_t j = i + 1; j < features.size(); ++j) {
      sum += distance(features[i], features[j]);
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

std::map<int, double> intra_class_diversity(const std::vector<FeatureVec>& features, std::span<const int> labels) {
  std::map<int, double> out;
  for (const auto& [label, members] : group(features, labels)) {
    std::vector<FeatureVec> rows;
    for (const auto* f : members) rows.push_back(*f);
    out[label] = intra_class_diversity(rows);
  }
  return out;
}

double inter_class_separability(const std::vector<FeatureVec>& features, std::span<const int> labels) {
  const auto groups = group(features, labels);
  if (groups.size() < 2) throw ContractError("separability needs at least two classes");
  const std::size_t d = features.front().size();
  std::vector<FeatureVec> centroids;
  double spread = 0.0;
  for (const auto& [label, members] : groups) {
    FeatureVec c(d, 0.0);
    for (const auto* f : members)
      for (std::size_t i = 0; i < d; ++i) c[i] += (*f)[i];
    for (auto& v : c) v /= static_cast<double>(members.size());
    double ss = 0.0;
    for (const auto* f : members) {
      const double r = distance(*f, c);
      ss += r * r;
    }
    spread += std::sqrt(ss / static_cast<double>(members.size()));
    centroids.push_back(std::move(c));
  }
  spread /= static_cast<double>(groups.size());
  double between = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < centroids.size(); ++i)
    for (std::size_t j = i + 1; j < centroids.size(); ++j) {
      between += distance(centroids[i], centroids[j]);
      ++pairs;
    }
  between /= static_cast<double>(pairs);
  if (spread == 0.0) return kInfinity;
  return between / spread;
}

double relative_difference(double a, double b) {
  const double m = std::max(std::abs(a), std::abs(b));
  return m == 0.0 ? 0.0 : std::abs(a - b) / m;
}

double class_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int cls) {
  check_same(pred.size(), truth.size(), "IoU masks");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls, t = truth[i] == cls;
    inter += p && t;
    uni += p || t;
  }
  if (uni == 0) throw UndefinedValueError("class absent from both masks");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int n_classes) {
  check_same(pred.size(), truth.size(), "IoU masks");
  if (n_classes < 1) throw ConfigError("mIoU needs at least one class");
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < n_classes; ++c) {
    const bool present = std::any_of(pred.begin(), pred.end(), [&](auto v) { return v == c; }) ||
                         std::any_of(truth.begin(), truth.end(), [&](auto v) { return v == c; });
    if (!present) continue;
    sum += class_iou(pred, truth, c);
    ++used;
  }
  if (used == 0) throw UndefinedValueError("no class present in either mask");
  return sum / used;
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  check_same(preds.size(), labels.size(), "predictions and labels");
  if (preds.empty()) throw UndefinedValueError("accuracy of an empty set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

}  // namespace nervesynth::metrics
