#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "nervesynth/io/image.hpp"

namespace nervesynth::metrics {

using FeatureVec = std::vector<double>;

// Frozen random convolutional feature map standing in for Inception-v3:
// three 3x3 stride-2 convolutions with tanh, then global average pooling.
// FID values are comparable only between runs sharing the seed.
class FeatureExtractor {
 public:
  static constexpr std::uint64_t kDefaultSeed = 20240917;

  explicit FeatureExtractor(std::uint64_t seed = kDefaultSeed, std::size_t dim = 64);

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  FeatureVec operator()(const io::GrayImage& image) const;
  std::vector<FeatureVec> extract(const std::vector<io::GrayImage>& images) const;

 private:
  struct Conv {
    std::size_t in = 0, out = 0;
    std::vector<double> weight;  // [out][in][3][3]
    std::vector<double> bias;
  };
  std::uint64_t seed_;
  std::size_t dim_;
  std::vector<Conv> layers_;
};

struct GaussianStats {
  std::size_t dim = 0;
  std::vector<double> mu;
  std::vector<double> sigma;  // dim x dim, row-major
  std::size_t n = 0;

  // Symmetric within 1e-9 and eigenvalues >= -1e-8.
  void validate() const;
};

// Sample mean and unbiased covariance; needs at least two rows.
GaussianStats gaussian_stats(const std::vector<FeatureVec>& features);

// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2), with
// negative eigenvalues clamped at zero.
double fid(const GaussianStats& real, const GaussianStats& gen);

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// 10 log10(max^2 / MSE); +infinity for identical inputs.
double psnr(std::span<const double> x, std::span<const double> y, double max_val = 1.0);
double psnr(const io::GrayImage& x, const io::GrayImage& y, double max_val = 1.0);

struct SsimOptions {
  std::size_t window = 8;  // uniform window, stride 1
  double k1 = 0.01;
  double k2 = 0.03;
};
double ssim(const io::GrayImage& x, const io::GrayImage& y, double max_val = 1.0,
            const SsimOptions& options = {});

// Mean pairwise Euclidean distance.
double intra_class_diversity(const std::vector<FeatureVec>& features);
std::map<int, double> intra_class_diversity(const std::vector<FeatureVec>& features,
                                            std::span<const int> labels);

// Mean pairwise distance between class centroids over the mean within-class
// RMS distance to the centroid. +infinity when every class is a single point.
double inter_class_separability(const std::vector<FeatureVec>& features, std::span<const int> labels);

// |a - b| / max(|a|, |b|); 0 when both are 0.
double relative_difference(double a, double b);

// Mean over classes of |pred == c and true == c| / |pred == c or true == c|,
// skipping classes absent from both.
double miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int n_classes = 2);
double class_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int cls);

double accuracy(std::span<const int> preds, std::span<const int> labels);

}  // namespace nervesynth::metrics
