#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fashionflow/tensor.hpp"

namespace ff {

using FeatureRows = std::vector<std::vector<double>>;  // (n, d)

// Gaussian fit of a feature set. `sigma` is row-major (d, d).
struct MetricStats {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::int64_t n = 0;
  std::size_t dim() const { return mu.size(); }
  double cov(std::size_t i, std::size_t j) const { return sigma[i * mu.size() + j]; }
};

// Sample mean and unbiased covariance (n >= 2), accumulated in row order.
MetricStats fit_gaussian(const FeatureRows& features);

// |mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2)), with the trace of the
// square root taken from the eigenvalues of sqrt(S_r) S_g sqrt(S_r).
// Eigenvalues below -1e-6 (relative to the largest) raise NumericError;
// smaller negatives are clamped to zero.
double frechet_distance(const MetricStats& r, const MetricStats& g);

// exp(mean_i KL(p_i || p_y)) with p_y the column mean and 0 log 0 = 0.
double inception_score(const FeatureRows& probs);

// Fixed seeded spatiotemporal feature map, video (f, 3, H, W) -> (dim).
// Frames are weighted by a rising ramp after a causal temporal convolution,
// so reversing a video changes its features.
class FeatureExtractor {
 public:
  static FeatureExtractor build(std::uint64_t seed, int dim = 16);

  std::vector<double> extract(const Tensor& video, int window) const;
  int dim() const { return dim_; }

 private:
  int dim_ = 0;
  int hidden_ = 8;
  Tensor conv_w_, conv_b_;  // (hidden, 3, 3, 3), (hidden)
  Tensor time_k_;           // (hidden, 3)
  Tensor proj_w_, proj_b_;  // (dim, 4*hidden), (dim)
};

// Fixed seeded classifier, video (f, 3, H, W) -> probabilities over K classes.
class ClassifierStub {
 public:
  static ClassifierStub build(std::uint64_t seed, int classes = 10);

  std::vector<double> classify(const Tensor& video) const;
  int classes() const { return classes_; }

 private:
  int classes_ = 0;
  Tensor w_, b_;  // (K, 48), (K)
};

enum class Metric { fvd, vfid, is };

Metric parse_metric(const std::string& text);
std::string to_string(Metric m);

struct EvalOptions {
  int fvd_window = 16;  // frames read by fvd; shorter videos are rejected
  int vfid_max = 60;    // vfid reads min(frames, vfid_max)
  std::uint64_t seed = 0;
};

// Videos are (f, 3, H, W). For IS only `fake` is used.
double evaluate_videos(const std::vector<Tensor>& real, const std::vector<Tensor>& fake,
                       const FeatureExtractor& extractor, Metric metric, const EvalOptions& options = {});

}  // namespace ff
