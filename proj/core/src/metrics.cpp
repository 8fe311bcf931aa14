#include "fashionflow/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "fashionflow/errors.hpp"
#include "fashionflow/layers.hpp"
#include "fashionflow/parallel.hpp"

namespace ff {

namespace {

using Mat = Eigen::MatrixXd;

Mat to_matrix(const MetricStats& s) {
  const auto d = static_cast<Eigen::Index>(s.dim());
  Mat m(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = s.sigma[static_cast<std::size_t>(i * d + j)];
  }
  return m;
}

// Eigenvalues of a symmetric matrix with the rejection / clamping rule.
Eigen::SelfAdjointEigenSolver<Mat> checked_eigen(const Mat& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-6 * scale) {
    throw NumericError(std::string(what) + " has eigenvalue " + std::to_string(es.eigenvalues().minCoeff()) +
                       ", not positive semi-definite");
  }
  return es;
}

// Eigenvalues at round-off level (below d * eps of the largest) are zeroed
// before the square root, where they would otherwise contribute ~sqrt(eps)
// and break symmetry for rank-deficient covariances.
Eigen::VectorXd clamped(const Eigen::VectorXd& ev) {
  if (ev.size() == 0) return ev;
  const double top = ev.cwiseAbs().maxCoeff();
  const double floor = static_cast<double>(ev.size()) * std::numeric_limits<double>::epsilon() * top;
  return ev.unaryExpr([floor](double v) { return v <= floor ? 0.0 : v; });
}

// (h, w) frame planes averaged 2x2 until the side is at most 16.
Tensor pool_frames(const Tensor& frames) {
  Tape tape(false);
  Var x = tape.constant(frames);
  while (x.dim(-1) > 16 && x.dim(-1) % 2 == 0 && x.dim(-2) % 2 == 0) x = ops::avg_pool2(x);
  return x.value();
}

void check_clip(const Tensor& video) {
  if (video.rank() != 4 || video.dim(1) != 3) {
    throw ShapeError("metric videos must be (f, 3, H, W), got " + to_string(video.shape()));
  }
}

}  // namespace

MetricStats fit_gaussian(const FeatureRows& features) {
  if (features.size() < 2) {
    throw ContractError("fit_gaussian needs at least 2 samples, got " + std::to_string(features.size()));
  }
  const std::size_t d = features[0].size();
  MetricStats s;
  s.mu.assign(d, 0.0);
  s.sigma.assign(d * d, 0.0);
  std::vector<double> delta(d);
  for (const auto& row : features) {
    if (row.size() != d) throw ShapeError("feature rows differ in width");
    ++s.n;
    for (std::size_t i = 0; i < d; ++i) {
      delta[i] = row[i] - s.mu[i];
      s.mu[i] += delta[i] / static_cast<double>(s.n);
    }
    // Welford: accumulate (x - mean_old)(x - mean_new)^T.
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i; j < d; ++j) s.sigma[i * d + j] += delta[i] * (row[j] - s.mu[j]);
    }
  }
  const double denom = static_cast<double>(s.n - 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      s.sigma[i * d + j] /= denom;
      s.sigma[j * d + i] = s.sigma[i * d + j];
    }
  }
  return s;
}

double frechet_distance(const MetricStats& r, const MetricStats& g) {
  if (r.dim() != g.dim()) {
    throw ShapeError("statistics differ in dimension: " + std::to_string(r.dim()) + " vs " + std::to_string(g.dim()));
  }
  if (r.sigma.size() != r.dim() * r.dim() || g.sigma.size() != g.dim() * g.dim()) {
    throw ShapeError("covariance is not d x d");
  }
  double mean_term = 0;
  for (std::size_t i = 0; i < r.dim(); ++i) mean_term += (r.mu[i] - g.mu[i]) * (r.mu[i] - g.mu[i]);

  const Mat sr = to_matrix(r), sg = to_matrix(g);
  auto es_r = checked_eigen(sr, "real covariance");
  const Eigen::VectorXd root = clamped(es_r.eigenvalues()).cwiseSqrt();
  const Mat sqrt_r = es_r.eigenvectors() * root.asDiagonal() * es_r.eigenvectors().transpose();
  Mat m = sqrt_r * sg * sqrt_r;
  m = 0.5 * (m + m.transpose());
  auto es_m = checked_eigen(m, "covariance product");
  const double tr_sqrt = clamped(es_m.eigenvalues()).cwiseSqrt().sum();

  const double d = mean_term + sr.trace() + sg.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

namespace {

// Mean of `values` with the sum carried as an unevaluated pair (hi + lo), so
// the result is correctly rounded: n identical entries average to themselves.
class ExactMean {
 public:
  void add(double v) {
    const double s = hi_ + v, bb = s - hi_;
    lo_ += (hi_ - (s - bb)) + (v - bb);
    hi_ = s;
    ++n_;
  }
  double value() const {
    const auto n = static_cast<double>(n_);
    const double q = hi_ / n;
    return q + (std::fma(-q, n, hi_) + lo_) / n;
  }

 private:
  double hi_ = 0, lo_ = 0;
  std::int64_t n_ = 0;
};

}  // namespace

double inception_score(const FeatureRows& probs) {
  if (probs.empty()) throw ContractError("inception score needs at least one row");
  const std::size_t k = probs[0].size();
  std::vector<ExactMean> columns(k);
  for (const auto& row : probs) {
    if (row.size() != k) throw ShapeError("probability rows differ in width");
    double sum = 0;
    for (double p : row) {
      if (!(p >= 0.0 && p <= 1.0)) throw ContractError("probability entry outside [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ContractError("probability row sums to " + std::to_string(sum));
    for (std::size_t j = 0; j < k; ++j) columns[j].add(row[j]);
  }
  std::vector<double> marginal(k);
  for (std::size_t j = 0; j < k; ++j) marginal[j] = columns[j].value();
  ExactMean kl;
  for (const auto& row : probs) {
    double row_kl = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (row[j] > 0) row_kl += row[j] * std::log(row[j] / marginal[j]);
    }
    kl.add(row_kl);
  }
  return std::exp(kl.value());
}

// --- FeatureExtractor -------------------------------------------------------

FeatureExtractor FeatureExtractor::build(std::uint64_t seed, int dim) {
  Rng rng = make_rng(seed, {0x66656174});
  FeatureExtractor e;
  e.dim_ = dim;
  const std::int64_t hd = e.hidden_;
  e.conv_w_ = nn::fan_in_uniform({hd, 3, 3, 3}, 27, rng);
  e.conv_b_ = nn::fan_in_uniform({hd}, 27, rng);
  // Temporal kernels: random, then skewed towards the current frame so no
  // kernel is symmetric.
  e.time_k_ = Tensor::uniform({hd, 3}, rng, Scalar(-0.5), Scalar(0.5));
  for (std::int64_t c = 0; c < hd; ++c) e.time_k_.at({c, 2}) += Scalar(1);
  e.proj_w_ = nn::fan_in_uniform({dim, 4 * hd}, 4 * hd, rng);
  e.proj_b_ = nn::fan_in_uniform({dim}, 4 * hd, rng);
  return e;
}

std::vector<double> FeatureExtractor::extract(const Tensor& video, int window) const {
  check_clip(video);
  const std::int64_t f = video.dim(0);
  if (window < 1 || window > f) {
    throw ContractError("feature window of " + std::to_string(window) + " frames exceeds video length " +
                        std::to_string(f));
  }
  Tensor clip({window, 3, video.dim(2), video.dim(3)},
              std::vector<Scalar>(video.ptr(), video.ptr() + window * 3 * video.dim(2) * video.dim(3)));
  Tape tape(false);
  Var x = tape.constant(pool_frames(clip));
  x = ops::tanh(ops::conv2d(x, tape.constant(conv_w_), tape.constant(conv_b_), 1));
  const Tensor fm = x.value();  // (L, hidden, h, w)
  const std::int64_t L = window, hd = hidden_, h = fm.dim(2), w = fm.dim(3);

  // Causal temporal conv (zero history), tanh, then ramp-weighted frame mean
  // within each image quadrant.
  std::vector<double> pooled(static_cast<std::size_t>(4 * hd), 0.0);
  double ramp_total = 0;
  for (std::int64_t t = 0; t < L; ++t) ramp_total += static_cast<double>(t + 1);
  for (std::int64_t c = 0; c < hd; ++c) {
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        const int q = static_cast<int>((i >= h / 2) * 2 + (j >= w / 2));
        for (std::int64_t t = 0; t < L; ++t) {
          double acc = 0;
          for (std::int64_t k = 0; k < 3; ++k) {
            const std::int64_t src = t - 2 + k;
            if (src >= 0) acc += time_k_.at({c, k}) * fm.at({src, c, i, j});
          }
          pooled[static_cast<std::size_t>(c * 4 + q)] += std::tanh(acc) * static_cast<double>(t + 1) / ramp_total;
        }
      }
    }
  }
  const double quad = static_cast<double>(h * w) / 4.0;
  std::vector<double> out(static_cast<std::size_t>(dim_));
  for (int o = 0; o < dim_; ++o) {
    double acc = proj_b_[o];
    for (std::int64_t k = 0; k < 4 * hd; ++k) acc += proj_w_.at({o, k}) * pooled[static_cast<std::size_t>(k)] / quad;
    out[static_cast<std::size_t>(o)] = acc;
  }
  return out;
}

// --- ClassifierStub ---------------------------------------------------------

ClassifierStub ClassifierStub::build(std::uint64_t seed, int classes) {
  Rng rng = make_rng(seed, {0x636c73});
  ClassifierStub c;
  c.classes_ = classes;
  c.w_ = Tensor::randn({classes, 48}, rng, Scalar(2));
  c.b_ = Tensor::randn({classes}, rng, Scalar(0.5));
  return c;
}

std::vector<double> ClassifierStub::classify(const Tensor& video) const {
  check_clip(video);
  const std::int64_t f = video.dim(0), H = video.dim(2), W = video.dim(3);
  // Frame-mean colour on a 4x4 grid.
  std::vector<double> feat(48, 0.0);
  for (std::int64_t t = 0; t < f; ++t) {
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t i = 0; i < H; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
          const std::int64_t cell = (i * 4 / H) * 4 + (j * 4 / W);
          feat[static_cast<std::size_t>(c * 16 + cell)] += video.at({t, c, i, j});
        }
      }
    }
  }
  const double per_cell = static_cast<double>(f) * static_cast<double>(H * W) / 16.0;
  std::vector<double> logits(static_cast<std::size_t>(classes_));
  for (int k = 0; k < classes_; ++k) {
    double acc = b_[k];
    for (int j = 0; j < 48; ++j) acc += w_.at({k, j}) * feat[static_cast<std::size_t>(j)] / per_cell;
    logits[static_cast<std::size_t>(k)] = acc;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
  return logits;
}

// --- evaluate_videos --------------------------------------------------------

Metric parse_metric(const std::string& text) {
  if (text == "fvd") return Metric::fvd;
  if (text == "vfid") return Metric::vfid;
  if (text == "is") return Metric::is;
  throw ConfigError("unknown metric '" + text + "' (expected fvd, vfid or is)");
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::fvd: return "fvd";
    case Metric::vfid: return "vfid";
    case Metric::is: return "is";
  }
  return "?";
}

double evaluate_videos(const std::vector<Tensor>& real, const std::vector<Tensor>& fake,
                       const FeatureExtractor& extractor, Metric metric, const EvalOptions& options) {
  for (const auto& v : fake) check_clip(v);
  if (metric == Metric::is) {
    if (fake.empty()) throw ContractError("inception score needs generated videos");
    const auto clf = ClassifierStub::build(options.seed);
    FeatureRows probs(fake.size());
    parallel_for(static_cast<std::int64_t>(fake.size()),
                 [&](std::int64_t i) { probs[static_cast<std::size_t>(i)] = clf.classify(fake[static_cast<std::size_t>(i)]); });
    return inception_score(probs);
  }
  for (const auto& v : real) check_clip(v);
  std::int64_t shortest = INT64_MAX;
  for (const auto* set : {&real, &fake}) {
    for (const auto& v : *set) shortest = std::min(shortest, v.dim(0));
  }
  if (real.size() < 2 || fake.size() < 2) throw ContractError("Frechet distance needs at least 2 videos per set");
  int window = 0;
  if (metric == Metric::fvd) {
    if (shortest < options.fvd_window) {
      throw ContractError("fvd requires videos of at least " + std::to_string(options.fvd_window) +
                          " frames, shortest has " + std::to_string(shortest));
    }
    window = options.fvd_window;
  } else {
    window = static_cast<int>(std::min<std::int64_t>(shortest, options.vfid_max));
  }
  auto features = [&](const std::vector<Tensor>& set) {
    FeatureRows rows(set.size());
    parallel_for(static_cast<std::int64_t>(set.size()), [&](std::int64_t i) {
      rows[static_cast<std::size_t>(i)] = extractor.extract(set[static_cast<std::size_t>(i)], window);
    });
    return rows;
  };
  return frechet_distance(fit_gaussian(features(real)), fit_gaussian(features(fake)));
}

}  // namespace ff
