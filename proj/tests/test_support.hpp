#pragma once

// Reference implementations shared by the unit and acceptance tests. They are
// deliberately naive: plain loops in double over explicit indices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fashionflow/autograd.hpp"
#include "fashionflow/layers.hpp"
#include "fashionflow/metrics.hpp"
#include "fashionflow/tensor.hpp"
#include "fashionflow/unet.hpp"

namespace ff::testing {

inline Tensor random_tensor(Shape shape, Rng& rng) { return Tensor::randn(std::move(shape), rng); }

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Fresh UNets zero their residual and attention output branches; wiring tests
// perturb every parameter so those paths carry signal, as after training.
inline void perturb_parameters(UNet& net, Rng& rng, double scale = 0.05) {
  std::normal_distribution<double> normal(0, scale);
  net.visit([&](const std::string&, Parameter& p) {
    for (Scalar& v : p.value.data()) v += static_cast<Scalar>(normal(rng));
  });
}

// Direct summation of a stride-1, zero-padded 2D convolution.
// x (n, c, h, w), w (o, c, k, k), b (o) -> (n, o, h', w')
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t o = w.dim(0), k = w.dim(2);
  const std::int64_t oh = h + 2 * pad - k + 1, ow = wd + 2 * pad - k + 1;
  Tensor out({n, o, oh, ow});
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t oc = 0; oc < o; ++oc)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          double s = b.empty() ? 0.0 : static_cast<double>(b[oc]);
          for (std::int64_t ic = 0; ic < c; ++ic)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t sy = y + ky - pad, sx = xx + kx - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                s += static_cast<double>(w.at({oc, ic, ky, kx})) * x.at({in, ic, sy, sx});
              }
          out.at({in, oc, y, xx}) = static_cast<Scalar>(s);
        }
  return out;
}

// Per-frame 2D convolution of a video (b, c, f, h, w) by direct summation.
inline Tensor naive_framewise_conv2d(const Tensor& v, const Tensor& w, const Tensor& b, int pad) {
  const std::int64_t B = v.dim(0), C = v.dim(1), F = v.dim(2), H = v.dim(3), W = v.dim(4);
  const std::int64_t O = w.dim(0);
  Tensor out({B, O, F, H, W});
  for (std::int64_t bi = 0; bi < B; ++bi)
    for (std::int64_t f = 0; f < F; ++f) {
      Tensor frame({1, C, H, W});
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x) frame.at({0, c, y, x}) = v.at({bi, c, f, y, x});
      const Tensor r = naive_conv2d(frame, w, b, pad);
      for (std::int64_t o = 0; o < O; ++o)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x) out.at({bi, o, f, y, x}) = r.at({0, o, y, x});
    }
  return out;
}

// Softmax-weighted attention for one query over explicit keys and values,
// scaled by 1/sqrt(dk), in double.
inline std::vector<double> attend_one(const std::vector<double>& q, const std::vector<std::vector<double>>& keys,
                                      const std::vector<std::vector<double>>& values) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
  std::vector<double> logits;
  for (const auto& k : keys) {
    double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * k[i];
    logits.push_back(s * scale);
  }
  double m = logits[0];
  for (double l : logits) m = std::max(m, l);
  double z = 0;
  for (double& l : logits) z += (l = std::exp(l - m));
  std::vector<double> out(values[0].size(), 0.0);
  for (std::size_t j = 0; j < values.size(); ++j)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += logits[j] / z * values[j][i];
  return out;
}

// y = W x + b for a Linear layer, in double.
inline std::vector<double> apply_linear(const nn::Linear& l, const std::vector<double>& x) {
  std::vector<double> y(static_cast<std::size_t>(l.out_features));
  for (std::int64_t o = 0; o < l.out_features; ++o) {
    double s = l.bias ? static_cast<double>(l.bias->value[o]) : 0.0;
    for (std::int64_t i = 0; i < l.in_features; ++i) s += static_cast<double>(l.weight.value.at({o, i})) * x[i];
    y[static_cast<std::size_t>(o)] = s;
  }
  return y;
}

// Permutes the (h w) positions of every frame by `perm`.
inline Tensor permute_pixels(const Tensor& v, const std::vector<int>& perm) {
  const std::int64_t B = v.dim(0), C = v.dim(1), F = v.dim(2), H = v.dim(3), W = v.dim(4);
  Tensor out(v.shape());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t p = 0; p < H * W; ++p) {
          const std::int64_t q = perm[static_cast<std::size_t>(p)];
          out.at({b, c, f, p / W, p % W}) = v.at({b, c, f, q / W, q % W});
        }
  return out;
}

// Reorders the frames of every video: out frame f is input frame perm[f].
inline Tensor permute_frames(const Tensor& v, const std::vector<int>& perm) {
  const std::int64_t B = v.dim(0), C = v.dim(1), F = v.dim(2), H = v.dim(3), W = v.dim(4);
  Tensor out(v.shape());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x) out.at({b, c, f, y, x}) = v.at({b, c, perm[static_cast<std::size_t>(f)], y, x});
  return out;
}

// --- Frechet distance oracle, independent of the Eigen route ---

using Matrix = std::vector<std::vector<double>>;

// Cyclic Jacobi eigendecomposition of a symmetric matrix: returns eigenvalues
// and eigenvectors as columns of `vecs`.
inline void jacobi_eigen(Matrix a, std::vector<double>& vals, Matrix& vecs) {
  const std::size_t n = a.size();
  vecs.assign(n, std::vector<double>(n, 0));
  for (std::size_t i = 0; i < n; ++i) vecs[i][i] = 1;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vecs[k][p], vkq = vecs[k][q];
          vecs[k][p] = c * vkp - s * vkq;
          vecs[k][q] = s * vkp + c * vkq;
        }
      }
  }
  vals.resize(n);
  for (std::size_t i = 0; i < n; ++i) vals[i] = a[i][i];
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.size();
  Matrix c(n, std::vector<double>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Matrix sqrt_psd(const Matrix& a) {
  std::vector<double> vals;
  Matrix v;
  jacobi_eigen(a, vals, v);
  const std::size_t n = a.size();
  Matrix r(n, std::vector<double>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) r[i][j] += v[i][k] * std::sqrt(std::max(vals[k], 0.0)) * v[j][k];
  return r;
}

inline double oracle_frechet(const MetricStats& r, const MetricStats& g) {
  const std::size_t d = r.dim();
  Matrix sr(d, std::vector<double>(d)), sg = sr;
  double out = 0;
  for (std::size_t i = 0; i < d; ++i) {
    out += (r.mu[i] - g.mu[i]) * (r.mu[i] - g.mu[i]) + r.cov(i, i) + g.cov(i, i);
    for (std::size_t j = 0; j < d; ++j) {
      sr[i][j] = r.cov(i, j);
      sg[i][j] = g.cov(i, j);
    }
  }
  const Matrix root = sqrt_psd(sr);
  std::vector<double> vals;
  Matrix vecs;
  jacobi_eigen(matmul(matmul(root, sg), root), vals, vecs);
  for (double v : vals) out -= 2 * std::sqrt(std::max(v, 0.0));
  return out;
}

// Random PSD covariance A A^T / k with a random rank deficit.
inline MetricStats random_psd_stats(Rng& rng, std::size_t d) {
  std::normal_distribution<double> normal;
  const std::size_t k = 1 + rng() % (2 * d);
  Matrix a(d, std::vector<double>(k));
  for (auto& row : a)
    for (double& v : row) v = normal(rng);
  MetricStats s;
  s.mu.resize(d);
  for (double& m : s.mu) m = normal(rng);
  s.sigma.assign(d * d, 0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t l = 0; l < k; ++l) s.sigma[i * d + j] += a[i][l] * a[j][l] / static_cast<double>(k);
  s.n = 100;
  return s;
}

}  // namespace ff::testing
