#include "kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "fashionflow/parallel.hpp"

namespace ff::kernels {
namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Images per im2col chunk: whole images, at least ~256 output columns.
std::int64_t chunk_size(const ConvGeometry& g) {
  const std::int64_t plane = g.out_h() * g.out_w();
  return std::clamp<std::int64_t>((256 + plane - 1) / plane, 1, g.batch);
}

bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.ph == 0 && g.pw == 0; }

// cols is (in_ch*kh*kw, count*out_h*out_w), row-major, for images [n0, n0+count).
void im2col(const ConvGeometry& g, const Scalar* x, std::int64_t n0, std::int64_t count, Scalar* cols) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t plane = oh * ow;
  const std::int64_t ncols = count * plane;
  for (std::int64_t n = 0; n < count; ++n) {
    for (std::int64_t c = 0; c < g.in_ch; ++c) {
      const Scalar* src = x + ((n0 + n) * g.in_ch + c) * g.height * g.width;
      for (std::int64_t ki = 0; ki < g.kh; ++ki) {
        for (std::int64_t kj = 0; kj < g.kw; ++kj) {
          const std::int64_t row = (c * g.kh + ki) * g.kw + kj;
          Scalar* dst = cols + row * ncols + n * plane;
          const std::int64_t j0 = std::max<std::int64_t>(0, g.pw - kj);
          const std::int64_t j1 = std::max(j0, std::min<std::int64_t>(ow, g.width + g.pw - kj));
          for (std::int64_t i = 0; i < oh; ++i) {
            const std::int64_t yi = i + ki - g.ph;
            Scalar* d = dst + i * ow;
            if (yi < 0 || yi >= g.height) {
              std::fill_n(d, ow, Scalar(0));
              continue;
            }
            const Scalar* s = src + yi * g.width;
            std::fill_n(d, j0, Scalar(0));
            for (std::int64_t j = j0; j < j1; ++j) d[j] = s[j + kj - g.pw];
            std::fill_n(d + j1, ow - j1, Scalar(0));
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const Scalar* cols, std::int64_t n0, std::int64_t count, Scalar* gx) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t plane = oh * ow;
  const std::int64_t ncols = count * plane;
  for (std::int64_t n = 0; n < count; ++n) {
    for (std::int64_t c = 0; c < g.in_ch; ++c) {
      Scalar* dst = gx + ((n0 + n) * g.in_ch + c) * g.height * g.width;
      for (std::int64_t ki = 0; ki < g.kh; ++ki) {
        for (std::int64_t kj = 0; kj < g.kw; ++kj) {
          const std::int64_t row = (c * g.kh + ki) * g.kw + kj;
          const Scalar* src = cols + row * ncols + n * plane;
          const std::int64_t j0 = std::max<std::int64_t>(0, g.pw - kj);
          const std::int64_t j1 = std::min<std::int64_t>(ow, g.width + g.pw - kj);
          for (std::int64_t i = 0; i < oh; ++i) {
            const std::int64_t yi = i + ki - g.ph;
            if (yi < 0 || yi >= g.height) continue;
            Scalar* d = dst + yi * g.width;
            const Scalar* s = src + i * ow;
            for (std::int64_t j = j0; j < j1; ++j) d[j + kj - g.pw] += s[j];
          }
        }
      }
    }
  }
}

// (o, count*plane) chunk matrix <-> count images of (o, plane).
void scatter_chunk(const Scalar* mat, std::int64_t out_ch, std::int64_t plane, std::int64_t count, Scalar* out) {
  for (std::int64_t n = 0; n < count; ++n) {
    for (std::int64_t o = 0; o < out_ch; ++o) {
      std::copy_n(mat + o * count * plane + n * plane, plane, out + (n * out_ch + o) * plane);
    }
  }
}

void gather_chunk(const Scalar* in, std::int64_t out_ch, std::int64_t plane, std::int64_t count, Scalar* mat) {
  for (std::int64_t n = 0; n < count; ++n) {
    for (std::int64_t o = 0; o < out_ch; ++o) {
      std::copy_n(in + (n * out_ch + o) * plane, plane, mat + o * count * plane + n * plane);
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, Scalar alpha, const Scalar* a,
          const Scalar* b, Scalar beta, Scalar* c) {
  MapMat C(c, m, n);
  if (beta == Scalar(0)) {
    C.setZero();
  } else if (beta != Scalar(1)) {
    C *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;
  if (!trans_a && !trans_b) {
    C.noalias() += alpha * (CMapMat(a, m, k) * CMapMat(b, k, n));
  } else if (trans_a && !trans_b) {
    C.noalias() += alpha * (CMapMat(a, k, m).transpose() * CMapMat(b, k, n));
  } else if (!trans_a && trans_b) {
    C.noalias() += alpha * (CMapMat(a, m, k) * CMapMat(b, n, k).transpose());
  } else {
    C.noalias() += alpha * (CMapMat(a, k, m).transpose() * CMapMat(b, n, k).transpose());
  }
}

// Convolutions run over chunks of whole images: im2col of the chunk, one GEMM,
// and (for multi-image chunks) a scatter into the (n, o, plane) layout. With
// single-image chunks each output depends only on its own image.
void conv_forward(const ConvGeometry& g, const Scalar* x, const Scalar* w, const Scalar* bias, Scalar* out) {
  const std::int64_t plane = g.out_h() * g.out_w();
  const std::int64_t krows = g.in_ch * g.kh * g.kw;
  const std::int64_t chunk = chunk_size(g);
  const std::int64_t chunks = (g.batch + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::int64_t ci) {
    const std::int64_t n0 = ci * chunk, count = std::min(chunk, g.batch - n0);
    const std::int64_t ncols = count * plane;
    AlignedVector<Scalar> cols_buf, mat_buf;
    const Scalar* cols = x + n0 * g.in_ch * plane;
    if (!(is_pointwise(g) && count == 1)) {
      cols_buf.resize(static_cast<std::size_t>(krows * ncols));
      im2col(g, x, n0, count, cols_buf.data());
      cols = cols_buf.data();
    }
    Scalar* dst = out + n0 * g.out_ch * plane;
    if (count > 1) {
      mat_buf.resize(static_cast<std::size_t>(g.out_ch * ncols));
      dst = mat_buf.data();
    }
    for (std::int64_t o = 0; o < g.out_ch; ++o) std::fill_n(dst + o * ncols, ncols, bias ? bias[o] : Scalar(0));
    gemm(false, false, g.out_ch, ncols, krows, Scalar(1), w, cols, Scalar(1), dst);
    if (count > 1) scatter_chunk(dst, g.out_ch, plane, count, out + n0 * g.out_ch * plane);
  });
}

void conv_backward(const ConvGeometry& g, const Scalar* x, const Scalar* w, const Scalar* gout, Scalar* gx,
                   Scalar* gw, Scalar* gb) {
  const std::int64_t plane = g.out_h() * g.out_w();
  const std::int64_t krows = g.in_ch * g.kh * g.kw;
  const std::int64_t chunk = chunk_size(g);
  const std::int64_t chunks = (g.batch + chunk - 1) / chunk;
  const std::int64_t wsize = g.out_ch * krows;
  // Per-chunk weight/bias partials, reduced in chunk order afterwards.
  AlignedVector<Scalar> gw_parts(gw ? static_cast<std::size_t>(chunks * wsize) : 0);
  std::vector<double> gb_parts(gb ? static_cast<std::size_t>(chunks * g.out_ch) : 0);
  parallel_for(chunks, [&](std::int64_t ci) {
    const std::int64_t n0 = ci * chunk, count = std::min(chunk, g.batch - n0);
    const std::int64_t ncols = count * plane;
    AlignedVector<Scalar> gmat_buf;
    const Scalar* gmat = gout + n0 * g.out_ch * plane;
    if (count > 1) {
      gmat_buf.resize(static_cast<std::size_t>(g.out_ch * ncols));
      gather_chunk(gmat, g.out_ch, plane, count, gmat_buf.data());
      gmat = gmat_buf.data();
    }
    if (gb) {
      for (std::int64_t o = 0; o < g.out_ch; ++o) {
        double s = 0;
        for (std::int64_t p = 0; p < ncols; ++p) s += gmat[o * ncols + p];
        gb_parts[static_cast<std::size_t>(ci * g.out_ch + o)] = s;
      }
    }
    const bool direct = is_pointwise(g) && count == 1;
    if (gw) {
      AlignedVector<Scalar> cols_buf;
      const Scalar* cols = x + n0 * g.in_ch * plane;
      if (!direct) {
        cols_buf.resize(static_cast<std::size_t>(krows * ncols));
        im2col(g, x, n0, count, cols_buf.data());
        cols = cols_buf.data();
      }
      gemm(false, true, g.out_ch, krows, ncols, Scalar(1), gmat, cols, Scalar(0), gw_parts.data() + ci * wsize);
    }
    if (gx) {
      if (direct) {
        gemm(true, false, krows, ncols, g.out_ch, Scalar(1), w, gmat, Scalar(1), gx + n0 * g.in_ch * plane);
      } else {
        AlignedVector<Scalar> gcols(static_cast<std::size_t>(krows * ncols));
        gemm(true, false, krows, ncols, g.out_ch, Scalar(1), w, gmat, Scalar(0), gcols.data());
        col2im_add(g, gcols.data(), n0, count, gx);
      }
    }
  });
  for (std::int64_t ci = 0; ci < chunks; ++ci) {
    if (gw) {
      const Scalar* part = gw_parts.data() + ci * wsize;
      for (std::int64_t i = 0; i < wsize; ++i) gw[i] += part[i];
    }
    if (gb) {
      for (std::int64_t o = 0; o < g.out_ch; ++o) gb[o] += static_cast<Scalar>(gb_parts[static_cast<std::size_t>(ci * g.out_ch + o)]);
    }
  }
}

}  // namespace ff::kernels
