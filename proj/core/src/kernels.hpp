#pragma once

// Raw compute kernels shared by the differentiable ops. No shape checking
// beyond what the callers in ops.cpp already did.

#include <cstdint>

#include "fashionflow/tensor.hpp"

namespace ff::kernels {

struct ConvGeometry {
  std::int64_t batch, in_ch, out_ch;
  std::int64_t height, width;      // input
  std::int64_t kh, kw, ph, pw;
  std::int64_t out_h() const { return height + 2 * ph - kh + 1; }
  std::int64_t out_w() const { return width + 2 * pw - kw + 1; }
};

// C(m,n) = alpha * op(A) op(B) + beta * C, row-major.
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, Scalar alpha, const Scalar* a,
          const Scalar* b, Scalar beta, Scalar* c);

void conv_forward(const ConvGeometry& g, const Scalar* x, const Scalar* w, const Scalar* bias, Scalar* out);
// Any of gx/gw/gb may be null. gw and gb accumulate; gx accumulates.
void conv_backward(const ConvGeometry& g, const Scalar* x, const Scalar* w, const Scalar* gout, Scalar* gx,
                   Scalar* gw, Scalar* gb);

}  // namespace ff::kernels
