#include "fashionflow/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "fashionflow/errors.hpp"
#include "kernels.hpp"

namespace ff::ops {
namespace {

Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid()) throw ContractError(std::string(op) + ": empty operand");
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
  return a.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range");
  return a;
}

// dfdx(x, y) gives the local derivative from input and output values.
template <class F, class DF>
Var unary(const Var& a, F f, DF dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const int ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia, dfdx](Tape& t, const Tensor& out, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    Tensor& gx = t.grad_buffer(ia);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], out[i]);
  });
}

void accumulate(Tensor& dst, const Tensor& src) {
  for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  accumulate(y, b.value());
  const int ia = a.id(), ib = b.id();
  return tape.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) accumulate(t.grad_buffer(ib), g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, "sub");
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const int ia = a.id(), ib = b.id();
  return tape.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const int ia = a.id(), ib = b.id();
  return tape.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv2 = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, Scalar s) {
  return unary(a, [s](Scalar x) { return x * s; }, [s](Scalar, Scalar) { return s; });
}

Var add_scalar(const Var& a, Scalar s) {
  return unary(a, [s](Scalar x) { return x + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

Var exp(const Var& a) {
  return unary(a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

Var sqrt(const Var& a) {
  for (Scalar v : a.value().data()) {
    if (v < 0) throw ContractError("sqrt of negative value");
  }
  return unary(a, [](Scalar x) { return std::sqrt(x); }, [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

Var silu(const Var& a) {
  // Vectorised: sigmoid through Eigen's packet exp.
  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  const Tensor& x = a.value();
  Tensor y(x.shape());
  Eigen::Map<const Arr> xv(x.ptr(), x.size());
  Eigen::Map<Arr>(y.ptr(), y.size()) = xv / (Scalar(1) + (-xv).exp());
  const int ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& xt = t.value(ia);
    Tensor& gx = t.grad_buffer(ia);
    Eigen::Map<const Arr> x(xt.ptr(), xt.size()), gv(g.ptr(), g.size());
    const Arr s = Scalar(1) / (Scalar(1) + (-x).exp());
    Eigen::Map<Arr>(gx.ptr(), gx.size()) += gv * s * (Scalar(1) + x * (Scalar(1) - s));
  });
}

Var tanh(const Var& a) {
  return unary(a, [](Scalar x) { return std::tanh(x); }, [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

Var sum(const Var& a) {
  const Tensor& x = a.value();
  double s = 0;
  for (Scalar v : x.data()) s += v;
  const int ia = a.id();
  return a.tape().record(Tensor::scalar(static_cast<Scalar>(s)), {ia}, [ia](Tape& t, const Tensor&, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    const Scalar gv = g[0];
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += gv;
  });
}

Var mean(const Var& a) {
  const std::int64_t n = a.value().size();
  if (n == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(n));
}

Var softmax(const Var& a, int axis) {
  const Tensor& x = a.value();
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  std::int64_t outer = 1, inner = 1;
  const std::int64_t n = x.dim(ax);
  for (int i = 0; i < ax; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  Tensor y(x.shape());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      Scalar m = x[base];
      for (std::int64_t k = 1; k < n; ++k) m = std::max(m, x[base + k * inner]);
      double z = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const Scalar e = std::exp(x[base + k * inner] - m);
        y[base + k * inner] = e;
        z += e;
      }
      const Scalar inv = static_cast<Scalar>(1.0 / z);
      for (std::int64_t k = 0; k < n; ++k) y[base + k * inner] *= inv;
    }
  }
  const int ia = a.id();
  return a.tape().record(std::move(y), {ia}, [ia, outer, inner, n](Tape& t, const Tensor& yv, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * n * inner + in;
        double dot = 0;
        for (std::int64_t k = 0; k < n; ++k) dot += g[base + k * inner] * yv[base + k * inner];
        for (std::int64_t k = 0; k < n; ++k) {
          const std::int64_t i = base + k * inner;
          gx[i] += yv[i] * (g[i] - static_cast<Scalar>(dot));
        }
      }
    }
  });
}

namespace {

// Leading-axis broadcast bookkeeping for batched matmul.
struct BatchMap {
  Shape out_batch;
  std::vector<std::int64_t> a_index, b_index;  // per output batch element
};

BatchMap broadcast_batches(const Shape& a, const Shape& b) {
  const std::size_t ra = a.size() - 2, rb = b.size() - 2;
  const std::size_t r = std::max(ra, rb);
  BatchMap map;
  map.out_batch.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i + ra >= r ? a[i + ra - r] : 1;
    const std::int64_t db = i + rb >= r ? b[i + rb - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("matmul: leading axes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    map.out_batch[i] = std::max(da, db);
  }
  const std::int64_t total = numel(map.out_batch);
  map.a_index.resize(static_cast<std::size_t>(total));
  map.b_index.resize(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t e = 0; e < total; ++e) {
    std::int64_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < r; ++i) {
      const std::int64_t da = i + ra >= r ? a[i + ra - r] : 1;
      const std::int64_t db = i + rb >= r ? b[i + rb - r] : 1;
      if (i + ra >= r) ia = ia * da + (da == 1 ? 0 : idx[i]);
      if (i + rb >= r) ib = ib * db + (db == 1 ? 0 : idx[i]);
    }
    map.a_index[static_cast<std::size_t>(e)] = ia;
    map.b_index[static_cast<std::size_t>(e)] = ib;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < map.out_batch[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, "matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const std::int64_t m = as[as.size() - 2], k = as.back(), n = bs.back();
  if (bs[bs.size() - 2] != k) {
    throw ShapeError("matmul: inner dimensions do not conform: " + to_string(as) + " x " + to_string(bs));
  }
  BatchMap map = broadcast_batches(as, bs);
  Shape out_shape = map.out_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor y(out_shape);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t e = 0; e < map.a_index.size(); ++e) {
    kernels::gemm(false, false, m, n, k, Scalar(1), av.ptr() + map.a_index[e] * m * k,
                  bv.ptr() + map.b_index[e] * k * n, Scalar(0), y.ptr() + static_cast<std::int64_t>(e) * m * n);
  }
  const int ia = a.id(), ib = b.id();
  return tape.record(std::move(y), {ia, ib},
                     [ia, ib, m, n, k, map = std::move(map)](Tape& t, const Tensor&, const Tensor& g) {
                       const Tensor& av2 = t.value(ia);
                       const Tensor& bv2 = t.value(ib);
                       const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
                       Tensor* ga = need_a ? &t.grad_buffer(ia) : nullptr;
                       Tensor* gb = need_b ? &t.grad_buffer(ib) : nullptr;
                       for (std::size_t e = 0; e < map.a_index.size(); ++e) {
                         const Scalar* ge = g.ptr() + static_cast<std::int64_t>(e) * m * n;
                         if (ga) {
                           kernels::gemm(false, true, m, k, n, Scalar(1), ge, bv2.ptr() + map.b_index[e] * k * n,
                                         Scalar(1), ga->ptr() + map.a_index[e] * m * k);
                         }
                         if (gb) {
                           kernels::gemm(true, false, k, n, m, Scalar(1), av2.ptr() + map.a_index[e] * m * k, ge,
                                         Scalar(1), gb->ptr() + map.b_index[e] * k * n);
                         }
                       }
                     });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  Tape& tape = same_tape(x, weight, "linear");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.size() != 2) throw ShapeError("linear: weight must be (out, in), got " + to_string(ws));
  if (xs.empty() || xs.back() != ws[1]) {
    throw ShapeError("linear: input " + to_string(xs) + " does not match weight " + to_string(ws));
  }
  const std::int64_t in = ws[1], out = ws[0];
  const std::int64_t rows = numel(xs) / in;
  if (bias.valid() && (bias.shape() != Shape{out})) {
    throw ShapeError("linear: bias shape " + to_string(bias.shape()) + " != (" + std::to_string(out) + ")");
  }
  Shape ys = xs;
  ys.back() = out;
  Tensor y(ys);
  kernels::gemm(false, true, rows, out, in, Scalar(1), x.value().ptr(), weight.value().ptr(), Scalar(0), y.ptr());
  if (bias.valid()) {
    const Tensor& bv = bias.value();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t o = 0; o < out; ++o) y[r * out + o] += bv[o];
    }
  }
  const int ix = x.id(), iw = weight.id(), ib = bias.valid() ? bias.id() : -1;
  std::vector<int> inputs{ix, iw};
  if (ib >= 0) inputs.push_back(ib);
  return tape.record(std::move(y), inputs, [ix, iw, ib, rows, in, out](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(ix)) {
      kernels::gemm(false, false, rows, in, out, Scalar(1), g.ptr(), t.value(iw).ptr(), Scalar(1),
                    t.grad_buffer(ix).ptr());
    }
    if (t.requires_grad(iw)) {
      kernels::gemm(true, false, out, in, rows, Scalar(1), g.ptr(), t.value(ix).ptr(), Scalar(1),
                    t.grad_buffer(iw).ptr());
    }
    if (ib >= 0 && t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::int64_t o = 0; o < out; ++o) {
        double s = 0;
        for (std::int64_t r = 0; r < rows; ++r) s += g[r * out + o];
        gb[o] += static_cast<Scalar>(s);
      }
    }
  });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, Scalar eps) {
  Tape& tape = same_tape(x, gamma, "group_norm");
  same_tape(x, beta, "group_norm");
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("group_norm: input needs (n, c, ...), got " + to_string(xs));
  const std::int64_t n = xs[0], c = xs[1];
  if (groups <= 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) +
                     " channels");
  }
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("group_norm: affine parameters must have shape (" + std::to_string(c) + ")");
  }
  const std::int64_t spatial = numel(xs) / (n * c);
  const std::int64_t cg = c / groups;
  const std::int64_t m = cg * spatial;

  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xs);
  std::vector<Scalar> mean_v(static_cast<std::size_t>(n * groups)), rstd_v(static_cast<std::size_t>(n * groups));
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t base = (b * c + gi * cg) * spatial;
      double s = 0;
      for (std::int64_t i = 0; i < m; ++i) s += xv[base + i];
      const double mu = s / static_cast<double>(m);
      double v = 0;
      for (std::int64_t i = 0; i < m; ++i) {
        const double d = xv[base + i] - mu;
        v += d * d;
      }
      v /= static_cast<double>(m);
      const double rstd = 1.0 / std::sqrt(v + eps);
      mean_v[static_cast<std::size_t>(b * groups + gi)] = static_cast<Scalar>(mu);
      rstd_v[static_cast<std::size_t>(b * groups + gi)] = static_cast<Scalar>(rstd);
      for (std::int64_t cc = 0; cc < cg; ++cc) {
        const std::int64_t ch = gi * cg + cc;
        for (std::int64_t s2 = 0; s2 < spatial; ++s2) {
          const std::int64_t i = base + cc * spatial + s2;
          y[i] = static_cast<Scalar>((xv[i] - mu) * rstd) * gv[ch] + bv[ch];
        }
      }
    }
  }
  const int ix = x.id(), ig = gamma.id(), ibt = beta.id();
  return tape.record(
      std::move(y), {ix, ig, ibt},
      [=, mean_v = std::move(mean_v), rstd_v = std::move(rstd_v)](Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& xv2 = t.value(ix);
        const Tensor& gv2 = t.value(ig);
        Tensor* gx = t.requires_grad(ix) ? &t.grad_buffer(ix) : nullptr;
        Tensor* ggam = t.requires_grad(ig) ? &t.grad_buffer(ig) : nullptr;
        Tensor* gbet = t.requires_grad(ibt) ? &t.grad_buffer(ibt) : nullptr;
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t gi = 0; gi < groups; ++gi) {
            const std::int64_t base = (b * c + gi * cg) * spatial;
            const double mu = mean_v[static_cast<std::size_t>(b * groups + gi)];
            const double rstd = rstd_v[static_cast<std::size_t>(b * groups + gi)];
            double sum_gxh = 0, sum_gxh_xh = 0;
            for (std::int64_t cc = 0; cc < cg; ++cc) {
              const std::int64_t ch = gi * cg + cc;
              double sg = 0, sgx = 0;
              for (std::int64_t s2 = 0; s2 < spatial; ++s2) {
                const std::int64_t i = base + cc * spatial + s2;
                const double xh = (xv2[i] - mu) * rstd;
                const double gxh = static_cast<double>(g[i]) * gv2[ch];
                sum_gxh += gxh;
                sum_gxh_xh += gxh * xh;
                sg += g[i];
                sgx += g[i] * xh;
              }
              if (ggam) (*ggam)[ch] += static_cast<Scalar>(sgx);
              if (gbet) (*gbet)[ch] += static_cast<Scalar>(sg);
            }
            if (!gx) continue;
            const double inv_m = 1.0 / static_cast<double>(m);
            for (std::int64_t cc = 0; cc < cg; ++cc) {
              const std::int64_t ch = gi * cg + cc;
              for (std::int64_t s2 = 0; s2 < spatial; ++s2) {
                const std::int64_t i = base + cc * spatial + s2;
                const double xh = (xv2[i] - mu) * rstd;
                const double gxh = static_cast<double>(g[i]) * gv2[ch];
                (*gx)[i] += static_cast<Scalar>(rstd * (gxh - inv_m * sum_gxh - xh * inv_m * sum_gxh_xh));
              }
            }
          }
        }
      });
}

namespace {

Var conv_impl(const Var& x, const Var& weight, const Var& bias, const kernels::ConvGeometry& geo, Shape out_shape) {
  Tape& tape = x.tape();
  Tensor y(std::move(out_shape));
  kernels::conv_forward(geo, x.value().ptr(), weight.value().ptr(), bias.valid() ? bias.value().ptr() : nullptr,
                        y.ptr());
  const int ix = x.id(), iw = weight.id(), ib = bias.valid() ? bias.id() : -1;
  std::vector<int> inputs{ix, iw};
  if (ib >= 0) inputs.push_back(ib);
  return tape.record(std::move(y), inputs, [ix, iw, ib, geo](Tape& t, const Tensor&, const Tensor& g) {
    Scalar* gx = t.requires_grad(ix) ? t.grad_buffer(ix).ptr() : nullptr;
    Scalar* gw = t.requires_grad(iw) ? t.grad_buffer(iw).ptr() : nullptr;
    Scalar* gb = (ib >= 0 && t.requires_grad(ib)) ? t.grad_buffer(ib).ptr() : nullptr;
    kernels::conv_backward(geo, t.value(ix).ptr(), t.value(iw).ptr(), g.ptr(), gx, gw, gb);
  });
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int padding) {
  same_tape(x, weight, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4) throw ShapeError("conv2d: input must be (n, c, h, w), got " + to_string(xs));
  if (ws.size() != 4) throw ShapeError("conv2d: weight must be (o, c, kh, kw), got " + to_string(ws));
  if (ws[1] != xs[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (bias.valid() && bias.shape() != Shape{ws[0]}) throw ShapeError("conv2d: bias shape mismatch");
  kernels::ConvGeometry geo{xs[0], xs[1], ws[0], xs[2], xs[3], ws[2], ws[3], padding, padding};
  if (geo.out_h() <= 0 || geo.out_w() <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  return conv_impl(x, weight, bias, geo, Shape{xs[0], ws[0], geo.out_h(), geo.out_w()});
}

Var conv1d(const Var& x, const Var& weight, const Var& bias, int padding) {
  same_tape(x, weight, "conv1d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 3) throw ShapeError("conv1d: input must be (n, c, l), got " + to_string(xs));
  if (ws.size() != 3) throw ShapeError("conv1d: weight must be (o, c, k), got " + to_string(ws));
  if (ws[1] != xs[1]) {
    throw ShapeError("conv1d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (bias.valid() && bias.shape() != Shape{ws[0]}) throw ShapeError("conv1d: bias shape mismatch");
  kernels::ConvGeometry geo{xs[0], xs[1], ws[0], 1, xs[2], 1, ws[2], 0, padding};
  if (geo.out_w() <= 0) throw ShapeError("conv1d: kernel larger than padded input");
  return conv_impl(x, weight, bias, geo, Shape{xs[0], ws[0], geo.out_w()});
}

Var temporal_conv(const Var& x, const Var& weight, const Var& bias, int padding) {
  same_tape(x, weight, "temporal_conv");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 5) throw ShapeError("temporal_conv: input must be (b, c, f, h, w), got " + to_string(xs));
  if (ws.size() != 3) throw ShapeError("temporal_conv: weight must be (o, c, k), got " + to_string(ws));
  if (ws[1] != xs[1]) {
    throw ShapeError("temporal_conv: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (bias.valid() && bias.shape() != Shape{ws[0]}) throw ShapeError("temporal_conv: bias shape mismatch");
  // Each item is an image of height f and width h*w under a (k, 1) kernel.
  kernels::ConvGeometry geo{xs[0], xs[1], ws[0], xs[2], xs[3] * xs[4], ws[2], 1, padding, 0};
  if (geo.out_h() <= 0) throw ShapeError("temporal_conv: kernel larger than padded input");
  return conv_impl(x, weight, bias, geo, Shape{xs[0], ws[0], geo.out_h(), xs[3], xs[4]});
}

Var rearrange(const Var& x, std::string_view pattern, const AxisSizes& sizes) {
  RearrangePlan plan = plan_rearrange(x.shape(), pattern, sizes);
  Tensor y = apply_plan(x.value(), plan);
  const int ix = x.id();
  return x.tape().record(std::move(y), {ix}, [ix, plan = std::move(plan)](Tape& t, const Tensor&, const Tensor& g) {
    Tensor back = ff::rearrange(g, plan.inverse_pattern, plan.sizes);
    accumulate(t.grad_buffer(ix), back);
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return x.tape().record(std::move(y), {ix}, [ix](Tape& t, const Tensor&, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  Tape& tape = xs.front().tape();
  const Shape& first = xs.front().shape();
  const int ax = normalize_axis(axis, static_cast<int>(first.size()), "concat");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= first[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::int64_t> lens;
  std::int64_t total = 0;
  for (const auto& v : xs) {
    same_tape(xs.front(), v, "concat");
    const Shape& s = v.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != ax && s[i] != first[i]) {
        throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(first));
      }
    }
    lens.push_back(s[static_cast<std::size_t>(ax)]);
    total += lens.back();
  }
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(ax)] = total;
  Tensor y(out_shape);
  std::int64_t off = 0;
  std::vector<int> ids;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor& v = xs[k].value();
    const std::int64_t chunk = lens[k] * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(v.ptr() + o * chunk, chunk, y.ptr() + o * total * inner + off * inner);
    }
    off += lens[k];
    ids.push_back(xs[k].id());
  }
  return tape.record(std::move(y), ids, [ids, lens, outer, inner, total](Tape& t, const Tensor&, const Tensor& g) {
    std::int64_t off2 = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::int64_t chunk = lens[k] * inner;
      if (t.requires_grad(ids[k])) {
        Tensor& gx = t.grad_buffer(ids[k]);
        for (std::int64_t o = 0; o < outer; ++o) {
          const Scalar* src = g.ptr() + o * total * inner + off2 * inner;
          Scalar* dst = gx.ptr() + o * chunk;
          for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      off2 += lens[k];
    }
  });
}

Var avg_pool2(const Var& x) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("avg_pool2: rank must be >= 2");
  const std::int64_t h = xs[xs.size() - 2], w = xs.back();
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: spatial size " + to_string(xs) + " is not even");
  const std::int64_t planes = numel(xs) / (h * w);
  const std::int64_t oh = h / 2, ow = w / 2;
  Shape os = xs;
  os[os.size() - 2] = oh;
  os.back() = ow;
  Tensor y(os);
  const Tensor& xv = x.value();
  for (std::int64_t p = 0; p < planes; ++p) {
    const Scalar* s = xv.ptr() + p * h * w;
    Scalar* d = y.ptr() + p * oh * ow;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        d[i * ow + j] = Scalar(0.25) * (s[2 * i * w + 2 * j] + s[2 * i * w + 2 * j + 1] + s[(2 * i + 1) * w + 2 * j] +
                                        s[(2 * i + 1) * w + 2 * j + 1]);
      }
    }
  }
  const int ix = x.id();
  return x.tape().record(std::move(y), {ix}, [ix, planes, h, w, oh, ow](Tape& t, const Tensor&, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::int64_t p = 0; p < planes; ++p) {
      Scalar* d = gx.ptr() + p * h * w;
      const Scalar* s = g.ptr() + p * oh * ow;
      for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) d[i * w + j] += Scalar(0.25) * s[(i / 2) * ow + j / 2];
      }
    }
  });
}

Var upsample_nearest2(const Var& x) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("upsample_nearest2: rank must be >= 2");
  const std::int64_t h = xs[xs.size() - 2], w = xs.back();
  const std::int64_t planes = numel(xs) / std::max<std::int64_t>(1, h * w);
  const std::int64_t oh = 2 * h, ow = 2 * w;
  Shape os = xs;
  os[os.size() - 2] = oh;
  os.back() = ow;
  Tensor y(os);
  const Tensor& xv = x.value();
  for (std::int64_t p = 0; p < planes; ++p) {
    const Scalar* s = xv.ptr() + p * h * w;
    Scalar* d = y.ptr() + p * oh * ow;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) d[i * ow + j] = s[(i / 2) * w + j / 2];
    }
  }
  const int ix = x.id();
  return x.tape().record(std::move(y), {ix}, [ix, planes, h, w, oh, ow](Tape& t, const Tensor&, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::int64_t p = 0; p < planes; ++p) {
      Scalar* d = gx.ptr() + p * h * w;
      const Scalar* s = g.ptr() + p * oh * ow;
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) d[(i / 2) * w + j / 2] += s[i * ow + j];
      }
    }
  });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  Tape& tape = same_tape(x, bias, "add_channel_bias");
  const Shape& xs = x.shape();
  const Shape& bs = bias.shape();
  if (xs.size() < 2) throw ShapeError("add_channel_bias: input needs (b, c, ...)");
  const std::int64_t b = xs[0], c = xs[1];
  const bool per_item = bs.size() == 2;
  if (!(per_item && bs[0] == b && bs[1] == c) && !(bs.size() == 1 && bs[0] == c)) {
    throw ShapeError("add_channel_bias: bias " + to_string(bs) + " does not match input " + to_string(xs));
  }
  const std::int64_t inner = numel(xs) / (b * c);
  Tensor y = x.value();
  const Tensor& bv = bias.value();
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const Scalar add = bv[per_item ? i * c + ch : ch];
      Scalar* p = y.ptr() + (i * c + ch) * inner;
      for (std::int64_t s = 0; s < inner; ++s) p[s] += add;
    }
  }
  const int ix = x.id(), ib = bias.id();
  return tape.record(std::move(y), {ix, ib}, [ix, ib, b, c, inner, per_item](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(ix)) accumulate(t.grad_buffer(ix), g);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double s = 0;
          const Scalar* p = g.ptr() + (i * c + ch) * inner;
          for (std::int64_t k = 0; k < inner; ++k) s += p[k];
          gb[per_item ? i * c + ch : ch] += static_cast<Scalar>(s);
        }
      }
    }
  });
}

Var mse(const Var& pred, const Var& target, const Tensor& weights) {
  Tape& tape = same_tape(pred, target, "mse");
  require_same_shape(pred, target, "mse");
  Var diff = sub(pred, target);
  Var sq = mul(diff, diff);
  if (weights.empty()) return mean(sq);
  if (weights.shape() != pred.shape()) {
    throw ShapeError("mse: weight shape " + to_string(weights.shape()) + " != " + to_string(pred.shape()));
  }
  double wsum = 0;
  for (Scalar w : weights.data()) wsum += w;
  if (wsum <= 0) throw ContractError("mse: weights sum to zero");
  Var weighted = mul(sq, tape.constant(weights));
  return scale(sum(weighted), static_cast<Scalar>(1.0 / wsum));
}

}  // namespace ff::ops
