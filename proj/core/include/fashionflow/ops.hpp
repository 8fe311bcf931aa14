#pragma once

#include <string_view>
#include <vector>

#include "fashionflow/autograd.hpp"
#include "fashionflow/rearrange.hpp"

// Differentiable operations on tape values. Element-wise binary ops require
// identical shapes; the only broadcasting supported is over the leading axes
// of matmul and the explicit per-channel bias/affine ops.
namespace ff::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Scalar s);
Var add_scalar(const Var& a, Scalar s);
Var exp(const Var& a);
Var sqrt(const Var& a);
Var silu(const Var& a);
Var tanh(const Var& a);

Var sum(const Var& a);   // -> shape ()
Var mean(const Var& a);  // -> shape ()

Var softmax(const Var& a, int axis);

// (..., m, k) x (..., k, n) with broadcasting over the leading axes.
Var matmul(const Var& a, const Var& b);

// x (..., in) * weight(out, in)^T + bias(out). `bias` may be an empty Var.
Var linear(const Var& x, const Var& weight, const Var& bias);

// x (n, c, ...); statistics per (n, group); affine per channel.
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, Scalar eps = Scalar(1e-5));

// x (n, c, h, w), weight (o, c, kh, kw), stride 1, symmetric zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int padding);
// x (n, c, l), weight (o, c, k), stride 1, zero padding at both ends.
Var conv1d(const Var& x, const Var& weight, const Var& bias, int padding);

// 1D convolution along the frame axis of x (b, c, f, h, w) with weight
// (o, c, k); equal to conv1d on the "(b h w) c f" rearrangement.
Var temporal_conv(const Var& x, const Var& weight, const Var& bias, int padding);
Var rearrange(const Var& x, std::string_view pattern, const AxisSizes& sizes = {});
Var reshape(const Var& x, Shape shape);
Var concat(const std::vector<Var>& xs, int axis);

// 2x2 mean pooling / nearest-neighbour upsampling on the last two axes.
Var avg_pool2(const Var& x);
Var upsample_nearest2(const Var& x);

// x (b, c, ...) + bias broadcast over the trailing axes; bias is (b, c) or (c).
Var add_channel_bias(const Var& x, const Var& bias);

// Weighted mean squared error: sum(w * (p - t)^2) / sum(w). `weights` is a
// constant with the shape of `pred`, or empty for a plain mean.
Var mse(const Var& pred, const Var& target, const Tensor& weights = Tensor());

}  // namespace ff::ops
