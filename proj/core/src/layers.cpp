#include "fashionflow/layers.hpp"

#include <cmath>

#include "fashionflow/errors.hpp"

namespace ff::nn {

Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(std::max<std::int64_t>(1, fan_in)));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

// --- Linear ---------------------------------------------------------------

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias)
    : in_features(in), out_features(out), weight(fan_in_uniform({out, in}, in, rng)) {
  if (with_bias) bias.emplace(fan_in_uniform({out}, in, rng));
}

Var Linear::forward(Tape& tape, const Var& x) {
  return ops::linear(x, tape.param(weight), bias ? tape.param(*bias) : Var());
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight);
  if (bias) fn(prefix + ".bias", *bias);
}

// --- Conv2D / Conv1D --------------------------------------------------------

Conv2D::Conv2D(std::int64_t in, std::int64_t out, int k, int pad, Rng& rng)
    : in_ch(in),
      out_ch(out),
      kernel(k),
      padding(pad),
      weight(fan_in_uniform({out, in, k, k}, in * k * k, rng)),
      bias(fan_in_uniform({out}, in * k * k, rng)) {}

Var Conv2D::forward(Tape& tape, const Var& x) {
  return ops::conv2d(x, tape.param(weight), tape.param(bias), padding);
}

void Conv2D::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
}

Conv1D::Conv1D(std::int64_t in, std::int64_t out, int k, int pad, Rng& rng)
    : in_ch(in),
      out_ch(out),
      kernel(k),
      padding(pad),
      weight(fan_in_uniform({out, in, k}, in * k, rng)),
      bias(fan_in_uniform({out}, in * k, rng)) {}

Var Conv1D::forward(Tape& tape, const Var& x) {
  return ops::conv1d(x, tape.param(weight), tape.param(bias), padding);
}

void Conv1D::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
}

// --- GroupNorm --------------------------------------------------------------

GroupNorm::GroupNorm(int g, std::int64_t c)
    : groups(g), channels(c), gamma(Tensor::ones({c})), beta(Tensor::zeros({c})) {
  if (g <= 0 || c % g != 0) {
    throw ConfigError("group count " + std::to_string(g) + " does not divide " + std::to_string(c) + " channels");
  }
}

Var GroupNorm::forward(Tape& tape, const Var& x) {
  return ops::group_norm(x, groups, tape.param(gamma), tape.param(beta));
}

void GroupNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

// --- Pseudo3DConv -----------------------------------------------------------

Pseudo3DConv::Pseudo3DConv(std::int64_t in, std::int64_t out, Rng& rng)
    : spatial(in, out, 3, 1, rng), temporal(out, out, 3, 1, rng) {
  temporal.weight.value.fill(0);
  temporal.bias.value.fill(0);
  for (std::int64_t o = 0; o < out; ++o) temporal.weight.value.at({o, o, 1}) = 1;
}

Var Pseudo3DConv::forward(Tape& tape, const Var& v) {
  if (v.rank() != 5) throw ShapeError("pseudo-3D conv expects (b, c, f, h, w), got " + to_string(v.shape()));
  if (v.dim(1) != spatial.in_ch) {
    throw ShapeError("pseudo-3D conv expects " + std::to_string(spatial.in_ch) + " channels, got " +
                     std::to_string(v.dim(1)));
  }
  const std::int64_t b = v.dim(0);
  Var x = ops::rearrange(v, "b c f h w -> (b f) c h w");
  x = spatial.forward(tape, x);
  x = ops::rearrange(x, "(b f) c h w -> b c f h w", {{"b", b}});
  // The (b h w) c f view is never materialised; temporal_conv reads frames in place.
  return ops::temporal_conv(x, tape.param(temporal.weight), tape.param(temporal.bias), temporal.padding);
}

void Pseudo3DConv::visit(const std::string& prefix, const ParamVisitor& fn) {
  spatial.visit(prefix + ".spatial", fn);
  temporal.visit(prefix + ".temporal", fn);
}

// --- Attention --------------------------------------------------------------

Attention::Attention(std::int64_t d, std::int64_t ctx, int h, Rng& rng)
    : dim(d),
      context_dim(ctx),
      heads(h),
      w_q(d, d, rng),
      w_k(ctx, d, rng),
      w_v(ctx, d, rng),
      w_out(d, d, rng) {
  if (h <= 0 || d % h != 0) {
    throw ConfigError("attention: " + std::to_string(h) + " heads do not divide width " + std::to_string(d));
  }
}

Var Attention::forward(Tape& tape, const Var& x, const Var& context, Var* weights) {
  if (x.rank() != 3 || context.rank() != 3) throw ShapeError("attention expects (b, n, c) inputs");
  if (x.dim(2) != dim) {
    throw ShapeError("attention: query width " + std::to_string(x.dim(2)) + " != " + std::to_string(dim));
  }
  if (context.dim(2) != context_dim) {
    throw ShapeError("attention: context token width " + std::to_string(context.dim(2)) + " != " +
                     std::to_string(context_dim));
  }
  if (context.dim(0) != x.dim(0)) throw ShapeError("attention: batch mismatch between queries and context");
  const AxisSizes hs{{"h", heads}};
  Var q = ops::rearrange(w_q.forward(tape, x), "b n (h d) -> (b h) n d", hs);
  Var kt = ops::rearrange(w_k.forward(tape, context), "b m (h d) -> (b h) d m", hs);
  Var v = ops::rearrange(w_v.forward(tape, context), "b m (h d) -> (b h) m d", hs);
  Var scores = ops::scale(ops::matmul(q, kt), Scalar(1) / std::sqrt(static_cast<Scalar>(d_k())));
  Var attn = ops::softmax(scores, -1);
  if (weights) *weights = attn;
  Var o = ops::rearrange(ops::matmul(attn, v), "(b h) n d -> b n (h d)", hs);
  return w_out.forward(tape, o);
}

void Attention::visit(const std::string& prefix, const ParamVisitor& fn) {
  w_q.visit(prefix + ".w_q", fn);
  w_k.visit(prefix + ".w_k", fn);
  w_v.visit(prefix + ".w_v", fn);
  w_out.visit(prefix + ".w_out", fn);
}

namespace {

void require_video(const Var& v, std::int64_t channels, const char* what) {
  if (v.rank() != 5) throw ShapeError(std::string(what) + " expects (b, c, f, h, w), got " + to_string(v.shape()));
  if (v.dim(1) != channels) {
    throw ShapeError(std::string(what) + " expects " + std::to_string(channels) + " channels, got " +
                     std::to_string(v.dim(1)));
  }
}

}  // namespace

SpatialAttention::SpatialAttention(std::int64_t c, int heads, int groups, Rng& rng)
    : norm(groups, c), attn(c, c, heads, rng) {}

Var SpatialAttention::attend(Tape& tape, const Var& v, Var* weights) {
  require_video(v, attn.dim, "spatial attention");
  const std::int64_t b = v.dim(0), h = v.dim(3), w = v.dim(4);
  Var x = ops::rearrange(v, "b c f h w -> (b f) (h w) c");
  Var y = attn.forward(tape, x, x, weights);
  return ops::rearrange(y, "(b f) (h w) c -> b c f h w", {{"b", b}, {"h", h}, {"w", w}});
}

Var SpatialAttention::forward(Tape& tape, const Var& v) { return ops::add(v, attend(tape, norm.forward(tape, v))); }

void SpatialAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  norm.visit(prefix + ".norm", fn);
  attn.visit(prefix + ".attn", fn);
}

TemporalAttention::TemporalAttention(std::int64_t c, int heads, int groups, Rng& rng)
    : norm(groups, c), attn(c, c, heads, rng) {}

Var TemporalAttention::attend(Tape& tape, const Var& v, Var* weights) {
  require_video(v, attn.dim, "temporal attention");
  const std::int64_t b = v.dim(0), h = v.dim(3), w = v.dim(4);
  Var x = ops::rearrange(v, "b c f h w -> (b h w) f c");
  Var y = attn.forward(tape, x, x, weights);
  return ops::rearrange(y, "(b h w) f c -> b c f h w", {{"b", b}, {"h", h}, {"w", w}});
}

Var TemporalAttention::forward(Tape& tape, const Var& v) { return ops::add(v, attend(tape, norm.forward(tape, v))); }

void TemporalAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  norm.visit(prefix + ".norm", fn);
  attn.visit(prefix + ".attn", fn);
}

CrossAttention::CrossAttention(std::int64_t c, std::int64_t ctx, int heads, int groups, Rng& rng)
    : norm(groups, c), attn(c, ctx, heads, rng) {}

Var CrossAttention::attend(Tape& tape, const Var& v, const Var& tokens, Var* weights) {
  require_video(v, attn.dim, "cross attention");
  if (tokens.rank() != 3) throw ShapeError("cross attention tokens must be (b, n_tok, c), got " + to_string(tokens.shape()));
  if (tokens.dim(2) != attn.context_dim) {
    throw ShapeError("cross attention: token width " + std::to_string(tokens.dim(2)) + " != layer context width " +
                     std::to_string(attn.context_dim));
  }
  const std::int64_t f = v.dim(2), h = v.dim(3), w = v.dim(4);
  Var x = ops::rearrange(v, "b c f h w -> b (h w f) c");
  Var y = attn.forward(tape, x, tokens, weights);
  return ops::rearrange(y, "b (h w f) c -> b c f h w", {{"f", f}, {"h", h}, {"w", w}});
}

Var CrossAttention::forward(Tape& tape, const Var& v, const Var& tokens) {
  return ops::add(v, attend(tape, norm.forward(tape, v), tokens));
}

void CrossAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  norm.visit(prefix + ".norm", fn);
  attn.visit(prefix + ".attn", fn);
}

// --- TimestepEmbedding ------------------------------------------------------

TimestepEmbedding::TimestepEmbedding(std::int64_t sdim, std::int64_t edim, Rng& rng)
    : sinusoid_dim(sdim), embed_dim(edim), fc1(sdim, edim, rng), fc2(edim, edim, rng) {
  if (sdim < 2 || sdim % 2) throw ConfigError("sinusoidal timestep dimension must be even and >= 2");
}

Tensor TimestepEmbedding::sinusoidal(const std::vector<int>& timesteps, std::int64_t dim) {
  const std::int64_t half = dim / 2;
  Tensor out({static_cast<std::int64_t>(timesteps.size()), dim});
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = timesteps[b] * freq;
      out.at({static_cast<std::int64_t>(b), i}) = static_cast<Scalar>(std::sin(arg));
      out.at({static_cast<std::int64_t>(b), half + i}) = static_cast<Scalar>(std::cos(arg));
    }
  }
  return out;
}

Var TimestepEmbedding::forward(Tape& tape, const std::vector<int>& timesteps) {
  Var s = tape.constant(sinusoidal(timesteps, sinusoid_dim));
  return fc2.forward(tape, ops::silu(fc1.forward(tape, s)));
}

void TimestepEmbedding::visit(const std::string& prefix, const ParamVisitor& fn) {
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

}  // namespace ff::nn
