#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fashionflow/autograd.hpp"
#include "fashionflow/ops.hpp"

namespace ff::nn {

using ParamVisitor = std::function<void(const std::string& name, Parameter& p)>;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng);

// Shared shape for all layers: forward() records onto the caller's tape and
// visit() enumerates parameters under a dotted prefix.
class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true);

  Var forward(Tape& tape, const Var& x);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  std::int64_t in_features = 0, out_features = 0;
  Parameter weight;  // (out, in)
  std::optional<Parameter> bias;
};

class Conv2D {
 public:
  Conv2D() = default;
  Conv2D(std::int64_t in, std::int64_t out, int kernel, int padding, Rng& rng);

  Var forward(Tape& tape, const Var& x);  // (n, c, h, w)
  void visit(const std::string& prefix, const ParamVisitor& fn);

  std::int64_t in_ch = 0, out_ch = 0;
  int kernel = 3, padding = 1;
  Parameter weight;  // (out, in, k, k)
  Parameter bias;    // (out)
};

class Conv1D {
 public:
  Conv1D() = default;
  Conv1D(std::int64_t in, std::int64_t out, int kernel, int padding, Rng& rng);

  Var forward(Tape& tape, const Var& x);  // (n, c, l)
  void visit(const std::string& prefix, const ParamVisitor& fn);

  std::int64_t in_ch = 0, out_ch = 0;
  int kernel = 3, padding = 1;
  Parameter weight;  // (out, in, k)
  Parameter bias;    // (out)
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(int groups, std::int64_t channels);

  Var forward(Tape& tape, const Var& x);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  int groups = 1;
  std::int64_t channels = 0;
  Parameter gamma, beta;
};

// 2D spatial convolution per frame followed by a 1D temporal convolution per
// pixel, on video latents (b, c, f, h, w). The temporal kernel starts as the
// centred delta, so a fresh layer behaves as a per-frame 2D convolution.
class Pseudo3DConv {
 public:
  Pseudo3DConv() = default;
  Pseudo3DConv(std::int64_t in, std::int64_t out, Rng& rng);

  Var forward(Tape& tape, const Var& v);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  Conv2D spatial;
  Conv1D temporal;
};

// Scaled dot-product attention, softmax(Q K^T / sqrt(d_k)) V, with learned
// projections. Queries come from `x`; keys and values from `context`.
class Attention {
 public:
  Attention() = default;
  Attention(std::int64_t dim, std::int64_t context_dim, int heads, Rng& rng);

  // x (b, n, dim), context (b, m, context_dim) -> (b, n, dim). When `weights`
  // is given it receives the post-softmax matrix ((b*heads), n, m).
  Var forward(Tape& tape, const Var& x, const Var& context, Var* weights = nullptr);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  std::int64_t dim = 0, context_dim = 0;
  int heads = 1;
  std::int64_t d_k() const { return dim / heads; }
  Linear w_q, w_k, w_v, w_out;
};

// Self-attention over the (h w) tokens of each frame.
class SpatialAttention {
 public:
  SpatialAttention() = default;
  SpatialAttention(std::int64_t channels, int heads, int norm_groups, Rng& rng);

  // Bare attention on v (b, c, f, h, w), no normalisation or residual.
  Var attend(Tape& tape, const Var& v, Var* weights = nullptr);
  // v + attend(group_norm(v)).
  Var forward(Tape& tape, const Var& v);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  GroupNorm norm;
  Attention attn;
};

// Self-attention over the frames of each spatial position.
class TemporalAttention {
 public:
  TemporalAttention() = default;
  TemporalAttention(std::int64_t channels, int heads, int norm_groups, Rng& rng);

  Var attend(Tape& tape, const Var& v, Var* weights = nullptr);
  Var forward(Tape& tape, const Var& v);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  GroupNorm norm;
  Attention attn;
};

// Attention from every (h w f) position of the latent to conditioning tokens
// (b, n_tok, context_dim).
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(std::int64_t channels, std::int64_t context_dim, int heads, int norm_groups, Rng& rng);

  Var attend(Tape& tape, const Var& v, const Var& tokens, Var* weights = nullptr);
  Var forward(Tape& tape, const Var& v, const Var& tokens);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  GroupNorm norm;
  Attention attn;
};

// Sinusoidal timestep features mapped through a two-layer perceptron.
class TimestepEmbedding {
 public:
  TimestepEmbedding() = default;
  TimestepEmbedding(std::int64_t sinusoid_dim, std::int64_t embed_dim, Rng& rng);

  static Tensor sinusoidal(const std::vector<int>& timesteps, std::int64_t dim);
  Var forward(Tape& tape, const std::vector<int>& timesteps);  // -> (b, embed_dim)
  void visit(const std::string& prefix, const ParamVisitor& fn);

  std::int64_t sinusoid_dim = 0, embed_dim = 0;
  Linear fc1, fc2;
};

}  // namespace ff::nn
