#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fashionflow/layers.hpp"

namespace ff {

struct Rational {
  std::int64_t num = 1, den = 1;
  static Rational parse(const std::string& text);  // "1/8", "0.125" is rejected
  std::string str() const;
  bool operator==(const Rational&) const = default;
};

struct UNetConfig {
  std::array<std::int64_t, 4> base_widths{64, 128, 256, 512};
  int layers_per_block = 6;
  int mid_layers = 4;
  std::int64_t latent_channels = 4;
  std::int64_t aux_channels = 4;
  Rational width_scale{1, 1};
  int attention_heads = 1;
  int timesteps = 1000;
  int norm_groups = 4;
  std::int64_t context_dim = 32;  // width of the conditioning tokens

  // Desk default: widths 8/16/32/64, one head.
  static UNetConfig desk();

  std::array<std::int64_t, 4> widths() const;  // scaled; throws ConfigError if not integral
  std::int64_t in_channels() const { return latent_channels + aux_channels; }
  std::int64_t time_embed_dim() const { return 4 * widths()[0]; }
  void validate() const;

  std::map<std::string, std::string> to_map() const;
  static UNetConfig from_map(const std::map<std::string, std::string>& kv);
};

// Two pseudo-3D convolutions with pre-activation group norm and SiLU, wrapped
// in a residual connection (1x1 projection when the width changes).
class ResidualPair {
 public:
  ResidualPair() = default;
  ResidualPair(std::int64_t in, std::int64_t out, int groups, bool stem, Rng& rng);

  Var forward(Tape& tape, const Var& x, const Var* time_bias);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);

  bool stem = false;  // first conv sees the raw input, no norm/activation
  nn::GroupNorm norm1, norm2;
  nn::Pseudo3DConv conv1, conv2;
  std::optional<nn::Conv2D> skip;
};

// A stack of `layers` pseudo-3D convolutions (layers/2 residual pairs) with a
// per-block timestep bias added after the first convolution.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(std::int64_t in, std::int64_t out, int layers, int groups, std::int64_t time_dim, bool stem, Rng& rng);

  Var forward(Tape& tape, const Var& x, const Var& time_embedding);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);

  std::vector<ResidualPair> pairs;
  nn::Linear time_proj;
};

// Denoising U-Net: 4 encoder blocks, a middle block with spatiotemporal
// attention, 4 decoder blocks with skip concatenation, and a cross-attention
// layer after every block. Spatial size halves after encoder blocks 0-2 and
// doubles after decoder blocks 0-2; frames are never resampled.
class UNet {
 public:
  static UNet build(const UNetConfig& config, std::uint64_t seed);

  // v_in (b, latent+aux, f, h, w), timesteps per item, optional tokens
  // (b, n_tok, context_dim). Without tokens cross-attention is bypassed.
  Var predict_noise(Tape& tape, const Var& v_in, const std::vector<int>& timesteps, const Var* tokens);

  void visit(const nn::ParamVisitor& fn);
  std::vector<std::pair<std::string, Parameter*>> named_parameters();
  std::int64_t parameter_count();

  const UNetConfig& config() const { return config_; }

 private:
  UNetConfig config_;
  nn::TimestepEmbedding time_embed_;
  std::array<ConvBlock, 4> encoder_;
  std::array<nn::CrossAttention, 4> encoder_xattn_;
  ConvBlock middle_;
  nn::SpatialAttention middle_spatial_;
  nn::TemporalAttention middle_temporal_;
  nn::CrossAttention middle_xattn_;
  std::array<ConvBlock, 4> decoder_;
  std::array<nn::CrossAttention, 4> decoder_xattn_;
  nn::GroupNorm out_norm_;
  nn::Pseudo3DConv out_conv_;
};

}  // namespace ff
