#pragma once

#include "fashionflow/layers.hpp"

namespace ff {

// Small convolutional autoencoder mapping images (3, H, W) in [-1, 1] to
// latents (4, H/4, W/4). Encoding is deterministic (no posterior sampling);
// latents are multiplied by `latent_scale`, fitted after pretraining so the
// dataset latents have roughly unit variance.
class ToyVAE {
 public:
  struct Config {
    std::int64_t hidden1 = 32;  // channels at full resolution
    std::int64_t hidden2 = 32;  // channels at 1/2 resolution
    std::int64_t latent_channels = 4;
  };

  static ToyVAE build(const Config& config, std::uint64_t seed);

  // images (n, 3, H, W) -> (n, 4, H/4, W/4)
  Var encode(Tape& tape, const Var& images);
  // latents (n, 4, h, w) -> (n, 3, 4h, 4w), tanh output in [-1, 1]
  Var decode(Tape& tape, const Var& latents);
  Tensor encode(const Tensor& images);
  Tensor decode(const Tensor& latents);

  void visit(const nn::ParamVisitor& fn);

  const Config& config() const { return config_; }
  bool trained() const { return trained_; }
  void mark_trained(bool v = true) { trained_ = v; }
  Scalar latent_scale() const { return latent_scale_.value[0]; }
  void set_latent_scale(Scalar s) { latent_scale_.value[0] = s; }
  // Largest |latent| seen over the training set (infinite until trained).
  Scalar latent_bound() const { return latent_bound_.value[0]; }
  void set_latent_bound(Scalar s) { latent_bound_.value[0] = s; }

 private:
  Config config_;
  bool trained_ = false;
  nn::Conv2D enc1_, enc2_, enc3_, enc4_, enc_out_;
  nn::Conv2D dec_in_, dec1_, dec2_, dec3_, dec_out_;
  Parameter latent_scale_;
  Parameter latent_bound_;
};

// Fixed, seeded image embedder standing in for a frozen CLIP image tower.
// Output vectors are unit-norm.
class Embedder {
 public:
  static Embedder build(std::uint64_t seed, std::int64_t dim = 32);
  Tensor embed(const Tensor& image) const;  // (3, H, W) -> (dim)
  std::int64_t dim() const { return dim_; }

 private:
  std::int64_t dim_ = 0;
  std::int64_t hidden_ = 16;
  Tensor conv_w_, conv_b_, proj_w_, proj_b_;
};

// Learned linear fusion of the VAE latent and embedder vector into a token
// sequence: one token per latent position plus one embedder token.
class Adapter {
 public:
  Adapter() = default;
  Adapter(std::int64_t latent_channels, std::int64_t embed_dim, std::int64_t token_dim, std::uint64_t seed);

  // i_vae (b, 4, h, w), i_clip (b, d) -> tokens (b, h*w + 1, token_dim)
  Var forward(Tape& tape, const Var& i_vae, const Var& i_clip);
  void visit(const nn::ParamVisitor& fn);

  std::int64_t token_dim() const { return vae_proj.out_features; }

  nn::Linear vae_proj, clip_proj;
};

struct ConditioningBundle {
  Tensor i_vae;       // (4, h, w)
  Tensor i_clip;      // (d)
  Tensor tokens;      // (h*w + 1, token_dim)
  Tensor rgb_lowres;  // (3, h, w): the image average-pooled to latent resolution
};

// 4x4 average pooling of images (..., 3, H, W) to latent resolution.
Tensor rgb_to_latent_resolution(const Tensor& images);

ConditioningBundle encode_condition(const Tensor& image, ToyVAE& vae, const Embedder& embedder, Adapter& adapter);

// latent video (b, 4, f, h, w) -> pixel video (b, 3, f, 4h, 4w), decoded frame by frame.
Tensor vae_decode_frames(ToyVAE& vae, const Tensor& latent_video);
// pixel video (b, 3, f, H, W) -> latent video (b, 4, f, H/4, W/4)
Tensor vae_encode_frames(ToyVAE& vae, const Tensor& pixel_video);

}  // namespace ff
