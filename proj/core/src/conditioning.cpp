#include "fashionflow/conditioning.hpp"

#include <cmath>
#include <limits>

#include "fashionflow/errors.hpp"

namespace ff {

// --- ToyVAE -----------------------------------------------------------------

ToyVAE ToyVAE::build(const Config& config, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x766165});
  ToyVAE vae;
  vae.config_ = config;
  const auto c1 = config.hidden1, c2 = config.hidden2, lc = config.latent_channels;
  vae.enc1_ = nn::Conv2D(3, c1, 3, 1, rng);
  vae.enc2_ = nn::Conv2D(c1, c1, 3, 1, rng);
  vae.enc3_ = nn::Conv2D(c1, c2, 3, 1, rng);
  vae.enc4_ = nn::Conv2D(c2, c2, 3, 1, rng);
  vae.enc_out_ = nn::Conv2D(c2, lc, 3, 1, rng);
  vae.dec_in_ = nn::Conv2D(lc, c2, 3, 1, rng);
  vae.dec1_ = nn::Conv2D(c2, c2, 3, 1, rng);
  vae.dec2_ = nn::Conv2D(c2, c1, 3, 1, rng);
  vae.dec3_ = nn::Conv2D(c1, c1, 3, 1, rng);
  vae.dec_out_ = nn::Conv2D(c1, 3, 3, 1, rng);
  vae.latent_scale_ = Parameter(Tensor({1}, Scalar(1)));
  vae.latent_scale_.requires_grad = false;
  vae.latent_bound_ = Parameter(Tensor({1}, std::numeric_limits<Scalar>::infinity()));
  vae.latent_bound_.requires_grad = false;
  return vae;
}

Var ToyVAE::encode(Tape& tape, const Var& images) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("VAE encode expects (n, 3, H, W), got " + to_string(images.shape()));
  }
  if (images.dim(2) % 4 || images.dim(3) % 4) throw ShapeError("VAE encode needs H and W divisible by 4");
  Var h = ops::silu(enc1_.forward(tape, images));
  h = ops::silu(enc2_.forward(tape, h));
  h = ops::avg_pool2(h);
  h = ops::silu(enc3_.forward(tape, h));
  h = ops::silu(enc4_.forward(tape, h));
  h = ops::avg_pool2(h);
  return ops::scale(enc_out_.forward(tape, h), latent_scale());
}

Var ToyVAE::decode(Tape& tape, const Var& latents) {
  if (latents.rank() != 4 || latents.dim(1) != config_.latent_channels) {
    throw ShapeError("VAE decode expects (n, " + std::to_string(config_.latent_channels) + ", h, w), got " +
                     to_string(latents.shape()));
  }
  Var h = ops::scale(latents, Scalar(1) / latent_scale());
  h = ops::silu(dec_in_.forward(tape, h));
  h = ops::silu(dec1_.forward(tape, h));
  h = ops::upsample_nearest2(h);
  h = ops::silu(dec2_.forward(tape, h));
  h = ops::upsample_nearest2(h);
  h = ops::silu(dec3_.forward(tape, h));
  return ops::tanh(dec_out_.forward(tape, h));
}

Tensor ToyVAE::encode(const Tensor& images) {
  Tape tape(false);
  return encode(tape, tape.constant(images)).value();
}

Tensor ToyVAE::decode(const Tensor& latents) {
  Tape tape(false);
  return decode(tape, tape.constant(latents)).value();
}

void ToyVAE::visit(const nn::ParamVisitor& fn) {
  enc1_.visit("vae.enc1", fn);
  enc2_.visit("vae.enc2", fn);
  enc3_.visit("vae.enc3", fn);
  enc4_.visit("vae.enc4", fn);
  enc_out_.visit("vae.enc_out", fn);
  dec_in_.visit("vae.dec_in", fn);
  dec1_.visit("vae.dec1", fn);
  dec2_.visit("vae.dec2", fn);
  dec3_.visit("vae.dec3", fn);
  dec_out_.visit("vae.dec_out", fn);
  fn("vae.latent_scale", latent_scale_);
  fn("vae.latent_bound", latent_bound_);
}

// --- Embedder ---------------------------------------------------------------

Embedder Embedder::build(std::uint64_t seed, std::int64_t dim) {
  Rng rng = make_rng(seed, {0x656d62});
  Embedder e;
  e.dim_ = dim;
  e.conv_w_ = nn::fan_in_uniform({e.hidden_, 3, 3, 3}, 27, rng);
  e.conv_b_ = nn::fan_in_uniform({e.hidden_}, 27, rng);
  e.proj_w_ = nn::fan_in_uniform({dim, 4 * e.hidden_}, 4 * e.hidden_, rng);
  e.proj_b_ = nn::fan_in_uniform({dim}, 4 * e.hidden_, rng);
  return e;
}

Tensor Embedder::embed(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("embedder expects an image (3, H, W), got " + to_string(image.shape()));
  }
  Tape tape(false);
  Var x = tape.constant(image.reshaped({1, 3, image.dim(1), image.dim(2)}));
  x = ops::avg_pool2(ops::avg_pool2(x));
  x = ops::tanh(ops::conv2d(x, tape.constant(conv_w_), tape.constant(conv_b_), 1));
  const Tensor& fm = x.value();
  const std::int64_t h = fm.dim(2), w = fm.dim(3);
  // Mean over the four image quadrants per channel.
  Tensor pooled({1, 4 * hidden_});
  for (std::int64_t c = 0; c < hidden_; ++c) {
    for (std::int64_t q = 0; q < 4; ++q) {
      const std::int64_t i0 = (q / 2) * h / 2, i1 = (q / 2 + 1) * h / 2;
      const std::int64_t j0 = (q % 2) * w / 2, j1 = (q % 2 + 1) * w / 2;
      double s = 0;
      for (std::int64_t i = i0; i < i1; ++i) {
        for (std::int64_t j = j0; j < j1; ++j) s += fm.at({0, c, i, j});
      }
      const double cnt = static_cast<double>(std::max<std::int64_t>(1, (i1 - i0) * (j1 - j0)));
      pooled[c * 4 + q] = static_cast<Scalar>(s / cnt);
    }
  }
  Var y = ops::linear(tape.constant(pooled), tape.constant(proj_w_), tape.constant(proj_b_));
  Tensor out = y.value().reshaped({dim_});
  double norm = 0;
  for (Scalar v : out.data()) norm += static_cast<double>(v) * v;
  norm = std::sqrt(norm);
  if (norm == 0) throw NumericError("embedder produced a zero vector");
  for (auto& v : out.data()) v = static_cast<Scalar>(v / norm);
  return out;
}

// --- Adapter ----------------------------------------------------------------

Adapter::Adapter(std::int64_t latent_channels, std::int64_t embed_dim, std::int64_t token_dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x616461});
  vae_proj = nn::Linear(latent_channels, token_dim, rng);
  clip_proj = nn::Linear(embed_dim, token_dim, rng);
}

Var Adapter::forward(Tape& tape, const Var& i_vae, const Var& i_clip) {
  if (i_vae.rank() != 4 || i_vae.dim(1) != vae_proj.in_features) {
    throw ShapeError("adapter expects i_vae (b, " + std::to_string(vae_proj.in_features) + ", h, w), got " +
                     to_string(i_vae.shape()));
  }
  if (i_clip.rank() != 2 || i_clip.dim(1) != clip_proj.in_features || i_clip.dim(0) != i_vae.dim(0)) {
    throw ShapeError("adapter expects i_clip (b, " + std::to_string(clip_proj.in_features) + "), got " +
                     to_string(i_clip.shape()));
  }
  const std::int64_t b = i_vae.dim(0);
  Var spatial = vae_proj.forward(tape, ops::rearrange(i_vae, "b c h w -> b (h w) c"));
  Var global = ops::reshape(clip_proj.forward(tape, i_clip), {b, 1, token_dim()});
  return ops::concat({spatial, global}, 1);
}

void Adapter::visit(const nn::ParamVisitor& fn) {
  vae_proj.visit("adapter.vae_proj", fn);
  clip_proj.visit("adapter.clip_proj", fn);
}

// --- Free functions ---------------------------------------------------------

Tensor rgb_to_latent_resolution(const Tensor& images) {
  Tape tape(false);
  return ops::avg_pool2(ops::avg_pool2(tape.constant(images))).value();
}

ConditioningBundle encode_condition(const Tensor& image, ToyVAE& vae, const Embedder& embedder, Adapter& adapter) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("conditioning image must be (3, H, W), got " + to_string(image.shape()));
  }
  for (Scalar v : image.data()) {
    if (!(v >= Scalar(-1) && v <= Scalar(1))) throw ContractError("conditioning image values must lie in [-1, 1]");
  }
  const std::int64_t H = image.dim(1), W = image.dim(2);
  ConditioningBundle bundle;
  Tensor latent = vae.encode(image.reshaped({1, 3, H, W}));
  bundle.i_vae = latent.reshaped({latent.dim(1), latent.dim(2), latent.dim(3)});
  bundle.i_clip = embedder.embed(image);
  bundle.rgb_lowres = rgb_to_latent_resolution(image);

  Tape tape(false);
  Var tokens = adapter.forward(tape, tape.constant(latent), tape.constant(bundle.i_clip.reshaped({1, embedder.dim()})));
  bundle.tokens = tokens.value().reshaped({tokens.dim(1), tokens.dim(2)});
  return bundle;
}

Tensor vae_decode_frames(ToyVAE& vae, const Tensor& latent_video) {
  if (!vae.trained()) throw ContractError("VAE decoder used before pretraining");
  if (latent_video.rank() != 5) {
    throw ShapeError("latent video must be (b, c, f, h, w), got " + to_string(latent_video.shape()));
  }
  const std::int64_t b = latent_video.dim(0);
  Tensor frames = rearrange(latent_video, "b c f h w -> (b f) c h w");
  Tensor pixels = vae.decode(frames);
  return rearrange(pixels, "(b f) c h w -> b c f h w", {{"b", b}});
}

Tensor vae_encode_frames(ToyVAE& vae, const Tensor& pixel_video) {
  if (pixel_video.rank() != 5) {
    throw ShapeError("pixel video must be (b, 3, f, H, W), got " + to_string(pixel_video.shape()));
  }
  const std::int64_t b = pixel_video.dim(0);
  Tensor frames = rearrange(pixel_video, "b c f h w -> (b f) c h w");
  Tensor latents = vae.encode(frames);
  return rearrange(latents, "(b f) c h w -> b c f h w", {{"b", b}});
}

}  // namespace ff
