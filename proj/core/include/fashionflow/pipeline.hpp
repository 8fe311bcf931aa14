#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fashionflow/checkpoint.hpp"
#include "fashionflow/conditioning.hpp"
#include "fashionflow/diffusion.hpp"
#include "fashionflow/unet.hpp"

namespace ff {

struct ModelConfig {
  UNetConfig unet = UNetConfig::desk();
  ToyVAE::Config vae;
  std::int64_t embed_dim = 32;

  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
};

// Everything needed to turn a conditioning image into a video. The embedder is
// a pure function of the seed and is rebuilt rather than stored.
struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;
  UNet unet;
  ToyVAE vae;
  Embedder embedder;
  Adapter adapter;

  static Model build(const ModelConfig& config, std::uint64_t seed);

  // Parameters under "unet.", "vae." and "adapter." prefixes.
  void visit(const nn::ParamVisitor& fn);

  void save_to(Checkpoint& ck) const;
  static Model load_from(const Checkpoint& ck);
};

// Loads every "unet.*", "vae.*" and "adapter.*" entry into the matching
// parameter; missing entries or shape mismatches raise FormatError.
void load_parameters(Model& model, const Checkpoint& ck);

// (b, f, 3, H, W) <-> (b, 3, f, H, W)
Tensor frames_first_to_channels_first(const Tensor& videos);
Tensor channels_first_to_frames_first(const Tensor& videos);

ConditioningBundle condition_on(Model& model, const Tensor& image);

struct GenerateOptions {
  int frames = 8;
  int steps = 1000;  // strided from the training schedule when < T
  std::uint64_t seed = 0;
  CondMode mode = CondMode::both;
};

struct Generated {
  Tensor latents;             // (b, 4, f, h, w)
  std::vector<Tensor> videos;  // each (f, 3, H, W)
};

// One video per conditioning image (3, H, W).
Generated generate(Model& model, const std::vector<Tensor>& images, const GenerateOptions& options);

struct InterpolateOptions {
  MaskPattern pattern = MaskPattern::alternate;
  int steps = 1000;
  std::uint64_t seed = 0;
  CondMode mode = CondMode::both;
};

struct Interpolated {
  std::vector<bool> visible;
  Tensor latents;  // (1, 4, f, h, w)
  Tensor video;    // (f, 3, H, W); visible frames are VAE round trips
};

// Regenerates the hidden frames of `video` (f, 3, H, W) from the visible ones.
Interpolated interpolate(Model& model, const Tensor& video, const InterpolateOptions& options);

}  // namespace ff
