#include "fashionflow/pipeline.hpp"

#include <algorithm>

#include "fashionflow/errors.hpp"

namespace ff {

std::map<std::string, std::string> ModelConfig::to_map() const {
  auto kv = unet.to_map();
  kv["vae.hidden1"] = std::to_string(vae.hidden1);
  kv["vae.hidden2"] = std::to_string(vae.hidden2);
  kv["vae.latent_channels"] = std::to_string(vae.latent_channels);
  kv["model.embed_dim"] = std::to_string(embed_dim);
  return kv;
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.unet = UNetConfig::from_map(kv);
  auto get_int = [&](const std::string& key, std::int64_t fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
      return static_cast<std::int64_t>(std::stoll(it->second));
    } catch (const std::exception&) {
      throw ConfigError("malformed integer for " + key + ": '" + it->second + "'");
    }
  };
  c.vae.hidden1 = get_int("vae.hidden1", c.vae.hidden1);
  c.vae.hidden2 = get_int("vae.hidden2", c.vae.hidden2);
  c.vae.latent_channels = get_int("vae.latent_channels", c.vae.latent_channels);
  c.embed_dim = get_int("model.embed_dim", c.embed_dim);
  if (c.vae.latent_channels != c.unet.latent_channels) {
    throw ConfigError("VAE latent channels differ from the U-Net's");
  }
  return c;
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.unet.validate();
  Model m;
  m.config = config;
  m.seed = seed;
  m.unet = UNet::build(config.unet, seed);
  m.vae = ToyVAE::build(config.vae, seed);
  m.embedder = Embedder::build(seed, config.embed_dim);
  m.adapter = Adapter(config.vae.latent_channels, config.embed_dim, config.unet.context_dim, seed);
  return m;
}

void Model::visit(const nn::ParamVisitor& fn) {
  unet.visit([&](const std::string& name, Parameter& p) { fn("unet." + name, p); });
  vae.visit(fn);
  adapter.visit(fn);
}

void Model::save_to(Checkpoint& ck) const {
  auto& self = const_cast<Model&>(*this);
  for (auto& [k, v] : config.to_map()) ck.config[k] = v;
  ck.config["model.seed"] = std::to_string(seed);
  ck.config["vae.trained"] = vae.trained() ? "1" : "0";
  self.visit([&](const std::string& name, Parameter& p) { ck.put(name, p.value); });
}

void load_parameters(Model& model, const Checkpoint& ck) {
  model.visit([&](const std::string& name, Parameter& p) {
    const Tensor& t = ck.get(name);
    if (t.shape() != p.value.shape()) {
      throw FormatError("checkpoint entry '" + name + "' has shape " + to_string(t.shape()) + ", model expects " +
                        to_string(p.value.shape()));
    }
    p.value = t;
  });
}

Model Model::load_from(const Checkpoint& ck) {
  const ModelConfig config = ModelConfig::from_map(ck.config);
  std::uint64_t seed = 0;
  if (auto it = ck.config.find("model.seed"); it != ck.config.end()) {
    try {
      seed = std::stoull(it->second);
    } catch (const std::exception&) {
      throw FormatError("checkpoint has a malformed model.seed");
    }
  }
  Model m = build(config, seed);
  load_parameters(m, ck);
  auto it = ck.config.find("vae.trained");
  m.vae.mark_trained(it != ck.config.end() && it->second == "1");
  return m;
}

Tensor frames_first_to_channels_first(const Tensor& videos) { return rearrange(videos, "b f c h w -> b c f h w"); }
Tensor channels_first_to_frames_first(const Tensor& videos) { return rearrange(videos, "b c f h w -> b f c h w"); }

ConditioningBundle condition_on(Model& model, const Tensor& image) {
  return encode_condition(image, model.vae, model.embedder, model.adapter);
}

namespace {

std::vector<Tensor> decode_videos(Model& model, const Tensor& latents) {
  Tensor pixels = channels_first_to_frames_first(vae_decode_frames(model.vae, latents));
  std::vector<Tensor> out;
  for (std::int64_t n = 0; n < pixels.dim(0); ++n) out.push_back(select(pixels, 0, n));
  return out;
}

NoiseSchedule sampling_schedule(const Model& model, int steps) {
  return NoiseSchedule::cosine(model.config.unet.timesteps).strided(steps);
}

}  // namespace

Generated generate(Model& model, const std::vector<Tensor>& images, const GenerateOptions& options) {
  if (!model.vae.trained()) throw ContractError("generation needs a pretrained VAE");
  std::vector<ConditioningBundle> conds;
  for (const auto& img : images) conds.push_back(condition_on(model, img));
  Generated g;
  g.latents = sample(model.unet, conds, options.frames, sampling_schedule(model, options.steps), options.seed,
                     options.mode, model.vae.latent_bound())
                  .tensor;
  g.videos = decode_videos(model, g.latents);
  return g;
}

Interpolated interpolate(Model& model, const Tensor& video, const InterpolateOptions& options) {
  if (!model.vae.trained()) throw ContractError("interpolation needs a pretrained VAE");
  if (video.rank() != 4 || video.dim(1) != 3) {
    throw ShapeError("interpolation expects a video (f, 3, H, W), got " + to_string(video.shape()));
  }
  const std::int64_t f = video.dim(0), H = video.dim(2), W = video.dim(3);
  const Tensor pixels = frames_first_to_channels_first(video.reshaped({1, f, 3, H, W}));
  const Tensor latents = vae_encode_frames(model.vae, pixels);
  const Tensor rgb = rearrange(rgb_to_latent_resolution(rearrange(pixels, "b c f h w -> (b f) c h w")),
                               "(b f) c h w -> b c f h w", {{"b", 1}});

  Interpolated out;
  const auto mask = make_interpolation_mask(static_cast<int>(f), options.pattern, rgb, options.seed);
  out.visible = mask.visible;

  const ConditioningBundle cond = condition_on(model, select(video, 0, 0));
  SamplerInputs in;
  in.aux = mask.aux;
  in.known = latents;
  in.known_frames = mask.visible;
  in.x0_bound = model.vae.latent_bound();
  if (uses_local(options.mode)) {
    in.first_frame = cond.i_vae.reshaped({1, cond.i_vae.dim(0), cond.i_vae.dim(1), cond.i_vae.dim(2)});
  }
  if (uses_global(options.mode)) in.tokens = cond.tokens.reshaped({1, cond.tokens.dim(0), cond.tokens.dim(1)});
  out.latents = run_sampler(model.unet, in, latents.shape(), sampling_schedule(model, options.steps), options.seed).tensor;
  out.video = decode_videos(model, out.latents)[0];
  return out;
}

}  // namespace ff
