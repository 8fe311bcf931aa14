#include "fashionflow/unet.hpp"

#include <sstream>

#include "fashionflow/errors.hpp"

namespace ff {

Rational Rational::parse(const std::string& text) {
  Rational r;
  const auto slash = text.find('/');
  try {
    std::size_t used = 0;
    if (slash == std::string::npos) {
      r.num = std::stoll(text, &used);
      r.den = 1;
      if (used != text.size()) throw ConfigError("");
    } else {
      r.num = std::stoll(text.substr(0, slash), &used);
      if (used != slash) throw ConfigError("");
      const std::string d = text.substr(slash + 1);
      r.den = std::stoll(d, &used);
      if (used != d.size()) throw ConfigError("");
    }
  } catch (const std::exception&) {
    throw ConfigError("width_scale must be an integer or a fraction like 1/8, got '" + text + "'");
  }
  if (r.num <= 0 || r.den <= 0) throw ConfigError("width_scale must be positive, got '" + text + "'");
  return r;
}

std::string Rational::str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }

UNetConfig UNetConfig::desk() {
  UNetConfig c;
  c.width_scale = {1, 8};
  return c;
}

std::array<std::int64_t, 4> UNetConfig::widths() const {
  std::array<std::int64_t, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::int64_t scaled = base_widths[i] * width_scale.num;
    if (scaled % width_scale.den != 0) {
      throw ConfigError("width " + std::to_string(base_widths[i]) + " is not divisible under width_scale " +
                        width_scale.str());
    }
    out[i] = scaled / width_scale.den;
  }
  return out;
}

void UNetConfig::validate() const {
  const auto w = widths();
  for (std::size_t i = 0; i < 4; ++i) {
    if (w[i] <= 0) throw ConfigError("channel widths must be positive");
    if (i > 0 && w[i] <= w[i - 1]) throw ConfigError("channel widths must increase down the encoder");
    if (w[i] % norm_groups != 0) {
      throw ConfigError("width " + std::to_string(w[i]) + " is not divisible by " + std::to_string(norm_groups) +
                        " norm groups");
    }
    if (w[i] % attention_heads != 0) throw ConfigError("attention heads must divide every width");
  }
  if (in_channels() % norm_groups != 0) throw ConfigError("input channels not divisible by norm groups");
  if (layers_per_block < 2 || layers_per_block % 2) throw ConfigError("layers_per_block must be even and >= 2");
  if (mid_layers < 2 || mid_layers % 2) throw ConfigError("mid_layers must be even and >= 2");
  if (timesteps < 2) throw ConfigError("timesteps must be >= 2");
  if (context_dim <= 0) throw ConfigError("context_dim must be positive");
}

std::map<std::string, std::string> UNetConfig::to_map() const {
  std::ostringstream widths_text;
  for (std::size_t i = 0; i < 4; ++i) widths_text << (i ? "," : "") << base_widths[i];
  return {
      {"unet.base_widths", widths_text.str()},
      {"unet.layers_per_block", std::to_string(layers_per_block)},
      {"unet.mid_layers", std::to_string(mid_layers)},
      {"unet.latent_channels", std::to_string(latent_channels)},
      {"unet.aux_channels", std::to_string(aux_channels)},
      {"unet.width_scale", width_scale.str()},
      {"unet.attention_heads", std::to_string(attention_heads)},
      {"unet.timesteps", std::to_string(timesteps)},
      {"unet.norm_groups", std::to_string(norm_groups)},
      {"unet.context_dim", std::to_string(context_dim)},
  };
}

UNetConfig UNetConfig::from_map(const std::map<std::string, std::string>& kv) {
  UNetConfig c;
  auto get = [&](const std::string& key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  try {
    if (auto v = get("unet.base_widths")) {
      std::istringstream is(*v);
      std::string item;
      for (std::size_t i = 0; i < 4; ++i) {
        if (!std::getline(is, item, ',')) throw ConfigError("unet.base_widths needs 4 values");
        c.base_widths[i] = std::stoll(item);
      }
    }
    if (auto v = get("unet.layers_per_block")) c.layers_per_block = std::stoi(*v);
    if (auto v = get("unet.mid_layers")) c.mid_layers = std::stoi(*v);
    if (auto v = get("unet.latent_channels")) c.latent_channels = std::stoll(*v);
    if (auto v = get("unet.aux_channels")) c.aux_channels = std::stoll(*v);
    if (auto v = get("unet.width_scale")) c.width_scale = Rational::parse(*v);
    if (auto v = get("unet.attention_heads")) c.attention_heads = std::stoi(*v);
    if (auto v = get("unet.timesteps")) c.timesteps = std::stoi(*v);
    if (auto v = get("unet.norm_groups")) c.norm_groups = std::stoi(*v);
    if (auto v = get("unet.context_dim")) c.context_dim = std::stoll(*v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("malformed U-Net config value: ") + e.what());
  }
  c.validate();
  return c;
}

// --- ResidualPair -----------------------------------------------------------

ResidualPair::ResidualPair(std::int64_t in, std::int64_t out, int groups, bool is_stem, Rng& rng)
    : stem(is_stem),
      norm1(is_stem ? 1 : groups, in),
      norm2(groups, out),
      conv1(in, out, rng),
      conv2(out, out, rng) {
  if (in != out) skip.emplace(in, out, 1, 0, rng);
}

Var ResidualPair::forward(Tape& tape, const Var& x, const Var* time_bias) {
  Var h = stem ? x : ops::silu(norm1.forward(tape, x));
  h = conv1.forward(tape, h);
  if (time_bias) h = ops::add_channel_bias(h, *time_bias);
  h = conv2.forward(tape, ops::silu(norm2.forward(tape, h)));
  Var residual = x;
  if (skip) {
    const std::int64_t b = x.dim(0);
    Var flat = ops::rearrange(x, "b c f h w -> (b f) c h w");
    residual = ops::rearrange(skip->forward(tape, flat), "(b f) c h w -> b c f h w", {{"b", b}});
  }
  return ops::add(residual, h);
}

void ResidualPair::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  if (!stem) norm1.visit(prefix + ".norm1", fn);
  conv1.visit(prefix + ".conv1", fn);
  norm2.visit(prefix + ".norm2", fn);
  conv2.visit(prefix + ".conv2", fn);
  if (skip) skip->visit(prefix + ".skip", fn);
}

// --- ConvBlock --------------------------------------------------------------

ConvBlock::ConvBlock(std::int64_t in, std::int64_t out, int layers, int groups, std::int64_t time_dim, bool stem,
                     Rng& rng)
    : time_proj(time_dim, out, rng) {
  for (int p = 0; p < layers / 2; ++p) pairs.emplace_back(p == 0 ? in : out, out, groups, stem && p == 0, rng);
}

Var ConvBlock::forward(Tape& tape, const Var& x, const Var& time_embedding) {
  Var bias = time_proj.forward(tape, ops::silu(time_embedding));
  Var h = x;
  for (std::size_t p = 0; p < pairs.size(); ++p) h = pairs[p].forward(tape, h, p == 0 ? &bias : nullptr);
  return h;
}

void ConvBlock::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  for (std::size_t p = 0; p < pairs.size(); ++p) pairs[p].visit(prefix + ".pair" + std::to_string(p), fn);
  time_proj.visit(prefix + ".time_proj", fn);
}

// --- UNet -------------------------------------------------------------------

UNet UNet::build(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, {0x756e6574});
  const auto w = config.widths();
  const int g = config.norm_groups;
  const int heads = config.attention_heads;
  const std::int64_t ctx = config.context_dim;
  const std::int64_t tdim = config.time_embed_dim();

  UNet net;
  net.config_ = config;
  net.time_embed_ = nn::TimestepEmbedding(w[0], tdim, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::int64_t in = i == 0 ? config.in_channels() : w[i - 1];
    net.encoder_[i] = ConvBlock(in, w[i], config.layers_per_block, g, tdim, i == 0, rng);
    net.encoder_xattn_[i] = nn::CrossAttention(w[i], ctx, heads, g, rng);
  }
  net.middle_ = ConvBlock(w[3], w[3], config.mid_layers, g, tdim, false, rng);
  net.middle_spatial_ = nn::SpatialAttention(w[3], heads, g, rng);
  net.middle_temporal_ = nn::TemporalAttention(w[3], heads, g, rng);
  net.middle_xattn_ = nn::CrossAttention(w[3], ctx, heads, g, rng);
  for (std::size_t j = 0; j < 4; ++j) {
    const std::size_t level = 3 - j;
    const std::int64_t prev = j == 0 ? w[3] : w[level + 1];
    net.decoder_[j] = ConvBlock(prev + w[level], w[level], config.layers_per_block, g, tdim, false, rng);
    net.decoder_xattn_[j] = nn::CrossAttention(w[level], ctx, heads, g, rng);
  }
  net.out_norm_ = nn::GroupNorm(g, w[0]);
  net.out_conv_ = nn::Pseudo3DConv(w[0], config.latent_channels, rng);

  // Every residual branch starts at zero so the untrained network is a clean
  // identity path from input to output head; this is what lets the deep,
  // narrow desk network train in a few hundred steps.
  auto zero_branch = [](nn::Pseudo3DConv& conv) {
    conv.spatial.weight.value.fill(0);
    conv.spatial.bias.value.fill(0);
  };
  auto zero_attention = [](nn::Attention& a) {
    a.w_out.weight.value.fill(0);
    if (a.w_out.bias) a.w_out.bias->value.fill(0);
  };
  // Temporal kernels start at the centred delta plus fan-in noise, so frames
  // exchange information from the first step instead of growing it from zero.
  auto mix_frames = [&](nn::Pseudo3DConv& conv) {
    const std::int64_t fan_in = conv.temporal.in_ch * conv.temporal.kernel;
    const Tensor noise = nn::fan_in_uniform(conv.temporal.weight.value.shape(), fan_in, rng);
    for (std::int64_t k = 0; k < noise.size(); ++k) conv.temporal.weight.value[k] += noise[k];
  };
  auto zero_block = [&](ConvBlock& block) {
    for (auto& pair : block.pairs) {
      mix_frames(pair.conv1);
      mix_frames(pair.conv2);
      zero_branch(pair.conv2);
    }
  };
  for (std::size_t i = 0; i < 4; ++i) {
    zero_block(net.encoder_[i]);
    zero_block(net.decoder_[i]);
    zero_attention(net.encoder_xattn_[i].attn);
    zero_attention(net.decoder_xattn_[i].attn);
  }
  zero_block(net.middle_);
  zero_attention(net.middle_spatial_.attn);
  zero_attention(net.middle_temporal_.attn);
  zero_attention(net.middle_xattn_.attn);
  mix_frames(net.out_conv_);
  return net;
}

Var UNet::predict_noise(Tape& tape, const Var& v_in, const std::vector<int>& timesteps, const Var* tokens) {
  if (v_in.rank() != 5) throw ShapeError("U-Net input must be (b, c, f, h, w), got " + to_string(v_in.shape()));
  if (v_in.dim(1) != config_.in_channels()) {
    throw ShapeError("U-Net expects " + std::to_string(config_.in_channels()) + " input channels, got " +
                     std::to_string(v_in.dim(1)));
  }
  if (v_in.dim(3) % 8 || v_in.dim(4) % 8) {
    throw ShapeError("U-Net spatial size must be divisible by 8, got " + to_string(v_in.shape()));
  }
  if (static_cast<std::int64_t>(timesteps.size()) != v_in.dim(0)) {
    throw ContractError("one timestep per batch item required");
  }
  for (int t : timesteps) {
    if (t < 0 || t >= config_.timesteps) {
      throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(config_.timesteps) + ")");
    }
  }
  if (tokens && tokens->dim(0) != v_in.dim(0)) throw ShapeError("conditioning tokens batch mismatch");

  Var temb = time_embed_.forward(tape, timesteps);
  auto cross = [&](nn::CrossAttention& layer, const Var& h) { return tokens ? layer.forward(tape, h, *tokens) : h; };

  std::array<Var, 4> skips;
  Var h = v_in;
  for (std::size_t i = 0; i < 4; ++i) {
    h = encoder_[i].forward(tape, h, temb);
    h = cross(encoder_xattn_[i], h);
    skips[i] = h;
    if (i < 3) h = ops::avg_pool2(h);
  }

  Var mbias = middle_.time_proj.forward(tape, ops::silu(temb));
  h = middle_.pairs[0].forward(tape, h, &mbias);
  h = middle_spatial_.forward(tape, h);
  h = middle_temporal_.forward(tape, h);
  for (std::size_t p = 1; p < middle_.pairs.size(); ++p) h = middle_.pairs[p].forward(tape, h, nullptr);
  h = cross(middle_xattn_, h);

  for (std::size_t j = 0; j < 4; ++j) {
    const Var& skip = skips[3 - j];
    if (h.shape() != skip.shape()) {
      Shape a = h.shape(), b = skip.shape();
      a[1] = b[1] = 0;
      if (a != b) throw ShapeError("skip connection shape mismatch at decoder block " + std::to_string(j));
    }
    h = ops::concat({h, skip}, 1);
    h = decoder_[j].forward(tape, h, temb);
    h = cross(decoder_xattn_[j], h);
    if (j < 3) h = ops::upsample_nearest2(h);
  }
  return out_conv_.forward(tape, ops::silu(out_norm_.forward(tape, h)));
}

void UNet::visit(const nn::ParamVisitor& fn) {
  time_embed_.visit("time_embed", fn);
  for (std::size_t i = 0; i < 4; ++i) {
    encoder_[i].visit("enc" + std::to_string(i), fn);
    encoder_xattn_[i].visit("enc" + std::to_string(i) + ".xattn", fn);
  }
  middle_.visit("mid", fn);
  middle_spatial_.visit("mid.spatial", fn);
  middle_temporal_.visit("mid.temporal", fn);
  middle_xattn_.visit("mid.xattn", fn);
  for (std::size_t j = 0; j < 4; ++j) {
    decoder_[j].visit("dec" + std::to_string(j), fn);
    decoder_xattn_[j].visit("dec" + std::to_string(j) + ".xattn", fn);
  }
  out_norm_.visit("out.norm", fn);
  out_conv_.visit("out.conv", fn);
}

std::vector<std::pair<std::string, Parameter*>> UNet::named_parameters() {
  std::vector<std::pair<std::string, Parameter*>> out;
  visit([&](const std::string& name, Parameter& p) { out.emplace_back(name, &p); });
  return out;
}

std::int64_t UNet::parameter_count() {
  std::int64_t n = 0;
  visit([&](const std::string&, Parameter& p) { n += p.value.size(); });
  return n;
}

}  // namespace ff
