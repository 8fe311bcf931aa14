#include "fashionflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fashionflow/errors.hpp"

namespace ff {

namespace fs = std::filesystem;

// --- AdamW ------------------------------------------------------------------

void AdamW::step(const NamedParams& params) {
  for (const auto& [name, p] : params) {
    if (!p->grad) throw ContractError("AdamW: parameter '" + name + "' has no gradient");
    if (p->grad->shape() != p->value.shape()) throw ShapeError("AdamW: gradient shape mismatch for '" + name + "'");
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (const auto& [name, p] : params) {
    auto [mit, fresh_m] = m_.try_emplace(name, Tensor(p->value.shape()));
    auto [vit, fresh_v] = v_.try_emplace(name, Tensor(p->value.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (m.shape() != p->value.shape()) throw ShapeError("AdamW: moment shape mismatch for '" + name + "'");
    Scalar* pv = p->value.ptr();
    const Scalar* g = p->grad->ptr();
    for (std::int64_t i = 0; i < p->value.size(); ++i) {
      const double mi = b1 * m[i] + (1.0 - b1) * g[i];
      const double vi = b2 * v[i] + (1.0 - b2) * static_cast<double>(g[i]) * g[i];
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + config_.eps);
      pv[i] = static_cast<Scalar>(pv[i] - config_.lr * update - config_.lr * config_.weight_decay * pv[i]);
    }
  }
}

void AdamW::save_to(Checkpoint& ck, const std::string& prefix) const {
  ck.config[prefix + "steps"] = std::to_string(steps_);
  for (const auto& [name, t] : m_) ck.put(prefix + "m." + name, t);
  for (const auto& [name, t] : v_) ck.put(prefix + "v." + name, t);
}

void AdamW::load_from(const Checkpoint& ck, const std::string& prefix) {
  m_.clear();
  v_.clear();
  auto it = ck.config.find(prefix + "steps");
  steps_ = it == ck.config.end() ? 0 : std::stoll(it->second);
  const std::string mp = prefix + "m.", vp = prefix + "v.";
  for (const auto& [name, t] : ck.entries) {
    if (name.rfind(mp, 0) == 0) m_[name.substr(mp.size())] = t;
    if (name.rfind(vp, 0) == 0) v_[name.substr(vp.size())] = t;
  }
}

// --- TrainConfig ------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::map<std::string, std::string> TrainConfig::to_map() const {
  auto kv = model.to_map();
  kv["seed"] = std::to_string(seed);
  kv["steps"] = std::to_string(steps);
  kv["epochs"] = std::to_string(epochs);
  kv["batch"] = std::to_string(batch);
  kv["mode"] = to_string(mode);
  kv["interpolation"] = interpolation ? "1" : "0";
  kv["checkpoint_every"] = std::to_string(checkpoint_every);
  kv["lr"] = fmt_double(adamw.lr);
  kv["beta1"] = fmt_double(adamw.beta1);
  kv["beta2"] = fmt_double(adamw.beta2);
  kv["eps"] = fmt_double(adamw.eps);
  kv["weight_decay"] = fmt_double(adamw.weight_decay);
  kv["vae_steps"] = std::to_string(vae_steps);
  kv["vae_batch"] = std::to_string(vae_batch);
  kv["vae_lr"] = fmt_double(vae_lr);
  return kv;
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  std::map<std::string, std::string> model_kv = UNetConfig::desk().to_map();
  for (const auto& [key, value] : kv) {
    auto as_int = [&]() {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != value.size()) throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
      return v;
    };
    auto as_double = [&]() {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != value.size()) throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
      return v;
    };
    if (key.rfind("unet.", 0) == 0 || key.rfind("vae.", 0) == 0 || key.rfind("model.", 0) == 0) {
      model_kv[key] = value;
    } else if (key.rfind("opt.", 0) == 0 || key.rfind("state.", 0) == 0) {
      // Checkpoint bookkeeping.
    } else if (key == "seed") {
      c.seed = static_cast<std::uint64_t>(as_int());
    } else if (key == "steps") {
      c.steps = static_cast<int>(as_int());
    } else if (key == "epochs") {
      c.epochs = static_cast<int>(as_int());
    } else if (key == "batch") {
      c.batch = static_cast<int>(as_int());
    } else if (key == "mode") {
      c.mode = parse_cond_mode(value);
    } else if (key == "interpolation") {
      c.interpolation = as_int() != 0;
    } else if (key == "checkpoint_every") {
      c.checkpoint_every = static_cast<int>(as_int());
    } else if (key == "lr") {
      c.adamw.lr = as_double();
    } else if (key == "beta1") {
      c.adamw.beta1 = as_double();
    } else if (key == "beta2") {
      c.adamw.beta2 = as_double();
    } else if (key == "eps") {
      c.adamw.eps = as_double();
    } else if (key == "weight_decay") {
      c.adamw.weight_decay = as_double();
    } else if (key == "vae_steps") {
      c.vae_steps = static_cast<int>(as_int());
    } else if (key == "vae_batch") {
      c.vae_batch = static_cast<int>(as_int());
    } else if (key == "vae_lr") {
      c.vae_lr = as_double();
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  c.model = ModelConfig::from_map(model_kv);
  if (c.batch < 1) throw ConfigError("batch must be at least 1");
  if (c.steps < 0 || c.epochs < 0) throw ConfigError("steps and epochs must be non-negative");
  if (c.checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (c.vae_batch < 1 || c.vae_steps < 0) throw ConfigError("invalid VAE training settings");
  if (!(c.adamw.lr > 0) || !(c.vae_lr > 0)) throw ConfigError("learning rates must be positive");
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  return from_map(parse_key_values(read_file(path), path.string()));
}

int TrainConfig::total_steps(int dataset_size) const {
  if (epochs > 0) return epochs * ((dataset_size + batch - 1) / batch);
  return steps;
}

// --- Data preparation -------------------------------------------------------

std::vector<TrainItem> prepare_training_set(Model& model, const std::vector<VideoItem>& items) {
  if (items.empty()) throw ContractError("training set is empty");
  std::vector<TrainItem> out;
  out.reserve(items.size());
  for (const auto& item : items) {
    const std::int64_t f = item.video.dim(0);
    const Tensor pixels = frames_first_to_channels_first(
        item.video.reshaped({1, f, item.video.dim(1), item.video.dim(2), item.video.dim(3)}));
    const ConditioningBundle cond = condition_on(model, item.cond);
    TrainItem t;
    Tensor latent = vae_encode_frames(model.vae, pixels);
    t.latent = latent.reshaped({latent.dim(1), f, latent.dim(3), latent.dim(4)});
    // Pin frame 0 to the conditioning latent exactly.
    const std::int64_t plane = latent.dim(3) * latent.dim(4);
    for (std::int64_t c = 0; c < t.latent.dim(0); ++c) {
      std::copy_n(cond.i_vae.ptr() + c * plane, plane, t.latent.ptr() + c * f * plane);
    }
    Tensor rgb = rgb_to_latent_resolution(rearrange(pixels, "b c f h w -> (b f) c h w"));
    t.rgb = rearrange(rgb, "f c h w -> c f h w");
    t.i_vae = cond.i_vae;
    t.i_clip = cond.i_clip;
    out.push_back(std::move(t));
  }
  return out;
}

// --- VAE pretraining --------------------------------------------------------

namespace {

NamedParams trainable(const std::vector<std::pair<std::string, Parameter*>>& all) {
  NamedParams out;
  for (const auto& np : all) {
    if (np.second->requires_grad) out.push_back(np);
  }
  return out;
}

NamedParams vae_parameters(ToyVAE& vae) {
  NamedParams all;
  vae.visit([&](const std::string& name, Parameter& p) { all.emplace_back(name, &p); });
  return trainable(all);
}

void zero_grads(const NamedParams& params) {
  for (auto& np : params) np.second->zero_grad();
}

}  // namespace

VaeReport train_vae(ToyVAE& vae, const std::vector<VideoItem>& items, const TrainConfig& config) {
  if (items.empty()) throw ContractError("VAE training needs at least one video");
  std::vector<const Scalar*> frames;
  const Shape frame_shape{3, items[0].video.dim(2), items[0].video.dim(3)};
  const std::int64_t frame_size = numel(frame_shape);
  for (const auto& it : items) {
    if (it.video.rank() != 4 || Shape(it.video.shape().begin() + 1, it.video.shape().end()) != frame_shape) {
      throw ShapeError("VAE training videos must share the frame shape " + to_string(frame_shape));
    }
    for (std::int64_t f = 0; f < it.video.dim(0); ++f) frames.push_back(it.video.ptr() + f * frame_size);
  }
  vae.set_latent_scale(1);
  AdamW opt(AdamWConfig{config.vae_lr, 0.9, 0.999, 1e-8, 0.0});
  const NamedParams params = vae_parameters(vae);
  VaeReport report;
  const auto n_frames = static_cast<std::int64_t>(frames.size());
  for (int step = 0; step < config.vae_steps; ++step) {
    // Cosine decay to zero; the late small steps settle the fine edges.
    opt.set_lr(config.vae_lr * 0.5 * (1 + std::cos(std::numbers::pi * step / config.vae_steps)));
    Rng rng = make_rng(config.seed, {0x76616574, static_cast<std::uint64_t>(step)});
    std::uniform_int_distribution<std::int64_t> pick(0, n_frames - 1);
    Tensor batch({config.vae_batch, frame_shape[0], frame_shape[1], frame_shape[2]});
    for (int b = 0; b < config.vae_batch; ++b) {
      std::copy_n(frames[static_cast<std::size_t>(pick(rng))], frame_size, batch.ptr() + b * frame_size);
    }
    Tape tape;
    Var x = tape.constant(batch);
    Var loss = ops::mse(vae.decode(tape, vae.encode(tape, x)), x);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericError("VAE loss became non-finite at step " + std::to_string(step));
    report.losses.push_back(value);
    tape.backward(loss);
    opt.step(params);
    zero_grads(params);
  }
  // Latent scale: one over the standard deviation of all training latents.
  // The bound is the largest scaled |latent|, used to clamp sampler x0 guesses.
  double sum = 0, sq = 0, peak = 0;
  std::int64_t count = 0;
  for (const auto& it : items) {
    const Tensor z = vae.encode(it.video);
    for (Scalar v : z.data()) {
      sum += v;
      sq += static_cast<double>(v) * v;
      peak = std::max(peak, std::abs(static_cast<double>(v)));
    }
    count += z.size();
  }
  const double mean = sum / static_cast<double>(count);
  report.latent_std = std::sqrt(std::max(sq / static_cast<double>(count) - mean * mean, 1e-12));
  vae.set_latent_scale(static_cast<Scalar>(1.0 / report.latent_std));
  vae.set_latent_bound(static_cast<Scalar>(peak / report.latent_std));
  vae.mark_trained();
  return report;
}

double reconstruction_mse(ToyVAE& vae, const std::vector<Tensor>& images) {
  double sse = 0;
  std::int64_t count = 0;
  for (const auto& img : images) {
    const Tensor x = img.rank() == 3 ? img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}) : img;
    const Tensor y = vae.decode(vae.encode(x));
    for (std::int64_t i = 0; i < x.size(); ++i) sse += (static_cast<double>(y[i]) - x[i]) * (static_cast<double>(y[i]) - x[i]);
    count += x.size();
  }
  return sse / static_cast<double>(count);
}

// --- Diffusion training -----------------------------------------------------

ItemDraw draw_item(std::uint64_t seed, std::int64_t step, std::int64_t item, const TrainItem& data, int T,
                   CondMode mode, bool interpolation_step) {
  Rng rng = make_rng(seed, {0x74726e, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(item)});
  ItemDraw d;
  d.t = std::uniform_int_distribution<int>(0, T - 1)(rng);
  d.eps = Tensor::randn(data.latent.shape(), rng);
  const int f = static_cast<int>(data.latent.dim(1));
  if (interpolation_step) {
    const bool alternate = std::uniform_int_distribution<int>(0, 1)(rng) == 0;
    d.visible = visibility_pattern(f, alternate ? MaskPattern::alternate : MaskPattern::random, rng());
  } else {
    d.visible.assign(static_cast<std::size_t>(f), false);
    d.visible[0] = uses_local(mode);
  }
  return d;
}

std::vector<std::int64_t> batch_indices(std::uint64_t seed, std::int64_t step, int batch, std::int64_t dataset_size) {
  std::vector<std::int64_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::int64_t> perm;
  for (int k = 0; k < batch; ++k) {
    const std::int64_t pos = step * batch + k;
    const std::int64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      perm.resize(static_cast<std::size_t>(dataset_size));
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng = make_rng(seed, {0x65706f, static_cast<std::uint64_t>(epoch)});
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(pos % dataset_size)]);
  }
  return out;
}

NamedParams trainable_parameters(Model& model, CondMode mode) {
  NamedParams all;
  model.unet.visit([&](const std::string& name, Parameter& p) {
    if (!uses_global(mode) && name.find("xattn") != std::string::npos) return;
    all.emplace_back("unet." + name, &p);
  });
  if (uses_global(mode)) model.adapter.visit([&](const std::string& name, Parameter& p) { all.emplace_back(name, &p); });
  return trainable(all);
}

Var diffusion_loss(Tape& tape, Model& model, const std::vector<const TrainItem*>& batch,
                   const std::vector<ItemDraw>& draws, const NoiseSchedule& sched, CondMode mode) {
  if (batch.empty() || batch.size() != draws.size()) throw ContractError("batch and noise draws differ in size");
  std::vector<Tensor> x0s, epss, auxs, ivae, iclip;
  std::vector<int> idx, labels;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainItem& item = *batch[i];
    x0s.push_back(item.latent);
    epss.push_back(draws[i].eps);
    const Tensor rgb = item.rgb.reshaped({1, item.rgb.dim(0), item.rgb.dim(1), item.rgb.dim(2), item.rgb.dim(3)});
    auxs.push_back(build_aux(draws[i].visible, rgb).reshaped(
        {4, item.rgb.dim(1), item.rgb.dim(2), item.rgb.dim(3)}));
    ivae.push_back(item.i_vae);
    iclip.push_back(item.i_clip);
    idx.push_back(draws[i].t);
    labels.push_back(sched.timesteps[static_cast<std::size_t>(draws[i].t)]);
  }
  const Tensor x0 = stack(x0s), eps = stack(epss);
  VideoLatent xt = forward_diffuse({x0, uses_local(mode)}, idx, eps, sched);
  // Visible frames (frame 0 under local conditioning, the unmasked half on
  // interpolation steps) stay noise-free and carry no loss.
  const std::int64_t c = eps.dim(1), f = eps.dim(2), plane = eps.dim(3) * eps.dim(4);
  Tensor weights(eps.shape(), Scalar(1));
  for (std::size_t i = 0; i < draws.size(); ++i) {
    for (std::int64_t fr = 0; fr < f; ++fr) {
      if (!draws[i].visible[static_cast<std::size_t>(fr)]) continue;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t off = ((static_cast<std::int64_t>(i) * c + ch) * f + fr) * plane;
        std::copy_n(x0.ptr() + off, plane, xt.tensor.ptr() + off);
        std::fill_n(weights.ptr() + off, plane, Scalar(0));
      }
    }
  }
  Var in = tape.constant(network_input(xt.tensor, stack(auxs)));

  Var tokens;
  if (uses_global(mode)) tokens = model.adapter.forward(tape, tape.constant(stack(ivae)), tape.constant(stack(iclip)));
  Var eps_hat = model.unet.predict_noise(tape, in, labels, uses_global(mode) ? &tokens : nullptr);

  return ops::mse(eps_hat, tape.constant(eps), weights);
}

double train_step(TrainState& state, const std::vector<TrainItem>& data, const NoiseSchedule& sched) {
  if (data.empty()) throw ContractError("training set is empty");
  const auto& cfg = state.config;
  const auto indices = batch_indices(cfg.seed, state.step, cfg.batch, static_cast<std::int64_t>(data.size()));
  const bool interp = is_interpolation_step(cfg, state.step);
  std::vector<const TrainItem*> batch;
  std::vector<ItemDraw> draws;
  for (auto i : indices) {
    batch.push_back(&data[static_cast<std::size_t>(i)]);
    draws.push_back(draw_item(cfg.seed, state.step, i, data[static_cast<std::size_t>(i)], sched.size(), cfg.mode, interp));
  }
  Tape tape;
  Var loss = diffusion_loss(tape, state.model, batch, draws, sched, cfg.mode);
  const double value = loss.value().item();
  if (!std::isfinite(value)) {
    std::string detail;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      detail += " item " + std::to_string(indices[k]) + " (batch index " + std::to_string(k) + ", t=" +
                std::to_string(draws[k].t) + ")";
    }
    throw NumericError("non-finite loss at step " + std::to_string(state.step) + ":" + detail);
  }
  const NamedParams params = trainable_parameters(state.model, cfg.mode);
  tape.backward(loss);
  state.optimizer.step(params);
  zero_grads(params);
  ++state.step;
  return value;
}

Checkpoint make_checkpoint(const TrainState& state) {
  Checkpoint ck;
  for (auto& [k, v] : state.config.to_map()) ck.config[k] = v;
  state.model.save_to(ck);
  state.optimizer.save_to(ck, "opt.");
  ck.config["state.step"] = std::to_string(state.step);
  return ck;
}

TrainState restore_checkpoint(const Checkpoint& ck) {
  TrainState s;
  s.config = TrainConfig::from_map(ck.config);
  s.model = Model::load_from(ck);
  s.optimizer = AdamW(s.config.adamw);
  s.optimizer.load_from(ck, "opt.");
  auto it = ck.config.find("state.step");
  s.step = it == ck.config.end() ? 0 : std::stoll(it->second);
  return s;
}

TrainState fit(TrainState state, const std::vector<TrainItem>& data, const FitOptions& options) {
  if (data.empty()) throw ContractError("training set is empty");
  if (!state.model.vae.trained()) throw ContractError("diffusion training needs a pretrained VAE");
  const NoiseSchedule sched = NoiseSchedule::cosine(state.config.model.unet.timesteps);
  const std::int64_t total = state.config.total_steps(static_cast<int>(data.size()));
  std::error_code ec;
  fs::create_directories(options.out_dir, ec);
  if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());
  const fs::path log_path = options.out_dir / "train_log.csv";
  std::ofstream log(log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open " + log_path.string() + " for writing");
  if (state.step == 0) log << "step,loss\n";
  log.precision(9);
  while (state.step < total) {
    const double loss = train_step(state, data, sched);
    log << state.step << ',' << loss << '\n';
    if (options.on_step) options.on_step(state.step, loss);
    if (state.config.checkpoint_every > 0 && state.step % state.config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06lld.vten", static_cast<long long>(state.step));
      make_checkpoint(state).save(options.out_dir / name);
    }
  }
  log.flush();
  if (!log) throw IoError("write failed: " + log_path.string());
  make_checkpoint(state).save(options.out_dir / "final.vten");
  return state;
}

double smoothed_head(const std::vector<double>& losses, std::size_t window) {
  const std::size_t n = std::min(window, losses.size());
  if (n == 0) return 0;
  return std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / static_cast<double>(n);
}

double smoothed_tail(const std::vector<double>& losses, std::size_t window) {
  const std::size_t n = std::min(window, losses.size());
  if (n == 0) return 0;
  return std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(n), losses.end(), 0.0) / static_cast<double>(n);
}

}  // namespace ff
