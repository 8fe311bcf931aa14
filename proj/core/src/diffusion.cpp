#include "fashionflow/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fashionflow/errors.hpp"

namespace ff {

namespace {

NoiseSchedule finish(std::vector<double> betas, std::vector<int> timesteps, int T) {
  NoiseSchedule s;
  s.T = T;
  s.beta = std::move(betas);
  s.timesteps = std::move(timesteps);
  double prod = 1.0;
  for (double b : s.beta) {
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

void check_video(const Tensor& t, const char* what) {
  if (t.rank() != 5) throw ShapeError(std::string(what) + " must be (b, c, f, h, w), got " + to_string(t.shape()));
}

// Copies frame 0 of `src` into `dst` (both (b, c, f, h, w)).
void copy_frame0(Tensor& dst, const Tensor& src) {
  const std::int64_t b = dst.dim(0), c = dst.dim(1), f = dst.dim(2), plane = dst.dim(3) * dst.dim(4);
  for (std::int64_t i = 0; i < b * c; ++i) {
    std::copy_n(src.ptr() + i * f * plane, plane, dst.ptr() + i * f * plane);
  }
}

}  // namespace

NoiseSchedule NoiseSchedule::cosine(int T, double s) {
  if (T < 2) throw ContractError("cosine schedule needs T >= 2, got " + std::to_string(T));
  auto f = [&](double t) {
    const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> betas(static_cast<std::size_t>(T));
  std::vector<int> steps(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double prev = f(i) / f(0), cur = f(i + 1) / f(0);
    betas[static_cast<std::size_t>(i)] = std::min(1.0 - cur / prev, 0.999);
    steps[static_cast<std::size_t>(i)] = i;
  }
  return finish(std::move(betas), std::move(steps), T);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ContractError("schedule needs at least one beta");
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ContractError("beta outside [0, 1): " + std::to_string(b));
  }
  std::vector<int> steps(betas.size());
  for (std::size_t i = 0; i < steps.size(); ++i) steps[i] = static_cast<int>(i);
  const int n = static_cast<int>(betas.size());
  return finish(std::move(betas), std::move(steps), n);
}

NoiseSchedule NoiseSchedule::strided(int steps) const {
  const int n = size();
  if (steps < 1 || steps > n) {
    throw ContractError("sampling steps must lie in [1, " + std::to_string(n) + "], got " + std::to_string(steps));
  }
  if (steps == n) return *this;
  std::vector<int> tau(static_cast<std::size_t>(steps));
  if (steps == 1) {
    tau[0] = n - 1;
  } else {
    for (int i = 0; i < steps; ++i) {
      tau[static_cast<std::size_t>(i)] =
          static_cast<int>(std::llround(static_cast<double>(i) * (n - 1) / (steps - 1)));
    }
  }
  std::vector<double> betas;
  std::vector<int> labels;
  double prev = 1.0;
  for (int i : tau) {
    const double ab = alpha_bar[static_cast<std::size_t>(i)];
    betas.push_back(std::min(1.0 - ab / prev, 0.999));
    labels.push_back(timesteps[static_cast<std::size_t>(i)]);
    prev = ab;
  }
  return finish(std::move(betas), std::move(labels), T);
}

CondMode parse_cond_mode(const std::string& text) {
  if (text == "global") return CondMode::global;
  if (text == "local") return CondMode::local;
  if (text == "both") return CondMode::both;
  throw ConfigError("unknown conditioning mode '" + text + "' (expected global, local or both)");
}

std::string to_string(CondMode mode) {
  switch (mode) {
    case CondMode::global: return "global";
    case CondMode::local: return "local";
    case CondMode::both: return "both";
  }
  return "?";
}

VideoLatent forward_diffuse(const VideoLatent& x0, const std::vector<int>& index, const Tensor& eps,
                            const NoiseSchedule& sched) {
  check_video(x0.tensor, "latent");
  if (eps.shape() != x0.tensor.shape()) {
    throw ShapeError("noise shape " + to_string(eps.shape()) + " does not match latent " +
                     to_string(x0.tensor.shape()));
  }
  const std::int64_t b = x0.tensor.dim(0);
  if (index.size() != 1 && static_cast<std::int64_t>(index.size()) != b) {
    throw ShapeError("expected 1 or " + std::to_string(b) + " timesteps, got " + std::to_string(index.size()));
  }
  VideoLatent out{Tensor(x0.tensor.shape()), x0.cond_frame_present};
  const std::int64_t per_item = x0.tensor.size() / std::max<std::int64_t>(b, 1);
  for (std::int64_t n = 0; n < b; ++n) {
    const int t = index.size() == 1 ? index[0] : index[static_cast<std::size_t>(n)];
    if (t < 0 || t >= sched.size()) throw ContractError("timestep index " + std::to_string(t) + " out of range");
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    const Scalar* px = x0.tensor.ptr() + n * per_item;
    const Scalar* pe = eps.ptr() + n * per_item;
    Scalar* po = out.tensor.ptr() + n * per_item;
    for (std::int64_t i = 0; i < per_item; ++i) po[i] = static_cast<Scalar>(a * px[i] + s * pe[i]);
  }
  if (x0.cond_frame_present) copy_frame0(out.tensor, x0.tensor);
  return out;
}

VideoLatent reverse_update(const VideoLatent& x, const Tensor& eps_hat, int index, const NoiseSchedule& sched,
                           Rng& rng, double x0_bound) {
  check_video(x.tensor, "latent");
  if (eps_hat.shape() != x.tensor.shape()) {
    throw ShapeError("noise prediction " + to_string(eps_hat.shape()) + " does not match latent " +
                     to_string(x.tensor.shape()));
  }
  if (index < 0 || index >= sched.size()) {
    throw ContractError("timestep index " + std::to_string(index) + " out of range");
  }
  const auto i = static_cast<std::size_t>(index);
  const double beta = sched.beta[i], alpha = sched.alpha[i], abar = sched.alpha_bar[i];
  const double coef = beta == 0.0 ? 0.0 : beta / std::sqrt(1.0 - abar);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double sigma = std::sqrt(beta);

  VideoLatent out{Tensor(x.tensor.shape()), x.cond_frame_present};
  Tensor z = index > 0 ? Tensor::randn(x.tensor.shape(), rng) : Tensor(x.tensor.shape());
  const Scalar* px = x.tensor.ptr();
  const Scalar* pe = eps_hat.ptr();
  const Scalar* pz = z.ptr();
  Scalar* po = out.tensor.ptr();
  // Posterior mean coefficients: mu = cx0 * x0 + cx * x.
  const double abar_prev = index > 0 ? sched.alpha_bar[i - 1] : 1.0;
  const double cx0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
  const double cx = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
  const double sqrt_abar = std::sqrt(abar), sqrt_one_minus = std::sqrt(1.0 - abar);
  for (std::int64_t k = 0; k < x.tensor.size(); ++k) {
    double mu = inv_sqrt_alpha * (px[k] - coef * pe[k]);
    const double x0 = (px[k] - sqrt_one_minus * pe[k]) / sqrt_abar;
    if (std::abs(x0) > x0_bound) mu = cx0 * std::clamp(x0, -x0_bound, x0_bound) + cx * px[k];
    po[k] = static_cast<Scalar>(mu + sigma * pz[k]);
  }
  if (x.cond_frame_present) copy_frame0(out.tensor, x.tensor);
  return out;
}

Tensor network_input(const Tensor& latent, const Tensor& aux) {
  check_video(latent, "latent");
  check_video(aux, "aux");
  Tape tape(false);
  return ops::concat({tape.constant(latent), tape.constant(aux)}, 1).value();
}

VideoLatent reverse_step(UNet& net, const VideoLatent& x, int index, const NoiseSchedule& sched, const Tensor& aux,
                         const Tensor* tokens, Rng& rng, double x0_bound) {
  Tape tape(false);
  Var in = tape.constant(network_input(x.tensor, aux));
  const std::vector<int> t(static_cast<std::size_t>(x.tensor.dim(0)), sched.timesteps[static_cast<std::size_t>(index)]);
  Var tok;
  if (tokens) tok = tape.constant(*tokens);
  Var eps = net.predict_noise(tape, in, t, tokens ? &tok : nullptr);
  return reverse_update(x, eps.value(), index, sched, rng, x0_bound);
}

std::vector<bool> visibility_pattern(int frames, MaskPattern pattern, std::uint64_t seed) {
  if (frames < 2) throw ContractError("interpolation mask needs at least 2 frames, got " + std::to_string(frames));
  std::vector<bool> visible(static_cast<std::size_t>(frames), true);
  const int hidden = frames / 2;
  if (pattern == MaskPattern::alternate) {
    for (int i = 1; i < frames; i += 2) visible[static_cast<std::size_t>(i)] = false;
    return visible;
  }
  std::vector<int> candidates;
  for (int i = 1; i < frames; ++i) candidates.push_back(i);
  Rng rng = make_rng(seed, {0x6d61736b});
  for (int k = 0; k < hidden; ++k) {
    std::uniform_int_distribution<int> pick(k, static_cast<int>(candidates.size()) - 1);
    std::swap(candidates[static_cast<std::size_t>(k)], candidates[static_cast<std::size_t>(pick(rng))]);
    visible[static_cast<std::size_t>(candidates[static_cast<std::size_t>(k)])] = false;
  }
  return visible;
}

Tensor build_aux(const std::vector<bool>& visible, const Tensor& rgb) {
  check_video(rgb, "rgb video");
  if (rgb.dim(1) != 3) throw ShapeError("rgb video needs 3 channels, got " + std::to_string(rgb.dim(1)));
  const std::int64_t b = rgb.dim(0), f = rgb.dim(2), plane = rgb.dim(3) * rgb.dim(4);
  if (static_cast<std::int64_t>(visible.size()) != f) {
    throw ShapeError("visibility has " + std::to_string(visible.size()) + " frames, video has " + std::to_string(f));
  }
  Tensor aux({b, 4, f, rgb.dim(3), rgb.dim(4)});
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t fr = 0; fr < f; ++fr) {
      if (!visible[static_cast<std::size_t>(fr)]) continue;
      for (std::int64_t c = 0; c < 3; ++c) {
        std::copy_n(rgb.ptr() + ((n * 3 + c) * f + fr) * plane, plane, aux.ptr() + ((n * 4 + c) * f + fr) * plane);
      }
      std::fill_n(aux.ptr() + ((n * 4 + 3) * f + fr) * plane, plane, Scalar(1));
    }
  }
  return aux;
}

InterpolationMask make_interpolation_mask(int frames, MaskPattern pattern, const Tensor& rgb, std::uint64_t seed) {
  InterpolationMask m;
  m.visible = visibility_pattern(frames, pattern, seed);
  m.aux = build_aux(m.visible, rgb);
  return m;
}

VideoLatent run_sampler(UNet& net, const SamplerInputs& in, const Shape& shape, const NoiseSchedule& sched,
                        std::uint64_t seed) {
  if (shape.size() != 5) throw ShapeError("sample shape must be (b, c, f, h, w), got " + to_string(shape));
  const std::int64_t b = shape[0], c = shape[1], f = shape[2], h = shape[3], w = shape[4];
  if (in.aux.shape() != Shape{b, 4, f, h, w}) {
    throw ShapeError("aux " + to_string(in.aux.shape()) + " does not match sample shape " + to_string(shape));
  }
  const bool pinned = !in.first_frame.empty();
  if (pinned && in.first_frame.shape() != Shape{b, c, h, w}) {
    throw ShapeError("first frame " + to_string(in.first_frame.shape()) + " does not match sample shape");
  }
  const bool has_known = !in.known.empty();
  if (has_known && (in.known.shape() != shape || static_cast<std::int64_t>(in.known_frames.size()) != f)) {
    throw ShapeError("known latents " + to_string(in.known.shape()) + " do not match sample shape");
  }
  if (!in.tokens.empty() && (in.tokens.rank() != 3 || in.tokens.dim(0) != b)) {
    throw ShapeError("tokens must be (b, n, c), got " + to_string(in.tokens.shape()));
  }

  Rng rng = make_rng(seed, {0x73616d70});
  const std::int64_t plane = h * w;
  VideoLatent x{Tensor::randn(shape, rng), pinned};
  if (pinned) {
    for (std::int64_t i = 0; i < b * c; ++i) {
      std::copy_n(in.first_frame.ptr() + i * plane, plane, x.tensor.ptr() + i * f * plane);
    }
  }
  // Overwrites the known frames of x with `src`.
  auto put_known = [&](const Tensor& src) {
    for (std::int64_t i = 0; i < b * c; ++i) {
      for (std::int64_t fr = 0; fr < f; ++fr) {
        if (!in.known_frames[static_cast<std::size_t>(fr)] || (pinned && fr == 0)) continue;
        const std::int64_t off = (i * f + fr) * plane;
        std::copy_n(src.ptr() + off, plane, x.tensor.ptr() + off);
      }
    }
  };
  const Tensor* tokens = in.tokens.empty() ? nullptr : &in.tokens;
  // Known frames are pinned noise-free at every step, as in training.
  for (int idx = sched.size() - 1; idx >= 0; --idx) {
    if (has_known) put_known(in.known);
    x = reverse_step(net, x, idx, sched, in.aux, tokens, rng, in.x0_bound);
  }
  if (has_known) put_known(in.known);
  if (!x.tensor.all_finite()) throw NumericError("sampler produced non-finite latents");
  return x;
}

VideoLatent sample(UNet& net, const std::vector<ConditioningBundle>& conds, int frames, const NoiseSchedule& sched,
                   std::uint64_t seed, CondMode mode, double x0_bound) {
  if (conds.empty()) throw ContractError("sample needs at least one conditioning bundle");
  if (frames < 1) throw ContractError("sample needs at least one frame");
  const auto b = static_cast<std::int64_t>(conds.size());
  const Tensor& first = conds[0].i_vae;
  const std::int64_t c = first.dim(0), h = first.dim(1), w = first.dim(2);
  const std::int64_t f = frames;

  SamplerInputs in;
  in.x0_bound = x0_bound;
  // Low-res RGB video holding the conditioning image in frame 0 only.
  Tensor rgb({b, 3, f, h, w});
  std::vector<bool> visible(static_cast<std::size_t>(f), false);
  if (uses_local(mode)) {
    visible[0] = true;
    in.first_frame = Tensor({b, c, h, w});
    for (std::int64_t n = 0; n < b; ++n) {
      const auto& cb = conds[static_cast<std::size_t>(n)];
      if (cb.i_vae.shape() != first.shape() || cb.rgb_lowres.shape() != Shape{3, h, w}) {
        throw ShapeError("conditioning bundles disagree in shape");
      }
      std::copy_n(cb.i_vae.ptr(), cb.i_vae.size(), in.first_frame.ptr() + n * c * h * w);
      for (std::int64_t ch = 0; ch < 3; ++ch) {
        std::copy_n(cb.rgb_lowres.ptr() + ch * h * w, h * w, rgb.ptr() + ((n * 3 + ch) * f) * h * w);
      }
    }
  }
  in.aux = build_aux(visible, rgb);
  if (uses_global(mode)) {
    std::vector<Tensor> toks;
    for (const auto& cb : conds) toks.push_back(cb.tokens);
    in.tokens = stack(toks);
  }
  return run_sampler(net, in, {b, c, f, h, w}, sched, seed);
}

}  // namespace ff
