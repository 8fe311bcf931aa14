#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fashionflow/conditioning.hpp"
#include "fashionflow/unet.hpp"

namespace ff {

// Discrete DDPM schedule. Index i runs over the chain positions; `timesteps[i]`
// is the training timestep fed to the network at that position (identical to
// i unless the schedule was strided).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta, alpha, alpha_bar;
  std::vector<int> timesteps;

  // f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2); abar_t = f(t+1)/f(0), beta
  // clipped at 0.999 and abar recomputed from the clipped betas.
  static NoiseSchedule cosine(int T, double s = 0.008);
  // Schedule from explicit betas (each in [0, 1)); timesteps are 0..n-1.
  static NoiseSchedule from_betas(std::vector<double> betas);

  // Uniformly strided sub-chain of `steps` positions spanning 0..T-1 with
  // beta'_i = 1 - abar[tau_i] / abar[tau_{i-1}].
  NoiseSchedule strided(int steps) const;

  int size() const { return static_cast<int>(beta.size()); }
};

struct VideoLatent {
  Tensor tensor;  // (b, c, f, h, w)
  bool cond_frame_present = false;
};

enum class CondMode { global, local, both };

CondMode parse_cond_mode(const std::string& text);
std::string to_string(CondMode mode);
inline bool uses_local(CondMode m) { return m != CondMode::global; }
inline bool uses_global(CondMode m) { return m != CondMode::local; }

// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps, one chain index per batch item
// (a single index applies to the whole batch). Frame 0 is copied when
// cond_frame_present.
VideoLatent forward_diffuse(const VideoLatent& x0, const std::vector<int>& index, const Tensor& eps,
                            const NoiseSchedule& sched);

// One step of the reverse chain from a given noise prediction:
// mu = (x - beta/sqrt(1-abar) * eps_hat)/sqrt(alpha), x' = mu + sqrt(beta) z,
// with z drawn from `rng` unless index == 0.
// Where the implied x0 = (x - sqrt(1-abar) eps_hat)/sqrt(abar) exceeds
// x0_bound in magnitude, mu is instead the posterior mean given the clamped
// x0. The two forms agree when x0 is unclamped; the default bound never clamps.
VideoLatent reverse_update(const VideoLatent& x, const Tensor& eps_hat, int index, const NoiseSchedule& sched,
                           Rng& rng, double x0_bound = std::numeric_limits<double>::infinity());

// Network input: latent channels followed by the auxiliary channels.
Tensor network_input(const Tensor& latent, const Tensor& aux);

// Runs the network at chain position `index` and applies reverse_update.
VideoLatent reverse_step(UNet& net, const VideoLatent& x, int index, const NoiseSchedule& sched, const Tensor& aux,
                         const Tensor* tokens, Rng& rng, double x0_bound = std::numeric_limits<double>::infinity());

// --- Interpolation masking ---

enum class MaskPattern { alternate, random };

struct InterpolationMask {
  std::vector<bool> visible;  // per frame
  Tensor aux;                 // (b, 4, f, h, w)
};

// Frame 0 is always visible. Alternate masks the odd frames; random masks the
// same number of frames drawn from 1..f-1.
std::vector<bool> visibility_pattern(int frames, MaskPattern pattern, std::uint64_t seed = 0);

// rgb (b, 3, f, h, w) at latent resolution -> aux (b, 4, f, h, w): RGB zeroed
// on hidden frames, then a binary visibility channel.
Tensor build_aux(const std::vector<bool>& visible, const Tensor& rgb);

InterpolationMask make_interpolation_mask(int frames, MaskPattern pattern, const Tensor& rgb, std::uint64_t seed = 0);

// --- Sampling ---

struct SamplerInputs {
  Tensor aux;          // (b, 4, f, h, w)
  Tensor tokens;       // (b, n_tok, c) or empty for no cross-attention
  Tensor first_frame;  // (b, 4, h, w) or empty; pinned noise-free frame 0
  // Optional known latents; frames flagged in known_frames are pinned
  // noise-free before every step and restored exactly at the end.
  Tensor known;
  std::vector<bool> known_frames;
  double x0_bound = std::numeric_limits<double>::infinity();  // see reverse_update
};

// Reverse chain from pure noise over every position of `sched`, last to first.
VideoLatent run_sampler(UNet& net, const SamplerInputs& in, const Shape& shape, const NoiseSchedule& sched,
                        std::uint64_t seed);

// Conditional generation of one video per bundle. Local modes pin frame 0 to
// i_vae and expose its low-res RGB in the aux channels; global mode passes
// only the tokens.
VideoLatent sample(UNet& net, const std::vector<ConditioningBundle>& conds, int frames, const NoiseSchedule& sched,
                   std::uint64_t seed, CondMode mode, double x0_bound = std::numeric_limits<double>::infinity());

}  // namespace ff
