#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fashionflow/checkpoint.hpp"
#include "fashionflow/data.hpp"
#include "fashionflow/pipeline.hpp"

namespace ff {

using NamedParams = std::vector<std::pair<std::string, Parameter*>>;

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Bias-corrected Adam moments with decoupled weight decay:
// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig config) : config_(config) {}

  // Every listed parameter must carry a gradient (ContractError otherwise).
  // Moment buffers are keyed by name and created on first use.
  void step(const NamedParams& params);

  std::int64_t steps() const { return steps_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  void save_to(Checkpoint& ck, const std::string& prefix) const;
  void load_from(const Checkpoint& ck, const std::string& prefix);

 private:
  AdamWConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// Training options, read from key=value files. Keys match the field names.
struct TrainConfig {
  std::uint64_t seed = 0;
  int steps = 1000;           // optimizer steps; overridden by epochs when > 0
  int epochs = 0;
  int batch = 4;
  CondMode mode = CondMode::both;
  bool interpolation = true;  // mask half the frames on every other step
  int checkpoint_every = 250;
  AdamWConfig adamw;
  // VAE pretraining.
  int vae_steps = 1200;
  int vae_batch = 8;
  double vae_lr = 3e-3;  // peak; cosine-decayed to zero
  ModelConfig model;

  std::map<std::string, std::string> to_map() const;
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
  static TrainConfig load(const std::filesystem::path& path);
  int total_steps(int dataset_size) const;
};

// Per-video tensors prepared once with the frozen VAE and embedder.
struct TrainItem {
  Tensor latent;  // (4, f, h, w); frame 0 equals i_vae
  Tensor rgb;     // (3, f, h, w) at latent resolution
  Tensor i_vae;   // (4, h, w)
  Tensor i_clip;  // (d)
};

std::vector<TrainItem> prepare_training_set(Model& model, const std::vector<VideoItem>& items);

// --- VAE pretraining ---

struct VaeReport {
  std::vector<double> losses;
  double latent_std = 0;
};

// Adam on the reconstruction MSE over individual frames, then fits the
// latent scale to unit variance and marks the VAE trained (frozen).
VaeReport train_vae(ToyVAE& vae, const std::vector<VideoItem>& items, const TrainConfig& config);

double reconstruction_mse(ToyVAE& vae, const std::vector<Tensor>& images);

// --- Diffusion training ---

// Per-item noise draw for one step, a pure function of (seed, step, item).
struct ItemDraw {
  int t = 0;
  Tensor eps;                // (4, f, h, w)
  std::vector<bool> visible;  // aux visibility
};

ItemDraw draw_item(std::uint64_t seed, std::int64_t step, std::int64_t item, const TrainItem& data, int T,
                   CondMode mode, bool interpolation_step);

// Dataset indices of the batch at `step`: epochs are seeded permutations.
std::vector<std::int64_t> batch_indices(std::uint64_t seed, std::int64_t step, int batch, std::int64_t dataset_size);

inline bool is_interpolation_step(const TrainConfig& c, std::int64_t step) { return c.interpolation && step % 2 == 1; }

// Parameters that receive gradient under `mode` (cross-attention and the
// adapter are unused without global conditioning).
NamedParams trainable_parameters(Model& model, CondMode mode);

// epsilon-MSE on `tape`; frame 0 is excluded when local conditioning is on.
Var diffusion_loss(Tape& tape, Model& model, const std::vector<const TrainItem*>& batch,
                   const std::vector<ItemDraw>& draws, const NoiseSchedule& sched, CondMode mode);

struct TrainState {
  Model model;
  AdamW optimizer;
  TrainConfig config;
  std::int64_t step = 0;  // completed optimizer steps
};

// One optimizer step on the batch chosen for state.step. Returns the loss;
// a non-finite loss raises NumericError naming the timesteps and items.
double train_step(TrainState& state, const std::vector<TrainItem>& data, const NoiseSchedule& sched);

Checkpoint make_checkpoint(const TrainState& state);
TrainState restore_checkpoint(const Checkpoint& ck);

struct FitOptions {
  std::filesystem::path out_dir;  // checkpoints and train_log.csv
  std::function<void(std::int64_t step, double loss)> on_step;
};

// Runs diffusion training to config.total_steps. Writes ckpt_NNNNNN.vten every
// checkpoint_every steps, final.vten at the end, and appends "step,loss"
// lines to train_log.csv.
TrainState fit(TrainState state, const std::vector<TrainItem>& data, const FitOptions& options);

// Mean of a window at the start and end of a loss curve.
double smoothed_head(const std::vector<double>& losses, std::size_t window);
double smoothed_tail(const std::vector<double>& losses, std::size_t window);

}  // namespace ff
