#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fashionflow/errors.hpp"
#include "fashionflow/gradcheck.hpp"
#include "fashionflow/training.hpp"
#include "test_support.hpp"

namespace ff {
namespace {

namespace fs = std::filesystem;

// --- AdamW ---

struct Scalar1 {
  Parameter p;
  explicit Scalar1(double v) : p(Tensor({1}, Scalar(v))) {}
  NamedParams params() { return {{"p", &p}}; }
  void set_grad(double g) { p.grad = Tensor({1}, Scalar(g)); }
};

TEST(AdamW, FirstStepByHand) {
  Scalar1 s(1);
  s.set_grad(1);
  AdamW opt(AdamWConfig{2e-4, 0.5, 0.999, 1e-8, 0.0});
  opt.step(s.params());
  EXPECT_NEAR(s.p.value[0], 1 - 2e-4 / (1 + 1e-8), 1e-7);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, ZeroGradientZeroDecayIsFixedPoint) {
  Scalar1 s(0.37);
  AdamW opt(AdamWConfig{2e-4, 0.5, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 5; ++i) {
    s.set_grad(0);
    opt.step(s.params());
  }
  EXPECT_EQ(s.p.value[0], Scalar(0.37));
}

TEST(AdamW, MissingGradientIsContractError) {
  Scalar1 s(1);
  AdamW opt;
  EXPECT_THROW(opt.step(s.params()), ContractError);
}

TEST(AdamW, ConvergesOnSquare) {
  Scalar1 s(5);
  AdamW opt(AdamWConfig{1e-2, 0.5, 0.999, 1e-8, 0.01});
  for (int i = 0; i < 2000; ++i) {
    s.set_grad(2 * s.p.value[0]);
    opt.step(s.params());
  }
  EXPECT_LT(std::abs(s.p.value[0]), 0.5);
}

// Each bias-corrected step moves a parameter by at most about lr, so the
// default rate cannot travel further than steps * lr.
TEST(AdamW, DefaultRateBoundsDisplacement) {
  Scalar1 s(5);
  AdamW opt;
  for (int i = 0; i < 2000; ++i) {
    s.set_grad(2 * s.p.value[0]);
    opt.step(s.params());
  }
  EXPECT_GT(s.p.value[0], 5 - 2000 * 2e-4 * 1.2);
  EXPECT_LT(s.p.value[0], 5);
}

TEST(AdamW, MatchesReferenceRecurrence) {
  Rng rng(1);
  Parameter a(Tensor::randn({3, 4}, rng)), b(Tensor::randn({5}, rng));
  const AdamWConfig cfg{3e-3, 0.5, 0.999, 1e-8, 0.05};
  AdamW opt(cfg);
  std::vector<double> pa(a.value.data().begin(), a.value.data().end()), pb(b.value.data().begin(), b.value.data().end());
  std::vector<double> ma(12), va(12), mb(5), vb(5);
  auto ref = [&](std::vector<double>& p, std::vector<double>& m, std::vector<double>& v, const Tensor& g, int t) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[static_cast<std::int64_t>(i)];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[static_cast<std::int64_t>(i)] * g[static_cast<std::int64_t>(i)];
      const double mh = m[i] / (1 - std::pow(cfg.beta1, t)), vh = v[i] / (1 - std::pow(cfg.beta2, t));
      p[i] = p[i] - cfg.lr * mh / (std::sqrt(vh) + cfg.eps) - cfg.lr * cfg.weight_decay * p[i];
    }
  };
  for (int t = 1; t <= 20; ++t) {
    a.grad = Tensor::randn({3, 4}, rng);
    b.grad = Tensor::randn({5}, rng);
    opt.step({{"a", &a}, {"b", &b}});
    ref(pa, ma, va, *a.grad, t);
    ref(pb, mb, vb, *b.grad, t);
  }
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(a.value[static_cast<std::int64_t>(i)], pa[i], 1e-5);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(b.value[static_cast<std::int64_t>(i)], pb[i], 1e-5);
}

// --- config ---

TEST(TrainConfig, MapRoundTripAndErrors) {
  TrainConfig c;
  c.seed = 9;
  c.batch = 3;
  c.mode = CondMode::local;
  c.interpolation = false;
  const TrainConfig back = TrainConfig::from_map(c.to_map());
  EXPECT_EQ(back.to_map(), c.to_map());
  EXPECT_THROW(TrainConfig::from_map({{"bogus", "1"}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_map({{"batch", "0"}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_map({{"steps", "1.5"}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_map({{"mode", "sideways"}}), ConfigError);
  TrainConfig e;
  e.epochs = 2;
  e.batch = 4;
  EXPECT_EQ(e.total_steps(10), 6);
}

// --- diffusion training on a tiny model ---

struct Fixture {
  TrainConfig config;
  std::vector<TrainItem> data;

  explicit Fixture(CondMode mode, int items = 6) {
    config.seed = 4;
    config.batch = 2;
    config.mode = mode;
    config.model.unet.layers_per_block = 2;
    config.model.unet.mid_layers = 2;
    Model m = model();
    data = prepare_training_set(m, generate_dataset(items, 4, 32, 4));
  }

  Model model() const {
    Model m = Model::build(config.model, config.seed);
    m.vae.mark_trained();
    return m;
  }

  TrainState state() const { return TrainState{model(), AdamW(config.adamw), config, 0}; }
};

TEST(TrainStep, FirstLossFiniteAndPositive) {
  for (CondMode mode : {CondMode::global, CondMode::local, CondMode::both}) {
    Fixture fx(mode);
    TrainState s = fx.state();
    const double loss = train_step(s, fx.data, NoiseSchedule::cosine(1000));
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_GT(loss, 0);
    EXPECT_EQ(s.step, 1);
  }
}

TEST(TrainStep, PreparedLatentFrameZeroIsConditionLatent) {
  Fixture fx(CondMode::both);
  for (const TrainItem& it : fx.data) {
    ASSERT_EQ(it.latent.shape(), (Shape{4, 4, 8, 8}));
    EXPECT_TRUE(select(it.latent, 1, 0).bit_equal(it.i_vae));
  }
}

// Local conditioning exempts frame 0 from noise and loss; global mode noises it.
TEST(DiffusionLoss, FrameZeroNoiseOnlyMattersWithoutLocalConditioning) {
  for (CondMode mode : {CondMode::local, CondMode::global}) {
    Fixture fx(mode);
    Model m = fx.model();
    const NoiseSchedule sched = NoiseSchedule::cosine(1000);
    std::vector<const TrainItem*> batch{&fx.data[0], &fx.data[1]};
    std::vector<ItemDraw> draws{draw_item(1, 0, 0, fx.data[0], 1000, mode, false),
                                draw_item(1, 0, 1, fx.data[1], 1000, mode, false)};
    Tape t1(false);
    const double a = diffusion_loss(t1, m, batch, draws, sched, mode).value().item();
    for (auto& d : draws) {
      for (std::int64_t c = 0; c < 4; ++c)
        for (std::int64_t i = 0; i < 64; ++i) d.eps.at({c, 0, i / 8, i % 8}) += 1;
    }
    Tape t2(false);
    const double b = diffusion_loss(t2, m, batch, draws, sched, mode).value().item();
    if (mode == CondMode::local) {
      EXPECT_EQ(a, b);
    } else {
      EXPECT_NE(a, b);
    }
  }
}

// Interpolation steps keep visible frames clean and loss-free, like frame 0.
TEST(DiffusionLoss, VisibleFramesCarryNoNoiseOnInterpolationSteps) {
  for (CondMode mode : {CondMode::local, CondMode::global}) {
    Fixture fx(mode);
    Model m = fx.model();
    const NoiseSchedule sched = NoiseSchedule::cosine(1000);
    std::vector<const TrainItem*> batch{&fx.data[0], &fx.data[1]};
    const std::vector<ItemDraw> draws{draw_item(2, 1, 0, fx.data[0], 1000, mode, true),
                                      draw_item(2, 1, 1, fx.data[1], 1000, mode, true)};
    Tape t0(false);
    const double base = diffusion_loss(t0, m, batch, draws, sched, mode).value().item();
    for (std::size_t n = 0; n < draws.size(); ++n) {
      for (std::int64_t f = 0; f < 4; ++f) {
        auto shifted = draws;
        for (std::int64_t c = 0; c < 4; ++c)
          for (std::int64_t i = 0; i < 64; ++i) shifted[n].eps.at({c, f, i / 8, i % 8}) += 1;
        Tape t(false);
        const double got = diffusion_loss(t, m, batch, shifted, sched, mode).value().item();
        if (draws[n].visible[static_cast<std::size_t>(f)]) {
          EXPECT_EQ(got, base) << n << " " << f;
        } else {
          EXPECT_NE(got, base) << n << " " << f;
        }
      }
    }
  }
}

TEST(DiffusionLoss, InvariantToBatchOrder) {
  Fixture fx(CondMode::both);
  Model m = fx.model();
  const NoiseSchedule sched = NoiseSchedule::cosine(1000);
  std::vector<const TrainItem*> batch{&fx.data[0], &fx.data[1], &fx.data[2]};
  std::vector<ItemDraw> draws;
  for (std::int64_t i = 0; i < 3; ++i) draws.push_back(draw_item(2, 5, i, fx.data[static_cast<std::size_t>(i)], 1000, CondMode::both, true));
  Tape t1(false);
  const double a = diffusion_loss(t1, m, batch, draws, sched, CondMode::both).value().item();
  std::swap(batch[0], batch[2]);
  std::swap(draws[0], draws[2]);
  Tape t2(false);
  const double b = diffusion_loss(t2, m, batch, draws, sched, CondMode::both).value().item();
  EXPECT_NEAR(a, b, 1e-6 * std::abs(a));
}

TEST(DiffusionLoss, GradientIsFiniteAndNonZero) {
  Fixture fx(CondMode::both);
  Model m = fx.model();
  const NoiseSchedule sched = NoiseSchedule::cosine(1000);
  Tape tape;
  Var loss = diffusion_loss(tape, m, {&fx.data[0]}, {draw_item(3, 0, 0, fx.data[0], 1000, CondMode::both, false)}, sched,
                            CondMode::both);
  tape.backward(loss);
  double norm = 0;
  for (auto& [name, p] : trainable_parameters(m, CondMode::both)) {
    ASSERT_TRUE(p->grad.has_value()) << name;
    for (Scalar g : p->grad->data()) norm += static_cast<double>(g) * g;
  }
  EXPECT_TRUE(std::isfinite(norm));
  EXPECT_GT(norm, 0);
}

// Finite differences of the full loss against backward() on 20 parameter
// coordinates spread over the network and the adapter.
TEST(DiffusionLoss, GradientMatchesFiniteDifferences) {
  Fixture fx(CondMode::both);
  Model m = fx.model();
  const NoiseSchedule sched = NoiseSchedule::cosine(1000);
  std::vector<const TrainItem*> batch{&fx.data[0], &fx.data[1]};
  std::vector<ItemDraw> draws{draw_item(5, 1, 0, fx.data[0], 1000, CondMode::both, true),
                              draw_item(5, 1, 1, fx.data[1], 1000, CondMode::both, true)};
  const NamedParams all = trainable_parameters(m, CondMode::both);
  std::vector<Parameter*> leaves;
  for (std::size_t i = 0; i < all.size(); i += all.size() / 10) leaves.push_back(all[i].second);
  leaves.resize(10);
  Rng rng(6);
  GradCheckOptions opt;
  opt.coords_per_leaf = 2;
  opt.step = 1e-2;
  const double err = check_gradients(
      [&](Tape& tape) { return diffusion_loss(tape, m, batch, draws, sched, CondMode::both); }, leaves, rng, opt);
  EXPECT_LT(err, 1e-2);
}

TEST(Training, TenStepsAreDeterministic) {
  Fixture fx(CondMode::both);
  const NoiseSchedule sched = NoiseSchedule::cosine(1000);
  TrainState a = fx.state(), b = fx.state();
  for (int i = 0; i < 10; ++i) ASSERT_EQ(train_step(a, fx.data, sched), train_step(b, fx.data, sched)) << i;
  EXPECT_EQ(make_checkpoint(a).encode(), make_checkpoint(b).encode());
}

TEST(Training, ResumeReproducesNextLoss) {
  Fixture fx(CondMode::both);
  const NoiseSchedule sched = NoiseSchedule::cosine(1000);
  TrainState a = fx.state();
  for (int i = 0; i < 3; ++i) train_step(a, fx.data, sched);
  TrainState b = restore_checkpoint(Checkpoint::decode(make_checkpoint(a).encode()));
  EXPECT_EQ(b.step, 3);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(train_step(a, fx.data, sched), train_step(b, fx.data, sched), 1e-6);
}

TEST(Training, BatchesCoverEveryItemEachEpoch) {
  std::vector<int> seen(10, 0);
  for (std::int64_t step = 0; step < 5; ++step)
    for (auto i : batch_indices(3, step, 2, 10)) ++seen[static_cast<std::size_t>(i)];
  for (int c : seen) EXPECT_EQ(c, 1);
  EXPECT_EQ(batch_indices(3, 7, 4, 10), batch_indices(3, 7, 4, 10));
}

TEST(Fit, WritesLogAndCheckpoints) {
  Fixture fx(CondMode::both, 4);
  const fs::path dir = fs::temp_directory_path() / "ff_test_fit";
  fs::remove_all(dir);
  TrainState s = fx.state();
  s.config.steps = 4;
  s.config.checkpoint_every = 2;
  std::vector<double> seen;
  TrainState done = fit(std::move(s), fx.data, {dir, [&](std::int64_t, double l) { seen.push_back(l); }});
  EXPECT_EQ(done.step, 4);
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_TRUE(fs::exists(dir / "ckpt_000002.vten"));
  EXPECT_TRUE(fs::exists(dir / "ckpt_000004.vten"));
  std::ifstream log(dir / "train_log.csv");
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "step,loss");
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 4);
  // The final checkpoint samples.
  TrainState back = restore_checkpoint(Checkpoint::load(dir / "final.vten"));
  Generated g = generate(back.model, {generate_item(1, 0, 4, 32).cond}, {3, 2, 0, CondMode::both});
  EXPECT_EQ(g.videos.at(0).shape(), (Shape{3, 3, 32, 32}));
  EXPECT_TRUE(g.videos[0].all_finite());
}

TEST(Fit, IoFailureNamesPath) {
  Fixture fx(CondMode::global, 2);
  TrainState s = fx.state();
  s.config.steps = 1;
  const fs::path blocker = fs::temp_directory_path() / "ff_test_blocker";
  std::ofstream(blocker) << "x";
  try {
    fit(std::move(s), fx.data, {blocker / "out", {}});
    FAIL() << "no IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("ff_test_blocker"), std::string::npos) << e.what();
  }
}

TEST(Fit, RequiresPretrainedVae) {
  Fixture fx(CondMode::both, 2);
  TrainState s = fx.state();
  s.model.vae.mark_trained(false);
  EXPECT_THROW(fit(std::move(s), fx.data, {fs::temp_directory_path() / "ff_test_untrained", {}}), ContractError);
}

TEST(Smoothing, HeadAndTailWindows) {
  const std::vector<double> l{4, 2, 3, 1, 0};
  EXPECT_DOUBLE_EQ(smoothed_head(l, 2), 3);
  EXPECT_DOUBLE_EQ(smoothed_tail(l, 2), 0.5);
  EXPECT_DOUBLE_EQ(smoothed_tail(l, 9), 2);
}

// Pretraining the VAE with default settings on a dataset shaped like the
// desk run (64 training videos, 8 frames, 64 px) reaches reconstruction MSE
// below 0.01 on the held-out videos.
TEST(VaePretraining, HeldOutReconstructionBelowOneHundredth) {
  const auto items = generate_dataset(80, 8, 64, 21);
  const std::size_t n_train = static_cast<std::size_t>(train_split_size(80));
  const std::vector<VideoItem> train(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_train));
  TrainConfig cfg;
  cfg.seed = 1;
  ToyVAE vae = ToyVAE::build({}, 1);
  const VaeReport r = train_vae(vae, train, cfg);
  EXPECT_TRUE(vae.trained());
  EXPECT_LT(r.losses.back(), r.losses.front());
  std::vector<Tensor> heldout;
  for (std::size_t i = n_train; i < items.size(); ++i) heldout.push_back(items[i].video);
  EXPECT_LT(reconstruction_mse(vae, heldout), 0.01);
  // Latents are rescaled to roughly unit spread.
  const Tensor z = vae.encode(items[0].video);
  double sq = 0;
  for (Scalar v : z.data()) sq += static_cast<double>(v) * v;
  EXPECT_GT(std::sqrt(sq / static_cast<double>(z.size())), 0.3);
  // The stored bound is the largest |latent| over the training videos.
  double peak = 0;
  for (const auto& it : train) {
    const Tensor latents = vae.encode(it.video);
    for (Scalar v : latents.data()) peak = std::max(peak, std::abs(static_cast<double>(v)));
  }
  EXPECT_NEAR(vae.latent_bound(), peak, 1e-5 * peak);
}

}  // namespace
}  // namespace ff
