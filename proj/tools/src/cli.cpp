#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>

#include "fashionflow/checkpoint.hpp"
#include "fashionflow/data.hpp"
#include "fashionflow/errors.hpp"
#include "fashionflow/gradcheck.hpp"
#include "fashionflow/metrics.hpp"
#include "fashionflow/parallel.hpp"
#include "fashionflow/pipeline.hpp"
#include "fashionflow/training.hpp"

namespace fs = std::filesystem;

namespace ff::cli {

void write_frame_grid(const std::string& path, const Tensor& video) {
  if (video.rank() != 4 || video.dim(1) != 3) {
    throw ShapeError("frame grid expects (f, 3, H, W), got " + to_string(video.shape()));
  }
  const std::int64_t f = video.dim(0), H = video.dim(2), W = video.dim(3);
  std::string bytes = "P6\n" + std::to_string(f * W) + " " + std::to_string(H) + "\n255\n";
  const std::size_t header = bytes.size();
  bytes.resize(header + static_cast<std::size_t>(3 * f * H * W));
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t t = 0; t < f; ++t) {
      for (std::int64_t x = 0; x < W; ++x) {
        for (std::int64_t c = 0; c < 3; ++c) {
          const double v = std::clamp((static_cast<double>(video.at({t, c, y, x})) + 1.0) * 127.5, 0.0, 255.0);
          const std::size_t pos = header + static_cast<std::size_t>(3 * ((y * f + t) * W + x) + c);
          bytes[pos] = static_cast<char>(static_cast<unsigned char>(v + 0.5));
        }
      }
    }
  }
  write_file(path, bytes);
}

namespace {

void print_config(std::ostream& out, const std::string& command, const std::map<std::string, std::string>& kv) {
  out << "command=" << command << '\n';
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
  out.flush();
}

Motion parse_motion(const std::string& text) {
  if (text == "sway") return Motion::sway;
  if (text == "linear") return Motion::linear;
  throw ConfigError("unknown motion '" + text + "' (expected sway or linear)");
}

MaskPattern parse_pattern(const std::string& text) {
  if (text == "alternate") return MaskPattern::alternate;
  if (text == "random") return MaskPattern::random;
  throw ConfigError("unknown mask pattern '" + text + "' (expected alternate or random)");
}

bool parse_switch(const std::string& text) {
  if (text == "on" || text == "1" || text == "true") return true;
  if (text == "off" || text == "0" || text == "false") return false;
  throw ConfigError("expected on or off, got '" + text + "'");
}

std::string grid_path(const std::string& out) { return fs::path(out).replace_extension(".ppm").string(); }

// Videos from a directory of .vten files or a single file holding either one
// video (f, 3, H, W) or a batch (b, f, 3, H, W).
std::vector<Tensor> load_video_set(const fs::path& path) {
  if (fs::is_directory(path)) return load_videos(path);
  Tensor t = read_tensor(path);
  if (t.rank() == 4) return {t};
  if (t.rank() == 5) {
    std::vector<Tensor> out;
    for (std::int64_t i = 0; i < t.dim(0); ++i) out.push_back(select(t, 0, i));
    return out;
  }
  throw ShapeError(path.string() + ": expected a video (f, 3, H, W) or a batch of videos, got " +
                   to_string(t.shape()));
}

void load_vae(Model& model, const fs::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  auto trained = ck.config.find("vae.trained");
  if (trained == ck.config.end() || trained->second != "1") {
    throw ContractError(path.string() + " does not hold a pretrained VAE (run train-vae first)");
  }
  model.vae.visit([&](const std::string& name, Parameter& p) {
    const Tensor& t = ck.get(name);
    if (t.shape() != p.value.shape()) {
      throw FormatError(path.string() + ": VAE entry '" + name + "' has shape " + to_string(t.shape()) +
                        ", config expects " + to_string(p.value.shape()));
    }
    p.value = t;
  });
  model.vae.mark_trained();
}

struct GenDataArgs {
  std::string out;
  int count = 80, frames = 8, size = 64;
  std::uint64_t seed = 0;
  std::string motion = "sway";
};

int gen_data(const GenDataArgs& a, std::ostream& out) {
  const Motion motion = parse_motion(a.motion);
  print_config(out, "gen-data",
               {{"out", a.out},
                {"count", std::to_string(a.count)},
                {"frames", std::to_string(a.frames)},
                {"size", std::to_string(a.size)},
                {"motion", a.motion},
                {"seed", std::to_string(a.seed)}});
  const auto items = generate_dataset(a.count, a.frames, a.size, a.seed, motion);
  const int n_train = save_dataset(a.out, items);
  out << "train=" << n_train << " test=" << a.count - n_train << '\n';
  return kOk;
}

struct TrainVaeArgs {
  std::string data, out, config;
  int steps = -1;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int train_vae_cmd(const TrainVaeArgs& a, std::ostream& out) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
  if (a.seed_given) cfg.seed = a.seed;
  if (a.steps >= 0) cfg.vae_steps = a.steps;
  auto kv = cfg.to_map();
  kv["data"] = a.data;
  kv["out"] = a.out;
  print_config(out, "train-vae", kv);

  const auto items = load_split(fs::path(a.data) / "train");
  Model model = Model::build(cfg.model, cfg.seed);
  const VaeReport report = train_vae(model.vae, items, cfg);
  const std::size_t window = std::max<std::size_t>(1, report.losses.size() / 10);
  out << "vae_loss_initial=" << smoothed_head(report.losses, window) << '\n'
      << "vae_loss_final=" << smoothed_tail(report.losses, window) << '\n'
      << "latent_std=" << report.latent_std << '\n';

  Checkpoint ck;
  for (const auto& [k, v] : cfg.to_map()) ck.config[k] = v;
  model.save_to(ck);
  ck.save(a.out);
  out << "saved=" << a.out << '\n';
  return kOk;
}

struct TrainArgs {
  std::string data, vae, out, config, resume, mode, interpolation;
  int steps = -1, batch = -1;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int train_cmd(const TrainArgs& a, std::ostream& out) {
  TrainState state;
  if (!a.resume.empty()) {
    if (!a.config.empty() || !a.vae.empty() || !a.mode.empty() || !a.interpolation.empty() || a.batch >= 0 ||
        a.seed_given) {
      throw ConfigError("--resume takes its settings from the checkpoint; only --steps may change");
    }
    state = restore_checkpoint(Checkpoint::load(a.resume));
    if (a.steps >= 0) {
      state.config.steps = a.steps;
      state.config.epochs = 0;
    }
  } else {
    if (a.vae.empty()) throw ConfigError("train needs --vae (a train-vae checkpoint) or --resume");
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
    if (a.seed_given) cfg.seed = a.seed;
    if (a.steps >= 0) {
      cfg.steps = a.steps;
      cfg.epochs = 0;
    }
    if (a.batch >= 0) {
      if (a.batch < 1) throw ConfigError("--batch must be at least 1");
      cfg.batch = a.batch;
    }
    if (!a.mode.empty()) cfg.mode = parse_cond_mode(a.mode);
    if (!a.interpolation.empty()) cfg.interpolation = parse_switch(a.interpolation);
    state.config = cfg;
    state.model = Model::build(cfg.model, cfg.seed);
    load_vae(state.model, a.vae);
    state.optimizer = AdamW(cfg.adamw);
  }
  auto kv = state.config.to_map();
  kv["data"] = a.data;
  kv["out"] = a.out;
  if (!a.resume.empty()) kv["resume"] = a.resume + " (step " + std::to_string(state.step) + ")";
  print_config(out, "train", kv);

  const auto data = prepare_training_set(state.model, load_split(fs::path(a.data) / "train"));
  const std::int64_t total = state.config.total_steps(static_cast<int>(data.size()));
  const std::int64_t every = std::max<std::int64_t>(1, total / 20);
  FitOptions options;
  options.out_dir = a.out;
  options.on_step = [&](std::int64_t step, double loss) {
    if (step % every == 0 || step == total) out << "step=" << step << " loss=" << loss << '\n' << std::flush;
  };
  fit(std::move(state), data, options);
  out << "saved=" << (fs::path(a.out) / "final.vten").string() << '\n';
  return kOk;
}

CondMode mode_or_trained(const std::string& flag, const Checkpoint& ck) {
  if (!flag.empty()) return parse_cond_mode(flag);
  auto it = ck.config.find("mode");
  return it == ck.config.end() ? CondMode::both : parse_cond_mode(it->second);
}

struct SampleArgs {
  std::string ckpt, image, out, mode;
  int frames = 8, steps = 1000;
  std::uint64_t seed = 0;
};

int sample_cmd(const SampleArgs& a, std::ostream& out) {
  const Checkpoint ck = Checkpoint::load(a.ckpt);
  GenerateOptions g;
  g.frames = a.frames;
  g.steps = a.steps;
  g.seed = a.seed;
  g.mode = mode_or_trained(a.mode, ck);
  print_config(out, "sample",
               {{"ckpt", a.ckpt},
                {"image", a.image},
                {"frames", std::to_string(g.frames)},
                {"steps", std::to_string(g.steps)},
                {"mode", to_string(g.mode)},
                {"seed", std::to_string(g.seed)},
                {"out", a.out}});
  Model model = Model::load_from(ck);
  const Tensor image = read_tensor(a.image);
  const Generated result = generate(model, {image}, g);
  write_tensor(a.out, result.videos[0]);
  write_frame_grid(grid_path(a.out), result.videos[0]);
  out << "saved=" << a.out << '\n' << "grid=" << grid_path(a.out) << '\n';
  return kOk;
}

struct InterpolateArgs {
  std::string ckpt, video, out, mode, pattern = "alternate";
  int steps = 1000;
  std::uint64_t seed = 0;
};

int interpolate_cmd(const InterpolateArgs& a, std::ostream& out) {
  const Checkpoint ck = Checkpoint::load(a.ckpt);
  InterpolateOptions o;
  o.pattern = parse_pattern(a.pattern);
  o.steps = a.steps;
  o.seed = a.seed;
  o.mode = mode_or_trained(a.mode, ck);
  print_config(out, "interpolate",
               {{"ckpt", a.ckpt},
                {"video", a.video},
                {"pattern", a.pattern},
                {"steps", std::to_string(o.steps)},
                {"mode", to_string(o.mode)},
                {"seed", std::to_string(o.seed)},
                {"out", a.out}});
  Model model = Model::load_from(ck);
  const Interpolated result = interpolate(model, read_tensor(a.video), o);
  std::string visible;
  for (bool v : result.visible) visible += v ? '1' : '0';
  out << "visible=" << visible << '\n';
  write_tensor(a.out, result.video);
  write_frame_grid(grid_path(a.out), result.video);
  out << "saved=" << a.out << '\n' << "grid=" << grid_path(a.out) << '\n';
  return kOk;
}

struct EvalArgs {
  std::string real, fake, metric = "fvd";
  int window = 0;  // 0: automatic
  std::uint64_t seed = 0;
};

int eval_cmd(const EvalArgs& a, std::ostream& out) {
  const Metric metric = parse_metric(a.metric);
  if (metric != Metric::is && a.real.empty()) throw ConfigError("--real is required for " + a.metric);
  const std::vector<Tensor> fake = load_video_set(a.fake);
  const std::vector<Tensor> real = a.real.empty() ? std::vector<Tensor>{} : load_video_set(a.real);

  EvalOptions options;
  options.seed = a.seed;
  std::int64_t shortest = std::numeric_limits<std::int64_t>::max();
  for (const auto* set : {&real, &fake}) {
    for (const auto& v : *set) shortest = std::min(shortest, v.rank() > 0 ? v.dim(0) : 0);
  }
  if (a.window > 0) {
    options.fvd_window = a.window;
    options.vfid_max = a.window;
  } else if (metric == Metric::fvd && !fake.empty()) {
    // Clips shorter than the conventional 16 frames are scored on their full length.
    options.fvd_window = static_cast<int>(std::min<std::int64_t>(options.fvd_window, shortest));
  }
  std::map<std::string, std::string> kv{{"metric", to_string(metric)},
                                        {"fake", a.fake + " (" + std::to_string(fake.size()) + " videos)"},
                                        {"seed", std::to_string(a.seed)}};
  if (!a.real.empty()) kv["real"] = a.real + " (" + std::to_string(real.size()) + " videos)";
  if (metric == Metric::fvd) kv["window"] = std::to_string(options.fvd_window);
  if (metric == Metric::vfid) kv["window"] = std::to_string(options.vfid_max);
  print_config(out, "eval", kv);

  const FeatureExtractor extractor = FeatureExtractor::build(a.seed);
  const double value = evaluate_videos(real, fake, extractor, metric, options);
  out.precision(10);
  out << to_string(metric) << '=' << value << '\n';
  return kOk;
}

struct GradCheckArgs {
  int trials = 50;
  std::uint64_t seed = 0;
  double tolerance = 1e-3;
};

int grad_check_cmd(const GradCheckArgs& a, std::ostream& out) {
  if (a.trials < 1) throw ConfigError("--trials must be at least 1");
  print_config(out, "grad-check",
               {{"trials", std::to_string(a.trials)},
                {"seed", std::to_string(a.seed)},
                {"tolerance", std::to_string(a.tolerance)}});
  bool ok = true;
  for (const auto& r : run_layer_grad_checks(a.trials, a.seed)) {
    const bool pass = r.max_rel_error < a.tolerance;
    ok = ok && pass;
    out << r.layer << " max_rel_error=" << r.max_rel_error << " trials=" << r.trials << (pass ? " ok" : " FAIL")
        << '\n';
  }
  return ok ? kOk : kContractError;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image-conditioned video diffusion on synthetic fashion clips", "fashionflow"};
  app.require_subcommand(1);
  app.allow_extras(false);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset with an 80/20 train/test split");
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--count", gd.count, "Number of videos")->check(CLI::PositiveNumber);
  gen->add_option("--frames", gd.frames, "Frames per video")->check(CLI::PositiveNumber);
  gen->add_option("--size", gd.size, "Frame height and width in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gd.seed, "Random seed");
  gen->add_option("--motion", gd.motion, "sway or linear");

  TrainVaeArgs tv;
  auto* vae = app.add_subcommand("train-vae", "Pretrain and freeze the autoencoder");
  vae->add_option("--data", tv.data, "Dataset directory (reads train/)")->required();
  vae->add_option("--out", tv.out, "Checkpoint path")->required();
  vae->add_option("--config", tv.config, "key=value training config");
  vae->add_option("--steps", tv.steps, "VAE optimizer steps")->check(CLI::NonNegativeNumber);
  auto* vae_seed = vae->add_option("--seed", tv.seed, "Random seed");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the video U-Net");
  train->add_option("--data", tr.data, "Dataset directory (reads train/)")->required();
  train->add_option("--vae", tr.vae, "Checkpoint written by train-vae");
  train->add_option("--out", tr.out, "Output directory for checkpoints and train_log.csv")->required();
  train->add_option("--config", tr.config, "key=value training config");
  train->add_option("--steps", tr.steps, "Total optimizer steps")->check(CLI::NonNegativeNumber);
  train->add_option("--batch", tr.batch, "Batch size");
  train->add_option("--mode", tr.mode, "global, local or both");
  train->add_option("--interpolation", tr.interpolation, "on or off");
  train->add_option("--resume", tr.resume, "Continue from a training checkpoint");
  auto* train_seed = train->add_option("--seed", tr.seed, "Random seed");

  SampleArgs sa;
  auto* smp = app.add_subcommand("sample", "Generate a video from a conditioning image");
  smp->add_option("--ckpt", sa.ckpt, "Training checkpoint")->required();
  smp->add_option("--image", sa.image, "Conditioning image (3, H, W)")->required();
  smp->add_option("--frames", sa.frames, "Frames to generate")->check(CLI::PositiveNumber);
  smp->add_option("--steps", sa.steps, "Sampling steps, strided from the training schedule")
      ->check(CLI::PositiveNumber);
  smp->add_option("--mode", sa.mode, "global, local or both (default: training mode)");
  smp->add_option("--seed", sa.seed, "Random seed");
  smp->add_option("--out", sa.out, "Output video path; a .ppm frame grid is written alongside")->required();

  InterpolateArgs ia;
  auto* itp = app.add_subcommand("interpolate", "Regenerate masked frames of a video");
  itp->add_option("--ckpt", ia.ckpt, "Training checkpoint")->required();
  itp->add_option("--video", ia.video, "Video (f, 3, H, W)")->required();
  itp->add_option("--pattern", ia.pattern, "alternate or random");
  itp->add_option("--steps", ia.steps, "Sampling steps")->check(CLI::PositiveNumber);
  itp->add_option("--mode", ia.mode, "global, local or both (default: training mode)");
  itp->add_option("--seed", ia.seed, "Random seed");
  itp->add_option("--out", ia.out, "Output video path")->required();

  EvalArgs ev;
  auto* evl = app.add_subcommand("eval", "Score generated videos");
  evl->add_option("--real", ev.real, "Reference videos (directory or file)");
  evl->add_option("--fake", ev.fake, "Generated videos (directory or file)")->required();
  evl->add_option("--metric", ev.metric, "fvd, vfid or is");
  evl->add_option("--window", ev.window, "Frames per video read by the extractor")->check(CLI::PositiveNumber);
  evl->add_option("--seed", ev.seed, "Extractor seed");

  GradCheckArgs gc;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient checks per layer type");
  grad->add_option("--trials", gc.trials, "Randomised trials per layer");
  grad->add_option("--seed", gc.seed, "Random seed");
  grad->add_option("--tolerance", gc.tolerance, "Maximum relative error");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kContractError;
  }
  tv.seed_given = vae_seed->count() > 0;
  tr.seed_given = train_seed->count() > 0;

  try {
    out << "threads=" << thread_count() << '\n';
    if (gen->parsed()) return gen_data(gd, out);
    if (vae->parsed()) return train_vae_cmd(tv, out);
    if (train->parsed()) return train_cmd(tr, out);
    if (smp->parsed()) return sample_cmd(sa, out);
    if (itp->parsed()) return interpolate_cmd(ia, out);
    if (evl->parsed()) return eval_cmd(ev, out);
    if (grad->parsed()) return grad_check_cmd(gc, out);
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kIoError;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kIoError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kContractError;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kContractError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kContractError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kContractError;
  }
  return kContractError;
}

}  // namespace ff::cli
