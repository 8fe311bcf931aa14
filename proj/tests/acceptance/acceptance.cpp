// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. Criteria 7, 8, 10 and 11 share the trained desk model, so
// they run in order inside one process.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "fashionflow/diffusion.hpp"
#include "fashionflow/errors.hpp"
#include "fashionflow/gradcheck.hpp"
#include "fashionflow/metrics.hpp"
#include "fashionflow/training.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace ff;
using ff::testing::random_tensor;
using ff::testing::uniform_int;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

Tensor run_fwd(const std::function<Var(Tape&)>& f) {
  Tape tape(false);
  return f(tape).value();
}

// Runs the CLI in-process; stdout goes to `log`, failures raise.
void cli(const std::vector<std::string>& args, std::ostream& log) {
  std::ostringstream err;
  log << "$ fashionflow";
  for (const auto& a : args) log << ' ' << a;
  log << '\n';
  const int code = ff::cli::run(args, log, err);
  log << err.str() << std::flush;
  if (code != 0) {
    std::string cmd;
    for (const auto& a : args) cmd += a + " ";
    throw std::runtime_error("'" + cmd + "' exited " + std::to_string(code) + ": " + err.str());
  }
}

std::vector<double> read_losses(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) out.push_back(std::stod(line.substr(line.find(',') + 1)));
  return out;
}

// --- 1. gradient suite ---

Verdict gradients() {
  double worst = 0;
  std::string worst_layer, failed;
  for (const auto& r : run_layer_grad_checks(50, 1)) {
    if (r.max_rel_error > worst) worst = r.max_rel_error, worst_layer = r.layer;
    if (!(r.max_rel_error < 1e-3) || r.trials != 50) failed += " " + r.layer;
  }
  return {failed.empty(), "max rel error " + fmt(worst) + " (" + worst_layer + ")" +
                              (failed.empty() ? "" : "; failing:" + failed)};
}

// --- 2. schedule suite ---

Verdict schedule() {
  const NoiseSchedule s = NoiseSchedule::cosine(1000);
  bool ok = s.alpha_bar[0] >= 0.99 && s.alpha_bar[999] <= 0.01;
  for (int t = 0; t < 1000; ++t) {
    ok = ok && s.beta[static_cast<std::size_t>(t)] <= 0.999 && s.beta[static_cast<std::size_t>(t)] > 0;
    if (t > 0) ok = ok && s.alpha_bar[static_cast<std::size_t>(t)] < s.alpha_bar[static_cast<std::size_t>(t - 1)];
  }
  std::string detail = "abar0=" + fmt(s.alpha_bar[0]) + " abar999=" + fmt(s.alpha_bar[999]);
  // Iterate the one-step corruption from x0 = 10 and compare the empirical
  // mean and variance with the closed-form jump.
  const int n = 10000;
  const double x0 = 10;
  Rng rng = make_rng(2);
  std::normal_distribution<double> normal;
  std::vector<double> x(n, x0);
  double worst = 0;
  const std::set<int> probes{0, 10, 100, 500, 900, 999};
  for (int t = 0; t < 1000; ++t) {
    const double b = s.beta[static_cast<std::size_t>(t)];
    for (double& v : x) v = std::sqrt(1 - b) * v + std::sqrt(b) * normal(rng);
    if (!probes.count(t)) continue;
    double m = 0, var = 0;
    for (double v : x) m += v;
    m /= n;
    for (double v : x) var += (v - m) * (v - m);
    var /= n - 1;
    const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
    // The mean error is measured against the marginal's RMS, sqrt(mu^2 + var):
    // this is the relative error while the signal dominates, and stays
    // resolvable at late steps where mu is far below the sampling error.
    const double mu = std::sqrt(ab) * x0;
    const double em = std::abs(m - mu) / std::sqrt(mu * mu + (1 - ab)), ev = std::abs(var / (1 - ab) - 1);
    worst = std::max({worst, em, ev});
  }
  ok = ok && worst < 0.05;
  return {ok, detail + "; worst mean/variance deviation " + fmt(100 * worst) + "%"};
}

// --- 3. local conditioning invariance ---

Verdict local_conditioning() {
  const NoiseSchedule full = NoiseSchedule::cosine(1000);
  Rng rng = make_rng(3);
  bool ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = random_tensor({2, 4, 8, 16, 16}, rng);
    const Tensor eps = random_tensor(x0.shape(), rng);
    const Tensor xt =
        forward_diffuse({x0, true}, {uniform_int(rng, 0, 999), uniform_int(rng, 0, 999)}, eps, full).tensor;
    ok = ok && select(xt, 2, 0).bit_equal(select(x0, 2, 0));
  }
  UNet net = UNet::build(UNetConfig::desk(), 3);
  const NoiseSchedule sched = full.strided(250);
  std::string detail = "forward corruption " + std::string(ok ? "exact" : "CHANGED");
  for (CondMode mode : {CondMode::local, CondMode::both}) {
    ConditioningBundle cb;
    cb.i_vae = random_tensor({4, 16, 16}, rng);
    cb.i_clip = random_tensor({32}, rng);
    cb.tokens = random_tensor({257, 32}, rng);
    cb.rgb_lowres = Tensor::uniform({3, 16, 16}, rng, -1, 1);
    const VideoLatent v = sample(net, {cb}, 8, sched, 3, mode);
    const bool exact = select(select(v.tensor, 0, 0), 1, 0).bit_equal(cb.i_vae);
    ok = ok && exact && v.tensor.all_finite();
    detail += "; 250-step " + to_string(mode) + " sample frame 0 " + (exact ? "exact" : "CHANGED");
  }
  return {ok, detail};
}

// --- 4. metric oracles ---

MetricStats stats(std::vector<double> mu, std::vector<double> sigma) {
  MetricStats s;
  s.mu = std::move(mu);
  s.sigma = std::move(sigma);
  s.n = 2;
  return s;
}

Verdict metric_oracles() {
  const MetricStats a = stats({0.3, -2}, {1.5, 0.2, 0.2, 0.7});
  const double c1 = frechet_distance(a, a);
  const double c2 = frechet_distance(stats({0, 0}, {1, 0, 0, 1}), stats({1, 0}, {1, 0, 0, 1}));
  const double c3 = frechet_distance(stats({0, 0}, {1, 0, 0, 1}), stats({0, 0}, {4, 0, 0, 4}));
  bool ok = std::abs(c1) <= 1e-8 && std::abs(c2 - 1) <= 1e-8 && std::abs(c3 - 2) <= 1e-8;
  Rng rng = make_rng(4);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 1 + rng() % 16;
    const MetricStats r = ff::testing::random_psd_stats(rng, d), g = ff::testing::random_psd_stats(rng, d);
    worst = std::max(worst, std::abs(frechet_distance(r, g) - ff::testing::oracle_frechet(r, g)));
  }
  ok = ok && worst <= 1e-6;
  const double uniform = inception_score(FeatureRows(8, std::vector<double>(10, 0.1)));
  FeatureRows onehot(10, std::vector<double>(10, 0));
  for (int i = 0; i < 10; ++i) onehot[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1;
  const double k = inception_score(onehot);
  ok = ok && uniform == 1.0 && std::abs(k - 10) <= 1e-12;
  std::ostringstream d;
  d.precision(17);
  d << "analytic " << c1 << ", " << c2 << ", " << c3 << "; oracle max deviation " << worst << "; IS uniform " << uniform
    << ", one-hot " << k;
  return {ok, d.str()};
}

// --- 5. pseudo-3D reduction ---

Verdict pseudo3d() {
  Rng rng = make_rng(5);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    nn::Pseudo3DConv layer(uniform_int(rng, 1, 8), uniform_int(rng, 1, 8), rng);
    const Tensor v = random_tensor({uniform_int(rng, 1, 2), layer.spatial.in_ch, uniform_int(rng, 1, 8),
                                    uniform_int(rng, 2, 12), uniform_int(rng, 2, 12)},
                                   rng);
    const Tensor y = run_fwd([&](Tape& t) { return layer.forward(t, t.constant(v)); });
    worst = std::max<double>(worst, max_abs_diff(y, ff::testing::naive_framewise_conv2d(v, layer.spatial.weight.value,
                                                                                 layer.spatial.bias.value, 1)));
  }
  return {worst <= 1e-6, "max abs deviation " + fmt(worst) + " over 20 cases"};
}

// --- 6. attention equivariance ---

Verdict equivariance() {
  Rng rng = make_rng(6);
  double ws = 0, wt = 0;
  for (int trial = 0; trial < 20; ++trial) {
    nn::SpatialAttention sa(8, uniform_int(rng, 1, 2), 4, rng);
    const Tensor v = random_tensor({uniform_int(rng, 1, 2), 8, uniform_int(rng, 1, 4), uniform_int(rng, 2, 5),
                                    uniform_int(rng, 2, 5)},
                                   rng);
    std::vector<int> perm(static_cast<std::size_t>(v.dim(3) * v.dim(4)));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor a = ff::testing::permute_pixels(run_fwd([&](Tape& t) { return sa.forward(t, t.constant(v)); }), perm);
    const Tensor b =
        run_fwd([&](Tape& t) { return sa.forward(t, t.constant(ff::testing::permute_pixels(v, perm))); });
    ws = std::max<double>(ws, max_abs_diff(a, b));
  }
  for (int trial = 0; trial < 20; ++trial) {
    nn::TemporalAttention ta(8, uniform_int(rng, 1, 2), 4, rng);
    const Tensor v = random_tensor({uniform_int(rng, 1, 2), 8, uniform_int(rng, 2, 8), uniform_int(rng, 1, 4),
                                    uniform_int(rng, 1, 4)},
                                   rng);
    std::vector<int> perm(static_cast<std::size_t>(v.dim(2)));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor a = ff::testing::permute_frames(run_fwd([&](Tape& t) { return ta.forward(t, t.constant(v)); }), perm);
    const Tensor b =
        run_fwd([&](Tape& t) { return ta.forward(t, t.constant(ff::testing::permute_frames(v, perm))); });
    wt = std::max<double>(wt, max_abs_diff(a, b));
  }
  return {ws < 1e-5 && wt < 1e-5, "spatial " + fmt(ws) + ", temporal " + fmt(wt) + " (20 trials each)"};
}

// --- 7, 8, 11: desk training run ---

struct DeskRun {
  fs::path dir;
  double head = 0, tail = 0, seconds = 0, vae_mse = 0;
  double fvd_samples = 0, fvd_noise = 0, sample_seconds = 0;
};

DeskRun train_desk(const fs::path& dir, std::ostream& log) {
  DeskRun r;
  r.dir = dir;
  fs::remove_all(dir);
  const auto start = std::chrono::steady_clock::now();
  const std::string data = (dir / "data").string(), vae = (dir / "vae.vten").string(), out = (dir / "train").string();
  cli({"gen-data", "--out", data, "--count", "80", "--frames", "8", "--size", "64", "--seed", "7"}, log);
  cli({"train-vae", "--data", data, "--out", vae, "--seed", "7"}, log);
  cli({"train", "--data", data, "--vae", vae, "--out", out, "--steps", "1000", "--batch", "4", "--mode", "both",
       "--seed", "7"},
      log);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto losses = read_losses(dir / "train" / "train_log.csv");
  r.head = smoothed_head(losses, 100);
  r.tail = smoothed_tail(losses, 100);
  Model m = Model::load_from(Checkpoint::load(dir / "train" / "final.vten"));
  std::vector<Tensor> frames;
  for (const auto& it : load_split(dir / "data" / "test")) frames.push_back(it.video);
  r.vae_mse = reconstruction_mse(m.vae, frames);
  return r;
}

void score_desk(DeskRun& r) {
  const auto start = std::chrono::steady_clock::now();
  Model m = Model::load_from(Checkpoint::load(r.dir / "train" / "final.vten"));
  const auto test = load_split(r.dir / "data" / "test");
  std::vector<Tensor> images, real;
  for (const auto& it : test) {
    images.push_back(it.cond);
    real.push_back(it.video);
  }
  GenerateOptions g;
  g.frames = 8;
  g.steps = 100;
  g.seed = 8;
  g.mode = CondMode::both;
  const Generated gen = generate(m, images, g);
  for (std::size_t i = 0; i < gen.videos.size(); ++i) write_tensor(r.dir / "samples" / indexed_name("vid", static_cast<int>(i)), gen.videos[i]);
  Rng rng = make_rng(8, {0x6e6f6973});
  std::vector<Tensor> noise;
  for (std::size_t i = 0; i < real.size(); ++i) noise.push_back(Tensor::uniform(real[i].shape(), rng, -1, 1));
  const FeatureExtractor ex = FeatureExtractor::build(0);
  EvalOptions o;
  o.fvd_window = 8;
  r.fvd_samples = evaluate_videos(real, gen.videos, ex, Metric::fvd, o);
  r.fvd_noise = evaluate_videos(real, noise, ex, Metric::fvd, o);
  r.sample_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// --- 9. every conditioning mode trains and samples ---

Verdict all_modes(const DeskRun& desk, std::ostream& log) {
  bool ok = true;
  std::string detail;
  const std::string data = (desk.dir / "data").string(), vae = (desk.dir / "vae.vten").string();
  const Tensor image = load_split(desk.dir / "data" / "test").at(0).cond;
  for (const char* mode : {"global", "local", "both"}) {
    const fs::path out = desk.dir / (std::string("mode_") + mode);
    cli({"train", "--data", data, "--vae", vae, "--out", out.string(), "--steps", "50", "--batch", "4", "--mode", mode,
         "--seed", "9"},
        log);
    const auto losses = read_losses(out / "train_log.csv");
    bool finite = losses.size() == 50;
    for (double l : losses) finite = finite && std::isfinite(l);
    Model m = Model::load_from(Checkpoint::load(out / "final.vten"));
    GenerateOptions g;
    g.steps = 20;
    g.seed = 9;
    g.mode = parse_cond_mode(mode);
    const Generated gen = generate(m, {image}, g);
    const bool sampled = gen.videos.size() == 1 && gen.videos[0].all_finite() &&
                         gen.videos[0].shape() == Shape{8, 3, 64, 64};
    ok = ok && finite && sampled;
    detail += std::string(detail.empty() ? "" : "; ") + mode + " final loss " + fmt(losses.empty() ? NAN : losses.back()) +
              (sampled ? " sampled" : " SAMPLE FAILED");
  }
  return {ok, detail};
}

// --- 10. interpolation against nearest-visible copy ---

Verdict interpolation(const DeskRun& desk) {
  const auto start = std::chrono::steady_clock::now();
  Model m = Model::load_from(Checkpoint::load(desk.dir / "train" / "final.vten"));
  const auto videos = generate_dataset(8, 8, 64, 10, Motion::linear);
  double model_sse = 0, copy_sse = 0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const Tensor& truth = videos[i].video;
    InterpolateOptions o;
    o.steps = 100;
    o.seed = 10 + i;
    const Interpolated r = interpolate(m, truth, o);
    const std::int64_t f = truth.dim(0), frame = truth.size() / f;
    for (std::int64_t t = 0; t < f; ++t) {
      if (r.visible[static_cast<std::size_t>(t)]) continue;
      std::int64_t nearest = -1;
      for (std::int64_t d = 1; nearest < 0 && d < f; ++d) {
        if (t - d >= 0 && r.visible[static_cast<std::size_t>(t - d)]) nearest = t - d;
        else if (t + d < f && r.visible[static_cast<std::size_t>(t + d)]) nearest = t + d;
      }
      for (std::int64_t j = 0; j < frame; ++j) {
        const double y = truth[t * frame + j];
        model_sse += (r.video[t * frame + j] - y) * (r.video[t * frame + j] - y);
        copy_sse += (truth[nearest * frame + j] - y) * (truth[nearest * frame + j] - y);
      }
      count += frame;
    }
  }
  const double model_mse = model_sse / static_cast<double>(count), copy_mse = copy_sse / static_cast<double>(count);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {model_mse <= 1.5 * copy_mse && seconds < 300,
          "masked-frame MSE " + fmt(model_mse) + " vs copy baseline " + fmt(copy_mse) + " (ratio " +
              fmt(model_mse / copy_mse) + ", bound 1.5) in " + fmt(seconds) + " s"};
}

Verdict reproducibility(const DeskRun& a, const DeskRun& b) {
  bool ok = true;
  std::string detail;
  for (const char* rel : {"vae.vten", "train/final.vten", "train/train_log.csv", "samples/vid_0000.vten"}) {
    const bool same = read_file(a.dir / rel) == read_file(b.dir / rel);
    ok = ok && same;
    detail += std::string(detail.empty() ? "" : ", ") + rel + (same ? " identical" : " DIFFERS");
  }
  const bool metrics = a.fvd_samples == b.fvd_samples && a.fvd_noise == b.fvd_noise;
  ok = ok && metrics;
  return {ok, detail + "; fvd " + (metrics ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  std::ofstream log(fs::path(work) / "acceptance.log");

  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  int failures = 0;
  auto report = [&](int n, double budget, const std::function<Verdict()>& body) {
    if (!wanted(n)) return;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = body();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (budget > 0 && s >= budget) {
      v.pass = false;
      v.detail += "; over the " + fmt(budget) + " s budget";
    }
    failures += !v.pass;
    std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << "  [" << fmt(s)
              << " s]" << std::endl;
  };

  report(1, 120, gradients);
  report(2, 60, schedule);
  report(3, 120, local_conditioning);
  report(4, 60, metric_oracles);
  report(5, 60, pseudo3d);
  report(6, 60, equivariance);

  const bool desk_needed = wanted(7) || wanted(8) || wanted(9) || wanted(10) || wanted(11);
  DeskRun first;
  std::string desk_error;
  if (desk_needed) {
    try {
      first = train_desk(fs::path(work) / "run1", log);
    } catch (const std::exception& e) {
      desk_error = e.what();
    }
  }
  auto need_desk = [&] {
    if (!desk_error.empty()) throw std::runtime_error("desk run failed: " + desk_error);
  };
  report(7, 0, [&]() -> Verdict {
    need_desk();
    return {first.tail < 0.7 * first.head && first.seconds < 900,
            "smoothed loss " + fmt(first.head) + " -> " + fmt(first.tail) + " (ratio " + fmt(first.tail / first.head) +
                ", bound 0.7); VAE held-out MSE " + fmt(first.vae_mse) + "; " + fmt(first.seconds) + " s of 900"};
  });
  bool scored = false;
  report(8, 0, [&]() -> Verdict {
    need_desk();
    score_desk(first);
    scored = true;
    return {first.fvd_samples < first.fvd_noise && first.sample_seconds < 300,
            "fvd(test, samples) " + fmt(first.fvd_samples) + " < fvd(test, noise) " + fmt(first.fvd_noise) + "; " +
                fmt(first.sample_seconds) + " s of 300"};
  });
  report(9, 0, [&] {
    need_desk();
    return all_modes(first, log);
  });
  report(10, 0, [&] {
    need_desk();
    return interpolation(first);
  });
  report(11, 0, [&] {
    need_desk();
    if (!scored) score_desk(first);
    DeskRun second = train_desk(fs::path(work) / "run2", log);
    score_desk(second);
    return reproducibility(first, second);
  });
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
