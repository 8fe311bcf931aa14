#include "fashionflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fashionflow/conditioning.hpp"
#include "fashionflow/errors.hpp"
#include "fashionflow/layers.hpp"

namespace ff {

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-30});
}

double check_gradients(const std::function<Var(Tape&)>& build, const std::vector<Parameter*>& leaves, Rng& rng,
                       const GradCheckOptions& options) {
  Tensor probe;
  auto loss_at = [&]() {
    Tape tape(false);
    const Tensor& out = build(tape).value();
    double s = 0;
    for (std::int64_t i = 0; i < out.size(); ++i) s += static_cast<double>(out[i]) * probe[i];
    return s;
  };

  for (auto* p : leaves) p->zero_grad();
  Tape tape;
  Var out = build(tape);
  probe = Tensor::uniform(out.shape(), rng, Scalar(-1), Scalar(1));
  tape.backward(ops::sum(ops::mul(out, tape.constant(probe))));

  std::vector<double> analytic, numeric;
  for (auto* p : leaves) {
    const std::int64_t n = p->value.size();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.coords_per_leaf));
    }
    for (auto i : coords) {
      analytic.push_back(p->grad ? static_cast<double>((*p->grad)[i]) : 0.0);
      const Scalar saved = p->value[i];
      p->value[i] = static_cast<Scalar>(saved + options.step);
      const double up = loss_at();
      p->value[i] = static_cast<Scalar>(saved - options.step);
      const double down = loss_at();
      p->value[i] = saved;
      // Divide by the step actually taken after rounding to Scalar.
      const double taken = static_cast<double>(static_cast<Scalar>(saved + options.step)) -
                           static_cast<double>(static_cast<Scalar>(saved - options.step));
      numeric.push_back((up - down) / taken);
    }
  }
  for (auto* p : leaves) p->zero_grad();
  return relative_error(analytic, numeric);
}

namespace {

std::vector<Parameter*> collect(const std::function<void(const nn::ParamVisitor&)>& visit) {
  std::vector<Parameter*> out;
  visit([&](const std::string&, Parameter& p) { out.push_back(&p); });
  return out;
}

// Moves parameters off their special initial values (unit gamma, delta
// kernels) so every path carries a generic gradient.
void jitter(const std::vector<Parameter*>& params, Rng& rng) {
  for (auto* p : params) {
    Tensor noise = Tensor::uniform(p->value.shape(), rng, Scalar(-0.2), Scalar(0.2));
    for (std::int64_t i = 0; i < p->value.size(); ++i) p->value[i] += noise[i];
  }
}

Parameter random_input(Shape shape, Rng& rng) { return Parameter(Tensor::randn(std::move(shape), rng)); }

int pick(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

using Trial = std::function<double(Rng&, const GradCheckOptions&)>;

struct Case {
  std::string name;
  Trial trial;
};

std::vector<Case> layer_cases() {
  std::vector<Case> cases;
  cases.push_back({"linear", [](Rng& rng, const GradCheckOptions& o) {
    const int in = pick(rng, 2, 6), out = pick(rng, 2, 6);
    nn::Linear layer(in, out, rng);
    Parameter x = random_input({2, 3, in}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("l", f); });
    jitter(leaves, rng);
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"group_norm", [](Rng& rng, const GradCheckOptions& o) {
    const int groups = pick(rng, 1, 3), per = pick(rng, 1, 3);
    nn::GroupNorm layer(groups, groups * per);
    Parameter x = random_input({2, groups * per, 3, pick(rng, 2, 4)}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("g", f); });
    jitter(leaves, rng);
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"conv2d", [](Rng& rng, const GradCheckOptions& o) {
    const int in = pick(rng, 1, 4), out = pick(rng, 1, 4);
    nn::Conv2D layer(in, out, 3, 1, rng);
    Parameter x = random_input({2, in, pick(rng, 2, 5), pick(rng, 2, 5)}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("c", f); });
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"conv1d", [](Rng& rng, const GradCheckOptions& o) {
    const int in = pick(rng, 1, 4), out = pick(rng, 1, 4);
    nn::Conv1D layer(in, out, 3, 1, rng);
    Parameter x = random_input({3, in, pick(rng, 1, 6)}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("c", f); });
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"pseudo3d_conv", [](Rng& rng, const GradCheckOptions& o) {
    const int in = pick(rng, 1, 4), out = pick(rng, 1, 4);
    nn::Pseudo3DConv layer(in, out, rng);
    Parameter x = random_input({pick(rng, 1, 2), in, pick(rng, 1, 4), pick(rng, 2, 4), pick(rng, 2, 4)}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("p", f); });
    jitter(leaves, rng);
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"spatial_attention", [](Rng& rng, const GradCheckOptions& o) {
    const int heads = pick(rng, 1, 2), groups = 2;
    const int c = 4;
    nn::SpatialAttention layer(c, heads, groups, rng);
    Parameter x = random_input({1, c, pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 2, 3)}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("s", f); });
    jitter(leaves, rng);
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"temporal_attention", [](Rng& rng, const GradCheckOptions& o) {
    const int heads = pick(rng, 1, 2), groups = 2;
    const int c = 4;
    nn::TemporalAttention layer(c, heads, groups, rng);
    Parameter x = random_input({1, c, pick(rng, 2, 4), pick(rng, 1, 2), pick(rng, 1, 3)}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("t", f); });
    jitter(leaves, rng);
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"cross_attention", [](Rng& rng, const GradCheckOptions& o) {
    const int heads = pick(rng, 1, 2), groups = 2, c = 4, ctx = pick(rng, 2, 5);
    nn::CrossAttention layer(c, ctx, heads, groups, rng);
    // At least two positions per frame: a two-value norm group is a smoothed
    // sign function whose kink is narrower than the difference step.
    Parameter x = random_input({1, c, pick(rng, 1, 3), pick(rng, 1, 2), pick(rng, 2, 3)}, rng);
    Parameter tokens = random_input({1, pick(rng, 1, 4), ctx}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("x", f); });
    jitter(leaves, rng);
    leaves.push_back(&x);
    leaves.push_back(&tokens);
    return check_gradients([&](Tape& t) { return layer.forward(t, t.param(x), t.param(tokens)); }, leaves, rng, o);
  }});
  cases.push_back({"vae_encoder", [](Rng& rng, const GradCheckOptions& o) {
    ToyVAE vae = ToyVAE::build({4, 8, 4}, rng());
    Parameter x = Parameter(Tensor::uniform({1, 3, 8, 8}, rng, Scalar(-1), Scalar(1)));
    auto leaves = collect([&](const nn::ParamVisitor& f) { vae.visit(f); });
    leaves.erase(std::remove_if(leaves.begin(), leaves.end(), [](Parameter* p) { return !p->requires_grad; }),
                 leaves.end());
    leaves.push_back(&x);
    return check_gradients([&](Tape& t) { return vae.encode(t, t.param(x)); }, leaves, rng, o);
  }});
  cases.push_back({"vae_decoder", [](Rng& rng, const GradCheckOptions& o) {
    ToyVAE vae = ToyVAE::build({4, 8, 4}, rng());
    Parameter z = random_input({1, 4, 2, 2}, rng);
    auto leaves = collect([&](const nn::ParamVisitor& f) { vae.visit(f); });
    leaves.erase(std::remove_if(leaves.begin(), leaves.end(), [](Parameter* p) { return !p->requires_grad; }),
                 leaves.end());
    leaves.push_back(&z);
    return check_gradients([&](Tape& t) { return vae.decode(t, t.param(z)); }, leaves, rng, o);
  }});
  cases.push_back({"timestep_embedding", [](Rng& rng, const GradCheckOptions& o) {
    nn::TimestepEmbedding layer(2 * pick(rng, 1, 4), pick(rng, 2, 6), rng);
    const std::vector<int> t{pick(rng, 0, 999), pick(rng, 0, 999)};
    auto leaves = collect([&](const nn::ParamVisitor& f) { layer.visit("e", f); });
    return check_gradients([&](Tape& tape) { return layer.forward(tape, t); }, leaves, rng, o);
  }});
  return cases;
}

}  // namespace

std::vector<LayerGradReport> run_layer_grad_checks(int trials, std::uint64_t seed, const GradCheckOptions& options) {
  std::vector<LayerGradReport> reports;
  std::uint64_t case_index = 0;
  for (const auto& c : layer_cases()) {
    LayerGradReport r;
    r.layer = c.name;
    for (int i = 0; i < trials; ++i) {
      Rng rng = make_rng(seed, {0x67726164, case_index, static_cast<std::uint64_t>(i)});
      r.max_rel_error = std::max(r.max_rel_error, c.trial(rng, options));
      ++r.trials;
    }
    reports.push_back(r);
    ++case_index;
  }
  return reports;
}

}  // namespace ff
