#include <gtest/gtest.h>

#include <algorithm>
#include <iterator>
#include <set>

#include <cmath>

#include "fashionflow/errors.hpp"
#include "fashionflow/unet.hpp"
#include "test_support.hpp"

namespace ff {
namespace {

using testing::perturb_parameters;
using testing::random_tensor;

// Parameter count from the layer formulas: conv3 = 9io + o, conv1d3 = 3io + o,
// linear = io + o, group norm = 2c, attention = 2 linear(d, d) + 2 linear(ctx, d).
std::int64_t analytic_count(const UNetConfig& c) {
  auto lin = [](std::int64_t i, std::int64_t o) { return i * o + o; };
  auto p3d = [](std::int64_t i, std::int64_t o) { return 9 * i * o + o + 3 * o * o + o; };
  auto gn = [](std::int64_t ch) { return 2 * ch; };
  auto pair = [&](std::int64_t i, std::int64_t o, bool stem) {
    return (stem ? 0 : gn(i)) + p3d(i, o) + gn(o) + p3d(o, o) + (i != o ? i * o + o : 0);
  };
  const auto w = c.widths();
  const std::int64_t td = 4 * w[0], ctx = c.context_dim;
  auto block = [&](std::int64_t i, std::int64_t o, int layers, bool stem) {
    std::int64_t n = lin(td, o);
    for (int p = 0; p < layers / 2; ++p) n += pair(p == 0 ? i : o, o, stem && p == 0);
    return n;
  };
  auto attn = [&](std::int64_t d, std::int64_t kv) { return 2 * lin(d, d) + 2 * lin(kv, d); };
  std::int64_t n = lin(w[0], td) + lin(td, td);
  for (int i = 0; i < 4; ++i) {
    n += block(i == 0 ? c.in_channels() : w[static_cast<std::size_t>(i - 1)], w[static_cast<std::size_t>(i)],
               c.layers_per_block, i == 0);
    n += gn(w[static_cast<std::size_t>(i)]) + attn(w[static_cast<std::size_t>(i)], ctx);
  }
  n += block(w[3], w[3], c.mid_layers, false) + 2 * (gn(w[3]) + attn(w[3], w[3])) + gn(w[3]) + attn(w[3], ctx);
  for (int j = 0; j < 4; ++j) {
    const std::size_t level = static_cast<std::size_t>(3 - j);
    const std::int64_t prev = j == 0 ? w[3] : w[level + 1];
    n += block(prev + w[level], w[level], c.layers_per_block, false) + gn(w[level]) + attn(w[level], ctx);
  }
  return n + gn(w[0]) + p3d(w[0], c.latent_channels);
}

TEST(UNetConfig, FullConfigParameterCountIsGolden) {
  UNetConfig full;
  EXPECT_EQ(analytic_count(full), 70958264);
  UNet net = UNet::build(full, 0);
  EXPECT_EQ(net.parameter_count(), 70958264);
}

TEST(UNetConfig, WidthScaleDividesEveryWidth) {
  UNetConfig desk = UNetConfig::desk();
  EXPECT_EQ(desk.widths(), (std::array<std::int64_t, 4>{8, 16, 32, 64}));
  UNet a = UNet::build(desk, 0);
  UNet b = UNet::build(UNetConfig{}, 0);
  // Same structure, except that the first block needs no skip projection
  // when its width equals the input channel count (8 at desk scale).
  std::set<std::string> names_a, names_b;
  for (const auto& [name, _] : a.named_parameters()) names_a.insert(name);
  for (const auto& [name, _] : b.named_parameters()) names_b.insert(name);
  std::set<std::string> only_b;
  std::set_difference(names_b.begin(), names_b.end(), names_a.begin(), names_a.end(),
                      std::inserter(only_b, only_b.end()));
  EXPECT_TRUE(std::includes(names_b.begin(), names_b.end(), names_a.begin(), names_a.end()));
  EXPECT_EQ(only_b, (std::set<std::string>{"enc0.pair0.skip.bias", "enc0.pair0.skip.weight"}));
  EXPECT_EQ(a.parameter_count(), analytic_count(desk));
  EXPECT_EQ(a.parameter_count(), 1135488);
}

TEST(UNetConfig, InvalidConfigsRejected) {
  UNetConfig c = UNetConfig::desk();
  c.norm_groups = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(UNet::build(c, 0), ConfigError);
  c = UNetConfig::desk();
  c.width_scale = {1, 128};
  EXPECT_THROW(c.validate(), ConfigError);
  c = UNetConfig::desk();
  c.base_widths = {64, 64, 256, 512};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(Rational::parse("0.125"), ConfigError);
  EXPECT_EQ(Rational::parse("1/8"), (Rational{1, 8}));
}

TEST(UNetConfig, MapRoundTrip) {
  UNetConfig c = UNetConfig::desk();
  c.attention_heads = 2;
  c.layers_per_block = 4;
  const UNetConfig back = UNetConfig::from_map(c.to_map());
  EXPECT_EQ(back.to_map(), c.to_map());
}

UNetConfig tiny() {
  UNetConfig c = UNetConfig::desk();
  c.layers_per_block = 2;
  c.mid_layers = 2;
  return c;
}

TEST(UNet, SameSeedBitIdenticalDifferentSeedDiffers) {
  UNet a = UNet::build(tiny(), 5), b = UNet::build(tiny(), 5), c = UNet::build(tiny(), 6);
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(pa[i].second->value.bit_equal(pb[i].second->value)) << pa[i].first;
    any_diff = any_diff || !pa[i].second->value.bit_equal(pc[i].second->value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(UNet, ShapeContractAtDeskSize) {
  UNet net = UNet::build(UNetConfig::desk(), 1);
  Rng rng(1);
  Tape tape(false);
  Var out = net.predict_noise(tape, tape.constant(random_tensor({1, 8, 8, 16, 16}, rng)), {500}, nullptr);
  EXPECT_EQ(out.shape(), (Shape{1, 4, 8, 16, 16}));
  EXPECT_TRUE(out.value().all_finite());
}

TEST(UNet, FrameCountNeverChanges) {
  UNet net = UNet::build(tiny(), 2);
  Rng rng(2);
  for (int f : {1, 3, 5}) {
    Tape tape(false);
    Tensor tokens = random_tensor({2, 5, 32}, rng);
    Var tok = tape.constant(tokens);
    Var out = net.predict_noise(tape, tape.constant(random_tensor({2, 8, f, 8, 8}, rng)), {0, 999}, &tok);
    EXPECT_EQ(out.shape(), (Shape{2, 4, f, 8, 8}));
  }
}

TEST(UNet, EveryParameterReachable) {
  UNet net = UNet::build(tiny(), 3);
  Rng rng(3);
  Tape tape;
  Var tok = tape.constant(random_tensor({1, 5, 32}, rng));
  Var out = net.predict_noise(tape, tape.constant(random_tensor({1, 8, 2, 8, 8}, rng)), {10}, &tok);
  tape.backward(ops::mean(ops::mul(out, out)));
  for (auto& [name, p] : net.named_parameters()) {
    ASSERT_TRUE(p->grad.has_value()) << name;
    EXPECT_TRUE(p->grad->all_finite()) << name;
  }
}

TEST(UNet, DeterministicOutput) {
  UNet net = UNet::build(tiny(), 4);
  Rng rng(4);
  Tensor x = random_tensor({1, 8, 3, 8, 8}, rng);
  Tensor a, b;
  {
    Tape tape(false);
    a = net.predict_noise(tape, tape.constant(x), {7}, nullptr).value();
  }
  {
    Tape tape(false);
    b = net.predict_noise(tape, tape.constant(x), {7}, nullptr).value();
  }
  EXPECT_TRUE(a.bit_equal(b));
}

TEST(UNet, TimestepOutOfRangeIsContractError) {
  UNet net = UNet::build(tiny(), 5);
  Tape tape(false);
  Var x = tape.constant(Tensor({1, 8, 1, 8, 8}));
  EXPECT_THROW(net.predict_noise(tape, x, {1000}, nullptr), ContractError);
  EXPECT_THROW(net.predict_noise(tape, x, {-1}, nullptr), ContractError);
  EXPECT_THROW(net.predict_noise(tape, tape.constant(Tensor({1, 7, 1, 8, 8})), {0}, nullptr), ShapeError);
}

TEST(UNet, TimestepChangesOutput) {
  UNet net = UNet::build(tiny(), 6);
  Rng rng(6);
  Tensor x = random_tensor({1, 8, 2, 8, 8}, rng);
  Tape tape(false);
  // The timestep enters only through residual branches, which start at zero.
  const Tensor fresh1 = net.predict_noise(tape, tape.constant(x), {1}, nullptr).value();
  const Tensor fresh900 = net.predict_noise(tape, tape.constant(x), {900}, nullptr).value();
  EXPECT_TRUE(fresh1.bit_equal(fresh900));
  perturb_parameters(net, rng);
  Tensor a = net.predict_noise(tape, tape.constant(x), {1}, nullptr).value();
  Tensor b = net.predict_noise(tape, tape.constant(x), {900}, nullptr).value();
  EXPECT_GT(max_abs_diff(a, b), 0);
}

}  // namespace
}  // namespace ff
