#include <benchmark/benchmark.h>

#include "fashionflow/layers.hpp"
#include "fashionflow/unet.hpp"

namespace {

using namespace ff;

void BM_Pseudo3DConv(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  Rng rng = make_rng(1);
  nn::Pseudo3DConv layer(c, c, rng);
  const Tensor v = Tensor::randn({1, c, 8, 16, 16}, rng);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(layer.forward(tape, tape.constant(v)).value().ptr());
  }
}
BENCHMARK(BM_Pseudo3DConv)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_SpatialAttention(benchmark::State& state) {
  Rng rng = make_rng(2);
  nn::SpatialAttention layer(32, 4, 4, rng);
  const Tensor v = Tensor::randn({1, 32, 8, 16, 16}, rng);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(layer.forward(tape, tape.constant(v)).value().ptr());
  }
}
BENCHMARK(BM_SpatialAttention)->Unit(benchmark::kMillisecond);

void BM_TemporalAttention(benchmark::State& state) {
  Rng rng = make_rng(3);
  nn::TemporalAttention layer(32, 4, 4, rng);
  const Tensor v = Tensor::randn({1, 32, 8, 16, 16}, rng);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(layer.forward(tape, tape.constant(v)).value().ptr());
  }
}
BENCHMARK(BM_TemporalAttention)->Unit(benchmark::kMillisecond);

// One forward and backward pass of the desk U-Net at training shape.
void BM_UNetTrainStep(benchmark::State& state) {
  UNet net = UNet::build(UNetConfig::desk(), 4);
  Rng rng = make_rng(4);
  const Tensor x = Tensor::randn({state.range(0), 8, 8, 16, 16}, rng);
  const Tensor tok = Tensor::randn({state.range(0), 257, 32}, rng);
  const std::vector<int> t(static_cast<std::size_t>(state.range(0)), 500);
  for (auto _ : state) {
    Tape tape;
    Var tokens = tape.constant(tok);
    Var out = net.predict_noise(tape, tape.constant(x), t, &tokens);
    tape.backward(ops::mean(ops::mul(out, out)));
    for (auto& [name, p] : net.named_parameters()) p->zero_grad();
  }
}
BENCHMARK(BM_UNetTrainStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
