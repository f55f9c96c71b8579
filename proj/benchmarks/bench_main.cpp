#include <benchmark/benchmark.h>

#include "dcaunet/autograd.hpp"
#include "dcaunet/dca.hpp"
#include "dcaunet/net.hpp"
#include "dcaunet/ops.hpp"
#include "dcaunet/random.hpp"
#include "dcaunet/train.hpp"

using namespace dcaunet;

namespace {

Tensor noise(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  const Tensor x = noise({1, n, n, c}, 1), w = noise({3, 3, c, c}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, {}, {.stride = 1, .padding = 1, .groups = 1}));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * c * c * 9));
}
BENCHMARK(BM_Conv3x3)->Args({56, 16})->Args({28, 32})->Unit(benchmark::kMillisecond);

void BM_DcaForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  DcaConfig cfg;
  cfg.channels = 32;
  cfg.head_dim = 16;
  cfg.window = 7;
  cfg.attention = state.range(1) ? AttentionKind::differential : AttentionKind::standard;
  Rng rng(3);
  const DcaState st(cfg, rng);
  const Tensor x = noise({1, n, n, cfg.channels}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(dca_forward(x, cfg, st));
}
BENCHMARK(BM_DcaForward)->Args({56, 1})->Args({56, 0})->Unit(benchmark::kMillisecond);

void BM_NetworkStep(benchmark::State& state) {
  NetworkConfig cfg;
  cfg.input_size = 64;
  cfg.num_classes = 4;
  cfg.base_width = 16;
  cfg.stage_depths = {1, 1, 1, 1};
  cfg.head_dim = 4;
  cfg.window = 4;
  Network net(cfg);
  const Tensor x = noise({2, 64, 64, 1}, 5);
  std::vector<LabelMask> masks(2, LabelMask(64, 64));
  for (std::size_t i = 0; i < 64 * 64; i += 3) masks[0].labels[i] = masks[1].labels[i] = 1;
  ForwardContext ctx;
  ctx.mode = Mode::train;
  ctx.update_running_stats = false;
  for (auto _ : state) {
    const auto terms = segmentation_loss(net.forward(x, ctx), masks);
    backward(terms.total);
  }
}
BENCHMARK(BM_NetworkStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
