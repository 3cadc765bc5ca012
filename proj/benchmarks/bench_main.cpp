#include <benchmark/benchmark.h>

#include "uformer/lewin.hpp"
#include "uformer/model.hpp"
#include "uformer/ops.hpp"

using namespace uformer;

namespace {

Tensor<float> uniform(Shape shape, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& e : v) e = static_cast<float>(rng.uniform() - 0.5);
  return Tensor<float>(std::move(shape), std::move(v));
}

void BM_matmul(benchmark::State& state) {
  const auto n = state.range(0);
  Rng rng(0);
  const auto a = uniform({n, n}, rng), b = uniform({n, n}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.counters["MAC/s"] = benchmark::Counter(static_cast<double>(n * n * n), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_conv2d_3x3(benchmark::State& state) {
  const auto c = state.range(0);
  Rng rng(1);
  const auto x = uniform({c, 64, 64}, rng), w = uniform({c, c, 3, 3}, rng), b = uniform({c}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, Conv2dOptions{1, 1, 1}));
  state.counters["MAC/s"] =
      benchmark::Counter(static_cast<double>(c * c * 9 * 64 * 64), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_conv2d_3x3)->Arg(16)->Arg(32);

void BM_wmsa(benchmark::State& state) {
  const auto e = state.range(0);
  Rng rng(2);
  const auto p = WMSAParams<float>::make(32, 2, 8, rng);
  const auto x = uniform({32, e, e}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(wmsa_forward(x, p, 8, WMSAOptions{true, false}));
}
BENCHMARK(BM_wmsa)->Arg(32)->Arg(64)->Arg(128);

void BM_tiny_forward(benchmark::State& state) {
  const auto e = state.range(0);
  const auto model = build<float>(UformerConfig::tiny(), 0);
  Rng rng(3);
  const auto x = uniform({3, e, e}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(forward(x, model));
}
BENCHMARK(BM_tiny_forward)->Arg(32)->Arg(64);

void BM_tiny_train_step(benchmark::State& state) {
  const auto model = build<float>(UformerConfig::tiny(), 0);
  Rng rng(4);
  const auto x = uniform({3, 32, 32}, rng);
  for (auto _ : state) {
    auto loss = mean(forward(x, model));
    loss.backward();
    for (auto p : model.parameters()) p.tensor.zero_grad();
  }
}
BENCHMARK(BM_tiny_train_step);

}  // namespace

BENCHMARK_MAIN();
