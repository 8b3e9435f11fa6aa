#include <benchmark/benchmark.h>

#include "oshx/model.hpp"
#include "oshx/ops.hpp"
#include "oshx/rng.hpp"
#include "oshx/train.hpp"

using namespace oshx;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape) {
  std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor::from_data(std::move(shape), std::move(data));
}

void BM_Conv2dForward(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor x = rand_tensor(rng, {8, 3, side, side});
  Tensor w = rand_tensor(rng, {64, 3, 3, 3});
  Tensor b = rand_tensor(rng, {64});
  for (auto _ : state) {
    Tensor y = conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.values().data());
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dForward)->Arg(32)->Arg(64)->Arg(128);

void BM_LinearForward(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  Rng rng(2);
  Tensor x = rand_tensor(rng, {32, d});
  Tensor w = rand_tensor(rng, {d, d});
  Tensor b = rand_tensor(rng, {d});
  for (auto _ : state) {
    Tensor y = linear(x, w, b);
    benchmark::DoNotOptimize(y.values().data());
  }
}
BENCHMARK(BM_LinearForward)->Arg(256)->Arg(768)->Arg(1024);

void BM_MultiHeadAttention(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  const int d = 256;
  Rng rng(3);
  Tensor tokens = rand_tensor(rng, {t, d});
  Tensor qkv_w = rand_tensor(rng, {3 * d, d});
  Tensor qkv_b = rand_tensor(rng, {3 * d});
  Tensor proj_w = rand_tensor(rng, {d, d});
  Tensor proj_b = rand_tensor(rng, {d});
  for (auto _ : state) {
    Tensor y = multi_head_attention(tokens, 8, qkv_w, qkv_b, proj_w, proj_b);
    benchmark::DoNotOptimize(y.values().data());
  }
}
BENCHMARK(BM_MultiHeadAttention)->Arg(17)->Arg(64)->Arg(197);

void BM_TinyCnnTrainStep(benchmark::State& state) {
  auto model =
      build_cnn<float>(ArchSpec::preset(Arch::cnn, ScalePreset::tiny, 4), 7);
  auto params = model->trainable_parameters();
  AdamStateT<float> adam;
  adam.init(params);
  TrainConfig cfg;
  Rng rng(8);
  Tensor batch = rand_tensor(rng, {16, 3, 64, 64});
  std::vector<int> labels(16);
  for (auto& y : labels) y = static_cast<int>(rng.below(4));
  const std::vector<double> weights{1, 1, 1, 1};
  for (auto _ : state) {
    Tensor logits = model->forward(batch, true);
    Tensor loss = weighted_cross_entropy(logits, labels, weights);
    loss.backward();
    adam_step(params, adam, cfg);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TinyCnnTrainStep);

void BM_TinyVitForward(benchmark::State& state) {
  auto model =
      build_vit<float>(ArchSpec::preset(Arch::vit, ScalePreset::tiny, 4), 7);
  Rng rng(9);
  Tensor batch = rand_tensor(rng, {16, 3, 64, 64});
  for (auto _ : state) {
    Tensor logits = model->forward(batch, false);
    benchmark::DoNotOptimize(logits.values().data());
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TinyVitForward);

} // namespace

BENCHMARK_MAIN();
