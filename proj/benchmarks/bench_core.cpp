#include <benchmark/benchmark.h>

#include "tap/adapt.hpp"
#include "tap/lora.hpp"
#include "tap/losses.hpp"
#include "tap/ops.hpp"
#include "tap/refnet.hpp"

using namespace tap;

namespace {

Tensor random(const Shape& shape, Rng& rng, bool grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(shape, std::move(v), grad);
}

ModelState model_for(int variant) {
  ModelConfig c;
  c.variant = variant == 0 ? EncoderVariant::kConv : EncoderVariant::kAttention;
  return ModelState::init(c);
}

Episode bench_episode(std::size_t k) {
  return sample_episode(synth::FoldSplit::make(0), EpisodeSpec{.n_way = 2, .k_shot = k}, 42);
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random({n, n}, rng), b = random({n, n}, rng);
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  auto a = random({n, n}, rng, true), b = random({n, n}, rng, true);
  for (auto _ : state) {
    backward(ops::sum(ops::matmul(a, b)));
    a.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(64);

static void BM_AdaptedForward(benchmark::State& state) {
  const auto r = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const auto x = random({256, 32}, rng), w = random({32, 32}, rng);
  const LoraAdapter a{"w", random({32, r}, rng), random({r, 32}, rng), 1.0};
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(adapted_forward(x, w, a));
}
BENCHMARK(BM_AdaptedForward)->RangeMultiplier(2)->Range(2, 32);

static void BM_Encode(benchmark::State& state) {
  const auto model = model_for(static_cast<int>(state.range(0)));
  Rng rng(4);
  const auto img = random({3, 32, 32}, rng);
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(encode(model, img));
}
BENCHMARK(BM_Encode)->Arg(0)->Arg(1)->ArgNames({"attention"});

static void BM_FocalLoss(benchmark::State& state) {
  Rng rng(5);
  const auto logits = random({3, 32, 32}, rng);
  std::vector<double> m(32 * 32);
  for (auto& v : m) v = static_cast<double>(rng.index(3));
  const Tensor mask({32, 32}, m);
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(focal_loss(logits, mask, {}));
}
BENCHMARK(BM_FocalLoss);

static void BM_Adapt(benchmark::State& state) {
  const auto model = model_for(0);
  const auto ep = bench_episode(5);
  AdaptConfig cfg;
  cfg.method = state.range(0) == 0 ? Method::kTap : Method::kDecoderFt;
  cfg.iterations = 1;
  for (auto _ : state) benchmark::DoNotOptimize(adapt(model, ep, cfg));
  state.SetLabel(std::string(to_string(cfg.method)) + " 2w5s T=1");
}
BENCHMARK(BM_Adapt)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_PredictQuery(benchmark::State& state) {
  const auto model = model_for(0);
  const auto ep = bench_episode(5);
  const AdaptedModel plain{model.clone(), std::nullopt};
  for (auto _ : state) benchmark::DoNotOptimize(predict_query(plain, ep));
}
BENCHMARK(BM_PredictQuery)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
