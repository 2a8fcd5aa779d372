#include <random>

#include <benchmark/benchmark.h>

#include "physfed/autodiff.hpp"
#include "physfed/ctphys.hpp"
#include "physfed/model.hpp"
#include "physfed/objective.hpp"
#include "physfed/phantom.hpp"

using namespace physfed;

namespace {

ImageGrid phantom_slice(int n) {
  const auto slices = generate_patient(2024, BodyPart::Abdomen, 1, 0.5 * n);
  return rasterize(slices[0], n, 1.0).image;
}

ad::Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  ad::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

ModelConfig desk_model(int n) {
  ModelConfig cfg;
  cfg.channels = 32;
  cfg.report_dim = 64;
  cfg.hidden_dim = 32;
  cfg.code_dim = 16;
  cfg.n_heads = 4;
  cfg.token_count = 8;
  cfg.image_size = n;
  return cfg;
}

}  // namespace

static void BM_ForwardProject(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto img = phantom_slice(n);
  const auto geo = derive_geometry(Protocol{360, 768, 1.0, 1.2, 500, 400, 1e5}, n);
  for (auto _ : state) benchmark::DoNotOptimize(forward_project(img, geo));
  state.SetItemsProcessed(state.iterations() * geo.views() * geo.bins());
}
BENCHMARK(BM_ForwardProject)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_FbpReconstruct(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto geo = derive_geometry(Protocol{360, 768, 1.0, 1.2, 500, 400, 1e5}, n);
  const auto sino = forward_project(phantom_slice(n), geo);
  for (auto _ : state) benchmark::DoNotOptimize(fbp_reconstruct(sino, geo));
}
BENCHMARK(BM_FbpReconstruct)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_SimulateLowDose(benchmark::State& state) {
  Sinogram clean(360, 768);
  std::fill(clean.data.begin(), clean.data.end(), 1.0);
  const NoiseConfig noise{1e5, 10.0, 1.0};
  for (auto _ : state) benchmark::DoNotOptimize(simulate_low_dose(clean, noise, 7));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(clean.data.size()));
}
BENCHMARK(BM_SimulateLowDose)->Unit(benchmark::kMillisecond);

static void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const auto x = random_tensor({c, 64, 64}, 1);
  const auto w = random_tensor({c, c, 3, 3}, 2);
  const auto b = random_tensor({c}, 3);
  for (auto _ : state) {
    ad::Tape tape;
    const auto out = ad::conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b));
    benchmark::DoNotOptimize(tape.backward(ad::mean(out)));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_ModelPredict(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto cfg = desk_model(n);
  const auto params = init_params(cfg, 5, {1});
  const auto x = normalize_image(phantom_slice(n));
  const NormalizedProtocol g{};
  std::vector<double> f(static_cast<std::size_t>(cfg.report_dim), 0.125);
  for (auto _ : state) benchmark::DoNotOptimize(predict(params, cfg, x, g, f, 1, {}));
}
BENCHMARK(BM_ModelPredict)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Ssim(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = normalize_image(phantom_slice(n));
  auto b = a;
  for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = std::min(1.0, b.data[i] + 0.01 * static_cast<double>(i % 7));
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
