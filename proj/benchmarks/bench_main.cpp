#include "afn/audit.hpp"
#include "afn/convae_som.hpp"
#include "afn/explain.hpp"
#include "afn/ifm.hpp"
#include "afn/risk.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace afn;

namespace {

Matrix gaussian(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  return m;
}

// Small untrained model; inference cost does not depend on the weights.
const ifm::AfnModel& bench_model() {
  static const ifm::AfnModel model = [] {
    const auto set = generate_synthetic(benchmark_synth_config(40, 91, 8, 3, 0.95, 1));
    ifm::ModelConfig cfg = ifm::ModelConfig::desk(8);
    const auto [norm, stats] = zscore_fit_apply(set);
    tm::TmConfig tc = cfg.tm;
    tc.epochs = 1;
    tc.cond_warmup_epochs = 1;
    tc.mse_warmup_epochs = 1;
    return ifm::AfnModel(cfg, tm::pretrain_tm(norm, tc), stats, set.feature_names);
  }();
  return model;
}

}  // namespace

static void BM_RunsTest(benchmark::State& state) {
  const Matrix x = gaussian(state.range(0), 1, 1);
  const std::vector<double> v(x.data(), x.data() + x.size());
  for (auto _ : state) benchmark::DoNotOptimize(audit::runs_test(v));
}
BENCHMARK(BM_RunsTest)->Arg(13)->Arg(91)->Arg(1000);

static void BM_SomAssign(benchmark::State& state) {
  const Matrix z = gaussian(1000, 16, 2), mu = gaussian(64, 16, 3);
  for (auto _ : state) benchmark::DoNotOptimize(som::som_assign_rows(z, mu));
}
BENCHMARK(BM_SomAssign);

static void BM_ExactShapley(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const Matrix bg = gaussian(100, d, 4);
  const Matrix w = gaussian(d, 1, 5);
  const explain::BatchFn f = [&](const Matrix& x) -> Vector { return (x * w).array().tanh(); };
  const ad::RowVector x = gaussian(1, d, 6);
  for (auto _ : state) benchmark::DoNotOptimize(explain::exact_shapley(f, x, bg));
}
BENCHMARK(BM_ExactShapley)->Arg(4)->Arg(8)->Arg(10);

static void BM_Forecast(benchmark::State& state) {
  const auto& model = bench_model();
  const Matrix hist = gaussian(85, 8, 7);
  for (auto _ : state) benchmark::DoNotOptimize(ifm::forecast(model, hist, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_Forecast)->Arg(6)->Arg(42);

static void BM_BurstScan(benchmark::State& state) {
  std::vector<bool> flags(200);
  std::mt19937_64 rng(8);
  for (size_t i = 0; i < flags.size(); ++i) flags[i] = rng() % 3 == 0;
  for (auto _ : state) benchmark::DoNotOptimize(risk::first_burst(flags, 2));
}
BENCHMARK(BM_BurstScan);
BENCHMARK_MAIN();
