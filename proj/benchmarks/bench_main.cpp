#include <benchmark/benchmark.h>

#include "qfat/gmm.hpp"
#include "qfat/modes.hpp"
#include "qfat/policy.hpp"

namespace qfat {
namespace {

PolicyConfig bench_config(int layers, int embed) {
  PolicyConfig c;
  c.state_dim = 60;
  c.action_dim = 9;
  c.mixtures = 4;
  c.state_history = 10;
  c.layers = layers;
  c.heads = 8;
  c.embed_dim = embed;
  c.dropout = 0.0;
  return c;
}

Window context(const PolicyConfig& c) {
  Window w;
  w.states = Eigen::MatrixXd::Constant(c.state_history, c.state_dim, 0.1);
  w.goals.resize(0, c.state_dim);
  return w;
}

GmmParams bench_gmm(int k, int m) {
  Rng rng(3);
  GmmParams g;
  g.weights = Eigen::VectorXd::Constant(k, 1.0 / k);
  g.means = Eigen::MatrixXd::NullaryExpr(k, m, [&] { return rng.normal(); });
  g.stddevs = Eigen::MatrixXd::Constant(k, m, 0.5);
  return g;
}

void BM_BackboneForward(benchmark::State& state) {
  const PolicyConfig c = bench_config(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  Policy p(c);
  Rng rng(1);
  p.init(rng);
  const Window w = context(c);
  for (auto _ : state) benchmark::DoNotOptimize(p.backbone_features(w));
}
BENCHMARK(BM_BackboneForward)->Args({2, 32})->Args({6, 128});

void BM_HeadDecode(benchmark::State& state) {
  const PolicyConfig c = bench_config(6, 128);
  Policy p(c);
  Rng rng(1);
  p.init(rng);
  const auto features = p.backbone_features(context(c));
  for (auto _ : state) benchmark::DoNotOptimize(p.decode_head(features));
}
BENCHMARK(BM_HeadDecode);

void BM_SampleVanilla(benchmark::State& state) {
  const GmmParams g = bench_gmm(4, 9);
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(sample_vanilla(g, rng, 1));
}
BENCHMARK(BM_SampleVanilla);

void BM_SampleScaled(benchmark::State& state) {
  const GmmParams g = bench_gmm(4, 9);
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(sample_vanilla(scale_variances(g, 1e-6), rng, 1));
}
BENCHMARK(BM_SampleScaled);

void BM_FindModes(benchmark::State& state) {
  const GmmParams g = bench_gmm(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const ModeFinderConfig cfg;
  for (auto _ : state) {
    Rng rng(4);
    benchmark::DoNotOptimize(find_modes(g, cfg, rng));
  }
}
BENCHMARK(BM_FindModes)->Args({4, 2})->Args({4, 9})->Args({8, 2});

void BM_Evaluate(benchmark::State& state) {
  const GmmParams g = bench_gmm(8, static_cast<int>(state.range(0)));
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(g.dim(), 0.2);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(g, x));
}
BENCHMARK(BM_Evaluate)->Arg(2)->Arg(9);

}  // namespace
}  // namespace qfat

BENCHMARK_MAIN();
