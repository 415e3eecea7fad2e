#include <benchmark/benchmark.h>

#include <sfd/sfd.hpp>

using namespace sfd;

namespace {

EpsNet default_net() {
  Rng rng(1);
  return EpsNet(NetArch{}, rng);
}

void BM_Forward(benchmark::State& state) {
  const EpsNet net = default_net();
  Rng rng(2);
  const Mat x = rng.normal_matrix(2, state.range(0));
  const Vec t = Vec::Constant(state.range(0), 1.5);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, t, {}));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(128)->Arg(1024);

void BM_ForwardBackward(benchmark::State& state) {
  const EpsNet net = default_net();
  Rng rng(3);
  const Mat x = rng.normal_matrix(2, state.range(0));
  const Mat adjoint = rng.normal_matrix(2, state.range(0));
  const Vec t = Vec::Constant(state.range(0), 1.5);
  Vec grad = Vec::Zero(net.param_count());
  for (auto _ : state) {
    ForwardCache cache;
    net.forward(x, t, {}, &cache);
    net.backward(cache, adjoint, grad);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(128)->Arg(1024);

void BM_SolverStep(benchmark::State& state) {
  const EpsNet net = default_net();
  const auto kind = static_cast<SolverKind>(state.range(0));
  Rng rng(4);
  const Mat x = 10.0 * rng.normal_matrix(2, 256);
  EpsFunction eps(net);
  for (auto _ : state) {
    MultistepHistory history;
    benchmark::DoNotOptimize(solver_step(kind, eps, x, 10.0, 5.0, history));
  }
  state.SetLabel(std::string(to_string(kind)));
}
BENCHMARK(BM_SolverStep)->DenseRange(0, 4);

void BM_SampleThreeSteps(benchmark::State& state) {
  const EpsNet net = default_net();
  const auto schedule = make_polynomial(3, 0.006, 80.0, 7.0);
  SampleOptions o;
  o.afs = true;
  o.chains = state.range(0);
  for (auto _ : state) {
    Rng rng(5);
    benchmark::DoNotOptimize(sample(net, schedule, o, rng));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SampleThreeSteps)->Arg(1000)->Arg(10000);

void BM_SlicedWasserstein(benchmark::State& state) {
  Rng rng(6);
  const Mat a = rng.normal_matrix(2, state.range(0));
  const Mat b = rng.normal_matrix(2, state.range(0));
  for (auto _ : state) {
    Rng proj(7);
    benchmark::DoNotOptimize(sliced_wasserstein(a, b, 128, proj));
  }
}
BENCHMARK(BM_SlicedWasserstein)->Arg(1000)->Arg(10000);

// One SFD iteration at the default batch: teacher pass plus N student updates.
void BM_DistillIteration(benchmark::State& state) {
  const EpsNet teacher = default_net();
  DistillConfig cfg;
  cfg.budget = cfg.batch;
  for (auto _ : state) {
    Rng rng(8);
    benchmark::DoNotOptimize(distill_sfd(teacher, cfg, rng));
  }
}
BENCHMARK(BM_DistillIteration)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
