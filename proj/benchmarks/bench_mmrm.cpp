#include <benchmark/benchmark.h>

#include "cmi/inference.hpp"
#include "cmi/simgen.hpp"

namespace {

cmi::TrialDataset make_trial(int n_per_group) {
  cmi::SimConfig cfg;
  cfg.n_per_group = n_per_group;
  return cmi::generate_trial(cfg, cmi::Hypothesis::null_hypothesis, 42);
}

void bm_fit_reml_cold(benchmark::State& state) {
  const auto d = make_trial(static_cast<int>(state.range(0)));
  cmi::Pipeline p = cmi::study_pipeline();
  p.strategy = cmi::Strategy::j2r;
  const auto prepared = cmi::prepare_dataset(d, p);
  for (auto _ : state) {
    benchmark::DoNotOptimize(cmi::fit_imputation_model(prepared, p));
  }
}
BENCHMARK(bm_fit_reml_cold)->Arg(50)->Arg(100);

void bm_fit_reml_warm(benchmark::State& state) {
  const auto d = make_trial(static_cast<int>(state.range(0)));
  cmi::Pipeline p = cmi::study_pipeline();
  p.strategy = cmi::Strategy::j2r;
  const auto prepared = cmi::prepare_dataset(d, p);
  const auto full = cmi::fit_imputation_model(prepared, p);
  p.mmrm.init_sigma = full.sigma;
  const auto loo = cmi::without_subject(prepared, 0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(cmi::fit_imputation_model(loo, p));
  }
}
BENCHMARK(bm_fit_reml_warm)->Arg(50)->Arg(100);

void bm_jackknife(benchmark::State& state) {
  const auto d = make_trial(50);
  cmi::Pipeline p = cmi::study_pipeline();
  p.strategy = cmi::Strategy::j2r;
  for (auto _ : state) {
    benchmark::DoNotOptimize(cmi::jackknife(d, p, 1));
  }
}
BENCHMARK(bm_jackknife)->Unit(benchmark::kMillisecond);

}  // namespace
