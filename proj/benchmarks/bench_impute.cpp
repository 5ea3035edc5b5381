#include <benchmark/benchmark.h>

#include "cmi/impute.hpp"
#include "cmi/inference.hpp"
#include "cmi/simgen.hpp"

namespace {

void bm_conditional_mean_dataset(benchmark::State& state) {
  cmi::SimConfig cfg;
  cfg.n_per_group = static_cast<int>(state.range(0));
  const auto d = cmi::generate_trial(cfg, cmi::Hypothesis::alternative, 7);
  cmi::Pipeline p = cmi::study_pipeline();
  p.strategy = cmi::Strategy::cir;
  const auto prepared = cmi::prepare_dataset(d, p);
  const auto fit = cmi::fit_imputation_model(prepared, p);
  for (auto _ : state) {
    const cmi::DatasetImputer imputer(prepared, fit);
    benchmark::DoNotOptimize(imputer.conditional_mean());
  }
}
BENCHMARK(bm_conditional_mean_dataset)->Arg(100)->Arg(500);

void bm_random_imputation_pass(benchmark::State& state) {
  cmi::SimConfig cfg;
  cfg.n_per_group = 100;
  const auto d = cmi::generate_trial(cfg, cmi::Hypothesis::alternative, 7);
  cmi::Pipeline p = cmi::study_pipeline();
  p.strategy = cmi::Strategy::j2r;
  const auto prepared = cmi::prepare_dataset(d, p);
  const auto fit = cmi::fit_imputation_model(prepared, p);
  const cmi::DatasetImputer imputer(prepared, fit);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(imputer.random(seed++));
  }
}
BENCHMARK(bm_random_imputation_pass);

}  // namespace
