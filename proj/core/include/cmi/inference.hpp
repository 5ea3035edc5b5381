#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cmi/analysis.hpp"
#include "cmi/dataset.hpp"
#include "cmi/impute.hpp"
#include "cmi/mmrm.hpp"

namespace cmi {

/// End-to-end estimation recipe: mask -> REML fit -> conditional mean
/// imputation -> optional delta adjustment -> ANCOVA. The conditional mean
/// path is fully deterministic.
struct Pipeline {
  MeanModelSpec mean_spec;
  CovarianceSpec cov_spec;
  /// Imputation strategy applied to every ICE record; MAR drops the records.
  /// nullopt keeps the per-record strategies from the dataset.
  std::optional<Strategy> strategy;
  AncovaSpec ancova;
  std::optional<DeltaAdjustment> delta;
  MmrmOptions mmrm;
};

/// Runs the four pipeline steps; errors are rethrown as PipelineError with a
/// stage label. A dataset without missing outcomes skips the model fit
/// entirely (conditional mean imputation is the identity there).
EffectEstimate run_pipeline(const TrialDataset& d, const Pipeline& p);

struct PipelineRun {
  EffectEstimate estimate;
  /// Absent when the dataset was complete and no model was fitted.
  std::optional<MmrmFit> fit;
};
PipelineRun run_pipeline_detailed(const TrialDataset& d, const Pipeline& p);

/// Pipeline pieces for callers that reuse one REML fit across several
/// imputation strategies (the masked data of all reference-based strategies
/// coincide, so their fits do).
TrialDataset prepare_dataset(const TrialDataset& d, const Pipeline& p);
MmrmFit fit_imputation_model(const TrialDataset& prepared, const Pipeline& p);
EffectEstimate estimate_with_fit(const TrialDataset& prepared, const MmrmFit& fit,
                                 const Pipeline& p);

struct JackknifeResult {
  double theta_hat = 0.0;
  std::vector<double> leave_one_out;
  double se_jack = 0.0;
  std::vector<std::string> failures;  // kept for the JSON interface; a failed
                                      // leave-one-out fit aborts instead
};

/// Leave-one-out resampling; the n refits warm-start from the full-data
/// covariance estimate and may run in parallel. A failed leave-one-out fit
/// aborts with the subject id.
JackknifeResult jackknife(const TrialDataset& d, const Pipeline& p, int jobs = 1);

/// se_jack recomputed from the stored leave-one-out estimates.
double jackknife_se(const std::vector<double>& leave_one_out);

struct BootstrapResult {
  double theta_hat = 0.0;
  std::vector<double> draws;
  double se_boot = 0.0;  // NaN when B == 1
  int b = 0;
  std::uint64_t seed = 0;
  int replacements = 0;  // resamples redrawn after a failed fit
};

/// Subject-level bootstrap with replacement. Replicate b draws from a
/// substream keyed by (seed, b, attempt), so results are reproducible for a
/// fixed seed regardless of the worker count; a failed fit redraws the
/// replicate (counted), and more than 0.1% * B replacements aborts.
BootstrapResult bootstrap(const TrialDataset& d, const Pipeline& p, int b,
                          std::uint64_t seed, int jobs = 1, bool stratify_by_group = false);

/// Percentile interval from the ordered draws at ranks (B+1)*alpha/2 and
/// (B+1)*(1-alpha/2), interpolating non-integer ranks linearly.
std::pair<double, double> percentile_ci(const BootstrapResult& r, double alpha);

enum class Direction { greater, less, two_sided };

/// Percentile-inversion bootstrap p-value: (#{draws < theta0}+1)/(B+1) for
/// the greater-alternative, mirrored for less, twice the smaller one-sided
/// value (capped at 1) for two_sided.
double bootstrap_pvalue(const BootstrapResult& r, double theta0, Direction direction);

struct InferenceResult {
  double estimate = 0.0;
  double se = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  double p_two_sided = 1.0;
  std::string method;
  double alpha = 0.05;
};

/// Normal-approximation CI and two-sided test of theta = theta0.
InferenceResult normal_inference(double estimate, double se, double alpha,
                                 const std::string& method, double theta0 = 0.0);

enum class PbMethod { normal, percentile };

struct PbAccuracy {
  double lo = 0.0, hi = 0.0;      // central 95% range of p_B
  double prob_at_or_below = 0.0;  // P(p_B <= tau)
};

/// Finite-B accuracy of bootstrap p-values: distribution of p_B given the
/// theoretical p_inf, for the normal-approximation method (chi-square mixing
/// of the estimated standard error) and the inverted percentile method
/// (binomial counts).
PbAccuracy pb_accuracy(PbMethod method, double p_inf, int b, double tau = 0.025);

}  // namespace cmi
