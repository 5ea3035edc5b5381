#include "cmi/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "cmi/errors.hpp"
#include "cmi/parallel.hpp"
#include "cmi/rng.hpp"
#include "cmi/stats.hpp"

namespace cmi {

namespace {

template <typename Fn>
auto stage(const char* label, Fn&& fn) {
  try {
    return fn();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(label, e.what());
  }
}

}  // namespace

TrialDataset prepare_dataset(const TrialDataset& d, const Pipeline& p) {
  return stage("prepare", [&] {
    TrialDataset prepared = p.strategy ? with_strategy(d, *p.strategy) : d;
    require_valid(prepared);
    if (p.strategy && is_reference_based(*p.strategy)) {
      const bool any_ice = std::any_of(prepared.subjects.begin(), prepared.subjects.end(),
                                       [](const Subject& s) { return s.ice.has_value(); });
      if (!any_ice)
        throw Error("reference-based strategy requires ICE records");
    }
    if (p.cov_spec.grouping == CovarianceSpec::Grouping::by_group) {
      const bool any_ref =
          std::any_of(prepared.subjects.begin(), prepared.subjects.end(), [](const Subject& s) {
            return s.ice && is_reference_based(s.ice->strategy);
          });
      if (any_ref)
        throw Error(
            "reference-based imputation with group-specific covariance "
            "matrices is not supported; fit a shared covariance");
    }
    return prepared;
  });
}

MmrmFit fit_imputation_model(const TrialDataset& prepared, const Pipeline& p) {
  return stage("fit", [&] {
    const TrialDataset masked = mask_for_imputation(prepared);
    MmrmFit fit = fit_reml(masked, p.mean_spec, p.cov_spec, p.mmrm);
    if (!fit.converged) {
      std::ostringstream msg;
      msg << "REML did not converge within " << fit.iterations << " iterations";
      throw Error(msg.str());
    }
    return fit;
  });
}

EffectEstimate estimate_with_fit(const TrialDataset& prepared, const MmrmFit& fit,
                                 const Pipeline& p) {
  ImputedDataset completed = stage("impute", [&] {
    const DatasetImputer imputer(prepared, fit);
    return imputer.conditional_mean();
  });
  if (p.delta)
    completed = stage("delta", [&] { return apply_delta(completed, *p.delta); });
  return stage("analyze", [&] { return fit_ancova(completed, p.ancova); });
}

namespace {

bool dataset_complete(const TrialDataset& d) {
  for (const auto& s : d.subjects)
    for (const auto& y : s.outcomes)
      if (!y.has_value()) return false;
  return true;
}

}  // namespace

PipelineRun run_pipeline_detailed(const TrialDataset& d, const Pipeline& p) {
  const TrialDataset prepared = prepare_dataset(d, p);
  PipelineRun run;
  if (dataset_complete(prepared)) {
    ImputedDataset completed = as_completed(prepared);
    if (p.delta)
      completed = stage("delta", [&] { return apply_delta(completed, *p.delta); });
    run.estimate = stage("analyze", [&] { return fit_ancova(completed, p.ancova); });
    return run;
  }
  run.fit = fit_imputation_model(prepared, p);
  run.estimate = estimate_with_fit(prepared, *run.fit, p);
  return run;
}

EffectEstimate run_pipeline(const TrialDataset& d, const Pipeline& p) {
  return run_pipeline_detailed(d, p).estimate;
}

double jackknife_se(const std::vector<double>& leave_one_out) {
  const std::size_t n = leave_one_out.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  double mean = 0.0;
  for (const double v : leave_one_out) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (const double v : leave_one_out) ss += (v - mean) * (v - mean);
  return std::sqrt((static_cast<double>(n) - 1.0) / static_cast<double>(n) * ss);
}

JackknifeResult jackknife(const TrialDataset& d, const Pipeline& p, int jobs) {
  if (d.num_subjects() < 2) throw Error("jackknife requires at least two subjects");
  const TrialDataset prepared = prepare_dataset(d, p);
  const PipelineRun full = run_pipeline_detailed(prepared, Pipeline{
      p.mean_spec, p.cov_spec, std::nullopt, p.ancova, p.delta, p.mmrm});

  JackknifeResult result;
  result.theta_hat = full.estimate.theta;

  Pipeline loo_pipeline = p;
  loo_pipeline.strategy = std::nullopt;  // already applied
  if (full.fit) loo_pipeline.mmrm.init_sigma = full.fit->sigma;

  const int n = prepared.num_subjects();
  result.leave_one_out.assign(static_cast<std::size_t>(n), 0.0);
  parallel_for(n, jobs, [&](int i) {
    try {
      const TrialDataset loo = without_subject(prepared, i);
      result.leave_one_out[static_cast<std::size_t>(i)] = run_pipeline(loo, loo_pipeline).theta;
    } catch (const std::exception& e) {
      throw PipelineError("jackknife",
                          "leave-one-out fit failed for subject " +
                              prepared.subjects[static_cast<std::size_t>(i)].id + ": " + e.what());
    }
  });
  result.se_jack = jackknife_se(result.leave_one_out);
  return result;
}

namespace {

TrialDataset resample_subjects(const TrialDataset& d, RngStream& stream, bool stratify) {
  TrialDataset out;
  out.grid = d.grid;
  out.covariate_names = d.covariate_names;
  const int n = d.num_subjects();
  out.subjects.reserve(static_cast<std::size_t>(n));
  auto push_copy = [&](int index, int copy_number) {
    Subject s = d.subjects[static_cast<std::size_t>(index)];
    s.id += "*" + std::to_string(copy_number);
    out.subjects.push_back(std::move(s));
  };
  if (!stratify) {
    for (int k = 0; k < n; ++k) push_copy(stream.uniform_int(n), k);
    return out;
  }
  std::vector<int> control, intervention;
  for (int i = 0; i < n; ++i)
    (d.subjects[static_cast<std::size_t>(i)].group == Group::control ? control : intervention)
        .push_back(i);
  int k = 0;
  for (const auto* pool : {&control, &intervention})
    for (std::size_t c = 0; c < pool->size(); ++c)
      push_copy((*pool)[static_cast<std::size_t>(stream.uniform_int(static_cast<int>(pool->size())))], k++);
  return out;
}

}  // namespace

BootstrapResult bootstrap(const TrialDataset& d, const Pipeline& p, int b,
                          std::uint64_t seed, int jobs, bool stratify_by_group) {
  if (b < 1) throw Error("bootstrap requires B >= 1");
  const TrialDataset prepared = prepare_dataset(d, p);
  const PipelineRun full = run_pipeline_detailed(prepared, Pipeline{
      p.mean_spec, p.cov_spec, std::nullopt, p.ancova, p.delta, p.mmrm});

  BootstrapResult result;
  result.theta_hat = full.estimate.theta;
  result.b = b;
  result.seed = seed;
  result.draws.assign(static_cast<std::size_t>(b), 0.0);

  Pipeline rep_pipeline = p;
  rep_pipeline.strategy = std::nullopt;
  if (full.fit) rep_pipeline.mmrm.init_sigma = full.fit->sigma;

  constexpr int kMaxAttempts = 100;
  std::vector<int> attempts(static_cast<std::size_t>(b), 0);
  parallel_for(b, jobs, [&](int rep) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      RngStream stream(derive_seed(seed, static_cast<std::uint64_t>(rep),
                                   static_cast<std::uint64_t>(attempt)));
      const TrialDataset resampled = resample_subjects(prepared, stream, stratify_by_group);
      try {
        result.draws[static_cast<std::size_t>(rep)] = run_pipeline(resampled, rep_pipeline).theta;
        attempts[static_cast<std::size_t>(rep)] = attempt;
        return;
      } catch (const std::exception&) {
        // failed fit: replace with a fresh resample
      }
    }
    throw PipelineError("bootstrap", "replicate " + std::to_string(rep) +
                                         " failed " + std::to_string(kMaxAttempts) + " times");
  });

  result.replacements = 0;
  for (const int a : attempts) result.replacements += a;
  if (result.replacements > 0.001 * b) {
    std::ostringstream msg;
    msg << "bootstrap replaced " << result.replacements << " of " << b
        << " resamples (more than 0.1%); the fit looks systematically unstable";
    throw Error(msg.str());
  }

  if (b == 1) {
    result.se_boot = std::numeric_limits<double>::quiet_NaN();
  } else {
    double mean = 0.0;
    for (const double v : result.draws) mean += v;
    mean /= b;
    double ss = 0.0;
    for (const double v : result.draws) ss += (v - mean) * (v - mean);
    result.se_boot = std::sqrt(ss / (b - 1));
  }
  return result;
}

std::pair<double, double> percentile_ci(const BootstrapResult& r, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("percentile_ci: alpha must be in (0,1)");
  const int b = static_cast<int>(r.draws.size());
  const double rank_lo = (b + 1) * alpha / 2.0;
  const double rank_hi = (b + 1) * (1.0 - alpha / 2.0);
  if (rank_lo < 1.0 || rank_hi > static_cast<double>(b))
    throw Error("percentile_ci: B too small for the requested alpha");
  std::vector<double> sorted = r.draws;
  std::sort(sorted.begin(), sorted.end());
  auto order_stat = [&](double rank) {
    const int k = static_cast<int>(std::floor(rank));
    const double frac = rank - k;
    const double lower = sorted[static_cast<std::size_t>(k - 1)];
    if (frac == 0.0 || k >= b) return lower;
    return lower + frac * (sorted[static_cast<std::size_t>(k)] - lower);
  };
  return {order_stat(rank_lo), order_stat(rank_hi)};
}

double bootstrap_pvalue(const BootstrapResult& r, double theta0, Direction direction) {
  const double b = static_cast<double>(r.draws.size());
  long long below = 0, above = 0;
  for (const double v : r.draws) {
    if (v < theta0) ++below;
    if (v > theta0) ++above;
  }
  const double p_greater = (static_cast<double>(below) + 1.0) / (b + 1.0);
  const double p_less = (static_cast<double>(above) + 1.0) / (b + 1.0);
  switch (direction) {
    case Direction::greater: return p_greater;
    case Direction::less: return p_less;
    case Direction::two_sided: return std::min(1.0, 2.0 * std::min(p_greater, p_less));
  }
  return 1.0;
}

InferenceResult normal_inference(double estimate, double se, double alpha,
                                 const std::string& method, double theta0) {
  InferenceResult res;
  res.estimate = estimate;
  res.se = se;
  res.alpha = alpha;
  res.method = method;
  const double z = stats::norm_quantile(1.0 - alpha / 2.0);
  res.ci_low = estimate - z * se;
  res.ci_high = estimate + z * se;
  if (se > 0.0) {
    const double zstat = (estimate - theta0) / se;
    res.p_two_sided = 2.0 * (1.0 - stats::norm_cdf(std::fabs(zstat)));
  } else {
    res.p_two_sided = estimate == theta0 ? 1.0 : 0.0;
  }
  return res;
}

PbAccuracy pb_accuracy(PbMethod method, double p_inf, int b, double tau) {
  if (!(p_inf > 0.0 && p_inf < 1.0)) throw Error("pb_accuracy: p_inf must be in (0,1)");
  if (b < 2) throw Error("pb_accuracy: B must be at least 2");
  PbAccuracy out;
  if (method == PbMethod::normal) {
    const double q = stats::norm_quantile(p_inf);
    const double df = b - 1;
    auto p_at = [&](double z) { return stats::norm_cdf(q / std::sqrt(z / df)); };
    const double z_lo = stats::chi2_quantile(0.025, df);
    const double z_hi = stats::chi2_quantile(0.975, df);
    out.lo = std::min(p_at(z_lo), p_at(z_hi));
    out.hi = std::max(p_at(z_lo), p_at(z_hi));
    const double t = stats::norm_quantile(tau);
    if (q == 0.0) {
      out.prob_at_or_below = (0.5 <= tau) ? 1.0 : 0.0;
    } else if (q < 0.0) {
      // p_B <= tau  <=>  q / sqrt(Z/df) <= t
      out.prob_at_or_below =
          t >= 0.0 ? 1.0 : stats::chi2_cdf(df * (q / t) * (q / t), df);
    } else {
      out.prob_at_or_below =
          t <= 0.0 ? 0.0 : 1.0 - stats::chi2_cdf(df * (q / t) * (q / t), df);
    }
  } else {
    const long long z_lo = stats::binom_quantile(0.025, b, p_inf);
    const long long z_hi = stats::binom_quantile(0.975, b, p_inf);
    out.lo = (static_cast<double>(z_lo) + 1.0) / (b + 1.0);
    out.hi = (static_cast<double>(z_hi) + 1.0) / (b + 1.0);
    const long long k = static_cast<long long>(std::floor(tau * (b + 1) - 1.0 + 1e-9));
    out.prob_at_or_below = stats::binom_cdf(k, b, p_inf);
  }
  return out;
}

}  // namespace cmi
