#include "cmi/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "cmi/csv.hpp"
#include "cmi/errors.hpp"
#include "cmi/parallel.hpp"
#include "cmi/rng.hpp"
#include "cmi/stats.hpp"

namespace cmi {

std::vector<std::string> SimConfig::validate() const {
  std::vector<std::string> out;
  if (n_per_group < 1) out.push_back("n_per_group must be at least 1");
  if (num_visits < 2) out.push_back("num_visits must be at least 2");
  if (last_month <= 0) out.push_back("last_month must be positive");
  for (const auto& [name, v] :
       {std::pair<const char*, double>{"re_sd_intercept", re_sd_intercept},
        {"re_sd_slope", re_sd_slope},
        {"resid_sd", resid_sd}})
    if (v <= 0) out.push_back(std::string(name) + " must be positive");
  if (!(std::fabs(re_corr) < 1)) out.push_back("|re_corr| must be below 1");
  for (const auto& [name, v] :
       {std::pair<const char*, double>{"disc_base_prob_control", disc_base_prob_control},
        {"disc_base_prob_intervention", disc_base_prob_intervention},
        {"dropout_prob_at_disc", dropout_prob_at_disc}})
    if (v < 0 || v > 1) out.push_back(std::string(name) + " must be in [0,1]");
  if (disc_odds_ratio <= 0) out.push_back("disc_odds_ratio must be positive");
  for (const auto& [name, v] :
       {std::pair<const char*, double>{"disc_odds_scale_control", disc_odds_scale_control},
        {"disc_odds_scale_intervention", disc_odds_scale_intervention},
        {"disc_first_visit_odds_scale", disc_first_visit_odds_scale}})
    if (v <= 0) out.push_back(std::string(name) + " must be positive");
  if (active_slope_multiplier < 0) out.push_back("active_slope_multiplier must be >= 0");
  return out;
}

namespace {

struct MeanModel {
  const SimConfig& cfg;
  Hypothesis hyp;

  double control(double month) const {
    return cfg.baseline_mean + cfg.control_change * month / cfg.last_month;
  }
  double on_treatment(Group g, double month) const {
    if (g == Group::control || hyp == Hypothesis::null_hypothesis) return control(month);
    if (month <= cfg.slope_change_month) return control(month);
    const double slope = cfg.control_change / cfg.last_month;
    return control(cfg.slope_change_month) +
           cfg.active_slope_multiplier * slope * (month - cfg.slope_change_month);
  }
  /// Post-discontinuation: control-group increments from the discontinuation
  /// visit onward; the control group itself is unaffected.
  double off_treatment(Group g, double month, double disc_month) const {
    if (g == Group::control) return control(month);
    return on_treatment(g, disc_month) + (control(month) - control(disc_month));
  }
};

}  // namespace

TrialDataset generate_trial(const SimConfig& cfg, Hypothesis hyp, std::uint64_t seed,
                            TrialStats* stats) {
  {
    const auto problems = cfg.validate();
    if (!problems.empty()) {
      std::ostringstream msg;
      msg << "invalid simulation config:";
      for (const auto& p : problems) msg << "\n  " << p;
      throw Error(msg.str());
    }
  }
  const int J = cfg.num_visits;
  TrialDataset d;
  d.grid.baseline_label = "base";
  for (int j = 1; j <= J; ++j) d.grid.labels.push_back("v" + std::to_string(j));
  d.covariate_names = {"base"};

  const MeanModel mean{cfg, hyp};
  const double slope_cross = cfg.re_corr * cfg.re_sd_slope;
  const double slope_resid = cfg.re_sd_slope * std::sqrt(1.0 - cfg.re_corr * cfg.re_corr);
  const double log_or = std::log(cfg.disc_odds_ratio);

  if (stats) *stats = TrialStats{};
  d.subjects.reserve(static_cast<std::size_t>(2 * cfg.n_per_group));
  for (int i = 0; i < 2 * cfg.n_per_group; ++i) {
    const Group group = i < cfg.n_per_group ? Group::control : Group::intervention;
    RngStream stream(derive_seed(seed, static_cast<std::uint64_t>(i)));

    Subject s;
    s.group = group;
    {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%c%04d", group == Group::control ? 'C' : 'I',
                    (i % cfg.n_per_group) + 1);
      s.id = buf;
    }

    const double z1 = stream.normal();
    const double z2 = stream.normal();
    const double intercept = cfg.re_sd_intercept * z1;
    const double slope = slope_cross * z1 + slope_resid * z2;  // per year

    const double baseline = cfg.baseline_mean + intercept + cfg.resid_sd * stream.normal();
    s.covariates["base"] = baseline;

    const double base_prob = group == Group::control ? cfg.disc_base_prob_control
                                                     : cfg.disc_base_prob_intervention;
    const double base_odds = base_prob / (1.0 - base_prob) *
                             (group == Group::control ? cfg.disc_odds_scale_control
                                                      : cfg.disc_odds_scale_intervention);

    int disc_visit = 0;  // 0 = on treatment throughout
    s.outcomes.assign(static_cast<std::size_t>(J), std::nullopt);
    for (int j = 1; j <= J; ++j) {
      const double month = cfg.last_month * j / J;
      const double disc_month = cfg.last_month * disc_visit / J;
      const double mu = disc_visit == 0 ? mean.on_treatment(group, month)
                                        : mean.off_treatment(group, month, disc_month);
      const double y = mu + intercept + slope * month / 12.0 + cfg.resid_sd * stream.normal();
      s.outcomes[static_cast<std::size_t>(j - 1)] = y;

      if (disc_visit == 0) {
        double log_odds = std::log(base_odds) +
                          log_or * std::max(0.0, (y - cfg.disc_anchor) / 10.0);
        if (j == 1) log_odds += std::log(cfg.disc_first_visit_odds_scale);
        const double prob = 1.0 / (1.0 + std::exp(-log_odds));
        if (stream.uniform() < prob) {
          disc_visit = j;
          if (stats)
            ++(group == Group::control ? stats->n_disc_control : stats->n_disc_intervention);
          if (stream.uniform() < cfg.dropout_prob_at_disc) {
            if (stats) ++stats->n_dropout;
            const int first_missing = cfg.dropout_includes_disc_visit ? j : j + 1;
            for (int k = first_missing; k <= J; ++k)
              s.outcomes[static_cast<std::size_t>(k - 1)] = std::nullopt;
            if (disc_visit < J) s.ice = IceRecord{disc_visit, cfg.generated_ice_strategy};
            break;
          }
        }
      }
    }
    if (disc_visit >= 1 && disc_visit < J && !s.ice)
      s.ice = IceRecord{disc_visit, cfg.generated_ice_strategy};
    d.subjects.push_back(std::move(s));
  }
  return d;
}

Pipeline study_pipeline() {
  Pipeline p;
  p.mean_spec = MeanModelSpec::standard({"base"}, /*covariate_by_visit=*/true);
  p.cov_spec.grouping = CovarianceSpec::Grouping::shared;
  p.ancova.target_visit = 0;  // final visit
  p.ancova.dependent = AncovaSpec::Dependent::change_from_baseline;
  p.ancova.covariates = {"base"};
  return p;
}

namespace {

bool family_is_reference(Strategy s) { return is_reference_based(s); }

struct SimOutcome {
  std::vector<RunRecord> records;
};

// One simulated dataset through every (strategy, method). Strategies with
// identical masked data share the REML fits.
SimOutcome run_one_sim(const TrialDataset& d, const StudyOptions& opt, int sim,
                       std::uint64_t sim_seed) {
  SimOutcome out;
  const double z_crit = stats::norm_quantile(1.0 - opt.alpha / 2.0);

  // order strategies into fit families
  std::vector<std::vector<Strategy>> families;
  {
    std::vector<Strategy> mar, ref;
    for (const Strategy s : opt.strategies)
      (family_is_reference(s) ? ref : mar).push_back(s);
    if (!mar.empty()) families.push_back(mar);
    if (!ref.empty()) families.push_back(ref);
  }

  for (const auto& family : families) {
    const Strategy representative = family.front();
    Pipeline pipeline = study_pipeline();
    pipeline.strategy = representative;

    auto fail_family = [&](const std::string& why) {
      for (const Strategy s : family) {
        if (opt.run_jackknife)
          out.records.push_back({sim, s, "jackknife", 0, 0, 1, false, true, why});
        if (opt.run_bootstrap)
          out.records.push_back({sim, s, "bootstrap", 0, 0, 1, false, true, why});
      }
    };

    try {
      const TrialDataset prepared = prepare_dataset(d, pipeline);
      const MmrmFit full_fit = fit_imputation_model(prepared, pipeline);

      std::map<Strategy, TrialDataset> prepared_by_strategy;
      std::map<Strategy, double> theta_hat;
      for (const Strategy s : family) {
        Pipeline ps = pipeline;
        ps.strategy = s;
        prepared_by_strategy.emplace(s, prepare_dataset(d, ps));
        ps.strategy = std::nullopt;
        theta_hat[s] = estimate_with_fit(prepared_by_strategy.at(s), full_fit, ps).theta;
      }

      if (opt.run_jackknife) {
        Pipeline loo_pipeline = pipeline;
        loo_pipeline.strategy = std::nullopt;
        loo_pipeline.mmrm.init_sigma = full_fit.sigma;
        const int n = prepared.num_subjects();
        std::map<Strategy, std::vector<double>> loo_thetas;
        for (const Strategy s : family)
          loo_thetas[s].assign(static_cast<std::size_t>(n), 0.0);
        for (int i = 0; i < n; ++i) {
          const TrialDataset loo_fit_data = without_subject(prepared, i);
          const MmrmFit loo_fit = fit_imputation_model(loo_fit_data, loo_pipeline);
          for (const Strategy s : family) {
            const TrialDataset loo = without_subject(prepared_by_strategy.at(s), i);
            loo_thetas[s][static_cast<std::size_t>(i)] =
                estimate_with_fit(loo, loo_fit, loo_pipeline).theta;
          }
        }
        for (const Strategy s : family) {
          const double se = jackknife_se(loo_thetas[s]);
          const double zstat = se > 0 ? theta_hat[s] / se : std::numeric_limits<double>::infinity();
          const double p = se > 0 ? 2.0 * (1.0 - stats::norm_cdf(std::fabs(zstat))) : 0.0;
          out.records.push_back(
              {sim, s, "jackknife", theta_hat[s], se, p, std::fabs(zstat) > z_crit, false, ""});
        }
      }

      if (opt.run_bootstrap) {
        Pipeline rep_pipeline = pipeline;
        rep_pipeline.strategy = std::nullopt;
        rep_pipeline.mmrm.init_sigma = full_fit.sigma;
        std::map<Strategy, std::vector<double>> draws;
        for (const Strategy s : family)
          draws[s].assign(static_cast<std::size_t>(opt.bootstrap_b), 0.0);
        const int n = prepared.num_subjects();
        for (int rep = 0; rep < opt.bootstrap_b; ++rep) {
          for (int attempt = 0;; ++attempt) {
            if (attempt >= 100) throw Error("bootstrap replicate failed repeatedly");
            RngStream stream(derive_seed(sim_seed,
                                         0x100000000ULL + static_cast<std::uint64_t>(rep),
                                         static_cast<std::uint64_t>(attempt)));
            std::vector<int> idx(static_cast<std::size_t>(n));
            for (int k = 0; k < n; ++k) idx[static_cast<std::size_t>(k)] = stream.uniform_int(n);
            auto resample = [&](const TrialDataset& src) {
              TrialDataset r;
              r.grid = src.grid;
              r.covariate_names = src.covariate_names;
              r.subjects.reserve(static_cast<std::size_t>(n));
              for (int k = 0; k < n; ++k) {
                Subject subj = src.subjects[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
                subj.id += "*" + std::to_string(k);
                r.subjects.push_back(std::move(subj));
              }
              return r;
            };
            try {
              const TrialDataset rep_fit_data = resample(prepared);
              const MmrmFit rep_fit = fit_imputation_model(rep_fit_data, rep_pipeline);
              for (const Strategy s : family)
                draws[s][static_cast<std::size_t>(rep)] =
                    estimate_with_fit(resample(prepared_by_strategy.at(s)), rep_fit, rep_pipeline)
                        .theta;
              break;
            } catch (const std::exception&) {
              // redraw the replicate
            }
          }
        }
        for (const Strategy s : family) {
          double mean = 0.0;
          for (const double v : draws[s]) mean += v;
          mean /= opt.bootstrap_b;
          double ss = 0.0;
          for (const double v : draws[s]) ss += (v - mean) * (v - mean);
          const double se = opt.bootstrap_b > 1
                                ? std::sqrt(ss / (opt.bootstrap_b - 1))
                                : std::numeric_limits<double>::quiet_NaN();
          const double zstat = se > 0 ? theta_hat[s] / se : std::numeric_limits<double>::infinity();
          const double p = se > 0 ? 2.0 * (1.0 - stats::norm_cdf(std::fabs(zstat))) : 0.0;
          out.records.push_back(
              {sim, s, "bootstrap", theta_hat[s], se, p, std::fabs(zstat) > z_crit, false, ""});
        }
      }
    } catch (const std::exception& e) {
      fail_family(e.what());
    }
  }
  return out;
}

}  // namespace

StudyResult run_study(const SimConfig& config, Hypothesis hypothesis,
                      const StudyOptions& options) {
  if (options.n_sims < 1) throw Error("run_study: n_sims must be at least 1");
  std::vector<SimOutcome> outcomes(static_cast<std::size_t>(options.n_sims));
  parallel_for(options.n_sims, options.jobs, [&](int sim) {
    const std::uint64_t sim_seed = derive_seed(options.seed, static_cast<std::uint64_t>(sim));
    const TrialDataset d = generate_trial(config, hypothesis, sim_seed);
    outcomes[static_cast<std::size_t>(sim)] = run_one_sim(d, options, sim, sim_seed);
  });

  StudyResult result;
  for (const auto& o : outcomes)
    result.records.insert(result.records.end(), o.records.begin(), o.records.end());
  // canonical row order: strategies as requested, jackknife before bootstrap
  std::vector<RunRecord> ordered;
  for (const Strategy s : options.strategies)
    for (const char* method : {"jackknife", "bootstrap"})
      for (const auto& r : result.records)
        if (r.strategy == s && r.method == method) ordered.push_back(r);
  result.records = std::move(ordered);
  result.table = summarize(result.records);
  return result;
}

SummaryTable summarize(const std::vector<RunRecord>& records) {
  if (records.empty()) throw Error("summarize: no records");
  SummaryTable table;
  std::vector<std::pair<Strategy, std::string>> keys;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.strategy, r.method);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  for (const auto& [strategy, method] : keys) {
    SummaryRow row;
    row.strategy = strategy;
    row.method = method;
    std::vector<const RunRecord*> ok;
    for (const auto& r : records) {
      if (r.strategy != strategy || r.method != method) continue;
      if (r.failed) {
        ++row.n_fit_failures;
        continue;
      }
      ok.push_back(&r);
    }
    row.n_sims = static_cast<int>(ok.size());
    if (!ok.empty()) {
      double sum = 0.0, sum_se = 0.0, nrej = 0.0;
      for (const auto* r : ok) {
        sum += r->theta;
        sum_se += r->se;
        nrej += r->rejected ? 1.0 : 0.0;
      }
      row.mean_theta = sum / row.n_sims;
      row.mean_se = sum_se / row.n_sims;
      row.rejection_rate = nrej / row.n_sims;
      if (ok.size() > 1) {
        double ss = 0.0;
        for (const auto* r : ok) ss += (r->theta - row.mean_theta) * (r->theta - row.mean_theta);
        row.sd_theta = std::sqrt(ss / (row.n_sims - 1));
      } else {
        row.sd_theta = std::numeric_limits<double>::quiet_NaN();
      }
    }
    table.rows.push_back(row);
  }
  return table;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_summary_text(const SummaryTable& table) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-9s %-10s %12s %12s %12s %12s %8s %10s\n", "strategy",
                "method", "mean_theta", "sd_theta", "mean_se", "reject_rate", "n_sims",
                "failures");
  out << line;
  for (const auto& r : table.rows) {
    std::snprintf(line, sizeof line, "%-9s %-10s %12.4f %12.4f %12.4f %12.4f %8d %10d\n",
                  to_string(r.strategy), r.method.c_str(), r.mean_theta, r.sd_theta, r.mean_se,
                  r.rejection_rate, r.n_sims, r.n_fit_failures);
    out << line;
  }
  return out.str();
}

void write_summary_csv(const SummaryTable& table, std::ostream& out,
                       const std::string& manifest_ref) {
  if (!manifest_ref.empty()) out << "# manifest: " << manifest_ref << "\n";
  out << "strategy,method,mean_theta,sd_theta,mean_se,rejection_rate,n_sims,n_fit_failures\n";
  for (const auto& r : table.rows)
    out << to_string(r.strategy) << "," << r.method << "," << fmt(r.mean_theta) << ","
        << fmt(r.sd_theta) << "," << fmt(r.mean_se) << "," << fmt(r.rejection_rate) << ","
        << r.n_sims << "," << r.n_fit_failures << "\n";
}

SummaryTable read_summary_csv(std::istream& in) {
  SummaryTable table;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw CsvError("summary CSV: expected 8 fields, got line: " + line);
    SummaryRow row;
    const auto strategy = strategy_from_string(f[0]);
    if (!strategy) throw CsvError("summary CSV: unknown strategy " + f[0]);
    row.strategy = *strategy;
    row.method = f[1];
    row.mean_theta = std::stod(f[2]);
    row.sd_theta = std::stod(f[3]);
    row.mean_se = std::stod(f[4]);
    row.rejection_rate = std::stod(f[5]);
    row.n_sims = std::stoi(f[6]);
    row.n_fit_failures = std::stoi(f[7]);
    table.rows.push_back(row);
  }
  if (!header_seen) throw CsvError("summary CSV: missing header");
  return table;
}

}  // namespace cmi
