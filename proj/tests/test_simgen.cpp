#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cmi/simgen.hpp"

using namespace cmi;
using doctest::Approx;

namespace {

SimConfig flat_config() {
  // outcomes pinned to the baseline mean: the hazard is then exactly the
  // (scaled) base probability at every visit
  SimConfig cfg;
  cfg.control_change = 0.0;
  cfg.re_sd_intercept = 1e-6;
  cfg.re_sd_slope = 1e-6;
  cfg.resid_sd = 1e-6;
  cfg.disc_odds_scale_control = 1.0;
  cfg.disc_odds_scale_intervention = 1.0;
  cfg.disc_first_visit_odds_scale = 1.0;
  cfg.dropout_prob_at_disc = 0.0;  // keep everyone observed
  return cfg;
}

double disc_fraction(const SimConfig& cfg, Hypothesis hyp, Group g, int reps,
                     std::uint64_t seed) {
  int disc = 0, total = 0;
  for (int r = 0; r < reps; ++r) {
    TrialStats stats;
    generate_trial(cfg, hyp, seed + static_cast<std::uint64_t>(r), &stats);
    disc += g == Group::control ? stats.n_disc_control : stats.n_disc_intervention;
    total += cfg.n_per_group;
  }
  return static_cast<double>(disc) / total;
}

}  // namespace

TEST_CASE("discontinuation probability at the anchor equals the base probability") {
  SimConfig cfg = flat_config();
  cfg.n_per_group = 4000;
  const int reps = 5;
  const double p_visit = cfg.disc_base_prob_control;  // 1.5%
  const double expected = 1.0 - std::pow(1.0 - p_visit, cfg.num_visits);
  const double observed = disc_fraction(cfg, Hypothesis::null_hypothesis, Group::control, reps, 3);
  const double se = std::sqrt(expected * (1 - expected) / (4000.0 * reps));
  CHECK(std::fabs(observed - expected) < 4.0 * se);
}

TEST_CASE("ten points above the anchor multiply the odds by the odds ratio") {
  SimConfig cfg = flat_config();
  cfg.baseline_mean = 60.0;  // ten points above the anchor of 50
  cfg.n_per_group = 4000;
  const int reps = 5;
  const double base_odds = 0.025 / 0.975;
  const double p_visit = 1.5 * base_odds / (1.0 + 1.5 * base_odds);
  const double expected = 1.0 - std::pow(1.0 - p_visit, cfg.num_visits);
  const double observed =
      disc_fraction(cfg, Hypothesis::null_hypothesis, Group::intervention, reps, 17);
  const double se = std::sqrt(expected * (1 - expected) / (4000.0 * reps));
  CHECK(std::fabs(observed - expected) < 4.0 * se);
}

TEST_CASE("same seed gives a bit-identical dataset") {
  SimConfig cfg;
  cfg.n_per_group = 50;
  const TrialDataset a = generate_trial(cfg, Hypothesis::alternative, 99);
  const TrialDataset b = generate_trial(cfg, Hypothesis::alternative, 99);
  REQUIRE(a.num_subjects() == b.num_subjects());
  for (int i = 0; i < a.num_subjects(); ++i) {
    CHECK(a.subjects[i].outcomes == b.subjects[i].outcomes);
    CHECK(a.subjects[i].covariate("base") == b.subjects[i].covariate("base"));
    CHECK(a.subjects[i].ice.has_value() == b.subjects[i].ice.has_value());
  }
  const TrialDataset c = generate_trial(cfg, Hypothesis::alternative, 100);
  bool any_different = false;
  for (int i = 0; i < a.num_subjects(); ++i)
    any_different = any_different || a.subjects[i].outcomes != c.subjects[i].outcomes;
  CHECK(any_different);
}

TEST_CASE("generated datasets validate and carry the configured strategy") {
  SimConfig cfg;
  cfg.n_per_group = 80;
  const TrialDataset d = generate_trial(cfg, Hypothesis::null_hypothesis, 5);
  CHECK(validate(d).empty());
  int with_ice = 0;
  for (const auto& s : d.subjects)
    if (s.ice) {
      ++with_ice;
      CHECK(s.ice->strategy == Strategy::cir);
      CHECK(s.ice->last_pre_ice_visit >= 1);
      CHECK(s.ice->last_pre_ice_visit < cfg.num_visits);
    }
  CHECK(with_ice > 0);
}

TEST_CASE("with an outcome-independent hazard, control discontinuation is not selective") {
  SimConfig cfg = flat_config();
  cfg.control_change = 10.0;      // restore the trend
  cfg.re_sd_intercept = 5.0;
  cfg.re_sd_slope = 5.0;
  cfg.resid_sd = 2.5;
  cfg.disc_odds_ratio = 1.0;      // hazard no longer depends on the outcome
  cfg.disc_base_prob_control = 0.10;
  cfg.n_per_group = 30000;
  const TrialDataset d = generate_trial(cfg, Hypothesis::null_hypothesis, 1234);
  double sum_disc = 0, sum_not = 0;
  int n_disc = 0, n_not = 0;
  for (const auto& s : d.subjects) {
    if (s.group != Group::control) continue;
    const double last = *s.outcomes.back();
    if (s.ice) {
      sum_disc += last;
      ++n_disc;
    } else {
      sum_not += last;
      ++n_not;
    }
  }
  REQUIRE(n_disc > 500);
  const double gap = sum_disc / n_disc - sum_not / n_not;
  // means agree within Monte Carlo error (sd ~ 8.3)
  CHECK(std::fabs(gap) < 4.0 * 8.3 * std::sqrt(1.0 / n_disc + 1.0 / n_not));
}

TEST_CASE("summarize: degenerate and mixed record sets") {
  std::vector<RunRecord> identical(3);
  for (int i = 0; i < 3; ++i)
    identical[static_cast<std::size_t>(i)] =
        {i, Strategy::mar, "jackknife", 1.5, 0.3, 0.02, true, false, ""};
  const SummaryTable t1 = summarize(identical);
  REQUIRE(t1.rows.size() == 1);
  CHECK(t1.rows[0].sd_theta == Approx(0.0));
  CHECK(t1.rows[0].mean_theta == Approx(1.5));
  CHECK(t1.rows[0].rejection_rate == Approx(1.0));

  std::vector<RunRecord> mixed = {
      {0, Strategy::j2r, "jackknife", 1.0, 0.5, 0.01, true, false, ""},
      {1, Strategy::j2r, "jackknife", 2.0, 0.5, 0.50, false, false, ""},
  };
  const SummaryTable t2 = summarize(mixed);
  CHECK(t2.rows[0].rejection_rate == Approx(0.5));

  std::vector<RunRecord> with_failure = mixed;
  with_failure.push_back({2, Strategy::j2r, "jackknife", 0, 0, 1, false, true, "no fit"});
  const SummaryTable t3 = summarize(with_failure);
  CHECK(t3.rows[0].n_fit_failures == 1);
  CHECK(t3.rows[0].n_sims == 2);
  CHECK(t3.rows[0].mean_theta == Approx(1.5));  // failure excluded from moments

  std::vector<RunRecord> single = {
      {0, Strategy::cir, "jackknife", 1.0, 0.5, 0.01, true, false, ""}};
  CHECK(std::isnan(summarize(single).rows[0].sd_theta));
}

TEST_CASE("summary tables round-trip through CSV") {
  SummaryTable t;
  t.rows.push_back({Strategy::mar, "jackknife", -0.123456789012345, 0.93, 0.92, 0.049, 1000, 2});
  t.rows.push_back({Strategy::j2r, "bootstrap", 0.5, 0.69, 0.70, 0.051, 998, 0});
  std::ostringstream out;
  write_summary_csv(t, out, "manifest.json");
  std::istringstream in(out.str());
  const SummaryTable back = read_summary_csv(in);
  REQUIRE(back.rows.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.rows[i].strategy == t.rows[i].strategy);
    CHECK(back.rows[i].method == t.rows[i].method);
    CHECK(back.rows[i].mean_theta == t.rows[i].mean_theta);
    CHECK(back.rows[i].sd_theta == t.rows[i].sd_theta);
    CHECK(back.rows[i].mean_se == t.rows[i].mean_se);
    CHECK(back.rows[i].rejection_rate == t.rows[i].rejection_rate);
    CHECK(back.rows[i].n_sims == t.rows[i].n_sims);
    CHECK(back.rows[i].n_fit_failures == t.rows[i].n_fit_failures);
  }
}

TEST_CASE("run_study is deterministic across worker counts") {
  SimConfig cfg;
  cfg.n_per_group = 25;
  StudyOptions opt;
  opt.strategies = {Strategy::mar, Strategy::j2r};
  opt.n_sims = 4;
  opt.seed = 42;
  opt.jobs = 1;
  const StudyResult r1 = run_study(cfg, Hypothesis::null_hypothesis, opt);
  opt.jobs = 2;
  const StudyResult r2 = run_study(cfg, Hypothesis::null_hypothesis, opt);
  REQUIRE(r1.records.size() == r2.records.size());
  for (std::size_t i = 0; i < r1.records.size(); ++i) {
    CHECK(r1.records[i].theta == r2.records[i].theta);
    CHECK(r1.records[i].se == r2.records[i].se);
  }
  std::ostringstream c1, c2;
  write_summary_csv(r1.table, c1);
  write_summary_csv(r2.table, c2);
  CHECK(c1.str() == c2.str());
}

TEST_CASE("run_study with one simulation produces single-run rows") {
  SimConfig cfg;
  cfg.n_per_group = 25;
  StudyOptions opt;
  opt.strategies = {Strategy::cir};
  opt.n_sims = 1;
  opt.seed = 7;
  const StudyResult r = run_study(cfg, Hypothesis::alternative, opt);
  REQUIRE(r.table.rows.size() == 1);
  CHECK(r.table.rows[0].n_sims == 1);
  CHECK(std::isnan(r.table.rows[0].sd_theta));
}

TEST_CASE("bootstrap method in the study harness runs and aggregates") {
  SimConfig cfg;
  cfg.n_per_group = 20;
  StudyOptions opt;
  opt.strategies = {Strategy::j2r};
  opt.run_bootstrap = true;
  opt.bootstrap_b = 20;
  opt.n_sims = 2;
  opt.seed = 3;
  const StudyResult r = run_study(cfg, Hypothesis::null_hypothesis, opt);
  REQUIRE(r.table.rows.size() == 2);  // jackknife + bootstrap
  CHECK(r.table.rows[1].method == "bootstrap");
  CHECK(r.table.rows[1].n_sims + r.table.rows[1].n_fit_failures == 2);
}

TEST_CASE("config validation lists problems") {
  SimConfig cfg;
  cfg.re_corr = 1.5;
  cfg.disc_base_prob_control = -0.1;
  const auto problems = cfg.validate();
  CHECK(problems.size() >= 2);
}
