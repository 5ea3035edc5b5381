#include <doctest.h>

#include <cmath>

#include "cmi/errors.hpp"
#include "cmi/impute.hpp"
#include "cmi/rng.hpp"

using namespace cmi;
using doctest::Approx;

namespace {

// hand-built fit whose cell means are exactly mu_control / mu_intervention
// (saturated group-by-visit model), with the given shared covariance
MmrmFit synthetic_fit(const Eigen::VectorXd& mu_control,
                      const Eigen::VectorXd& mu_intervention,
                      const Eigen::MatrixXd& sigma) {
  const int J = static_cast<int>(mu_control.size());
  MmrmFit fit;
  fit.mean_spec = MeanModelSpec::cell_means();
  fit.cov_spec = CovarianceSpec{};
  fit.sigma = {sigma};
  fit.converged = true;
  // columns: intercept, group, visit[2..J], group:visit[2..J]
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(2 * J);
  beta(0) = mu_control(0);
  beta(1) = mu_intervention(0) - mu_control(0);
  for (int j = 1; j < J; ++j) {
    beta(1 + j) = mu_control(j) - mu_control(0);
    beta(J + j) = (mu_intervention(j) - mu_control(j)) - beta(1);
  }
  fit.beta = beta;
  return fit;
}

VisitGrid grid_j(int J) {
  VisitGrid g;
  for (int j = 1; j <= J; ++j) g.labels.push_back("v" + std::to_string(j));
  g.baseline_label = "base";
  return g;
}

Subject subject(Group g, std::vector<std::optional<double>> outcomes,
                std::optional<IceRecord> ice = std::nullopt) {
  Subject s;
  s.id = "x";
  s.group = g;
  s.outcomes = std::move(outcomes);
  s.ice = ice;
  return s;
}

}  // namespace

TEST_CASE("reference-based strategy formulas on a hand-evaluated case") {
  const int J = 4;
  Eigen::VectorXd mu_int(J), mu_ref(J);
  mu_int << 1, 2, 3, 4;
  mu_ref << 0, 0, 0, 0;
  const MmrmFit fit = synthetic_fit(mu_ref, mu_int, Eigen::MatrixXd::Identity(J, J));
  const VisitGrid grid = grid_j(J);
  const Subject s = subject(Group::intervention,
                            {1.0, 2.0, std::nullopt, std::nullopt},
                            IceRecord{2, Strategy::j2r});

  const auto j2r = marginal_distribution(s, fit, Strategy::j2r, grid);
  const auto cir = marginal_distribution(s, fit, Strategy::cir, grid);
  const auto cr = marginal_distribution(s, fit, Strategy::cr, grid);
  Eigen::VectorXd expect_j2r(J), expect_cir(J), expect_cr(J);
  expect_j2r << 1, 2, 0, 0;
  expect_cir << 1, 2, 2, 2;
  expect_cr << 0, 0, 0, 0;
  CHECK((j2r.mu_tilde - expect_j2r).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((cir.mu_tilde - expect_cir).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((cr.mu_tilde - expect_cr).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("control subjects keep the MAR distribution under every strategy") {
  const int J = 3;
  Eigen::VectorXd mu_ctl(J), mu_int(J);
  mu_ctl << 5, 6, 7;
  mu_int << 9, 9, 9;
  const MmrmFit fit = synthetic_fit(mu_ctl, mu_int, Eigen::MatrixXd::Identity(J, J));
  const VisitGrid grid = grid_j(J);
  const Subject s = subject(Group::control, {5.0, std::nullopt, std::nullopt},
                            IceRecord{1, Strategy::j2r});
  for (const Strategy strat : {Strategy::mar, Strategy::cr, Strategy::j2r, Strategy::cir}) {
    const auto m = marginal_distribution(s, fit, strat, grid);
    CHECK((m.mu_tilde - mu_ctl).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("no ICE record means MAR regardless of the requested strategy") {
  const int J = 3;
  Eigen::VectorXd mu_ctl(J), mu_int(J);
  mu_ctl << 0, 0, 0;
  mu_int << 1, 2, 3;
  const MmrmFit fit = synthetic_fit(mu_ctl, mu_int, Eigen::MatrixXd::Identity(J, J));
  const Subject s = subject(Group::intervention, {std::nullopt, 2.0, std::nullopt});
  for (const Strategy strat : {Strategy::mar, Strategy::cr, Strategy::j2r, Strategy::cir}) {
    const auto m = marginal_distribution(s, fit, strat, grid_j(J));
    CHECK((m.mu_tilde - mu_int).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("reference-based imputation rejects group-specific covariances") {
  const int J = 2;
  Eigen::VectorXd mu(J);
  mu << 0, 0;
  MmrmFit fit = synthetic_fit(mu, mu, Eigen::MatrixXd::Identity(J, J));
  fit.cov_spec.grouping = CovarianceSpec::Grouping::by_group;
  fit.sigma = {Eigen::MatrixXd::Identity(J, J), 2.0 * Eigen::MatrixXd::Identity(J, J)};
  const Subject s = subject(Group::intervention, {1.0, std::nullopt}, IceRecord{1, Strategy::j2r});
  CHECK_THROWS_AS(marginal_distribution(s, fit, Strategy::j2r, grid_j(J)), Error);
}

TEST_CASE("conditional mean imputation: complete, empty, and the 2x2 case") {
  MarginalDistribution m;
  m.mu_tilde = Eigen::VectorXd::Zero(2);
  m.sigma_tilde.resize(2, 2);
  m.sigma_tilde << 1.0, 0.5, 0.5, 1.0;

  {
    const Subject s = subject(Group::control, {2.0, 3.0});
    const Eigen::VectorXd filled = conditional_mean_impute(s, m);
    CHECK(filled(0) == 2.0);
    CHECK(filled(1) == 3.0);
  }
  {
    const Subject s = subject(Group::control, {std::nullopt, std::nullopt});
    const Eigen::VectorXd filled = conditional_mean_impute(s, m);
    CHECK(filled(0) == 0.0);
    CHECK(filled(1) == 0.0);
  }
  {
    const Subject s = subject(Group::control, {2.0, std::nullopt});
    const Eigen::VectorXd filled = conditional_mean_impute(s, m);
    CHECK(filled(0) == 2.0);
    CHECK(filled(1) == Approx(1.0).epsilon(1e-12));  // 0 + 0.5 * (2 - 0)
  }
}

TEST_CASE("conditional mean is exact for a degenerate joint distribution") {
  // y2 = 2*y1 + 1 exactly: a covariance aligned with that line (plus a hair
  // of ridge) reconstructs the masked coordinate
  const int n = 1;
  (void)n;
  MarginalDistribution m;
  m.mu_tilde.resize(2);
  m.mu_tilde << 0.0, 1.0;  // consistent with the line at y1 = 0
  m.sigma_tilde.resize(2, 2);
  m.sigma_tilde << 1.0, 2.0, 2.0, 4.0 + 1e-12;
  const Subject s = subject(Group::control, {1.7, std::nullopt});
  const Eigen::VectorXd filled = conditional_mean_impute(s, m);
  CHECK(filled(1) == Approx(2.0 * 1.7 + 1.0).epsilon(1e-6));
}

TEST_CASE("random imputation agrees with the conditional moments") {
  const int J = 3;
  MarginalDistribution m;
  m.mu_tilde.resize(J);
  m.mu_tilde << 1.0, -1.0, 0.5;
  m.sigma_tilde.resize(J, J);
  m.sigma_tilde << 2.0, 0.8, 0.4, 0.8, 1.5, 0.6, 0.4, 0.6, 1.0;
  const Subject s = subject(Group::control, {0.3, std::nullopt, std::nullopt});
  const Eigen::VectorXd cm = conditional_mean_impute(s, m);

  const int draws = 100000;
  RngStream stream(31337);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(J);
  Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(J, J);
  for (int it = 0; it < draws; ++it) {
    const Eigen::VectorXd y = random_impute(s, m, stream);
    CHECK(y(0) == 0.3);  // observed entries verbatim
    sum += y;
    sq += y * y.transpose();
  }
  const Eigen::VectorXd mean = sum / draws;
  const Eigen::MatrixXd cov = sq / draws - mean * mean.transpose();

  // conditional covariance oracle via the Schur complement
  const Eigen::MatrixXd s11 = m.sigma_tilde.block(1, 1, 2, 2);
  const Eigen::VectorXd s10 = m.sigma_tilde.block(1, 0, 2, 1);
  const Eigen::MatrixXd cond = s11 - s10 * s10.transpose() / m.sigma_tilde(0, 0);
  for (int j = 1; j < J; ++j) {
    const double mc_se = std::sqrt(cond(j - 1, j - 1) / draws);
    CHECK(std::fabs(mean(j) - cm(j)) < 3.0 * mc_se);
    CHECK(cov(j, j) == Approx(cond(j - 1, j - 1)).epsilon(0.05));
  }
}

TEST_CASE("random imputation with no missing entries ignores the seed") {
  MarginalDistribution m;
  m.mu_tilde = Eigen::VectorXd::Zero(2);
  m.sigma_tilde = Eigen::MatrixXd::Identity(2, 2);
  const Subject s = subject(Group::control, {1.0, 2.0});
  RngStream a(1), b(999);
  CHECK(random_impute(s, m, a) == random_impute(s, m, b));
}

TEST_CASE("apply_delta targets exactly the requested cells") {
  TrialDataset d;
  d.grid = grid_j(3);
  d.covariate_names = {};
  Subject s = subject(Group::intervention, {1.0, std::nullopt, std::nullopt},
                      IceRecord{1, Strategy::j2r});
  s.id = "a";
  d.subjects.push_back(s);

  ImputedDataset imp;
  imp.base = d;
  Eigen::VectorXd filled(3);
  filled << 1.0, 5.0, 6.0;
  imp.filled = {filled};
  imp.provenance = {{CellProvenance::observed, CellProvenance::imputed, CellProvenance::imputed}};

  DeltaAdjustment zero;
  const ImputedDataset same = apply_delta(imp, zero);
  CHECK(same.filled[0] == imp.filled[0]);

  DeltaAdjustment plus_one;
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(3);
  plus_one.offsets["a"] = ones;
  const ImputedDataset shifted = apply_delta(imp, plus_one);
  CHECK(shifted.filled[0](0) == 1.0);  // observed cell untouched
  CHECK(shifted.filled[0](1) == 6.0);
  CHECK(shifted.filled[0](2) == 7.0);
  CHECK(shifted.provenance == imp.provenance);

  // offsets on observed cells are ignored under imputed-only scope
  DeltaAdjustment only_observed;
  Eigen::VectorXd first = Eigen::VectorXd::Zero(3);
  first(0) = 100.0;
  only_observed.offsets["a"] = first;
  CHECK(apply_delta(imp, only_observed).filled[0](0) == 1.0);
}

TEST_CASE("strategy degeneracy: distributions coincide without a reference ICE") {
  const int J = 3;
  RngStream rng(5);
  Eigen::VectorXd mu_ctl(J), mu_int(J);
  mu_ctl << 1, 2, 3;
  mu_int << 2, 4, 6;
  const MmrmFit fit = synthetic_fit(mu_ctl, mu_int, Eigen::MatrixXd::Identity(J, J));
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<std::optional<double>> y(static_cast<std::size_t>(J));
    for (auto& v : y)
      if (rng.uniform() < 0.7) v = rng.normal();
    const Subject s = subject(rng.uniform() < 0.5 ? Group::control : Group::intervention, y);
    const auto mar = marginal_distribution(s, fit, Strategy::mar, grid_j(J));
    for (const Strategy strat : {Strategy::cr, Strategy::j2r, Strategy::cir}) {
      const auto o = marginal_distribution(s, fit, strat, grid_j(J));
      CHECK((o.mu_tilde - mar.mu_tilde).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("segment structure of J2R and CIR means") {
  const int J = 5;
  RngStream rng(17);
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd mu_ctl(J), mu_int(J);
    for (int j = 0; j < J; ++j) {
      mu_ctl(j) = rng.normal();
      mu_int(j) = rng.normal();
    }
    const MmrmFit fit = synthetic_fit(mu_ctl, mu_int, Eigen::MatrixXd::Identity(J, J));
    const int t = 1 + rng.uniform_int(J - 1);
    const Subject s = subject(Group::intervention,
                              std::vector<std::optional<double>>(J, std::nullopt),
                              IceRecord{t, Strategy::j2r});
    const auto j2r = marginal_distribution(s, fit, Strategy::j2r, grid_j(J));
    const auto cir = marginal_distribution(s, fit, Strategy::cir, grid_j(J));
    for (int j = 0; j < t; ++j) {
      CHECK(j2r.mu_tilde(j) == Approx(mu_int(j)).epsilon(1e-12));
      CHECK(cir.mu_tilde(j) == Approx(mu_int(j)).epsilon(1e-12));
    }
    for (int j = t; j < J; ++j) {
      CHECK(j2r.mu_tilde(j) == Approx(mu_ctl(j)).epsilon(1e-12));
      if (j > t)
        CHECK(cir.mu_tilde(j) - cir.mu_tilde(j - 1) ==
              Approx(mu_ctl(j) - mu_ctl(j - 1)).epsilon(1e-9));
    }
  }
}

TEST_CASE("DatasetImputer matches the per-subject functions and caches correctly") {
  const int J = 4;
  RngStream rng(23);
  Eigen::VectorXd mu_ctl(J), mu_int(J);
  mu_ctl << 1, 2, 3, 4;
  mu_int << 4, 3, 2, 1;
  Eigen::MatrixXd sigma(J, J);
  sigma.setIdentity();
  for (int a = 0; a < J; ++a)
    for (int b = 0; b < J; ++b) sigma(a, b) = 1.5 * std::pow(0.6, std::abs(a - b));
  const MmrmFit fit = synthetic_fit(mu_ctl, mu_int, sigma);

  TrialDataset d;
  d.grid = grid_j(J);
  for (int i = 0; i < 30; ++i) {
    std::vector<std::optional<double>> y(static_cast<std::size_t>(J));
    for (auto& v : y)
      if (rng.uniform() < 0.7) v = rng.normal();
    std::optional<IceRecord> ice;
    if (rng.uniform() < 0.4)
      ice = IceRecord{1 + rng.uniform_int(J - 1),
                      rng.uniform() < 0.5 ? Strategy::j2r : Strategy::cir};
    Subject s = subject(i % 2 ? Group::intervention : Group::control, y, ice);
    s.id = "s" + std::to_string(i);
    d.subjects.push_back(std::move(s));
  }

  const DatasetImputer imputer(d, fit);
  const ImputedDataset completed = imputer.conditional_mean();
  for (int i = 0; i < d.num_subjects(); ++i) {
    const Subject& s = d.subjects[static_cast<std::size_t>(i)];
    const Strategy strat = s.ice ? s.ice->strategy : Strategy::mar;
    const auto m = marginal_distribution(s, fit, strat, d.grid);
    const Eigen::VectorXd direct = conditional_mean_impute(s, m);
    CHECK((completed.filled[static_cast<std::size_t>(i)] - direct).cwiseAbs().maxCoeff() <
          1e-12);
    for (std::size_t j = 0; j < s.outcomes.size(); ++j) {
      if (s.outcomes[j])
        CHECK(completed.filled[static_cast<std::size_t>(i)](static_cast<Eigen::Index>(j)) ==
              *s.outcomes[j]);
      CHECK((completed.provenance[static_cast<std::size_t>(i)][j] == CellProvenance::observed) ==
            s.outcomes[j].has_value());
    }
  }

  // identical seeds reproduce random imputations bit for bit
  const ImputedDataset r1 = imputer.random(42);
  const ImputedDataset r2 = imputer.random(42);
  for (int i = 0; i < d.num_subjects(); ++i)
    CHECK(r1.filled[static_cast<std::size_t>(i)] == r2.filled[static_cast<std::size_t>(i)]);
}
