#include "cmi/analysis.hpp"

#include <sstream>

#include "cmi/errors.hpp"

namespace cmi {

EffectEstimate fit_ancova(const ImputedDataset& d, const AncovaSpec& spec) {
  const TrialDataset& base = d.base;
  const int n = base.num_subjects();
  const int J = base.num_visits();
  int j = spec.target_visit == 0 ? J : spec.target_visit;
  if (j < 1 || j > J) throw Error("fit_ancova: target visit outside 1..J");
  --j;  // 0-based

  const int p = 2 + static_cast<int>(spec.covariates.size());
  if (n < p) throw Error("fit_ancova: more coefficients than subjects");
  Eigen::MatrixXd x(n, p);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    const Subject& s = base.subjects[static_cast<std::size_t>(i)];
    double dep = d.filled[static_cast<std::size_t>(i)](j);
    if (spec.dependent == AncovaSpec::Dependent::change_from_baseline)
      dep -= s.covariate(base.grid.baseline_label);
    y(i) = dep;
    x(i, 0) = 1.0;
    x(i, 1) = s.group == Group::intervention ? 1.0 : 0.0;
    for (std::size_t k = 0; k < spec.covariates.size(); ++k)
      x(i, 2 + static_cast<int>(k)) = s.covariate(spec.covariates[k]);
  }

  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < p) {
    std::vector<std::string> labels = {"(intercept)", "group"};
    labels.insert(labels.end(), spec.covariates.begin(), spec.covariates.end());
    const auto perm = qr.colsPermutation().indices();
    std::vector<std::string> offending;
    for (Eigen::Index k = qr.rank(); k < perm.size(); ++k)
      offending.push_back(labels[static_cast<std::size_t>(perm(k))]);
    std::ostringstream msg;
    msg << "ANCOVA design is rank deficient; offending columns:";
    for (const auto& c : offending) msg << " " << c;
    throw RankDeficiencyError(msg.str(), offending);
  }
  const Eigen::VectorXd coef = qr.solve(y);

  EffectEstimate est;
  est.theta = coef(1);
  double at_means = coef(0);
  for (std::size_t k = 0; k < spec.covariates.size(); ++k)
    at_means += coef(2 + static_cast<Eigen::Index>(k)) * x.col(2 + static_cast<Eigen::Index>(k)).mean();
  est.lsmean_control = at_means;
  est.lsmean_intervention = at_means + est.theta;
  est.residual_df = n - p;
  return est;
}

std::pair<double, double> ls_means(const EffectEstimate& fit) {
  return {fit.lsmean_control, fit.lsmean_intervention};
}

}  // namespace cmi
