#pragma once

#include <string>
#include <vector>

#include "cmi/impute.hpp"

namespace cmi {

struct AncovaSpec {
  /// 1-based follow-up visit index; 0 selects the final visit J.
  int target_visit = 0;
  enum class Dependent { outcome, change_from_baseline };
  Dependent dependent = Dependent::change_from_baseline;
  /// Baseline covariates to adjust for (change_from_baseline also needs the
  /// baseline outcome covariate, named by the grid's baseline label).
  std::vector<std::string> covariates;
};

/// ANCOVA treatment effect on a completed dataset. With reference coding the
/// treatment coefficient equals the difference in LS means exactly.
struct EffectEstimate {
  double theta = 0.0;  // intervention minus control
  double lsmean_control = 0.0;
  double lsmean_intervention = 0.0;
  int residual_df = 0;
};

/// Least-squares fit of dependent ~ intercept + group + covariates on the
/// completed data at the target visit. Rank deficiency (e.g. a constant
/// covariate) raises RankDeficiencyError.
EffectEstimate fit_ancova(const ImputedDataset& d, const AncovaSpec& spec);

/// Model-predicted group means with covariates fixed at their overall sample
/// means: (control, intervention).
std::pair<double, double> ls_means(const EffectEstimate& fit);

}  // namespace cmi
