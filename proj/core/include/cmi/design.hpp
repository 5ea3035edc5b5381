#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "cmi/dataset.hpp"

namespace cmi {

enum class TermKind {
  intercept,
  group,
  visit,
  group_visit,
  covariate,
  covariate_visit,
  covariate_group,
  covariate_group_visit,
};

struct Term {
  TermKind kind;
  std::string covariate;  // used by the covariate* kinds
};

/// Mean structure of the imputation model. Treatment-contrast coding with
/// reference_group as the reference level; the visit factor contributes J-1
/// indicator columns when an intercept is present and J otherwise, and every
/// interaction with visit contributes J-1 columns (visits 2..J).
struct MeanModelSpec {
  std::vector<Term> terms;
  Group reference_group = Group::control;

  /// group + visit + group-by-visit with intercept, plus the given baseline
  /// covariates (optionally with covariate-by-visit interactions).
  static MeanModelSpec standard(const std::vector<std::string>& covariates,
                                bool covariate_by_visit = true);

  /// Saturated group-by-visit cell means model (no covariates).
  static MeanModelSpec cell_means();
};

struct CovarianceSpec {
  enum class Grouping { shared, by_group };
  Grouping grouping = Grouping::shared;  // structure: unstructured
};

/// Column labels and width of the design implied by a spec; construction
/// checks that the group, visit and group-by-visit terms are present.
struct DesignInfo {
  std::vector<std::string> column_labels;
  int num_columns() const { return static_cast<int>(column_labels.size()); }

  DesignInfo(const MeanModelSpec& spec, const VisitGrid& grid);
};

/// J x p design matrix of a subject evaluated as if randomized to `as_group`
/// (the treatment indicator and all its interactions are recomputed at that
/// level; covariate values stay at the subject's observed values). Evaluating
/// an intervention subject at the control level yields the reference design
/// used by reference-based imputation.
Eigen::MatrixXd build_design(const Subject& s, const MeanModelSpec& spec,
                             const VisitGrid& grid, Group as_group);

inline Eigen::MatrixXd build_design(const Subject& s, const MeanModelSpec& spec,
                                    const VisitGrid& grid) {
  return build_design(s, spec, grid, s.group);
}

/// Row subset of a design matrix in visit order (0-based indices).
Eigen::MatrixXd subset_rows(const Eigen::MatrixXd& x, const std::vector<int>& observed);

}  // namespace cmi
