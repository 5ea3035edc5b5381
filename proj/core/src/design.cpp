#include "cmi/design.hpp"

#include <algorithm>

#include "cmi/errors.hpp"

namespace cmi {

MeanModelSpec MeanModelSpec::standard(const std::vector<std::string>& covariates,
                                      bool covariate_by_visit) {
  MeanModelSpec spec;
  spec.terms = {{TermKind::intercept, ""},
                {TermKind::group, ""},
                {TermKind::visit, ""},
                {TermKind::group_visit, ""}};
  for (const auto& c : covariates) {
    spec.terms.push_back({TermKind::covariate, c});
    if (covariate_by_visit) spec.terms.push_back({TermKind::covariate_visit, c});
  }
  return spec;
}

MeanModelSpec MeanModelSpec::cell_means() {
  MeanModelSpec spec;
  spec.terms = {{TermKind::intercept, ""},
                {TermKind::group, ""},
                {TermKind::visit, ""},
                {TermKind::group_visit, ""}};
  return spec;
}

namespace {

bool has_term(const MeanModelSpec& spec, TermKind kind) {
  return std::any_of(spec.terms.begin(), spec.terms.end(),
                     [kind](const Term& t) { return t.kind == kind; });
}

// Number of visit-indicator columns contributed by the plain visit term.
int visit_columns(const MeanModelSpec& spec, int J) {
  return has_term(spec, TermKind::intercept) ? J - 1 : J;
}

}  // namespace

DesignInfo::DesignInfo(const MeanModelSpec& spec, const VisitGrid& grid) {
  for (const TermKind required :
       {TermKind::group, TermKind::visit, TermKind::group_visit})
    if (!has_term(spec, required))
      throw Error(
          "mean model must include the group, visit and group-by-visit terms");
  const int J = grid.num_visits();
  for (const auto& term : spec.terms) {
    switch (term.kind) {
      case TermKind::intercept:
        column_labels.push_back("(intercept)");
        break;
      case TermKind::group:
        column_labels.push_back("group");
        break;
      case TermKind::visit: {
        const int first = J - visit_columns(spec, J);  // 0 or 1
        for (int j = first; j < J; ++j)
          column_labels.push_back("visit[" + grid.labels[static_cast<std::size_t>(j)] + "]");
        break;
      }
      case TermKind::group_visit:
        for (int j = 1; j < J; ++j)
          column_labels.push_back("group:visit[" + grid.labels[static_cast<std::size_t>(j)] + "]");
        break;
      case TermKind::covariate:
        column_labels.push_back(term.covariate);
        break;
      case TermKind::covariate_visit:
        for (int j = 1; j < J; ++j)
          column_labels.push_back(term.covariate + ":visit[" +
                                  grid.labels[static_cast<std::size_t>(j)] + "]");
        break;
      case TermKind::covariate_group:
        column_labels.push_back(term.covariate + ":group");
        break;
      case TermKind::covariate_group_visit:
        for (int j = 1; j < J; ++j)
          column_labels.push_back(term.covariate + ":group:visit[" +
                                  grid.labels[static_cast<std::size_t>(j)] + "]");
        break;
    }
  }
}

Eigen::MatrixXd build_design(const Subject& s, const MeanModelSpec& spec,
                             const VisitGrid& grid, Group as_group) {
  const int J = grid.num_visits();
  const DesignInfo info(spec, grid);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(J, info.num_columns());
  const double g = (as_group == spec.reference_group) ? 0.0 : 1.0;

  int col = 0;
  for (const auto& term : spec.terms) {
    switch (term.kind) {
      case TermKind::intercept:
        x.col(col++).setOnes();
        break;
      case TermKind::group:
        x.col(col++).setConstant(g);
        break;
      case TermKind::visit: {
        const int first = J - visit_columns(spec, J);
        for (int j = first; j < J; ++j) x(j, col++) = 1.0;
        break;
      }
      case TermKind::group_visit:
        for (int j = 1; j < J; ++j) x(j, col++) = g;
        break;
      case TermKind::covariate:
        x.col(col++).setConstant(s.covariate(term.covariate));
        break;
      case TermKind::covariate_visit: {
        const double v = s.covariate(term.covariate);
        for (int j = 1; j < J; ++j) x(j, col++) = v;
        break;
      }
      case TermKind::covariate_group:
        x.col(col++).setConstant(g * s.covariate(term.covariate));
        break;
      case TermKind::covariate_group_visit: {
        const double v = g * s.covariate(term.covariate);
        for (int j = 1; j < J; ++j) x(j, col++) = v;
        break;
      }
    }
  }
  return x;
}

Eigen::MatrixXd subset_rows(const Eigen::MatrixXd& x, const std::vector<int>& observed) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(observed.size()), x.cols());
  for (std::size_t r = 0; r < observed.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = x.row(observed[r]);
  return out;
}

}  // namespace cmi
