#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "cmi/dataset.hpp"
#include "cmi/design.hpp"

namespace cmi {

struct MmrmOptions {
  double tol = 1e-8;    // relative objective change
  double gtol = 1e-6;   // gradient inf-norm
  int max_iter = 200;
  /// Warm start: unstructured covariance per grouping level (used by the
  /// leave-one-out and bootstrap fits). Falls back to the OLS residual
  /// covariance when absent.
  std::optional<std::vector<Eigen::MatrixXd>> init_sigma;
};

/// REML estimates of the imputation model on masked data.
struct MmrmFit {
  Eigen::VectorXd beta;
  /// One matrix when the covariance is shared, otherwise {control,
  /// intervention}.
  std::vector<Eigen::MatrixXd> sigma;
  double reml_loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> column_labels;
  MeanModelSpec mean_spec;
  CovarianceSpec cov_spec;

  const Eigen::MatrixXd& sigma_for(Group g) const {
    return sigma.size() == 1
               ? sigma.front()
               : sigma[g == Group::control ? 0 : 1];
  }
};

/// Generalized-least-squares coefficients at a fixed covariance: the solution
/// of sum_i X'_i Sigma_i^-1 X_i beta = sum_i X'_i Sigma_i^-1 y_i over the
/// observed rows of the masked data. `sigma` holds one matrix per grouping
/// level of `cov_spec`. Singular normal equations raise RankDeficiencyError
/// naming the offending columns.
Eigen::VectorXd profile_beta(const TrialDataset& masked, const MeanModelSpec& mean_spec,
                             const CovarianceSpec& cov_spec,
                             const std::vector<Eigen::MatrixXd>& sigma);

/// Maximizes the REML log-likelihood of the masked data over the unstructured
/// covariance (log-Cholesky parametrization, quasi-Newton with analytic
/// gradients, mean coefficients profiled out). Returns converged=false after
/// max_iter without meeting tol/gtol; the best iterate is still reported.
MmrmFit fit_reml(const TrialDataset& masked, const MeanModelSpec& mean_spec,
                 const CovarianceSpec& cov_spec, const MmrmOptions& options = {});

namespace detail {
/// Log-Cholesky packing (row-major lower triangle, log on the diagonal).
Eigen::VectorXd pack_log_cholesky(const Eigen::MatrixXd& sigma);
Eigen::MatrixXd unpack_log_cholesky(const Eigen::VectorXd& theta, int dim);

/// Negative REML log-likelihood (and its gradient when grad != nullptr) at
/// packed log-Cholesky parameters, one block per grouping level.
double reml_objective(const TrialDataset& masked, const MeanModelSpec& mean_spec,
                      const CovarianceSpec& cov_spec, const Eigen::VectorXd& theta,
                      Eigen::VectorXd* grad);
}  // namespace detail

}  // namespace cmi
