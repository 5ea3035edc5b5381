#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "cmi/dataset.hpp"
#include "cmi/mmrm.hpp"
#include "cmi/rng.hpp"

namespace cmi {

/// Marginal imputation distribution of a subject's outcome vector under the
/// chosen strategy, before conditioning on the observed values.
struct MarginalDistribution {
  Eigen::VectorXd mu_tilde;
  Eigen::MatrixXd sigma_tilde;
};

/// Builds (mu_tilde, sigma_tilde) for one subject. `strategy` is the handling
/// rule for the subject's ICE record; subjects without a record, and
/// control-group subjects, receive the MAR distribution whatever the strategy
/// (reference-based rules degenerate to MAR for them). Reference-based
/// imputation of an intervention subject requires a shared covariance.
MarginalDistribution marginal_distribution(const Subject& s, const MmrmFit& fit,
                                           Strategy strategy, const VisitGrid& grid);

/// Deterministic conditional mean imputation: observed entries verbatim,
/// missing entries set to E(Y_miss | Y_obs) under the marginal distribution.
/// Observed post-ICE values are part of Y_obs and are conditioned on.
Eigen::VectorXd conditional_mean_impute(const Subject& s, const MarginalDistribution& m);

/// One random imputation from the conditional distribution of Y_miss | Y_obs.
Eigen::VectorXd random_impute(const Subject& s, const MarginalDistribution& m,
                              RngStream& stream);

enum class CellProvenance { observed, imputed };

struct ImputedDataset {
  TrialDataset base;
  std::vector<Eigen::VectorXd> filled;                   // per subject, length J
  std::vector<std::vector<CellProvenance>> provenance;   // per subject, per visit
};

struct DeltaAdjustment {
  enum class Scope { imputed_only, post_ice };
  Scope applies_to = Scope::imputed_only;
  /// Per-subject, per-visit offsets (length J); subjects absent from the map
  /// have offset 0 everywhere.
  std::map<std::string, Eigen::VectorXd> offsets;
};

/// Adds the offsets to the targeted cells. Provenance flags are preserved;
/// with Scope::imputed_only observed cells are never touched, with
/// Scope::post_ice all cells after the subject's ICE visit are shifted.
ImputedDataset apply_delta(const ImputedDataset& d, const DeltaAdjustment& delta);

/// Wraps a fully observed dataset as an ImputedDataset (provenance all
/// observed). Throws if any outcome is missing.
ImputedDataset as_completed(const TrialDataset& d);

/// Whole-dataset imputer. Conditional factorizations are cached per
/// (missingness pattern, covariance level) since the marginal covariance is
/// shared by all subjects of a group; resampling loops amortize the cache.
class DatasetImputer {
 public:
  DatasetImputer(const TrialDataset& d, const MmrmFit& fit);

  /// Conditional mean imputation of every subject (deterministic).
  ImputedDataset conditional_mean() const;

  /// Random imputation; subject draws come from substreams derived from
  /// (seed, subject index), so results do not depend on evaluation order.
  ImputedDataset random(std::uint64_t seed) const;

 private:
  struct ConditionalParts {
    std::vector<int> obs, miss;
    Eigen::MatrixXd weight;     // Sigma_mo Sigma_oo^-1
    Eigen::MatrixXd cond_chol;  // lower Cholesky factor of the conditional covariance
  };
  const ConditionalParts& parts_for(const Subject& s, int index) const;

  const TrialDataset& data_;
  const MmrmFit& fit_;
  std::vector<MarginalDistribution> marginals_;
  mutable std::map<std::pair<std::uint64_t, int>, ConditionalParts> cache_;
};

}  // namespace cmi
