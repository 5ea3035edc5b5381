#include "cmi/impute.hpp"

#include <sstream>

#include "cmi/errors.hpp"

namespace cmi {

namespace {

struct Parts {
  Eigen::MatrixXd weight;
  Eigen::MatrixXd cond_chol;
};

Parts make_parts(const Eigen::MatrixXd& sigma, const std::vector<int>& obs,
                 const std::vector<int>& miss) {
  const int no = static_cast<int>(obs.size());
  const int nm = static_cast<int>(miss.size());
  Eigen::MatrixXd s_oo(no, no), s_mo(nm, no), s_mm(nm, nm);
  for (int a = 0; a < no; ++a)
    for (int b = 0; b < no; ++b) s_oo(a, b) = sigma(obs[a], obs[b]);
  for (int a = 0; a < nm; ++a) {
    for (int b = 0; b < no; ++b) s_mo(a, b) = sigma(miss[a], obs[b]);
    for (int b = 0; b < nm; ++b) s_mm(a, b) = sigma(miss[a], miss[b]);
  }
  Parts parts;
  if (no == 0) {
    parts.weight.resize(nm, 0);
    const Eigen::LLT<Eigen::MatrixXd> llt(s_mm);
    if (llt.info() != Eigen::Success)
      throw Error("marginal covariance is not positive definite");
    parts.cond_chol = llt.matrixL();
    return parts;
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(s_oo);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "observed-block covariance is numerically singular (condition number ~ "
        << s_oo.norm() * llt.solve(Eigen::MatrixXd::Identity(no, no)).norm() << ")";
    throw Error(msg.str());
  }
  parts.weight = llt.solve(s_mo.transpose()).transpose();  // Sigma_mo Sigma_oo^-1
  if (nm > 0) {
    const Eigen::MatrixXd cond = s_mm - parts.weight * s_mo.transpose();
    Eigen::LLT<Eigen::MatrixXd> cllt(cond);
    if (cllt.info() != Eigen::Success) {
      // conditional covariance can brush against zero for near-degenerate
      // marginals; retry with a small ridge before giving up
      const double ridge = 1e-12 * (cond.trace() + 1.0);
      cllt.compute(cond + ridge * Eigen::MatrixXd::Identity(nm, nm));
      if (cllt.info() != Eigen::Success)
        throw Error("conditional covariance is not positive definite");
    }
    parts.cond_chol = cllt.matrixL();
  } else {
    parts.cond_chol.resize(0, 0);
  }
  return parts;
}

Eigen::VectorXd fill_from_parts(const Subject& s, const MarginalDistribution& m,
                                const std::vector<int>& obs, const std::vector<int>& miss,
                                const Eigen::MatrixXd& weight,
                                const Eigen::MatrixXd& cond_chol, RngStream* stream) {
  const int J = static_cast<int>(s.outcomes.size());
  Eigen::VectorXd filled(J);
  for (int j : obs) filled(j) = *s.outcomes[static_cast<std::size_t>(j)];
  if (miss.empty()) return filled;

  Eigen::VectorXd mean_miss(static_cast<Eigen::Index>(miss.size()));
  if (obs.empty()) {
    for (std::size_t k = 0; k < miss.size(); ++k) mean_miss(static_cast<Eigen::Index>(k)) = m.mu_tilde(miss[k]);
  } else {
    Eigen::VectorXd dev(static_cast<Eigen::Index>(obs.size()));
    for (std::size_t k = 0; k < obs.size(); ++k)
      dev(static_cast<Eigen::Index>(k)) = *s.outcomes[static_cast<std::size_t>(obs[k])] - m.mu_tilde(obs[k]);
    const Eigen::VectorXd adj = weight * dev;
    for (std::size_t k = 0; k < miss.size(); ++k)
      mean_miss(static_cast<Eigen::Index>(k)) = m.mu_tilde(miss[k]) + adj(static_cast<Eigen::Index>(k));
  }
  if (stream) {
    Eigen::VectorXd z(static_cast<Eigen::Index>(miss.size()));
    for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = stream->normal();
    mean_miss += cond_chol * z;
  }
  for (std::size_t k = 0; k < miss.size(); ++k) filled(miss[k]) = mean_miss(static_cast<Eigen::Index>(k));
  return filled;
}

}  // namespace

MarginalDistribution marginal_distribution(const Subject& s, const MmrmFit& fit,
                                           Strategy strategy, const VisitGrid& grid) {
  MarginalDistribution m;
  m.sigma_tilde = fit.sigma_for(s.group);
  const Eigen::VectorXd mu_own =
      build_design(s, fit.mean_spec, grid, s.group) * fit.beta;

  const bool reference_applies = s.ice && is_reference_based(strategy) &&
                                 s.group == Group::intervention;
  if (!reference_applies) {
    m.mu_tilde = mu_own;
    return m;
  }
  if (fit.sigma.size() > 1)
    throw Error(
        "reference-based imputation with group-specific covariance matrices "
        "is not supported; fit a shared covariance");

  const Eigen::VectorXd mu_ref =
      build_design(s, fit.mean_spec, grid, Group::control) * fit.beta;
  const int t = s.ice->last_pre_ice_visit;  // 1-based
  const int J = static_cast<int>(s.outcomes.size());
  switch (strategy) {
    case Strategy::cr:
      m.mu_tilde = mu_ref;
      break;
    case Strategy::j2r:
      m.mu_tilde = mu_own;
      for (int j = t; j < J; ++j) m.mu_tilde(j) = mu_ref(j);
      break;
    case Strategy::cir:
      m.mu_tilde = mu_own;
      for (int j = t; j < J; ++j)
        m.mu_tilde(j) = mu_own(t - 1) + (mu_ref(j) - mu_ref(t - 1));
      break;
    case Strategy::mar:
      m.mu_tilde = mu_own;
      break;
  }
  return m;
}

Eigen::VectorXd conditional_mean_impute(const Subject& s, const MarginalDistribution& m) {
  const auto [obs, miss] = split_observed_missing(s);
  const Parts parts = make_parts(m.sigma_tilde, obs, miss);
  return fill_from_parts(s, m, obs, miss, parts.weight, parts.cond_chol, nullptr);
}

Eigen::VectorXd random_impute(const Subject& s, const MarginalDistribution& m,
                              RngStream& stream) {
  const auto [obs, miss] = split_observed_missing(s);
  const Parts parts = make_parts(m.sigma_tilde, obs, miss);
  return fill_from_parts(s, m, obs, miss, parts.weight, parts.cond_chol, &stream);
}

ImputedDataset apply_delta(const ImputedDataset& d, const DeltaAdjustment& delta) {
  ImputedDataset out = d;
  for (std::size_t i = 0; i < out.base.subjects.size(); ++i) {
    const Subject& s = out.base.subjects[i];
    const auto it = delta.offsets.find(s.id);
    if (it == delta.offsets.end()) continue;
    const Eigen::VectorXd& offset = it->second;
    if (offset.size() != static_cast<Eigen::Index>(s.outcomes.size()))
      throw Error("delta offsets for subject " + s.id + " have the wrong length");
    for (Eigen::Index j = 0; j < offset.size(); ++j) {
      const bool targeted =
          delta.applies_to == DeltaAdjustment::Scope::imputed_only
              ? out.provenance[i][static_cast<std::size_t>(j)] == CellProvenance::imputed
              : s.ice && j >= s.ice->last_pre_ice_visit;
      if (targeted) out.filled[i](j) += offset(j);
    }
  }
  return out;
}

ImputedDataset as_completed(const TrialDataset& d) {
  ImputedDataset out;
  out.base = d;
  out.filled.reserve(d.subjects.size());
  out.provenance.reserve(d.subjects.size());
  for (const auto& s : d.subjects) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(s.outcomes.size()));
    for (std::size_t j = 0; j < s.outcomes.size(); ++j) {
      if (!s.outcomes[j].has_value())
        throw Error("as_completed: subject " + s.id + " has missing outcomes");
      y(static_cast<Eigen::Index>(j)) = *s.outcomes[j];
    }
    out.filled.push_back(std::move(y));
    out.provenance.emplace_back(s.outcomes.size(), CellProvenance::observed);
  }
  return out;
}

DatasetImputer::DatasetImputer(const TrialDataset& d, const MmrmFit& fit)
    : data_(d), fit_(fit) {
  marginals_.reserve(d.subjects.size());
  for (const auto& s : d.subjects) {
    const Strategy strategy = s.ice ? s.ice->strategy : Strategy::mar;
    marginals_.push_back(marginal_distribution(s, fit, strategy, d.grid));
  }
}

const DatasetImputer::ConditionalParts& DatasetImputer::parts_for(const Subject& s,
                                                                  int index) const {
  std::uint64_t mask = 0;
  for (std::size_t j = 0; j < s.outcomes.size(); ++j)
    if (s.outcomes[j].has_value()) mask |= (1ULL << j);
  const int level = fit_.sigma.size() == 1 ? 0 : (s.group == Group::control ? 0 : 1);
  const auto key = std::make_pair(mask, level);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    auto [obs, miss] = split_observed_missing(s);
    Parts p = make_parts(marginals_[static_cast<std::size_t>(index)].sigma_tilde, obs, miss);
    ConditionalParts cp{std::move(obs), std::move(miss), std::move(p.weight),
                        std::move(p.cond_chol)};
    it = cache_.emplace(key, std::move(cp)).first;
  }
  return it->second;
}

ImputedDataset DatasetImputer::conditional_mean() const {
  ImputedDataset out;
  out.base = data_;
  out.filled.reserve(data_.subjects.size());
  out.provenance.reserve(data_.subjects.size());
  for (int i = 0; i < data_.num_subjects(); ++i) {
    const Subject& s = data_.subjects[static_cast<std::size_t>(i)];
    const ConditionalParts& cp = parts_for(s, i);
    out.filled.push_back(fill_from_parts(s, marginals_[static_cast<std::size_t>(i)], cp.obs,
                                         cp.miss, cp.weight, cp.cond_chol, nullptr));
    std::vector<CellProvenance> prov(s.outcomes.size(), CellProvenance::imputed);
    for (int j : cp.obs) prov[static_cast<std::size_t>(j)] = CellProvenance::observed;
    out.provenance.push_back(std::move(prov));
  }
  return out;
}

ImputedDataset DatasetImputer::random(std::uint64_t seed) const {
  ImputedDataset out;
  out.base = data_;
  out.filled.reserve(data_.subjects.size());
  out.provenance.reserve(data_.subjects.size());
  for (int i = 0; i < data_.num_subjects(); ++i) {
    const Subject& s = data_.subjects[static_cast<std::size_t>(i)];
    const ConditionalParts& cp = parts_for(s, i);
    RngStream stream(derive_seed(seed, static_cast<std::uint64_t>(i)));
    out.filled.push_back(fill_from_parts(s, marginals_[static_cast<std::size_t>(i)], cp.obs,
                                         cp.miss, cp.weight, cp.cond_chol, &stream));
    std::vector<CellProvenance> prov(s.outcomes.size(), CellProvenance::imputed);
    for (int j : cp.obs) prov[static_cast<std::size_t>(j)] = CellProvenance::observed;
    out.provenance.push_back(std::move(prov));
  }
  return out;
}

}  // namespace cmi
