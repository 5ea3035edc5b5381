#include "cmi/mmrm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "cmi/errors.hpp"

namespace cmi {

namespace detail {

Eigen::VectorXd pack_log_cholesky(const Eigen::MatrixXd& sigma) {
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw Error("pack_log_cholesky: matrix is not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  const int J = static_cast<int>(sigma.rows());
  Eigen::VectorXd theta(J * (J + 1) / 2);
  int k = 0;
  for (int r = 0; r < J; ++r)
    for (int c = 0; c <= r; ++c)
      theta(k++) = (r == c) ? std::log(L(r, r)) : L(r, c);
  return theta;
}

Eigen::MatrixXd unpack_log_cholesky(const Eigen::VectorXd& theta, int dim) {
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(dim, dim);
  int k = 0;
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c <= r; ++c)
      L(r, c) = (r == c) ? std::exp(theta(k++)) : theta(k++);
  return L;
}

}  // namespace detail

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

int level_count(const CovarianceSpec& spec) {
  return spec.grouping == CovarianceSpec::Grouping::by_group ? 2 : 1;
}

int level_of(const CovarianceSpec& spec, Group g) {
  if (spec.grouping == CovarianceSpec::Grouping::shared) return 0;
  return g == Group::control ? 0 : 1;
}

struct SubjectData {
  Eigen::MatrixXd x;      // observed rows of the design
  Eigen::VectorXd y;      // observed outcomes
  std::vector<int> obs;   // 0-based visit indices
  int pattern = 0;
  int level = 0;
};

struct Pattern {
  std::vector<int> obs;
  int level = 0;
  // refreshed at every covariance update
  Eigen::MatrixXd inv;
  double logdet = 0.0;
};

// Preprocessed REML problem: per-subject observed designs plus the missingness
// pattern table, shared by profile_beta and the optimizer.
class RemlProblem {
 public:
  RemlProblem(const TrialDataset& d, const MeanModelSpec& mean_spec,
              const CovarianceSpec& cov_spec)
      : levels_(level_count(cov_spec)), info_(mean_spec, d.grid) {
    const int J = d.num_visits();
    p_ = info_.num_columns();
    std::map<std::pair<std::uint64_t, int>, int> pattern_ids;
    std::vector<std::vector<int>> level_visit_counts(
        static_cast<std::size_t>(levels_), std::vector<int>(static_cast<std::size_t>(J), 0));

    for (const auto& s : d.subjects) {
      const auto [obs, miss] = split_observed_missing(s);
      if (obs.empty()) continue;  // contributes nothing to the likelihood
      SubjectData sd;
      sd.obs = obs;
      sd.level = level_of(cov_spec, s.group);
      const Eigen::MatrixXd x_full = build_design(s, mean_spec, d.grid);
      sd.x = subset_rows(x_full, obs);
      sd.y.resize(static_cast<Eigen::Index>(obs.size()));
      for (std::size_t k = 0; k < obs.size(); ++k) {
        sd.y(static_cast<Eigen::Index>(k)) = *s.outcomes[static_cast<std::size_t>(obs[k])];
        level_visit_counts[static_cast<std::size_t>(sd.level)][static_cast<std::size_t>(obs[k])]++;
      }
      std::uint64_t mask = 0;
      for (int j : obs) mask |= (1ULL << j);
      const auto key = std::make_pair(mask, sd.level);
      auto it = pattern_ids.find(key);
      if (it == pattern_ids.end()) {
        it = pattern_ids.emplace(key, static_cast<int>(patterns_.size())).first;
        patterns_.push_back({obs, sd.level, {}, 0.0});
      }
      sd.pattern = it->second;
      n_obs_ += static_cast<int>(obs.size());
      subjects_.push_back(std::move(sd));
    }

    for (int g = 0; g < levels_; ++g)
      for (int j = 0; j < J; ++j)
        if (level_visit_counts[static_cast<std::size_t>(g)][static_cast<std::size_t>(j)] == 0) {
          std::ostringstream msg;
          msg << "visit without observations: " << d.grid.labels[static_cast<std::size_t>(j)];
          if (levels_ > 1) msg << " in " << (g == 0 ? "control" : "intervention") << " group";
          throw Error(msg.str());
        }

    check_full_rank();
    J_ = J;
  }

  int num_params() const { return p_; }
  int num_levels() const { return levels_; }
  int num_visits() const { return J_; }
  int num_obs() const { return n_obs_; }
  const std::vector<std::string>& column_labels() const { return info_.column_labels; }

  std::vector<double> effective_subjects_per_level() const {
    std::vector<double> n(static_cast<std::size_t>(levels_), 0.0);
    for (const auto& sd : subjects_)
      n[static_cast<std::size_t>(sd.level)] +=
          static_cast<double>(sd.obs.size()) / static_cast<double>(J_);
    return n;
  }

  void update_covariance(const std::vector<Eigen::MatrixXd>& sigma) {
    for (auto& pat : patterns_) {
      const Eigen::MatrixXd& full = sigma[static_cast<std::size_t>(pat.level)];
      const int m = static_cast<int>(pat.obs.size());
      Eigen::MatrixXd sub(m, m);
      for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) sub(a, b) = full(pat.obs[static_cast<std::size_t>(a)],
                                                     pat.obs[static_cast<std::size_t>(b)]);
      const Eigen::LLT<Eigen::MatrixXd> llt(sub);
      if (llt.info() != Eigen::Success)
        throw Error("covariance submatrix is not positive definite");
      pat.inv = llt.solve(Eigen::MatrixXd::Identity(m, m));
      pat.logdet = 0.0;
      const Eigen::MatrixXd L = llt.matrixL();
      for (int a = 0; a < m; ++a) pat.logdet += 2.0 * std::log(L(a, a));
    }
  }

  // Accumulates the GLS normal equations at the current covariance and solves
  // for beta. Also returns the summed log-determinants.
  Eigen::VectorXd solve_beta(double* logdet_sum, Eigen::MatrixXd* a_out) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p_, p_);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p_);
    double logdet = 0.0;
    b_cache_.resize(subjects_.size());
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
      const SubjectData& sd = subjects_[i];
      const Pattern& pat = patterns_[static_cast<std::size_t>(sd.pattern)];
      b_cache_[i].noalias() = pat.inv * sd.x;  // Sigma_i^-1 X_i
      a.noalias() += sd.x.transpose() * b_cache_[i];
      b.noalias() += b_cache_[i].transpose() * sd.y;
      logdet += pat.logdet;
    }
    const Eigen::LLT<Eigen::MatrixXd> allt(a);
    if (allt.info() != Eigen::Success) raise_rank_deficiency(a);
    if (logdet_sum) *logdet_sum = logdet;
    if (a_out) *a_out = a;
    a_llt_ = allt;
    return allt.solve(b);
  }

  // Negative REML log-likelihood and (optionally) its gradient with respect
  // to the log-Cholesky parameters of each covariance level.
  double evaluate(const std::vector<Eigen::MatrixXd>& l_chol, Eigen::VectorXd* grad) {
    const int J = J_;
    std::vector<Eigen::MatrixXd> sigma;
    sigma.reserve(l_chol.size());
    for (const auto& L : l_chol) sigma.push_back(L * L.transpose());
    update_covariance(sigma);

    double logdet_sum = 0.0;
    Eigen::MatrixXd a;
    const Eigen::VectorXd beta = solve_beta(&logdet_sum, &a);
    double logdet_a = 0.0;
    {
      const Eigen::MatrixXd La = a_llt_.matrixL();
      for (int k = 0; k < p_; ++k) logdet_a += 2.0 * std::log(La(k, k));
    }

    std::vector<Eigen::MatrixXd> gmat;
    Eigen::MatrixXd a_inv;
    if (grad) {
      gmat.assign(static_cast<std::size_t>(levels_), Eigen::MatrixXd::Zero(J, J));
      a_inv = a_llt_.solve(Eigen::MatrixXd::Identity(p_, p_));
    }

    double quad = 0.0;
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
      const SubjectData& sd = subjects_[i];
      const Pattern& pat = patterns_[static_cast<std::size_t>(sd.pattern)];
      const Eigen::VectorXd r = sd.y - sd.x * beta;
      const Eigen::VectorXd u = pat.inv * r;
      quad += r.dot(u);
      if (!grad) continue;
      Eigen::MatrixXd& g = gmat[static_cast<std::size_t>(sd.level)];
      const Eigen::MatrixXd c = b_cache_[i] * a_inv * b_cache_[i].transpose();
      const int m = static_cast<int>(sd.obs.size());
      for (int aI = 0; aI < m; ++aI) {
        const int ja = sd.obs[static_cast<std::size_t>(aI)];
        for (int bI = 0; bI < m; ++bI) {
          const int jb = sd.obs[static_cast<std::size_t>(bI)];
          g(ja, jb) += pat.inv(aI, bI) - c(aI, bI) - u(aI) * u(bI);
        }
      }
    }

    const double f =
        0.5 * (logdet_sum + logdet_a + quad + (n_obs_ - p_) * kLog2Pi);
    if (grad) {
      grad->resize(levels_ * J * (J + 1) / 2);
      int k = 0;
      for (int g = 0; g < levels_; ++g) {
        const Eigen::MatrixXd gl =
            gmat[static_cast<std::size_t>(g)] * l_chol[static_cast<std::size_t>(g)];
        for (int r = 0; r < J; ++r)
          for (int c = 0; c <= r; ++c)
            (*grad)(k++) = (r == c) ? gl(r, r) * l_chol[static_cast<std::size_t>(g)](r, r)
                                    : gl(r, c);
      }
    }
    return f;
  }

  // Pairwise-complete covariance of OLS residuals per level, shrunk toward
  // its diagonal until positive definite.
  std::vector<Eigen::MatrixXd> starting_covariance() {
    const int J = J_;
    std::vector<Eigen::MatrixXd> identity(
        static_cast<std::size_t>(levels_), Eigen::MatrixXd::Identity(J, J));
    update_covariance(identity);
    const Eigen::VectorXd beta = solve_beta(nullptr, nullptr);

    std::vector<Eigen::MatrixXd> s(static_cast<std::size_t>(levels_),
                                   Eigen::MatrixXd::Zero(J, J));
    std::vector<Eigen::MatrixXd> counts(static_cast<std::size_t>(levels_),
                                        Eigen::MatrixXd::Zero(J, J));
    for (const auto& sd : subjects_) {
      const Eigen::VectorXd r = sd.y - sd.x * beta;
      auto& sl = s[static_cast<std::size_t>(sd.level)];
      auto& cl = counts[static_cast<std::size_t>(sd.level)];
      for (std::size_t aI = 0; aI < sd.obs.size(); ++aI)
        for (std::size_t bI = 0; bI < sd.obs.size(); ++bI) {
          sl(sd.obs[aI], sd.obs[bI]) += r(static_cast<Eigen::Index>(aI)) * r(static_cast<Eigen::Index>(bI));
          cl(sd.obs[aI], sd.obs[bI]) += 1.0;
        }
    }
    for (int g = 0; g < levels_; ++g) {
      auto& sl = s[static_cast<std::size_t>(g)];
      const auto& cl = counts[static_cast<std::size_t>(g)];
      for (int aI = 0; aI < J; ++aI)
        for (int bI = 0; bI < J; ++bI)
          sl(aI, bI) = cl(aI, bI) > 0 ? sl(aI, bI) / cl(aI, bI) : 0.0;
      const double floor = 1e-8 * (sl.trace() / J + 1.0);
      for (int j = 0; j < J; ++j) sl(j, j) = std::max(sl(j, j), floor);
      for (int round = 0; round < 400; ++round) {
        if (Eigen::LLT<Eigen::MatrixXd>(sl).info() == Eigen::Success) break;
        for (int aI = 0; aI < J; ++aI)
          for (int bI = 0; bI < J; ++bI)
            if (aI != bI) sl(aI, bI) *= 0.95;
      }
    }
    return s;
  }

 private:
  void check_full_rank() {
    Eigen::MatrixXd stacked(n_obs_, p_);
    Eigen::Index row = 0;
    for (const auto& sd : subjects_) {
      stacked.middleRows(row, sd.x.rows()) = sd.x;
      row += sd.x.rows();
    }
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(stacked);
    if (qr.rank() < p_) raise_rank_deficiency_from_qr(qr);
  }

  [[noreturn]] void raise_rank_deficiency(const Eigen::MatrixXd& a) {
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    raise_rank_deficiency_from_qr(qr);
  }

  [[noreturn]] void raise_rank_deficiency_from_qr(
      const Eigen::ColPivHouseholderQR<Eigen::MatrixXd>& qr) {
    const auto perm = qr.colsPermutation().indices();
    const Eigen::Index rank = qr.rank();
    std::vector<std::string> columns;
    for (Eigen::Index k = rank; k < perm.size(); ++k)
      columns.push_back(info_.column_labels[static_cast<std::size_t>(perm(k))]);
    std::ostringstream msg;
    msg << "design is rank deficient; offending columns:";
    for (const auto& cname : columns) msg << " " << cname;
    throw RankDeficiencyError(msg.str(), columns);
  }

  std::vector<SubjectData> subjects_;
  std::vector<Pattern> patterns_;
  std::vector<Eigen::MatrixXd> b_cache_;
  Eigen::LLT<Eigen::MatrixXd> a_llt_;
  int levels_;
  DesignInfo info_;
  int p_ = 0;
  int J_ = 0;
  int n_obs_ = 0;
};

std::vector<Eigen::MatrixXd> unpack_levels(const Eigen::VectorXd& theta, int levels, int J) {
  const int block = J * (J + 1) / 2;
  std::vector<Eigen::MatrixXd> l;
  l.reserve(static_cast<std::size_t>(levels));
  for (int g = 0; g < levels; ++g)
    l.push_back(detail::unpack_log_cholesky(theta.segment(g * block, block), J));
  return l;
}

// Inverse of the complete-data Fisher information of the log-Cholesky
// parameters, used to precondition the quasi-Newton iteration:
// I_kl = n_eff/2 * tr(Sigma^-1 dSigma_k Sigma^-1 dSigma_l) with
// dSigma_k = E_k L' + L E_k'. Missing data only shrink the information, so
// the complete-data form is a serviceable starting curvature.
Eigen::MatrixXd fisher_preconditioner(const std::vector<Eigen::MatrixXd>& l_chol,
                                      const std::vector<double>& n_eff) {
  const int J = static_cast<int>(l_chol.front().rows());
  const int block = J * (J + 1) / 2;
  const int levels = static_cast<int>(l_chol.size());
  Eigen::MatrixXd h0 = Eigen::MatrixXd::Identity(levels * block, levels * block);
  for (int g = 0; g < levels; ++g) {
    const Eigen::MatrixXd& L = l_chol[static_cast<std::size_t>(g)];
    const Eigen::MatrixXd sigma = L * L.transpose();
    const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) continue;
    const Eigen::MatrixXd sigma_inv = llt.solve(Eigen::MatrixXd::Identity(J, J));

    std::vector<Eigen::MatrixXd> dsigma;
    dsigma.reserve(static_cast<std::size_t>(block));
    for (int r = 0; r < J; ++r)
      for (int c = 0; c <= r; ++c) {
        Eigen::MatrixXd e = Eigen::MatrixXd::Zero(J, J);
        e(r, c) = (r == c) ? L(r, r) : 1.0;  // log-diagonal chain rule
        dsigma.push_back(e * L.transpose() + L * e.transpose());
      }
    Eigen::MatrixXd info(block, block);
    std::vector<Eigen::MatrixXd> w(dsigma.size());
    for (std::size_t k = 0; k < dsigma.size(); ++k) w[k] = sigma_inv * dsigma[k];
    for (int k = 0; k < block; ++k)
      for (int l = k; l < block; ++l) {
        const double v = 0.5 * n_eff[static_cast<std::size_t>(g)] *
                         (w[static_cast<std::size_t>(k)].transpose()
                              .cwiseProduct(w[static_cast<std::size_t>(l)])
                              .sum());
        info(k, l) = v;
        info(l, k) = v;
      }
    const Eigen::LDLT<Eigen::MatrixXd> ildlt(info);
    if (ildlt.info() != Eigen::Success || !ildlt.isPositive()) continue;
    h0.block(g * block, g * block, block, block) =
        ildlt.solve(Eigen::MatrixXd::Identity(block, block));
  }
  return h0;
}

// Strong-Wolfe line search (Nocedal & Wright, algorithms 3.5/3.6).
struct LineSearchResult {
  double step = 0.0;
  double f = 0.0;
  Eigen::VectorXd x, grad;
  bool ok = false;
};

LineSearchResult wolfe_line_search(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>& fn,
    const Eigen::VectorXd& x0, double f0, const Eigen::VectorXd& g0,
    const Eigen::VectorXd& direction) {
  constexpr double c1 = 1e-4;
  constexpr double c2 = 0.9;
  const double d0 = g0.dot(direction);
  LineSearchResult res;
  if (d0 >= 0.0) return res;  // not a descent direction

  auto eval = [&](double alpha, double& f, Eigen::VectorXd& x, Eigen::VectorXd& g) {
    x = x0 + alpha * direction;
    f = fn(x, &g);
  };

  auto zoom = [&](double lo, double flo, double hi) {
    Eigen::VectorXd x, g;
    for (int it = 0; it < 40; ++it) {
      const double alpha = 0.5 * (lo + hi);
      double f;
      eval(alpha, f, x, g);
      if (!std::isfinite(f) || f > f0 + c1 * alpha * d0 || f >= flo) {
        hi = alpha;
        continue;
      }
      const double d = g.dot(direction);
      if (std::fabs(d) <= -c2 * d0) {
        res = {alpha, f, x, g, true};
        return;
      }
      if (d * (hi - lo) >= 0.0) hi = lo;
      lo = alpha;
      flo = f;
    }
    // fall back to the best sufficient-decrease point found
    double f;
    eval(lo, f, x, g);
    if (std::isfinite(f) && f < f0) res = {lo, f, x, g, true};
  };

  double prev_alpha = 0.0, prev_f = f0;
  double alpha = 1.0;
  Eigen::VectorXd x, g;
  for (int it = 0; it < 20; ++it) {
    double f;
    eval(alpha, f, x, g);
    if (!std::isfinite(f) || f > f0 + c1 * alpha * d0 || (it > 0 && f >= prev_f)) {
      zoom(prev_alpha, prev_f, alpha);
      return res;
    }
    const double d = g.dot(direction);
    if (std::fabs(d) <= -c2 * d0) {
      res = {alpha, f, x, g, true};
      return res;
    }
    if (d >= 0.0) {
      zoom(alpha, f, prev_alpha);
      return res;
    }
    prev_alpha = alpha;
    prev_f = f;
    alpha *= 2.0;
  }
  return res;
}

}  // namespace

namespace detail {

double reml_objective(const TrialDataset& masked, const MeanModelSpec& mean_spec,
                      const CovarianceSpec& cov_spec, const Eigen::VectorXd& theta,
                      Eigen::VectorXd* grad) {
  RemlProblem problem(masked, mean_spec, cov_spec);
  return problem.evaluate(
      unpack_levels(theta, problem.num_levels(), problem.num_visits()), grad);
}

}  // namespace detail

Eigen::VectorXd profile_beta(const TrialDataset& masked, const MeanModelSpec& mean_spec,
                             const CovarianceSpec& cov_spec,
                             const std::vector<Eigen::MatrixXd>& sigma) {
  RemlProblem problem(masked, mean_spec, cov_spec);
  if (static_cast<int>(sigma.size()) != problem.num_levels())
    throw Error("profile_beta: expected one covariance matrix per grouping level");
  problem.update_covariance(sigma);
  return problem.solve_beta(nullptr, nullptr);
}

MmrmFit fit_reml(const TrialDataset& masked, const MeanModelSpec& mean_spec,
                 const CovarianceSpec& cov_spec, const MmrmOptions& options) {
  RemlProblem problem(masked, mean_spec, cov_spec);
  const int J = problem.num_visits();
  const int levels = problem.num_levels();
  const int block = J * (J + 1) / 2;

  std::vector<Eigen::MatrixXd> start;
  if (options.init_sigma) {
    if (static_cast<int>(options.init_sigma->size()) != levels)
      throw Error("fit_reml: init_sigma must hold one matrix per grouping level");
    start = *options.init_sigma;
  } else {
    start = problem.starting_covariance();
  }

  Eigen::VectorXd theta(levels * block);
  for (int g = 0; g < levels; ++g)
    theta.segment(g * block, block) = detail::pack_log_cholesky(start[static_cast<std::size_t>(g)]);

  auto objective = [&](const Eigen::VectorXd& t, Eigen::VectorXd* grad) -> double {
    try {
      return problem.evaluate(unpack_levels(t, levels, J), grad);
    } catch (const std::exception&) {
      // non-finite trial point (e.g. overflowing log-diagonal); the line
      // search backtracks on infinity
      return std::numeric_limits<double>::infinity();
    }
  };

  Eigen::VectorXd grad;
  double f = objective(theta, &grad);
  if (!std::isfinite(f)) throw Error("fit_reml: starting covariance is not usable");
  Eigen::MatrixXd h =
      fisher_preconditioner(unpack_levels(theta, levels, J),
                            problem.effective_subjects_per_level());

  const auto grad_norm = [](const Eigen::VectorXd& g) {
    return g.lpNorm<Eigen::Infinity>();
  };
  bool converged = grad_norm(grad) < options.gtol;
  int iter = 0;
  bool first_update = false;  // curvature scale comes from the preconditioner
  while (!converged && iter < options.max_iter) {
    ++iter;
    const Eigen::VectorXd direction = -(h * grad);
    LineSearchResult ls = wolfe_line_search(objective, theta, f, grad, direction);
    if (!ls.ok) {
      // restart with a fresh curvature estimate at the current point
      h = fisher_preconditioner(unpack_levels(theta, levels, J),
                                problem.effective_subjects_per_level());
      ls = wolfe_line_search(objective, theta, f, grad, -(h * grad));
      if (!ls.ok) {
        // no representable step decreases f: stationary at the objective's
        // noise floor counts as converged, anything else is a failure
        converged = grad_norm(grad) < options.gtol * std::max(1.0, std::fabs(f));
        break;
      }
    }
    const Eigen::VectorXd s = ls.x - theta;
    const Eigen::VectorXd yv = ls.grad - grad;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (first_update) {
        h *= sy / yv.squaredNorm();
        first_update = false;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd hy = h * yv;
      h -= rho * (s * hy.transpose() + hy * s.transpose());
      h += rho * rho * (yv.dot(hy) + sy) * (s * s.transpose());
    }
    const double rel = std::fabs(f - ls.f) / std::max(1.0, std::fabs(ls.f));
    theta = ls.x;
    f = ls.f;
    grad = ls.grad;
    converged = rel < options.tol && grad_norm(grad) < options.gtol;
  }

  MmrmFit fit;
  fit.sigma.reserve(static_cast<std::size_t>(levels));
  const auto l_chol = unpack_levels(theta, levels, J);
  for (const auto& L : l_chol) fit.sigma.push_back(L * L.transpose());
  problem.update_covariance(fit.sigma);
  double logdet = 0.0;
  fit.beta = problem.solve_beta(&logdet, nullptr);
  fit.reml_loglik = -f;
  fit.converged = converged;
  fit.iterations = iter;
  fit.column_labels = problem.column_labels();
  fit.mean_spec = mean_spec;
  fit.cov_spec = cov_spec;
  return fit;
}

}  // namespace cmi
