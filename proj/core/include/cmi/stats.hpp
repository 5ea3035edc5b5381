#pragma once

// Scalar distribution functions used by the resampling inference and the
// bootstrap sample-size planner: standard normal CDF/quantile, chi-square
// CDF/quantile (via the regularized incomplete gamma function) and binomial
// CDF/quantile (via the regularized incomplete beta function).

namespace cmi::stats {

/// Standard normal CDF.
double norm_cdf(double x);

/// Standard normal quantile (Wichura's AS 241, |error| < 1e-15 in the
/// interior). Throws for p outside (0,1).
double norm_quantile(double p);

/// Regularized lower incomplete gamma P(a,x), a > 0, x >= 0.
double gamma_p(double a, double x);

/// Regularized incomplete beta I_x(a,b).
double beta_inc(double a, double b, double x);

/// Chi-square CDF with df degrees of freedom.
double chi2_cdf(double x, double df);

/// Chi-square quantile; Newton iteration on gamma_p with a Wilson-Hilferty
/// starting value.
double chi2_quantile(double p, double df);

/// P(X <= k) for X ~ Binomial(n, p). k < 0 gives 0, k >= n gives 1.
double binom_cdf(long long k, long long n, double p);

/// Smallest k with P(X <= k) >= q for X ~ Binomial(n, p).
long long binom_quantile(double q, long long n, double p);

}  // namespace cmi::stats
