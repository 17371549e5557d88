#pragma once

// Shared fixtures for the test suites: builders for the reference model
// configurations and a brute-force quadrature oracle for two-level
// marginal moments.

#include <algorithm>
#include <cmath>
#include <vector>

#include "countvpc/fit.hpp"
#include "countvpc/model.hpp"
#include "countvpc/quadrature.hpp"

namespace testing {

using namespace countvpc;

inline ModelSpec poisson_spec(double beta0, double sigma2_u) {
  ModelSpec s;
  s.family = Family::Poisson;
  s.fixed = FixedEffects::intercept_only(beta0);
  s.random = RandomPart::intercept(sigma2_u);
  return validate_spec(std::move(s));
}

inline ModelSpec nb2_spec(double beta0, double sigma2_u, double alpha) {
  ModelSpec s;
  s.family = Family::NB2;
  s.fixed = FixedEffects::intercept_only(beta0);
  s.random = RandomPart::intercept(sigma2_u);
  s.dispersion = Dispersion::alpha(alpha);
  return validate_spec(std::move(s));
}

inline ModelSpec nb1_spec(double beta0, double sigma2_u, double delta) {
  ModelSpec s;
  s.family = Family::NB1;
  s.fixed = FixedEffects::intercept_only(beta0);
  s.random = RandomPart::intercept(sigma2_u);
  s.dispersion = Dispersion::delta(delta);
  return validate_spec(std::move(s));
}

inline ModelSpec pln_spec(double beta0, double sigma2_u, double sigma2_e) {
  ModelSpec s;
  s.family = Family::PoissonLognormal;
  s.fixed = FixedEffects::intercept_only(beta0);
  s.random = RandomPart::intercept(sigma2_u);
  s.dispersion = Dispersion::lognormal(sigma2_e);
  return validate_spec(std::move(s));
}

inline ModelSpec nb2_three_level(double beta0, double sigma2_v, double sigma2_u,
                                 double alpha) {
  ModelSpec s;
  s.family = Family::NB2;
  s.levels = Levels::Three;
  s.fixed = FixedEffects::intercept_only(beta0);
  s.random = RandomPart::intercept(sigma2_u);
  s.sigma2_v = sigma2_v;
  s.dispersion = Dispersion::alpha(alpha);
  return validate_spec(std::move(s));
}

// The fitted random-coefficient model: intercept + FSM slope.
inline ModelSpec model5_spec(double alpha, bool rounded_omega = false) {
  Eigen::MatrixXd omega(2, 2);
  if (rounded_omega) {
    omega << 0.116, -0.027, -0.027, 0.035;
  } else {
    omega << 0.11603906, -0.02662019, -0.02662019, 0.03503611;
  }
  ModelSpec s;
  s.family = Family::NB2;
  Eigen::VectorXd beta(2);
  beta << 2.126, 0.372;
  s.fixed.beta = beta;
  s.fixed.names = {"_cons", "fsm"};
  s.random = RandomPart::coefficient(omega, {"_cons", "fsm"});
  s.dispersion = Dispersion::alpha(alpha);
  return validate_spec(std::move(s));
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

// Dense trapezoid oracle for one cluster's marginal likelihood: evaluate
// the log integrand on a uniform grid over [-8 sigma, 8 sigma] and
// accumulate in log space. Independent of the adaptive quadrature path.
inline double trapezoid_cluster_loglik(const std::vector<long long>& y,
                                       const std::vector<double>& eta,
                                       double sigma2_u, double alpha,
                                       Family family, int points = 20001) {
  const double sigma = std::sqrt(sigma2_u);
  const double lo = -8.0 * sigma, hi = 8.0 * sigma;
  const double step = (hi - lo) / (points - 1);
  std::vector<double> logf(points);
  for (int k = 0; k < points; ++k) {
    const double u = lo + k * step;
    double term =
        -0.5 * std::log(2.0 * M_PI * sigma2_u) - u * u / (2.0 * sigma2_u);
    for (size_t i = 0; i < y.size(); ++i) {
      const double mu = std::exp(eta[i] + u);
      term += family == Family::NB2 ? nb2_logpmf(y[i], mu, alpha)
                                    : poisson_logpmf(y[i], mu);
    }
    logf[k] = term;
  }
  const double peak = *std::max_element(logf.begin(), logf.end());
  double sum = 0.0;
  for (int k = 0; k < points; ++k) {
    const double w = (k == 0 || k == points - 1) ? 0.5 : 1.0;
    sum += w * std::exp(logf[k] - peak);
  }
  return peak + std::log(sum) + std::log(step);
}

// Brute-force oracle for two-level marginal moments: integrate the
// conditional mean and second moment over the scalar cluster effect
// u ~ N(0, s2) with a dense Gauss-Hermite rule. The conditional moments are
// written out longhand here so the oracle shares no code with the closed
// forms under test.
inline Moments brute_force_moments(Family family, double eta_fixed, double s2,
                                   double dispersion, int nodes = 201) {
  const GaussHermite gh = gauss_hermite(nodes);
  const double sd = std::sqrt(s2);
  double mean = 0.0, second = 0.0;
  const double inv_sqrt_pi = 1.0 / std::sqrt(M_PI);
  for (int q = 0; q < static_cast<int>(gh.nodes.size()); ++q) {
    const double u = std::sqrt(2.0) * sd * gh.nodes[q];
    const double w = gh.weights[q] * inv_sqrt_pi;
    double mu_c, var_c;
    switch (family) {
      case Family::Poisson:
        mu_c = std::exp(eta_fixed + u);
        var_c = mu_c;
        break;
      case Family::NB2:
        mu_c = std::exp(eta_fixed + u);
        var_c = mu_c + mu_c * mu_c * dispersion;
        break;
      case Family::NB1:
        mu_c = std::exp(eta_fixed + u);
        var_c = mu_c * (1.0 + dispersion);
        break;
      case Family::PoissonLognormal:
        mu_c = std::exp(eta_fixed + u + dispersion / 2.0);
        var_c = mu_c + mu_c * mu_c * (std::exp(dispersion) - 1.0);
        break;
      default:
        mu_c = var_c = 0.0;
    }
    mean += w * mu_c;
    second += w * (var_c + mu_c * mu_c);
  }
  return {mean, second - mean * mean};
}

struct LevelMoments {
  double mean = 0.0;
  double variance = 0.0;
  double between_super = 0.0;    // Var_v E(y | v)
  double between_cluster = 0.0;  // E_v Var_u E(y | v, u)
  double within = 0.0;           // E omega_c
};

// Three-level oracle: integrate the conditional moments over both random
// intercepts with a product Gauss-Hermite rule and decompose the variance
// by conditioning, not by the closed-form algebra.
inline LevelMoments brute_force_three_level(Family family, double eta_fixed,
                                            double sigma2_v, double sigma2_u,
                                            double dispersion, int nodes = 101) {
  const GaussHermite gh = gauss_hermite(nodes);
  const double sd_v = std::sqrt(sigma2_v);
  const double sd_u = std::sqrt(sigma2_u);
  const double inv_sqrt_pi = 1.0 / std::sqrt(M_PI);

  auto conditional = [&](double eta, double* mu_c, double* var_c) {
    switch (family) {
      case Family::Poisson:
        *mu_c = std::exp(eta);
        *var_c = *mu_c;
        break;
      case Family::NB2:
        *mu_c = std::exp(eta);
        *var_c = *mu_c + *mu_c * *mu_c * dispersion;
        break;
      case Family::NB1:
        *mu_c = std::exp(eta);
        *var_c = *mu_c * (1.0 + dispersion);
        break;
      case Family::PoissonLognormal:
        *mu_c = std::exp(eta + dispersion / 2.0);
        *var_c = *mu_c + *mu_c * *mu_c * (std::exp(dispersion) - 1.0);
        break;
    }
  };

  LevelMoments out;
  double second = 0.0;
  for (int a = 0; a < nodes; ++a) {
    const double v = std::sqrt(2.0) * sd_v * gh.nodes[a];
    const double wv = gh.weights[a] * inv_sqrt_pi;
    double mean_given_v = 0.0, second_mu_given_v = 0.0;
    double within_given_v = 0.0;
    for (int b = 0; b < nodes; ++b) {
      const double u = std::sqrt(2.0) * sd_u * gh.nodes[b];
      const double wu = gh.weights[b] * inv_sqrt_pi;
      double mu_c = 0.0, var_c = 0.0;
      conditional(eta_fixed + v + u, &mu_c, &var_c);
      mean_given_v += wu * mu_c;
      second_mu_given_v += wu * mu_c * mu_c;
      within_given_v += wu * var_c;
      second += wv * wu * (var_c + mu_c * mu_c);
    }
    out.mean += wv * mean_given_v;
    out.between_super += wv * mean_given_v * mean_given_v;
    out.between_cluster +=
        wv * (second_mu_given_v - mean_given_v * mean_given_v);
    out.within += wv * within_given_v;
  }
  out.between_super -= out.mean * out.mean;
  out.variance = second - out.mean * out.mean;
  return out;
}

}  // namespace testing
