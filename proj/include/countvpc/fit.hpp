#pragma once

// Maximum-likelihood fitting of two-level random-intercept Poisson and NB2
// models. Each cluster's random effect is integrated out by adaptive
// Gauss-Hermite quadrature (nodes recentered at the integrand's mode and
// rescaled by its curvature); the total log-likelihood is maximized by BFGS
// over (beta, ln sigma2_u[, ln alpha]).

#include <Eigen/Core>

#include <optional>
#include <string>
#include <vector>

#include "countvpc/data.hpp"
#include "countvpc/model.hpp"

namespace countvpc {

struct FitOptions {
  int n_quad_nodes = 7;  // odd preferred so a node sits at the mode
  int max_iterations = 200;
  double tol_loglik = 1e-8;    // relative log-likelihood change
  double tol_gradient = 1e-5;  // gradient max-norm
  // Optimize ln sigma2_u / ln alpha to keep the boundary open; when false
  // the raw values are optimized through |t| instead.
  bool transform_parameters = true;
  std::optional<double> fixed_alpha;  // NB2: hold alpha at this value
  int threads = 0;
};

struct FitResult {
  Family family = Family::Poisson;
  Eigen::VectorXd beta;
  std::vector<std::string> beta_names;
  double sigma2_u = 0.0;
  double alpha = 0.0;  // NB2 only

  Eigen::VectorXd se_beta;
  double se_sigma2_u = 0.0;
  double se_alpha = 0.0;

  double log_likelihood = 0.0;
  double deviance = 0.0;
  bool converged = false;
  int iterations = 0;
  bool boundary_sigma2_u = false;  // transformed parameter hit ln(1e-8)
  bool boundary_alpha = false;
  int n_quad_nodes = 7;
  size_t n_obs = 0;
  size_t n_clusters = 0;

  std::vector<std::string> cluster_ids;  // first-appearance order
  Eigen::VectorXd u_hat;                 // posterior-mean random effects
};

// ln Poisson(y; mu) = y ln mu - mu - ln Gamma(y+1).
double poisson_logpmf(long long y, double mu);

// NB2 pmf from the Poisson-Gamma(1/alpha, alpha*mu) mixture; mean mu,
// variance mu + mu^2 alpha. Dispatches to the Poisson pmf for
// alpha <= 1e-12.
double nb2_logpmf(long long y, double mu, double alpha);

// One cluster's rows. x has a leading column of ones; an empty x means
// intercept-only. offset may be empty.
struct ClusterRows {
  std::vector<long long> y;
  Eigen::MatrixXd x;
  Eigen::VectorXd offset;
};

// log integral prod_i p(y_i | exp(x_i'beta + offset_i + u)) phi(u; 0,
// sigma2_u) du via adaptive quadrature. sigma2_u = 0 short-circuits to the
// sum of log pmfs at u = 0. When the mode search fails the rule falls back
// to prior-scaled nodes at 0 and *mode_converged reports false.
double cluster_loglik(const ClusterRows& rows, const Eigen::VectorXd& beta,
                      double sigma2_u, double alpha, Family family,
                      const FitOptions& options = {},
                      bool* mode_converged = nullptr);

// Total log-likelihood over a two-level dataset at fixed parameters.
// Per-cluster terms are summed in ascending cluster order, so the value is
// bit-stable across thread counts.
double total_loglik(const Dataset& data, Family family,
                    const Eigen::VectorXd& beta, double sigma2_u, double alpha,
                    const FitOptions& options = {});

// The optimizer's internal gradient (central finite differences) of the
// total log-likelihood on the working parameter scale
// (beta, ln sigma2_u[, ln alpha]).
Eigen::VectorXd total_loglik_gradient(const Dataset& data, Family family,
                                      const Eigen::VectorXd& beta,
                                      double sigma2_u, double alpha,
                                      const FitOptions& options = {});

// Fixed-effects-only Poisson regression by IRLS; the starting values for
// fit_ml. Returns beta; fills *loglik with the Poisson log-likelihood at
// the solution when given.
Eigen::VectorXd irls_poisson(const Dataset& data, double* loglik = nullptr);

FitResult fit_ml(const Dataset& data, Family family,
                 const FitOptions& options = {});

// Posterior means E(u_j | y_j) at the fitted parameters, in the fit's
// cluster order.
Eigen::VectorXd predict_random_effects(const Dataset& data,
                                       const FitResult& fit,
                                       const FitOptions& options = {});

struct LrTest {
  double statistic = 0.0;
  double p_value = 1.0;
  int df = 1;
  // Naive chi-square p-value is conservative when the tested parameter
  // sits on a variance boundary.
  bool boundary_caveat = false;
};

LrTest lr_test(double loglik_null, double loglik_alt, int df,
               bool variance_on_boundary = false);

// Fitted parameters as a two-level ModelSpec, ready for stats/simulate.
ModelSpec to_model_spec(const FitResult& fit);

// Parameter-file JSON plus an "inference" block (standard errors,
// log-likelihood, deviance, convergence, quadrature nodes, random-effect
// predictions).
std::string fit_to_json_text(const FitResult& fit, int indent = 2);

}  // namespace countvpc
