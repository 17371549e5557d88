#pragma once

// Domain types for multilevel count models: model family, level structure,
// fixed effects, random part (intercept variance or covariance matrix with
// a design vector), and the per-family overdispersion parameter.

#include <Eigen/Core>

#include <string>
#include <vector>

namespace countvpc {

enum class Family { Poisson, PoissonLognormal, NB2, NB1 };
enum class Levels { Two, Three };

std::string family_name(Family f);
Family family_from_name(const std::string& name);

// Log-scale regression coefficients. beta[0] is always the intercept and
// names[0] is always "_cons"; categorical covariates enter pre-expanded.
struct FixedEffects {
  Eigen::VectorXd beta;
  std::vector<std::string> names;

  static FixedEffects intercept_only(double beta0);
};

// Between-cluster random part: either a scalar intercept variance or a
// covariance matrix Omega with labelled design entries (row 0 = intercept).
struct RandomPart {
  enum class Kind { Intercept, Coefficient };

  Kind kind = Kind::Intercept;
  double sigma2_u = 0.0;            // Intercept variant
  Eigen::MatrixXd omega;            // Coefficient variant, symmetric PSD
  std::vector<std::string> z_columns;

  static RandomPart intercept(double sigma2_u);
  static RandomPart coefficient(Eigen::MatrixXd omega,
                                std::vector<std::string> z_columns);

  int dim() const {
    return kind == Kind::Intercept ? 1 : static_cast<int>(omega.rows());
  }
};

// Overdispersion parameter; the legal variant depends on the family:
// Poisson -> None, PoissonLognormal -> sigma2_e, NB2 -> alpha, NB1 -> delta.
struct Dispersion {
  enum class Kind { None, LognormalSigma2e, Alpha, Delta };

  Kind kind = Kind::None;
  double value = 0.0;

  static Dispersion none() { return {}; }
  static Dispersion lognormal(double sigma2_e) {
    return {Kind::LognormalSigma2e, sigma2_e};
  }
  static Dispersion alpha(double a) { return {Kind::Alpha, a}; }
  static Dispersion delta(double d) { return {Kind::Delta, d}; }
};

struct ModelSpec {
  Family family = Family::Poisson;
  Levels levels = Levels::Two;
  FixedEffects fixed;
  RandomPart random;
  double sigma2_v = 0.0;  // supercluster variance, three-level only
  Dispersion dispersion;
};

// Checks all invariants and returns the spec, with near-zero negative
// eigenvalues of Omega (>= -1e-10) clamped to zero. Throws
// std::invalid_argument naming the first violated invariant.
ModelSpec validate_spec(ModelSpec spec);

// Between-cluster variance at design vector z: sigma2_u for an intercept
// part, z'Omega z for a coefficient part (z ignored for the former).
double cluster_variance_function(const RandomPart& random,
                                 const Eigen::VectorXd& z);

// JSON parameter-file schema:
//   {"family":"nb2","levels":"two","beta":[2.088],"covariates":[],
//    "random":{"type":"intercept","sigma2_u":0.093},
//    "dispersion":{"alpha":0.877}}
// "covariates" names the non-intercept entries of beta; "sigma2_v" is
// required for three-level specs; "dispersion" is absent for Poisson.
ModelSpec spec_from_json_text(const std::string& text);
std::string spec_to_json_text(const ModelSpec& spec, int indent = 2);
ModelSpec load_spec(const std::string& path);

}  // namespace countvpc
