#pragma once

// Closed-form conditional and marginal statistics for multilevel count
// models: expectation, total variance, per-level variance components,
// variance partition coefficients, and intraclass correlations.

#include <Eigen/Core>

#include <iosfwd>
#include <vector>

#include "countvpc/data.hpp"
#include "countvpc/model.hpp"

namespace countvpc {

// Expectation and variance of the response given the cluster (and, at three
// levels, supercluster) random effects, with any unit-level overdispersion
// effect integrated out.
struct ConditionalStats {
  double mu_c = 0.0;
  double omega_c = 0.0;
};

// Marginal statistics at one covariate configuration. comp_l3/vpc3 are zero
// for two-level specs. icc is the response correlation between two units
// sharing all grouping levels and the same covariate values; it equals vpc2
// at two levels and vpc23 at three. icc3 (three-level) is the correlation
// for units sharing only the supercluster and equals vpc3.
struct MarginalStats {
  double mu_m = 0.0;
  double variance = 0.0;
  double comp_l3 = 0.0;
  double comp_l2 = 0.0;
  double comp_l1 = 0.0;
  double vpc3 = 0.0;
  double vpc2 = 0.0;
  double vpc23 = 0.0;
  double vpc1 = 0.0;
  double icc = 0.0;
  double icc3 = 0.0;
  bool three_level = false;
};

struct VarianceComponents {
  double l3 = 0.0;
  double l2 = 0.0;
  double l1 = 0.0;
};

// eta is the full linear predictor x'beta + offset + realized random
// effects. Throws std::range_error when the exponent exceeds 700.
ConditionalStats conditional_stats(Family family, double eta,
                                   const Dispersion& dispersion);

// eta_fixed is x'beta + offset; z the random-part design vector (ignored
// for intercept parts).
double marginal_expectation(const ModelSpec& spec, double eta_fixed,
                            const Eigen::VectorXd& z);

VarianceComponents variance_components(const ModelSpec& spec, double mu_m,
                                       const Eigen::VectorXd& z);

MarginalStats marginal_stats(const ModelSpec& spec, double eta_fixed,
                             const Eigen::VectorXd& z);

inline double incidence_rate_ratio(double beta_k) { return std::exp(beta_k); }

// x'beta + offset for one dataset row, matching covariates by name.
// Throws when a model covariate is missing from the dataset.
double linear_predictor(const ModelSpec& spec, const Dataset& data, size_t row);

// Random-part design vector for one dataset row (z[0] = 1 for the
// intercept entry).
Eigen::VectorXd design_vector(const ModelSpec& spec, const Dataset& data,
                              size_t row);

struct FieldSummary {
  double mean = 0.0, min = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0, max = 0.0;
};

struct ProfileSummary {
  bool present = false;
  FieldSummary expectation, variance, variance3, variance2, variance1;
  FieldSummary vpc3, vpc2, vpc1;
};

struct ProfileResult {
  std::vector<MarginalStats> rows;  // input order
  ProfileSummary summary;
};

// Evaluates the marginal statistics for every observation. Rows may be
// computed in parallel; output order and values are independent of the
// thread count.
ProfileResult stats_profile(const ModelSpec& spec, const Dataset& data,
                            int threads = 0);

// CSV with header expectation,variance,variance3,variance2,variance1,
// vpc3,vpc2,vpc1; two-level profiles leave the level-3 columns empty.
void write_profile_csv(const ProfileResult& profile, std::ostream& out);

}  // namespace countvpc
