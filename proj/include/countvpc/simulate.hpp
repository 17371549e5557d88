#pragma once

// Monte Carlo verification of the closed-form marginal statistics: treat a
// model spec as a data generating process, simulate a large balanced
// dataset, and re-estimate the statistics from sample moments.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "countvpc/data.hpp"
#include "countvpc/model.hpp"
#include "countvpc/stats.hpp"

namespace countvpc {

inline constexpr uint64_t kDefaultSeed = 20233301;

struct SimConfig {
  int n_superclusters = 100;  // K, three-level only
  int n_clusters = 10000;     // J (per supercluster at three levels)
  int n_units = 1000;         // units per cluster
  uint64_t seed = kDefaultSeed;
  int threads = 0;  // 0 = all hardware threads

  // J=10000, n=1000 two-level; K=100, J=100, n=1000 three-level.
  static SimConfig full_scale(Levels levels);
  // J=2000, n=200 two-level; K=100, J=20, n=200 three-level.
  static SimConfig desk_scale(Levels levels);
};

// A fixed covariate configuration replicated to every simulated unit, for
// specs with covariates. Values match the spec's covariate names.
struct CovariateRow {
  std::vector<std::string> names;
  std::vector<double> values;
};

// Generates v_k, u_j (or the random-coefficient vector), the family's
// unit-level overdispersion draw, and y ~ Poisson(mu). Deterministic given
// (spec, cfg) regardless of thread count; zero dispersion falls back to the
// pure Poisson path.
Dataset simulate_dataset(const ModelSpec& spec, const SimConfig& cfg,
                         const CovariateRow* row = nullptr);

// Moment-based analogue of MarginalStats. variance is the component sum;
// sample_variance keeps the raw N-1 sample variance of y alongside.
// vpc_defined is false when the data are constant.
struct EstimatedStats {
  double expectation = 0.0;
  double variance = 0.0;
  double comp_l3 = 0.0;
  double comp_l2 = 0.0;
  double comp_l1 = 0.0;
  double vpc3 = 0.0;
  double vpc2 = 0.0;
  double vpc1 = 0.0;
  double sample_variance = 0.0;
  bool vpc_defined = true;
  bool three_level = false;
};

// Sample-moment decomposition: between-(super)cluster variances of group
// means and the within-cluster deviation variance, all with n-1
// denominators, accumulated in ascending cluster order. The between
// component is the raw variance of the group means, so it carries an
// upward bias of roughly comp_l1 / n_units that shrinks as clusters grow;
// the component sum is unbiased because the within estimator loses the
// same amount.
EstimatedStats estimate_components(const Dataset& data, Levels levels);

struct SimReport {
  MarginalStats exact;
  EstimatedStats simulated;

  struct Fields {
    double expectation = 0.0;
    double variance = 0.0;
    double comp_l3 = 0.0;
    double comp_l2 = 0.0;
    double comp_l1 = 0.0;
    double vpc3 = 0.0;
    double vpc2 = 0.0;
    double vpc1 = 0.0;
  };
  Fields abs_diff;
  Fields rel_diff;  // |sim - exact| / |exact|, 0 when exact is 0
};

// simulate + estimate, paired with the closed forms at the given covariate
// row (all covariates zero when absent).
SimReport verify(const ModelSpec& spec, const SimConfig& cfg,
                 const CovariateRow* row = nullptr);

std::string report_to_json_text(const SimReport& report, int indent = 2);
void print_report(const SimReport& report, std::ostream& out);

}  // namespace countvpc
