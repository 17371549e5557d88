#include "doctest.h"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "countvpc/stats.hpp"
#include "helpers.hpp"

using namespace countvpc;

namespace {

Eigen::VectorXd z1() { return Eigen::VectorXd::Ones(1); }

Dataset one_row_dataset(const std::vector<std::string>& names,
                        const std::vector<double>& values, long long y = 0) {
  Dataset d;
  d.y = {y};
  d.cluster = {"1"};
  d.covariate_names = names;
  for (double v : values) d.covariates.push_back({v});
  return d;
}

}  // namespace

TEST_CASE("conditional statistics per family") {
  const ConditionalStats p =
      conditional_stats(Family::Poisson, std::log(5.0), Dispersion::none());
  CHECK(p.mu_c == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(p.omega_c == p.mu_c);

  const ConditionalStats nb2 =
      conditional_stats(Family::NB2, std::log(5.0), Dispersion::alpha(0.877));
  CHECK(nb2.mu_c == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(nb2.omega_c == doctest::Approx(26.925).epsilon(1e-10));

  const ConditionalStats nb1 =
      conditional_stats(Family::NB1, std::log(5.0), Dispersion::delta(0.5));
  CHECK(nb1.omega_c == doctest::Approx(7.5).epsilon(1e-12));

  const ConditionalStats pln = conditional_stats(
      Family::PoissonLognormal, std::log(5.0), Dispersion::lognormal(0.3));
  CHECK(pln.mu_c == doctest::Approx(5.0 * std::exp(0.15)).epsilon(1e-12));
  CHECK(pln.omega_c ==
        doctest::Approx(pln.mu_c + pln.mu_c * pln.mu_c * (std::exp(0.3) - 1.0))
            .epsilon(1e-12));
  CHECK(pln.omega_c > pln.mu_c);
}

TEST_CASE("conditional statistics reject overflowing exponents") {
  CHECK_THROWS_AS(conditional_stats(Family::Poisson, 701.0, Dispersion::none()),
                  std::range_error);
  CHECK_THROWS_AS(conditional_stats(Family::Poisson,
                                    std::numeric_limits<double>::quiet_NaN(),
                                    Dispersion::none()),
                  std::invalid_argument);
}

TEST_CASE("marginal expectation matches the fitted models") {
  const ModelSpec m1 = testing::poisson_spec(2.085, 0.100);
  CHECK(marginal_expectation(m1, 2.085, z1()) ==
        doctest::Approx(8.457).epsilon(1e-3));

  const ModelSpec m3 =
      testing::nb2_three_level(2.0860497, 0.00582819, 0.08692447, 0.8766216);
  CHECK(marginal_expectation(m3, 2.0860497, z1()) ==
        doctest::Approx(8.4353062).epsilon(1e-6));

  const ModelSpec unit = testing::poisson_spec(0.0, 0.0);
  CHECK(marginal_expectation(unit, 0.0, z1()) == 1.0);

  // The lognormal overdispersion shifts the expectation too.
  const ModelSpec pln = testing::pln_spec(1.0, 0.2, 0.3);
  CHECK(marginal_expectation(pln, 1.0, z1()) ==
        doctest::Approx(std::exp(1.0 + 0.1 + 0.15)).epsilon(1e-12));
}

TEST_CASE("variance components match Table 1") {
  const ModelSpec m2 = testing::nb2_spec(2.088, 0.093, 0.877);
  const double mu2 = marginal_expectation(m2, 2.088, z1());
  const VarianceComponents c2 = variance_components(m2, mu2, z1());
  CHECK(c2.l2 == doctest::Approx(6.95).epsilon(0.01));
  CHECK(c2.l1 == doctest::Approx(77.15).epsilon(0.002));

  const ModelSpec m3 =
      testing::nb2_three_level(2.0860497, 0.00582819, 0.08692447, 0.8766216);
  const double mu3 = marginal_expectation(m3, 2.0860497, z1());
  const VarianceComponents c3 = variance_components(m3, mu3, z1());
  CHECK(c3.l3 == doctest::Approx(0.41591198).epsilon(1e-5));
  CHECK(c3.l2 == doctest::Approx(6.4996057).epsilon(1e-5));
  CHECK(c3.l1 == doctest::Approx(76.873075).epsilon(1e-5));

  const ModelSpec flat = testing::poisson_spec(1.3, 0.0);
  const double mu = marginal_expectation(flat, 1.3, z1());
  const VarianceComponents cf = variance_components(flat, mu, z1());
  CHECK(cf.l2 == 0.0);
  CHECK(cf.l1 == mu);
}

TEST_CASE("marginal statistics reproduce the published VPCs") {
  const MarginalStats m1 =
      marginal_stats(testing::poisson_spec(2.085, 0.100), 2.085, z1());
  CHECK(m1.vpc2 == doctest::Approx(0.47075291).epsilon(2e-4));
  CHECK(m1.vpc1 == doctest::Approx(0.52924709).epsilon(2e-4));
  CHECK(m1.icc == m1.vpc2);

  const MarginalStats m2 =
      marginal_stats(testing::nb2_spec(2.088, 0.093, 0.877), 2.088, z1());
  CHECK(m2.variance == doctest::Approx(84.098316).epsilon(2e-3));
  CHECK(m2.vpc2 == doctest::Approx(0.08262367).epsilon(2e-3));

  const MarginalStats m3 = marginal_stats(
      testing::nb2_three_level(2.0860497, 0.00582819, 0.08692447, 0.8766216),
      2.0860497, z1());
  CHECK(m3.vpc3 == doctest::Approx(0.00496383).epsilon(1e-5));
  CHECK(m3.vpc2 == doctest::Approx(0.07757149).epsilon(1e-5));
  CHECK(m3.vpc1 == doctest::Approx(0.91746469).epsilon(1e-5));
  CHECK(m3.vpc23 == doctest::Approx(m3.vpc3 + m3.vpc2).epsilon(1e-12));
  CHECK(m3.icc3 == m3.vpc3);
  CHECK(m3.icc == m3.vpc23);

  // Random-coefficient model, FSM student.
  const ModelSpec m5 = testing::model5_spec(0.775);
  Eigen::VectorXd z_fsm(2);
  z_fsm << 1.0, 1.0;
  const MarginalStats fsm = marginal_stats(m5, 2.126 + 0.372, z_fsm);
  CHECK(fsm.mu_m == doctest::Approx(12.76).epsilon(1e-3));
  CHECK(fsm.variance == doctest::Approx(168.44).epsilon(3e-3));
  CHECK(fsm.vpc2 == doctest::Approx(0.10).epsilon(0.02));
}

TEST_CASE("incidence rate ratios") {
  CHECK(incidence_rate_ratio(0.377) == doctest::Approx(1.4579).epsilon(1e-4));
  CHECK(incidence_rate_ratio(0.0) == 1.0);
  CHECK(incidence_rate_ratio(0.372) == doctest::Approx(1.4507).epsilon(1e-4));
}

TEST_CASE("marginal stats invariants over a family sweep") {
  const std::vector<ModelSpec> specs = {
      testing::poisson_spec(1.7, 0.21),
      testing::nb2_spec(1.7, 0.21, 0.6),
      testing::nb1_spec(1.7, 0.21, 0.8),
      testing::pln_spec(1.7, 0.21, 0.35),
      testing::nb2_three_level(1.7, 0.04, 0.21, 0.6),
  };
  for (const auto& spec : specs) {
    const MarginalStats s = marginal_stats(spec, 1.7, z1());
    CHECK(s.variance ==
          doctest::Approx(s.comp_l3 + s.comp_l2 + s.comp_l1).epsilon(1e-12));
    CHECK(s.vpc3 + s.vpc2 + s.vpc1 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.vpc2 >= 0.0);
    CHECK(s.vpc2 <= 1.0);
    CHECK(s.vpc1 >= 0.0);
    CHECK(s.vpc1 <= 1.0);
    if (!s.three_level) CHECK(s.icc == s.vpc2);
  }
}

TEST_CASE("level-2 component is family-invariant given mu and s2") {
  const double mu = 7.3;
  const std::vector<ModelSpec> specs = {
      testing::poisson_spec(1.0, 0.21),
      testing::nb2_spec(1.0, 0.21, 0.6),
      testing::nb1_spec(1.0, 0.21, 0.8),
      testing::pln_spec(1.0, 0.21, 0.35),
  };
  const double reference = variance_components(specs[0], mu, z1()).l2;
  for (const auto& spec : specs) {
    const double l2 = variance_components(spec, mu, z1()).l2;
    CHECK(l2 == doctest::Approx(reference).epsilon(1e-12));
  }
}

TEST_CASE("NB2 with zero overdispersion collapses to Poisson bitwise") {
  const ModelSpec poisson = testing::poisson_spec(2.085, 0.1);
  const ModelSpec nb2 = testing::nb2_spec(2.085, 0.1, 0.0);
  const MarginalStats a = marginal_stats(poisson, 2.085, z1());
  const MarginalStats b = marginal_stats(nb2, 2.085, z1());
  CHECK(a.mu_m == b.mu_m);
  CHECK(a.variance == b.variance);
  CHECK(a.comp_l2 == b.comp_l2);
  CHECK(a.comp_l1 == b.comp_l1);
  CHECK(a.vpc2 == b.vpc2);
  CHECK(a.vpc1 == b.vpc1);
}

TEST_CASE("lognormal overdispersion matches NB2 at sigma2_e = ln(1+alpha)") {
  // Equal marginal expectations are supplied directly; the families then
  // agree on every component.
  const double mu = 9.1;
  for (double alpha : {0.1, 0.5, 0.877, 1.6}) {
    const ModelSpec nb2 = testing::nb2_spec(1.0, 0.21, alpha);
    const ModelSpec pln = testing::pln_spec(1.0, 0.21, std::log1p(alpha));
    const VarianceComponents a = variance_components(nb2, mu, z1());
    const VarianceComponents b = variance_components(pln, mu, z1());
    CHECK(a.l2 == doctest::Approx(b.l2).epsilon(1e-12));
    CHECK(a.l1 == doctest::Approx(b.l1).epsilon(1e-12));
    const double vpc_a = a.l2 / (a.l2 + a.l1);
    const double vpc_b = b.l2 / (b.l2 + b.l1);
    CHECK(vpc_a == doctest::Approx(vpc_b).epsilon(1e-12));
  }
}

TEST_CASE("vpc2 is monotone in the expectation and the overdispersion") {
  // 20x20 grid: increasing in mu at fixed alpha, decreasing in alpha at
  // fixed mu.
  const double s2 = 0.1;
  std::vector<double> mus, alphas;
  for (int i = 0; i < 20; ++i) {
    mus.push_back(2.0 + i * (18.0 / 19.0));
    alphas.push_back(0.05 + i * (1.95 / 19.0));
  }
  auto vpc2_of = [&](double mu, double alpha) {
    const ModelSpec spec = testing::nb2_spec(1.0, s2, alpha);
    const VarianceComponents c = variance_components(spec, mu, z1());
    return c.l2 / (c.l2 + c.l1);
  };
  for (double alpha : alphas) {
    for (size_t i = 1; i < mus.size(); ++i)
      CHECK(vpc2_of(mus[i], alpha) > vpc2_of(mus[i - 1], alpha));
  }
  for (double mu : mus) {
    for (size_t i = 1; i < alphas.size(); ++i)
      CHECK(vpc2_of(mu, alphas[i]) < vpc2_of(mu, alphas[i - 1]));
  }
}

TEST_CASE("closed forms agree with dense quadrature over the random effect") {
  struct Case {
    ModelSpec spec;
    double disp;
  };
  const std::vector<Case> cases = {
      {testing::poisson_spec(2.085, 0.100), 0.0},
      {testing::nb2_spec(2.088, 0.093, 0.877), 0.877},
      {testing::nb1_spec(1.6, 0.25, 0.9), 0.9},
      {testing::pln_spec(1.2, 0.15, 0.4), 0.4},
  };
  for (const auto& c : cases) {
    const double eta = c.spec.fixed.beta[0];
    const double s2 = c.spec.random.sigma2_u;
    const testing::Moments oracle =
        testing::brute_force_moments(c.spec.family, eta, s2, c.disp);
    const MarginalStats s = marginal_stats(c.spec, eta, z1());
    CHECK(s.mu_m == doctest::Approx(oracle.mean).epsilon(1e-6));
    CHECK(s.variance == doctest::Approx(oracle.variance).epsilon(1e-6));
  }

  // Random-coefficient spec: the scalar effect z'u has variance z'Omega z.
  const ModelSpec m5 = testing::model5_spec(0.77526043);
  Eigen::VectorXd z_fsm(2);
  z_fsm << 1.0, 1.0;
  const double eta = 2.126 + 0.372;
  const double s2 = cluster_variance_function(m5.random, z_fsm);
  const testing::Moments oracle =
      testing::brute_force_moments(Family::NB2, eta, s2, 0.77526043);
  const MarginalStats s = marginal_stats(m5, eta, z_fsm);
  CHECK(s.mu_m == doctest::Approx(oracle.mean).epsilon(1e-6));
  CHECK(s.variance == doctest::Approx(oracle.variance).epsilon(1e-6));
}

TEST_CASE("three-level components agree with conditioning-based quadrature") {
  // The oracle decomposes the variance by conditioning on each random
  // intercept in turn, independently of the closed-form algebra.
  struct Case {
    ModelSpec spec;
    double disp;
  };
  const std::vector<Case> cases = {
      {testing::nb2_three_level(2.0860497, 0.00582819, 0.08692447, 0.8766216),
       0.8766216},
      {testing::nb2_three_level(1.4, 0.05, 0.3, 0.0), 0.0},  // Poisson limit
  };
  ModelSpec nb1_three = testing::nb1_spec(1.6, 0.2, 0.7);
  nb1_three.levels = Levels::Three;
  nb1_three.sigma2_v = 0.06;
  nb1_three = validate_spec(std::move(nb1_three));

  ModelSpec pln_three = testing::pln_spec(1.3, 0.18, 0.4);
  pln_three.levels = Levels::Three;
  pln_three.sigma2_v = 0.04;
  pln_three = validate_spec(std::move(pln_three));

  auto check = [&](const ModelSpec& spec, double disp) {
    const double eta = spec.fixed.beta[0];
    const testing::LevelMoments oracle = testing::brute_force_three_level(
        spec.family, eta, spec.sigma2_v, spec.random.sigma2_u, disp);
    const MarginalStats s = marginal_stats(spec, eta, z1());
    CHECK(s.mu_m == doctest::Approx(oracle.mean).epsilon(1e-6));
    CHECK(s.variance == doctest::Approx(oracle.variance).epsilon(1e-6));
    CHECK(s.comp_l3 == doctest::Approx(oracle.between_super).epsilon(1e-6));
    CHECK(s.comp_l2 == doctest::Approx(oracle.between_cluster).epsilon(1e-6));
    CHECK(s.comp_l1 == doctest::Approx(oracle.within).epsilon(1e-6));
  };
  for (const auto& c : cases) check(c.spec, c.disp);
  check(nb1_three, 0.7);
  check(pln_three, 0.4);
}

TEST_CASE("stats_profile reproduces the per-student exact statistics") {
  // Covariate-adjusted NB2 with the FSM effect only; the remaining
  // covariates are zero for both profiled students.
  ModelSpec m4;
  m4.family = Family::NB2;
  Eigen::VectorXd beta(2);
  beta << 2.126, 0.377;
  m4.fixed.beta = beta;
  m4.fixed.names = {"_cons", "fsm"};
  m4.random = RandomPart::intercept(0.103);
  m4.dispersion = Dispersion::alpha(0.782);
  m4 = validate_spec(m4);

  Dataset rows;
  rows.y = {0, 0};
  rows.cluster = {"1", "1"};
  rows.covariate_names = {"fsm"};
  rows.covariates = {{0.0, 1.0}};

  const ProfileResult profile = stats_profile(m4, rows);
  REQUIRE(profile.rows.size() == 2);
  const MarginalStats& ref = profile.rows[0];
  CHECK(ref.mu_m == doctest::Approx(8.82).epsilon(1e-3));
  CHECK(ref.variance == doctest::Approx(84.77).epsilon(1e-3));
  CHECK(ref.comp_l2 == doctest::Approx(8.45).epsilon(1e-3));
  CHECK(ref.comp_l1 == doctest::Approx(76.32).epsilon(1e-3));
  CHECK(ref.vpc2 == doctest::Approx(0.10).epsilon(0.01));

  const MarginalStats& fsm = profile.rows[1];
  CHECK(fsm.mu_m == doctest::Approx(12.86).epsilon(1e-3));
  CHECK(fsm.variance == doctest::Approx(174.29).epsilon(1e-3));
  CHECK(fsm.comp_l2 == doctest::Approx(17.96).epsilon(1e-3));
  CHECK(fsm.vpc2 == doctest::Approx(0.10).epsilon(0.05));

  CHECK(profile.summary.present);
  CHECK(profile.summary.expectation.min == ref.mu_m);
  CHECK(profile.summary.expectation.max == fsm.mu_m);
}

TEST_CASE("stats_profile edge cases") {
  const ModelSpec spec = testing::nb2_spec(2.0, 0.1, 0.5);

  Dataset empty;
  const ProfileResult none = stats_profile(spec, empty);
  CHECK(none.rows.empty());
  CHECK_FALSE(none.summary.present);

  // A spec covariate that the dataset lacks.
  ModelSpec with_cov = spec;
  with_cov.fixed.beta = Eigen::Vector2d(2.0, 0.3);
  with_cov.fixed.names = {"_cons", "fsm"};
  const Dataset plain = one_row_dataset({}, {});
  CHECK_THROWS_WITH_AS(stats_profile(with_cov, plain),
                       doctest::Contains("fsm"), std::invalid_argument);

  const Dataset bad = one_row_dataset(
      {"fsm"}, {std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(stats_profile(with_cov, bad), std::invalid_argument);
}

TEST_CASE("offsets enter the linear predictor with coefficient one") {
  const ModelSpec spec = testing::poisson_spec(1.0, 0.1);
  Dataset d;
  d.y = {0, 0};
  d.cluster = {"1", "1"};
  d.offset = {0.0, std::log(2.0)};
  const ProfileResult profile = stats_profile(spec, d);
  REQUIRE(profile.rows.size() == 2);
  // Doubling the exposure doubles the expected count.
  CHECK(profile.rows[1].mu_m ==
        doctest::Approx(2.0 * profile.rows[0].mu_m).epsilon(1e-12));
}

TEST_CASE("profile rows are independent of the thread count") {
  const ModelSpec spec = testing::nb2_spec(2.0, 0.1, 0.5);
  Dataset d;
  for (int i = 0; i < 200; ++i) {
    d.y.push_back(0);
    d.cluster.push_back("c");
  }
  d.covariate_names = {"x"};
  d.covariates.emplace_back();
  for (int i = 0; i < 200; ++i)
    d.covariates[0].push_back(std::sin(0.1 * i));

  ModelSpec with_cov = spec;
  with_cov.fixed.beta = Eigen::Vector2d(2.0, 0.3);
  with_cov.fixed.names = {"_cons", "x"};

  const ProfileResult serial = stats_profile(with_cov, d, 1);
  const ProfileResult parallel = stats_profile(with_cov, d, 4);
  REQUIRE(serial.rows.size() == parallel.rows.size());
  for (size_t i = 0; i < serial.rows.size(); ++i) {
    CHECK(serial.rows[i].mu_m == parallel.rows[i].mu_m);
    CHECK(serial.rows[i].variance == parallel.rows[i].variance);
  }
}

TEST_CASE("profile CSV leaves level-3 columns blank for two-level specs") {
  const ModelSpec spec = testing::poisson_spec(2.085, 0.1);
  ProfileResult profile;
  profile.rows.push_back(marginal_stats(spec, 2.085, z1()));
  std::ostringstream out;
  write_profile_csv(profile, out);
  const std::string text = out.str();
  CHECK(text.find("expectation,variance,variance3,variance2,variance1,"
                  "vpc3,vpc2,vpc1\n") == 0);
  CHECK(text.find(",,") != std::string::npos);

  ProfileResult three;
  three.rows.push_back(marginal_stats(
      testing::nb2_three_level(2.0, 0.01, 0.1, 0.5), 2.0, z1()));
  std::ostringstream out3;
  write_profile_csv(three, out3);
  CHECK(out3.str().find(",,") == std::string::npos);
}
