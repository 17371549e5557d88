#include "doctest.h"

#include <stdexcept>

#include "countvpc/model.hpp"
#include "countvpc/rng.hpp"
#include "helpers.hpp"

using namespace countvpc;

TEST_CASE("validate_spec accepts the worked models") {
  CHECK_NOTHROW(testing::poisson_spec(2.085, 0.100));
  CHECK_NOTHROW(testing::nb2_spec(2.088, 0.093, 0.877));
  CHECK_NOTHROW(testing::model5_spec(0.775));  // omega eigenvalues > 0
}

TEST_CASE("validate_spec rejects dispersion mismatches") {
  ModelSpec s;
  s.family = Family::NB2;
  s.fixed = FixedEffects::intercept_only(1.0);
  s.random = RandomPart::intercept(0.1);
  s.dispersion = Dispersion::delta(0.5);
  CHECK_THROWS_WITH_AS(validate_spec(s), doctest::Contains("dispersion mismatch"),
                       std::invalid_argument);

  s.dispersion = Dispersion::none();
  CHECK_THROWS_AS(validate_spec(s), std::invalid_argument);
}

TEST_CASE("validate_spec rejects negative variances and missing sigma2_v") {
  ModelSpec s;
  s.fixed = FixedEffects::intercept_only(1.0);
  s.random = RandomPart::intercept(-0.1);
  CHECK_THROWS_AS(validate_spec(s), std::invalid_argument);

  s.random = RandomPart::intercept(0.1);
  s.sigma2_v = -1.0;
  s.levels = Levels::Three;
  CHECK_THROWS_AS(validate_spec(s), std::invalid_argument);

  s.levels = Levels::Two;
  s.sigma2_v = 0.5;
  CHECK_THROWS_AS(validate_spec(s), std::invalid_argument);
}

TEST_CASE("validate_spec clamps boundary eigenvalues and rejects indefinite omega") {
  // Eigenvalues 3e-11 and -1e-11: inside the clamp band.
  Eigen::MatrixXd near_psd(2, 2);
  near_psd << 1e-11, 2e-11, 2e-11, 1e-11;
  ModelSpec s;
  s.fixed = FixedEffects::intercept_only(1.0);
  s.random = RandomPart::coefficient(near_psd, {"_cons", "x"});
  const ModelSpec ok = validate_spec(s);
  Eigen::VectorXd z(2);
  z << 1.0, -1.0;
  CHECK(cluster_variance_function(ok.random, z) >= 0.0);

  Eigen::MatrixXd indefinite(2, 2);
  indefinite << 1.0, 2.0, 2.0, 1.0;  // eigenvalue -1
  s.random = RandomPart::coefficient(indefinite, {"_cons", "x"});
  CHECK_THROWS_WITH_AS(validate_spec(s),
                       doctest::Contains("positive semi-definite"),
                       std::invalid_argument);
}

TEST_CASE("cluster_variance_function reproduces the fitted school variances") {
  const ModelSpec m5 = testing::model5_spec(0.775);
  Eigen::VectorXd z(2);
  z << 1.0, 0.0;
  CHECK(cluster_variance_function(m5.random, z) ==
        doctest::Approx(0.11603906).epsilon(1e-10));
  z << 1.0, 1.0;
  CHECK(cluster_variance_function(m5.random, z) ==
        doctest::Approx(0.09783479).epsilon(1e-8));

  const RandomPart zero =
      RandomPart::coefficient(Eigen::MatrixXd::Zero(2, 2), {"_cons", "x"});
  CHECK(cluster_variance_function(zero, z) == 0.0);
}

TEST_CASE("cluster_variance_function checks dimensions and ignores z for intercepts") {
  const RandomPart part = RandomPart::intercept(0.37);
  Eigen::VectorXd z(3);
  z << 1.0, -4.0, 2.5;
  CHECK(cluster_variance_function(part, z) == 0.37);
  CHECK(cluster_variance_function(part, Eigen::VectorXd::Zero(1)) == 0.37);

  const RandomPart coef =
      RandomPart::coefficient(Eigen::MatrixXd::Identity(2, 2), {"_cons", "x"});
  CHECK_THROWS_AS(cluster_variance_function(coef, z), std::invalid_argument);
}

TEST_CASE("quadratic form stays nonnegative for random PSD matrices") {
  Substream rng(7, 0, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = 2 + static_cast<int>(rng.next_u64() % 3);
    Eigen::MatrixXd a(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
    Eigen::MatrixXd omega = a.transpose() * a;  // PSD by construction
    omega = ((omega + omega.transpose()) / 2.0).eval();
    const RandomPart part = RandomPart::coefficient(
        omega, std::vector<std::string>(static_cast<size_t>(d), "x"));
    Eigen::VectorXd z(d);
    for (int i = 0; i < d; ++i) z[i] = 4.0 * rng.normal();
    CHECK(cluster_variance_function(part, z) >= 0.0);
  }
}

TEST_CASE("2x2 quadratic expansion matches the matrix form") {
  Substream rng(11, 0, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const double s0 = std::exp(rng.normal());
    const double s1 = std::exp(rng.normal());
    // Correlation inside (-1, 1) keeps omega positive definite.
    const double rho = 0.95 * (2.0 * rng.uniform() - 1.0);
    const double cov = rho * std::sqrt(s0 * s1);
    Eigen::MatrixXd omega(2, 2);
    omega << s0, cov, cov, s1;
    const RandomPart part = RandomPart::coefficient(omega, {"_cons", "x"});
    const double x = 3.0 * rng.normal();
    Eigen::VectorXd z(2);
    z << 1.0, x;
    const double expanded = s0 + 2.0 * cov * x + s1 * x * x;
    const double matrix_form = cluster_variance_function(part, z);
    CHECK(matrix_form == doctest::Approx(expanded).epsilon(1e-12));
  }
}

TEST_CASE("parameter-file JSON round trip") {
  const std::string text = R"({
    "family": "nb2", "levels": "three",
    "beta": [2.0860497, 0.25], "covariates": ["fsm"],
    "random": {"type": "intercept", "sigma2_u": 0.08692447},
    "sigma2_v": 0.00582819,
    "dispersion": {"alpha": 0.8766216}
  })";
  const ModelSpec spec = spec_from_json_text(text);
  CHECK(spec.family == Family::NB2);
  CHECK(spec.levels == Levels::Three);
  CHECK(spec.fixed.beta[1] == 0.25);
  CHECK(spec.fixed.names[1] == "fsm");
  CHECK(spec.sigma2_v == 0.00582819);

  const ModelSpec again = spec_from_json_text(spec_to_json_text(spec));
  CHECK(again.fixed.beta == spec.fixed.beta);
  CHECK(again.sigma2_v == spec.sigma2_v);
  CHECK(again.dispersion.value == spec.dispersion.value);

  const ModelSpec m5 = testing::model5_spec(0.775);
  const ModelSpec m5_again = spec_from_json_text(spec_to_json_text(m5));
  CHECK(m5_again.random.omega == m5.random.omega);
  CHECK(m5_again.random.z_columns == m5.random.z_columns);
}

TEST_CASE("parameter-file JSON errors") {
  CHECK_THROWS_AS(spec_from_json_text("not json"), std::invalid_argument);
  CHECK_THROWS_AS(spec_from_json_text("{}"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      spec_from_json_text(R"({"family":"nb2","beta":[1],
        "random":{"type":"intercept","sigma2_u":0.1},
        "dispersion":{"delta":0.5}})"),
      doctest::Contains("dispersion mismatch"), std::invalid_argument);
  // Three-level without the supercluster variance.
  CHECK_THROWS_WITH_AS(
      spec_from_json_text(R"({"family":"poisson","levels":"three","beta":[1],
        "random":{"type":"intercept","sigma2_u":0.1}})"),
      doctest::Contains("sigma2_v"), std::invalid_argument);
}
