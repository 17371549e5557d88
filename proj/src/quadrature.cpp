#include "countvpc/quadrature.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>

namespace countvpc {

GaussHermite gauss_hermite(int n) {
  if (n < 1) throw std::invalid_argument("quadrature rule needs >= 1 node");
  constexpr double kLogSqrtPi = 0.5723649429247000870717136756765294;  // ln sqrt(pi)

  GaussHermite rule;
  if (n == 1) {
    rule.nodes = Eigen::VectorXd::Zero(1);
    rule.weights = Eigen::VectorXd::Constant(1, std::exp(kLogSqrtPi));
    rule.log_weights = Eigen::VectorXd::Constant(1, kLogSqrtPi);
    return rule;
  }

  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double off = std::sqrt(static_cast<double>(i) / 2.0);
    jacobi(i, i - 1) = off;
    jacobi(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);
  rule.nodes = es.eigenvalues();
  rule.weights.resize(n);
  rule.log_weights.resize(n);
  for (int i = 0; i < n; ++i) {
    const double first = es.eigenvectors()(0, i);
    rule.log_weights[i] = kLogSqrtPi + 2.0 * std::log(std::fabs(first));
    rule.weights[i] = std::exp(rule.log_weights[i]);
  }
  return rule;
}

}  // namespace countvpc
