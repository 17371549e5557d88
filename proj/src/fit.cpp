#include "countvpc/fit.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>

#include "countvpc/parallel.hpp"
#include "countvpc/quadrature.hpp"
#include "json.hpp"

namespace countvpc {

namespace {

constexpr double kAlphaPoissonCutoff = 1e-12;
constexpr double kBoundary = 1e-8;
constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

double require_positive_mu(double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("mu must be > 0");
  return mu;
}

}  // namespace

double poisson_logpmf(long long y, double mu) {
  if (y < 0) throw std::invalid_argument("count must be >= 0");
  require_positive_mu(mu);
  return static_cast<double>(y) * std::log(mu) - mu -
         std::lgamma(static_cast<double>(y) + 1.0);
}

double nb2_logpmf(long long y, double mu, double alpha) {
  if (y < 0) throw std::invalid_argument("count must be >= 0");
  require_positive_mu(mu);
  if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
  if (alpha <= kAlphaPoissonCutoff) return poisson_logpmf(y, mu);
  const double r = 1.0 / alpha;
  const double yd = static_cast<double>(y);
  return std::lgamma(yd + r) - std::lgamma(r) - std::lgamma(yd + 1.0) +
         r * std::log(r / (r + mu)) + yd * std::log(mu / (r + mu));
}

// --- per-cluster quadrature --------------------------------------------------

namespace {

// One cluster prepared for repeated likelihood evaluation. When every row
// shares the same linear predictor (intercept-only, no offset) rows are
// grouped by count value so each quadrature node costs O(#distinct y).
struct ClusterWork {
  std::vector<long long> y;
  Eigen::MatrixXd x;       // n x p, p >= 1, column 0 all ones
  Eigen::VectorXd offset;  // size 0 or n
  std::string id;

  bool constant_eta = false;
  std::vector<std::pair<long long, double>> y_groups;  // (y, count)
  double sum_y = 0.0;
  double sum_lgamma = 0.0;  // sum ln Gamma(y_i + 1)

  void finalize() {
    constant_eta = x.cols() == 1 && offset.size() == 0;
    std::map<long long, double> counts;
    for (long long v : y) counts[v] += 1.0;
    y_groups.assign(counts.begin(), counts.end());
    for (long long v : y) {
      sum_y += static_cast<double>(v);
      sum_lgamma += std::lgamma(static_cast<double>(v) + 1.0);
    }
  }
};

// ln Gamma(y + 1/alpha) for y = 0..max_y, shared across clusters; rebuilt
// whenever alpha changes.
struct Nb2Table {
  double alpha = -1.0;
  double r = 0.0;
  double r_log_r = 0.0;
  double lgamma_r = 0.0;
  std::vector<double> lgamma_y_r;

  void rebuild(double a, long long max_y) {
    alpha = a;
    r = 1.0 / a;
    r_log_r = r * std::log(r);
    lgamma_r = std::lgamma(r);
    lgamma_y_r.resize(static_cast<size_t>(max_y) + 1);
    for (long long y = 0; y <= max_y; ++y)
      lgamma_y_r[static_cast<size_t>(y)] = std::lgamma(static_cast<double>(y) + r);
  }
};

// Value and first two u-derivatives of sum_i ln p(y_i | exp(eta_i + u)).
struct UEval {
  double val = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
};

UEval eval_conditional(const ClusterWork& cw, const Eigen::VectorXd& eta,
                       Family family, const Nb2Table* nb2, double u) {
  UEval out;
  const bool poisson = family == Family::Poisson || nb2 == nullptr;
  if (cw.constant_eta) {
    const double log_mu = eta[0] + u;
    const double mu = std::exp(log_mu);
    if (poisson) {
      out.val = cw.sum_y * log_mu - static_cast<double>(cw.y.size()) * mu -
                cw.sum_lgamma;
      out.d1 = cw.sum_y - static_cast<double>(cw.y.size()) * mu;
      out.d2 = -static_cast<double>(cw.y.size()) * mu;
      return out;
    }
    const double r = nb2->r;
    const double log_r_mu = std::log(r + mu);
    const double alpha = nb2->alpha;
    const double denom = 1.0 + alpha * mu;
    for (const auto& [y, count] : cw.y_groups) {
      const double yd = static_cast<double>(y);
      out.val += count * (nb2->lgamma_y_r[static_cast<size_t>(y)] - nb2->lgamma_r -
                          std::lgamma(yd + 1.0) + nb2->r_log_r -
                          (yd + r) * log_r_mu + yd * log_mu);
      out.d1 += count * (yd - mu) / denom;
      out.d2 -= count * mu * (1.0 + alpha * yd) / (denom * denom);
    }
    return out;
  }

  for (size_t i = 0; i < cw.y.size(); ++i) {
    const double log_mu = eta[static_cast<Eigen::Index>(i)] + u;
    const double mu = std::exp(log_mu);
    const double yd = static_cast<double>(cw.y[i]);
    if (poisson) {
      out.val += yd * log_mu - mu;
      out.d1 += yd - mu;
      out.d2 -= mu;
    } else {
      const double r = nb2->r;
      const double alpha = nb2->alpha;
      const double denom = 1.0 + alpha * mu;
      out.val += nb2->lgamma_y_r[static_cast<size_t>(cw.y[i])] - nb2->lgamma_r +
                 nb2->r_log_r - (yd + r) * std::log(r + mu) + yd * log_mu;
      out.d1 += (yd - mu) / denom;
      out.d2 -= mu * (1.0 + alpha * yd) / (denom * denom);
    }
  }
  out.val -= cw.sum_lgamma;
  return out;
}

struct AghqResult {
  double loglik = 0.0;
  double posterior_mean = 0.0;
  bool mode_converged = true;
};

AghqResult aghq_cluster(const ClusterWork& cw, const Eigen::VectorXd& eta,
                        Family family, const Nb2Table* nb2, double sigma2_u,
                        const GaussHermite& gh, bool want_posterior_mean) {
  AghqResult res;
  if (sigma2_u <= 0.0) {
    res.loglik = eval_conditional(cw, eta, family, nb2, 0.0).val;
    res.posterior_mean = 0.0;
    return res;
  }

  // Mode of the log integrand by safeguarded Newton (concave in u).
  const double inv_s2 = 1.0 / sigma2_u;
  double mode = 0.0;
  bool found = false;
  for (int iter = 0; iter < 100; ++iter) {
    const UEval e = eval_conditional(cw, eta, family, nb2, mode);
    const double g1 = e.d1 - mode * inv_s2;
    const double g2 = e.d2 - inv_s2;
    double step = -g1 / g2;
    if (step > 3.0) step = 3.0;
    if (step < -3.0) step = -3.0;
    mode += step;
    if (std::fabs(step) < 1e-12 * (1.0 + std::fabs(mode))) {
      found = true;
      break;
    }
  }
  double scale;
  if (found) {
    const UEval e = eval_conditional(cw, eta, family, nb2, mode);
    scale = 1.0 / std::sqrt(-(e.d2 - inv_s2));
  } else {
    mode = 0.0;
    scale = std::sqrt(sigma2_u);
    res.mode_converged = false;
  }

  const double log_prior_norm = -0.5 * (kLog2Pi + std::log(sigma2_u));
  const double sqrt2_scale = std::sqrt(2.0) * scale;
  const int m = static_cast<int>(gh.nodes.size());
  double max_term = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd terms(m), points(m);
  for (int q = 0; q < m; ++q) {
    const double u = mode + sqrt2_scale * gh.nodes[q];
    const double g = eval_conditional(cw, eta, family, nb2, u).val +
                     log_prior_norm - 0.5 * u * u * inv_s2;
    const double t = gh.log_weights[q] + gh.nodes[q] * gh.nodes[q] + g;
    terms[q] = t;
    points[q] = u;
    if (t > max_term) max_term = t;
  }
  double sum = 0.0, weighted_u = 0.0;
  for (int q = 0; q < m; ++q) {
    const double w = std::exp(terms[q] - max_term);
    sum += w;
    weighted_u += w * points[q];
  }
  res.loglik = std::log(sqrt2_scale) + max_term + std::log(sum);
  if (want_posterior_mean) res.posterior_mean = weighted_u / sum;
  return res;
}

std::vector<ClusterWork> split_clusters(const Dataset& data) {
  if (data.n_rows() == 0) throw std::invalid_argument("dataset is empty");
  if (data.has_supercluster())
    throw std::invalid_argument(
        "fitting covers two-level datasets; drop the supercluster column");
  if (!data.categorical_names.empty())
    throw std::invalid_argument("expand categorical columns before fitting");

  std::map<std::string, size_t> index;
  std::vector<ClusterWork> clusters;
  std::vector<std::vector<size_t>> rows_of;
  std::vector<std::string> order;
  for (size_t i = 0; i < data.n_rows(); ++i) {
    auto [it, inserted] = index.emplace(data.cluster[i], rows_of.size());
    if (inserted) {
      rows_of.emplace_back();
      order.push_back(data.cluster[i]);
    }
    rows_of[it->second].push_back(i);
  }

  const size_t p = 1 + data.covariate_names.size();
  clusters.resize(rows_of.size());
  for (size_t c = 0; c < rows_of.size(); ++c) {
    ClusterWork& cw = clusters[c];
    cw.id = order[c];
    const auto& rows = rows_of[c];
    cw.y.reserve(rows.size());
    cw.x.resize(rows.size(), p);
    if (data.has_offset()) cw.offset.resize(rows.size());
    for (size_t k = 0; k < rows.size(); ++k) {
      const size_t i = rows[k];
      cw.y.push_back(data.y[i]);
      cw.x(k, 0) = 1.0;
      for (size_t col = 0; col < data.covariate_names.size(); ++col)
        cw.x(k, col + 1) = data.covariates[col][i];
      if (data.has_offset()) cw.offset[k] = data.offset[i];
    }
    cw.finalize();
  }
  return clusters;
}

long long max_count(const std::vector<ClusterWork>& clusters) {
  long long m = 0;
  for (const auto& cw : clusters)
    for (long long v : cw.y) m = std::max(m, v);
  return m;
}

Eigen::VectorXd cluster_eta(const ClusterWork& cw, const Eigen::VectorXd& beta) {
  Eigen::VectorXd eta = cw.x * beta;
  if (cw.offset.size() > 0) eta += cw.offset;
  return eta;
}

// Total log-likelihood engine shared by the public entry points: per-cluster
// values filled in parallel, reduced in ascending cluster order.
class TotalLoglik {
 public:
  TotalLoglik(std::vector<ClusterWork> clusters, Family family, int threads)
      : clusters_(std::move(clusters)), family_(family), threads_(threads) {
    if (family_ != Family::Poisson && family_ != Family::NB2)
      throw std::invalid_argument("fitting supports the poisson and nb2 families");
    max_y_ = max_count(clusters_);
  }

  size_t n_clusters() const { return clusters_.size(); }
  const std::vector<ClusterWork>& clusters() const { return clusters_; }
  size_t n_obs() const {
    size_t n = 0;
    for (const auto& cw : clusters_) n += cw.y.size();
    return n;
  }
  long long max_y() const { return max_y_; }

  double value(const Eigen::VectorXd& beta, double sigma2_u, double alpha,
               const GaussHermite& gh) const {
    const Nb2Table* nb2 = prepare_nb2(alpha);
    std::vector<double> parts(clusters_.size());
    parallel_for(clusters_.size(), threads_, [&](size_t c) {
      parts[c] = aghq_cluster(clusters_[c], cluster_eta(clusters_[c], beta),
                              family_, nb2, sigma2_u, gh, false)
                     .loglik;
    });
    double total = 0.0;
    for (double v : parts) total += v;
    return total;
  }

  Eigen::VectorXd posterior_means(const Eigen::VectorXd& beta, double sigma2_u,
                                  double alpha, const GaussHermite& gh) const {
    const Nb2Table* nb2 = prepare_nb2(alpha);
    Eigen::VectorXd u_hat(clusters_.size());
    parallel_for(clusters_.size(), threads_, [&](size_t c) {
      u_hat[static_cast<Eigen::Index>(c)] =
          aghq_cluster(clusters_[c], cluster_eta(clusters_[c], beta), family_,
                       nb2, sigma2_u, gh, true)
              .posterior_mean;
    });
    return u_hat;
  }

 private:
  const Nb2Table* prepare_nb2(double alpha) const {
    if (family_ != Family::NB2 || alpha <= kAlphaPoissonCutoff) return nullptr;
    if (nb2_.alpha != alpha) nb2_.rebuild(alpha, max_y_);
    return &nb2_;
  }

  std::vector<ClusterWork> clusters_;
  Family family_;
  int threads_;
  long long max_y_ = 0;
  mutable Nb2Table nb2_;
};

}  // namespace

double cluster_loglik(const ClusterRows& rows, const Eigen::VectorXd& beta,
                      double sigma2_u, double alpha, Family family,
                      const FitOptions& options, bool* mode_converged) {
  if (family != Family::Poisson && family != Family::NB2)
    throw std::invalid_argument("cluster_loglik supports the poisson and nb2 families");
  if (sigma2_u < 0.0) throw std::invalid_argument("sigma2_u must be >= 0");
  ClusterWork cw;
  cw.y = rows.y;
  if (rows.x.size() == 0) {
    cw.x = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(rows.y.size()), 1);
  } else {
    if (rows.x.rows() != static_cast<Eigen::Index>(rows.y.size()))
      throw std::invalid_argument("x row count does not match y length");
    cw.x = rows.x;
  }
  cw.offset = rows.offset;
  cw.finalize();

  Nb2Table nb2;
  const Nb2Table* nb2_ptr = nullptr;
  if (family == Family::NB2 && alpha > kAlphaPoissonCutoff) {
    nb2.rebuild(alpha, max_count({cw}));
    nb2_ptr = &nb2;
  }
  const GaussHermite gh = gauss_hermite(options.n_quad_nodes);
  const AghqResult res = aghq_cluster(cw, cluster_eta(cw, beta), family,
                                      nb2_ptr, sigma2_u, gh, false);
  if (mode_converged != nullptr) *mode_converged = res.mode_converged;
  return res.loglik;
}

double total_loglik(const Dataset& data, Family family,
                    const Eigen::VectorXd& beta, double sigma2_u, double alpha,
                    const FitOptions& options) {
  TotalLoglik ll(split_clusters(data), family, options.threads);
  return ll.value(beta, sigma2_u, alpha, gauss_hermite(options.n_quad_nodes));
}

// --- maximum likelihood ------------------------------------------------------

namespace {

// Parameter vector layout: [beta(p); t_u; t_alpha?] where sigma2_u and alpha
// are exp(t) on the transformed scale, |t| otherwise.
struct ParamMap {
  size_t p = 0;
  bool has_alpha = false;
  bool transformed = true;
  double fixed_alpha = 0.0;

  double variance_of(double t) const { return transformed ? std::exp(t) : std::fabs(t); }
  double t_of(double v) const { return transformed ? std::log(v) : v; }

  size_t dim() const { return p + 1 + (has_alpha ? 1 : 0); }
  Eigen::VectorXd beta(const Eigen::VectorXd& theta) const {
    return theta.head(static_cast<Eigen::Index>(p));
  }
  double sigma2_u(const Eigen::VectorXd& theta) const {
    return variance_of(theta[static_cast<Eigen::Index>(p)]);
  }
  double alpha(const Eigen::VectorXd& theta) const {
    if (!has_alpha) return fixed_alpha;
    return variance_of(theta[static_cast<Eigen::Index>(p) + 1]);
  }
};

Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& theta, double rel_step) {
  const Eigen::Index n = theta.size();
  Eigen::VectorXd g(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double h = rel_step * std::max(1.0, std::fabs(theta[k]));
    Eigen::VectorXd hi = theta, lo = theta;
    hi[k] += h;
    lo[k] -= h;
    g[k] = (f(hi) - f(lo)) / (2.0 * h);
  }
  return g;
}

Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f,
                           const Eigen::VectorXd& theta, double rel_step) {
  const Eigen::Index n = theta.size();
  Eigen::MatrixXd h_mat(n, n);
  Eigen::VectorXd steps(n);
  for (Eigen::Index k = 0; k < n; ++k)
    steps[k] = rel_step * std::max(1.0, std::fabs(theta[k]));
  const double f0 = f(theta);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      double v;
      if (i == j) {
        Eigen::VectorXd hi = theta, lo = theta;
        hi[i] += steps[i];
        lo[i] -= steps[i];
        v = (f(hi) - 2.0 * f0 + f(lo)) / (steps[i] * steps[i]);
      } else {
        Eigen::VectorXd pp = theta, pm = theta, mp = theta, mm = theta;
        pp[i] += steps[i]; pp[j] += steps[j];
        pm[i] += steps[i]; pm[j] -= steps[j];
        mp[i] -= steps[i]; mp[j] += steps[j];
        mm[i] -= steps[i]; mm[j] -= steps[j];
        v = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * steps[i] * steps[j]);
      }
      h_mat(i, j) = v;
      h_mat(j, i) = v;
    }
  }
  return h_mat;
}

struct BfgsOutcome {
  Eigen::VectorXd theta;
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Minimizes f by BFGS with backtracking Armijo line search; gradient by
// central differences.
BfgsOutcome bfgs_minimize(const std::function<double(const Eigen::VectorXd&)>& f,
                          Eigen::VectorXd theta, int max_iterations,
                          double tol_value, double tol_gradient) {
  const Eigen::Index n = theta.size();
  auto grad = [&](const Eigen::VectorXd& t) { return fd_gradient(f, t, 1e-5); };

  BfgsOutcome out;
  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(n, n);
  double value = f(theta);
  Eigen::VectorXd g = grad(theta);

  for (int iter = 0; iter < max_iterations; ++iter) {
    out.iterations = iter + 1;
    if (g.cwiseAbs().maxCoeff() < tol_gradient) {
      out.converged = true;
      break;
    }
    Eigen::VectorXd direction = -(h_inv * g);
    double slope = direction.dot(g);
    if (!(slope < 0.0)) {
      h_inv.setIdentity();
      direction = -g;
      slope = direction.dot(g);
    }

    double step = 1.0;
    double new_value = std::numeric_limits<double>::infinity();
    Eigen::VectorXd candidate;
    bool accepted = false;
    for (int half = 0; half < 40; ++half) {
      candidate = theta + step * direction;
      new_value = f(candidate);
      if (std::isfinite(new_value) && new_value <= value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no descent; report best point, converged stays false

    Eigen::VectorXd g_new = grad(candidate);
    const Eigen::VectorXd s = candidate - theta;
    const Eigen::VectorXd yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const Eigen::VectorXd hy = h_inv * yv;
      const double yhy = yv.dot(hy);
      h_inv += ((sy + yhy) / (sy * sy)) * (s * s.transpose()) -
               (hy * s.transpose() + s * hy.transpose()) / sy;
    }

    const double rel_change = std::fabs(value - new_value) / std::max(1.0, std::fabs(new_value));
    theta = candidate;
    value = new_value;
    g = g_new;
    if (rel_change < tol_value) {
      out.converged = true;
      break;
    }
  }
  out.theta = theta;
  out.value = value;
  return out;
}

}  // namespace

Eigen::VectorXd irls_poisson(const Dataset& data, double* loglik) {
  if (data.n_rows() == 0) throw std::invalid_argument("dataset is empty");
  if (!data.categorical_names.empty())
    throw std::invalid_argument("expand categorical columns before fitting");
  const size_t n = data.n_rows();
  const size_t p = 1 + data.covariate_names.size();

  Eigen::MatrixXd x(n, p);
  Eigen::VectorXd yv(n), off = Eigen::VectorXd::Zero(n);
  for (size_t i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    for (size_t c = 0; c < data.covariate_names.size(); ++c)
      x(i, c + 1) = data.covariates[c][i];
    yv[i] = static_cast<double>(data.y[i]);
    if (data.has_offset()) off[i] = data.offset[i];
  }

  double mean_y = yv.mean();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  beta[0] = std::log(std::max(mean_y, 0.1));

  for (int iter = 0; iter < 50; ++iter) {
    Eigen::VectorXd eta = (x * beta + off).cwiseMin(30.0).cwiseMax(-30.0);
    Eigen::VectorXd mu = eta.array().exp();
    Eigen::VectorXd z = eta - off + (yv - mu).cwiseQuotient(mu);
    Eigen::MatrixXd xtwx = x.transpose() * mu.asDiagonal() * x;
    Eigen::VectorXd xtwz = x.transpose() * mu.asDiagonal() * z;
    Eigen::LDLT<Eigen::MatrixXd> solver(xtwx);
    if (solver.info() != Eigen::Success)
      throw std::runtime_error("IRLS design matrix is singular");
    Eigen::VectorXd next = solver.solve(xtwz);
    if (!next.allFinite())
      throw std::runtime_error("IRLS diverged (separation or overflow)");
    const double delta = (next - beta).cwiseAbs().maxCoeff();
    beta = next;
    if (delta < 1e-10) break;
  }

  if (loglik != nullptr) {
    Eigen::VectorXd eta = x * beta + off;
    double ll = 0.0;
    for (size_t i = 0; i < n; ++i)
      ll += poisson_logpmf(data.y[i], std::exp(eta[i]));
    *loglik = ll;
  }
  return beta;
}

FitResult fit_ml(const Dataset& data, Family family, const FitOptions& options) {
  if (family != Family::Poisson && family != Family::NB2)
    throw std::invalid_argument("fit_ml supports the poisson and nb2 families");

  TotalLoglik ll(split_clusters(data), family, options.threads);
  const GaussHermite gh = gauss_hermite(options.n_quad_nodes);

  // Starting values: fixed-effects Poisson beta, sigma2_u = 0.1, alpha from
  // the method-of-moments overdispersion of the raw residuals.
  Eigen::VectorXd beta0 = irls_poisson(data);
  double alpha0 = 0.01;
  {
    double num = 0.0, den = 0.0;
    for (const auto& cw : ll.clusters()) {
      const Eigen::VectorXd eta = cluster_eta(cw, beta0);
      for (size_t i = 0; i < cw.y.size(); ++i) {
        const double mu = std::exp(eta[static_cast<Eigen::Index>(i)]);
        const double resid = static_cast<double>(cw.y[i]) - mu;
        num += resid * resid - mu;
        den += mu * mu;
      }
    }
    if (den > 0.0) alpha0 = std::max(0.01, num / den);
  }

  ParamMap map;
  map.p = static_cast<size_t>(beta0.size());
  map.transformed = options.transform_parameters;
  map.has_alpha = family == Family::NB2 && !options.fixed_alpha.has_value();
  map.fixed_alpha =
      family == Family::NB2 ? options.fixed_alpha.value_or(0.0) : 0.0;

  Eigen::VectorXd theta(map.dim());
  theta.head(beta0.size()) = beta0;
  theta[beta0.size()] = map.t_of(0.1);
  if (map.has_alpha) theta[beta0.size() + 1] = map.t_of(alpha0);

  auto objective = [&](const Eigen::VectorXd& t) {
    return -ll.value(map.beta(t), map.sigma2_u(t), map.alpha(t), gh);
  };

  BfgsOutcome opt = bfgs_minimize(objective, theta, options.max_iterations,
                                  options.tol_loglik, options.tol_gradient);

  FitResult fit;
  fit.family = family;
  fit.beta = map.beta(opt.theta);
  fit.beta_names.push_back("_cons");
  for (const auto& name : data.covariate_names) fit.beta_names.push_back(name);
  fit.sigma2_u = map.sigma2_u(opt.theta);
  fit.alpha = map.alpha(opt.theta);
  fit.log_likelihood = -opt.value;
  fit.deviance = -2.0 * fit.log_likelihood;
  fit.converged = opt.converged;
  fit.iterations = opt.iterations;
  fit.boundary_sigma2_u = fit.sigma2_u < kBoundary;
  fit.boundary_alpha = map.has_alpha && fit.alpha < kBoundary;
  fit.n_quad_nodes = options.n_quad_nodes;
  fit.n_obs = ll.n_obs();
  fit.n_clusters = ll.n_clusters();

  // Observed information on the working scale, mapped to the natural scale
  // by the delta rule.
  {
    const Eigen::MatrixXd info = fd_hessian(objective, opt.theta, 1e-4);
    Eigen::MatrixXd cov = info.completeOrthogonalDecomposition().pseudoInverse();
    Eigen::VectorXd jac = Eigen::VectorXd::Ones(opt.theta.size());
    if (map.transformed) {
      jac[static_cast<Eigen::Index>(map.p)] = fit.sigma2_u;
      if (map.has_alpha) jac[static_cast<Eigen::Index>(map.p) + 1] = fit.alpha;
    }
    cov = jac.asDiagonal() * cov * jac.asDiagonal();
    auto se_of = [&](Eigen::Index k) {
      const double v = cov(k, k);
      return v > 0.0 ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN();
    };
    fit.se_beta.resize(fit.beta.size());
    for (Eigen::Index k = 0; k < fit.beta.size(); ++k) fit.se_beta[k] = se_of(k);
    fit.se_sigma2_u = se_of(static_cast<Eigen::Index>(map.p));
    fit.se_alpha = map.has_alpha
                       ? se_of(static_cast<Eigen::Index>(map.p) + 1)
                       : std::numeric_limits<double>::quiet_NaN();
  }

  fit.u_hat = ll.posterior_means(fit.beta, fit.sigma2_u, fit.alpha, gh);
  fit.cluster_ids.reserve(ll.n_clusters());
  for (const auto& cw : ll.clusters()) fit.cluster_ids.push_back(cw.id);
  return fit;
}

Eigen::VectorXd total_loglik_gradient(const Dataset& data, Family family,
                                      const Eigen::VectorXd& beta,
                                      double sigma2_u, double alpha,
                                      const FitOptions& options) {
  TotalLoglik ll(split_clusters(data), family, options.threads);
  const GaussHermite gh = gauss_hermite(options.n_quad_nodes);
  ParamMap map;
  map.p = static_cast<size_t>(beta.size());
  map.transformed = options.transform_parameters;
  map.has_alpha = family == Family::NB2;

  Eigen::VectorXd theta(map.dim());
  theta.head(beta.size()) = beta;
  theta[beta.size()] = map.t_of(sigma2_u);
  if (map.has_alpha) theta[beta.size() + 1] = map.t_of(alpha);

  auto f = [&](const Eigen::VectorXd& t) {
    return ll.value(map.beta(t), map.sigma2_u(t), map.alpha(t), gh);
  };
  return fd_gradient(f, theta, 1e-5);
}

Eigen::VectorXd predict_random_effects(const Dataset& data,
                                       const FitResult& fit,
                                       const FitOptions& options) {
  TotalLoglik ll(split_clusters(data), fit.family, options.threads);
  return ll.posterior_means(fit.beta, fit.sigma2_u, fit.alpha,
                            gauss_hermite(options.n_quad_nodes));
}

LrTest lr_test(double loglik_null, double loglik_alt, int df,
               bool variance_on_boundary) {
  if (df < 1) throw std::invalid_argument("lr_test requires df >= 1");
  if (loglik_alt < loglik_null - 1e-6)
    throw std::invalid_argument("alternative log-likelihood below the null");
  LrTest t;
  t.df = df;
  t.statistic = std::max(0.0, 2.0 * (loglik_alt - loglik_null));
  t.p_value = t.statistic == 0.0
                  ? 1.0
                  : boost::math::gamma_q(static_cast<double>(df) / 2.0,
                                         t.statistic / 2.0);
  t.boundary_caveat = variance_on_boundary;
  return t;
}

ModelSpec to_model_spec(const FitResult& fit) {
  ModelSpec spec;
  spec.family = fit.family;
  spec.levels = Levels::Two;
  spec.fixed.beta = fit.beta;
  spec.fixed.names = fit.beta_names;
  spec.random = RandomPart::intercept(fit.sigma2_u);
  if (fit.family == Family::NB2) spec.dispersion = Dispersion::alpha(fit.alpha);
  return validate_spec(std::move(spec));
}

std::string fit_to_json_text(const FitResult& fit, int indent) {
  nlohmann::json j =
      nlohmann::json::parse(spec_to_json_text(to_model_spec(fit), 0));
  nlohmann::json inference;
  auto maybe = [](double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json();
  };
  std::vector<nlohmann::json> se_beta;
  for (Eigen::Index k = 0; k < fit.se_beta.size(); ++k)
    se_beta.push_back(maybe(fit.se_beta[k]));
  inference["se_beta"] = se_beta;
  inference["se_sigma2_u"] = maybe(fit.se_sigma2_u);
  if (fit.family == Family::NB2) inference["se_alpha"] = maybe(fit.se_alpha);
  inference["log_likelihood"] = fit.log_likelihood;
  inference["deviance"] = fit.deviance;
  inference["converged"] = fit.converged;
  inference["iterations"] = fit.iterations;
  inference["nodes"] = fit.n_quad_nodes;
  inference["boundary_sigma2_u"] = fit.boundary_sigma2_u;
  if (fit.family == Family::NB2)
    inference["boundary_alpha"] = fit.boundary_alpha;
  inference["n_obs"] = fit.n_obs;
  inference["n_clusters"] = fit.n_clusters;
  j["inference"] = inference;

  nlohmann::json re;
  re["cluster"] = fit.cluster_ids;
  re["u_hat"] = std::vector<double>(fit.u_hat.data(),
                                    fit.u_hat.data() + fit.u_hat.size());
  j["random_effects"] = re;
  return j.dump(indent) + "\n";
}

}  // namespace countvpc
