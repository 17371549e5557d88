#include "countvpc/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "countvpc/parallel.hpp"

namespace countvpc {

namespace {

constexpr double kMaxExponent = 700.0;

double checked_exp(double arg) {
  if (arg > kMaxExponent) {
    std::ostringstream msg;
    msg << "exponent " << arg << " overflows exp()";
    throw std::range_error(msg.str());
  }
  return std::exp(arg);
}

// Level-1 variance at marginal scale: mu + mu^2 * g * phi, where g is the
// exponentiated total higher-level variance and phi the family's
// overdispersion factor (0 Poisson, alpha NB2, exp(sigma2_e)-1 lognormal).
double level1_component(Family family, const Dispersion& d, double mu,
                        double exp_upper) {
  switch (family) {
    case Family::Poisson:
      return mu;
    case Family::NB2:
      return mu + mu * mu * exp_upper * d.value;
    case Family::PoissonLognormal:
      return mu + mu * mu * exp_upper * std::expm1(d.value);
    case Family::NB1:
      return mu * (1.0 + d.value);
  }
  return mu;
}

}  // namespace

ConditionalStats conditional_stats(Family family, double eta,
                                   const Dispersion& dispersion) {
  if (!std::isfinite(eta)) throw std::invalid_argument("eta must be finite");
  ConditionalStats out;
  switch (family) {
    case Family::Poisson:
      out.mu_c = checked_exp(eta);
      out.omega_c = out.mu_c;
      break;
    case Family::NB2:
      out.mu_c = checked_exp(eta);
      out.omega_c = out.mu_c + out.mu_c * out.mu_c * dispersion.value;
      break;
    case Family::NB1:
      out.mu_c = checked_exp(eta);
      out.omega_c = out.mu_c * (1.0 + dispersion.value);
      break;
    case Family::PoissonLognormal:
      out.mu_c = checked_exp(eta + dispersion.value / 2.0);
      out.omega_c =
          out.mu_c + out.mu_c * out.mu_c * std::expm1(dispersion.value);
      break;
  }
  return out;
}

double marginal_expectation(const ModelSpec& spec, double eta_fixed,
                            const Eigen::VectorXd& z) {
  double arg = eta_fixed + cluster_variance_function(spec.random, z) / 2.0;
  if (spec.levels == Levels::Three) arg += spec.sigma2_v / 2.0;
  if (spec.family == Family::PoissonLognormal) arg += spec.dispersion.value / 2.0;
  return checked_exp(arg);
}

VarianceComponents variance_components(const ModelSpec& spec, double mu_m,
                                       const Eigen::VectorXd& z) {
  const double s2 = cluster_variance_function(spec.random, z);
  const double mu2 = mu_m * mu_m;
  VarianceComponents c;
  if (spec.levels == Levels::Two) {
    c.l2 = mu2 * std::expm1(s2);
    c.l1 = level1_component(spec.family, spec.dispersion, mu_m, std::exp(s2));
  } else {
    c.l3 = mu2 * std::expm1(spec.sigma2_v);
    c.l2 = mu2 * std::exp(spec.sigma2_v) * std::expm1(s2);
    c.l1 = level1_component(spec.family, spec.dispersion, mu_m,
                            std::exp(spec.sigma2_v + s2));
  }
  return c;
}

MarginalStats marginal_stats(const ModelSpec& spec, double eta_fixed,
                             const Eigen::VectorXd& z) {
  MarginalStats s;
  s.three_level = spec.levels == Levels::Three;
  s.mu_m = marginal_expectation(spec, eta_fixed, z);
  const VarianceComponents c = variance_components(spec, s.mu_m, z);
  s.comp_l3 = c.l3;
  s.comp_l2 = c.l2;
  s.comp_l1 = c.l1;
  s.variance = c.l3 + c.l2 + c.l1;
  s.vpc3 = c.l3 / s.variance;
  s.vpc2 = c.l2 / s.variance;
  s.vpc1 = c.l1 / s.variance;
  s.vpc23 = s.vpc3 + s.vpc2;
  if (s.three_level) {
    s.icc = s.vpc23;
    s.icc3 = s.vpc3;
  } else {
    s.icc = s.vpc2;
  }
  return s;
}

double linear_predictor(const ModelSpec& spec, const Dataset& data, size_t row) {
  double eta = spec.fixed.beta[0];
  for (Eigen::Index k = 1; k < spec.fixed.beta.size(); ++k) {
    const std::string& name = spec.fixed.names[k];
    const int c = data.covariate_index(name);
    if (c < 0)
      throw std::invalid_argument("dataset has no covariate column \"" + name +
                                  "\"");
    const double x = data.covariates[c][row];
    if (!std::isfinite(x)) {
      std::ostringstream msg;
      msg << "covariate \"" << name << "\" row " << row + 1 << " is not finite";
      throw std::invalid_argument(msg.str());
    }
    eta += spec.fixed.beta[k] * x;
  }
  if (data.has_offset()) eta += data.offset[row];
  return eta;
}

Eigen::VectorXd design_vector(const ModelSpec& spec, const Dataset& data,
                              size_t row) {
  if (spec.random.kind == RandomPart::Kind::Intercept)
    return Eigen::VectorXd::Ones(1);
  Eigen::VectorXd z(spec.random.dim());
  z[0] = 1.0;
  for (int k = 1; k < spec.random.dim(); ++k) {
    const std::string& name = spec.random.z_columns[k];
    const int c = data.covariate_index(name);
    if (c < 0)
      throw std::invalid_argument("dataset has no covariate column \"" + name +
                                  "\" for the random part");
    z[k] = data.covariates[c][row];
  }
  return z;
}

namespace {

FieldSummary summarize(std::vector<double> values) {
  FieldSummary f;
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  f.mean = sum / static_cast<double>(n);
  f.min = values.front();
  f.max = values.back();
  auto quantile = [&](double p) {
    const double h = p * static_cast<double>(n - 1);
    const size_t lo = static_cast<size_t>(h);
    const size_t hi = std::min(lo + 1, n - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  f.q25 = quantile(0.25);
  f.median = quantile(0.5);
  f.q75 = quantile(0.75);
  return f;
}

}  // namespace

ProfileResult stats_profile(const ModelSpec& spec, const Dataset& data,
                            int threads) {
  ProfileResult out;
  const size_t n = data.n_rows();
  out.rows.resize(n);
  if (n == 0) return out;  // summary stays flagged absent

  parallel_for(n, threads, [&](size_t i) {
    out.rows[i] =
        marginal_stats(spec, linear_predictor(spec, data, i),
                       design_vector(spec, data, i));
  });

  auto field = [&](auto member) {
    std::vector<double> values(n);
    for (size_t i = 0; i < n; ++i) values[i] = out.rows[i].*member;
    return summarize(std::move(values));
  };
  out.summary.present = true;
  out.summary.expectation = field(&MarginalStats::mu_m);
  out.summary.variance = field(&MarginalStats::variance);
  out.summary.variance3 = field(&MarginalStats::comp_l3);
  out.summary.variance2 = field(&MarginalStats::comp_l2);
  out.summary.variance1 = field(&MarginalStats::comp_l1);
  out.summary.vpc3 = field(&MarginalStats::vpc3);
  out.summary.vpc2 = field(&MarginalStats::vpc2);
  out.summary.vpc1 = field(&MarginalStats::vpc1);
  return out;
}

void write_profile_csv(const ProfileResult& profile, std::ostream& out) {
  out << "expectation,variance,variance3,variance2,variance1,vpc3,vpc2,vpc1\n";
  char buf[64];
  auto put = [&](double v, bool blank) {
    out << ',';
    if (!blank) {
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      out << buf;
    }
  };
  for (const auto& r : profile.rows) {
    std::snprintf(buf, sizeof(buf), "%.9g", r.mu_m);
    out << buf;
    put(r.variance, false);
    put(r.comp_l3, !r.three_level);
    put(r.comp_l2, false);
    put(r.comp_l1, false);
    put(r.vpc3, !r.three_level);
    put(r.vpc2, false);
    put(r.vpc1, false);
    out << '\n';
  }
}

}  // namespace countvpc
