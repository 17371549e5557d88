#include "countvpc/simulate.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "countvpc/parallel.hpp"
#include "countvpc/rng.hpp"
#include "json.hpp"

namespace countvpc {

SimConfig SimConfig::full_scale(Levels levels) {
  SimConfig cfg;
  if (levels == Levels::Three) {
    cfg.n_superclusters = 100;
    cfg.n_clusters = 100;
  }
  return cfg;
}

SimConfig SimConfig::desk_scale(Levels levels) {
  SimConfig cfg;
  cfg.n_units = 200;
  if (levels == Levels::Three) {
    cfg.n_superclusters = 100;
    cfg.n_clusters = 20;
  } else {
    cfg.n_clusters = 2000;
  }
  return cfg;
}

namespace {

double row_value(const CovariateRow* row, const std::string& name) {
  if (row == nullptr) return 0.0;
  for (size_t i = 0; i < row->names.size(); ++i)
    if (row->names[i] == name) return row->values[i];
  return 0.0;
}

double row_eta(const ModelSpec& spec, const CovariateRow* row) {
  double eta = spec.fixed.beta[0];
  for (Eigen::Index k = 1; k < spec.fixed.beta.size(); ++k)
    eta += spec.fixed.beta[k] * row_value(row, spec.fixed.names[k]);
  return eta;
}

Eigen::VectorXd row_z(const ModelSpec& spec, const CovariateRow* row) {
  Eigen::VectorXd z = Eigen::VectorXd::Ones(spec.random.dim());
  for (int k = 1; k < spec.random.dim(); ++k)
    z[k] = row_value(row, spec.random.z_columns[k]);
  return z;
}

// PSD square root of Omega for drawing the random-coefficient vector;
// robust to zero eigenvalues where a Cholesky would fail.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& omega) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(omega);
  return es.eigenvectors() *
         es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

void validate_config(const ModelSpec& spec, const SimConfig& cfg) {
  if (cfg.n_clusters < 2 || cfg.n_units < 2)
    throw std::invalid_argument("simulation needs >= 2 clusters and >= 2 units per cluster");
  if (spec.levels == Levels::Three && cfg.n_superclusters < 2)
    throw std::invalid_argument("three-level simulation needs >= 2 superclusters");
}

}  // namespace

Dataset simulate_dataset(const ModelSpec& spec, const SimConfig& cfg,
                         const CovariateRow* row) {
  validate_config(spec, cfg);

  const bool three = spec.levels == Levels::Three;
  const size_t n_super = three ? static_cast<size_t>(cfg.n_superclusters) : 1;
  const size_t clusters_total = n_super * static_cast<size_t>(cfg.n_clusters);
  const size_t n = static_cast<size_t>(cfg.n_units);
  const size_t rows = clusters_total * n;

  const double eta_fixed = row_eta(spec, row);
  const Eigen::VectorXd z = row_z(spec, row);
  const int d = spec.random.dim();
  Eigen::MatrixXd omega_sqrt;
  if (spec.random.kind == RandomPart::Kind::Coefficient)
    omega_sqrt = psd_sqrt(spec.random.omega);
  const double sigma_u = std::sqrt(spec.random.sigma2_u);
  const double sigma_v = std::sqrt(spec.sigma2_v);
  const double disp = spec.dispersion.value;
  const bool dispersed = spec.dispersion.kind != Dispersion::Kind::None && disp > 0.0;

  // Supercluster effects drawn on their own substreams (lo = 0).
  std::vector<double> v_effects(n_super, 0.0);
  if (three) {
    for (size_t k = 0; k < n_super; ++k)
      v_effects[k] = Substream(cfg.seed, k + 1, 0).normal() * sigma_v;
  }

  Dataset out;
  out.y.resize(rows);
  out.cluster.resize(rows);
  if (three) out.supercluster.resize(rows);
  if (row != nullptr) {
    out.covariate_names = row->names;
    for (double v : row->values)
      out.covariates.emplace_back(rows, v);
  }

  parallel_for(clusters_total, cfg.threads, [&](size_t c) {
    const size_t k = three ? c / cfg.n_clusters : 0;
    const size_t j = three ? c % cfg.n_clusters : c;
    Substream stream(cfg.seed, three ? k + 1 : 0, j + 1);

    double cluster_effect;
    if (spec.random.kind == RandomPart::Kind::Coefficient) {
      Eigen::VectorXd eps(d);
      for (int i = 0; i < d; ++i) eps[i] = stream.normal();
      cluster_effect = z.dot(omega_sqrt * eps);
    } else {
      cluster_effect = stream.normal() * sigma_u;
    }
    const double eta = eta_fixed + (three ? v_effects[k] : 0.0) + cluster_effect;
    if (eta > 700.0) {
      std::ostringstream msg;
      msg << "cluster " << c + 1 << ": linear predictor " << eta
          << " overflows the simulated rate";
      throw std::range_error(msg.str());
    }
    const double mu_base = std::exp(eta);

    const std::string cluster_id = std::to_string(c + 1);
    const std::string super_id = three ? std::to_string(k + 1) : std::string();
    const size_t base = c * n;
    for (size_t i = 0; i < n; ++i) {
      double mu = mu_base;
      if (dispersed) {
        switch (spec.dispersion.kind) {
          case Dispersion::Kind::Alpha:  // NB2: multiplicative gamma, mean 1
            mu = mu_base * stream.gamma(1.0 / disp, disp);
            break;
          case Dispersion::Kind::LognormalSigma2e:
            mu = mu_base * std::exp(stream.normal() * std::sqrt(disp));
            break;
          case Dispersion::Kind::Delta:  // NB1: rate itself is gamma
            mu = stream.gamma(mu_base / disp, disp);
            break;
          case Dispersion::Kind::None:
            break;
        }
      }
      out.y[base + i] = stream.poisson(mu);
      out.cluster[base + i] = cluster_id;
      if (three) out.supercluster[base + i] = super_id;
    }
  });

  return out;
}

EstimatedStats estimate_components(const Dataset& data, Levels levels) {
  const size_t n = data.n_rows();
  if (n == 0) throw std::invalid_argument("degenerate grouping: empty dataset");
  const bool three = levels == Levels::Three;
  if (three && !data.has_supercluster())
    throw std::invalid_argument("three-level estimate needs supercluster ids");

  // Clusters in first-appearance order; sums reduced in that fixed order.
  std::unordered_map<std::string, size_t> cluster_index;
  std::vector<size_t> cluster_of(n);
  std::vector<size_t> cluster_n;
  std::vector<double> cluster_sum;
  std::vector<size_t> super_of_cluster;
  std::unordered_map<std::string, size_t> super_index;
  std::vector<size_t> super_n;
  std::vector<double> super_sum;

  for (size_t i = 0; i < n; ++i) {
    auto [it, inserted] = cluster_index.emplace(data.cluster[i], cluster_n.size());
    if (inserted) {
      cluster_n.push_back(0);
      cluster_sum.push_back(0.0);
      if (three) {
        auto [sit, sinserted] =
            super_index.emplace(data.supercluster[i], super_n.size());
        if (sinserted) {
          super_n.push_back(0);
          super_sum.push_back(0.0);
        }
        super_of_cluster.push_back(sit->second);
      }
    }
    const size_t c = it->second;
    cluster_of[i] = c;
    cluster_n[c] += 1;
    cluster_sum[c] += static_cast<double>(data.y[i]);
    if (three) {
      super_n[super_of_cluster[c]] += 1;
      super_sum[super_of_cluster[c]] += static_cast<double>(data.y[i]);
    }
  }

  const size_t n_clusters = cluster_n.size();
  if (n_clusters < 2)
    throw std::invalid_argument("degenerate grouping: need >= 2 clusters");
  for (size_t c = 0; c < n_clusters; ++c)
    if (cluster_n[c] < 2)
      throw std::invalid_argument("degenerate grouping: need >= 2 units per cluster");
  if (three && super_n.size() < 2)
    throw std::invalid_argument("degenerate grouping: need >= 2 superclusters");

  double total = 0.0;
  for (size_t c = 0; c < n_clusters; ++c) total += cluster_sum[c];
  const double grand_mean = total / static_cast<double>(n);

  std::vector<double> cluster_mean(n_clusters);
  for (size_t c = 0; c < n_clusters; ++c)
    cluster_mean[c] = cluster_sum[c] / static_cast<double>(cluster_n[c]);

  auto sample_variance = [](const std::vector<double>& values) {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return ss / static_cast<double>(values.size() - 1);
  };

  EstimatedStats est;
  est.three_level = three;
  est.expectation = grand_mean;

  if (three) {
    std::vector<double> super_mean(super_n.size());
    for (size_t k = 0; k < super_n.size(); ++k)
      super_mean[k] = super_sum[k] / static_cast<double>(super_n[k]);
    est.comp_l3 = sample_variance(super_mean);

    std::vector<double> deviated(n_clusters);
    for (size_t c = 0; c < n_clusters; ++c)
      deviated[c] = cluster_mean[c] - super_mean[super_of_cluster[c]];
    est.comp_l2 = sample_variance(deviated);
  } else {
    est.comp_l2 = sample_variance(cluster_mean);
  }

  double ss_within = 0.0;
  double ss_total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double yv = static_cast<double>(data.y[i]);
    const double dev = yv - cluster_mean[cluster_of[i]];
    ss_within += dev * dev;
    ss_total += (yv - grand_mean) * (yv - grand_mean);
  }
  est.comp_l1 = ss_within / static_cast<double>(n - 1);
  est.sample_variance = ss_total / static_cast<double>(n - 1);

  est.variance = est.comp_l3 + est.comp_l2 + est.comp_l1;
  if (est.variance > 0.0) {
    est.vpc3 = est.comp_l3 / est.variance;
    est.vpc2 = est.comp_l2 / est.variance;
    est.vpc1 = est.comp_l1 / est.variance;
  } else {
    est.vpc_defined = false;
    est.vpc3 = est.vpc2 = est.vpc1 =
        std::numeric_limits<double>::quiet_NaN();
  }
  return est;
}

SimReport verify(const ModelSpec& spec, const SimConfig& cfg,
                 const CovariateRow* row) {
  SimReport report;
  report.exact = marginal_stats(spec, row_eta(spec, row), row_z(spec, row));
  const Dataset data = simulate_dataset(spec, cfg, row);
  report.simulated = estimate_components(data, spec.levels);

  auto diff = [](double sim, double exact, double* abs_out, double* rel_out) {
    const double a = std::fabs(sim - exact);
    *abs_out = a;
    *rel_out = exact == 0.0 ? 0.0 : a / std::fabs(exact);
  };
  const auto& e = report.exact;
  const auto& s = report.simulated;
  diff(s.expectation, e.mu_m, &report.abs_diff.expectation, &report.rel_diff.expectation);
  diff(s.variance, e.variance, &report.abs_diff.variance, &report.rel_diff.variance);
  diff(s.comp_l3, e.comp_l3, &report.abs_diff.comp_l3, &report.rel_diff.comp_l3);
  diff(s.comp_l2, e.comp_l2, &report.abs_diff.comp_l2, &report.rel_diff.comp_l2);
  diff(s.comp_l1, e.comp_l1, &report.abs_diff.comp_l1, &report.rel_diff.comp_l1);
  diff(s.vpc3, e.vpc3, &report.abs_diff.vpc3, &report.rel_diff.vpc3);
  diff(s.vpc2, e.vpc2, &report.abs_diff.vpc2, &report.rel_diff.vpc2);
  diff(s.vpc1, e.vpc1, &report.abs_diff.vpc1, &report.rel_diff.vpc1);
  return report;
}

namespace {

using nlohmann::json;

json fields_to_json(const SimReport::Fields& f, bool three) {
  json j;
  j["expectation"] = f.expectation;
  j["variance"] = f.variance;
  if (three) j["variance3"] = f.comp_l3;
  j["variance2"] = f.comp_l2;
  j["variance1"] = f.comp_l1;
  if (three) j["vpc3"] = f.vpc3;
  j["vpc2"] = f.vpc2;
  j["vpc1"] = f.vpc1;
  return j;
}

}  // namespace

std::string report_to_json_text(const SimReport& r, int indent) {
  const bool three = r.simulated.three_level;
  json j;
  j["exact"] = {{"expectation", r.exact.mu_m},
                {"variance", r.exact.variance},
                {"variance2", r.exact.comp_l2},
                {"variance1", r.exact.comp_l1},
                {"vpc2", r.exact.vpc2},
                {"vpc1", r.exact.vpc1}};
  if (three) {
    j["exact"]["variance3"] = r.exact.comp_l3;
    j["exact"]["vpc3"] = r.exact.vpc3;
  }
  j["simulated"] = fields_to_json(
      {r.simulated.expectation, r.simulated.variance, r.simulated.comp_l3,
       r.simulated.comp_l2, r.simulated.comp_l1, r.simulated.vpc3,
       r.simulated.vpc2, r.simulated.vpc1},
      three);
  j["simulated"]["sample_variance"] = r.simulated.sample_variance;
  j["simulated"]["vpc_defined"] = r.simulated.vpc_defined;
  j["abs_diff"] = fields_to_json(r.abs_diff, three);
  j["rel_diff"] = fields_to_json(r.rel_diff, three);
  return j.dump(indent) + "\n";
}

void print_report(const SimReport& r, std::ostream& out) {
  const bool three = r.simulated.three_level;
  char line[160];
  auto print_row = [&](const char* label, double exact, double sim, double abs,
                       double rel) {
    std::snprintf(line, sizeof(line), "%-22s %14.9g %14.9g %12.3g %12.3g\n",
                  label, exact, sim, abs, rel);
    out << line;
  };
  std::snprintf(line, sizeof(line), "%-22s %14s %14s %12s %12s\n", "statistic",
                "exact", "simulated", "abs diff", "rel diff");
  out << line;
  print_row("expectation", r.exact.mu_m, r.simulated.expectation,
            r.abs_diff.expectation, r.rel_diff.expectation);
  print_row("variance", r.exact.variance, r.simulated.variance,
            r.abs_diff.variance, r.rel_diff.variance);
  if (three)
    print_row("level-3 component", r.exact.comp_l3, r.simulated.comp_l3,
              r.abs_diff.comp_l3, r.rel_diff.comp_l3);
  print_row("level-2 component", r.exact.comp_l2, r.simulated.comp_l2,
            r.abs_diff.comp_l2, r.rel_diff.comp_l2);
  print_row("level-1 component", r.exact.comp_l1, r.simulated.comp_l1,
            r.abs_diff.comp_l1, r.rel_diff.comp_l1);
  if (three)
    print_row("vpc3", r.exact.vpc3, r.simulated.vpc3, r.abs_diff.vpc3,
              r.rel_diff.vpc3);
  print_row("vpc2", r.exact.vpc2, r.simulated.vpc2, r.abs_diff.vpc2,
            r.rel_diff.vpc2);
  print_row("vpc1", r.exact.vpc1, r.simulated.vpc1, r.abs_diff.vpc1,
            r.rel_diff.vpc1);
}

}  // namespace countvpc
