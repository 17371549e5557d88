// countvpc command-line tool: closed-form marginal statistics, per-row
// profiles, simulation-based verification, dataset simulation, two-level ML
// fitting, and group summaries for multilevel count models.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "countvpc/data.hpp"
#include "countvpc/fit.hpp"
#include "countvpc/model.hpp"
#include "countvpc/simulate.hpp"
#include "countvpc/stats.hpp"

namespace {

using namespace countvpc;

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void print_kv(std::ostream& out, const std::string& key, const std::string& value) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "  %-14s %s\n", key.c_str(), value.c_str());
  out << buf;
}

struct Paths {
  std::string params;
  std::string data;
  std::string schema;
  std::string out;
};

SchemaConfig load_schema_or_default(const std::string& path) {
  return path.empty() ? SchemaConfig{} : load_schema(path);
}

Dataset load_expanded(const Paths& paths) {
  const SchemaConfig schema = load_schema_or_default(paths.schema);
  Dataset d = load_csv(paths.data, schema);
  return expand_categoricals(std::move(d), schema);
}

CovariateRow covariate_row_from(const Dataset& d) {
  if (d.n_rows() == 0)
    throw std::invalid_argument("covariate-row dataset has no rows");
  CovariateRow row;
  row.names = d.covariate_names;
  for (const auto& col : d.covariates) row.values.push_back(col[0]);
  return row;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot open output file: " + path);
  out << text;
}

void print_stats_block(std::ostream& out, const MarginalStats& s) {
  print_kv(out, "expectation", fmt9(s.mu_m));
  print_kv(out, "variance", fmt9(s.variance));
  if (s.three_level) print_kv(out, "variance3", fmt9(s.comp_l3));
  print_kv(out, "variance2", fmt9(s.comp_l2));
  print_kv(out, "variance1", fmt9(s.comp_l1));
  if (s.three_level) print_kv(out, "vpc3", fmt9(s.vpc3));
  print_kv(out, "vpc2", fmt9(s.vpc2));
  print_kv(out, "vpc1", fmt9(s.vpc1));
  if (s.three_level) {
    print_kv(out, "vpc23", fmt9(s.vpc23));
    print_kv(out, "icc3", fmt9(s.icc3));
    print_kv(out, "icc23", fmt9(s.icc));
  } else {
    print_kv(out, "icc", fmt9(s.icc));
  }
}

std::string stats_json(const MarginalStats& s) {
  std::string j = "{\n";
  auto add = [&](const char* k, double v, bool last = false) {
    j += "  \"";
    j += k;
    j += "\": ";
    j += fmt9(v);
    j += last ? "\n" : ",\n";
  };
  add("expectation", s.mu_m);
  add("variance", s.variance);
  if (s.three_level) add("variance3", s.comp_l3);
  add("variance2", s.comp_l2);
  add("variance1", s.comp_l1);
  if (s.three_level) add("vpc3", s.vpc3);
  add("vpc2", s.vpc2);
  add("vpc1", s.vpc1);
  add("icc", s.icc, true);
  j += "}\n";
  return j;
}

int run_stats(const Paths& paths, const std::string& format) {
  const ModelSpec spec = load_spec(paths.params);
  Eigen::VectorXd z_ref = Eigen::VectorXd::Zero(spec.random.dim());
  z_ref[0] = 1.0;  // reference unit: intercept on, all covariates zero
  const MarginalStats s = marginal_stats(spec, spec.fixed.beta[0], z_ref);

  if (format == "json") {
    std::cout << stats_json(s);
  } else if (format == "csv") {
    ProfileResult one;
    one.rows.push_back(s);
    write_profile_csv(one, std::cout);
  } else {
    std::cout << "Marginal statistics (reference unit: all covariates 0)\n";
    print_stats_block(std::cout, s);
  }
  return 0;
}

int run_profile(const Paths& paths, int threads) {
  const ModelSpec spec = load_spec(paths.params);
  const Dataset d = load_expanded(paths);
  const ProfileResult profile = stats_profile(spec, d, threads);

  if (!paths.out.empty()) {
    std::ofstream out(paths.out);
    if (!out) throw std::invalid_argument("cannot open output file: " + paths.out);
    write_profile_csv(profile, out);
  } else {
    write_profile_csv(profile, std::cout);
  }

  if (profile.summary.present) {
    auto line = [](const char* name, const FieldSummary& f) {
      char buf[200];
      std::snprintf(buf, sizeof(buf),
                    "  %-12s mean %-12.6g min %-12.6g q25 %-12.6g median %-12.6g "
                    "q75 %-12.6g max %-12.6g\n",
                    name, f.mean, f.min, f.q25, f.median, f.q75, f.max);
      std::cerr << buf;
    };
    std::cerr << "profile summary over " << profile.rows.size() << " rows\n";
    line("expectation", profile.summary.expectation);
    line("variance", profile.summary.variance);
    line("variance2", profile.summary.variance2);
    line("variance1", profile.summary.variance1);
    line("vpc2", profile.summary.vpc2);
    line("vpc1", profile.summary.vpc1);
  }
  return 0;
}

SimConfig make_config(const ModelSpec& spec, std::optional<int> superclusters,
                      std::optional<int> clusters, std::optional<int> units,
                      uint64_t seed, int threads) {
  SimConfig cfg = SimConfig::full_scale(spec.levels);
  if (superclusters) cfg.n_superclusters = *superclusters;
  if (clusters) cfg.n_clusters = *clusters;
  if (units) cfg.n_units = *units;
  cfg.seed = seed;
  cfg.threads = threads;
  return cfg;
}

int run_simulate(const Paths& paths, const SimConfig& cfg,
                 const std::optional<CovariateRow>& row) {
  const ModelSpec spec = load_spec(paths.params);
  const Dataset d = simulate_dataset(spec, cfg, row ? &*row : nullptr);
  if (paths.out.empty()) {
    write_csv(d, std::cout);
  } else {
    write_csv(d, paths.out);
    std::cerr << "wrote " << d.n_rows() << " rows, " << d.n_clusters()
              << " clusters to " << paths.out << "\n";
  }
  return 0;
}

int run_verify(const Paths& paths, const SimConfig& cfg,
               const std::optional<CovariateRow>& row) {
  const ModelSpec spec = load_spec(paths.params);
  const SimReport report = verify(spec, cfg, row ? &*row : nullptr);
  print_report(report, std::cout);
  if (!paths.out.empty()) write_text_file(paths.out, report_to_json_text(report));
  return 0;
}

int run_fit(const Paths& paths, const std::string& family_name_str,
            const FitOptions& options) {
  const Family family = family_from_name(family_name_str);
  const Dataset d = load_expanded(paths);
  const FitResult fit = fit_ml(d, family, options);

  std::cout << "ML fit: " << family_name(fit.family) << ", " << fit.n_obs
            << " obs in " << fit.n_clusters << " clusters, "
            << fit.n_quad_nodes << " quadrature nodes\n";
  for (Eigen::Index k = 0; k < fit.beta.size(); ++k) {
    print_kv(std::cout, fit.beta_names[static_cast<size_t>(k)],
             fmt9(fit.beta[k]) + "  (se " + fmt9(fit.se_beta[k]) + ")");
  }
  print_kv(std::cout, "sigma2_u",
           fmt9(fit.sigma2_u) + "  (se " + fmt9(fit.se_sigma2_u) + ")");
  if (fit.family == Family::NB2)
    print_kv(std::cout, "alpha",
             fmt9(fit.alpha) + "  (se " + fmt9(fit.se_alpha) + ")");
  print_kv(std::cout, "loglik", fmt9(fit.log_likelihood));
  print_kv(std::cout, "deviance", fmt9(fit.deviance));
  print_kv(std::cout, "converged", fit.converged ? "yes" : "no");
  if (fit.boundary_sigma2_u) print_kv(std::cout, "note", "sigma2_u at boundary");

  if (!paths.out.empty()) write_text_file(paths.out, fit_to_json_text(fit));

  if (!fit.converged) {
    std::cerr << "countvpc: fit did not converge within the iteration limit\n";
    return 2;
  }
  return 0;
}

int run_summary(const Paths& paths) {
  const SchemaConfig schema = load_schema_or_default(paths.schema);
  const Dataset d = load_csv(paths.data, schema);

  double mean_y = 0.0;
  for (long long v : d.y) mean_y += static_cast<double>(v);
  if (!d.y.empty()) mean_y /= static_cast<double>(d.y.size());
  std::cout << "total: N=" << d.n_rows() << " mean_y=" << fmt9(mean_y) << "\n";

  auto print_group = [&](const std::string& column) {
    std::cout << column << ":\n";
    for (const auto& row : group_summary(d, column)) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "  %-16s N=%-8zu mean_y=%s\n",
                    row.level.c_str(), row.n, fmt9(row.mean_y).c_str());
      std::cout << buf;
    }
  };
  for (const auto& name : d.categorical_names) print_group(name);
  for (const auto& name : d.covariate_names) print_group(name);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"variance partitioning toolkit for multilevel count models"};
  app.require_subcommand(1);

  Paths paths;
  std::string format = "table";
  uint64_t seed = kDefaultSeed;
  int threads = 0;
  std::optional<int> opt_clusters, opt_units, opt_superclusters;
  int nodes = 7;
  std::string family_str = "poisson";

  auto add_format = [&](CLI::App* cmd) {
    cmd->add_option("--format", format, "output format")
        ->check(CLI::IsMember({"table", "json", "csv"}));
  };
  auto add_sim_flags = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "RNG seed (default " +
                                        std::to_string(kDefaultSeed) + ")")
        ->envname("COUNTVPC_SEED");
    cmd->add_option("--clusters", opt_clusters, "number of clusters J");
    cmd->add_option("--units", opt_units, "units per cluster n");
    cmd->add_option("--superclusters", opt_superclusters,
                    "number of superclusters K (three-level)");
    cmd->add_option("--threads", threads, "worker thread cap (0 = all)");
  };

  CLI::App* stats = app.add_subcommand(
      "stats", "closed-form marginal statistics for a parameter file");
  stats->add_option("--params", paths.params, "model parameter JSON")->required();
  add_format(stats);

  CLI::App* profile = app.add_subcommand(
      "profile", "per-observation marginal statistics as CSV");
  profile->add_option("--params", paths.params, "model parameter JSON")->required();
  profile->add_option("--data", paths.data, "dataset CSV")->required();
  profile->add_option("--schema", paths.schema, "dataset schema JSON");
  profile->add_option("--out", paths.out, "output CSV path");
  profile->add_option("--threads", threads, "worker thread cap (0 = all)");

  CLI::App* simulate = app.add_subcommand(
      "simulate", "simulate a dataset from a parameter file");
  simulate->add_option("--params", paths.params, "model parameter JSON")->required();
  simulate->add_option("--out", paths.out, "output CSV path");
  simulate->add_option("--data", paths.data,
                       "CSV whose first row fixes the covariate values");
  simulate->add_option("--schema", paths.schema, "dataset schema JSON");
  add_sim_flags(simulate);

  CLI::App* verify_cmd = app.add_subcommand(
      "verify", "compare closed forms against the simulation method");
  verify_cmd->add_option("--params", paths.params, "model parameter JSON")->required();
  verify_cmd->add_option("--out", paths.out, "report JSON path");
  verify_cmd->add_option("--data", paths.data,
                         "CSV whose first row fixes the covariate values");
  verify_cmd->add_option("--schema", paths.schema, "dataset schema JSON");
  add_sim_flags(verify_cmd);

  CLI::App* fit = app.add_subcommand(
      "fit", "maximum-likelihood fit of a two-level random-intercept model");
  fit->add_option("--data", paths.data, "dataset CSV")->required();
  fit->add_option("--schema", paths.schema, "dataset schema JSON");
  fit->add_option("--family", family_str, "poisson or nb2")
      ->check(CLI::IsMember({"poisson", "nb2"}));
  fit->add_option("--nodes", nodes, "quadrature nodes (default 7)");
  fit->add_option("--out", paths.out, "fitted parameter JSON path");
  fit->add_option("--threads", threads, "worker thread cap (0 = all)");

  CLI::App* summary = app.add_subcommand(
      "summary", "per-group observation counts and mean response");
  summary->add_option("--data", paths.data, "dataset CSV")->required();
  summary->add_option("--schema", paths.schema, "dataset schema JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // flag/usage problems are user errors
  }

  try {
    if (stats->parsed()) return run_stats(paths, format);
    if (profile->parsed()) return run_profile(paths, threads);

    std::optional<CovariateRow> row;
    if ((simulate->parsed() || verify_cmd->parsed()) && !paths.data.empty())
      row = covariate_row_from(load_expanded(paths));

    if (simulate->parsed() || verify_cmd->parsed()) {
      const ModelSpec spec = load_spec(paths.params);
      const SimConfig cfg = make_config(spec, opt_superclusters, opt_clusters,
                                        opt_units, seed, threads);
      return simulate->parsed() ? run_simulate(paths, cfg, row)
                                : run_verify(paths, cfg, row);
    }
    if (fit->parsed()) {
      FitOptions options;
      options.n_quad_nodes = nodes;
      options.threads = threads;
      return run_fit(paths, family_str, options);
    }
    if (summary->parsed()) return run_summary(paths);
  } catch (const std::invalid_argument& e) {
    std::cerr << "countvpc: " << e.what() << "\n";
    return 1;
  } catch (const std::range_error& e) {
    std::cerr << "countvpc: numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "countvpc: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
