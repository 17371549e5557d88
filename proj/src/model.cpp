#include "countvpc/model.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace countvpc {

namespace {

constexpr double kPsdTolerance = 1e-10;

const char* dispersion_label(Dispersion::Kind k) {
  switch (k) {
    case Dispersion::Kind::None: return "none";
    case Dispersion::Kind::LognormalSigma2e: return "sigma2_e";
    case Dispersion::Kind::Alpha: return "alpha";
    case Dispersion::Kind::Delta: return "delta";
  }
  return "?";
}

Dispersion::Kind legal_dispersion(Family f) {
  switch (f) {
    case Family::Poisson: return Dispersion::Kind::None;
    case Family::PoissonLognormal: return Dispersion::Kind::LognormalSigma2e;
    case Family::NB2: return Dispersion::Kind::Alpha;
    case Family::NB1: return Dispersion::Kind::Delta;
  }
  return Dispersion::Kind::None;
}

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::Poisson: return "poisson";
    case Family::PoissonLognormal: return "poisson_lognormal";
    case Family::NB2: return "nb2";
    case Family::NB1: return "nb1";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  if (name == "poisson") return Family::Poisson;
  if (name == "poisson_lognormal") return Family::PoissonLognormal;
  if (name == "nb2") return Family::NB2;
  if (name == "nb1") return Family::NB1;
  throw std::invalid_argument("unknown family \"" + name + "\"");
}

FixedEffects FixedEffects::intercept_only(double beta0) {
  FixedEffects fe;
  fe.beta = Eigen::VectorXd::Constant(1, beta0);
  fe.names = {"_cons"};
  return fe;
}

RandomPart RandomPart::intercept(double sigma2_u) {
  RandomPart r;
  r.kind = Kind::Intercept;
  r.sigma2_u = sigma2_u;
  return r;
}

RandomPart RandomPart::coefficient(Eigen::MatrixXd omega,
                                   std::vector<std::string> z_columns) {
  RandomPart r;
  r.kind = Kind::Coefficient;
  r.omega = std::move(omega);
  r.z_columns = std::move(z_columns);
  return r;
}

ModelSpec validate_spec(ModelSpec spec) {
  const auto& beta = spec.fixed.beta;
  if (beta.size() < 1) throw std::invalid_argument("beta must have length >= 1");
  if (!beta.allFinite()) throw std::invalid_argument("beta has non-finite entry");
  if (spec.fixed.names.size() != static_cast<size_t>(beta.size()))
    throw std::invalid_argument("covariate name count does not match beta length");

  if (spec.random.kind == RandomPart::Kind::Intercept) {
    if (!(spec.random.sigma2_u >= 0.0) || !std::isfinite(spec.random.sigma2_u))
      throw std::invalid_argument("sigma2_u must be finite and >= 0");
  } else {
    const auto& omega = spec.random.omega;
    if (omega.rows() != omega.cols() || omega.rows() < 1)
      throw std::invalid_argument("omega must be a square matrix");
    if (!omega.allFinite())
      throw std::invalid_argument("omega has non-finite entry");
    if (!omega.isApprox(omega.transpose(), 1e-12))
      throw std::invalid_argument("omega must be symmetric");
    if (spec.random.z_columns.size() != static_cast<size_t>(omega.rows()))
      throw std::invalid_argument("z_columns length does not match omega dimension");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(omega);
    const Eigen::VectorXd& ev = es.eigenvalues();
    if (ev.minCoeff() < -kPsdTolerance) {
      std::ostringstream msg;
      msg << "omega is not positive semi-definite (eigenvalue "
          << ev.minCoeff() << ")";
      throw std::invalid_argument(msg.str());
    }
    if (ev.minCoeff() < 0.0) {
      // Boundary case: clamp the slightly negative eigenvalues to zero.
      Eigen::VectorXd clamped = ev.cwiseMax(0.0);
      spec.random.omega = es.eigenvectors() * clamped.asDiagonal() *
                          es.eigenvectors().transpose();
    }
  }

  if (spec.levels == Levels::Three) {
    if (!(spec.sigma2_v >= 0.0) || !std::isfinite(spec.sigma2_v))
      throw std::invalid_argument("three-level spec requires sigma2_v >= 0");
  } else if (spec.sigma2_v != 0.0) {
    throw std::invalid_argument("sigma2_v given for a two-level spec");
  }

  const Dispersion::Kind want = legal_dispersion(spec.family);
  if (spec.dispersion.kind != want) {
    std::ostringstream msg;
    msg << "dispersion mismatch: family " << family_name(spec.family)
        << " takes " << dispersion_label(want) << ", got "
        << dispersion_label(spec.dispersion.kind);
    throw std::invalid_argument(msg.str());
  }
  if (spec.dispersion.kind != Dispersion::Kind::None) {
    if (!(spec.dispersion.value >= 0.0) || !std::isfinite(spec.dispersion.value))
      throw std::invalid_argument("dispersion parameter must be finite and >= 0");
  }

  return spec;
}

double cluster_variance_function(const RandomPart& random,
                                 const Eigen::VectorXd& z) {
  if (random.kind == RandomPart::Kind::Intercept) return random.sigma2_u;
  if (z.size() != random.omega.rows()) {
    std::ostringstream msg;
    msg << "design vector length " << z.size() << " does not match omega dimension "
        << random.omega.rows();
    throw std::invalid_argument(msg.str());
  }
  const double v = z.dot(random.omega * z);
  return v < 0.0 ? 0.0 : v;
}

// --- JSON parameter files ---------------------------------------------------

using nlohmann::json;

namespace {

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.family = family_from_name(j.at("family").get<std::string>());

  const std::string levels = j.value("levels", "two");
  if (levels == "two") {
    spec.levels = Levels::Two;
  } else if (levels == "three") {
    spec.levels = Levels::Three;
  } else {
    throw std::invalid_argument("levels must be \"two\" or \"three\"");
  }

  const auto beta = j.at("beta").get<std::vector<double>>();
  spec.fixed.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), beta.size());
  spec.fixed.names = {"_cons"};
  if (j.contains("covariates")) {
    for (const auto& name : j.at("covariates"))
      spec.fixed.names.push_back(name.get<std::string>());
  }

  const json& r = j.at("random");
  const std::string type = r.at("type").get<std::string>();
  if (type == "intercept") {
    spec.random = RandomPart::intercept(r.at("sigma2_u").get<double>());
  } else if (type == "coefficient") {
    const auto rows = r.at("omega").get<std::vector<std::vector<double>>>();
    const size_t d = rows.size();
    Eigen::MatrixXd omega(d, d);
    for (size_t i = 0; i < d; ++i) {
      if (rows[i].size() != d)
        throw std::invalid_argument("omega rows must all have the matrix dimension");
      for (size_t k = 0; k < d; ++k) omega(i, k) = rows[i][k];
    }
    spec.random = RandomPart::coefficient(
        omega, r.at("z_columns").get<std::vector<std::string>>());
  } else {
    throw std::invalid_argument("random.type must be \"intercept\" or \"coefficient\"");
  }

  if (j.contains("sigma2_v")) {
    spec.sigma2_v = j.at("sigma2_v").get<double>();
  } else if (spec.levels == Levels::Three) {
    throw std::invalid_argument("three-level spec requires sigma2_v");
  }

  if (j.contains("dispersion")) {
    const json& d = j.at("dispersion");
    if (d.contains("alpha")) {
      spec.dispersion = Dispersion::alpha(d.at("alpha").get<double>());
    } else if (d.contains("delta")) {
      spec.dispersion = Dispersion::delta(d.at("delta").get<double>());
    } else if (d.contains("sigma2_e")) {
      spec.dispersion = Dispersion::lognormal(d.at("sigma2_e").get<double>());
    } else if (!d.empty()) {
      throw std::invalid_argument("dispersion must give alpha, delta, or sigma2_e");
    }
  }

  return validate_spec(std::move(spec));
}

json spec_to_json(const ModelSpec& spec) {
  json j;
  j["family"] = family_name(spec.family);
  j["levels"] = spec.levels == Levels::Two ? "two" : "three";
  j["beta"] = std::vector<double>(spec.fixed.beta.data(),
                                  spec.fixed.beta.data() + spec.fixed.beta.size());
  j["covariates"] = std::vector<std::string>(spec.fixed.names.begin() + 1,
                                             spec.fixed.names.end());
  if (spec.random.kind == RandomPart::Kind::Intercept) {
    j["random"] = {{"type", "intercept"}, {"sigma2_u", spec.random.sigma2_u}};
  } else {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index i = 0; i < spec.random.omega.rows(); ++i) {
      rows.emplace_back(spec.random.omega.row(i).begin(),
                        spec.random.omega.row(i).end());
    }
    j["random"] = {{"type", "coefficient"},
                   {"omega", rows},
                   {"z_columns", spec.random.z_columns}};
  }
  if (spec.levels == Levels::Three) j["sigma2_v"] = spec.sigma2_v;
  switch (spec.dispersion.kind) {
    case Dispersion::Kind::None: break;
    case Dispersion::Kind::Alpha:
      j["dispersion"] = {{"alpha", spec.dispersion.value}};
      break;
    case Dispersion::Kind::Delta:
      j["dispersion"] = {{"delta", spec.dispersion.value}};
      break;
    case Dispersion::Kind::LognormalSigma2e:
      j["dispersion"] = {{"sigma2_e", spec.dispersion.value}};
      break;
  }
  return j;
}

}  // namespace

ModelSpec spec_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("parameter file is not valid JSON: ") +
                                e.what());
  }
  try {
    return spec_from_json(j);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad parameter file: ") + e.what());
  }
}

std::string spec_to_json_text(const ModelSpec& spec, int indent) {
  return spec_to_json(spec).dump(indent) + "\n";
}

ModelSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open parameter file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return spec_from_json_text(buf.str());
}

}  // namespace countvpc
