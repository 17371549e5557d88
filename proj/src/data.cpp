#include "countvpc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace countvpc {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

std::string format_double(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

size_t count_distinct(const std::vector<std::string>& ids) {
  return std::unordered_set<std::string>(ids.begin(), ids.end()).size();
}

}  // namespace

int Dataset::covariate_index(const std::string& name) const {
  for (size_t c = 0; c < covariate_names.size(); ++c)
    if (covariate_names[c] == name) return static_cast<int>(c);
  return -1;
}

size_t Dataset::n_clusters() const { return count_distinct(cluster); }

size_t Dataset::n_superclusters() const { return count_distinct(supercluster); }

SchemaConfig schema_from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("schema file is not valid JSON: ") +
                                e.what());
  }
  SchemaConfig s;
  s.response = j.value("response", s.response);
  s.cluster = j.value("cluster", s.cluster);
  s.supercluster = j.value("supercluster", s.supercluster);
  s.offset = j.value("offset", s.offset);
  if (j.contains("categorical")) {
    for (const auto& c : j.at("categorical")) {
      CategoricalSpec cs;
      cs.column = c.at("column").get<std::string>();
      cs.reference = c.at("reference").get<std::string>();
      if (c.contains("levels"))
        cs.levels = c.at("levels").get<std::vector<std::string>>();
      s.categoricals.push_back(std::move(cs));
    }
  }
  return s;
}

SchemaConfig load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open schema file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return schema_from_json_text(buf.str());
}

Dataset parse_csv(std::istream& in, const SchemaConfig& schema,
                  const std::string& origin) {
  std::string line;
  if (!std::getline(in, line))
    throw std::invalid_argument(origin + ": missing header row");
  const std::vector<std::string> header = split_csv_line(line);

  auto column_of = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  };

  const int y_col = column_of(schema.response);
  const int cluster_col = column_of(schema.cluster);
  if (y_col < 0)
    throw std::invalid_argument(origin + ": missing response column \"" +
                                schema.response + "\"");
  if (cluster_col < 0)
    throw std::invalid_argument(origin + ": missing cluster column \"" +
                                schema.cluster + "\"");
  const int super_col =
      schema.supercluster.empty() ? -1 : column_of(schema.supercluster);
  const int offset_col = schema.offset.empty() ? -1 : column_of(schema.offset);

  Dataset d;
  std::vector<int> cat_cols;  // column index per declared categorical
  std::unordered_map<int, size_t> role;  // header column -> handled marker
  role[y_col] = 1;
  role[cluster_col] = 1;
  if (super_col >= 0) role[super_col] = 1;
  if (offset_col >= 0) role[offset_col] = 1;
  for (const auto& cs : schema.categoricals) {
    const int col = column_of(cs.column);
    if (col < 0)
      throw std::invalid_argument(origin + ": missing categorical column \"" +
                                  cs.column + "\"");
    cat_cols.push_back(col);
    role[col] = 1;
    d.categorical_names.push_back(cs.column);
    d.categoricals.emplace_back();
  }
  std::vector<int> cov_cols;
  for (size_t i = 0; i < header.size(); ++i) {
    if (!role.count(static_cast<int>(i))) {
      cov_cols.push_back(static_cast<int>(i));
      d.covariate_names.push_back(header[i]);
      d.covariates.emplace_back();
    }
  }

  std::unordered_map<std::string, std::string> nesting;  // cluster -> supercluster
  size_t row_no = 1;  // header was row 1
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      std::ostringstream msg;
      msg << origin << " row " << row_no << ": expected " << header.size()
          << " fields, got " << fields.size();
      throw std::invalid_argument(msg.str());
    }
    auto cell = [&](int col) -> const std::string& { return fields[col]; };
    auto parse_num = [&](int col, const char* what) {
      const std::string& s = cell(col);
      if (s.empty()) {
        std::ostringstream msg;
        msg << origin << " row " << row_no << ": missing " << what << " value";
        throw std::invalid_argument(msg.str());
      }
      size_t pos = 0;
      double v;
      try {
        v = std::stod(s, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != s.size() || !std::isfinite(v)) {
        std::ostringstream msg;
        msg << origin << " row " << row_no << ": " << what << " value \"" << s
            << "\" is not a finite number";
        throw std::invalid_argument(msg.str());
      }
      return v;
    };

    const double yv = parse_num(y_col, "count");
    if (yv < 0 || yv != std::floor(yv)) {
      std::ostringstream msg;
      msg << origin << " row " << row_no << ": count \"" << cell(y_col)
          << "\" is not a nonnegative integer";
      throw std::invalid_argument(msg.str());
    }
    d.y.push_back(static_cast<long long>(yv));

    if (cell(cluster_col).empty()) {
      std::ostringstream msg;
      msg << origin << " row " << row_no << ": empty cluster id";
      throw std::invalid_argument(msg.str());
    }
    d.cluster.push_back(cell(cluster_col));

    if (super_col >= 0) {
      if (cell(super_col).empty()) {
        std::ostringstream msg;
        msg << origin << " row " << row_no << ": empty supercluster id";
        throw std::invalid_argument(msg.str());
      }
      d.supercluster.push_back(cell(super_col));
      auto [it, inserted] = nesting.emplace(d.cluster.back(), d.supercluster.back());
      if (!inserted && it->second != d.supercluster.back()) {
        std::ostringstream msg;
        msg << origin << " row " << row_no << ": cluster \"" << d.cluster.back()
            << "\" appears in superclusters \"" << it->second << "\" and \""
            << d.supercluster.back() << "\"";
        throw std::invalid_argument(msg.str());
      }
    }
    if (offset_col >= 0) d.offset.push_back(parse_num(offset_col, "offset"));

    for (size_t c = 0; c < cov_cols.size(); ++c)
      d.covariates[c].push_back(parse_num(cov_cols[c], d.covariate_names[c].c_str()));
    for (size_t c = 0; c < cat_cols.size(); ++c) {
      if (cell(cat_cols[c]).empty()) {
        std::ostringstream msg;
        msg << origin << " row " << row_no << ": missing " << d.categorical_names[c]
            << " value";
        throw std::invalid_argument(msg.str());
      }
      d.categoricals[c].push_back(cell(cat_cols[c]));
    }
  }
  return d;
}

Dataset load_csv(const std::string& path, const SchemaConfig& schema) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open data file: " + path);
  return parse_csv(in, schema, path);
}

void write_csv(const Dataset& d, std::ostream& out) {
  out << "y,cluster";
  if (d.has_supercluster()) out << ",supercluster";
  if (d.has_offset()) out << ",offset";
  for (const auto& name : d.covariate_names) out << ',' << name;
  for (const auto& name : d.categorical_names) out << ',' << name;
  out << '\n';
  for (size_t i = 0; i < d.n_rows(); ++i) {
    out << d.y[i] << ',' << d.cluster[i];
    if (d.has_supercluster()) out << ',' << d.supercluster[i];
    if (d.has_offset()) out << ',' << format_double(d.offset[i], 12);
    for (const auto& col : d.covariates) out << ',' << format_double(col[i], 12);
    for (const auto& col : d.categoricals) out << ',' << col[i];
    out << '\n';
  }
}

void write_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot open output file: " + path);
  write_csv(d, out);
}

Dataset expand_categoricals(Dataset d, const SchemaConfig& schema) {
  for (const auto& cs : schema.categoricals) {
    auto it = std::find(d.categorical_names.begin(), d.categorical_names.end(),
                        cs.column);
    if (it == d.categorical_names.end())
      throw std::invalid_argument("categorical column \"" + cs.column +
                                  "\" not present in dataset");
    const size_t c = it - d.categorical_names.begin();
    const std::vector<std::string>& values = d.categoricals[c];

    std::vector<std::string> levels = cs.levels;
    if (levels.empty()) {
      std::set<std::string> seen(values.begin(), values.end());
      seen.insert(cs.reference);
      levels.assign(seen.begin(), seen.end());
    } else {
      std::set<std::string> allowed(levels.begin(), levels.end());
      allowed.insert(cs.reference);
      for (size_t i = 0; i < values.size(); ++i) {
        if (!allowed.count(values[i])) {
          std::ostringstream msg;
          msg << "column \"" << cs.column << "\" row " << i + 2 << ": level \""
              << values[i] << "\" is outside the declared set";
          throw std::invalid_argument(msg.str());
        }
      }
    }

    for (const auto& level : levels) {
      if (level == cs.reference) continue;
      d.covariate_names.push_back(cs.column + level);
      std::vector<double> indicator(values.size());
      for (size_t i = 0; i < values.size(); ++i)
        indicator[i] = values[i] == level ? 1.0 : 0.0;
      d.covariates.push_back(std::move(indicator));
    }

    d.categorical_names.erase(d.categorical_names.begin() + c);
    d.categoricals.erase(d.categoricals.begin() + c);
  }
  return d;
}

std::vector<GroupRow> group_summary(const Dataset& d, const std::string& by) {
  // Accepts id columns, categorical columns, and numeric covariates.
  std::map<std::string, std::pair<size_t, double>> groups;  // level -> (n, sum y)
  auto accumulate = [&](const std::string& level, size_t row) {
    auto& slot = groups[level];
    slot.first += 1;
    slot.second += static_cast<double>(d.y[row]);
  };

  if (by == "cluster") {
    for (size_t i = 0; i < d.n_rows(); ++i) accumulate(d.cluster[i], i);
  } else if (by == "supercluster" && d.has_supercluster()) {
    for (size_t i = 0; i < d.n_rows(); ++i) accumulate(d.supercluster[i], i);
  } else {
    auto cat = std::find(d.categorical_names.begin(), d.categorical_names.end(), by);
    if (cat != d.categorical_names.end()) {
      const auto& col = d.categoricals[cat - d.categorical_names.begin()];
      for (size_t i = 0; i < d.n_rows(); ++i) accumulate(col[i], i);
    } else {
      const int c = d.covariate_index(by);
      if (c < 0)
        throw std::invalid_argument("no column named \"" + by + "\"");
      for (size_t i = 0; i < d.n_rows(); ++i)
        accumulate(format_double(d.covariates[c][i], 12), i);
    }
  }

  std::vector<GroupRow> out;
  for (const auto& [level, acc] : groups)
    out.push_back({level, acc.first, acc.second / static_cast<double>(acc.first)});
  return out;
}

}  // namespace countvpc
