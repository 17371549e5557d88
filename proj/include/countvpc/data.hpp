#pragma once

// Long-format tabular data: CSV ingestion against a schema, categorical
// expansion into indicator columns, and per-group response summaries.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace countvpc {

// Column-major storage of long-format observations. Categorical columns
// declared in the schema stay as raw strings until expand_categoricals()
// turns them into indicator covariates.
struct Dataset {
  std::vector<long long> y;
  std::vector<std::string> cluster;
  std::vector<std::string> supercluster;  // empty when two-level

  std::vector<std::string> covariate_names;
  std::vector<std::vector<double>> covariates;  // covariates[c][row]

  std::vector<std::string> categorical_names;
  std::vector<std::vector<std::string>> categoricals;

  std::vector<double> offset;  // log exposure; empty when absent

  size_t n_rows() const { return y.size(); }
  bool has_supercluster() const { return !supercluster.empty(); }
  bool has_offset() const { return !offset.empty(); }

  // Index into covariates, or -1 when no such column.
  int covariate_index(const std::string& name) const;

  size_t n_clusters() const;
  size_t n_superclusters() const;
};

struct CategoricalSpec {
  std::string column;
  std::string reference;
  std::vector<std::string> levels;  // empty: infer from data (sorted)
};

// Maps CSV columns onto dataset roles. The supercluster and offset columns
// are picked up when present in the file and skipped otherwise.
struct SchemaConfig {
  std::string response = "y";
  std::string cluster = "cluster";
  std::string supercluster = "supercluster";
  std::string offset = "offset";
  std::vector<CategoricalSpec> categoricals;
};

SchemaConfig schema_from_json_text(const std::string& text);
SchemaConfig load_schema(const std::string& path);

// Reads a header-ed CSV into a typed Dataset. Counts must parse as
// nonnegative integers; missing cells are a hard error; every cluster must
// nest in exactly one supercluster. Errors name the offending row.
Dataset load_csv(const std::string& path, const SchemaConfig& schema = {});
Dataset parse_csv(std::istream& in, const SchemaConfig& schema,
                  const std::string& origin);

// Writes the canonical column order: y, cluster, [supercluster], [offset],
// covariates, categoricals. Floats at 12 significant digits.
void write_csv(const Dataset& data, std::ostream& out);
void write_csv(const Dataset& data, const std::string& path);

// Replaces each declared categorical column having L levels with L-1
// indicator columns named <column><level>, reference level omitted.
// New columns follow the declared order, then level order.
Dataset expand_categoricals(Dataset data, const SchemaConfig& schema);

struct GroupRow {
  std::string level;
  size_t n = 0;
  double mean_y = 0.0;
};

// Per-level observation count and mean response for one column (id,
// covariate, or categorical), levels in sorted order.
std::vector<GroupRow> group_summary(const Dataset& data,
                                    const std::string& by_column);

}  // namespace countvpc
