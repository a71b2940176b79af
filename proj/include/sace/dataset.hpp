#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sace/csv.hpp"
#include <json.hpp>

namespace sace {

enum class ColumnType { continuous, binary };

struct ColumnMeta {
  std::string name;
  ColumnType type = ColumnType::continuous;
};

// Declares which file columns play which role. The distance, the
// principal-score model and the outcome regression may each use a different
// covariate subset, so roles are configuration, not inference.
struct Roles {
  std::string id_col = "id";
  std::string treatment_col;
  std::string survival_col;
  std::string outcome_col;
  std::vector<ColumnMeta> covariates;          // pre-treatment columns, in order
  std::vector<ColumnMeta> post_covariates;     // post-treatment columns (CSE only)
  bool post_declared = false;                  // the key was present, even if empty
  std::vector<std::string> distance_cols;      // subset of covariates
  std::vector<std::string> principal_score_cols;
  std::vector<std::string> outcome_model_cols;
};

struct UnitRecord {
  int id = 0;
  Eigen::VectorXd x0;
  Eigen::VectorXd x1;
  int a = 0;
  int s = 0;
  std::optional<double> y;  // present iff s == 1
};

struct CrossTab {
  // counts[a][s]
  long counts[2][2] = {{0, 0}, {0, 0}};
  long total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }
  double proportion(int a, int s) const {
    return total() ? static_cast<double>(counts[a][s]) / static_cast<double>(total()) : 0.0;
  }
};

class Dataset {
 public:
  std::vector<int> ids;
  Eigen::MatrixXd x0;   // n x k
  Eigen::MatrixXd x1;   // n x k1 (k1 may be 0)
  Eigen::VectorXi a;
  Eigen::VectorXi s;
  Eigen::VectorXd y;    // NaN where truncated
  Roles roles;

  long n() const { return ids.size(); }
  long k0() const { return x0.cols(); }
  long k1() const { return x1.cols(); }

  bool has_outcome(long i) const { return s[i] == 1; }

  UnitRecord unit(long i) const {
    UnitRecord u;
    u.id = ids[i];
    u.x0 = x0.row(i);
    if (x1.cols() > 0) u.x1 = x1.row(i);
    u.a = a[i];
    u.s = s[i];
    if (s[i] == 1) u.y = y[i];
    return u;
  }

  int covariate_index(const std::string& name) const {
    for (size_t j = 0; j < roles.covariates.size(); ++j)
      if (roles.covariates[j].name == name) return static_cast<int>(j);
    throw std::invalid_argument("unknown covariate: " + name);
  }

  int post_covariate_index(const std::string& name) const {
    for (size_t j = 0; j < roles.post_covariates.size(); ++j)
      if (roles.post_covariates[j].name == name) return static_cast<int>(j);
    throw std::invalid_argument("unknown post-treatment covariate: " + name);
  }

  std::vector<int> role_indices(const std::vector<std::string>& names) const {
    std::vector<int> idx;
    idx.reserve(names.size());
    for (const auto& nm : names) idx.push_back(covariate_index(nm));
    return idx;
  }

  // units with S=1 in a given arm, as row indices
  std::vector<long> survivors(int arm) const {
    std::vector<long> out;
    for (long i = 0; i < n(); ++i)
      if (a[i] == arm && s[i] == 1) out.push_back(i);
    return out;
  }

  void validate_for_matching() const {
    if (survivors(0).empty() || survivors(1).empty())
      throw std::invalid_argument("need at least one survivor in each treatment arm");
  }
};

inline Roles roles_from_json(const nlohmann::json& j) {
  Roles r;
  r.id_col = j.value("id", "id");
  r.treatment_col = j.at("treatment").get<std::string>();
  r.survival_col = j.at("survival").get<std::string>();
  r.outcome_col = j.at("outcome").get<std::string>();
  auto parse_cols = [](const nlohmann::json& arr) {
    std::vector<ColumnMeta> out;
    for (const auto& c : arr) {
      ColumnMeta m;
      m.name = c.at("name").get<std::string>();
      const std::string ty = c.value("type", "continuous");
      if (ty == "continuous") m.type = ColumnType::continuous;
      else if (ty == "binary") m.type = ColumnType::binary;
      else throw std::invalid_argument("unknown column type: " + ty);
      out.push_back(std::move(m));
    }
    return out;
  };
  r.covariates = parse_cols(j.at("covariates"));
  if (j.contains("post_covariates")) {
    r.post_covariates = parse_cols(j["post_covariates"]);
    r.post_declared = true;
  }
  auto names = [](const nlohmann::json& arr) {
    return arr.get<std::vector<std::string>>();
  };
  r.distance_cols = names(j.at("roles").at("distance"));
  r.principal_score_cols = names(j.at("roles").at("principal_score"));
  r.outcome_model_cols = names(j.at("roles").at("outcome_model"));
  return r;
}

inline Roles load_roles(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open roles file: " + path);
  nlohmann::json j;
  in >> j;
  return roles_from_json(j);
}

inline Dataset load_dataset(const std::string& path, const Roles& roles) {
  csv::Table t = csv::read_file(path);
  if (t.rows.empty()) throw std::runtime_error("no rows in " + path);

  auto need = [&](const std::string& name) {
    int c = t.column(name);
    if (c < 0) throw std::runtime_error("missing required column '" + name + "' in " + path);
    return c;
  };
  const int ci = t.column(roles.id_col);  // id column optional; row order used otherwise
  const int ca = need(roles.treatment_col);
  const int cs = need(roles.survival_col);
  const int cy = need(roles.outcome_col);
  std::vector<int> cx, cx1;
  for (const auto& m : roles.covariates) cx.push_back(need(m.name));
  for (const auto& m : roles.post_covariates) cx1.push_back(need(m.name));

  const long n = static_cast<long>(t.rows.size());
  Dataset d;
  d.roles = roles;
  d.ids.resize(n);
  d.x0.resize(n, static_cast<long>(cx.size()));
  d.x1.resize(n, static_cast<long>(cx1.size()));
  d.a.resize(n);
  d.s.resize(n);
  d.y.resize(n);

  for (long i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    const std::string ctx = "row " + std::to_string(i + 2);  // 1-based incl. header
    auto binary_cell = [&](int col, const std::string& name) {
      double v = csv::parse_double(row[col], ctx + " column '" + name + "'");
      if (v != 0.0 && v != 1.0)
        throw std::runtime_error("non-binary value '" + row[col] + "' in " + ctx +
                                 " column '" + name + "'");
      return static_cast<int>(v);
    };
    d.ids[i] = ci >= 0 ? static_cast<int>(csv::parse_double(row[ci], ctx + " id")) : static_cast<int>(i + 1);
    d.a[i] = binary_cell(ca, roles.treatment_col);
    d.s[i] = binary_cell(cs, roles.survival_col);
    const std::string& ycell = row[cy];
    const bool y_present = !ycell.empty() && ycell != "NA";
    if (d.s[i] == 0 && y_present)
      throw std::runtime_error("outcome present for non-survivor in " + ctx +
                               " (corrupt truncation encoding)");
    if (d.s[i] == 1 && !y_present)
      throw std::runtime_error("outcome missing for survivor in " + ctx);
    d.y[i] = y_present ? csv::parse_double(ycell, ctx + " outcome") : std::nan("");
    for (size_t j = 0; j < cx.size(); ++j)
      d.x0(i, j) = csv::parse_double(row[cx[j]], ctx + " column '" + roles.covariates[j].name + "'");
    for (size_t j = 0; j < cx1.size(); ++j)
      d.x1(i, j) = csv::parse_double(row[cx1[j]], ctx + " column '" + roles.post_covariates[j].name + "'");
  }
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << d.roles.id_col << ',' << d.roles.treatment_col << ',' << d.roles.survival_col;
  for (const auto& m : d.roles.covariates) out << ',' << m.name;
  for (const auto& m : d.roles.post_covariates) out << ',' << m.name;
  out << ',' << d.roles.outcome_col << '\n';
  for (long i = 0; i < d.n(); ++i) {
    out << d.ids[i] << ',' << d.a[i] << ',' << d.s[i];
    for (long j = 0; j < d.k0(); ++j) out << ',' << csv::format_double(d.x0(i, j));
    for (long j = 0; j < d.k1(); ++j) out << ',' << csv::format_double(d.x1(i, j));
    out << ',' << (d.s[i] == 1 ? csv::format_double(d.y[i]) : std::string()) << '\n';
  }
}

inline CrossTab crosstab_survival(const Dataset& d) {
  CrossTab ct;
  for (long i = 0; i < d.n(); ++i) ++ct.counts[d.a[i]][d.s[i]];
  return ct;
}

inline Dataset subset(const Dataset& d, const std::vector<long>& rows) {
  Dataset out;
  out.roles = d.roles;
  const long m = static_cast<long>(rows.size());
  out.ids.resize(m);
  out.x0.resize(m, d.x0.cols());
  out.x1.resize(m, d.x1.cols());
  out.a.resize(m);
  out.s.resize(m);
  out.y.resize(m);
  for (long i = 0; i < m; ++i) {
    const long r = rows[i];
    out.ids[i] = d.ids[r];
    out.x0.row(i) = d.x0.row(r);
    if (d.x1.cols() > 0) out.x1.row(i) = d.x1.row(r);
    out.a[i] = d.a[r];
    out.s[i] = d.s[r];
    out.y[i] = d.y[r];
  }
  return out;
}

// p_a = Pr(S=1 | A=a), estimated by the cell ratios
inline std::pair<double, double> survival_rates(const Dataset& d) {
  CrossTab ct = crosstab_survival(d);
  const long n0 = ct.counts[0][0] + ct.counts[0][1];
  const long n1 = ct.counts[1][0] + ct.counts[1][1];
  if (n0 == 0 || n1 == 0) throw std::invalid_argument("empty treatment arm");
  return {static_cast<double>(ct.counts[0][1]) / n0, static_cast<double>(ct.counts[1][1]) / n1};
}

}  // namespace sace
