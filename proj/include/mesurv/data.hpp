#pragma once

// Tabular survival data: CSV ingestion, outcome declaration, and the cluster
// hierarchy used by the likelihood.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mesurv/error.hpp"

namespace mesurv {

enum class ColumnRole { numeric, identifier };

using ColumnSchema = std::map<std::string, ColumnRole>;

struct Column {
  std::string name;
  ColumnRole role = ColumnRole::numeric;
  std::vector<std::string> text;  // trimmed cell text, kept for identifiers and round trips
  std::vector<double> values;     // parsed values; empty for identifier columns
};

struct SurvivalRecord {
  double entry_time = 0.0;
  double exit_time = 0.0;
  int event = 0;
  std::vector<double> covariates;  // aligned with Dataset::numeric_names()
  std::optional<double> expected_rate;
  std::vector<std::string> cluster_path;  // highest level first
};

struct SurvivalSummary {
  std::size_t records = 0;
  std::size_t events = 0;
  double time_at_risk = 0.0;
};

// One node of the nesting tree. At the lowest level `children` holds record
// indices; above it, indices of clusters one level down.
struct Cluster {
  std::string id;
  std::size_t parent = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> children;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.emplace_back(trim(cur));
  return out;
}

inline bool is_missing(std::string_view cell) { return cell.empty() || cell == "."; }

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Numeric-aware ordering so cluster ids "2" < "10".
inline bool id_less(const std::string& a, const std::string& b) {
  const auto x = parse_double(a);
  const auto y = parse_double(b);
  if (x && y && *x != *y) return *x < *y;
  if (x.has_value() != y.has_value()) return x.has_value();
  return a < b;
}

inline std::string format17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

class Dataset {
 public:
  Dataset() = default;

  // Builds a dataset from already-parsed columns of equal length.
  static Dataset from_columns(std::vector<Column> columns) {
    Dataset d;
    std::size_t n = columns.empty() ? 0 : columns.front().text.size();
    for (auto& c : columns) {
      if (c.text.size() != n) throw SchemaError("column '" + c.name + "' has inconsistent length");
      if (c.role == ColumnRole::numeric && c.values.size() != n) {
        c.values.clear();
        for (std::size_t i = 0; i < n; ++i) {
          auto v = detail::parse_double(c.text[i]);
          if (!v) throw ParseError("non-numeric value '" + c.text[i] + "' in column '" + c.name + "'", i + 1);
          c.values.push_back(*v);
        }
      }
    }
    d.columns_ = std::move(columns);
    d.rows_ = n;
    d.index_columns();
    return d;
  }

  std::size_t rows() const noexcept { return rows_; }
  const std::vector<Column>& columns() const noexcept { return columns_; }
  const std::vector<std::string>& numeric_names() const noexcept { return numeric_names_; }

  bool has_column(const std::string& name) const { return find(name) != nullptr; }

  const Column& column(const std::string& name) const {
    const auto* c = find(name);
    if (!c) throw SchemaError("missing column '" + name + "'");
    return *c;
  }

  // Index of a numeric column within SurvivalRecord::covariates.
  std::size_t covariate_index(const std::string& name) const {
    auto it = numeric_index_.find(name);
    if (it == numeric_index_.end()) throw SchemaError("unknown covariate '" + name + "'");
    return it->second;
  }

  bool declared() const noexcept { return !records_.empty(); }
  const std::vector<SurvivalRecord>& records() const noexcept { return records_; }
  const SurvivalSummary& summary() const noexcept { return summary_; }
  bool has_expected_rate() const noexcept { return has_rate_; }
  bool has_delayed_entry() const noexcept { return has_entry_; }

  const std::vector<std::string>& level_names() const noexcept { return level_names_; }
  // levels()[0] is the highest level.
  const std::vector<std::vector<Cluster>>& levels() const noexcept { return levels_; }
  bool grouped() const noexcept { return !levels_.empty(); }

  // Copy with covariate values replaced for every record (prediction overrides).
  Dataset with_covariate(const std::string& name, double value) const {
    Dataset d = *this;
    const auto k = covariate_index(name);
    for (auto& r : d.records_) r.covariates[k] = value;
    for (auto& c : d.columns_) {
      if (c.name == name) {
        std::fill(c.values.begin(), c.values.end(), value);
        std::fill(c.text.begin(), c.text.end(), detail::format17(value));
      }
    }
    return d;
  }

 private:
  friend Dataset declare_survival(const Dataset&, const std::string&, const std::string&,
                                  const std::optional<std::string>&, const std::optional<std::string>&);
  friend Dataset build_hierarchy(const Dataset&, const std::vector<std::string>&);

  const Column* find(const std::string& name) const {
    for (const auto& c : columns_)
      if (c.name == name) return &c;
    return nullptr;
  }

  void index_columns() {
    numeric_names_.clear();
    numeric_index_.clear();
    for (const auto& c : columns_) {
      if (c.role != ColumnRole::numeric) continue;
      numeric_index_[c.name] = numeric_names_.size();
      numeric_names_.push_back(c.name);
    }
  }

  std::vector<Column> columns_;
  std::size_t rows_ = 0;
  std::vector<std::string> numeric_names_;
  std::unordered_map<std::string, std::size_t> numeric_index_;

  std::vector<SurvivalRecord> records_;
  SurvivalSummary summary_;
  bool has_rate_ = false;
  bool has_entry_ = false;

  std::vector<std::string> level_names_;
  std::vector<std::vector<Cluster>> levels_;
};

// Reads a header row followed by data rows. Only the columns named in `schema`
// are loaded; '.' or an empty cell in any of them is rejected.
inline Dataset load_csv(std::istream& in, const ColumnSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("no header row");
  const auto header = detail::split_csv_line(line);
  std::vector<std::pair<std::size_t, Column>> wanted;
  for (const auto& [name, role] : schema) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("missing column '" + name + "'");
    Column c;
    c.name = name;
    c.role = role;
    wanted.emplace_back(static_cast<std::size_t>(it - header.begin()), std::move(c));
  }
  // keep file order
  std::sort(wanted.begin(), wanted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(cells.size()), row);
    for (auto& [pos, col] : wanted) {
      const auto& cell = cells[pos];
      if (detail::is_missing(cell)) throw ParseError("missing value in column '" + col.name + "'", row);
      if (col.role == ColumnRole::numeric) {
        auto v = detail::parse_double(cell);
        if (!v) throw ParseError("non-numeric value '" + cell + "' in column '" + col.name + "'", row);
        col.values.push_back(*v);
      }
      col.text.push_back(cell);
    }
  }
  if (row == 0) throw SchemaError("no records");
  std::vector<Column> cols;
  for (auto& w : wanted) cols.push_back(std::move(w.second));
  return Dataset::from_columns(std::move(cols));
}

inline void write_csv(std::ostream& out, const Dataset& d) {
  const auto& cols = d.columns();
  for (std::size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << cols[j].name;
  out << '\n';
  for (std::size_t i = 0; i < d.rows(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << cols[j].text[i];
    out << '\n';
  }
}

// Assigns outcome roles and validates every row.
inline Dataset declare_survival(const Dataset& src, const std::string& time_col, const std::string& event_col,
                                const std::optional<std::string>& entry_col = std::nullopt,
                                const std::optional<std::string>& rate_col = std::nullopt) {
  Dataset d = src;
  const auto& time = d.column(time_col);
  const auto& event = d.column(event_col);
  const Column* entry = entry_col ? &d.column(*entry_col) : nullptr;
  const Column* rate = rate_col ? &d.column(*rate_col) : nullptr;
  for (const Column* c : {&time, &event, entry, rate})
    if (c && c->role != ColumnRole::numeric) throw SchemaError("column '" + c->name + "' must be numeric");

  d.records_.clear();
  d.summary_ = {};
  d.has_rate_ = rate != nullptr;
  d.has_entry_ = false;
  for (std::size_t i = 0; i < d.rows_; ++i) {
    SurvivalRecord r;
    r.exit_time = time.values[i];
    r.entry_time = entry ? entry->values[i] : 0.0;
    const double ev = event.values[i];
    if (ev != 0.0 && ev != 1.0) throw ValidationError("event indicator must be 0 or 1 (row " + std::to_string(i + 1) + ")");
    r.event = static_cast<int>(ev);
    if (r.entry_time < 0.0) throw ValidationError("negative entry time (row " + std::to_string(i + 1) + ")");
    if (!(r.exit_time > r.entry_time))
      throw ValidationError("exit time must exceed entry time (row " + std::to_string(i + 1) + ")");
    if (rate) {
      if (rate->values[i] < 0.0) throw ValidationError("negative expected rate (row " + std::to_string(i + 1) + ")");
      r.expected_rate = rate->values[i];
    }
    if (r.entry_time > 0.0) d.has_entry_ = true;
    r.covariates.reserve(d.numeric_names_.size());
    for (const auto& c : d.columns_)
      if (c.role == ColumnRole::numeric) r.covariates.push_back(c.values[i]);
    d.summary_.records += 1;
    d.summary_.events += static_cast<std::size_t>(r.event);
    d.summary_.time_at_risk += r.exit_time - r.entry_time;
    d.records_.push_back(std::move(r));
  }
  d.levels_.clear();
  d.level_names_.clear();
  return d;
}

// Groups records into nested clusters, highest level first. Cluster order at
// each level is ascending id; records keep file order within their cluster.
inline Dataset build_hierarchy(const Dataset& src, const std::vector<std::string>& level_vars) {
  if (!src.declared()) throw ContractError("build_hierarchy requires declared survival outcomes");
  Dataset d = src;
  d.level_names_ = level_vars;
  d.levels_.assign(level_vars.size(), {});
  if (level_vars.empty()) {
    for (auto& r : d.records_) r.cluster_path.clear();
    return d;
  }
  std::vector<const Column*> cols;
  for (const auto& v : level_vars) cols.push_back(&d.column(v));

  const std::size_t L = level_vars.size();
  // Key at level l is the full path down to l so equal ids under different
  // parents would be caught below rather than merged.
  std::vector<std::map<std::string, std::string>> parent_of(L);
  for (std::size_t i = 0; i < d.rows_; ++i) {
    auto& r = d.records_[i];
    r.cluster_path.clear();
    for (std::size_t l = 0; l < L; ++l) r.cluster_path.push_back(cols[l]->text[i]);
    for (std::size_t l = 1; l < L; ++l) {
      const auto& child = r.cluster_path[l];
      const auto& parent = r.cluster_path[l - 1];
      auto [it, inserted] = parent_of[l].emplace(child, parent);
      if (!inserted && it->second != parent)
        throw NestingError(level_vars[l] + " '" + child + "' appears under two parents: " + level_vars[l - 1] + " '" +
                           it->second + "' and '" + parent + "'");
    }
  }

  std::vector<std::map<std::string, std::size_t, decltype(&detail::id_less)>> index;
  for (std::size_t l = 0; l < L; ++l) index.emplace_back(&detail::id_less);
  for (const auto& r : d.records_)
    for (std::size_t l = 0; l < L; ++l) index[l].emplace(r.cluster_path[l], 0);
  for (std::size_t l = 0; l < L; ++l) {
    std::size_t k = 0;
    for (auto& [id, pos] : index[l]) {
      pos = k++;
      Cluster c;
      c.id = id;
      d.levels_[l].push_back(std::move(c));
    }
  }
  for (std::size_t l = 1; l < L; ++l) {
    for (auto& c : d.levels_[l]) {
      c.parent = index[l - 1].at(parent_of[l].at(c.id));
      d.levels_[l - 1][c.parent].children.push_back(index[l].at(c.id));
    }
    for (auto& p : d.levels_[l - 1]) std::sort(p.children.begin(), p.children.end());
  }
  for (std::size_t i = 0; i < d.rows_; ++i)
    d.levels_[L - 1][index[L - 1].at(d.records_[i].cluster_path[L - 1])].children.push_back(i);
  return d;
}

}  // namespace mesurv
