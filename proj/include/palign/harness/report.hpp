#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "palign/common.hpp"
#include "palign/metrics.hpp"
#include "palign/harness/cache.hpp"
#include "palign/harness/config.hpp"
#include "palign/harness/presets.hpp"

namespace palign::harness {

inline constexpr int kReportFormat = 2;

// Metric names stored per cell.
namespace metric {
inline const std::string rm_accuracy = "rm_accuracy";
inline const std::string policy_prior = "policy_accuracy.prior";
inline const std::string policy_posterior = "policy_accuracy.posterior";
inline const std::string win_rate = "win_rate";
inline std::string generation(const std::string& similarity) { return "generation." + similarity; }
}  // namespace metric

/// Metric pairs correlated per scale.
inline const std::vector<std::pair<std::string, std::string>>& correlation_pairs() {
  static const std::vector<std::pair<std::string, std::string>> p = {
      {metric::rm_accuracy, metric::policy_posterior},
      {metric::rm_accuracy, metric::generation("rouge1")},
      {metric::rm_accuracy, metric::generation("rougeL")},
      {metric::rm_accuracy, metric::generation("semantic")},
      {metric::rm_accuracy, metric::win_rate},
      {metric::policy_posterior, metric::generation("rouge1")},
      {metric::win_rate, metric::generation("rouge1")},
  };
  return p;
}

struct CellResult {
  std::string method;
  std::string scale;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  std::map<std::string, double> metrics;
  std::map<std::string, std::map<std::string, double>> per_user;
  std::string artifact_hash;

  std::string label() const { return method + "/" + scale + "/seed" + std::to_string(seed); }

  json to_json() const {
    json j = {{"method", method}, {"scale", scale}, {"seed", seed}, {"status", ok ? "ok" : "failed"},
              {"metrics", metrics}, {"per_user", per_user}, {"artifact_hash", artifact_hash}};
    if (!ok) j["error"] = error;
    return j;
  }
  static CellResult from_json(const json& j) {
    CellResult c;
    c.method = j.at("method").get<std::string>();
    c.scale = j.at("scale").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.ok = j.at("status").get<std::string>() == "ok";
    c.error = j.value("error", std::string());
    c.metrics = j.value("metrics", std::map<std::string, double>{});
    c.per_user = j.value("per_user", std::map<std::string, std::map<std::string, double>>{});
    c.artifact_hash = j.value("artifact_hash", std::string());
    return c;
  }
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single seed
  std::size_t n = 0;
  std::vector<double> values;

  json to_json() const { return json{{"mean", mean}, {"std", std}, {"n", n}, {"values", values}}; }
};

inline Aggregate aggregate(std::vector<double> values) {
  Aggregate a;
  a.values = std::move(values);
  a.n = a.values.size();
  if (a.n == 0) return a;
  double s = 0.0;
  for (double v : a.values) s += v;
  a.mean = s / static_cast<double>(a.n);
  if (a.n > 1) {
    double ss = 0.0;
    for (double v : a.values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  }
  return a;
}

// method -> scale -> metric
using AggregateTable = std::map<std::string, std::map<std::string, std::map<std::string, Aggregate>>>;

/// Successful cells only, values in seed order.
inline AggregateTable compute_aggregates(const std::vector<CellResult>& cells) {
  std::map<std::string, std::map<std::string, std::map<std::string, std::map<std::uint64_t, double>>>> by;
  for (const auto& c : cells) {
    if (!c.ok) continue;
    for (const auto& [m, v] : c.metrics) by[c.method][c.scale][m][c.seed] = v;
  }
  AggregateTable out;
  for (const auto& [method, scales] : by) {
    for (const auto& [scale, metrics] : scales) {
      for (const auto& [m, seeds] : metrics) {
        std::vector<double> vals;
        for (const auto& [_, v] : seeds) vals.push_back(v);
        out[method][scale][m] = aggregate(std::move(vals));
      }
    }
  }
  return out;
}

struct CorrelationRow {
  std::string scale;
  std::string x;
  std::string y;
  CorrelationTriple value;
  std::string note;

  json to_json() const {
    json j = value.to_json();
    j["scale"] = scale;
    j["x"] = x;
    j["y"] = y;
    j["note"] = note;
    return j;
  }
};

/// Per scale and metric pair. "method" axis: one point per method (seed
/// means). "user" axis: one point per (method, user) from per-user values.
inline std::vector<CorrelationRow> compute_correlations(const std::vector<CellResult>& cells,
                                                        const std::vector<std::string>& scales,
                                                        const std::string& axis) {
  const AggregateTable agg = compute_aggregates(cells);
  // (method, user) -> scale -> metric -> seed values
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::map<std::string, std::vector<double>>>> pu;
  if (axis == "user") {
    for (const auto& c : cells) {
      if (!c.ok) continue;
      for (const auto& [m, users] : c.per_user) {
        for (const auto& [u, v] : users) pu[{c.method, u}][c.scale][m].push_back(v);
      }
    }
  }
  std::vector<CorrelationRow> rows;
  for (const auto& scale : scales) {
    for (const auto& [x, y] : correlation_pairs()) {
      std::vector<double> xs, ys;
      if (axis == "user") {
        for (const auto& [key, by_scale] : pu) {
          const auto s = by_scale.find(scale);
          if (s == by_scale.end() || !s->second.count(x) || !s->second.count(y)) continue;
          xs.push_back(aggregate(s->second.at(x)).mean);
          ys.push_back(aggregate(s->second.at(y)).mean);
        }
      } else {
        for (const auto& [method, by_scale] : agg) {
          const auto s = by_scale.find(scale);
          if (s == by_scale.end() || !s->second.count(x) || !s->second.count(y)) continue;
          xs.push_back(s->second.at(x).mean);
          ys.push_back(s->second.at(y).mean);
        }
      }
      CorrelationRow row{scale, x, y, {}, ""};
      row.value.n = xs.size();
      if (xs.size() < 2) {
        row.note = "fewer than two points";
      } else {
        row.value = rank_correlations(xs, ys);
        if (!row.value.defined()) row.note = "zero variance";
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline json correlations_to_json(const std::vector<CorrelationRow>& rows) {
  json a = json::array();
  for (const auto& r : rows) a.push_back(r.to_json());
  return a;
}

inline json aggregates_to_json(const AggregateTable& t) {
  json j = json::object();
  for (const auto& [method, scales] : t) {
    for (const auto& [scale, metrics] : scales) {
      for (const auto& [m, a] : metrics) j[method][scale][m] = a.to_json();
    }
  }
  return j;
}

struct EvaluationReport {
  int format_version = kReportFormat;
  std::string name;
  json config = json::object();
  std::string config_hash;
  json environment = json::object();
  std::vector<std::string> scales;  // ascending
  std::vector<CellResult> cells;
  std::string correlation_axis = "method";
  bool migrated = false;

  std::vector<std::string> methods() const {
    std::set<std::string> s;
    for (const auto& c : cells) s.insert(c.method);
    return {s.begin(), s.end()};
  }
  std::vector<std::string> failed_cells() const {
    std::vector<std::string> out;
    for (const auto& c : cells) {
      if (!c.ok) out.push_back(c.label() + ": " + c.error);
    }
    return out;
  }
  bool incomplete() const { return !failed_cells().empty(); }
  AggregateTable aggregates() const { return compute_aggregates(cells); }
  std::vector<CorrelationRow> correlations() const { return compute_correlations(cells, scales, correlation_axis); }

  const CellResult* find(const std::string& method, const std::string& scale, std::uint64_t seed) const {
    for (const auto& c : cells) {
      if (c.method == method && c.scale == scale && c.seed == seed) return &c;
    }
    return nullptr;
  }

  /// Everything except the checksum.
  json body() const {
    json cj = json::array();
    for (const auto& c : cells) cj.push_back(c.to_json());
    return json{{"format_version", format_version},
                {"name", name},
                {"config", config},
                {"config_hash", config_hash},
                {"environment", environment},
                {"scales", scales},
                {"cells", cj},
                {"aggregates", aggregates_to_json(aggregates())},
                {"correlation_axis", correlation_axis},
                {"correlations", correlations_to_json(correlations())},
                {"failed_cells", failed_cells()},
                {"incomplete", incomplete()},
                {"migrated", migrated}};
  }
  std::string checksum() const { return hash_hex(body().dump()); }
  json to_json() const {
    json j = body();
    j["checksum"] = checksum();
    return j;
  }
};

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void save_report(const EvaluationReport& r, const fs::path& path) {
  write_file(path, r.to_json().dump(2) + "\n");
}

namespace detail {

inline EvaluationReport report_from_v2(const json& j) {
  EvaluationReport r;
  r.format_version = kReportFormat;
  r.name = j.value("name", std::string());
  r.config = j.value("config", json::object());
  r.config_hash = j.value("config_hash", std::string());
  r.environment = j.value("environment", json::object());
  r.scales = j.value("scales", std::vector<std::string>{});
  for (const auto& c : j.at("cells")) r.cells.push_back(CellResult::from_json(c));
  r.correlation_axis = j.value("correlation_axis", std::string("method"));
  r.migrated = j.value("migrated", false);
  return r;
}

// Version 1 stored flat per-run scores without per-user detail, aggregates
// or checksum.
inline EvaluationReport migrate_v1(const json& j) {
  static const std::map<std::string, std::string> renames = {
      {"rm_acc", metric::rm_accuracy},
      {"policy_prior", metric::policy_prior},
      {"policy_posterior", metric::policy_posterior},
      {"rouge1", metric::generation("rouge1")},
      {"rougeL", metric::generation("rougeL")},
      {"semantic", metric::generation("semantic")},
      {"win_rate", metric::win_rate},
  };
  EvaluationReport r;
  r.name = j.value("name", std::string());
  r.config = j.value("config", json::object());
  r.config_hash = hash_hex(r.config.dump());
  r.environment = {{"migrated_from", 1}};
  std::vector<std::string> scales;
  for (const auto& run : j.at("results")) {
    CellResult c;
    c.method = run.at("method").get<std::string>();
    c.scale = run.at("scale").get<std::string>();
    c.seed = run.at("seed").get<std::uint64_t>();
    c.ok = run.value("ok", true);
    c.error = run.value("error", std::string());
    const json scores = run.value("scores", json::object());
    for (const auto& [k, v] : scores.items()) {
      const auto it = renames.find(k);
      if (it == renames.end()) throw MigrationError("version 1 report has unknown score '" + k + "'");
      c.metrics[it->second] = v.get<double>();
    }
    if (std::find(scales.begin(), scales.end(), c.scale) == scales.end()) scales.push_back(c.scale);
    r.cells.push_back(std::move(c));
  }
  sort_scales(scales);
  r.scales = scales;
  r.migrated = true;
  return r;
}

}  // namespace detail

/// Parses, migrates older formats and verifies checksum plus recomputable
/// aggregates and correlations.
inline EvaluationReport report_from_json(const json& j) {
  int version = -1;
  if (j.contains("format_version")) {
    version = j.at("format_version").get<int>();
  } else if (j.contains("version")) {
    version = j.at("version").get<int>();
  }
  if (version == 1) return detail::migrate_v1(j);
  if (version != kReportFormat) {
    throw MigrationError("unsupported report format version " + std::to_string(version) +
                         " (readable: 1, " + std::to_string(kReportFormat) + ")");
  }
  EvaluationReport r = detail::report_from_v2(j);
  if (!j.contains("checksum") || j.at("checksum").get<std::string>() != r.checksum()) {
    throw IntegrityError("report checksum mismatch");
  }
  if (j.value("aggregates", json()) != aggregates_to_json(r.aggregates())) {
    throw IntegrityError("stored aggregates do not match per-seed values");
  }
  if (j.value("correlations", json()) != correlations_to_json(r.correlations())) {
    throw IntegrityError("stored correlations do not match per-seed values");
  }
  return r;
}

inline EvaluationReport load_report(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return report_from_json(j);
}

/// Writer for the version 1 layout; kept for migration fixtures.
inline json report_to_v1(const EvaluationReport& r) {
  static const std::map<std::string, std::string> names = {
      {metric::rm_accuracy, "rm_acc"},
      {metric::policy_prior, "policy_prior"},
      {metric::policy_posterior, "policy_posterior"},
      {metric::generation("rouge1"), "rouge1"},
      {metric::generation("rougeL"), "rougeL"},
      {metric::generation("semantic"), "semantic"},
      {metric::win_rate, "win_rate"},
  };
  json results = json::array();
  for (const auto& c : r.cells) {
    json scores = json::object();
    for (const auto& [m, v] : c.metrics) {
      if (names.count(m)) scores[names.at(m)] = v;
    }
    json run = {{"method", c.method}, {"scale", c.scale}, {"seed", c.seed}, {"ok", c.ok}, {"scores", scores}};
    if (!c.ok) run["error"] = c.error;
    results.push_back(run);
  }
  return json{{"version", 1}, {"name", r.name}, {"config", r.config}, {"results", results}};
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

enum class Layout { rm_table, policy_table, generation_table, winrate_table, correlation_table };

inline const std::vector<std::string>& layout_names() {
  static const std::vector<std::string> n = {"rm_table", "policy_table", "generation_table", "winrate_table",
                                             "correlation_table"};
  return n;
}

inline Layout parse_layout(std::string_view s) {
  const auto& n = layout_names();
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (n[i] == s) return static_cast<Layout>(i);
  }
  throw ConfigError("unknown layout '" + std::string(s) + "'");
}

inline std::string to_string(Layout l) { return layout_names()[static_cast<std::size_t>(l)]; }

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const {
    auto quote = [](const std::string& s) {
      if (s.find_first_of(",\"\n") == std::string::npos) return s;
      std::string q = "\"";
      for (char c : s) {
        if (c == '"') q += '"';
        q += c;
      }
      return q + "\"";
    };
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + quote(cells[i]);
      out += "\n";
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }

  std::string text() const {
    std::vector<std::size_t> w(header.size(), 0);
    auto widen = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) w[i] = std::max(w[i], cells[i].size());
    };
    widen(header);
    for (const auto& r : rows) widen(r);
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      std::string l;
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) l += "  ";
        l += i == 0 ? cells[i] + std::string(w[i] - cells[i].size(), ' ')
                    : std::string(w[i] - cells[i].size(), ' ') + cells[i];
      }
      while (!l.empty() && l.back() == ' ') l.pop_back();
      out += l + "\n";
    };
    line(header);
    std::size_t total = 0;
    for (auto x : w) total += x;
    out += std::string(total + 2 * (w.size() - 1), '-') + "\n";
    for (const auto& r : rows) line(r);
    return out;
  }
};

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string format_aggregate(const Aggregate& a) { return format_value(a.mean) + " +/- " + format_value(a.std); }

/// Methods alphabetical, scales ascending. Every requested cell must have
/// an aggregate; otherwise RenderError lists the absent ones.
inline Table render_report(const EvaluationReport& r, Layout layout) {
  const AggregateTable agg = r.aggregates();
  Table t;
  if (layout == Layout::correlation_table) {
    t.header = {"scale", "x", "y", "pearson", "spearman", "kendall_tau_b", "n"};
    auto opt = [](const std::optional<double>& v) { return v ? format_value(*v) : std::string("NA"); };
    for (const auto& c : r.correlations()) {
      t.rows.push_back({c.scale, c.x, c.y, opt(c.value.pearson), opt(c.value.spearman), opt(c.value.kendall),
                        std::to_string(c.value.n)});
    }
    return t;
  }

  std::vector<std::string> methods;
  for (const auto& m : r.methods()) {
    if (layout == Layout::generation_table || !is_generation_only(m)) methods.push_back(m);
  }
  std::vector<std::pair<std::string, std::string>> rows;  // (label suffix, metric)
  switch (layout) {
    case Layout::rm_table: rows = {{"", metric::rm_accuracy}}; break;
    case Layout::winrate_table: rows = {{"", metric::win_rate}}; break;
    case Layout::policy_table: rows = {{"prior", metric::policy_prior}, {"posterior", metric::policy_posterior}}; break;
    case Layout::generation_table: {
      const auto sims = r.config.value("similarities", std::vector<std::string>{"rouge1", "rougeL", "semantic"});
      for (const auto& s : sims) rows.emplace_back(s, metric::generation(s));
      break;
    }
    case Layout::correlation_table: break;
  }
  const bool with_kind = rows.size() > 1 || !rows.front().first.empty();
  t.header = {"method"};
  if (with_kind) t.header.push_back(layout == Layout::policy_table ? "scorer" : "similarity");
  for (const auto& s : r.scales) t.header.push_back(s);

  std::vector<std::string> missing;
  for (const auto& m : methods) {
    for (const auto& [kind, name] : rows) {
      std::vector<std::string> row = {m};
      if (with_kind) row.push_back(kind);
      for (const auto& s : r.scales) {
        const Aggregate* a = nullptr;
        if (auto mi = agg.find(m); mi != agg.end()) {
          if (auto si = mi->second.find(s); si != mi->second.end()) {
            if (auto ai = si->second.find(name); ai != si->second.end()) a = &ai->second;
          }
        }
        if (!a) {
          missing.push_back(m + "/" + s + "/" + name);
          row.emplace_back();
        } else {
          row.push_back(format_aggregate(*a));
        }
      }
      t.rows.push_back(std::move(row));
    }
  }
  if (!missing.empty()) {
    std::string msg = to_string(layout) + ": " + std::to_string(missing.size()) + " missing cells:";
    for (const auto& x : missing) msg += " " + x;
    throw RenderError(msg);
  }
  return t;
}

}  // namespace palign::harness
