#pragma once

// Command-line front end: configuration, CSV ingestion, the four commands and
// report writing. Everything here is callable in-process; tools/parout_cli.cpp
// is a thin main() around run().

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "parout/categorical.hpp"
#include "parout/errors.hpp"
#include "parout/linear_sem.hpp"
#include "parout/numerics.hpp"
#include "parout/pipeline.hpp"
#include "parout/simgen.hpp"

namespace parout::cli {

using json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kUsage = 1, kParse = 2, kEstimation = 3, kReplication = 4 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return kUsage;
    case ErrorKind::Parse: return kParse;
    default: return kEstimation;
  }
}

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  std::string command;
  std::string input;
  std::string output;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string seed_source = "none";  // flag, config, env or none

  // fit-categorical
  bool population = false;
  std::string start = "warm";
  std::vector<int> levels;  // k_x, k_y1, k_y2, k_y3; empty: inferred

  // fit-linear
  std::string exposure = "x";
  std::vector<std::string> outcomes;
  std::vector<std::string> covariates;
  std::vector<std::string> log_columns;
  bool no_screen = false;
  std::string method = "enumeration";
  double big_m = 30.0;
  std::optional<int> factors;
  int folds = 10;
  std::optional<double> lambda_min;
  std::optional<double> lambda_max;
  int lambda_count = 50;
  int bootstrap = 0;
  double level = 0.95;
  double threshold_mult = 2.0;

  // simulate / replicate
  std::string design;
  long n = 0;
  int p = 30;
  std::string table;
  int runs = 100;
  int threads = 0;
  std::vector<std::string> cells;  // "NxP"
};

inline json config_to_json(const RunConfig& c) {
  json j;
  j["command"] = c.command;
  j["input"] = c.input;
  j["output"] = c.output;
  j["config"] = c.config_path;
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  j["seed_source"] = c.seed_source;
  if (c.command == "fit-categorical") {
    j["population"] = c.population;
    j["start"] = c.start;
    j["levels"] = c.levels;
  } else if (c.command == "fit-linear") {
    j["exposure"] = c.exposure;
    j["outcomes"] = c.outcomes;
    j["covariates"] = c.covariates;
    j["log"] = c.log_columns;
    j["no-screen"] = c.no_screen;
    j["method"] = c.method;
    j["big-m"] = c.big_m;
    j["factors"] = c.factors ? json(*c.factors) : json(nullptr);
    j["folds"] = c.folds;
    j["lambda-min"] = c.lambda_min ? json(*c.lambda_min) : json(nullptr);
    j["lambda-max"] = c.lambda_max ? json(*c.lambda_max) : json(nullptr);
    j["lambda-count"] = c.lambda_count;
    j["bootstrap"] = c.bootstrap;
    j["level"] = c.level;
    j["threshold-mult"] = c.threshold_mult;
  } else if (c.command == "simulate") {
    j["design"] = c.design;
    j["n"] = c.n;
    j["p"] = c.p;
  } else if (c.command == "replicate") {
    j["table"] = c.table;
    j["runs"] = c.runs;
    j["threads"] = c.threads;
    j["n"] = c.n;
    j["cells"] = c.cells;
  }
  return j;
}

namespace detail {

[[noreturn]] inline void usage(const std::string& what) { throw Error(ErrorKind::Usage, what); }
[[noreturn]] inline void parse_error(const std::string& what) { throw Error(ErrorKind::Parse, what); }

// One configurable setting: how to bind it as a flag and how to read it from
// a config file. Flags that were given on the command line win.
struct Setting {
  std::string name;
  std::function<void(RunConfig&, const json&)> from_json;
  CLI::Option* option = nullptr;
  std::function<void(RunConfig&)> from_flag;
};

template <typename T>
T json_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const std::exception&) {
    usage("config key '" + key + "' has the wrong type");
  }
}

class Settings {
 public:
  template <typename T>
  void add(CLI::App* app, const std::string& name, T RunConfig::*field, const std::string& help) {
    auto store = std::make_shared<T>();
    Setting s;
    s.name = name;
    s.option = app->add_option("--" + name, *store, help);
    if constexpr (std::is_same_v<T, std::vector<std::string>> || std::is_same_v<T, std::vector<int>>)
      s.option->delimiter(',');
    s.from_flag = [store, field](RunConfig& c) { c.*field = *store; };
    s.from_json = [field, name](RunConfig& c, const json& v) { c.*field = json_as<T>(v, name); };
    push(app, std::move(s));
  }

  template <typename T>
  void add(CLI::App* app, const std::string& name, std::optional<T> RunConfig::*field, const std::string& help) {
    auto store = std::make_shared<T>();
    Setting s;
    s.name = name;
    s.option = app->add_option("--" + name, *store, help);
    s.from_flag = [store, field](RunConfig& c) { c.*field = *store; };
    s.from_json = [field, name](RunConfig& c, const json& v) {
      if (v.is_null())
        c.*field = std::nullopt;
      else
        c.*field = json_as<T>(v, name);
    };
    push(app, std::move(s));
  }

  void flag(CLI::App* app, const std::string& name, bool RunConfig::*field, const std::string& help) {
    auto store = std::make_shared<bool>(false);
    Setting s;
    s.name = name;
    s.option = app->add_flag("--" + name, *store, help);
    s.from_flag = [store, field](RunConfig& c) { c.*field = *store; };
    s.from_json = [field, name](RunConfig& c, const json& v) { c.*field = json_as<bool>(v, name); };
    push(app, std::move(s));
  }

  // Config file first, then whatever was typed on the command line.
  void apply(CLI::App* app, RunConfig& c, const json& file) const {
    const auto& mine = by_app_.at(app);
    std::set<std::string> known;
    for (const auto& [a, list] : by_app_)
      for (std::size_t i : list) known.insert(all_[i].name);
    known.insert("seed");
    for (const auto& [key, value] : file.items()) {
      if (!known.count(key)) usage("unknown config key '" + key + "'");
      if (key == "seed") continue;
      for (std::size_t i : mine)
        if (all_[i].name == key) all_[i].from_json(c, value);
    }
    for (std::size_t i : mine)
      if (all_[i].option->count() > 0) all_[i].from_flag(c);
  }

 private:
  void push(CLI::App* app, Setting s) {
    by_app_[app].push_back(all_.size());
    all_.push_back(std::move(s));
  }
  std::vector<Setting> all_;
  std::map<CLI::App*, std::vector<std::size_t>> by_app_;
};

inline std::uint64_t parse_seed(const std::string& s, const std::string& where) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end || s.empty()) usage(where + ": seed must be a nonnegative integer, got '" + s + "'");
  return v;
}

inline void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) usage(what);
  };
  if (c.command == "fit-categorical" || c.command == "fit-linear") need(!c.input.empty(), "--input is required");
  if (c.command == "fit-categorical") {
    need(c.start == "warm" || c.start == "random", "--start must be warm or random");
    need(c.levels.empty() || c.levels.size() == 4, "--levels takes four counts: x,y1,y2,y3");
    for (int k : c.levels) need(k >= 1, "--levels entries must be >= 1");
    if (c.start == "random") need(c.seed.has_value(), "a seed is required for --start random (--seed or PAROUT_SEED)");
  }
  if (c.command == "fit-linear") {
    need(c.method == "enumeration" || c.method == "branch_and_bound", "--method must be enumeration or branch_and_bound");
    need(c.big_m > 0, "--big-m must be positive");
    need(c.folds >= 2, "--folds must be at least 2");
    need(c.lambda_count >= 1, "--lambda-count must be at least 1");
    need(c.lambda_min.has_value() == c.lambda_max.has_value(), "--lambda-min and --lambda-max go together");
    if (c.lambda_min) need(*c.lambda_min > 0 && *c.lambda_max >= *c.lambda_min, "need 0 < lambda-min <= lambda-max");
    need(c.bootstrap == 0 || c.bootstrap >= 100, "--bootstrap must be 0 or at least 100");
    need(c.level > 0 && c.level < 1, "--level must lie in (0,1)");
    need(c.threshold_mult > 0, "--threshold-mult must be positive");
    if (c.factors) need(*c.factors >= 1, "--factors must be at least 1");
    need(c.seed.has_value(), "a seed is required for fit-linear (--seed or PAROUT_SEED)");
  }
  if (c.command == "simulate") {
    need(c.design == "categorical" || c.design == "linear", "--design must be categorical or linear");
    need(c.n >= 1, "--n must be at least 1");
    if (c.design == "linear") need(c.p >= 3 && c.n >= c.p + 2, "linear design needs p >= 3 and n >= p + 2");
    need(!c.output.empty(), "--output is required");
    need(c.seed.has_value(), "a seed is required for simulate (--seed or PAROUT_SEED)");
  }
  if (c.command == "replicate") {
    need(c.runs >= 10, "--runs must be at least 10");
    need(c.threads >= 0, "--threads must be nonnegative");
    need(c.seed.has_value(), "a seed is required for replicate (--seed or PAROUT_SEED)");
    simgen::parse_table(c.table);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Number formatting and reports

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// JSON has no NaN; missing values become null.
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

namespace detail {

inline void flatten(const json& j, const std::string& path, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, path.empty() ? k : path + "." + k, out);
  } else if (j.is_array()) {
    if (j.empty()) out.emplace_back(path, "[]");
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], path + "[" + std::to_string(i) + "]", out);
  } else if (j.is_number_float()) {
    out.emplace_back(path, format_double(j.get<double>()));
  } else {
    out.emplace_back(path, j.dump());
  }
}

}  // namespace detail

// Human-readable rendering: one "key = value" line per scalar, grouped by the
// top-level section.
inline std::string render_text(const json& doc) {
  std::ostringstream os;
  for (const auto& [section, body] : doc.items()) {
    os << "[" << section << "]\n";
    std::vector<std::pair<std::string, std::string>> lines;
    detail::flatten(body, "", lines);
    for (const auto& [k, v] : lines) os << (k.empty() ? "value" : k) << " = " << v << "\n";
    os << "\n";
  }
  return os.str();
}

// Inverse of render_text: "section.key" -> value text.
inline std::map<std::string, std::string> parse_text_report(std::string_view text) {
  std::map<std::string, std::string> out;
  std::string section;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    out[section + "." + line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

// Write to a sibling temp file and rename over the target.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) detail::usage("cannot write '" + tmp.string() + "'");
    os << contents;
    os.flush();
    if (!os) detail::usage("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    detail::usage("cannot move report into place at '" + path.string() + "'");
  }
}

// `prefix`.json and `prefix`.txt, or the text on `out` when no prefix is set.
inline void emit_report(const json& doc, const std::string& prefix, std::ostream& out) {
  const std::string text = render_text(doc);
  if (prefix.empty()) {
    out << text;
    return;
  }
  write_atomic(prefix + ".json", doc.dump(2) + "\n");
  write_atomic(prefix + ".txt", text);
}

// ---------------------------------------------------------------------------
// CSV

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based, header is line 1

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "na" || s == "nan" || s == "NaN"; }

inline double parse_number(const std::string& s, std::size_t line, const std::string& col) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end || !std::isfinite(v))
    parse_error("line " + std::to_string(line) + ", column '" + col + "': not a number: '" + s + "'");
  return v;
}

inline int parse_level(const std::string& s, std::size_t line, const std::string& col) {
  int v = 0;
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end || v < 1)
    parse_error("line " + std::to_string(line) + ", column '" + col + "': expected a positive integer level, got '" + s + "'");
  return v;
}

}  // namespace detail

inline Csv parse_csv(std::istream& in) {
  Csv csv;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_fields(line);
    if (!have_header) {
      csv.header = std::move(fields);
      std::set<std::string> seen;
      for (const auto& h : csv.header) {
        if (h.empty()) detail::parse_error("line " + std::to_string(lineno) + ": empty column name in header");
        if (!seen.insert(h).second) detail::parse_error("line " + std::to_string(lineno) + ": duplicate column '" + h + "'");
      }
      have_header = true;
      continue;
    }
    if (fields.size() != csv.header.size())
      detail::parse_error("line " + std::to_string(lineno) + ": expected " + std::to_string(csv.header.size()) +
                          " fields, got " + std::to_string(fields.size()));
    csv.rows.push_back(std::move(fields));
    csv.line_numbers.push_back(lineno);
  }
  if (!have_header) detail::parse_error("input is empty (a header row is required)");
  return csv;
}

inline Csv read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) detail::parse_error("cannot open '" + path + "'");
  return parse_csv(in);
}

struct CategoricalInput {
  std::vector<categorical::CategoricalRecord> records;
  categorical::Levels levels;
  std::size_t dropped_rows = 0;
};

// Columns x,y1,y2,y3 (others ignored) with 1-based levels. Declared level
// counts, when given, must cover every observed level.
inline CategoricalInput read_categorical(const Csv& csv, const std::vector<int>& declared) {
  static const char* names[4] = {"x", "y1", "y2", "y3"};
  int idx[4];
  for (int k = 0; k < 4; ++k) {
    idx[k] = csv.column(names[k]);
    if (idx[k] < 0) detail::parse_error(std::string("header must contain columns x,y1,y2,y3; missing '") + names[k] + "'");
  }
  CategoricalInput in;
  int maxlev[4] = {0, 0, 0, 0};
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto& row = csv.rows[r];
    bool missing = false;
    for (int k = 0; k < 4; ++k) missing = missing || detail::is_missing(row[static_cast<std::size_t>(idx[k])]);
    if (missing) {
      ++in.dropped_rows;
      continue;
    }
    int lv[4];
    for (int k = 0; k < 4; ++k) {
      lv[k] = detail::parse_level(row[static_cast<std::size_t>(idx[k])], csv.line_numbers[r], names[k]);
      if (!declared.empty() && lv[k] > declared[static_cast<std::size_t>(k)])
        detail::parse_error("line " + std::to_string(csv.line_numbers[r]) + ", column '" + names[k] + "': level " +
                            std::to_string(lv[k]) + " exceeds the declared count " +
                            std::to_string(declared[static_cast<std::size_t>(k)]));
      maxlev[k] = std::max(maxlev[k], lv[k]);
    }
    categorical::CategoricalRecord rec;
    rec.x = lv[0] - 1;
    for (int j = 0; j < 3; ++j) rec.y[static_cast<std::size_t>(j)] = lv[j + 1] - 1;
    in.records.push_back(rec);
  }
  if (in.records.empty()) detail::parse_error("no complete data rows");
  const int* k = declared.empty() ? maxlev : declared.data();
  in.levels.k_x = k[0];
  in.levels.k_y = {k[1], k[2], k[3]};
  return in;
}

// Population mode: columns x,y1,y2,y3,prob; absent cells have probability 0.
inline categorical::JointTable read_population(const Csv& csv, const std::vector<int>& declared) {
  static const char* names[5] = {"x", "y1", "y2", "y3", "prob"};
  int idx[5];
  for (int k = 0; k < 5; ++k) {
    idx[k] = csv.column(names[k]);
    if (idx[k] < 0)
      detail::parse_error(std::string("population table must contain columns x,y1,y2,y3,prob; missing '") + names[k] + "'");
  }
  struct Cell {
    int lv[4];
    double p;
  };
  std::vector<Cell> cells;
  int maxlev[4] = {0, 0, 0, 0};
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    Cell c{};
    for (int k = 0; k < 4; ++k) {
      c.lv[k] = detail::parse_level(csv.rows[r][static_cast<std::size_t>(idx[k])], csv.line_numbers[r], names[k]);
      maxlev[k] = std::max(maxlev[k], c.lv[k]);
    }
    c.p = detail::parse_number(csv.rows[r][static_cast<std::size_t>(idx[4])], csv.line_numbers[r], "prob");
    if (c.p < 0) detail::parse_error("line " + std::to_string(csv.line_numbers[r]) + ": negative probability");
    cells.push_back(c);
  }
  categorical::JointTable jt;
  const int* k = declared.empty() ? maxlev : declared.data();
  for (int i = 0; i < 4; ++i)
    if (maxlev[i] > k[i]) detail::parse_error(std::string("column '") + names[i] + "' exceeds the declared level count");
  jt.levels.k_x = k[0];
  jt.levels.k_y = {k[1], k[2], k[3]};
  jt.prob.assign(static_cast<std::size_t>(jt.levels.cells()), 0.0);
  double total = 0.0;
  for (const auto& c : cells) {
    jt.prob[jt.flat(c.lv[0] - 1, c.lv[1] - 1, c.lv[2] - 1, c.lv[3] - 1)] += c.p;
    total += c.p;
  }
  if (std::abs(total - 1.0) > 1e-9) detail::parse_error("probabilities sum to " + format_double(total) + ", not 1");
  return jt;
}

inline pipeline::RawTable read_linear(const Csv& csv, const RunConfig& c) {
  const int ex = csv.column(c.exposure);
  if (ex < 0) detail::parse_error("exposure column '" + c.exposure + "' not found in header");
  std::vector<int> cov_idx, out_idx;
  for (const auto& name : c.covariates) {
    const int i = csv.column(name);
    if (i < 0) detail::parse_error("covariate column '" + name + "' not found in header");
    cov_idx.push_back(i);
  }
  if (c.outcomes.empty()) {
    for (std::size_t i = 0; i < csv.header.size(); ++i) {
      const int ii = static_cast<int>(i);
      if (ii != ex && std::find(cov_idx.begin(), cov_idx.end(), ii) == cov_idx.end()) out_idx.push_back(ii);
    }
  } else {
    for (const auto& name : c.outcomes) {
      const int i = csv.column(name);
      if (i < 0) detail::parse_error("outcome column '" + name + "' not found in header");
      out_idx.push_back(i);
    }
  }
  for (const auto& name : c.log_columns)
    if (csv.column(name) < 0) detail::parse_error("log column '" + name + "' not found in header");

  pipeline::RawTable t;
  t.exposure_name = c.exposure;
  for (int i : out_idx) t.outcome_names.push_back(csv.header[static_cast<std::size_t>(i)]);
  for (int i : cov_idx) t.covariate_names.push_back(csv.header[static_cast<std::size_t>(i)]);
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    bool missing = detail::is_missing(csv.rows[r][static_cast<std::size_t>(ex)]);
    for (int i : out_idx) missing = missing || detail::is_missing(csv.rows[r][static_cast<std::size_t>(i)]);
    for (int i : cov_idx) missing = missing || detail::is_missing(csv.rows[r][static_cast<std::size_t>(i)]);
    if (missing)
      ++t.dropped_rows;
    else
      keep.push_back(r);
  }
  const auto n = static_cast<Index>(keep.size());
  t.exposure.resize(n);
  t.outcomes.resize(n, static_cast<Index>(out_idx.size()));
  t.covariates.resize(n, static_cast<Index>(cov_idx.size()));
  for (Index r = 0; r < n; ++r) {
    const auto& row = csv.rows[keep[static_cast<std::size_t>(r)]];
    const auto line = csv.line_numbers[keep[static_cast<std::size_t>(r)]];
    t.exposure(r) = detail::parse_number(row[static_cast<std::size_t>(ex)], line, c.exposure);
    for (std::size_t k = 0; k < out_idx.size(); ++k)
      t.outcomes(r, static_cast<Index>(k)) =
          detail::parse_number(row[static_cast<std::size_t>(out_idx[k])], line, t.outcome_names[k]);
    for (std::size_t k = 0; k < cov_idx.size(); ++k)
      t.covariates(r, static_cast<Index>(k)) =
          detail::parse_number(row[static_cast<std::size_t>(cov_idx[k])], line, t.covariate_names[k]);
  }
  auto logged = [&](const std::string& name) {
    return std::find(c.log_columns.begin(), c.log_columns.end(), name) != c.log_columns.end();
  };
  t.log_exposure = logged(c.exposure);
  for (const auto& name : t.outcome_names) t.log_outcomes.push_back(logged(name));
  // Covariates have no flag in the table; transform them here.
  for (std::size_t k = 0; k < cov_idx.size(); ++k)
    if (logged(t.covariate_names[k])) {
      auto col = t.covariates.col(static_cast<Index>(k));
      if (!(col.size() == 0 || col.minCoeff() > 0.0))
        throw Error(ErrorKind::NonPositiveLog, "column '" + t.covariate_names[k] + "' has entries <= 0");
      col = col.array().log().matrix();
    }
  return t;
}

// ---------------------------------------------------------------------------
// Report pieces

namespace detail {

inline json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < m.cols(); ++j) r.push_back(num(m(i, j)));
    rows.push_back(r);
  }
  return rows;
}

inline json vector_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

inline json params_json(const categorical::CategoricalParams& p) {
  json j;
  j["latent_classes"] = p.k_u;
  j["pr_u"] = vector_json(p.pr_u);
  j["pr_x_given_u"] = matrix_json(p.pr_x_given_u);  // rows: x level, columns: u
  for (int k = 0; k < 3; ++k) {
    // rows: outcome level; columns ordered (x=1,u=1), (x=1,u=2), ...
    j["pr_y" + std::to_string(k + 1) + "_given_ux"] = matrix_json(p.pr_y_given_ux[static_cast<std::size_t>(k)]);
  }
  return j;
}

inline json po_json(const categorical::PotentialOutcomeDist& d) {
  json j;
  for (int k = 0; k < 3; ++k)
    for (std::size_t x = 0; x < d.dist[static_cast<std::size_t>(k)].size(); ++x) {
      const Vector& v = d.dist[static_cast<std::size_t>(k)][x];
      for (Index l = 0; l < v.size(); ++l)
        j["pr{Y" + std::to_string(k + 1) + "(X=" + std::to_string(x + 1) + ")=" + std::to_string(l + 1) + "}"] = num(v(l));
    }
  return j;
}

inline json failure_json(const std::string& stage, const Error& e) {
  json j;
  j["stage"] = stage;
  j["kind"] = std::string(to_string(e.kind()));
  j["message"] = e.what();
  return j;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code and writes its report.

inline int cmd_fit_categorical(const RunConfig& c, std::ostream& out, std::ostream& err) {
  json doc;
  doc["config"] = config_to_json(c);
  const Csv csv = read_csv(c.input);
  categorical::EmpiricalTables tables;
  json data;
  if (c.population) {
    tables = categorical::tables_from_joint(read_population(csv, c.levels));
    data["mode"] = "population";
  } else {
    const auto in = read_categorical(csv, c.levels);
    tables = categorical::empirical_tables(in.records, in.levels);
    data["mode"] = "sample";
    data["rows"] = in.records.size();
    data["dropped_rows"] = in.dropped_rows;
  }
  const auto& lv = tables.levels;
  data["levels"] = {lv.k_x, lv.k_y[0], lv.k_y[1], lv.k_y[2]};
  doc["data"] = data;

  std::string stage = "crude";
  try {
    doc["crude"] = detail::po_json(categorical::crude_estimate(tables));
    stage = "conditions";
    const auto cond = categorical::check_conditions(tables);
    json cj;
    cj["all_full_rank"] = cond.all_full_rank;
    cj["order_consistent"] = cond.order_consistent;
    json per = json::array();
    for (std::size_t x = 0; x < cond.condition_numbers.size(); ++x) {
      json s;
      s["x"] = x + 1;
      s["condition_number"] = num(cond.condition_numbers[x]);
      s["full_rank"] = static_cast<bool>(cond.full_rank[x]);
      if (x < cond.min_eigen_gaps.size()) s["min_eigen_gap"] = num(cond.min_eigen_gaps[x]);
      per.push_back(s);
    }
    cj["strata"] = per;
    cj["notes"] = cond.notes;
    doc["conditions"] = cj;

    stage = "start";
    categorical::CategoricalParams start;
    json sj;
    sj["kind"] = c.start;
    if (c.start == "warm") {
      const auto id = categorical::plugin_identify(tables);
      start = id.params;
      sj["clip_total"] = id.diagnostics.clip_total;
      sj["order_consistent"] = id.diagnostics.order_consistent;
      doc["plugin"] = detail::params_json(id.params);
    } else {
      Rng rng(*c.seed);
      start = categorical::random_start(lv.k_y[1], lv, rng);
    }
    doc["start"] = sj;

    stage = "gls";
    const auto gls = categorical::gls_refine(tables, start);
    json gj;
    gj["objective"] = gls.objective;
    gj["start_objective"] = gls.warm_objective;
    gj["iterations"] = gls.iterations;
    gj["improved"] = gls.improved;
    gj["optim_failure"] = gls.optim_failure;
    doc["gls"] = gj;
    doc["parameters"] = detail::params_json(gls.params);
    doc["potential_outcomes"] = detail::po_json(categorical::g_formula(gls.params));
  } catch (const Error& e) {
    doc["failure"] = detail::failure_json(stage, e);
    emit_report(doc, c.output, out);
    err << "parout: " << stage << ": " << e.what() << "\n";
    return exit_code_for(e.kind()) == kParse ? kParse : kEstimation;
  }
  emit_report(doc, c.output, out);
  return kOk;
}

inline int cmd_fit_linear(const RunConfig& c, std::ostream& out, std::ostream& err) {
  json doc;
  doc["config"] = config_to_json(c);
  const Csv csv = read_csv(c.input);
  const pipeline::RawTable raw = read_linear(csv, c);
  json data;
  data["rows"] = raw.exposure.size();
  data["dropped_rows"] = raw.dropped_rows;
  data["outcomes"] = raw.outcome_names;
  data["covariates"] = raw.covariate_names;
  doc["data"] = data;

  std::string stage = "input";
  auto fail = [&](const Error& e) {
    doc["failure"] = detail::failure_json(stage, e);
    emit_report(doc, c.output, out);
    err << "parout: " << stage << ": " << e.what() << "\n";
    return exit_code_for(e.kind()) == kParse ? kParse : kEstimation;
  };
  try {
    const auto p_all = static_cast<int>(raw.outcomes.cols());
    if (p_all < 3)
      throw Error(ErrorKind::TooFewOutcomes,
                  "at least 3 outcomes are required: the factor model is not identified from fewer (got " +
                      std::to_string(p_all) + ")");
    stage = "residualize";
    const auto res = pipeline::residualize(raw);
    if (res.exposure_degenerate) throw Error(ErrorKind::BadParams, "exposure is fully explained by the covariates");
    json rj;
    json degenerate = json::array();
    for (int j : res.degenerate_outcomes) degenerate.push_back(raw.outcome_names[static_cast<std::size_t>(j)]);
    rj["degenerate_outcomes"] = degenerate;
    doc["residualize"] = rj;

    stage = "screen";
    std::vector<int> kept(static_cast<std::size_t>(p_all));
    std::iota(kept.begin(), kept.end(), 0);
    const auto scr = pipeline::screen_outcomes(res.data);
    json sj = json::array();
    for (int j = 0; j < p_all; ++j) {
      json o;
      o["outcome"] = raw.outcome_names[static_cast<std::size_t>(j)];
      o["coefficient"] = num(scr.coefficient(j));
      o["std_error"] = num(scr.std_error(j));
      o["threshold"] = num(scr.threshold(j));
      o["retained"] = std::find(scr.retained.begin(), scr.retained.end(), j) != scr.retained.end();
      sj.push_back(o);
    }
    doc["screen"] = {{"applied", !c.no_screen}, {"outcomes", sj}};
    if (!c.no_screen) kept = scr.retained;
    if (kept.size() < 3)
      throw Error(ErrorKind::TooFewOutcomes,
                  "screening kept " + std::to_string(kept.size()) +
                      " outcomes; at least 3 are required for the factor model (rerun with --no-screen to keep all)");
    const auto data_kept = pipeline::select_outcomes(res.data, kept);
    std::vector<std::string> names;
    for (int j : kept) names.push_back(raw.outcome_names[static_cast<std::size_t>(j)]);
    const int p = static_cast<int>(kept.size());

    stage = "factors";
    const auto fit = linear_sem::fit_factors(data_kept, c.factors);
    const int r_hat = fit.num_factors - 1;
    json fj;
    fj["num_factors"] = fit.num_factors;
    fj["r_hat"] = r_hat;
    fj["sigma2_hat"] = fit.sigma2_hat;
    fj["delta"] = fit.delta;
    fj["spectrum"] = detail::vector_json(fit.spectrum);
    fj["correlation_spectrum"] = detail::vector_json(fit.correlation_spectrum);
    fj["loadings"] = detail::matrix_json(fit.loadings);
    // Necessary, not sufficient, for two disjoint full-rank blocks of loadings.
    fj["outcome_count_check"] = {{"required", 2 * fit.num_factors + 1}, {"available", p},
                                 {"passed", p >= 2 * fit.num_factors + 1}};
    doc["factors"] = fj;

    stage = "diagonality";
    const auto diag = pipeline::check_error_diagonality(data_kept, fit, c.threshold_mult);
    json dj;
    dj["nonzero_offdiagonals"] = diag.nonzero_offdiagonals();
    json surv = json::array();
    for (const auto& o : diag.survivors)
      surv.push_back({{"i", names[static_cast<std::size_t>(o.i)]}, {"j", names[static_cast<std::size_t>(o.j)]},
                      {"value", num(o.value)}, {"threshold", num(o.threshold)}});
    dj["survivors"] = surv;
    json subset = json::array();
    for (int j : diag.suggested_subset) subset.push_back(names[static_cast<std::size_t>(j)]);
    dj["suggested_subset"] = subset;
    doc["diagonality"] = dj;

    stage = "selection";
    linear_sem::SelectionOptions so;
    so.method = c.method == "enumeration" ? linear_sem::SelectionMethod::Enumeration
                                          : linear_sem::SelectionMethod::BranchAndBound;
    so.big_m = c.big_m;
    const auto sel = linear_sem::select_negative_controls(fit, so);
    json selj;
    selj["method"] = linear_sem::to_string(sel.method);
    selj["objective"] = sel.objective;
    selj["candidates"] = sel.candidates;
    selj["w_star"] = detail::vector_json(sel.w_star);
    json controls = json::array();
    for (int j : sel.s0_hat) controls.push_back(names[static_cast<std::size_t>(j)]);
    selj["negative_controls"] = controls;
    doc["selection"] = selj;

    stage = "effects";
    linear_sem::EffectOptions eo;
    eo.folds = c.folds;
    eo.seed = *c.seed;
    if (c.lambda_min) {
      const int k = c.lambda_count;
      for (int i = 0; i < k; ++i) {
        const double t = k == 1 ? 0.0 : static_cast<double>(i) / (k - 1);
        eo.lambda_grid.push_back(*c.lambda_min * std::pow(*c.lambda_max / *c.lambda_min, t));
      }
    }
    auto est = linear_sem::estimate_effects(data_kept, sel, r_hat, eo);
    if (c.bootstrap > 0) {
      stage = "bootstrap";
      linear_sem::bootstrap_ci(data_kept, sel, r_hat, est, c.level, c.bootstrap, sub_seed(*c.seed, 1));
    }
    json ej = json::array();
    for (int j = 0; j < p; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      json o;
      o["outcome"] = names[jj];
      o["negative_control"] = std::binary_search(sel.s0_hat.begin(), sel.s0_hat.end(), j);
      o["beta_hat"] = num(est.beta_hat(j));
      o["lambda"] = num(est.lambda[jj]);
      o["first_stage_condition"] = num(est.first_stage_condition[jj]);
      o["collinearity_condition"] = num(est.collinearity_condition[jj]);
      if (!est.intervals.empty()) {
        o["ci_low"] = num(est.intervals[jj].first);
        o["ci_high"] = num(est.intervals[jj].second);
      }
      ej.push_back(o);
    }
    json effects;
    effects["outcomes"] = ej;
    effects["warnings"] = est.warnings;
    if (c.bootstrap > 0) {
      effects["interval_level"] = c.level;
      effects["bootstrap_resamples"] = c.bootstrap;
      effects["bootstrap_failures"] = est.bootstrap_failures;
    }
    doc["effects"] = effects;
  } catch (const Error& e) {
    return fail(e);
  }
  emit_report(doc, c.output, out);
  return kOk;
}

inline int cmd_simulate(const RunConfig& c, std::ostream& out, std::ostream&) {
  std::ostringstream os;
  json meta;
  meta["config"] = config_to_json(c);
  if (c.design == "categorical") {
    const auto recs = simgen::gen_categorical(static_cast<std::size_t>(c.n), *c.seed);
    os << "x,y1,y2,y3\n";
    for (const auto& r : recs) os << r.x + 1 << ',' << r.y[0] + 1 << ',' << r.y[1] + 1 << ',' << r.y[2] + 1 << '\n';
    const auto d = simgen::categorical_design();
    meta["design"] = {{"name", "categorical"}, {"parameters", detail::params_json(d)}};
  } else {
    const auto d = simgen::linear_design(c.p);
    const auto data = simgen::gen_linear(d, c.n, *c.seed);
    os << "x";
    for (int j = 0; j < c.p; ++j) os << ",y" << j + 1;
    os << '\n';
    for (Index i = 0; i < data.n(); ++i) {
      os << format_double(data.x(i));
      for (int j = 0; j < c.p; ++j) os << ',' << format_double(data.y(i, j));
      os << '\n';
    }
    json dj;
    dj["name"] = "linear";
    dj["p"] = d.p;
    dj["r"] = d.r;
    dj["sigma_x"] = d.sigma_x;
    dj["alpha_x"] = detail::vector_json(d.alpha_x);
    dj["alpha"] = detail::matrix_json(d.alpha);
    dj["sigma"] = detail::vector_json(d.sigma);
    dj["beta"] = detail::vector_json(d.beta);
    json zs = json::array();
    for (int j : d.zero_set()) zs.push_back("y" + std::to_string(j + 1));
    dj["zero_set"] = zs;
    meta["design"] = dj;
  }
  write_atomic(c.output, os.str());
  write_atomic(c.output + ".meta.json", meta.dump(2) + "\n");
  out << "wrote " << c.output << " and " << c.output << ".meta.json\n";
  return kOk;
}

inline int cmd_replicate(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto table = simgen::parse_table(c.table);
  simgen::ReplicateOptions ro;
  ro.threads = c.threads;
  if (c.n > 0) ro.categorical_n = static_cast<int>(c.n);
  for (const auto& cell : c.cells) {
    const auto x = cell.find('x');
    int n = 0, p = 0;
    const bool ok = x != std::string::npos &&
                    std::from_chars(cell.data(), cell.data() + x, n).ptr == cell.data() + x &&
                    std::from_chars(cell.data() + x + 1, cell.data() + cell.size(), p).ptr == cell.data() + cell.size();
    if (!ok || n < p + 2 || p < 3) detail::usage("--cells entries look like 2000x30 with n >= p + 2, got '" + cell + "'");
    ro.cells.emplace_back(n, p);
  }
  const auto rep = simgen::replicate(table, c.runs, *c.seed, ro);
  json doc;
  doc["config"] = config_to_json(c);
  json summary;
  summary["table"] = simgen::to_string(rep.table);
  summary["runs"] = rep.runs;
  summary["seed"] = rep.seed;
  summary["attempts"] = rep.attempts;
  summary["failures"] = rep.failures;
  summary["failure_rate"] = rep.failure_rate();
  summary["fallbacks"] = rep.fallbacks;
  summary["wall_seconds"] = rep.wall_seconds;
  doc["summary"] = summary;
  json cells = json::array();
  for (const auto& cell : rep.cells)
    cells.push_back({{"row", cell.row}, {"column", cell.column}, {"value", num(cell.value)},
                     {"spread", num(cell.spread)}, {"count", cell.count}, {"reference", num(cell.reference)},
                     {"reference_spread", num(cell.reference_spread)}});
  doc["cells"] = cells;
  emit_report(doc, c.output, out);
  if (rep.failure_rate() > 0.05) {
    err << "parout: replication failure rate " << format_double(rep.failure_rate()) << " exceeds 0.05\n";
    return kReplication;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Causal effect estimation with multiple outcomes under latent confounding", "parout"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "parout 0.1.0");
  detail::Settings settings;
  RunConfig cfg;
  std::string seed_flag, config_flag;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed_flag, "random seed (falls back to the config file, then PAROUT_SEED)");
    sub->add_option("--config", config_flag, "JSON file of settings; flags take precedence");
    settings.add(sub, "output", &RunConfig::output, "report prefix (writes PREFIX.json and PREFIX.txt)");
  };

  auto* fc = app.add_subcommand("fit-categorical", "identify potential-outcome distributions from categorical data");
  common(fc);
  settings.add(fc, "input", &RunConfig::input, "CSV with columns x,y1,y2,y3 (1-based levels)");
  settings.flag(fc, "population", &RunConfig::population, "input is a probability table with a prob column");
  settings.add(fc, "start", &RunConfig::start, "warm (spectral estimate) or random");
  settings.add(fc, "levels", &RunConfig::levels, "level counts k_x,k_y1,k_y2,k_y3");

  auto* fl = app.add_subcommand("fit-linear", "estimate exposure effects in the linear factor model");
  common(fl);
  settings.add(fl, "input", &RunConfig::input, "CSV with a header row");
  settings.add(fl, "exposure", &RunConfig::exposure, "exposure column");
  settings.add(fl, "outcomes", &RunConfig::outcomes, "outcome columns (default: all remaining)");
  settings.add(fl, "covariates", &RunConfig::covariates, "observed confounders to adjust for");
  settings.add(fl, "log", &RunConfig::log_columns, "columns to log-transform");
  settings.flag(fl, "no-screen", &RunConfig::no_screen, "keep outcomes unrelated to the exposure");
  settings.add(fl, "method", &RunConfig::method, "enumeration or branch_and_bound");
  settings.add(fl, "big-m", &RunConfig::big_m, "bound on |loadings * w| for branch_and_bound");
  settings.add(fl, "factors", &RunConfig::factors, "number of factors (default: Kaiser rule)");
  settings.add(fl, "folds", &RunConfig::folds, "cross-validation folds");
  settings.add(fl, "lambda-min", &RunConfig::lambda_min, "smallest ridge penalty");
  settings.add(fl, "lambda-max", &RunConfig::lambda_max, "largest ridge penalty");
  settings.add(fl, "lambda-count", &RunConfig::lambda_count, "grid size between lambda-min and lambda-max");
  settings.add(fl, "bootstrap", &RunConfig::bootstrap, "bootstrap resamples for intervals (0: none)");
  settings.add(fl, "level", &RunConfig::level, "interval level");
  settings.add(fl, "threshold-mult", &RunConfig::threshold_mult, "multiplier for the error-covariance check");

  auto* sim = app.add_subcommand("simulate", "write a synthetic data set");
  common(sim);
  settings.add(sim, "design", &RunConfig::design, "categorical or linear");
  settings.add(sim, "n", &RunConfig::n, "rows");
  settings.add(sim, "p", &RunConfig::p, "outcomes (linear design)");

  auto* rep = app.add_subcommand("replicate", "run a simulation table");
  common(rep);
  settings.add(rep, "table", &RunConfig::table, "table1, table2 or tableS1");
  settings.add(rep, "runs", &RunConfig::runs, "Monte Carlo runs per cell");
  settings.add(rep, "threads", &RunConfig::threads, "worker threads (0: all cores)");
  settings.add(rep, "n", &RunConfig::n, "sample size for tableS1");
  settings.add(rep, "cells", &RunConfig::cells, "NxP cells for table1/table2, comma separated");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << "parout 0.1.0\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "parout: " << e.what() << "\n";
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  cfg.command = sub->get_name();
  try {
    json file = json::object();
    if (!config_flag.empty()) {
      cfg.config_path = config_flag;
      std::ifstream in(config_flag);
      if (!in) detail::usage("cannot open config file '" + config_flag + "'");
      try {
        file = json::parse(in);
      } catch (const json::exception& e) {
        detail::usage("config file '" + config_flag + "' is not valid JSON: " + e.what());
      }
      if (!file.is_object()) detail::usage("config file must hold a JSON object");
    }
    settings.apply(sub, cfg, file);
    if (!seed_flag.empty()) {
      cfg.seed = detail::parse_seed(seed_flag, "--seed");
      cfg.seed_source = "flag";
    } else if (file.contains("seed")) {
      const auto& s = file["seed"];
      cfg.seed = s.is_number_unsigned() ? s.get<std::uint64_t>() : detail::parse_seed(s.is_string() ? s.get<std::string>() : s.dump(), "config seed");
      cfg.seed_source = "config";
    } else if (const char* env = std::getenv("PAROUT_SEED"); env && *env) {
      cfg.seed = detail::parse_seed(env, "PAROUT_SEED");
      cfg.seed_source = "env";
    }
    detail::validate(cfg);
    if (cfg.command == "fit-categorical") return cmd_fit_categorical(cfg, out, err);
    if (cfg.command == "fit-linear") return cmd_fit_linear(cfg, out, err);
    if (cfg.command == "simulate") return cmd_simulate(cfg, out, err);
    return cmd_replicate(cfg, out, err);
  } catch (const Error& e) {
    err << "parout: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "parout: " << e.what() << "\n";
    return kEstimation;
  }
}

}  // namespace parout::cli
