#pragma once

// Experiment harness behind the `riskcal` command: configuration, trial
// execution on a worker pool, sweeps, Monte Carlo reliability checks and the
// records.csv / summary.json / manifest.json outputs.
//
// Seeds. Every random choice of a record is a function of the master seed:
//   trial_seed       = derive_seed(master, trial)
//   split / data     = derive_seed(trial_seed, 1)
//   base model       = derive_seed(trial_seed, 2)
//   calibration      = derive_seed(trial_seed, 3)   (then the calibrate streams)
//   synthetic base   = derive_seed(master, 1001), risk oracle = derive_seed(master, 1002),
//   validation draws = derive_seed(master, 1003)
// so the worker count never changes the output.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "riskcal/calibrate.hpp"
#include "riskcal/data.hpp"
#include "riskcal/models.hpp"

namespace riskcal {

enum class ExperimentKind { Single, SweepN, SweepK, SweepMse, MonteCarlo };
// Simulated: fingerprints from simulate_fingerprints, in the real-data layout.
enum class DataSource { Real, Synthetic, Simulated };
enum class AuxKind { Mlp, Elm, Constant };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Single: return "single";
    case ExperimentKind::SweepN: return "sweep_n";
    case ExperimentKind::SweepK: return "sweep_K";
    case ExperimentKind::SweepMse: return "sweep_mse";
    case ExperimentKind::MonteCarlo: return "monte_carlo";
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  for (auto k : {ExperimentKind::Single, ExperimentKind::SweepN, ExperimentKind::SweepK, ExperimentKind::SweepMse,
                 ExperimentKind::MonteCarlo}) {
    if (s == to_string(k)) return k;
  }
  if (s == "sweep_k") return ExperimentKind::SweepK;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

inline const char* to_string(DataSource s) {
  switch (s) {
    case DataSource::Real: return "real";
    case DataSource::Synthetic: return "synthetic";
    case DataSource::Simulated: return "simulated";
  }
  return "?";
}

inline DataSource parse_data_source(const std::string& s) {
  if (s == "real") return DataSource::Real;
  if (s == "synthetic") return DataSource::Synthetic;
  if (s == "simulated") return DataSource::Simulated;
  throw ConfigError("unknown data source '" + s + "'");
}

inline const char* to_string(AuxKind k) {
  switch (k) {
    case AuxKind::Mlp: return "mlp";
    case AuxKind::Elm: return "elm";
    case AuxKind::Constant: return "constant";
  }
  return "?";
}

inline AuxKind parse_aux_kind(const std::string& s) {
  if (s == "mlp") return AuxKind::Mlp;
  if (s == "elm") return AuxKind::Elm;
  if (s == "constant") return AuxKind::Constant;
  throw ConfigError("unknown auxiliary predictor kind '" + s + "'");
}

struct AuxConfig {
  AuxKind kind = AuxKind::Mlp;
  MlpOptions mlp;
  ElmOptions elm;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Single;
  std::vector<Method> methods = {Method::Rcps, Method::RcpsPpi, Method::RcpsCppi, Method::Ss};
  std::size_t trials = 20;
  std::uint64_t seed = 0;

  DataSource source = DataSource::Synthetic;
  std::string data_path;
  std::optional<int> building;
  std::optional<int> floor;
  std::size_t n = 200;
  // 0 = every remaining row (real / simulated); synthetic runs need a count.
  std::size_t unlabeled = 0;
  std::size_t base_train = 100;
  std::size_t test = 30;
  SyntheticTaskOptions synthetic;
  std::size_t validation_size = 1000;  // synthetic draws for predictor MSE
  FingerprintSimulation simulation;

  CalibrationConfig calibration;
  std::vector<double> sweep_values;
  AuxConfig aux;
  ElmOptions base;
  // Methods whose Monte Carlo gate is reported but not enforced.
  std::vector<Method> expected_failures = {Method::Ss};

  std::size_t workers = 1;
  std::string cache_dir;

  void validate() const {
    if (trials < 1) throw ConfigError("trials must be at least 1");
    if (methods.empty()) throw ConfigError("at least one method is required");
    if (n < 1) throw ConfigError("n must be at least 1");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    const bool sweep = kind == ExperimentKind::SweepN || kind == ExperimentKind::SweepK || kind == ExperimentKind::SweepMse;
    if (sweep && sweep_values.empty()) throw ConfigError(std::string(to_string(kind)) + " needs sweep.values");
    for (double v : sweep_values) {
      if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError("sweep values must be nonnegative integers");
    }
    if (kind == ExperimentKind::SweepK) {
      for (double v : sweep_values) {
        if (v < 1.0) throw ConfigError("sweep_K values must be at least 1");
      }
    }
    if (kind == ExperimentKind::SweepMse && aux.kind != AuxKind::Mlp) {
      throw ConfigError("sweep_mse varies the MLP training size; aux.kind must be mlp");
    }
    if (kind == ExperimentKind::MonteCarlo && source != DataSource::Synthetic) {
      throw ConfigError("monte_carlo needs the synthetic source (a true-risk oracle); got '" +
                        std::string(to_string(source)) + "'");
    }
    if (source == DataSource::Real && data_path.empty()) {
      throw ConfigError("data.source = real needs a CSV path (data.path or --data)");
    }
    if (source == DataSource::Synthetic && unlabeled == 0) {
      bool needs_unlabeled = false;
      for (Method m : methods) needs_unlabeled = needs_unlabeled || m != Method::Rcps;
      if (needs_unlabeled) throw ConfigError("synthetic runs with unlabeled-data methods need data.unlabeled > 0");
    }
    CalibrationConfig c = calibration;
    c.method = Method::Rcps;
    try {
      c.validate();
      if (aux.kind == AuxKind::Mlp) aux.mlp.validate();
    } catch (const InvalidInput& e) {
      throw ConfigError(e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// JSON <-> config

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline std::vector<Method> parse_methods(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be a list of method names");
  std::vector<Method> out;
  for (const auto& m : j) {
    try {
      out.push_back(parse_method(m.get<std::string>()));
    } catch (const std::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::json methods_to_json(const std::vector<Method>& methods) {
  nlohmann::json out = nlohmann::json::array();
  for (Method m : methods) out.push_back(to_string(m));
  return out;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  ExperimentConfig c;
  detail::check_keys(j, {"experiment", "methods", "trials", "seed", "data", "calibration", "sweep", "aux", "base",
                         "expected_failures", "workers", "cache_dir"},
                     "config");
  if (j.contains("experiment")) c.kind = parse_experiment_kind(j.at("experiment").get<std::string>());
  if (j.contains("methods")) c.methods = detail::parse_methods(j.at("methods"), "methods");
  if (j.contains("expected_failures")) c.expected_failures = detail::parse_methods(j.at("expected_failures"), "expected_failures");
  read_opt(j, "trials", c.trials, "config");
  read_opt(j, "seed", c.seed, "config");
  read_opt(j, "workers", c.workers, "config");
  read_opt(j, "cache_dir", c.cache_dir, "config");

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, {"source", "path", "building", "floor", "n", "unlabeled", "base_train", "test", "synthetic",
                           "validation_size", "simulation"},
                       "data");
    if (d.contains("source")) c.source = parse_data_source(d.at("source").get<std::string>());
    read_opt(d, "path", c.data_path, "data");
    if (d.contains("building") && !d.at("building").is_null()) c.building = d.at("building").get<int>();
    if (d.contains("floor") && !d.at("floor").is_null()) c.floor = d.at("floor").get<int>();
    read_opt(d, "n", c.n, "data");
    read_opt(d, "unlabeled", c.unlabeled, "data");
    read_opt(d, "base_train", c.base_train, "data");
    read_opt(d, "test", c.test, "data");
    read_opt(d, "validation_size", c.validation_size, "data");
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      detail::check_keys(s, {"generator_seed", "dim", "noise_std", "linear_scale", "frequency_scale", "amplitude",
                             "oracle_size"},
                         "data.synthetic");
      read_opt(s, "generator_seed", c.synthetic.generator_seed, "data.synthetic");
      read_opt(s, "dim", c.synthetic.dim, "data.synthetic");
      read_opt(s, "noise_std", c.synthetic.noise_std, "data.synthetic");
      read_opt(s, "linear_scale", c.synthetic.linear_scale, "data.synthetic");
      read_opt(s, "frequency_scale", c.synthetic.frequency_scale, "data.synthetic");
      read_opt(s, "amplitude", c.synthetic.amplitude, "data.synthetic");
      read_opt(s, "oracle_size", c.synthetic.oracle_size, "data.synthetic");
    }
    if (d.contains("simulation")) {
      const auto& s = d.at("simulation");
      detail::check_keys(s, {"rows", "access_points", "buildings", "floors", "reference_dbm", "path_loss_exponent",
                             "floor_loss_db", "building_loss_db", "shadowing_db", "detection_floor_dbm", "seed"},
                         "data.simulation");
      auto& f = c.simulation;
      read_opt(s, "rows", f.rows, "data.simulation");
      read_opt(s, "access_points", f.access_points, "data.simulation");
      read_opt(s, "buildings", f.buildings, "data.simulation");
      read_opt(s, "floors", f.floors, "data.simulation");
      read_opt(s, "reference_dbm", f.reference_dbm, "data.simulation");
      read_opt(s, "path_loss_exponent", f.path_loss_exponent, "data.simulation");
      read_opt(s, "floor_loss_db", f.floor_loss_db, "data.simulation");
      read_opt(s, "building_loss_db", f.building_loss_db, "data.simulation");
      read_opt(s, "shadowing_db", f.shadowing_db, "data.simulation");
      read_opt(s, "detection_floor_dbm", f.detection_floor_dbm, "data.simulation");
      read_opt(s, "seed", f.seed, "data.simulation");
    }
  }

  if (j.contains("calibration")) {
    const auto& k = j.at("calibration");
    detail::check_keys(k, {"alpha", "delta", "K", "ucb", "bisection_tolerance", "ppi_split_fraction", "grid_padding",
                           "min_training_size"},
                       "calibration");
    auto& cal = c.calibration;
    read_opt(k, "alpha", cal.alpha, "calibration");
    read_opt(k, "delta", cal.delta, "calibration");
    read_opt(k, "K", cal.folds, "calibration");
    if (k.contains("ucb")) {
      try {
        cal.ucb_method = parse_ucb_method(k.at("ucb").get<std::string>());
      } catch (const InvalidInput& e) {
        throw ConfigError(std::string("calibration.ucb: ") + e.what());
      }
    }
    read_opt(k, "bisection_tolerance", cal.bisection_tolerance, "calibration");
    read_opt(k, "ppi_split_fraction", cal.ppi_split_fraction, "calibration");
    read_opt(k, "grid_padding", cal.grid_padding, "calibration");
    read_opt(k, "min_training_size", cal.min_training_size, "calibration");
  }

  if (j.contains("sweep")) {
    detail::check_keys(j.at("sweep"), {"values"}, "sweep");
    read_opt(j.at("sweep"), "values", c.sweep_values, "sweep");
  }

  if (j.contains("aux")) {
    const auto& a = j.at("aux");
    detail::check_keys(a, {"kind", "hidden", "learning_rate", "momentum", "epochs", "batch_size",
                           "max_training_samples", "elm_hidden", "elm_ridge"},
                       "aux");
    if (a.contains("kind")) c.aux.kind = parse_aux_kind(a.at("kind").get<std::string>());
    read_opt(a, "hidden", c.aux.mlp.hidden, "aux");
    read_opt(a, "learning_rate", c.aux.mlp.learning_rate, "aux");
    read_opt(a, "momentum", c.aux.mlp.momentum, "aux");
    read_opt(a, "epochs", c.aux.mlp.epochs, "aux");
    read_opt(a, "batch_size", c.aux.mlp.batch_size, "aux");
    read_opt(a, "max_training_samples", c.aux.mlp.max_training_samples, "aux");
    read_opt(a, "elm_hidden", c.aux.elm.hidden, "aux");
    read_opt(a, "elm_ridge", c.aux.elm.ridge, "aux");
  }

  if (j.contains("base")) {
    detail::check_keys(j.at("base"), {"hidden", "ridge"}, "base");
    read_opt(j.at("base"), "hidden", c.base.hidden, "base");
    read_opt(j.at("base"), "ridge", c.base.ridge, "base");
  }
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["experiment"] = to_string(c.kind);
  j["methods"] = detail::methods_to_json(c.methods);
  j["expected_failures"] = detail::methods_to_json(c.expected_failures);
  j["trials"] = c.trials;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["cache_dir"] = c.cache_dir;
  const auto& s = c.synthetic;
  const auto& f = c.simulation;
  j["data"] = {
      {"source", to_string(c.source)},
      {"path", c.data_path},
      {"building", c.building ? nlohmann::json(*c.building) : nlohmann::json(nullptr)},
      {"floor", c.floor ? nlohmann::json(*c.floor) : nlohmann::json(nullptr)},
      {"n", c.n},
      {"unlabeled", c.unlabeled},
      {"base_train", c.base_train},
      {"test", c.test},
      {"validation_size", c.validation_size},
      {"synthetic",
       {{"generator_seed", s.generator_seed}, {"dim", s.dim}, {"noise_std", s.noise_std},
        {"linear_scale", s.linear_scale}, {"frequency_scale", s.frequency_scale}, {"amplitude", s.amplitude},
        {"oracle_size", s.oracle_size}}},
      {"simulation",
       {{"rows", f.rows}, {"access_points", f.access_points}, {"buildings", f.buildings}, {"floors", f.floors},
        {"reference_dbm", f.reference_dbm}, {"path_loss_exponent", f.path_loss_exponent},
        {"floor_loss_db", f.floor_loss_db}, {"building_loss_db", f.building_loss_db},
        {"shadowing_db", f.shadowing_db}, {"detection_floor_dbm", f.detection_floor_dbm}, {"seed", f.seed}}},
  };
  const auto& k = c.calibration;
  j["calibration"] = {{"alpha", k.alpha},
                      {"delta", k.delta},
                      {"K", k.folds},
                      {"ucb", to_string(k.ucb_method)},
                      {"bisection_tolerance", k.bisection_tolerance},
                      {"ppi_split_fraction", k.ppi_split_fraction},
                      {"grid_padding", k.grid_padding},
                      {"min_training_size", k.min_training_size}};
  j["sweep"] = {{"values", c.sweep_values}};
  j["aux"] = {{"kind", to_string(c.aux.kind)},
              {"hidden", c.aux.mlp.hidden},
              {"learning_rate", c.aux.mlp.learning_rate},
              {"momentum", c.aux.mlp.momentum},
              {"epochs", c.aux.mlp.epochs},
              {"batch_size", c.aux.mlp.batch_size},
              {"max_training_samples", c.aux.mlp.max_training_samples},
              {"elm_hidden", c.aux.elm.hidden},
              {"elm_ridge", c.aux.elm.ridge}};
  j["base"] = {{"hidden", c.base.hidden}, {"ridge", c.base.ridge}};
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Records

struct TrialRecord {
  std::string experiment;
  std::string axis;  // "none" | "n" | "K" | "mlp_train_size"
  double axis_value = 0.0;
  std::string method;
  std::size_t trial = 0;
  std::uint64_t master_seed = 0;
  std::uint64_t seed = 0;  // trial seed
  std::size_t n = 0;
  std::size_t unlabeled = 0;  // N
  std::size_t folds = 0;      // K (1 for RCPS_PPI, 0 where unused)
  double lambda_hat = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double inefficiency = std::numeric_limits<double>::quiet_NaN();
  double predictor_mse = std::numeric_limits<double>::quiet_NaN();
  double true_risk = std::numeric_limits<double>::quiet_NaN();  // synthetic only
  bool no_valid_threshold = false;
  std::string warnings;
  std::string error;

  bool ok() const noexcept { return error.empty(); }
};

// Field-wise equality in which NaN equals NaN (missing values round-trip).
inline bool same_record(const TrialRecord& a, const TrialRecord& b) {
  auto eq = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
  return a.experiment == b.experiment && a.axis == b.axis && eq(a.axis_value, b.axis_value) && a.method == b.method &&
         a.trial == b.trial && a.master_seed == b.master_seed && a.seed == b.seed && a.n == b.n &&
         a.unlabeled == b.unlabeled && a.folds == b.folds && eq(a.lambda_hat, b.lambda_hat) &&
         eq(a.coverage, b.coverage) && eq(a.inefficiency, b.inefficiency) && eq(a.predictor_mse, b.predictor_mse) &&
         eq(a.true_risk, b.true_risk) && a.no_valid_threshold == b.no_valid_threshold && a.warnings == b.warnings &&
         a.error == b.error;
}

inline constexpr const char* kRecordColumns[] = {
    "experiment", "axis",      "axis_value",   "method",        "trial",     "master_seed",
    "seed",       "n",         "N",            "K",             "lambda_hat", "coverage",
    "inefficiency", "predictor_mse", "true_risk", "no_valid_threshold", "warnings", "error"};

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double_field(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw SchemaError("records.csv: bad number '" + s + "'");
  return v;
}

template <typename T>
T parse_integer_field(const std::string& s) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw SchemaError("records.csv: bad integer '" + s + "'");
  return v;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

// One CSV record (RFC 4180 quoting); may consume several physical lines.
inline bool read_csv_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool quoted = false;
  bool any = false;
  char ch;
  while (in.get(ch)) {
    any = true;
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get(ch);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      fields.push_back(std::move(field));
      return true;
    } else if (ch != '\r') {
      field += ch;
    }
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

}  // namespace detail

inline std::string csv_header() {
  std::string out;
  for (const char* c : kRecordColumns) out += std::string(out.empty() ? "" : ",") + c;
  return out;
}

inline std::string to_csv_row(const TrialRecord& r) {
  using detail::format_double;
  std::ostringstream os;
  os << detail::csv_quote(r.experiment) << ',' << detail::csv_quote(r.axis) << ',' << format_double(r.axis_value) << ','
     << detail::csv_quote(r.method) << ',' << r.trial << ',' << r.master_seed << ',' << r.seed << ',' << r.n << ','
     << r.unlabeled << ',' << r.folds << ',' << format_double(r.lambda_hat) << ',' << format_double(r.coverage) << ','
     << format_double(r.inefficiency) << ',' << format_double(r.predictor_mse) << ',' << format_double(r.true_risk)
     << ',' << (r.no_valid_threshold ? 1 : 0) << ',' << detail::csv_quote(r.warnings) << ','
     << detail::csv_quote(r.error);
  return os.str();
}

inline std::vector<TrialRecord> parse_records_csv(std::istream& in) {
  std::vector<std::string> f;
  if (!detail::read_csv_record(in, f)) throw SchemaError("records.csv: empty file");
  const std::size_t columns = std::size(kRecordColumns);
  if (f.size() != columns) throw SchemaError("records.csv: unexpected header");
  for (std::size_t i = 0; i < columns; ++i) {
    if (f[i] != kRecordColumns[i]) throw SchemaError("records.csv: column " + std::to_string(i) + " is '" + f[i] + "'");
  }
  std::vector<TrialRecord> out;
  std::size_t line = 1;
  while (detail::read_csv_record(in, f)) {
    ++line;
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != columns) throw SchemaError("records.csv: record " + std::to_string(line) + " has wrong field count");
    using detail::parse_double_field;
    TrialRecord r;
    r.experiment = f[0];
    r.axis = f[1];
    r.axis_value = parse_double_field(f[2]);
    r.method = f[3];
    r.trial = detail::parse_integer_field<std::size_t>(f[4]);
    r.master_seed = detail::parse_integer_field<std::uint64_t>(f[5]);
    r.seed = detail::parse_integer_field<std::uint64_t>(f[6]);
    r.n = detail::parse_integer_field<std::size_t>(f[7]);
    r.unlabeled = detail::parse_integer_field<std::size_t>(f[8]);
    r.folds = detail::parse_integer_field<std::size_t>(f[9]);
    r.lambda_hat = parse_double_field(f[10]);
    r.coverage = parse_double_field(f[11]);
    r.inefficiency = parse_double_field(f[12]);
    r.predictor_mse = parse_double_field(f[13]);
    r.true_risk = parse_double_field(f[14]);
    r.no_valid_threshold = f[15] == "1";
    r.warnings = f[16];
    r.error = f[17];
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<TrialRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  return parse_records_csv(in);
}

// ---------------------------------------------------------------------------
// Summary

struct GroupSummary {
  std::string method;
  double axis_value = 0.0;
  std::size_t count = 0;
  std::size_t errors = 0;
  std::size_t no_valid_threshold = 0;
  double coverage_mean = 0.0;
  double coverage_std = 0.0;
  double inefficiency_mean = 0.0;
  double inefficiency_std = 0.0;
  double predictor_mse_mean = std::numeric_limits<double>::quiet_NaN();
  double true_risk_mean = std::numeric_limits<double>::quiet_NaN();
  // Monte Carlo gate (monte_carlo experiments only).
  std::optional<double> reliable_fraction;
  std::optional<double> gate_threshold;
  bool gate_pass = true;
  bool expected_failure = false;
};

struct ExperimentSummary {
  std::string experiment;
  std::string axis;
  std::vector<GroupSummary> groups;
  std::size_t errors = 0;
  bool gates_pass = true;
};

namespace detail {

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = std::numeric_limits<double>::quiet_NaN();
  sd = std::numeric_limits<double>::quiet_NaN();
  if (v.empty()) return;
  double s = 0.0;
  for (double x : v) s += x;
  mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0;
}

}  // namespace detail

// Lower edge of the Monte Carlo gate: 1 - delta minus two binomial standard
// errors at the nominal rate.
inline double reliability_gate(double delta, std::size_t trials) {
  return 1.0 - delta - 2.0 * std::sqrt(delta * (1.0 - delta) / static_cast<double>(trials));
}

inline ExperimentSummary summarize(const std::vector<TrialRecord>& records, const ExperimentConfig& config) {
  ExperimentSummary out;
  out.experiment = to_string(config.kind);
  out.axis = records.empty() ? "none" : records.front().axis;
  // Group order: method order of the config, then ascending axis value.
  std::map<std::pair<std::size_t, double>, std::vector<const TrialRecord*>> groups;
  auto method_rank = [&](const std::string& name) {
    for (std::size_t i = 0; i < config.methods.size(); ++i) {
      if (name == to_string(config.methods[i])) return i;
    }
    return config.methods.size();
  };
  for (const auto& r : records) groups[{method_rank(r.method), r.axis_value}].push_back(&r);

  for (const auto& [key, rs] : groups) {
    GroupSummary g;
    g.method = rs.front()->method;
    g.axis_value = key.second;
    g.count = rs.size();
    std::vector<double> cov, ineff, mse, risk;
    std::size_t reliable = 0;
    for (const TrialRecord* r : rs) {
      if (!r->ok()) {
        ++g.errors;
        continue;
      }
      cov.push_back(r->coverage);
      ineff.push_back(r->inefficiency);
      if (!std::isnan(r->predictor_mse)) mse.push_back(r->predictor_mse);
      if (!std::isnan(r->true_risk)) {
        risk.push_back(r->true_risk);
        if (r->true_risk <= config.calibration.alpha) ++reliable;
      }
      if (r->no_valid_threshold) ++g.no_valid_threshold;
    }
    detail::mean_std(cov, g.coverage_mean, g.coverage_std);
    detail::mean_std(ineff, g.inefficiency_mean, g.inefficiency_std);
    double unused;
    if (!mse.empty()) detail::mean_std(mse, g.predictor_mse_mean, unused);
    if (!risk.empty()) detail::mean_std(risk, g.true_risk_mean, unused);
    if (config.kind == ExperimentKind::MonteCarlo) {
      const std::size_t trials = g.count - g.errors;
      g.reliable_fraction = trials > 0 ? static_cast<double>(reliable) / static_cast<double>(trials) : 0.0;
      g.gate_threshold = reliability_gate(config.calibration.delta, std::max<std::size_t>(trials, 1));
      g.gate_pass = trials > 0 && *g.reliable_fraction >= *g.gate_threshold;
      g.expected_failure = std::any_of(config.expected_failures.begin(), config.expected_failures.end(),
                                       [&](Method m) { return g.method == to_string(m); });
      if (!g.gate_pass && !g.expected_failure) out.gates_pass = false;
    }
    out.errors += g.errors;
    out.groups.push_back(std::move(g));
  }
  return out;
}

// Process exit status for a finished run: 0 only with no failed trials and
// every enforced gate passing.
inline int exit_status(const ExperimentSummary& s) { return s.errors == 0 && s.gates_pass ? 0 : 1; }

inline nlohmann::json summary_to_json(const ExperimentSummary& s) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : s.groups) {
    nlohmann::json j = {{"method", g.method},
                        {"axis_value", g.axis_value},
                        {"count", g.count},
                        {"errors", g.errors},
                        {"no_valid_threshold", g.no_valid_threshold},
                        {"coverage_mean", num(g.coverage_mean)},
                        {"coverage_std", num(g.coverage_std)},
                        {"inefficiency_mean", num(g.inefficiency_mean)},
                        {"inefficiency_std", num(g.inefficiency_std)},
                        {"predictor_mse_mean", num(g.predictor_mse_mean)},
                        {"true_risk_mean", num(g.true_risk_mean)}};
    if (g.reliable_fraction) {
      j["reliable_fraction"] = *g.reliable_fraction;
      j["gate_threshold"] = *g.gate_threshold;
      j["gate_pass"] = g.gate_pass;
      j["expected_failure"] = g.expected_failure;
    }
    groups.push_back(std::move(j));
  }
  return {{"experiment", s.experiment}, {"axis", s.axis}, {"errors", s.errors}, {"gates_pass", s.gates_pass},
          {"groups", groups}};
}

// ---------------------------------------------------------------------------
// Model cache

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_dataset(const LabeledDataset& d, std::uint64_t h) {
  const Matrix& x = d.features();
  const Matrix& y = d.labels();
  const std::uint64_t dims[] = {static_cast<std::uint64_t>(x.rows()), static_cast<std::uint64_t>(x.cols())};
  h = fnv1a(dims, sizeof dims, h);
  h = fnv1a(x.data(), sizeof(double) * static_cast<std::size_t>(x.size()), h);
  return fnv1a(y.data(), sizeof(double) * static_cast<std::size_t>(y.size()), h);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

}  // namespace detail

inline RegressorTrainer make_aux_trainer(const AuxConfig& aux) {
  switch (aux.kind) {
    case AuxKind::Mlp: return mlp_trainer(aux.mlp);
    case AuxKind::Elm: return elm_trainer(aux.elm);
    case AuxKind::Constant: return mean_trainer();
  }
  throw ConfigError("unknown auxiliary predictor kind");
}

inline std::string aux_description(const AuxConfig& aux) {
  nlohmann::json j = {{"kind", to_string(aux.kind)}};
  if (aux.kind == AuxKind::Mlp) {
    j["hidden"] = aux.mlp.hidden;
    j["lr"] = aux.mlp.learning_rate;
    j["momentum"] = aux.mlp.momentum;
    j["epochs"] = aux.mlp.epochs;
    j["batch"] = aux.mlp.batch_size;
    j["cap"] = aux.mlp.max_training_samples;
  } else if (aux.kind == AuxKind::Elm) {
    j["hidden"] = aux.elm.hidden;
    j["ridge"] = aux.elm.ridge;
  }
  return j.dump();
}

// Trained models stored as <dir>/<hash>.json, the hash covering the training
// data, the hyperparameters and the seed. A hit skips training entirely.
inline RegressorTrainer cached_trainer(RegressorTrainer inner, std::string dir, std::string description) {
  std::filesystem::create_directories(dir);
  return [inner = std::move(inner), dir = std::move(dir), description = std::move(description)](
             const LabeledDataset& train, std::uint64_t seed) -> RegressorPtr {
    std::uint64_t h = detail::fnv1a(description.data(), description.size());
    h = detail::hash_dataset(train, h);
    h = detail::fnv1a(&seed, sizeof seed, h);
    const std::string path = (std::filesystem::path(dir) / (detail::hex64(h) + ".json")).string();
    if (std::filesystem::exists(path)) {
      try {
        return load_model(path);
      } catch (const std::exception&) {
        // unreadable entry (e.g. a concurrent writer died): retrain below
      }
    }
    RegressorPtr model = inner(train, seed);
    const std::string tmp = path + ".tmp" + detail::hex64(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    save_model(tmp, *model);
    std::filesystem::rename(tmp, path);
    return model;
  };
}

// ---------------------------------------------------------------------------
// Running trials

namespace trial_stream {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kBase = 2;
inline constexpr std::uint64_t kCalibration = 3;
inline constexpr std::uint64_t kSyntheticBase = 1001;
inline constexpr std::uint64_t kOracle = 1002;
inline constexpr std::uint64_t kValidation = 1003;
}  // namespace trial_stream

// Everything a run shares across trials: the loaded table or the synthetic
// task with its fixed base model and risk oracle.
class ExperimentData {
 public:
  explicit ExperimentData(const ExperimentConfig& config) : config_(config) {
    config_.validate();
    if (config_.source == DataSource::Synthetic) {
      task_.emplace(config_.synthetic);
      const LabeledDataset base_train =
          task_->sample(config_.base_train, derive_seed(config_.seed, trial_stream::kSyntheticBase));
      base_ = std::make_shared<ElmModel>(
          elm_fit(base_train, config_.base, derive_seed(config_.seed, trial_stream::kSyntheticBase + 1)));
      oracle_.emplace(*task_, *base_, config_.synthetic.oracle_size, derive_seed(config_.seed, trial_stream::kOracle));
      validation_.emplace(task_->sample(config_.validation_size, derive_seed(config_.seed, trial_stream::kValidation)));
      return;
    }
    if (config_.source == DataSource::Real) {
      table_ = load_fingerprints(config_.data_path);
      data_hash_ = detail::hash_file(config_.data_path);
    } else {
      table_ = simulate_fingerprints(config_.simulation);
    }
    if (config_.building || config_.floor) table_ = filter_fingerprints(table_, config_.building, config_.floor);
  }

  const ExperimentConfig& config() const noexcept { return config_; }
  bool synthetic() const noexcept { return task_.has_value(); }
  const RawFingerprintTable& table() const noexcept { return table_; }
  std::optional<std::uint64_t> data_hash() const noexcept { return data_hash_; }
  const SyntheticTask& task() const { return *task_; }
  const Regressor& synthetic_base() const { return *base_; }
  const TrueRiskOracle& oracle() const { return *oracle_; }

  struct Trial {
    LabeledDataset labeled;
    std::optional<UnlabeledDataset> unlabeled;
    RegressorPtr base;
    LabeledDataset validation;  // predictor MSE; also the coverage test set for table data
    std::vector<std::string> warnings;
  };

  // Data of one (axis point, trial). `n` overrides the configured size.
  Trial make_trial(std::uint64_t trial_seed, std::size_t n) const {
    const std::uint64_t data_seed = derive_seed(trial_seed, trial_stream::kData);
    if (synthetic()) {
      const std::size_t total = n + config_.unlabeled;
      const LabeledDataset draw = task_->sample(total, data_seed);
      std::vector<std::size_t> l(n), u(config_.unlabeled);
      std::iota(l.begin(), l.end(), std::size_t{0});
      std::iota(u.begin(), u.end(), n);
      std::optional<UnlabeledDataset> unl;
      if (!u.empty()) unl.emplace(UnlabeledDataset::drop_labels(draw.subset(u)));
      return {draw.subset(l), std::move(unl), base_, *validation_, {}};
    }
    SplitSpec spec{config_.base_train, config_.test, n, config_.unlabeled, data_seed};
    std::vector<std::string> warnings;
    ExperimentSplit parts = split(table_, spec, PreprocessOptions{}, &warnings);
    RegressorPtr base =
        std::make_shared<ElmModel>(elm_fit(parts.base_train, config_.base, derive_seed(trial_seed, trial_stream::kBase)));
    return {std::move(parts.labeled), std::move(parts.unlabeled), std::move(base), std::move(parts.test),
            std::move(warnings)};
  }

 private:
  ExperimentConfig config_;
  RawFingerprintTable table_;
  std::optional<std::uint64_t> data_hash_;
  std::optional<SyntheticTask> task_;
  RegressorPtr base_;
  std::optional<TrueRiskOracle> oracle_;
  std::optional<LabeledDataset> validation_;
};

// One axis point of an experiment: the values that differ from the base
// configuration.
struct AxisPoint {
  std::string axis = "none";
  double value = 0.0;
  std::size_t n = 0;
  std::size_t folds = 0;
  std::optional<std::size_t> mlp_cap;
};

inline std::vector<AxisPoint> axis_points(const ExperimentConfig& c) {
  std::vector<AxisPoint> out;
  auto base = [&] { return AxisPoint{"none", 0.0, c.n, c.calibration.folds, std::nullopt}; };
  switch (c.kind) {
    case ExperimentKind::Single:
    case ExperimentKind::MonteCarlo:
      out.push_back(base());
      break;
    case ExperimentKind::SweepN:
      for (double v : c.sweep_values) {
        AxisPoint p = base();
        p.axis = "n";
        p.value = v;
        p.n = static_cast<std::size_t>(v);
        out.push_back(p);
      }
      break;
    case ExperimentKind::SweepK:
      for (double v : c.sweep_values) {
        AxisPoint p = base();
        p.axis = "K";
        p.value = v;
        p.folds = static_cast<std::size_t>(v);
        out.push_back(p);
      }
      break;
    case ExperimentKind::SweepMse:
      for (double v : c.sweep_values) {
        AxisPoint p = base();
        p.axis = "mlp_train_size";
        p.value = v;
        p.mlp_cap = static_cast<std::size_t>(v);
        out.push_back(p);
      }
      break;
  }
  return out;
}

// Method actually run at an axis point: the K sweep runs cross-fitting at
// every K, with K = 1 being the single-split PPI.
inline Method effective_method(Method m, const AxisPoint& p) {
  if (p.axis == "K" && m == Method::RcpsCppi && p.folds == 1) return Method::RcpsPpi;
  return m;
}

namespace detail {

inline std::string sanitize(std::string s) {
  for (char& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

inline std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "; ") + sanitize(p);
  return out;
}

}  // namespace detail

// All methods of one (axis point, trial) on shared data.
inline std::vector<TrialRecord> run_trial(const ExperimentData& data, const AxisPoint& point, std::size_t trial,
                                          const RegressorTrainer* trainer_override = nullptr) {
  const ExperimentConfig& c = data.config();
  const std::uint64_t trial_seed = derive_seed(c.seed, trial);
  std::vector<TrialRecord> out;
  auto blank = [&](Method m) {
    TrialRecord r;
    r.experiment = to_string(c.kind);
    r.axis = point.axis;
    r.axis_value = point.value;
    r.method = to_string(m);
    r.trial = trial;
    r.master_seed = c.seed;
    r.seed = trial_seed;
    r.n = point.n;
    return r;
  };

  std::optional<ExperimentData::Trial> ctx;
  try {
    ctx.emplace(data.make_trial(trial_seed, point.n));
  } catch (const std::exception& e) {
    for (Method m : c.methods) {
      TrialRecord r = blank(m);
      r.error = detail::sanitize(e.what());
      out.push_back(std::move(r));
    }
    return out;
  }

  AuxConfig aux = c.aux;
  if (point.mlp_cap) aux.mlp.max_training_samples = *point.mlp_cap;
  RegressorTrainer trainer = trainer_override ? *trainer_override : make_aux_trainer(aux);
  if (!trainer_override && !c.cache_dir.empty() && aux.kind != AuxKind::Constant) {
    trainer = cached_trainer(trainer, c.cache_dir, aux_description(aux));
  }

  const Matrix test_pred = data.synthetic() ? Matrix() : ctx->base->predict(ctx->validation.features());
  const std::vector<double> test_scores =
      data.synthetic() ? std::vector<double>() : row_scores(ctx->validation.labels(), test_pred);

  for (Method requested : c.methods) {
    const Method m = effective_method(requested, point);
    TrialRecord r = blank(requested);
    r.unlabeled = ctx->unlabeled ? ctx->unlabeled->size() : 0;
    r.folds = m == Method::RcpsCppi ? point.folds : (m == Method::RcpsPpi ? 1 : 0);
    try {
      CalibrationConfig cal = c.calibration;
      cal.method = m;
      cal.folds = m == Method::RcpsCppi ? point.folds : c.calibration.folds;
      cal.seed = derive_seed(trial_seed, trial_stream::kCalibration);
      const CalibrationResult res =
          calibrate(ctx->labeled, ctx->unlabeled ? &*ctx->unlabeled : nullptr, trainer, *ctx->base, cal);
      r.lambda_hat = res.lambda_hat;
      r.inefficiency = prediction_set_radius(res);
      r.no_valid_threshold = res.no_valid_threshold;
      std::vector<std::string> warnings = ctx->warnings;
      warnings.insert(warnings.end(), res.warnings.begin(), res.warnings.end());
      r.warnings = detail::join(warnings);
      if (data.synthetic()) {
        r.true_risk = data.oracle().risk(res.lambda_hat).risk;
        r.coverage = 1.0 - r.true_risk;
      } else {
        const auto covered = std::count_if(test_scores.begin(), test_scores.end(),
                                           [&](double s) { return s <= res.lambda_hat; });
        r.coverage = static_cast<double>(covered) / static_cast<double>(test_scores.size());
      }
      if (!res.auxiliary_models.empty()) {
        double mse = 0.0;
        for (const auto& model : res.auxiliary_models) mse += validation_mse(*model, ctx->validation);
        r.predictor_mse = mse / static_cast<double>(res.auxiliary_models.size());
      }
    } catch (const std::exception& e) {
      r.error = detail::sanitize(e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct RunOptions {
  // Called (serialized) with each finished job's records, in completion order.
  std::function<void(const std::vector<TrialRecord>&)> on_records;
  // Replaces the configured auxiliary trainer (tests, custom predictors).
  std::optional<RegressorTrainer> trainer;
};

// Runs every (axis point, trial) job on `config.workers` threads and returns
// the records in deterministic order: axis point, trial, method.
inline std::vector<TrialRecord> run_experiment(const ExperimentData& data, const RunOptions& options = {}) {
  const ExperimentConfig& c = data.config();
  const auto points = axis_points(c);
  const std::size_t jobs = points.size() * c.trials;
  std::vector<std::vector<TrialRecord>> results(jobs);
  std::atomic<std::size_t> next{0};
  std::mutex emit;
  auto worker = [&] {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const std::size_t p = job / c.trials;
      const std::size_t t = job % c.trials;
      results[job] = run_trial(data, points[p], t, options.trainer ? &*options.trainer : nullptr);
      if (options.on_records) {
        std::lock_guard lock(emit);
        options.on_records(results[job]);
      }
    }
  };
  const std::size_t threads = std::min(c.workers, std::max<std::size_t>(jobs, 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
  }
  std::vector<TrialRecord> out;
  for (auto& r : results) out.insert(out.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  return out;
}

inline TrialRecord run_single(const ExperimentData& data, std::size_t trial = 0) {
  const auto points = axis_points(data.config());
  const auto recs = run_trial(data, points.front(), trial);
  return recs.front();
}

// ---------------------------------------------------------------------------
// Output files

struct RunMetadata {
  std::string command;                  // run | sweep | mc
  std::vector<std::string> argv;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_records_csv(const std::filesystem::path& path, const std::vector<TrialRecord>& records) {
  std::string text = csv_header() + "\n";
  for (const auto& r : records) text += to_csv_row(r) + "\n";
  write_text(path, text);
}

inline nlohmann::json make_manifest(const ExperimentData& data, const RunMetadata& meta, std::size_t records) {
  const ExperimentConfig& c = data.config();
  nlohmann::json data_j = {{"source", to_string(c.source)}};
  if (c.source == DataSource::Real) {
    data_j["path"] = std::filesystem::absolute(c.data_path).string();
    data_j["fnv1a64"] = detail::hex64(*data.data_hash());
  }
  if (!data.synthetic()) data_j["rows_after_filter"] = data.table().rows();
  std::string replay = "riskcal " + meta.command + " --config config.json --out <dir>";
  if (c.source == DataSource::Real) replay += " --data " + data_j["path"].get<std::string>();
  return {{"format", "riskcal-manifest"},
          {"version", 1},
          {"command", meta.command},
          {"argv", meta.argv},
          {"config_file", "config.json"},
          {"master_seed", c.seed},
          {"seed_rule",
           "trial_seed = derive_seed(master_seed, trial); data/split = derive_seed(trial_seed, 1); "
           "base model = derive_seed(trial_seed, 2); calibration = derive_seed(trial_seed, 3); "
           "synthetic base = derive_seed(master_seed, 1001), oracle = derive_seed(master_seed, 1002), "
           "validation = derive_seed(master_seed, 1003); derive_seed is SplitMix64-based (include/riskcal/rng.hpp)"},
          {"data", data_j},
          {"records", records},
          {"replay", replay}};
}

// records.csv, summary.json, config.json (fully resolved) and manifest.json.
inline ExperimentSummary emit_results(const std::filesystem::path& dir, const ExperimentData& data,
                                      const std::vector<TrialRecord>& records, const RunMetadata& meta) {
  if (records.empty()) throw InvalidInput("emit_results: no records");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  const ExperimentSummary summary = summarize(records, data.config());
  write_records_csv(dir / "records.csv", records);
  write_text(dir / "summary.json", summary_to_json(summary).dump(2) + "\n");
  write_text(dir / "config.json", config_to_json(data.config()).dump(2) + "\n");
  write_text(dir / "manifest.json", make_manifest(data, meta, records.size()).dump(2) + "\n");
  return summary;
}

}  // namespace riskcal
