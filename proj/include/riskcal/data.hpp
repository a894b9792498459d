#pragma once

// Data sources: WiFi fingerprint tables in the UJIIndoorLoc CSV layout,
// preprocessing into labeled datasets, seeded experiment splits, and a
// synthetic regression task whose true risk can be evaluated by brute force.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "riskcal/core.hpp"
#include "riskcal/error.hpp"
#include "riskcal/models.hpp"
#include "riskcal/rng.hpp"

namespace riskcal {

// Reading value that marks an access point as not detected.
inline constexpr double kRssiNotDetected = 100.0;
inline constexpr double kRssiMin = -104.0;
inline constexpr double kRssiMax = 0.0;

struct RawFingerprintTable {
  Matrix rssi;         // rows x m, dBm or kRssiNotDetected
  Matrix coordinates;  // rows x 2: LONGITUDE, LATITUDE (meters)
  std::vector<int> floor;
  std::vector<int> building;

  std::size_t rows() const noexcept { return static_cast<std::size_t>(rssi.rows()); }
  std::size_t access_points() const noexcept { return static_cast<std::size_t>(rssi.cols()); }

  RawFingerprintTable subset(std::span<const std::size_t> rows_to_keep) const {
    RawFingerprintTable out{detail::gather_rows(rssi, rows_to_keep), detail::gather_rows(coordinates, rows_to_keep), {}, {}};
    for (std::size_t r : rows_to_keep) {
      out.floor.push_back(floor[r]);
      out.building.push_back(building[r]);
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& f : fields) {
    while (!f.empty() && (f.back() == '\r' || f.back() == ' ' || f.back() == '"')) f.remove_suffix(1);
    while (!f.empty() && (f.front() == ' ' || f.front() == '"')) f.remove_prefix(1);
  }
  return fields;
}

inline std::optional<double> parse_double(std::string_view s) {
  double value = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, value);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return value;
}

inline std::string wap_name(std::size_t index) {
  std::ostringstream os;
  os << "WAP";
  os.width(3);
  os.fill('0');
  os << index + 1;
  return os.str();
}

}  // namespace detail

// Reads a fingerprint CSV with a header row. Required columns: WAP001..WAPm
// (contiguous, m >= 1), LONGITUDE, LATITUDE, FLOOR, BUILDINGID; any other
// columns are ignored. RSSI values must lie in [-104, 0] or equal 100.
inline RawFingerprintTable load_fingerprints(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fingerprint file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path + ": empty file");
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t, std::less<>> column;
  for (std::size_t c = 0; c < header.size(); ++c) column.emplace(std::string(header[c]), c);

  std::vector<std::size_t> wap_columns;
  while (true) {
    const auto it = column.find(detail::wap_name(wap_columns.size()));
    if (it == column.end()) break;
    wap_columns.push_back(it->second);
  }
  if (wap_columns.empty()) throw SchemaError(path + ": missing column WAP001");
  std::size_t stray = 0;
  for (const auto& [name, _] : column) {
    if (name.rfind("WAP", 0) == 0) ++stray;
  }
  if (stray != wap_columns.size()) {
    throw SchemaError(path + ": WAP columns are not contiguous from WAP001 (found " + std::to_string(stray) +
                      ", contiguous " + std::to_string(wap_columns.size()) + ")");
  }
  std::array<std::size_t, 4> meta{};
  const std::array<const char*, 4> meta_names{"LONGITUDE", "LATITUDE", "FLOOR", "BUILDINGID"};
  for (std::size_t k = 0; k < meta.size(); ++k) {
    const auto it = column.find(meta_names[k]);
    if (it == column.end()) throw SchemaError(path + ": missing column " + meta_names[k]);
    meta[k] = it->second;
  }

  std::vector<double> rssi;
  std::vector<double> coords;
  RawFingerprintTable table;
  std::size_t line_number = 1;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw SchemaError(path + ":" + std::to_string(line_number) + ": expected " + std::to_string(header.size()) +
                        " fields, found " + std::to_string(fields.size()));
    }
    for (std::size_t w = 0; w < wap_columns.size(); ++w) {
      const auto v = detail::parse_double(fields[wap_columns[w]]);
      if (!v || !((*v >= kRssiMin && *v <= kRssiMax) || *v == kRssiNotDetected)) {
        throw SchemaError(path + ":" + std::to_string(line_number) + ": " + detail::wap_name(w) + " value '" +
                          std::string(fields[wap_columns[w]]) + "' outside [-104, 0] and not 100");
      }
      rssi.push_back(*v);
    }
    for (std::size_t k = 0; k < 2; ++k) {
      const auto v = detail::parse_double(fields[meta[k]]);
      if (!v || !std::isfinite(*v)) {
        throw SchemaError(path + ":" + std::to_string(line_number) + ": " + meta_names[k] + " is not a finite number");
      }
      coords.push_back(*v);
    }
    for (std::size_t k = 2; k < 4; ++k) {
      const auto v = detail::parse_double(fields[meta[k]]);
      if (!v || *v != std::floor(*v)) {
        throw SchemaError(path + ":" + std::to_string(line_number) + ": " + meta_names[k] + " is not an integer");
      }
      (k == 2 ? table.floor : table.building).push_back(static_cast<int>(*v));
    }
  }
  const auto rows = static_cast<Eigen::Index>(table.floor.size());
  if (rows == 0) throw SchemaError(path + ": no data rows");
  const auto m = static_cast<Eigen::Index>(wap_columns.size());
  table.rssi = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(rssi.data(), rows, m);
  table.coordinates =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(coords.data(), rows, 2);
  return table;
}

// Writes the UJIIndoorLoc column layout (trailing bookkeeping columns are
// filled with zeros).
inline void write_fingerprints(const std::string& path, const RawFingerprintTable& table) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (std::size_t w = 0; w < table.access_points(); ++w) out << detail::wap_name(w) << ',';
  out << "LONGITUDE,LATITUDE,FLOOR,BUILDINGID,SPACEID,RELATIVEPOSITION,USERID,PHONEID,TIMESTAMP\n";
  out.precision(17);
  for (std::size_t r = 0; r < table.rows(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    for (Eigen::Index w = 0; w < table.rssi.cols(); ++w) out << table.rssi(row, w) << ',';
    out << table.coordinates(row, 0) << ',' << table.coordinates(row, 1) << ',' << table.floor[r] << ','
        << table.building[r] << ",0,0,0,0,0\n";
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

// Keeps rows of one building and/or floor.
inline RawFingerprintTable filter_fingerprints(const RawFingerprintTable& table, std::optional<int> building,
                                               std::optional<int> floor) {
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < table.rows(); ++r) {
    if (building && table.building[r] != *building) continue;
    if (floor && table.floor[r] != *floor) continue;
    keep.push_back(r);
  }
  if (keep.empty()) throw ConfigError("building/floor filter leaves no rows");
  return table.subset(keep);
}

struct PreprocessOptions {
  // Replace "not detected" (100) with this reading before scaling.
  bool map_sentinel = true;
  double sentinel_replacement = -105.0;
  // Per-column min-max scaling to [0, 1], fit on `fit_rows` (all rows when
  // empty). Values outside the fitted range are clipped.
  bool scale = true;
  std::vector<std::size_t> fit_rows;
  // Subtract the coordinate minimum of the whole table from the labels.
  bool recenter = true;

  static PreprocessOptions identity() { return {false, -105.0, false, {}, false}; }
};

inline LabeledDataset preprocess(const RawFingerprintTable& table, const PreprocessOptions& options,
                                 std::vector<std::string>* warnings = nullptr) {
  detail::require(table.rows() >= 1, "preprocess: empty table");
  Matrix features = table.rssi;
  if (options.map_sentinel) {
    features = (features.array() == kRssiNotDetected).select(options.sentinel_replacement, features);
  }
  if (options.scale) {
    std::vector<std::size_t> fit = options.fit_rows;
    if (fit.empty()) {
      fit.resize(table.rows());
      std::iota(fit.begin(), fit.end(), std::size_t{0});
    }
    const Matrix reference = detail::gather_rows(features, fit);
    std::size_t constant = 0;
    for (Eigen::Index c = 0; c < features.cols(); ++c) {
      const double lo = reference.col(c).minCoeff();
      const double hi = reference.col(c).maxCoeff();
      if (hi > lo) {
        features.col(c) = ((features.col(c).array() - lo) / (hi - lo)).cwiseMax(0.0).cwiseMin(1.0).matrix();
      } else {
        features.col(c).setZero();
        ++constant;
      }
    }
    if (constant > 0 && warnings != nullptr) {
      warnings->push_back(std::to_string(constant) + " feature column(s) constant on the scaler fit rows; set to 0");
    }
  }
  Matrix labels = table.coordinates;
  if (options.recenter) labels = labels.rowwise() - labels.colwise().minCoeff();
  return LabeledDataset(std::move(features), std::move(labels));
}

// Sizes of the four disjoint parts of an experiment. unlabeled == 0 means
// "everything that remains".
struct SplitSpec {
  std::size_t base_train = 100;
  std::size_t test = 30;
  std::size_t labeled = 200;
  std::size_t unlabeled = 0;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> base_train;
  std::vector<std::size_t> test;
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

inline SplitIndices split_indices(std::size_t total, const SplitSpec& spec) {
  const std::size_t fixed = spec.base_train + spec.test + spec.labeled;
  detail::require(spec.base_train >= 1 && spec.test >= 1 && spec.labeled >= 1, "split: every part must be nonempty");
  if (total <= fixed || (spec.unlabeled > 0 && total < fixed + spec.unlabeled)) {
    throw ConfigError("split: " + std::to_string(total) + " rows cannot hold " + std::to_string(spec.base_train) +
                      " base-train + " + std::to_string(spec.test) + " test + " + std::to_string(spec.labeled) +
                      " labeled + " + (spec.unlabeled > 0 ? std::to_string(spec.unlabeled) : std::string("at least 1")) +
                      " unlabeled");
  }
  const auto order = random_permutation(total, spec.seed);
  SplitIndices out;
  auto take = [&order](std::size_t from, std::size_t count) {
    return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(from),
                                    order.begin() + static_cast<std::ptrdiff_t>(from + count));
  };
  out.base_train = take(0, spec.base_train);
  out.test = take(spec.base_train, spec.test);
  out.labeled = take(spec.base_train + spec.test, spec.labeled);
  out.unlabeled = take(fixed, spec.unlabeled > 0 ? spec.unlabeled : total - fixed);
  return out;
}

struct ExperimentSplit {
  LabeledDataset base_train;
  LabeledDataset test;
  LabeledDataset labeled;
  UnlabeledDataset unlabeled;
};

inline ExperimentSplit split_dataset(const LabeledDataset& data, const SplitSpec& spec) {
  const SplitIndices idx = split_indices(data.size(), spec);
  return {data.subset(idx.base_train), data.subset(idx.test), data.subset(idx.labeled),
          UnlabeledDataset::drop_labels(data.subset(idx.unlabeled))};
}

// Seeded split of a fingerprint table. The feature scaler is fit on the
// base-model training rows only.
inline ExperimentSplit split(const RawFingerprintTable& table, const SplitSpec& spec,
                             PreprocessOptions options = {}, std::vector<std::string>* warnings = nullptr) {
  const SplitIndices idx = split_indices(table.rows(), spec);
  options.fit_rows = idx.base_train;
  const LabeledDataset all = preprocess(table, options, warnings);
  return {all.subset(idx.base_train), all.subset(idx.test), all.subset(idx.labeled),
          UnlabeledDataset::drop_labels(all.subset(idx.unlabeled))};
}

// ---------------------------------------------------------------------------
// Synthetic task: X ~ Uniform[0,1]^m, Y = A X + c + amplitude * sin(B X) + noise,
// noise ~ N(0, noise_std^2 I_2). A, B and c are drawn once from the
// generator seed.

struct SyntheticTaskOptions {
  std::uint64_t generator_seed = 7;
  std::size_t dim = 20;
  double noise_std = 0.5;
  double linear_scale = 4.0;
  double frequency_scale = 2.0 * std::numbers::pi;
  double amplitude = 2.0;
  std::size_t oracle_size = 100000;
};

class SyntheticTask {
 public:
  explicit SyntheticTask(SyntheticTaskOptions options = {}) : options_(options) {
    detail::require(options_.dim >= 1, "synthetic task: dimension must be positive");
    detail::require(options_.noise_std >= 0.0, "synthetic task: noise must be nonnegative");
    detail::require(options_.oracle_size >= 100000, "synthetic task: oracle size must be at least 1e5");
    Rng rng(options_.generator_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto m = static_cast<Eigen::Index>(options_.dim);
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(options_.dim));
    linear_ = Matrix(2, m);
    frequency_ = Matrix(2, m);
    for (Eigen::Index c = 0; c < m; ++c) {
      for (Eigen::Index r = 0; r < 2; ++r) {
        linear_(r, c) = options_.linear_scale * inv_sqrt_m * normal(rng);
        frequency_(r, c) = options_.frequency_scale * inv_sqrt_m * normal(rng);
      }
    }
    offset_ = Point2(normal(rng), normal(rng)) * 5.0;
  }

  const SyntheticTaskOptions& options() const noexcept { return options_; }
  std::size_t dim() const noexcept { return options_.dim; }

  // Noise-free regression function h(x).
  Point2 mean_function(const Vector& x) const {
    const Point2 phase = frequency_ * x;
    return linear_ * x + offset_ + options_.amplitude * phase.array().sin().matrix();
  }

  Matrix mean_function_rows(const Matrix& x) const {
    const Matrix phase = x * frequency_.transpose();
    return ((x * linear_.transpose()).rowwise() + offset_.transpose()) + options_.amplitude * phase.array().sin().matrix();
  }

  // E[Y] in closed form: E[A X] = A 1/2 and, for independent uniform
  // coordinates, E[exp(i b.X)] = prod_k (exp(i b_k) - 1) / (i b_k).
  Point2 analytic_label_mean() const {
    Point2 mean = linear_.rowwise().sum() * 0.5 + offset_;
    for (Eigen::Index r = 0; r < 2; ++r) {
      std::complex<double> characteristic(1.0, 0.0);
      for (Eigen::Index c = 0; c < frequency_.cols(); ++c) {
        const double b = frequency_(r, c);
        const std::complex<double> ib(0.0, b);
        characteristic *= std::abs(b) < 1e-12 ? std::complex<double>(1.0, 0.0) : (std::exp(ib) - 1.0) / ib;
      }
      mean(r) += options_.amplitude * characteristic.imag();
    }
    return mean;
  }

  Matrix sample_inputs(std::size_t count, Rng& rng) const {
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    Matrix x(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(options_.dim));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = uniform(rng);
    }
    return x;
  }

  LabeledDataset sample(std::size_t count, std::uint64_t seed) const {
    detail::require(count >= 1, "synthetic sample: count must be positive");
    Rng rng(seed);
    Matrix x = sample_inputs(count, rng);
    Matrix y = mean_function_rows(x);
    if (options_.noise_std > 0.0) {
      std::normal_distribution<double> noise(0.0, options_.noise_std);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        y(r, 0) += noise(rng);
        y(r, 1) += noise(rng);
      }
    }
    return LabeledDataset(std::move(x), std::move(y));
  }

  // The exact regression function as a predictor (a perfect pseudo-labeler
  // when noise_std = 0).
  RegressorPtr mean_predictor() const {
    return std::make_shared<FunctionRegressor>([task = *this](const Vector& x) { return task.mean_function(x); },
                                               options_.dim);
  }

 private:
  SyntheticTaskOptions options_;
  Matrix linear_;
  Matrix frequency_;
  Point2 offset_;
};

inline LabeledDataset synthetic_generate(const SyntheticTask& task, std::size_t count, std::uint64_t seed) {
  return task.sample(count, seed);
}

struct RiskEstimate {
  double risk = 0.0;
  double standard_error = 0.0;
};

// Miscoverage risk of a base model on fresh draws from the task, for any
// threshold. Scores are computed once and sorted, so each query is a binary
// search.
class TrueRiskOracle {
 public:
  TrueRiskOracle(const SyntheticTask& task, const Regressor& base, std::size_t draws, std::uint64_t seed,
                 const ScoreFunction& score = euclidean_score) {
    detail::require(draws >= 1, "risk oracle needs at least one draw");
    const LabeledDataset fresh = task.sample(draws, seed);
    scores_ = row_scores(fresh.labels(), base.predict(fresh.features()), score);
    std::sort(scores_.begin(), scores_.end());
  }

  RiskEstimate risk(double lambda) const {
    detail::require(std::isfinite(lambda) && lambda >= 0.0, "risk oracle: lambda must be nonnegative");
    const auto covered = std::upper_bound(scores_.begin(), scores_.end(), lambda) - scores_.begin();
    const double m = static_cast<double>(scores_.size());
    const double p = 1.0 - static_cast<double>(covered) / m;
    return {p, std::sqrt(p * (1.0 - p) / m)};
  }

  std::size_t draws() const noexcept { return scores_.size(); }

 private:
  std::vector<double> scores_;
};

inline RiskEstimate true_risk_oracle(const SyntheticTask& task, const Regressor& base, double lambda,
                                     std::uint64_t seed) {
  return TrueRiskOracle(task, base, task.options().oracle_size, seed).risk(lambda);
}

// ---------------------------------------------------------------------------
// Simulated fingerprints in the UJIIndoorLoc layout, for running the
// localization pipeline when the public dataset is not at hand. Log-distance
// path loss with floor and wall attenuation plus log-normal shadowing.

struct FingerprintSimulation {
  std::size_t rows = 19937;
  std::size_t access_points = 520;
  std::size_t buildings = 3;
  std::size_t floors = 4;
  double reference_dbm = -35.0;  // at 1 m
  double path_loss_exponent = 3.0;
  double floor_loss_db = 14.0;
  double building_loss_db = 25.0;
  double shadowing_db = 5.0;
  double detection_floor_dbm = -100.0;
  std::uint64_t seed = 2014;
};

inline RawFingerprintTable simulate_fingerprints(const FingerprintSimulation& sim) {
  detail::require(sim.rows >= 1 && sim.access_points >= 1 && sim.buildings >= 1 && sim.floors >= 1,
                  "fingerprint simulation: sizes must be positive");
  Rng rng(sim.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> shadow(0.0, sim.shadowing_db);
  // Buildings side by side, each 120 m x 80 m, 30 m apart, at UJI-like
  // projected coordinates.
  const double width = 120.0;
  const double depth = 80.0;
  const double gap = 30.0;
  const Point2 origin(-7700.0, 4864740.0);
  auto building_corner = [&](std::size_t b) {
    return Point2(origin(0) + static_cast<double>(b) * (width + gap), origin(1) + static_cast<double>(b) * 25.0);
  };
  struct AccessPoint {
    Point2 position;
    std::size_t building;
    std::size_t floor;
  };
  std::vector<AccessPoint> aps;
  for (std::size_t a = 0; a < sim.access_points; ++a) {
    const std::size_t b = a % sim.buildings;
    const std::size_t f = (a / sim.buildings) % sim.floors;
    aps.push_back({building_corner(b) + Point2(unit(rng) * width, unit(rng) * depth), b, f});
  }
  RawFingerprintTable table;
  table.rssi = Matrix(static_cast<Eigen::Index>(sim.rows), static_cast<Eigen::Index>(sim.access_points));
  table.coordinates = Matrix(static_cast<Eigen::Index>(sim.rows), 2);
  std::uniform_int_distribution<std::size_t> pick_building(0, sim.buildings - 1);
  std::uniform_int_distribution<std::size_t> pick_floor(0, sim.floors - 1);
  for (Eigen::Index r = 0; r < table.rssi.rows(); ++r) {
    const std::size_t b = pick_building(rng);
    const std::size_t f = pick_floor(rng);
    const Point2 pos = building_corner(b) + Point2(unit(rng) * width, unit(rng) * depth);
    table.coordinates.row(r) = pos.transpose();
    table.building.push_back(static_cast<int>(b));
    table.floor.push_back(static_cast<int>(f));
    for (std::size_t a = 0; a < aps.size(); ++a) {
      const double distance = std::max(1.0, (aps[a].position - pos).norm());
      const double floors_apart = std::abs(static_cast<double>(aps[a].floor) - static_cast<double>(f));
      double dbm = sim.reference_dbm - 10.0 * sim.path_loss_exponent * std::log10(distance) -
                   sim.floor_loss_db * floors_apart - (aps[a].building != b ? sim.building_loss_db : 0.0) + shadow(rng);
      dbm = std::round(std::min(dbm, kRssiMax));
      table.rssi(r, static_cast<Eigen::Index>(a)) =
          dbm < std::max(sim.detection_floor_dbm, kRssiMin) ? kRssiNotDetected : dbm;
    }
  }
  return table;
}

}  // namespace riskcal
