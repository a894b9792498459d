#pragma once

// End-to-end threshold calibration for ball-shaped prediction sets around a
// fixed base model:
//
//   RCPS       labeled losses only, UCB at level delta
//   RCPS_PPI   split labeled data into fine-tune / bias-correction parts,
//              debiased pseudo-label risk, UCB at level delta
//   RCPS_CPPI  K-fold cross-fitting; fold k's predictor never sees fold k,
//              whose samples debias it; per-fold UCB at delta / K, minimum
//              over folds
//   SS         pooled real and pseudo losses with no correction (baseline
//              without a guarantee)
//
// Every method selects the threshold by scanning the grid downward from its
// largest value while the UCB stays strictly below alpha.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "riskcal/bounds.hpp"
#include "riskcal/core.hpp"
#include "riskcal/estimators.hpp"
#include "riskcal/folds.hpp"
#include "riskcal/models.hpp"
#include "riskcal/rng.hpp"

namespace riskcal {

enum class Method { Rcps, RcpsPpi, RcpsCppi, Ss };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Rcps: return "RCPS";
    case Method::RcpsPpi: return "RCPS_PPI";
    case Method::RcpsCppi: return "RCPS_CPPI";
    case Method::Ss: return "SS";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "RCPS") return Method::Rcps;
  if (s == "RCPS_PPI") return Method::RcpsPpi;
  if (s == "RCPS_CPPI") return Method::RcpsCppi;
  if (s == "SS") return Method::Ss;
  throw InvalidInput("unknown calibration method '" + s + "'");
}

// Seed streams derived from CalibrationConfig::seed.
namespace seed_stream {
inline constexpr std::uint64_t kLabeledOrder = 1;
inline constexpr std::uint64_t kUnlabeledOrder = 2;
inline constexpr std::uint64_t kFoldPlan = 3;
inline constexpr std::uint64_t kPredictorBase = 100;  // + fold index
}  // namespace seed_stream

struct CalibrationConfig {
  double alpha = 0.1;
  double delta = 0.1;
  Method method = Method::Rcps;
  std::size_t folds = 5;
  UcbMethod ucb_method = UcbMethod::Wsr;
  double bisection_tolerance = 1e-6;
  double ppi_split_fraction = 0.5;
  double grid_padding = 1.0;
  // Smallest labeled set an auxiliary predictor may be trained on.
  std::size_t min_training_size = 2;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    detail::require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
    detail::require(folds >= 1, "K must be positive");
    detail::require(method != Method::RcpsCppi || folds >= 2, "RCPS_CPPI requires K >= 2");
    detail::require(ppi_split_fraction > 0.0 && ppi_split_fraction < 1.0, "PPI split fraction must lie in (0, 1)");
    detail::require(bisection_tolerance > 0.0, "bisection tolerance must be positive");
    detail::require(std::isfinite(grid_padding) && grid_padding >= 0.0, "grid padding must be nonnegative");
  }

  UcbSpec ucb_at(double level) const { return UcbSpec{ucb_method, level, bisection_tolerance}; }

  friend bool operator==(const CalibrationConfig&, const CalibrationConfig&) = default;
};

struct CalibrationResult {
  Method method = Method::Rcps;
  CalibrationConfig config;
  std::uint64_t seed = 0;
  ThresholdGrid grid{std::vector<double>{0.0}};
  std::vector<double> estimate;
  std::vector<double> ucb_curve;
  std::vector<std::vector<double>> per_fold_ucb_curves;  // RCPS_CPPI only
  double lambda_hat = 0.0;
  // alpha was not reached even at the largest grid value; lambda_hat is then
  // the grid maximum.
  bool no_valid_threshold = false;
  std::vector<std::string> warnings;
  std::size_t labeled_used = 0;
  std::size_t unlabeled_used = 0;
  std::vector<RegressorPtr> auxiliary_models;
};

inline double prediction_set_radius(const CalibrationResult& result) { return prediction_set_radius(result.lambda_hat); }

// Downward fixed-sequence scan: walk from the largest grid value while the
// UCB is strictly below alpha and return the smallest value of that run.
// nullopt when the UCB at the largest value already reaches alpha.
inline std::optional<double> select_threshold(std::span<const double> ucb, const ThresholdGrid& grid, double alpha) {
  detail::require(ucb.size() == grid.size(), "select_threshold: curve and grid lengths differ");
  for (double u : ucb) detail::require(std::isfinite(u), "select_threshold: non-finite UCB value");
  std::size_t t = grid.size();
  while (t > 0 && ucb[t - 1] < alpha) --t;
  if (t == grid.size()) return std::nullopt;
  return grid[t];
}

// One cross-fitting fold: indices (into the labeled set) used to train the
// auxiliary predictor and indices used for bias correction.
struct CrossFitFold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> bias;
};

namespace detail {

// Calibration data in the run's seeded order, with base-model outputs.
struct PreparedData {
  LabeledDataset labeled;
  std::optional<UnlabeledDataset> unlabeled;
  Matrix base_labeled;
  Matrix base_unlabeled;
  ThresholdGrid grid;
};

inline PreparedData prepare(const LabeledDataset& labeled, const UnlabeledDataset* unlabeled, const Regressor& base,
                            const CalibrationConfig& config) {
  config.validate();
  require(base.input_dim() == labeled.dim(), "base model input dimension does not match labeled features");
  const auto order_l = random_permutation(labeled.size(), derive_seed(config.seed, seed_stream::kLabeledOrder));
  LabeledDataset shuffled = labeled.subset(order_l);
  Matrix base_l = base.predict(shuffled.features());
  std::optional<UnlabeledDataset> shuffled_u;
  Matrix base_u;
  if (unlabeled != nullptr) {
    require(unlabeled->dim() == labeled.dim(), "unlabeled and labeled feature dimensions differ");
    const auto order_u = random_permutation(unlabeled->size(), derive_seed(config.seed, seed_stream::kUnlabeledOrder));
    shuffled_u.emplace(unlabeled->subset(order_u));
    base_u = base.predict(shuffled_u->features());
  }
  const auto scores = row_scores(shuffled.labels(), base_l);
  ThresholdGrid grid = build_threshold_grid(scores, config.grid_padding);
  return {std::move(shuffled), std::move(shuffled_u), std::move(base_l), std::move(base_u), std::move(grid)};
}

inline void finish(CalibrationResult& result, const CalibrationConfig& config) {
  const auto chosen = select_threshold(result.ucb_curve, result.grid, config.alpha);
  if (chosen) {
    result.lambda_hat = *chosen;
  } else {
    result.lambda_hat = result.grid.max();
    result.no_valid_threshold = true;
    result.warnings.push_back("no grid threshold reaches alpha; using the largest grid value");
  }
}

inline CalibrationResult start_result(const CalibrationConfig& config, Method method, ThresholdGrid grid) {
  CalibrationResult r;
  r.method = method;
  r.config = config;
  r.config.method = method;
  r.seed = config.seed;
  r.grid = std::move(grid);
  return r;
}

}  // namespace detail

// Labeled-only risk control.
inline CalibrationResult calibrate_rcps(const LabeledDataset& labeled, const Regressor& base,
                                        const CalibrationConfig& config, const LossFunction& loss = make_miscoverage_loss()) {
  auto data = detail::prepare(labeled, nullptr, base, config);
  CalibrationResult result = detail::start_result(config, Method::Rcps, data.grid);
  const LossMatrix losses = evaluate_losses(data.labeled.labels(), data.base_labeled, data.grid, loss);
  const RiskCurve curve = empirical_risk(losses);
  result.estimate = curve.estimate;
  result.ucb_curve = ucb_curve(curve, config.ucb_at(config.delta));
  result.labeled_used = labeled.size();
  detail::finish(result, config);
  return result;
}

// Shared engine of RCPS_PPI and RCPS_CPPI. Each fold trains a predictor on
// its `train` indices, debiases with its `bias` indices and pairs those with
// blocks of the unlabeled data; the per-fold UCBs are taken at delta / K and
// combined by their pointwise minimum. Indices refer to the labeled set in
// the run's seeded order.
inline CalibrationResult calibrate_cross_fit(const LabeledDataset& labeled, const UnlabeledDataset& unlabeled,
                                             const Regressor& base, const RegressorTrainer& trainer,
                                             const CalibrationConfig& config, std::span<const CrossFitFold> folds,
                                             Method method, const LossFunction& loss = make_miscoverage_loss()) {
  detail::require(!folds.empty(), "cross-fit needs at least one fold");
  auto data = detail::prepare(labeled, &unlabeled, base, config);
  CalibrationResult result = detail::start_result(config, method, data.grid);
  const UcbSpec spec = config.ucb_at(config.delta / static_cast<double>(folds.size()));
  const Matrix& x_u = data.unlabeled->features();

  std::vector<RiskCurve> fold_curves;
  std::size_t truncated_max = 0;
  for (std::size_t k = 0; k < folds.size(); ++k) {
    const CrossFitFold& fold = folds[k];
    if (fold.bias.empty()) throw InvalidInput("fold " + std::to_string(k) + " has an empty bias-correction set");
    if (fold.train.size() < config.min_training_size) {
      throw ConfigError("fold " + std::to_string(k) + " leaves " + std::to_string(fold.train.size()) +
                        " training samples for the auxiliary predictor (minimum " +
                        std::to_string(config.min_training_size) + "; bias-correction size " +
                        std::to_string(fold.bias.size()) + ", n = " + std::to_string(labeled.size()) + ")");
    }
    const LabeledDataset train = data.labeled.subset(fold.train);
    const LabeledDataset bias = data.labeled.subset(fold.bias);
    RegressorPtr model = trainer(train, derive_seed(config.seed, seed_stream::kPredictorBase + k));
    result.auxiliary_models.push_back(model);

    const Matrix base_bias = detail::gather_rows(data.base_labeled, fold.bias);
    const LossMatrix true_losses = evaluate_losses(bias.labels(), base_bias, data.grid, loss);
    const LossMatrix pseudo_on_bias = evaluate_losses(model->predict(bias.features()), base_bias, data.grid, loss);
    const BiasCorrectionMatrix corrections = bias_corrections(pseudo_on_bias, true_losses);

    const BlockPairing pairing = pair_blocks(unlabeled.size(), fold.bias.size());
    const auto used = static_cast<Eigen::Index>(pairing.truncated_size());
    truncated_max = std::max(truncated_max, pairing.truncated_size());
    const LossMatrix pseudo_unlabeled =
        evaluate_losses(model->predict(x_u.topRows(used)), data.base_unlabeled.topRows(used), data.grid, loss);

    fold_curves.push_back(cppi_fold_risk(pseudo_unlabeled, corrections, pairing));
    result.per_fold_ucb_curves.push_back(ucb_curve(fold_curves.back(), spec));
  }

  const CrossFitRiskCurve combined = cppi_risk(std::move(fold_curves));
  result.estimate = combined.estimate;
  result.ucb_curve = result.per_fold_ucb_curves.front();
  for (const auto& fold_ucb : result.per_fold_ucb_curves) {
    for (std::size_t t = 0; t < fold_ucb.size(); ++t) result.ucb_curve[t] = std::min(result.ucb_curve[t], fold_ucb[t]);
  }
  if (folds.size() == 1) result.per_fold_ucb_curves.clear();
  result.labeled_used = labeled.size();
  result.unlabeled_used = truncated_max;
  detail::finish(result, config);
  return result;
}

// The fine-tune / bias-correction split of the single PPI fold: the first
// round(fraction * n) samples of the seeded order train the predictor.
inline CrossFitFold ppi_split(std::size_t n, double fine_tune_fraction) {
  detail::require(fine_tune_fraction > 0.0 && fine_tune_fraction < 1.0, "PPI split fraction must lie in (0, 1)");
  const auto fine_tune = static_cast<std::size_t>(std::llround(fine_tune_fraction * static_cast<double>(n)));
  if (fine_tune >= n) {
    throw InvalidInput("PPI split leaves no bias-correction samples (n = " + std::to_string(n) + ")");
  }
  CrossFitFold fold;
  for (std::size_t i = 0; i < n; ++i) (i < fine_tune ? fold.train : fold.bias).push_back(i);
  return fold;
}

inline std::vector<CrossFitFold> cross_fit_folds(const FoldPlan& plan) {
  std::vector<CrossFitFold> folds;
  for (std::size_t k = 0; k < plan.folds(); ++k) folds.push_back({plan.training(k), plan.held_out(k)});
  return folds;
}

inline CalibrationResult calibrate_ppi(const LabeledDataset& labeled, const UnlabeledDataset& unlabeled,
                                       const RegressorTrainer& trainer, const Regressor& base,
                                       const CalibrationConfig& config, const LossFunction& loss = make_miscoverage_loss()) {
  const CrossFitFold fold = ppi_split(labeled.size(), config.ppi_split_fraction);
  return calibrate_cross_fit(labeled, unlabeled, base, trainer, config, std::span<const CrossFitFold>(&fold, 1),
                             Method::RcpsPpi, loss);
}

inline CalibrationResult calibrate_cppi(const LabeledDataset& labeled, const UnlabeledDataset& unlabeled,
                                        const RegressorTrainer& trainer, const Regressor& base,
                                        const CalibrationConfig& config, const LossFunction& loss = make_miscoverage_loss()) {
  detail::require(config.folds >= 2, "RCPS_CPPI requires K >= 2");
  const FoldPlan plan = partition_folds(labeled.size(), config.folds, derive_seed(config.seed, seed_stream::kFoldPlan));
  const auto folds = cross_fit_folds(plan);
  return calibrate_cross_fit(labeled, unlabeled, base, trainer, config, folds, Method::RcpsCppi, loss);
}

// Pooled baseline: one predictor trained on all labeled data, its pseudo
// losses on every unlabeled point treated as if they were real.
inline CalibrationResult calibrate_ss(const LabeledDataset& labeled, const UnlabeledDataset& unlabeled,
                                      const RegressorTrainer& trainer, const Regressor& base,
                                      const CalibrationConfig& config, const LossFunction& loss = make_miscoverage_loss()) {
  auto data = detail::prepare(labeled, &unlabeled, base, config);
  CalibrationResult result = detail::start_result(config, Method::Ss, data.grid);
  RegressorPtr model = trainer(data.labeled, derive_seed(config.seed, seed_stream::kPredictorBase));
  result.auxiliary_models.push_back(model);
  const LossMatrix real = evaluate_losses(data.labeled.labels(), data.base_labeled, data.grid, loss);
  const LossMatrix pseudo =
      evaluate_losses(model->predict(data.unlabeled->features()), data.base_unlabeled, data.grid, loss);
  const RiskCurve curve = ss_risk(real, pseudo);
  result.estimate = curve.estimate;
  result.ucb_curve = ucb_curve(curve, config.ucb_at(config.delta));
  result.labeled_used = labeled.size();
  result.unlabeled_used = unlabeled.size();
  detail::finish(result, config);
  return result;
}

inline CalibrationResult calibrate(const LabeledDataset& labeled, const UnlabeledDataset* unlabeled,
                                   const RegressorTrainer& trainer, const Regressor& base,
                                   const CalibrationConfig& config) {
  if (config.method == Method::Rcps) return calibrate_rcps(labeled, base, config);
  detail::require(unlabeled != nullptr, std::string(to_string(config.method)) + " needs unlabeled data");
  detail::require(static_cast<bool>(trainer), std::string(to_string(config.method)) + " needs an auxiliary trainer");
  switch (config.method) {
    case Method::RcpsPpi: return calibrate_ppi(labeled, *unlabeled, trainer, base, config);
    case Method::RcpsCppi: return calibrate_cppi(labeled, *unlabeled, trainer, base, config);
    case Method::Ss: return calibrate_ss(labeled, *unlabeled, trainer, base, config);
    case Method::Rcps: break;
  }
  return calibrate_rcps(labeled, base, config);
}

}  // namespace riskcal
