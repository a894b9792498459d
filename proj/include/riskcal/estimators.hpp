#pragma once

// Risk estimators over a threshold grid: empirical (labeled only),
// prediction-powered (pseudo-labels debiased on labeled data), cross-fitted
// prediction-powered, and the uncorrected semi-supervised pool.
//
// Every estimator returns, next to the per-threshold estimate, the sequence
// of i.i.d. per-sample terms whose mean is that estimate, with its a-priori
// range. Those sequences are what the UCB constructors consume.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "riskcal/bounds.hpp"
#include "riskcal/core.hpp"
#include "riskcal/folds.hpp"

namespace riskcal {

// Range of a debiased term: block mean of pseudo losses in [0, 1] minus a
// bias correction in [-1, 1].
inline constexpr double kDebiasedTermLower = -1.0;
inline constexpr double kDebiasedTermUpper = 2.0;

// rows x |grid| matrix of losses; row i, column t holds l(y_i, Gamma_{lambda_t}(x_i)).
class LossMatrix {
 public:
  explicit LossMatrix(Matrix values) : values_(std::move(values)) {
    detail::require(values_.rows() >= 1 && values_.cols() >= 1, "loss matrix must be nonempty");
    for (Eigen::Index i = 0; i < values_.rows(); ++i) {
      for (Eigen::Index t = 0; t < values_.cols(); ++t) {
        const double v = values_(i, t);
        detail::require(v >= 0.0 && v <= 1.0, "loss matrix entries must lie in [0, 1]");
        detail::require(t == 0 || v <= values_(i, t - 1), "loss matrix rows must be non-increasing in lambda");
      }
    }
  }

  std::size_t rows() const noexcept { return static_cast<std::size_t>(values_.rows()); }
  std::size_t grid_size() const noexcept { return static_cast<std::size_t>(values_.cols()); }
  double operator()(std::size_t i, std::size_t t) const {
    return values_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t));
  }
  const Matrix& values() const noexcept { return values_; }

 private:
  Matrix values_;
};

// rows x |grid| matrix of Delta_i(lambda_t) = pseudo loss - true loss.
class BiasCorrectionMatrix {
 public:
  explicit BiasCorrectionMatrix(Matrix values) : values_(std::move(values)) {
    detail::require(values_.rows() >= 1 && values_.cols() >= 1, "bias correction matrix must be nonempty");
    detail::require((values_.array() >= -1.0).all() && (values_.array() <= 1.0).all(),
                    "bias corrections must lie in [-1, 1]");
  }

  std::size_t rows() const noexcept { return static_cast<std::size_t>(values_.rows()); }
  std::size_t grid_size() const noexcept { return static_cast<std::size_t>(values_.cols()); }
  double operator()(std::size_t i, std::size_t t) const {
    return values_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t));
  }
  const Matrix& values() const noexcept { return values_; }

 private:
  Matrix values_;
};

struct RiskCurve {
  std::vector<double> estimate;
  // One sequence per grid value; its mean is estimate[t].
  std::vector<BoundedSampleSequence> per_sample_terms;

  std::size_t grid_size() const noexcept { return estimate.size(); }
};

// Average of K per-fold curves; the fold curves are kept for the per-fold UCBs.
struct CrossFitRiskCurve {
  std::vector<double> estimate;
  std::vector<RiskCurve> folds;

  std::size_t grid_size() const noexcept { return estimate.size(); }
};

// Losses of `targets` against the sets centred at `predictions`, for every
// grid value. Targets are true labels or pseudo-labels.
inline LossMatrix evaluate_losses(const Matrix& targets, const Matrix& predictions, const ThresholdGrid& grid,
                                  const LossFunction& loss) {
  detail::require(targets.rows() == predictions.rows() && targets.cols() == 2 && predictions.cols() == 2,
                  "evaluate_losses: shape mismatch");
  Matrix values(targets.rows(), static_cast<Eigen::Index>(grid.size()));
  for (Eigen::Index i = 0; i < targets.rows(); ++i) {
    const Point2 y = targets.row(i).transpose();
    const Point2 p = predictions.row(i).transpose();
    for (std::size_t t = 0; t < grid.size(); ++t) values(i, static_cast<Eigen::Index>(t)) = loss(y, p, grid[t]);
  }
  return LossMatrix(std::move(values));
}

inline BiasCorrectionMatrix bias_corrections(const LossMatrix& pseudo_losses, const LossMatrix& true_losses) {
  detail::require(pseudo_losses.rows() == true_losses.rows() && pseudo_losses.grid_size() == true_losses.grid_size(),
                  "bias_corrections: dimension mismatch");
  return BiasCorrectionMatrix(pseudo_losses.values() - true_losses.values());
}

namespace detail {

inline RiskCurve raw_loss_curve(std::span<const LossMatrix* const> sources) {
  const std::size_t grid = sources.front()->grid_size();
  std::size_t rows = 0;
  for (const LossMatrix* m : sources) {
    require(m->grid_size() == grid, "loss matrices must share the threshold grid");
    rows += m->rows();
  }
  RiskCurve curve;
  curve.estimate.reserve(grid);
  curve.per_sample_terms.reserve(grid);
  for (std::size_t t = 0; t < grid; ++t) {
    std::vector<double> terms;
    terms.reserve(rows);
    double sum = 0.0;
    for (const LossMatrix* m : sources) {
      for (std::size_t i = 0; i < m->rows(); ++i) {
        terms.push_back((*m)(i, t));
        sum += terms.back();
      }
    }
    curve.estimate.push_back(sum / static_cast<double>(rows));
    curve.per_sample_terms.emplace_back(std::move(terms), 0.0, 1.0);
  }
  return curve;
}

}  // namespace detail

// (1/n) sum_i l_i(lambda) with the raw losses as per-sample terms.
inline RiskCurve empirical_risk(const LossMatrix& labeled_losses) {
  const LossMatrix* sources[] = {&labeled_losses};
  return detail::raw_loss_curve(sources);
}

// Debiased estimate for one fold. Term i pairs labeled sample i of the fold
// with unlabeled block i:
//
//   term_i(lambda) = (1/B) sum_{j in block i} l^U_j(lambda) - Delta_i(lambda)
//
// and the estimate is the mean of the terms. Unlabeled rows past the last
// block are ignored.
inline RiskCurve cppi_fold_risk(const LossMatrix& fold_pseudo_losses, const BiasCorrectionMatrix& fold_bias,
                                const BlockPairing& pairing) {
  const std::size_t grid = fold_pseudo_losses.grid_size();
  const std::size_t fold_size = fold_bias.rows();
  detail::require(fold_bias.grid_size() == grid, "cppi_fold_risk: grid mismatch");
  if (pairing.blocks() != fold_size || pairing.truncated_size() > fold_pseudo_losses.rows()) {
    throw InvalidInput("cppi_fold_risk: pairing (" + std::to_string(pairing.blocks()) + " blocks of " +
                       std::to_string(pairing.block_size()) + ") inconsistent with N = " +
                       std::to_string(fold_pseudo_losses.rows()) + ", n_k = " + std::to_string(fold_size));
  }
  const Matrix& pseudo = fold_pseudo_losses.values();
  const auto block = static_cast<Eigen::Index>(pairing.block_size());
  // block_means(i, t): mean pseudo loss of block i at lambda_t.
  Matrix block_means(static_cast<Eigen::Index>(fold_size), static_cast<Eigen::Index>(grid));
  for (std::size_t i = 0; i < fold_size; ++i) {
    const auto begin = static_cast<Eigen::Index>(pairing.block_begin(i));
    block_means.row(static_cast<Eigen::Index>(i)) =
        pseudo.middleRows(begin, block).colwise().sum() / static_cast<double>(block);
  }

  RiskCurve curve;
  curve.estimate.reserve(grid);
  curve.per_sample_terms.reserve(grid);
  for (std::size_t t = 0; t < grid; ++t) {
    std::vector<double> terms(fold_size);
    double sum = 0.0;
    for (std::size_t i = 0; i < fold_size; ++i) {
      terms[i] = block_means(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) - fold_bias(i, t);
      sum += terms[i];
    }
    curve.estimate.push_back(sum / static_cast<double>(fold_size));
    curve.per_sample_terms.emplace_back(std::move(terms), kDebiasedTermLower, kDebiasedTermUpper);
  }
  return curve;
}

// Prediction-powered estimate: mean pseudo loss on unlabeled data minus mean
// bias correction. It is the single-fold case of the cross-fitted estimate,
// with the unlabeled data cut into n_bc blocks.
inline RiskCurve ppi_risk(const LossMatrix& unlabeled_pseudo_losses, const BiasCorrectionMatrix& bias) {
  detail::require(unlabeled_pseudo_losses.grid_size() == bias.grid_size(), "ppi_risk: grid mismatch");
  if (unlabeled_pseudo_losses.rows() < bias.rows()) {
    throw InvalidInput("ppi_risk: fewer unlabeled rows (" + std::to_string(unlabeled_pseudo_losses.rows()) +
                       ") than bias-correction rows (" + std::to_string(bias.rows()) + ")");
  }
  return cppi_fold_risk(unlabeled_pseudo_losses, bias, pair_blocks(unlabeled_pseudo_losses.rows(), bias.rows()));
}

inline CrossFitRiskCurve cppi_risk(std::vector<RiskCurve> fold_curves) {
  detail::require(!fold_curves.empty(), "cppi_risk: need at least one fold");
  const std::size_t grid = fold_curves.front().grid_size();
  for (const RiskCurve& c : fold_curves) detail::require(c.grid_size() == grid, "cppi_risk: fold grids differ");
  CrossFitRiskCurve out;
  out.estimate.assign(grid, 0.0);
  for (const RiskCurve& c : fold_curves) {
    for (std::size_t t = 0; t < grid; ++t) out.estimate[t] += c.estimate[t];
  }
  for (double& e : out.estimate) e /= static_cast<double>(fold_curves.size());
  out.folds = std::move(fold_curves);
  return out;
}

// Pooled real and pseudo losses with no bias correction. Carries no
// risk-control guarantee.
inline RiskCurve ss_risk(const LossMatrix& labeled_losses, const LossMatrix& unlabeled_pseudo_losses) {
  const LossMatrix* sources[] = {&labeled_losses, &unlabeled_pseudo_losses};
  return detail::raw_loss_curve(sources);
}

inline std::vector<double> ucb_curve(const RiskCurve& curve, const UcbSpec& spec) {
  std::vector<double> out;
  out.reserve(curve.grid_size());
  for (const auto& terms : curve.per_sample_terms) out.push_back(upper_confidence_bound(terms, spec));
  return out;
}

}  // namespace riskcal
