#pragma once

// Shared vocabulary: calibration datasets, scores, losses and the
// threshold grid over which prediction-set radii are searched.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "riskcal/error.hpp"

namespace riskcal {

using Point2 = Eigen::Vector2d;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline Matrix gather_rows(const Matrix& source, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), source.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < static_cast<std::size_t>(source.rows()), "row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = source.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

}  // namespace detail

class UnlabeledDataset;

// Labeled calibration (or training/test) samples: one feature row and one
// planar position per sample.
class LabeledDataset {
 public:
  LabeledDataset(Matrix features, Matrix labels)
      : features_(std::move(features)), labels_(std::move(labels)) {
    detail::require(features_.rows() >= 1, "labeled dataset must contain at least one sample");
    detail::require(features_.cols() >= 1, "labeled dataset must have at least one feature");
    detail::require(labels_.cols() == 2, "labels must be 2-D positions");
    detail::require(features_.rows() == labels_.rows(), "feature and label row counts differ");
    detail::require(detail::all_finite(features_), "labeled features contain non-finite values");
    detail::require(detail::all_finite(labels_), "labels contain non-finite values");
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(features_.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(features_.cols()); }
  const Matrix& features() const noexcept { return features_; }
  const Matrix& labels() const noexcept { return labels_; }
  Point2 label(std::size_t i) const { return labels_.row(static_cast<Eigen::Index>(i)).transpose(); }

  LabeledDataset subset(std::span<const std::size_t> rows) const {
    return {detail::gather_rows(features_, rows), detail::gather_rows(labels_, rows)};
  }

 private:
  Matrix features_;
  Matrix labels_;
};

// Inputs without labels. There is deliberately no way to get a label back out.
class UnlabeledDataset {
 public:
  explicit UnlabeledDataset(Matrix features) : features_(std::move(features)) {
    detail::require(features_.rows() >= 1, "unlabeled dataset must contain at least one sample");
    detail::require(features_.cols() >= 1, "unlabeled dataset must have at least one feature");
    detail::require(detail::all_finite(features_), "unlabeled features contain non-finite values");
  }

  static UnlabeledDataset drop_labels(const LabeledDataset& labeled) {
    return UnlabeledDataset(labeled.features());
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(features_.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(features_.cols()); }
  const Matrix& features() const noexcept { return features_; }

  UnlabeledDataset subset(std::span<const std::size_t> rows) const {
    return UnlabeledDataset(detail::gather_rows(features_, rows));
  }

 private:
  Matrix features_;
};

// S(candidate, prediction) >= 0 with S(y, y) = 0.
using ScoreFunction = std::function<double(const Point2& candidate, const Point2& prediction)>;

// l(y, Gamma_lambda(x)) in [0, 1], non-increasing in lambda. The model output
// f(x) stands in for the set, since every set is parametrized by it.
using LossFunction = std::function<double(const Point2& label, const Point2& prediction, double lambda)>;

inline double euclidean_score(const Point2& candidate, const Point2& prediction) {
  detail::require(candidate.allFinite() && prediction.allFinite(), "euclidean_score: non-finite input");
  return (candidate - prediction).norm();
}

// 0 when the label lies in the ball {y : score(y, prediction) <= lambda}, 1 otherwise.
inline double miscoverage_loss(const Point2& label, const Point2& prediction, double lambda,
                               const ScoreFunction& score = euclidean_score) {
  detail::require(std::isfinite(lambda) && lambda >= 0.0, "miscoverage_loss: lambda must be a finite nonnegative value");
  return score(label, prediction) <= lambda ? 0.0 : 1.0;
}

inline LossFunction make_miscoverage_loss(ScoreFunction score = euclidean_score) {
  return [score = std::move(score)](const Point2& y, const Point2& pred, double lambda) {
    return miscoverage_loss(y, pred, lambda, score);
  };
}

// Candidate thresholds, strictly increasing and starting at a nonnegative value.
class ThresholdGrid {
 public:
  explicit ThresholdGrid(std::vector<double> values) : values_(std::move(values)) {
    detail::require(!values_.empty(), "threshold grid must be nonempty");
    detail::require(std::isfinite(values_.front()) && values_.front() >= 0.0, "threshold grid must start at a nonnegative value");
    for (std::size_t t = 1; t < values_.size(); ++t) {
      detail::require(std::isfinite(values_[t]) && values_[t] > values_[t - 1], "threshold grid must be strictly increasing");
    }
  }

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t t) const { return values_[t]; }
  double min() const noexcept { return values_.front(); }
  double max() const noexcept { return values_.back(); }
  const std::vector<double>& values() const noexcept { return values_; }

  friend bool operator==(const ThresholdGrid&, const ThresholdGrid&) = default;

 private:
  std::vector<double> values_;
};

// {0} U scores U {max(scores) + padding}, sorted and deduplicated. A ball loss
// only changes value at a sample's own score, so between consecutive grid
// points every calibration loss is constant.
inline ThresholdGrid build_threshold_grid(std::span<const double> scores, double padding) {
  detail::require(!scores.empty(), "build_threshold_grid: empty score list");
  detail::require(std::isfinite(padding) && padding >= 0.0, "build_threshold_grid: padding must be nonnegative");
  std::vector<double> values;
  values.reserve(scores.size() + 2);
  values.push_back(0.0);
  double top = 0.0;
  for (double s : scores) {
    detail::require(std::isfinite(s) && s >= 0.0, "build_threshold_grid: scores must be finite and nonnegative");
    values.push_back(s);
    top = std::max(top, s);
  }
  values.push_back(top + padding);
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  return ThresholdGrid(std::move(values));
}

// Ball sets have the same radius at every test point, so the average
// prediction-set radius is the selected threshold itself.
inline double prediction_set_radius(double lambda_hat) {
  detail::require(std::isfinite(lambda_hat) && lambda_hat >= 0.0, "prediction_set_radius: invalid threshold");
  return lambda_hat;
}

// Row-wise scores between two n x 2 position matrices.
inline std::vector<double> row_scores(const Matrix& candidates, const Matrix& predictions,
                                      const ScoreFunction& score = euclidean_score) {
  detail::require(candidates.rows() == predictions.rows() && candidates.cols() == 2 && predictions.cols() == 2,
                  "row_scores: shape mismatch");
  std::vector<double> out(static_cast<std::size_t>(candidates.rows()));
  for (Eigen::Index i = 0; i < candidates.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = score(candidates.row(i).transpose(), predictions.row(i).transpose());
  }
  return out;
}

}  // namespace riskcal
