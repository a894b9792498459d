#pragma once

// Upper confidence bounds on the mean of bounded i.i.d. samples.
//
// The betting bound follows the hedged-capital construction of
// Waudby-Smith and Ramdas as used for risk-controlling prediction sets:
//
//   mu_i     = (1/2 + sum_{j<=i} L_j) / (i + 1)
//   sigma2_i = (1/4 + sum_{j<=i} (L_j - mu_j)^2) / (i + 1),   sigma2_0 = 1/4
//   nu_i     = min(1, sqrt(2 log(1/delta) / (n sigma2_{i-1})))
//   K_i(R)   = prod_{j<=i} (1 + nu_j (R - L_j))
//
// and the bound is inf{R in [0,1] : max_i K_i(R) > 1/delta}. Each factor is
// nonnegative and increasing in R, so max_i K_i(R) is nondecreasing and the
// infimum can be bracketed by bisection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "riskcal/error.hpp"

namespace riskcal {

// Samples with a range [lower, upper] known before seeing the data.
class BoundedSampleSequence {
 public:
  BoundedSampleSequence(std::vector<double> values, double lower, double upper)
      : values_(std::move(values)), lower_(lower), upper_(upper) {
    detail::require(std::isfinite(lower_) && std::isfinite(upper_) && lower_ < upper_,
                    "bounded sequence: need finite lower < upper");
    detail::require(!values_.empty(), "bounded sequence: need at least one sample");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const double v = values_[i];
      if (!(v >= lower_ && v <= upper_)) {
        throw InvalidInput("bounded sequence: sample " + std::to_string(i) + " = " + std::to_string(v) +
                           " outside [" + std::to_string(lower_) + ", " + std::to_string(upper_) + "]");
      }
    }
  }

  const std::vector<double>& values() const noexcept { return values_; }
  double lower() const noexcept { return lower_; }
  double upper() const noexcept { return upper_; }
  std::size_t size() const noexcept { return values_.size(); }

  double mean() const {
    return std::accumulate(values_.begin(), values_.end(), 0.0) / static_cast<double>(values_.size());
  }

  friend bool operator==(const BoundedSampleSequence&, const BoundedSampleSequence&) = default;

 private:
  std::vector<double> values_;
  double lower_;
  double upper_;
};

enum class UcbMethod { Wsr, Hoeffding };

inline const char* to_string(UcbMethod m) { return m == UcbMethod::Wsr ? "WSR" : "HOEFFDING"; }

inline UcbMethod parse_ucb_method(const std::string& s) {
  if (s == "WSR" || s == "wsr") return UcbMethod::Wsr;
  if (s == "HOEFFDING" || s == "hoeffding") return UcbMethod::Hoeffding;
  throw InvalidInput("unknown UCB method '" + s + "'");
}

struct UcbSpec {
  UcbMethod method = UcbMethod::Wsr;
  double delta = 0.1;
  double bisection_tolerance = 1e-6;

  void validate() const {
    detail::require(delta > 0.0 && delta < 1.0, "UCB delta must lie in (0, 1)");
    detail::require(bisection_tolerance > 0.0, "bisection tolerance must be positive");
  }
};

namespace detail {

inline void check_delta(double delta) { require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)"); }

// Betting fractions nu_1..nu_n; they depend on the data only, not on R.
inline std::vector<double> wsr_bets(std::span<const double> losses, double delta) {
  const double n = static_cast<double>(losses.size());
  const double log_inv_delta = std::log(1.0 / delta);
  std::vector<double> nu(losses.size());
  double sum = 0.0;
  double sq = 0.0;
  double sigma2_prev = 0.25;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    nu[i] = std::min(1.0, std::sqrt(2.0 * log_inv_delta / (n * sigma2_prev)));
    sum += losses[i];
    const double count = static_cast<double>(i + 2);
    const double mu = (0.5 + sum) / count;
    sq += (losses[i] - mu) * (losses[i] - mu);
    sigma2_prev = (0.25 + sq) / count;
  }
  return nu;
}

// True when max_i K_i(R) exceeds 1/delta (R is rejected as the mean).
inline bool wsr_rejects(std::span<const double> losses, std::span<const double> nu, double r, double log_threshold) {
  double log_capital = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const double factor = 1.0 + nu[i] * (r - losses[i]);
    if (factor <= 0.0) return false;  // capital is zero from here on
    log_capital += std::log(factor);
    if (log_capital > log_threshold) return true;
  }
  return false;
}

}  // namespace detail

// Betting UCB for samples in [0, 1]. The returned value is the upper end of
// the final bisection bracket, so it never undercuts the exact infimum.
inline double wsr_ucb(std::span<const double> samples, double delta, double tolerance = 1e-6) {
  detail::check_delta(delta);
  detail::require(!samples.empty(), "wsr_ucb: empty sample sequence");
  detail::require(tolerance > 0.0, "wsr_ucb: tolerance must be positive");
  for (double v : samples) detail::require(v >= 0.0 && v <= 1.0, "wsr_ucb: samples must lie in [0, 1]");

  const auto nu = detail::wsr_bets(samples, delta);
  const double log_threshold = std::log(1.0 / delta);
  if (!detail::wsr_rejects(samples, nu, 1.0, log_threshold)) return 1.0;
  double lo = 0.0;
  double hi = 1.0;
  while (hi - lo > tolerance) {
    const double mid = 0.5 * (lo + hi);
    if (detail::wsr_rejects(samples, nu, mid, log_threshold)) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

inline double wsr_ucb(const BoundedSampleSequence& samples, double delta, double tolerance = 1e-6) {
  detail::require(samples.lower() >= 0.0 && samples.upper() <= 1.0, "wsr_ucb: sequence range must be within [0, 1]");
  return wsr_ucb(std::span<const double>(samples.values()), delta, tolerance);
}

inline double hoeffding_ucb(const BoundedSampleSequence& samples, double delta) {
  detail::check_delta(delta);
  const double n = static_cast<double>(samples.size());
  return samples.mean() + (samples.upper() - samples.lower()) * std::sqrt(std::log(1.0 / delta) / (2.0 * n));
}

// Betting UCB for samples on an arbitrary known range [a, b], computed in the
// unit-interval image of x -> (x - a) / (b - a) and mapped back. The tolerance
// is in the units of the original samples.
inline double rescaled_wsr_ucb(const BoundedSampleSequence& samples, double delta, double tolerance = 1e-6) {
  const double a = samples.lower();
  const double width = samples.upper() - a;
  if (a == 0.0 && width == 1.0) return wsr_ucb(samples, delta, tolerance);
  std::vector<double> unit(samples.size());
  for (std::size_t i = 0; i < unit.size(); ++i) {
    unit[i] = std::clamp((samples.values()[i] - a) / width, 0.0, 1.0);
  }
  return a + width * wsr_ucb(std::span<const double>(unit), delta, tolerance / width);
}

inline double upper_confidence_bound(const BoundedSampleSequence& samples, const UcbSpec& spec) {
  spec.validate();
  switch (spec.method) {
    case UcbMethod::Wsr:
      return rescaled_wsr_ucb(samples, spec.delta, spec.bisection_tolerance);
    case UcbMethod::Hoeffding:
      return hoeffding_ucb(samples, spec.delta);
  }
  throw InvalidInput("unknown UCB method");
}

}  // namespace riskcal
