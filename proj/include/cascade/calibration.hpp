#pragma once

// Logistic calibration of raw token-level confidence signals.

#include <span>
#include <utility>
#include <vector>

namespace cascade {

inline constexpr double kRawClampEps = 1e-6;
inline constexpr double kCalibratedClampEps = 1e-4;
inline constexpr double kLogisticL2 = 1e-4;

// log(1 / (1 - p_raw)) with p_raw clamped to [eps, 1 - eps].
double transform_raw(double p_raw, double clamp_eps = kRawClampEps);

struct LogisticOptions {
  double l2 = kLogisticL2;  // penalty on the slopes, not the intercept
  double gradient_tol = 1e-8;
  int max_iterations = 500;
};

struct LogisticModel {
  double intercept = 0.0;
  std::vector<double> slopes;
  int iterations = 0;
  bool converged = false;

  double linear(std::span<const double> features) const;
  double probability(std::span<const double> features) const;
};

// Penalized maximum likelihood by Newton's method on the mean log-loss
// plus 0.5 * l2 * |slopes|^2. Rows of `features` share one dimension.
// Throws Error(Degenerate) when the labels contain a single class.
LogisticModel fit_logistic(const std::vector<std::vector<double>>& features, const std::vector<bool>& labels,
                           const LogisticOptions& opts = {});

struct CalibrationModel {
  double intercept = 0.0;
  double slope = 0.0;
  double clamp_eps = kRawClampEps;
  double output_eps = kCalibratedClampEps;

  static CalibrationModel identity_fallback() { return {0.0, 0.0, kRawClampEps, kCalibratedClampEps}; }
};

// Requires at least 10 examples containing both labels.
CalibrationModel fit_calibration(std::span<const std::pair<double, bool>> train, const LogisticOptions& opts = {});

double apply_calibration(const CalibrationModel& m, double p_raw);

double brier_score(std::span<const double> probabilities, const std::vector<bool>& labels);

}  // namespace cascade
