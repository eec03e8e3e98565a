#pragma once

// Predicting the last model's abstention from upstream raw confidences, with
// precision-recall evaluation and the resulting cost-savings arithmetic.

#include <span>
#include <vector>

#include <json.hpp>

#include "cascade/calibration.hpp"

namespace cascade {

struct AbstentionLabeling {
  double target_rate = 0.0;
  double xi_k = 0.0;
  std::vector<bool> labels;  // true = abstain (Phi_k < xi_k)

  double realized_rate() const;
};

// xi_k is the order statistic at 0-based index ceil(target * n) of the sorted
// confidences, so with distinct scores exactly ceil(target * n) fall strictly below.
AbstentionLabeling label_abstentions(std::span<const double> final_confidences, double target_rate);

struct AbstentionClassifier {
  LogisticModel model;

  // Probability of abstention from raw upstream confidences (models 1..k-1).
  double score(std::span<const double> upstream_raw) const;
};

AbstentionClassifier fit_abstention_classifier(const std::vector<std::vector<double>>& upstream_raw,
                                               const AbstentionLabeling& labeling, const LogisticOptions& opts = {});

struct PRPoint {
  double recall;
  double precision;
  double threshold;  // predict abstain when score >= threshold
};

struct PRCurve {
  std::vector<PRPoint> points;  // increasing recall; ends at recall 1 with precision = baseline
  double baseline = 0.0;
};

// One point per distinct score, thresholds in decreasing order.
PRCurve precision_recall_from_scores(std::span<const double> scores, const std::vector<bool>& labels);
PRCurve precision_recall(const AbstentionClassifier& classifier, const std::vector<std::vector<double>>& upstream_raw,
                         const std::vector<bool>& labels);

// Precision of the first point whose recall reaches `recall`.
double precision_at_recall(const PRCurve& curve, double recall);
// Step-wise area: sum over points of (recall gain) * precision.
double average_precision(const PRCurve& curve);

struct CostSavings {
  double early_fraction = 0.0;
  double total_cost_factor = 1.0;
  double new_abstention_rate = 0.0;
};

inline constexpr double kDefaultCostRatio = 0.10;

CostSavings cost_savings_estimate(double abstention_rate, double recall, double precision,
                                  double cost_ratio_small_over_full = kDefaultCostRatio);

nlohmann::json to_json(const PRCurve& c);
PRCurve pr_curve_from_json(const nlohmann::json& j);

}  // namespace cascade
