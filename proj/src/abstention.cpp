#include "cascade/abstention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cascade/error.hpp"

namespace cascade {

double AbstentionLabeling::realized_rate() const {
  if (labels.empty()) return 0.0;
  return static_cast<double>(std::count(labels.begin(), labels.end(), true)) / static_cast<double>(labels.size());
}

AbstentionLabeling label_abstentions(std::span<const double> final_confidences, double target_rate) {
  if (!(target_rate > 0.0 && target_rate < 1.0)) fail(ErrorKind::InvalidArgument, "target rate must lie in (0,1)");
  const std::size_t n = final_confidences.size();
  if (n < 20) fail(ErrorKind::InvalidArgument, "abstention labelling needs at least 20 scores");
  std::vector<double> sorted(final_confidences.begin(), final_confidences.end());
  for (double v : sorted)
    if (!std::isfinite(v)) fail(ErrorKind::InvalidArgument, "non-finite confidence");
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back())
    fail(ErrorKind::Degenerate, "constant final-model confidences cannot be split by a quantile");

  // Guard against target * n landing a rounding error above an integer.
  const auto idx = static_cast<std::size_t>(std::ceil(target_rate * static_cast<double>(n) - 1e-9));
  AbstentionLabeling out;
  out.target_rate = target_rate;
  out.xi_k = idx < n ? sorted[idx] : std::nextafter(sorted.back(), std::numeric_limits<double>::infinity());
  out.labels.reserve(n);
  for (double v : final_confidences) out.labels.push_back(v < out.xi_k);
  return out;
}

double AbstentionClassifier::score(std::span<const double> upstream_raw) const {
  if (upstream_raw.size() != model.slopes.size())
    fail(ErrorKind::InvalidArgument, "classifier expects one raw confidence per upstream model");
  std::vector<double> f;
  f.reserve(upstream_raw.size());
  for (double p : upstream_raw) f.push_back(transform_raw(p));
  return model.probability(f);
}

AbstentionClassifier fit_abstention_classifier(const std::vector<std::vector<double>>& upstream_raw,
                                               const AbstentionLabeling& labeling, const LogisticOptions& opts) {
  if (upstream_raw.size() != labeling.labels.size())
    fail(ErrorKind::InvalidArgument, "upstream confidences and labels differ in length");
  std::vector<std::vector<double>> features;
  features.reserve(upstream_raw.size());
  for (const auto& row : upstream_raw) {
    std::vector<double> f;
    for (double p : row) {
      if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::InvalidArgument, "raw confidence outside [0,1]");
      f.push_back(transform_raw(p));
    }
    features.push_back(std::move(f));
  }
  return {fit_logistic(features, labeling.labels, opts)};
}

PRCurve precision_recall_from_scores(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    fail(ErrorKind::InvalidArgument, "scores and labels must be nonempty and of equal length");
  const auto positives = static_cast<double>(std::count(labels.begin(), labels.end(), true));
  if (positives == 0.0) fail(ErrorKind::Degenerate, "precision-recall needs at least one positive label");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  PRCurve curve;
  curve.baseline = positives / static_cast<double>(labels.size());
  double tp = 0.0, predicted = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    tp += labels[order[r]] ? 1.0 : 0.0;
    predicted += 1.0;
    const double s = scores[order[r]];
    if (r + 1 < order.size() && scores[order[r + 1]] == s) continue;
    curve.points.push_back({tp / positives, tp / predicted, s});
  }
  return curve;
}

PRCurve precision_recall(const AbstentionClassifier& classifier, const std::vector<std::vector<double>>& upstream_raw,
                         const std::vector<bool>& labels) {
  std::vector<double> scores;
  scores.reserve(upstream_raw.size());
  for (const auto& row : upstream_raw) scores.push_back(classifier.score(row));
  return precision_recall_from_scores(scores, labels);
}

double precision_at_recall(const PRCurve& curve, double recall) {
  for (const auto& p : curve.points)
    if (p.recall >= recall) return p.precision;
  fail(ErrorKind::InvalidArgument, "requested recall is not reached by the curve");
}

double average_precision(const PRCurve& curve) {
  double ap = 0.0, prev = 0.0;
  for (const auto& p : curve.points) {
    ap += (p.recall - prev) * p.precision;
    prev = p.recall;
  }
  return ap;
}

CostSavings cost_savings_estimate(double abstention_rate, double recall, double precision, double cost_ratio) {
  if (!(abstention_rate > 0.0 && abstention_rate <= 1.0)) fail(ErrorKind::InvalidArgument, "abstention rate must lie in (0,1]");
  if (!(recall >= 0.0 && recall <= 1.0)) fail(ErrorKind::InvalidArgument, "recall must lie in [0,1]");
  if (!(precision > 0.0 && precision <= 1.0)) fail(ErrorKind::InvalidArgument, "precision must lie in (0,1]");
  if (!(cost_ratio > 0.0 && cost_ratio <= 1.0)) fail(ErrorKind::InvalidArgument, "cost ratio must lie in (0,1]");
  const double correct = abstention_rate * recall;
  const double incorrect = correct * (1.0 - precision) / precision;
  CostSavings out;
  out.early_fraction = correct + incorrect;
  out.total_cost_factor = (1.0 - out.early_fraction) + out.early_fraction * cost_ratio;
  out.new_abstention_rate = abstention_rate + incorrect;
  return out;
}

nlohmann::json to_json(const PRCurve& c) {
  nlohmann::json j;
  j["baseline"] = c.baseline;
  auto pts = nlohmann::json::array();
  for (const auto& p : c.points) pts.push_back({{"recall", p.recall}, {"precision", p.precision}, {"threshold", p.threshold}});
  j["points"] = std::move(pts);
  return j;
}

PRCurve pr_curve_from_json(const nlohmann::json& j) {
  try {
    PRCurve c;
    c.baseline = j.at("baseline").get<double>();
    for (const auto& p : j.at("points"))
      c.points.push_back({p.at("recall").get<double>(), p.at("precision").get<double>(), p.at("threshold").get<double>()});
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, std::string("malformed precision-recall curve: ") + e.what());
  }
}

}  // namespace cascade
