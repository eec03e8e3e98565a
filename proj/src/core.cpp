#include "cascade/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

#include "cascade/error.hpp"

namespace cascade {

const char* to_string(Architecture a) {
  return a == Architecture::EarlyAbstention ? "early" : "final";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "early" || s == "EarlyAbstention") return Architecture::EarlyAbstention;
  if (s == "final" || s == "FinalModelAbstention") return Architecture::FinalModelAbstention;
  fail(ErrorKind::InvalidArgument, "unknown architecture '" + s + "' (expected early|final)");
}

CascadeSpec::CascadeSpec(std::vector<ModelProfile> models, Architecture architecture)
    : models_(std::move(models)), architecture_(architecture) {
  if (models_.empty()) fail(ErrorKind::InvalidArgument, "cascade needs at least one model");
  for (std::size_t i = 0; i < models_.size(); ++i) {
    auto& m = models_[i];
    if (!(m.expected_cost >= 0.0) || !std::isfinite(m.expected_cost))
      fail(ErrorKind::InvalidArgument, "model '" + m.name + "' has invalid expected cost");
    m.position = static_cast<int>(i) + 1;
  }
}

double CascadeSpec::total_expected_cost() const {
  return std::accumulate(models_.begin(), models_.end(), 0.0,
                         [](double acc, const ModelProfile& m) { return acc + m.expected_cost; });
}

std::vector<double> ThresholdVector::flatten() const {
  std::vector<double> out(deferral);
  out.insert(out.end(), abstention.begin(), abstention.end());
  return out;
}

ThresholdVector ThresholdVector::unflatten(std::span<const double> flat, std::size_t k) {
  if (flat.size() != 2 * k - 1)
    fail(ErrorKind::InvalidArgument, "flattened threshold vector must have 2k-1 entries");
  ThresholdVector t;
  t.deferral.assign(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(k - 1));
  t.abstention.assign(flat.begin() + static_cast<std::ptrdiff_t>(k - 1), flat.end());
  return t;
}

std::optional<ThresholdViolation> validate_thresholds(const CascadeSpec& spec, const ThresholdVector& t) {
  const std::size_t k = spec.size();
  if (t.deferral.size() != k - 1 || t.abstention.size() != k) {
    std::ostringstream os;
    os << "threshold lengths (" << t.deferral.size() << " deferral, " << t.abstention.size()
       << " abstention) do not match k=" << k;
    return ThresholdViolation{ViolationKind::LengthMismatch, 0, os.str()};
  }
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (std::size_t i = 0; i < k; ++i) {
    if (i + 1 < k && !in_unit(t.deferral[i]))
      return ThresholdViolation{ViolationKind::OutOfRange, i,
                                "deferral threshold at model " + std::to_string(i + 1) + " outside [0,1]"};
    if (!in_unit(t.abstention[i]))
      return ThresholdViolation{ViolationKind::OutOfRange, i,
                                "abstention threshold at model " + std::to_string(i + 1) + " outside [0,1]"};
  }
  for (std::size_t i = 0; i + 1 < k; ++i) {
    if (!(t.abstention[i] <= t.deferral[i] - kThresholdSeparation)) {
      std::ostringstream os;
      os << "abstention threshold " << t.abstention[i] << " must lie below deferral threshold "
         << t.deferral[i] << " at model " << i + 1;
      return ThresholdViolation{ViolationKind::Ordering, i, os.str()};
    }
    if (spec.architecture() == Architecture::FinalModelAbstention && t.abstention[i] != 0.0)
      return ThresholdViolation{ViolationKind::PinnedAbstention, i,
                                "final-model abstention requires zero abstention threshold at model " +
                                    std::to_string(i + 1)};
  }
  return std::nullopt;
}

void require_valid_thresholds(const CascadeSpec& spec, const ThresholdVector& t) {
  if (auto v = validate_thresholds(spec, t)) fail(ErrorKind::InvalidArgument, v->message);
}

QueryRecord make_record(const CascadeSpec& spec, std::string id, std::vector<double> confidences,
                        std::vector<bool> correct) {
  QueryRecord r{std::move(id), std::move(confidences), std::move(correct), {}};
  r.costs.reserve(spec.size());
  for (const auto& m : spec.models()) r.costs.push_back(m.expected_cost);
  return r;
}

void require_record_matches(const CascadeSpec& spec, const QueryRecord& rec) {
  const std::size_t k = spec.size();
  if (rec.confidences.size() != k || rec.correct.size() != k || rec.costs.size() != k)
    fail(ErrorKind::InvalidArgument, "record '" + rec.query_id + "' does not have k=" + std::to_string(k) +
                                         " entries per field");
  for (double c : rec.confidences)
    if (!(c >= 0.0 && c <= 1.0))
      fail(ErrorKind::InvalidArgument, "record '" + rec.query_id + "' has confidence outside [0,1]");
}

RouteOutcome route(const CascadeSpec& spec, const ThresholdVector& t, const QueryRecord& rec) {
  const std::size_t k = spec.size();
  double cost = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    cost += rec.costs[i];
    const double conf = rec.confidences[i];
    if (conf < t.abstention[i]) return {RouteOutcome::Decision::Abstained, i, cost, false};
    // Ties with the deferral threshold defer; the last model has nowhere to defer to.
    if (i + 1 == k || conf > t.deferral[i]) return {RouteOutcome::Decision::Answered, i, cost, !rec.correct[i]};
  }
  return {RouteOutcome::Decision::Abstained, k - 1, cost, false};  // unreachable for k >= 1
}

PerformanceVector evaluate_empirical(const CascadeSpec& spec, const ThresholdVector& t,
                                     std::span<const QueryRecord> data) {
  if (data.empty()) fail(ErrorKind::InvalidArgument, "cannot evaluate a cascade on an empty dataset");
  require_valid_thresholds(spec, t);
  std::size_t errors = 0, abstentions = 0;
  double cost = 0.0;
  for (const auto& rec : data) {
    require_record_matches(spec, rec);
    const auto out = route(spec, t, rec);
    errors += out.was_error ? 1 : 0;
    abstentions += out.abstained() ? 1 : 0;
    cost += out.cumulative_cost;
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(errors) / n, cost / n, static_cast<double>(abstentions) / n};
}

double empirical_loss(const PerformanceVector& perf, double lambda_cost, double lambda_abstention) {
  if (!(lambda_cost >= 0.0) || !(lambda_abstention >= 0.0))
    fail(ErrorKind::InvalidArgument, "preference parameters must be nonnegative");
  return perf.error + lambda_cost * perf.cost + lambda_abstention * perf.abstention;
}

bool dominates(const PerformanceVector& a, const PerformanceVector& b) {
  const bool weak = a.error <= b.error && a.cost <= b.cost && a.abstention <= b.abstention;
  const bool strict = a.error < b.error || a.cost < b.cost || a.abstention < b.abstention;
  return weak && strict;
}

std::vector<PerformanceVector> pareto_front(std::span<const PerformanceVector> points) {
  // After a lexicographic sort only earlier points can dominate later ones, so
  // each candidate is checked against the front built so far.
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    return std::tuple(points[i].error, points[i].cost, points[i].abstention);
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });

  std::vector<std::size_t> front;
  std::vector<bool> keep(points.size(), false);
  for (std::size_t idx : order) {
    const bool dominated = std::any_of(front.begin(), front.end(),
                                       [&](std::size_t f) { return dominates(points[f], points[idx]); });
    if (!dominated) {
      front.push_back(idx);
      keep[idx] = true;
    }
  }
  std::vector<PerformanceVector> out;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (keep[i]) out.push_back(points[i]);
  return out;
}

}  // namespace cascade
