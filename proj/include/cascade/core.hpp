#pragma once

// Cascade domain types, routing, empirical evaluation and Pareto utilities.
//
// Indices are 0-based throughout the C++ API: model 0 is the first (cheapest)
// model of the chain. Human-facing output (CLI, error messages) uses 1-based
// positions.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cascade {

// Minimum gap enforced between an abstention threshold and its deferral threshold.
inline constexpr double kThresholdSeparation = 1e-6;

enum class Architecture { EarlyAbstention, FinalModelAbstention };

const char* to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelProfile {
  std::string name;
  double expected_cost = 0.0;
  int position = 0;  // 1-based place in the chain
};

class CascadeSpec {
 public:
  // Positions are assigned 1..k from the order of `models`.
  CascadeSpec(std::vector<ModelProfile> models, Architecture architecture);

  std::size_t size() const { return models_.size(); }
  const std::vector<ModelProfile>& models() const { return models_; }
  const ModelProfile& model(std::size_t i) const { return models_.at(i); }
  Architecture architecture() const { return architecture_; }
  double total_expected_cost() const;
  CascadeSpec with_architecture(Architecture a) const { return CascadeSpec(models_, a); }

 private:
  std::vector<ModelProfile> models_;
  Architecture architecture_;
};

struct ThresholdVector {
  std::vector<double> deferral;    // phi_0 .. phi_{k-2}
  std::vector<double> abstention;  // xi_0 .. xi_{k-1}

  bool operator==(const ThresholdVector&) const = default;
  // Flattened (phi..., xi...) layout of length 2k-1.
  std::vector<double> flatten() const;
  static ThresholdVector unflatten(std::span<const double> flat, std::size_t k);
};

enum class ViolationKind { LengthMismatch, OutOfRange, Ordering, PinnedAbstention };

struct ThresholdViolation {
  ViolationKind kind;
  std::size_t index;  // 0-based model index; 0 for length mismatches
  std::string message;
};

std::optional<ThresholdViolation> validate_thresholds(const CascadeSpec& spec, const ThresholdVector& t);
// Throws Error(InvalidArgument) carrying the violation message.
void require_valid_thresholds(const CascadeSpec& spec, const ThresholdVector& t);

struct QueryRecord {
  std::string query_id;
  std::vector<double> confidences;
  std::vector<bool> correct;
  std::vector<double> costs;

  bool operator==(const QueryRecord&) const = default;
};

// Builds a record whose realized costs default to the cascade's expected costs.
QueryRecord make_record(const CascadeSpec& spec, std::string id, std::vector<double> confidences,
                        std::vector<bool> correct);

void require_record_matches(const CascadeSpec& spec, const QueryRecord& rec);

struct RouteOutcome {
  enum class Decision { Answered, Abstained };
  Decision decision;
  std::size_t model;  // deciding model (0-based)
  double cumulative_cost = 0.0;
  bool was_error = false;

  bool abstained() const { return decision == Decision::Abstained; }
};

RouteOutcome route(const CascadeSpec& spec, const ThresholdVector& t, const QueryRecord& rec);

struct PerformanceVector {
  double error = 0.0;
  double cost = 0.0;
  double abstention = 0.0;

  bool operator==(const PerformanceVector&) const = default;
};

PerformanceVector evaluate_empirical(const CascadeSpec& spec, const ThresholdVector& t,
                                     std::span<const QueryRecord> data);

double empirical_loss(const PerformanceVector& perf, double lambda_cost, double lambda_abstention);

bool dominates(const PerformanceVector& a, const PerformanceVector& b);

// Non-dominated subset in input order; exact duplicates of a front point are all kept.
std::vector<PerformanceVector> pareto_front(std::span<const PerformanceVector> points);

}  // namespace cascade
