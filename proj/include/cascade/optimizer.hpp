#pragma once

// Threshold optimization for the analytic cascade loss, preference-grid sweeps,
// outlier smoothing of the resulting threshold grid and the early-vs-final
// architecture comparison.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "cascade/analytic.hpp"
#include "cascade/core.hpp"
#include "cascade/joint_density.hpp"

namespace cascade {

// Box margin for deferral thresholds and the upper end of abstention thresholds.
// Abstention thresholds may reach 0, which is where final-model abstention lives.
inline constexpr double kBoxMargin = 1e-4;

struct PreferenceGrid {
  std::vector<double> lambdas_cost;
  std::vector<double> lambdas_abs;

  std::size_t rows() const { return lambdas_cost.size(); }
  std::size_t cols() const { return lambdas_abs.size(); }
  // 10x10 default: lambda_c * total cost log-spaced over [1e-2, 1], lambda_a linear on [0, 1].
  static PreferenceGrid default_for(const CascadeSpec& spec, std::size_t n_cost = 10, std::size_t n_abs = 10);
};

void validate_grid(const PreferenceGrid& grid);

struct OptimizerOptions {
  int n_starts = 8;  // quantile start plus random feasible starts
  std::uint64_t seed = 0x5eedULL;
  int max_iterations = 200;
  double gradient_tol = 1e-6;
  double improvement_tol = 1e-10;
  AnalyticOptions analytic;
};

struct SweepCell {
  double lambda_cost = 0.0;
  double lambda_abstention = 0.0;
  ThresholdVector thresholds;
  double train_loss = 0.0;
  bool converged = false;
  int n_restarts_used = 0;
  AnalyticPerformance performance;
};

// Multi-start projected quasi-Newton. `extra_starts` (warm starts) are tried in
// addition to the generated ones; infeasible extras are projected first.
SweepCell optimize_thresholds(const MarkovJointModel& model, const CascadeSpec& spec, double lambda_cost,
                              double lambda_abstention, const OptimizerOptions& opts = {},
                              std::span<const ThresholdVector> extra_starts = {});

struct OracleResult {
  ThresholdVector thresholds;
  double loss = 0.0;
};

// Exhaustive search over a uniform grid of `resolution` points per threshold,
// clamped into the feasible box. Several preference pairs share one pass over
// the grid. Throws when the grid exceeds kOracleBudget metric evaluations.
std::vector<OracleResult> brute_force_oracle(const MarkovJointModel& model, const CascadeSpec& spec,
                                             std::span<const std::pair<double, double>> preferences, int resolution,
                                             const AnalyticOptions& opts = {});
OracleResult brute_force_oracle(const MarkovJointModel& model, const CascadeSpec& spec, double lambda_cost,
                                double lambda_abstention, int resolution, const AnalyticOptions& opts = {});

inline constexpr double kOracleBudget = 5e7;

struct SmoothingReport {
  double r = 0.0;
  double flagged_fraction = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> flagged;     // (row, col)
  std::vector<std::pair<std::size_t, std::size_t>> unresolved;  // flagged with every neighbour flagged
};

struct SweepResult {
  PreferenceGrid grid;
  Architecture architecture = Architecture::EarlyAbstention;
  std::vector<std::vector<SweepCell>> cells;  // [cost index][abstention index]
  double overall_loss = 0.0;
  std::optional<SmoothingReport> smoothing;
};

double mean_cell_loss(const std::vector<std::vector<SweepCell>>& cells);

// Row-major sweep; each cell is warm-started from its left and upper
// neighbours and, when given, from the same cell of `seed_solutions`.
SweepResult sweep_preference_grid(const MarkovJointModel& model, const CascadeSpec& spec, const PreferenceGrid& grid,
                                  const OptimizerOptions& opts = {}, const SweepResult* seed_solutions = nullptr);

inline constexpr double kDefaultSmoothingR = 10.0;
// Deviations at or below this are treated as equal, so numerically flat
// neighbourhoods do not flag their cells.
inline constexpr double kSmoothingNoiseFloor = 1e-12;

// Outlier replacement on the threshold grid; losses are re-evaluated at the
// replaced thresholds.
SweepResult smooth_threshold_grid(const SweepResult& result, double r, const MarkovJointModel& model,
                                  const CascadeSpec& spec, const AnalyticOptions& opts = {});

struct CellComparison {
  double lambda_cost = 0.0;
  double lambda_abstention = 0.0;
  double pct_delta_loss = 0.0;
  double pct_delta_error = 0.0;
  double pct_delta_cost = 0.0;
  double delta_abstention = 0.0;
};

struct ArchitectureComparison {
  PreferenceGrid grid;
  SweepResult early;
  SweepResult final;
  // Unsmoothed train losses, on which nesting is checked.
  SweepResult early_raw;
  SweepResult final_raw;
  std::vector<std::vector<CellComparison>> cells;
  double overall_pct_delta = 0.0;
  double mean_pct_delta_error = 0.0;
  double mean_pct_delta_cost = 0.0;
  double mean_delta_abstention = 0.0;
  std::size_t nesting_violations = 0;
};

// Slack allowed in the nesting check.
inline constexpr double kNestingTolerance = 2e-6;

ArchitectureComparison compare_architectures(const MarkovJointModel& model, const CascadeSpec& spec,
                                             const PreferenceGrid& grid, const OptimizerOptions& opts = {},
                                             double smoothing_r = kDefaultSmoothingR);

double percent_change(double early, double final);

nlohmann::json to_json(const SweepResult& r);
SweepResult sweep_result_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ArchitectureComparison& c);

}  // namespace cascade
