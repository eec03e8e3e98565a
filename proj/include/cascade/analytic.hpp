#pragma once

// Closed-form cascade metrics under a fitted MarkovJointModel.
//
// Each model i is reached with some probability and then splits its mass into
// answer (Phi_i > phi_i, or Phi_i >= xi_k at the last model), abstain
// (Phi_i < xi_i) and defer (xi_i <= Phi_i <= phi_i). Correct answers carry
// mass E[Phi_i 1{answer}], i.e. calibrated confidence is read as the
// probability of being correct.

#include <span>
#include <vector>

#include "cascade/core.hpp"
#include "cascade/joint_density.hpp"

namespace cascade {

// How a stage conditions on the deferral history.
//  ExactPath:         on the full history {Phi_1 in I_1, ..., Phi_{i-1} in I_{i-1}},
//                     integrating the latent Markov chain; exact for the model.
//  PairwiseInterval:  on {Phi_{i-1} in I_{i-1}} only, chaining the factors
//                     P_1 * prod P_{j-1,j} (the classic product form).
// Both coincide for two-model cascades.
enum class ChainConditioning { ExactPath, PairwiseInterval };

struct AnalyticOptions {
  ChainConditioning conditioning = ChainConditioning::ExactPath;
  double quadrature_tol = 1e-13;
};

struct AnalyticPerformance {
  double p_correct = 0.0;
  double expected_cost = 0.0;
  double p_abstention = 0.0;
  double p_error_no_abstain = 0.0;

  PerformanceVector as_performance() const { return {p_error_no_abstain, expected_cost, p_abstention}; }
};

// Branches whose reach probability falls below this contribute nothing.
inline constexpr double kNegligibleBranchMass = 1e-12;

AnalyticPerformance analytic_performance(const MarkovJointModel& model, const CascadeSpec& spec,
                                         const ThresholdVector& t, const AnalyticOptions& opts = {});

double analytic_loss(const MarkovJointModel& model, const CascadeSpec& spec, const ThresholdVector& t,
                     double lambda_cost, double lambda_abstention, const AnalyticOptions& opts = {});

// Same metrics for one fixed prefix (all deferral thresholds and xi_1..xi_{k-1})
// and many values of the final abstention threshold, sharing upstream work.
// `t.abstention.back()` is ignored.
std::vector<AnalyticPerformance> analytic_performance_final_sweep(const MarkovJointModel& model,
                                                                  const CascadeSpec& spec, const ThresholdVector& t,
                                                                  std::span<const double> final_abstention,
                                                                  const AnalyticOptions& opts = {});

// d loss / d (phi_1..phi_{k-1}, xi_1..xi_k) by Richardson-extrapolated central
// differences of analytic_loss. Requires a strictly interior point:
// coordinates in (0,1) and xi_i < phi_i - separation. Throws otherwise.
std::vector<double> loss_gradient(const MarkovJointModel& model, const CascadeSpec& spec, const ThresholdVector& t,
                                  double lambda_cost, double lambda_abstention, const AnalyticOptions& opts = {});

}  // namespace cascade
