#pragma once

// Markov approximation of the joint law of per-model confidences:
// beta-mixture marginals chained by Gaussian pair copulas.
//
// Every marginal is also viewed through its latent Gaussian coordinate
// z = Phi^{-1}(F(x)). Under the Gaussian copula the latent chain z_1, ..., z_k
// is a standard-normal AR(1) process, which is what the analytic metrics and
// the sampler work with.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cascade {

inline constexpr int kMaxMixtureComponents = 3;
inline constexpr double kMaxCopulaRho = 0.999;

struct BetaMixture {
  std::vector<double> weights;
  std::vector<double> alphas;
  std::vector<double> betas;

  std::size_t components() const { return weights.size(); }
  double pdf(double x) const;
  double log_pdf(double x) const;
  double cdf(double x) const;
  double sf(double x) const;
  double mean() const;
  // E[X 1{X > t}], closed form through the incomplete beta function.
  double partial_mean_above(double t) const;

  bool operator==(const BetaMixture&) const = default;
};

// Throws Error(InvalidArgument) when weights or shapes violate the invariants.
void validate_mixture(const BetaMixture& mix);

double interval_prob(const BetaMixture& mix, double lo, double hi);

// Monotone map between a marginal and its latent standard-normal coordinate.
class MarginalTransform {
 public:
  explicit MarginalTransform(BetaMixture mix);

  const BetaMixture& mixture() const { return mix_; }
  // z = Phi^{-1}(F(x)); -inf at x <= 0 and +inf at x >= 1.
  double to_latent(double x) const;
  // x = F^{-1}(Phi(z)) via a cubic Hermite table (|error| <= ~1e-11 on the
  // truncated latent range), exact root finding outside it.
  double from_latent(double z) const;
  // Root-finding inverse of to_latent, used to build the table.
  double from_latent_exact(double z) const;
  std::size_t table_size() const { return nodes_.size(); }

 private:
  struct Node {
    double z, x, dxdz;
  };
  Node make_node(double z) const;

  BetaMixture mix_;
  std::vector<Node> nodes_;
};

enum class CopulaFamily { Gaussian };

struct PairCopula {
  CopulaFamily family = CopulaFamily::Gaussian;
  double rho = 0.0;

  bool operator==(const PairCopula&) const = default;
};

class MarkovJointModel {
 public:
  MarkovJointModel(std::vector<BetaMixture> marginals, std::vector<PairCopula> copulas);

  std::size_t size() const { return marginals_.size(); }
  const std::vector<BetaMixture>& marginals() const { return marginals_; }
  const std::vector<PairCopula>& copulas() const { return copulas_; }
  // Correlation between latent coordinates of models i-1 and i (i >= 1).
  double rho(std::size_t i) const { return copulas_.at(i - 1).rho; }
  const MarginalTransform& transform(std::size_t i) const { return (*transforms_).at(i); }

  bool operator==(const MarkovJointModel& o) const {
    return marginals_ == o.marginals_ && copulas_ == o.copulas_;
  }

 private:
  std::vector<BetaMixture> marginals_;
  std::vector<PairCopula> copulas_;
  std::shared_ptr<const std::vector<MarginalTransform>> transforms_;
};

struct EmOptions {
  int restarts = 5;
  int max_iterations = 500;
  double rel_tol = 1e-8;
  std::uint64_t seed = 0x5eedULL;
};

struct BetaMixtureFit {
  BetaMixture mixture;
  double log_likelihood = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // log-likelihood after every EM iteration of the winning restart
};

// EM for a fixed component count. Samples must lie in the open unit interval.
BetaMixtureFit fit_beta_mixture(std::span<const double> samples, int components, const EmOptions& opts = {});

double bic(double log_likelihood, int components, std::size_t n);

struct MixtureSelection {
  BetaMixtureFit best;
  std::vector<std::pair<int, double>> bic_by_components;
  std::vector<std::pair<int, double>> log_likelihood_by_components;
};

// BIC over 1..max_components; ties go to the smaller mixture.
MixtureSelection select_beta_mixture(std::span<const double> samples, int max_components = kMaxMixtureComponents,
                                     const EmOptions& opts = {});

// Kendall's tau-b in O(n log n).
double kendall_tau(std::span<const double> x, std::span<const double> y);

// Gaussian copula by Kendall-tau inversion rho = sin(pi tau / 2), clamped to +-0.999.
PairCopula fit_pair_copula(std::span<const std::pair<double, double>> pseudo_observations);

struct JointFitOptions {
  std::optional<int> components;  // fixed m; BIC selection when empty
  EmOptions em;
};

struct JointFit {
  MarkovJointModel model;
  std::vector<MixtureSelection> marginal_fits;
};

// columns[i] holds the confidences of model i across queries.
JointFit fit_markov_model(const std::vector<std::vector<double>>& columns, const JointFitOptions& opts = {});

struct Interval {
  double lo;
  double hi;
};

// P(Phi_i in target | Phi_{i-1} in given), i >= 1, via the Gaussian copula rectangle.
double conditional_interval_prob(const MarkovJointModel& model, std::size_t i, Interval target, Interval given);

// E[Phi_i 1{Phi_i > threshold} | Phi_{i-1} in given]; unconditional when `given` is empty.
double partial_expectation(const MarkovJointModel& model, std::size_t i, double threshold,
                           std::optional<Interval> given = std::nullopt);

// n draws of the full confidence vector; deterministic in seed.
std::vector<std::vector<double>> sample_joint(const MarkovJointModel& model, std::size_t n, std::uint64_t seed);

nlohmann::json to_json(const MarkovJointModel& model);
MarkovJointModel markov_model_from_json(const nlohmann::json& j);

}  // namespace cascade
