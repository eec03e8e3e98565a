#include "cascade/analytic.hpp"

#include <algorithm>
#include <cmath>

#include "cascade/error.hpp"
#include "cascade/numerics.hpp"

namespace cascade {

namespace {

using numerics::kInf;
using numerics::kLatentBound;
using numerics::normal_cdf;
using numerics::normal_pdf;

// Latent images of the thresholds: abstain below `abstain[i]`, defer up to `defer[i]`.
struct LatentBounds {
  std::vector<double> abstain;
  std::vector<double> defer;
};

LatentBounds latent_bounds(const MarkovJointModel& model, const ThresholdVector& t) {
  LatentBounds b;
  for (std::size_t i = 0; i < t.abstention.size(); ++i) b.abstain.push_back(model.transform(i).to_latent(t.abstention[i]));
  for (std::size_t i = 0; i < t.deferral.size(); ++i) b.defer.push_back(model.transform(i).to_latent(t.deferral[i]));
  return b;
}

double clip(double z) { return std::clamp(z, -kLatentBound, kLatentBound); }

// Weight of latent value z at stage i >= 1 relative to the standard normal
// density: the probability of the conditioning history given z_i = z.
class StageWeight {
 public:
  StageWeight(const MarkovJointModel& model, const LatentBounds& bounds, const AnalyticOptions& opts)
      : model_(model), bounds_(bounds), opts_(opts) {}

  double operator()(std::size_t i, double z) const {
    if (i == 1 || opts_.conditioning == ChainConditioning::PairwiseInterval) return previous_interval(i, z);
    return path(i, z);
  }

 private:
  // P(z_{i-1} in [a, b] | z_i = z); reverse transition is N(rho z, 1 - rho^2).
  double previous_interval(std::size_t i, double z) const {
    const double rho = model_.rho(i);
    const double s = std::sqrt(1.0 - rho * rho);
    const double a = bounds_.abstain[i - 1], b = bounds_.defer[i - 1];
    return std::max(0.0, normal_cdf((b - rho * z) / s) - normal_cdf((a - rho * z) / s));
  }

  // P(z_1 in D_1, ..., z_{i-1} in D_{i-1} | z_i = z). Two steps back this is a
  // bivariate normal rectangle; deeper histories integrate recursively.
  double path(std::size_t i, double z) const {
    if (i == 2) return two_step(z);
    const double rho = model_.rho(i);
    const double s = std::sqrt(1.0 - rho * rho);
    const double centre = rho * z;
    const double lo = std::max({bounds_.abstain[i - 1], centre - 9.0 * s, -kLatentBound});
    const double hi = std::min({bounds_.defer[i - 1], centre + 9.0 * s, kLatentBound});
    if (!(hi > lo)) return 0.0;
    auto f = [&](double y) { return path_or_first(i - 1, y) * normal_pdf((y - centre) / s) / s; };
    return numerics::integrate(f, lo, hi, {0.1 * opts_.quadrature_tol, 1e-13, 2000}).value;
  }

  // Given z_2 = z: z_1 ~ N(r2 z, s2^2), z_0 ~ N(r1 r2 z, 1 - r1^2 r2^2), cov r1 s2^2.
  double two_step(double z) const {
    const double r1 = model_.rho(1), r2 = model_.rho(2);
    const double s2 = std::sqrt(1.0 - r2 * r2);
    const double s0 = std::sqrt(1.0 - r1 * r1 * r2 * r2);
    const double m0 = r1 * r2 * z, m1 = r2 * z;
    const double corr = std::clamp(r1 * s2 / s0, -1.0, 1.0);
    return std::max(0.0, numerics::bvn_rectangle((bounds_.abstain[0] - m0) / s0, (bounds_.defer[0] - m0) / s0,
                                                 (bounds_.abstain[1] - m1) / s2, (bounds_.defer[1] - m1) / s2, corr));
  }

  double path_or_first(std::size_t i, double z) const { return i == 1 ? previous_interval(1, z) : path(i, z); }

  const MarkovJointModel& model_;
  const LatentBounds& bounds_;
  const AnalyticOptions& opts_;
};

struct StageMass {
  double reach = 0.0;
  double abstain = 0.0;
  double defer = 0.0;
  double answered = 0.0;
  double correct = 0.0;
};

double integrate_weighted(const StageWeight& w, const MarginalTransform& tr, std::size_t i, double lo, double hi,
                          bool times_confidence, const AnalyticOptions& opts) {
  lo = clip(lo);
  hi = clip(hi);
  if (!(hi > lo)) return 0.0;
  auto f = [&](double z) {
    const double base = normal_pdf(z) * w(i, z);
    return times_confidence ? base * tr.from_latent(z) : base;
  };
  const auto q = numerics::integrate(f, lo, hi, {opts.quadrature_tol, 1e-13, 4000});
  return q.value;
}

// Mass bookkeeping for stages 0..last (inclusive). Stage `last` is treated as
// final when it is the cascade's last model.
std::vector<StageMass> stage_masses(const MarkovJointModel& model, const CascadeSpec& spec, const ThresholdVector& t,
                                    const LatentBounds& bounds, std::size_t last, const AnalyticOptions& opts) {
  const std::size_t k = spec.size();
  std::vector<StageMass> st(last + 1);
  const auto& m0 = model.marginals()[0];
  st[0].reach = 1.0;
  st[0].abstain = m0.cdf(t.abstention[0]);
  if (k == 1) {
    st[0].answered = 1.0 - st[0].abstain;
    st[0].correct = m0.partial_mean_above(t.abstention[0]);
    return st;
  }
  st[0].defer = interval_prob(m0, t.abstention[0], t.deferral[0]);
  st[0].answered = m0.sf(t.deferral[0]);
  st[0].correct = m0.partial_mean_above(t.deferral[0]);

  const StageWeight weight(model, bounds, opts);
  for (std::size_t i = 1; i <= last; ++i) {
    const bool final = i + 1 == k;
    StageMass& s = st[i];
    s.reach = st[i - 1].defer;
    if (s.reach < kNegligibleBranchMass) break;

    double scale = 1.0;
    const bool pairwise = opts.conditioning == ChainConditioning::PairwiseInterval;
    if (pairwise && i > 1) {
      const double prev_mass = normal_cdf(bounds.defer[i - 1]) - normal_cdf(bounds.abstain[i - 1]);
      if (prev_mass < kNegligibleBranchMass) break;
      scale = s.reach / prev_mass;
    }
    const double a = bounds.abstain[i];
    const double b = final ? kInf : bounds.defer[i];
    if (i == 1 || pairwise) {
      const double lo = bounds.abstain[i - 1], hi = bounds.defer[i - 1], rho = model.rho(i);
      s.abstain = scale * numerics::bvn_rectangle(lo, hi, -kInf, a, rho);
      s.defer = final ? 0.0 : scale * numerics::bvn_rectangle(lo, hi, a, b, rho);
    } else {
      s.abstain = integrate_weighted(weight, model.transform(i), i, -kInf, a, false, opts);
      s.defer = final ? 0.0 : integrate_weighted(weight, model.transform(i), i, a, b, false, opts);
    }
    s.correct = scale * integrate_weighted(weight, model.transform(i), i, final ? a : b, kInf, true, opts);
    s.answered = std::max(0.0, s.reach - s.abstain - s.defer);
    s.correct = std::min(s.correct, s.answered);
  }
  return st;
}

AnalyticPerformance summarize(const CascadeSpec& spec, const std::vector<StageMass>& st) {
  AnalyticPerformance p;
  for (std::size_t i = 0; i < st.size(); ++i) {
    p.p_correct += st[i].correct;
    p.p_abstention += st[i].abstain;
    p.p_error_no_abstain += st[i].answered - st[i].correct;
    p.expected_cost += st[i].reach * spec.model(i).expected_cost;
  }
  p.p_error_no_abstain = std::max(0.0, p.p_error_no_abstain);
  return p;
}

void check_model_matches(const MarkovJointModel& model, const CascadeSpec& spec) {
  if (model.size() != spec.size())
    fail(ErrorKind::InvalidArgument, "joint model and cascade have different numbers of models");
}

}  // namespace

AnalyticPerformance analytic_performance(const MarkovJointModel& model, const CascadeSpec& spec,
                                         const ThresholdVector& t, const AnalyticOptions& opts) {
  check_model_matches(model, spec);
  require_valid_thresholds(spec, t);
  const auto bounds = latent_bounds(model, t);
  return summarize(spec, stage_masses(model, spec, t, bounds, spec.size() - 1, opts));
}

double analytic_loss(const MarkovJointModel& model, const CascadeSpec& spec, const ThresholdVector& t,
                     double lambda_cost, double lambda_abstention, const AnalyticOptions& opts) {
  if (!(lambda_cost >= 0.0) || !(lambda_abstention >= 0.0))
    fail(ErrorKind::InvalidArgument, "preference parameters must be nonnegative");
  const auto p = analytic_performance(model, spec, t, opts);
  return p.p_error_no_abstain + lambda_cost * p.expected_cost + lambda_abstention * p.p_abstention;
}

std::vector<AnalyticPerformance> analytic_performance_final_sweep(const MarkovJointModel& model,
                                                                  const CascadeSpec& spec, const ThresholdVector& t,
                                                                  std::span<const double> final_abstention,
                                                                  const AnalyticOptions& opts) {
  check_model_matches(model, spec);
  const std::size_t k = spec.size();
  std::vector<AnalyticPerformance> out;
  out.reserve(final_abstention.size());
  for (double xi : final_abstention)
    if (!(xi >= 0.0 && xi <= 1.0)) fail(ErrorKind::InvalidArgument, "final abstention threshold outside [0,1]");

  if (k == 1) {
    const auto& m0 = model.marginals()[0];
    for (double xi : final_abstention) {
      AnalyticPerformance p;
      p.p_abstention = m0.cdf(xi);
      p.p_correct = m0.partial_mean_above(xi);
      p.p_error_no_abstain = std::max(0.0, 1.0 - p.p_abstention - p.p_correct);
      p.expected_cost = spec.model(0).expected_cost;
      out.push_back(p);
    }
    return out;
  }

  ThresholdVector probe = t;
  probe.abstention.back() = 0.0;
  require_valid_thresholds(spec, probe);
  const auto bounds = latent_bounds(model, probe);
  auto upstream = stage_masses(model, spec, probe, bounds, k - 2, opts);
  AnalyticPerformance base;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    base.p_correct += upstream[i].correct;
    base.p_abstention += upstream[i].abstain;
    base.p_error_no_abstain += upstream[i].answered - upstream[i].correct;
    base.expected_cost += upstream[i].reach * spec.model(i).expected_cost;
  }
  const std::size_t f = k - 1;
  const double reach = upstream[f - 1].defer;
  base.expected_cost += reach * spec.model(f).expected_cost;

  double scale = 1.0;
  bool negligible = reach < kNegligibleBranchMass;
  if (!negligible && opts.conditioning == ChainConditioning::PairwiseInterval && f > 1) {
    const double prev_mass = normal_cdf(bounds.defer[f - 1]) - normal_cdf(bounds.abstain[f - 1]);
    negligible = prev_mass < kNegligibleBranchMass;
    if (!negligible) scale = reach / prev_mass;
  }

  // Partition the latent axis at every requested threshold and accumulate
  // pieces of the abstain mass from below and the correct mass from above.
  const auto& tr = model.transform(f);
  std::vector<double> cuts;
  cuts.reserve(final_abstention.size());
  for (double xi : final_abstention) cuts.push_back(clip(tr.to_latent(xi)));
  std::vector<double> knots(cuts);
  knots.push_back(-kLatentBound);
  knots.push_back(kLatentBound);
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());

  std::vector<double> mass_below(knots.size(), 0.0), correct_above(knots.size(), 0.0);
  if (!negligible) {
    const StageWeight weight(model, bounds, opts);
    std::vector<double> piece_mass(knots.size() - 1), piece_correct(knots.size() - 1);
    for (std::size_t j = 0; j + 1 < knots.size(); ++j) {
      piece_mass[j] = integrate_weighted(weight, tr, f, knots[j], knots[j + 1], false, opts);
      piece_correct[j] = integrate_weighted(weight, tr, f, knots[j], knots[j + 1], true, opts);
    }
    for (std::size_t j = 1; j < knots.size(); ++j) mass_below[j] = mass_below[j - 1] + piece_mass[j - 1];
    for (std::size_t j = knots.size() - 1; j-- > 0;) correct_above[j] = correct_above[j + 1] + piece_correct[j];
  }
  for (double c : cuts) {
    const auto j = static_cast<std::size_t>(std::lower_bound(knots.begin(), knots.end(), c) - knots.begin());
    AnalyticPerformance p = base;
    if (!negligible) {
      const double abstain = std::min(reach, scale * mass_below[j]);
      const double answered = std::max(0.0, reach - abstain);
      const double correct = std::min(answered, scale * correct_above[j]);
      p.p_abstention += abstain;
      p.p_correct += correct;
      p.p_error_no_abstain += answered - correct;
    }
    p.p_error_no_abstain = std::max(0.0, p.p_error_no_abstain);
    out.push_back(p);
  }
  return out;
}

std::vector<double> loss_gradient(const MarkovJointModel& model, const CascadeSpec& spec, const ThresholdVector& t,
                                  double lambda_cost, double lambda_abstention, const AnalyticOptions& opts) {
  require_valid_thresholds(spec, t);
  const std::size_t k = spec.size();
  const auto x = t.flatten();
  constexpr double kMaxStep = 1e-3;
  constexpr double kMinStep = 1e-8;

  std::vector<double> grad(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    double room = std::min(x[j], 1.0 - x[j]);
    if (j + 1 < k) {
      room = std::min(room, x[j] - kThresholdSeparation - x[k - 1 + j]);  // phi_j above xi_j
    } else if (const std::size_t i = j - (k - 1); i + 1 < k) {
      room = std::min(room, x[i] - kThresholdSeparation - x[j]);  // xi_i below phi_i
    }
    const double h = std::min(kMaxStep, room / 2.5);
    if (!(h >= kMinStep))
      fail(ErrorKind::InvalidArgument, "loss gradient requested on the boundary of the feasible set");

    auto loss_at = [&](double delta) {
      auto y = x;
      y[j] += delta;
      return analytic_loss(model, spec, ThresholdVector::unflatten(y, k), lambda_cost, lambda_abstention, opts);
    };
    const double coarse = (loss_at(h) - loss_at(-h)) / (2.0 * h);
    const double fine = (loss_at(0.5 * h) - loss_at(-0.5 * h)) / h;
    grad[j] = (4.0 * fine - coarse) / 3.0;
  }
  return grad;
}

}  // namespace cascade
