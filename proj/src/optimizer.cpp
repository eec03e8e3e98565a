#include "cascade/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "cascade/error.hpp"
#include "cascade/numerics.hpp"

namespace cascade {

namespace {

double loss_of(const AnalyticPerformance& p, double lc, double la) {
  return p.p_error_no_abstain + lc * p.expected_cost + la * p.p_abstention;
}

void require_preferences(double lc, double la) {
  if (!(lc >= 0.0) || !(la >= 0.0) || !std::isfinite(lc) || !std::isfinite(la))
    fail(ErrorKind::InvalidArgument, "preference parameters must be finite and nonnegative");
}

bool lex_less(const ThresholdVector& a, const ThresholdVector& b) {
  const auto fa = a.flatten(), fb = b.flatten();
  return std::lexicographical_compare(fa.begin(), fa.end(), fb.begin(), fb.end());
}

// Decision vector u = (phi_0..phi_{k-2}, t_0..t_{k-2}, xi_{k-1}) with
// xi_i = t_i (phi_i - separation). The t block is absent for final-model
// abstention, which pins xi_i = 0. All constraints become box constraints.
class Problem {
 public:
  Problem(const MarkovJointModel& model, const CascadeSpec& spec, double lc, double la, const OptimizerOptions& opts)
      : model_(model), spec_(spec), lc_(lc), la_(la), opts_(opts), k_(spec.size()),
        early_(spec.architecture() == Architecture::EarlyAbstention) {}

  std::size_t dim() const { return (k_ - 1) * (early_ ? 2 : 1) + 1; }

  double lower(std::size_t j) const { return is_phi(j) ? kBoxMargin : 0.0; }
  double upper(std::size_t j) const { return is_ratio(j) ? 1.0 : 1.0 - kBoxMargin; }

  ThresholdVector decode(std::span<const double> u) const {
    ThresholdVector t;
    t.deferral.assign(u.begin(), u.begin() + static_cast<std::ptrdiff_t>(k_ - 1));
    for (std::size_t i = 0; i + 1 < k_; ++i)
      t.abstention.push_back(early_ ? u[k_ - 1 + i] * (t.deferral[i] - kThresholdSeparation) : 0.0);
    t.abstention.push_back(u.back());
    return t;
  }

  std::vector<double> encode(const ThresholdVector& t) const {
    std::vector<double> u(dim());
    for (std::size_t i = 0; i + 1 < k_; ++i) {
      u[i] = std::clamp(t.deferral.at(i), lower(i), upper(i));
      if (early_) {
        const double room = u[i] - kThresholdSeparation;
        u[k_ - 1 + i] = std::clamp(t.abstention.at(i) / room, 0.0, 1.0);
      }
    }
    u.back() = std::clamp(t.abstention.at(k_ - 1), lower(dim() - 1), upper(dim() - 1));
    return u;
  }

  void project(std::vector<double>& u) const {
    for (std::size_t j = 0; j < u.size(); ++j) u[j] = std::clamp(u[j], lower(j), upper(j));
  }

  AnalyticPerformance performance(std::span<const double> u) const {
    return analytic_performance(model_, spec_, decode(u), opts_.analytic);
  }
  double loss(std::span<const double> u) const { return loss_of(performance(u), lc_, la_); }

  // Central differences, one-sided three-point stencils at the box faces.
  std::vector<double> gradient(std::vector<double> u, double f0) const {
    constexpr double h = 1e-6;
    std::vector<double> g(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) {
      const double x = u[j];
      auto at = [&](double v) {
        u[j] = v;
        const double f = loss(u);
        u[j] = x;
        return f;
      };
      if (x - h >= lower(j) && x + h <= upper(j)) {
        g[j] = (at(x + h) - at(x - h)) / (2.0 * h);
      } else if (x + 2.0 * h <= upper(j)) {
        g[j] = (-3.0 * f0 + 4.0 * at(x + h) - at(x + 2.0 * h)) / (2.0 * h);
      } else {
        g[j] = (3.0 * f0 - 4.0 * at(x - h) + at(x - 2.0 * h)) / (2.0 * h);
      }
    }
    return g;
  }

 private:
  bool is_phi(std::size_t j) const { return j + 1 < k_; }
  bool is_ratio(std::size_t j) const { return early_ && j + 1 >= k_ && j + 1 < dim(); }

  const MarkovJointModel& model_;
  const CascadeSpec& spec_;
  double lc_, la_;
  const OptimizerOptions& opts_;
  std::size_t k_;
  bool early_;
};

struct RunResult {
  std::vector<double> u;
  double loss;
  bool converged;
};

// Projected BFGS with Armijo backtracking. Coordinates pinned at a face with
// the gradient pointing outward are frozen for the step.
RunResult minimize(const Problem& p, std::vector<double> u, const OptimizerOptions& opts) {
  const std::size_t n = u.size();
  p.project(u);
  double f = p.loss(u);
  auto g = p.gradient(u, f);
  std::vector<double> hinv(n * n, 0.0);
  auto reset = [&] {
    std::fill(hinv.begin(), hinv.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) hinv[i * n + i] = 1.0;
  };
  reset();
  bool identity = true;

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    std::vector<bool> free(n);
    double pg = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const bool pinned = (u[j] <= p.lower(j) && g[j] > 0.0) || (u[j] >= p.upper(j) && g[j] < 0.0);
      free[j] = !pinned;
      if (free[j]) pg = std::max(pg, std::abs(g[j]));
    }
    if (pg <= opts.gradient_tol) return {u, f, true};

    std::vector<double> d(n, 0.0);
    double slope = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!free[i]) continue;
      for (std::size_t j = 0; j < n; ++j)
        if (free[j]) d[i] -= hinv[i * n + j] * g[j];
      slope += d[i] * g[i];
    }
    if (!(slope < 0.0)) {
      reset();
      identity = true;
      for (std::size_t j = 0; j < n; ++j) d[j] = free[j] ? -g[j] : 0.0;
    }
    double dmax = 0.0;
    for (double v : d) dmax = std::max(dmax, std::abs(v));
    double alpha = dmax > 0.5 ? 0.5 / dmax : 1.0;

    std::vector<double> next(n);
    double fn = f;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls, alpha *= 0.5) {
      for (std::size_t j = 0; j < n; ++j) next[j] = u[j] + alpha * d[j];
      p.project(next);
      double decrease = 0.0;
      for (std::size_t j = 0; j < n; ++j) decrease += g[j] * (next[j] - u[j]);
      fn = p.loss(next);
      if (fn < f && fn <= f + 1e-4 * decrease) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (!identity) {
        reset();
        identity = true;
        continue;
      }
      // No decrease even along steepest descent: zero improvement this iteration.
      return {u, f, true};
    }

    const auto gn = p.gradient(next, fn);
    std::vector<double> s(n), y(n);
    double sy = 0.0, ss = 0.0, yy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = next[j] - u[j];
      y[j] = gn[j] - g[j];
      sy += s[j] * y[j];
      ss += s[j] * s[j];
      yy += y[j] * y[j];
    }
    const double improvement = f - fn;
    u = next;
    f = fn;
    g = gn;
    if (improvement < opts.improvement_tol) return {u, f, true};

    if (sy > 1e-10 * std::sqrt(ss * yy)) {
      // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
      const double rho = 1.0 / sy;
      std::vector<double> hy(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) hy[i] += hinv[i * n + j] * y[j];
      double yhy = 0.0;
      for (std::size_t j = 0; j < n; ++j) yhy += y[j] * hy[j];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          hinv[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
      identity = false;
    }
  }
  return {u, f, false};
}

double marginal_quantile(const MarkovJointModel& model, std::size_t i, double q) {
  return model.transform(i).from_latent(numerics::normal_quantile(q));
}

}  // namespace

// ---------------------------------------------------------------------------
// Grid

void validate_grid(const PreferenceGrid& grid) {
  for (const auto* axis : {&grid.lambdas_cost, &grid.lambdas_abs}) {
    if (axis->empty()) fail(ErrorKind::InvalidArgument, "preference grid axes must be nonempty");
    for (std::size_t i = 0; i < axis->size(); ++i) {
      const double v = (*axis)[i];
      if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorKind::InvalidArgument, "preference values must be nonnegative");
      if (i > 0 && !(v > (*axis)[i - 1]))
        fail(ErrorKind::InvalidArgument, "preference grid axes must be strictly increasing");
    }
  }
}

PreferenceGrid PreferenceGrid::default_for(const CascadeSpec& spec, std::size_t n_cost, std::size_t n_abs) {
  if (n_cost < 1 || n_abs < 1) fail(ErrorKind::InvalidArgument, "grid dimensions must be positive");
  const double total = spec.total_expected_cost();
  if (!(total > 0.0)) fail(ErrorKind::InvalidArgument, "default grid needs a positive total cost");
  PreferenceGrid g;
  for (std::size_t i = 0; i < n_cost; ++i) {
    const double e = n_cost == 1 ? -1.0 : -2.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n_cost - 1);
    g.lambdas_cost.push_back(std::pow(10.0, e) / total);
  }
  for (std::size_t j = 0; j < n_abs; ++j)
    g.lambdas_abs.push_back(n_abs == 1 ? 0.5 : static_cast<double>(j) / static_cast<double>(n_abs - 1));
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer

SweepCell optimize_thresholds(const MarkovJointModel& model, const CascadeSpec& spec, double lambda_cost,
                              double lambda_abstention, const OptimizerOptions& opts,
                              std::span<const ThresholdVector> extra_starts) {
  require_preferences(lambda_cost, lambda_abstention);
  if (model.size() != spec.size())
    fail(ErrorKind::InvalidArgument, "joint model and cascade have different numbers of models");
  if (opts.n_starts < 1 || opts.max_iterations < 1 || !(opts.gradient_tol > 0.0) || !(opts.improvement_tol >= 0.0))
    fail(ErrorKind::InvalidArgument, "infeasible optimizer options");

  const std::size_t k = spec.size();
  const Problem problem(model, spec, lambda_cost, lambda_abstention, opts);

  std::vector<std::vector<double>> starts;
  {
    ThresholdVector q;
    for (std::size_t i = 0; i + 1 < k; ++i) {
      q.deferral.push_back(marginal_quantile(model, i, 0.4));
      q.abstention.push_back(marginal_quantile(model, i, 0.1));
    }
    q.abstention.push_back(marginal_quantile(model, k - 1, 0.1));
    starts.push_back(problem.encode(q));
  }
  for (const auto& t : extra_starts) {
    if (t.deferral.size() + 1 != k || t.abstention.size() != k)
      fail(ErrorKind::InvalidArgument, "warm start has the wrong number of thresholds");
    starts.push_back(problem.encode(t));
  }
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int s = 1; s < opts.n_starts; ++s) {
    std::vector<double> u(problem.dim());
    for (std::size_t j = 0; j < u.size(); ++j)
      u[j] = problem.lower(j) + unit(rng) * (problem.upper(j) - problem.lower(j));
    starts.push_back(std::move(u));
  }

  SweepCell best;
  best.lambda_cost = lambda_cost;
  best.lambda_abstention = lambda_abstention;
  best.train_loss = std::numeric_limits<double>::infinity();
  for (const auto& u0 : starts) {
    const auto run = minimize(problem, u0, opts);
    const auto t = problem.decode(run.u);
    const bool better = run.loss < best.train_loss || (run.loss == best.train_loss && lex_less(t, best.thresholds));
    if (better) {
      best.thresholds = t;
      best.train_loss = run.loss;
      best.converged = run.converged;
    }
  }
  best.n_restarts_used = static_cast<int>(starts.size());
  best.performance = analytic_performance(model, spec, best.thresholds, opts.analytic);
  return best;
}

// ---------------------------------------------------------------------------
// Oracle

std::vector<OracleResult> brute_force_oracle(const MarkovJointModel& model, const CascadeSpec& spec,
                                             std::span<const std::pair<double, double>> preferences, int resolution,
                                             const AnalyticOptions& opts) {
  if (resolution < 11) fail(ErrorKind::InvalidArgument, "oracle resolution must be at least 11");
  for (const auto& [lc, la] : preferences) require_preferences(lc, la);
  const std::size_t k = spec.size();
  const bool early = spec.architecture() == Architecture::EarlyAbstention;

  std::vector<double> phis, xis;
  for (int j = 0; j < resolution; ++j) {
    const double v = static_cast<double>(j) / (resolution - 1);
    phis.push_back(std::clamp(v, kBoxMargin, 1.0 - kBoxMargin));
    xis.push_back(std::clamp(v, 0.0, 1.0 - kBoxMargin));
  }
  phis.erase(std::unique(phis.begin(), phis.end()), phis.end());
  xis.erase(std::unique(xis.begin(), xis.end()), xis.end());

  double per_stage = 0.0;
  for (double phi : phis)
    per_stage += early ? 1.0 + static_cast<double>(std::count_if(xis.begin(), xis.end(), [&](double x) {
                           return x <= phi - kThresholdSeparation;
                         }))
                       : 1.0;
  const double evaluations = std::pow(per_stage, static_cast<double>(k - 1)) * static_cast<double>(xis.size());
  if (evaluations > kOracleBudget)
    fail(ErrorKind::InvalidArgument, "brute-force grid exceeds the evaluation budget; lower the resolution");

  std::vector<OracleResult> best(preferences.size());
  for (auto& b : best) b.loss = std::numeric_limits<double>::infinity();

  ThresholdVector t;
  t.deferral.assign(k - 1, 0.0);
  t.abstention.assign(k, 0.0);
  std::function<void(std::size_t)> visit = [&](std::size_t i) {
    if (i + 1 == k) {
      const auto perf = analytic_performance_final_sweep(model, spec, t, xis, opts);
      for (std::size_t p = 0; p < preferences.size(); ++p) {
        for (std::size_t j = 0; j < xis.size(); ++j) {
          const double l = loss_of(perf[j], preferences[p].first, preferences[p].second);
          if (l > best[p].loss) continue;
          auto cand = t;
          cand.abstention.back() = xis[j];
          if (l < best[p].loss || lex_less(cand, best[p].thresholds)) best[p] = {std::move(cand), l};
        }
      }
      return;
    }
    for (double phi : phis) {
      t.deferral[i] = phi;
      if (!early) {
        t.abstention[i] = 0.0;
        visit(i + 1);
        continue;
      }
      for (double xi : xis) {
        if (!(xi <= phi - kThresholdSeparation)) break;
        t.abstention[i] = xi;
        visit(i + 1);
      }
      // The no-deferral edge xi = phi - separation is rarely a grid point.
      t.abstention[i] = phi - kThresholdSeparation;
      visit(i + 1);
    }
  };
  visit(0);
  return best;
}

OracleResult brute_force_oracle(const MarkovJointModel& model, const CascadeSpec& spec, double lambda_cost,
                                double lambda_abstention, int resolution, const AnalyticOptions& opts) {
  const std::pair<double, double> pref{lambda_cost, lambda_abstention};
  return brute_force_oracle(model, spec, std::span(&pref, 1), resolution, opts).front();
}

// ---------------------------------------------------------------------------
// Sweep

double mean_cell_loss(const std::vector<std::vector<SweepCell>>& cells) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& row : cells)
    for (const auto& c : row) {
      s += c.train_loss;
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

SweepResult sweep_preference_grid(const MarkovJointModel& model, const CascadeSpec& spec, const PreferenceGrid& grid,
                                  const OptimizerOptions& opts, const SweepResult* seed_solutions) {
  validate_grid(grid);
  if (seed_solutions && (seed_solutions->grid.rows() != grid.rows() || seed_solutions->grid.cols() != grid.cols()))
    fail(ErrorKind::InvalidArgument, "seed solutions come from a grid of a different shape");
  SweepResult out;
  out.grid = grid;
  out.architecture = spec.architecture();
  out.cells.assign(grid.rows(), std::vector<SweepCell>(grid.cols()));
  for (std::size_t i = 0; i < grid.rows(); ++i) {
    for (std::size_t j = 0; j < grid.cols(); ++j) {
      std::vector<ThresholdVector> warm;
      if (j > 0) warm.push_back(out.cells[i][j - 1].thresholds);
      if (i > 0) warm.push_back(out.cells[i - 1][j].thresholds);
      if (seed_solutions) warm.push_back(seed_solutions->cells[i][j].thresholds);
      out.cells[i][j] = optimize_thresholds(model, spec, grid.lambdas_cost[i], grid.lambdas_abs[j], opts, warm);
    }
  }
  out.overall_loss = mean_cell_loss(out.cells);
  return out;
}

// ---------------------------------------------------------------------------
// Smoothing

SweepResult smooth_threshold_grid(const SweepResult& result, double r, const MarkovJointModel& model,
                                  const CascadeSpec& spec, const AnalyticOptions& opts) {
  if (!(r > 0.0)) fail(ErrorKind::InvalidArgument, "smoothing ratio r must be positive");
  const std::size_t rows = result.cells.size();
  const std::size_t cols = rows ? result.cells.front().size() : 0;
  if (rows < 2 || cols < 2) fail(ErrorKind::InvalidArgument, "smoothing needs a grid of at least 2x2");

  auto neighbours = [&](std::size_t i, std::size_t j) {
    std::vector<std::pair<std::size_t, std::size_t>> nb;
    if (i > 0) nb.emplace_back(i - 1, j);
    if (i + 1 < rows) nb.emplace_back(i + 1, j);
    if (j > 0) nb.emplace_back(i, j - 1);
    if (j + 1 < cols) nb.emplace_back(i, j + 1);
    return nb;
  };
  std::vector<std::vector<double>> theta(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const auto flat = result.cells[i][j].thresholds.flatten();
      double s = 0.0;
      for (double v : flat) s += v;
      theta[i][j] = s / static_cast<double>(flat.size());
    }

  SmoothingReport report;
  report.r = r;
  std::vector<std::vector<bool>> flagged(rows, std::vector<bool>(cols, false));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const auto nb = neighbours(i, j);
      double mean = 0.0;
      for (auto [a, b] : nb) mean += theta[a][b];
      mean /= static_cast<double>(nb.size());
      double var = 0.0;
      for (auto [a, b] : nb) var += (theta[a][b] - mean) * (theta[a][b] - mean);
      var /= static_cast<double>(nb.size());
      const double dev = (theta[i][j] - mean) * (theta[i][j] - mean);
      if (dev > r * var && dev > kSmoothingNoiseFloor) {
        flagged[i][j] = true;
        report.flagged.emplace_back(i, j);
      }
    }

  SweepResult out = result;
  for (auto [i, j] : report.flagged) {
    std::vector<const ThresholdVector*> donors;
    for (auto [a, b] : neighbours(i, j))
      if (!flagged[a][b]) donors.push_back(&result.cells[a][b].thresholds);
    if (donors.empty()) {
      report.unresolved.emplace_back(i, j);
      continue;
    }
    auto flat = donors.front()->flatten();
    std::fill(flat.begin(), flat.end(), 0.0);
    for (const auto* d : donors) {
      const auto f = d->flatten();
      for (std::size_t c = 0; c < flat.size(); ++c) flat[c] += f[c];
    }
    for (double& v : flat) v /= static_cast<double>(donors.size());
    auto& cell = out.cells[i][j];
    cell.thresholds = ThresholdVector::unflatten(flat, spec.size());
    cell.performance = analytic_performance(model, spec, cell.thresholds, opts);
    cell.train_loss = loss_of(cell.performance, cell.lambda_cost, cell.lambda_abstention);
  }
  report.flagged_fraction = static_cast<double>(report.flagged.size()) / static_cast<double>(rows * cols);
  out.overall_loss = mean_cell_loss(out.cells);
  out.smoothing = std::move(report);
  return out;
}

// ---------------------------------------------------------------------------
// Comparison

double percent_change(double early, double final) {
  if (final == 0.0) return early == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
  return (early - final) / final * 100.0;
}

ArchitectureComparison compare_architectures(const MarkovJointModel& model, const CascadeSpec& spec,
                                             const PreferenceGrid& grid, const OptimizerOptions& opts,
                                             double smoothing_r) {
  const auto final_spec = spec.with_architecture(Architecture::FinalModelAbstention);
  const auto early_spec = spec.with_architecture(Architecture::EarlyAbstention);
  ArchitectureComparison c;
  c.grid = grid;
  // Final's optimum is feasible for Early, so it seeds Early's starts.
  c.final_raw = sweep_preference_grid(model, final_spec, grid, opts);
  c.early_raw = sweep_preference_grid(model, early_spec, grid, opts, &c.final_raw);
  const bool smooth = grid.rows() >= 2 && grid.cols() >= 2;
  c.final = smooth ? smooth_threshold_grid(c.final_raw, smoothing_r, model, final_spec, opts.analytic) : c.final_raw;
  c.early = smooth ? smooth_threshold_grid(c.early_raw, smoothing_r, model, early_spec, opts.analytic) : c.early_raw;

  c.cells.assign(grid.rows(), std::vector<CellComparison>(grid.cols()));
  double n = 0.0;
  for (std::size_t i = 0; i < grid.rows(); ++i)
    for (std::size_t j = 0; j < grid.cols(); ++j) {
      const auto& e = c.early.cells[i][j];
      const auto& f = c.final.cells[i][j];
      auto& cc = c.cells[i][j];
      cc.lambda_cost = e.lambda_cost;
      cc.lambda_abstention = e.lambda_abstention;
      cc.pct_delta_loss = percent_change(e.train_loss, f.train_loss);
      cc.pct_delta_error = percent_change(e.performance.p_error_no_abstain, f.performance.p_error_no_abstain);
      cc.pct_delta_cost = percent_change(e.performance.expected_cost, f.performance.expected_cost);
      cc.delta_abstention = e.performance.p_abstention - f.performance.p_abstention;
      c.mean_pct_delta_error += cc.pct_delta_error;
      c.mean_pct_delta_cost += cc.pct_delta_cost;
      c.mean_delta_abstention += cc.delta_abstention;
      n += 1.0;
      if (c.early_raw.cells[i][j].train_loss > c.final_raw.cells[i][j].train_loss + kNestingTolerance)
        ++c.nesting_violations;
    }
  c.mean_pct_delta_error /= n;
  c.mean_pct_delta_cost /= n;
  c.mean_delta_abstention /= n;
  c.overall_pct_delta = percent_change(c.early.overall_loss, c.final.overall_loss);
  return c;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const SweepResult& r) {
  nlohmann::json j;
  j["grid"] = {{"lambdas_cost", r.grid.lambdas_cost}, {"lambdas_abs", r.grid.lambdas_abs}};
  j["architecture"] = to_string(r.architecture);
  j["overall_loss"] = r.overall_loss;
  auto cells = nlohmann::json::array();
  for (const auto& row : r.cells) {
    auto jr = nlohmann::json::array();
    for (const auto& c : row)
      jr.push_back({{"lc", c.lambda_cost},
                    {"la", c.lambda_abstention},
                    {"phi", c.thresholds.deferral},
                    {"xi", c.thresholds.abstention},
                    {"loss", c.train_loss},
                    {"error", c.performance.p_error_no_abstain},
                    {"cost", c.performance.expected_cost},
                    {"abstention", c.performance.p_abstention},
                    {"converged", c.converged},
                    {"n_restarts", c.n_restarts_used}});
    cells.push_back(std::move(jr));
  }
  j["cells"] = std::move(cells);
  if (r.smoothing) {
    auto flagged = nlohmann::json::array();
    for (auto [a, b] : r.smoothing->flagged) flagged.push_back({a, b});
    auto unresolved = nlohmann::json::array();
    for (auto [a, b] : r.smoothing->unresolved) unresolved.push_back({a, b});
    j["smoothing"] = {{"r", r.smoothing->r},
                      {"flagged_fraction", r.smoothing->flagged_fraction},
                      {"flagged", flagged},
                      {"unresolved", unresolved}};
  } else {
    j["smoothing"] = {{"r", nullptr}, {"flagged_fraction", 0.0}};
  }
  return j;
}

SweepResult sweep_result_from_json(const nlohmann::json& j) {
  try {
    SweepResult r;
    r.grid.lambdas_cost = j.at("grid").at("lambdas_cost").get<std::vector<double>>();
    r.grid.lambdas_abs = j.at("grid").at("lambdas_abs").get<std::vector<double>>();
    validate_grid(r.grid);
    r.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    r.overall_loss = j.at("overall_loss").get<double>();
    const auto& cells = j.at("cells");
    if (cells.size() != r.grid.rows()) fail(ErrorKind::Schema, "sweep cells do not match the grid");
    for (const auto& jr : cells) {
      if (jr.size() != r.grid.cols()) fail(ErrorKind::Schema, "sweep cells do not match the grid");
      std::vector<SweepCell> row;
      for (const auto& jc : jr) {
        SweepCell c;
        c.lambda_cost = jc.at("lc").get<double>();
        c.lambda_abstention = jc.at("la").get<double>();
        c.thresholds.deferral = jc.at("phi").get<std::vector<double>>();
        c.thresholds.abstention = jc.at("xi").get<std::vector<double>>();
        c.train_loss = jc.at("loss").get<double>();
        c.performance.p_error_no_abstain = jc.at("error").get<double>();
        c.performance.expected_cost = jc.at("cost").get<double>();
        c.performance.p_abstention = jc.at("abstention").get<double>();
        c.performance.p_correct = 1.0 - c.performance.p_error_no_abstain - c.performance.p_abstention;
        c.converged = jc.at("converged").get<bool>();
        c.n_restarts_used = jc.value("n_restarts", 0);
        row.push_back(std::move(c));
      }
      r.cells.push_back(std::move(row));
    }
    const auto& sm = j.at("smoothing");
    if (!sm.at("r").is_null()) {
      SmoothingReport rep;
      rep.r = sm.at("r").get<double>();
      rep.flagged_fraction = sm.at("flagged_fraction").get<double>();
      for (const auto& p : sm.value("flagged", nlohmann::json::array()))
        rep.flagged.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
      for (const auto& p : sm.value("unresolved", nlohmann::json::array()))
        rep.unresolved.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
      r.smoothing = std::move(rep);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, std::string("malformed sweep result: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Schema) throw;
    fail(ErrorKind::Schema, std::string("malformed sweep result: ") + e.what());
  }
}

nlohmann::json to_json(const ArchitectureComparison& c) {
  nlohmann::json j;
  j["grid"] = {{"lambdas_cost", c.grid.lambdas_cost}, {"lambdas_abs", c.grid.lambdas_abs}};
  auto cells = nlohmann::json::array();
  for (std::size_t i = 0; i < c.cells.size(); ++i) {
    auto jr = nlohmann::json::array();
    for (std::size_t k = 0; k < c.cells[i].size(); ++k) {
      const auto& cc = c.cells[i][k];
      jr.push_back({{"lc", cc.lambda_cost},
                    {"la", cc.lambda_abstention},
                    {"early_loss", c.early.cells[i][k].train_loss},
                    {"final_loss", c.final.cells[i][k].train_loss},
                    {"pct_delta_loss", cc.pct_delta_loss},
                    {"pct_delta_error", cc.pct_delta_error},
                    {"pct_delta_cost", cc.pct_delta_cost},
                    {"delta_abstention", cc.delta_abstention}});
    }
    cells.push_back(std::move(jr));
  }
  j["cells"] = std::move(cells);
  j["overall"] = {{"early_loss", c.early.overall_loss},
                  {"final_loss", c.final.overall_loss},
                  {"pct_delta", c.overall_pct_delta},
                  {"mean_pct_delta_error", c.mean_pct_delta_error},
                  {"mean_pct_delta_cost", c.mean_pct_delta_cost},
                  {"mean_delta_abstention", c.mean_delta_abstention}};
  j["nesting"] = {{"violations", c.nesting_violations},
                  {"tolerance", kNestingTolerance},
                  {"early_overall_unsmoothed", c.early_raw.overall_loss},
                  {"final_overall_unsmoothed", c.final_raw.overall_loss}};
  j["early"] = to_json(c.early);
  j["final"] = to_json(c.final);
  return j;
}

}  // namespace cascade
