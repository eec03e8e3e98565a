#include "cascade/joint_density.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "cascade/error.hpp"
#include "cascade/numerics.hpp"

namespace cascade {

namespace {

using BoostPolicy = boost::math::policies::policy<boost::math::policies::promote_double<false>>;

double log_beta_fn(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

double clamp_open_unit(double x) {
  if (!(x > 0.0)) return std::numeric_limits<double>::min();
  if (!(x < 1.0)) return std::nextafter(1.0, 0.0);
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// BetaMixture

double BetaMixture::pdf(double x) const {
  if (!(x > 0.0 && x < 1.0)) return 0.0;
  double p = 0.0;
  for (std::size_t j = 0; j < components(); ++j)
    p += weights[j] * boost::math::ibeta_derivative(alphas[j], betas[j], x, BoostPolicy());
  return p;
}

double BetaMixture::log_pdf(double x) const {
  const double lx = std::log(x), l1x = std::log1p(-x);
  double best = -numerics::kInf;
  std::vector<double> terms(components());
  for (std::size_t j = 0; j < components(); ++j) {
    terms[j] = std::log(weights[j]) + (alphas[j] - 1.0) * lx + (betas[j] - 1.0) * l1x -
               log_beta_fn(alphas[j], betas[j]);
    best = std::max(best, terms[j]);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - best);
  return best + std::log(s);
}

double BetaMixture::cdf(double x) const {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double c = 0.0;
  for (std::size_t j = 0; j < components(); ++j)
    c += weights[j] * boost::math::ibeta(alphas[j], betas[j], x, BoostPolicy());
  return std::min(c, 1.0);
}

double BetaMixture::sf(double x) const {
  if (x <= 0.0) return 1.0;
  if (x >= 1.0) return 0.0;
  double c = 0.0;
  for (std::size_t j = 0; j < components(); ++j)
    c += weights[j] * boost::math::ibetac(alphas[j], betas[j], x, BoostPolicy());
  return std::min(c, 1.0);
}

double BetaMixture::mean() const {
  double m = 0.0;
  for (std::size_t j = 0; j < components(); ++j) m += weights[j] * alphas[j] / (alphas[j] + betas[j]);
  return m;
}

double BetaMixture::partial_mean_above(double t) const {
  // x f_{a,b}(x) = a/(a+b) f_{a+1,b}(x)
  if (t >= 1.0) return 0.0;
  if (t <= 0.0) return mean();
  double m = 0.0;
  for (std::size_t j = 0; j < components(); ++j)
    m += weights[j] * alphas[j] / (alphas[j] + betas[j]) *
         boost::math::ibetac(alphas[j] + 1.0, betas[j], t, BoostPolicy());
  return m;
}

void validate_mixture(const BetaMixture& mix) {
  const std::size_t m = mix.weights.size();
  if (m < 1 || m > static_cast<std::size_t>(kMaxMixtureComponents) || mix.alphas.size() != m ||
      mix.betas.size() != m)
    fail(ErrorKind::InvalidArgument, "beta mixture needs 1..3 components with matching parameter lists");
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    if (!(mix.weights[j] > 0.0 && mix.weights[j] <= 1.0))
      fail(ErrorKind::InvalidArgument, "beta mixture weights must lie in (0,1]");
    if (!(mix.alphas[j] > 0.0) || !(mix.betas[j] > 0.0) || !std::isfinite(mix.alphas[j]) ||
        !std::isfinite(mix.betas[j]))
      fail(ErrorKind::InvalidArgument, "beta shape parameters must be positive and finite");
    total += mix.weights[j];
  }
  if (std::abs(total - 1.0) > 1e-9) fail(ErrorKind::InvalidArgument, "beta mixture weights must sum to 1");
}

double interval_prob(const BetaMixture& mix, double lo, double hi) {
  if (!(lo <= hi)) fail(ErrorKind::InvalidArgument, "interval lower bound exceeds upper bound");
  if (lo <= 0.0 && hi >= 1.0) return 1.0;
  // Use the tail with less cancellation.
  double p;
  if (hi <= 0.5)
    p = mix.cdf(hi) - mix.cdf(lo);
  else if (lo >= 0.5)
    p = mix.sf(lo) - mix.sf(hi);
  else
    p = 1.0 - mix.cdf(lo) - mix.sf(hi);
  return std::clamp(p, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// MarginalTransform

namespace {

constexpr double kTableTolerance = 1e-12;
constexpr double kMinTableSpacing = 1e-6;
constexpr int kInitialTableNodes = 129;

double hermite(double z0, double x0, double d0, double z1, double x1, double d1, double z) {
  const double h = z1 - z0;
  const double t = (z - z0) / h;
  const double t2 = t * t, t3 = t2 * t;
  return (2 * t3 - 3 * t2 + 1) * x0 + (t3 - 2 * t2 + t) * h * d0 + (-2 * t3 + 3 * t2) * x1 + (t3 - t2) * h * d1;
}

}  // namespace

MarginalTransform::MarginalTransform(BetaMixture mix) : mix_(std::move(mix)) {
  validate_mixture(mix_);
  const double bound = numerics::kLatentBound;
  std::vector<Node> coarse;
  coarse.reserve(kInitialTableNodes);
  for (int i = 0; i < kInitialTableNodes; ++i)
    coarse.push_back(make_node(-bound + 2.0 * bound * i / (kInitialTableNodes - 1)));

  nodes_.push_back(coarse.front());
  // Depth-first refinement keeps the output sorted.
  std::vector<std::pair<Node, Node>> stack;
  for (std::size_t i = 0; i + 1 < coarse.size(); ++i) {
    stack.clear();
    stack.emplace_back(coarse[i], coarse[i + 1]);
    while (!stack.empty()) {
      auto [left, right] = stack.back();
      stack.pop_back();
      const double zm = 0.5 * (left.z + right.z);
      const Node mid = make_node(zm);
      const double predicted = hermite(left.z, left.x, left.dxdz, right.z, right.x, right.dxdz, zm);
      if (std::abs(predicted - mid.x) > kTableTolerance && right.z - left.z > kMinTableSpacing) {
        stack.emplace_back(mid, right);
        stack.emplace_back(left, mid);
      } else {
        nodes_.push_back(right);
      }
    }
  }
}

MarginalTransform::Node MarginalTransform::make_node(double z) const {
  const double x = from_latent_exact(z);
  const double f = mix_.pdf(x);
  double d = numerics::normal_pdf(z) / f;
  if (!std::isfinite(d)) d = 0.0;
  return {z, x, d};
}

double MarginalTransform::to_latent(double x) const {
  if (x <= 0.0) return -numerics::kInf;
  if (x >= 1.0) return numerics::kInf;
  const double c = mix_.cdf(x);
  if (c <= 0.5) return numerics::normal_quantile(c);
  return numerics::normal_quantile_upper(mix_.sf(x));
}

double MarginalTransform::from_latent_exact(double z) const {
  if (z == -numerics::kInf) return 0.0;
  if (z == numerics::kInf) return 1.0;
  // Solve in whichever tail keeps full relative precision; g is increasing in x.
  const bool lower = z <= 0.0;
  const double target = lower ? numerics::normal_cdf(z) : numerics::normal_sf(z);
  auto g = [&](double x) { return lower ? mix_.cdf(x) - target : target - mix_.sf(x); };

  double lo = 0.0, hi = 1.0;
  double x = 0.5;
  for (int it = 0; it < 400; ++it) {
    const double gx = g(x);
    if (gx == 0.0) break;
    (gx < 0.0 ? lo : hi) = x;
    const double f = mix_.pdf(x);
    double next = x - gx / f;
    if (!(next > lo && next < hi) || !std::isfinite(next)) {
      if (lo == 0.0)
        next = hi * 0.0625;
      else if (hi / lo > 8.0)
        next = std::sqrt(lo * hi);
      else
        next = 0.5 * (lo + hi);
    }
    if (std::abs(next - x) <= 4e-16 * std::max(next, 1e-300) || hi - lo <= 4e-16 * hi) {
      x = next;
      break;
    }
    x = next;
  }
  return clamp_open_unit(x);
}

double MarginalTransform::from_latent(double z) const {
  if (!(z > nodes_.front().z && z < nodes_.back().z)) return from_latent_exact(z);
  auto it = std::upper_bound(nodes_.begin(), nodes_.end(), z, [](double v, const Node& n) { return v < n.z; });
  const Node& r = *it;
  const Node& l = *(it - 1);
  return clamp_open_unit(hermite(l.z, l.x, l.dxdz, r.z, r.x, r.dxdz, z));
}

// ---------------------------------------------------------------------------
// MarkovJointModel

MarkovJointModel::MarkovJointModel(std::vector<BetaMixture> marginals, std::vector<PairCopula> copulas)
    : marginals_(std::move(marginals)), copulas_(std::move(copulas)) {
  if (marginals_.empty()) fail(ErrorKind::InvalidArgument, "joint model needs at least one marginal");
  if (copulas_.size() + 1 != marginals_.size())
    fail(ErrorKind::InvalidArgument, "joint model needs k-1 copulas for k marginals");
  for (const auto& c : copulas_)
    if (!(std::abs(c.rho) < 1.0)) fail(ErrorKind::InvalidArgument, "copula correlation must lie in (-1,1)");
  auto transforms = std::make_shared<std::vector<MarginalTransform>>();
  transforms->reserve(marginals_.size());
  for (const auto& m : marginals_) transforms->emplace_back(m);
  transforms_ = std::move(transforms);
}

// ---------------------------------------------------------------------------
// EM for beta mixtures

namespace {

struct Shape {
  double alpha, beta;
};

Shape moment_match(double mean, double var) {
  mean = std::clamp(mean, 1e-6, 1.0 - 1e-6);
  double common = (var > 0.0 && var < mean * (1.0 - mean)) ? mean * (1.0 - mean) / var - 1.0 : 2.0;
  common = std::clamp(common, 1e-2, 1e7);
  return {mean * common, (1.0 - mean) * common};
}

// Maximizes (a-1) s1 + (b-1) s2 - log B(a,b), the weighted beta log-likelihood
// per unit weight. Concave, so damped Newton from the previous shape never
// decreases the objective.
Shape beta_mle(double s1, double s2, Shape start) {
  auto objective = [&](double a, double b) { return (a - 1.0) * s1 + (b - 1.0) * s2 - log_beta_fn(a, b); };
  double a = start.alpha, b = start.beta;
  double current = objective(a, b);
  for (int it = 0; it < 200; ++it) {
    const double dab = boost::math::digamma(a + b, BoostPolicy());
    const double ga = s1 - boost::math::digamma(a, BoostPolicy()) + dab;
    const double gb = s2 - boost::math::digamma(b, BoostPolicy()) + dab;
    const double tab = boost::math::trigamma(a + b, BoostPolicy());
    const double haa = -boost::math::trigamma(a, BoostPolicy()) + tab;
    const double hbb = -boost::math::trigamma(b, BoostPolicy()) + tab;
    const double hab = tab;
    const double det = haa * hbb - hab * hab;
    if (!(det > 0.0)) break;
    const double da = -(hbb * ga - hab * gb) / det;
    const double db = -(-hab * ga + haa * gb) / det;
    double scale = 1.0;
    double na = a + da, nb = b + db;
    while ((na <= 0.0 || nb <= 0.0 || objective(na, nb) < current) && scale > 1e-12) {
      scale *= 0.5;
      na = a + scale * da;
      nb = b + scale * db;
    }
    if (scale <= 1e-12) break;
    const double next = objective(na, nb);
    const bool small = std::abs(na - a) <= 1e-12 * a && std::abs(nb - b) <= 1e-12 * b;
    a = na;
    b = nb;
    current = next;
    if (small) break;
  }
  return {a, b};
}

struct EmRun {
  BetaMixture mix;
  double ll;
  int iterations;
  bool converged;
  std::vector<double> trace;
};

double mixture_log_likelihood(const BetaMixture& mix, std::span<const double> lx, std::span<const double> l1x) {
  const std::size_t m = mix.components();
  std::vector<double> lw(m), lb(m);
  for (std::size_t j = 0; j < m; ++j) {
    lw[j] = std::log(mix.weights[j]);
    lb[j] = log_beta_fn(mix.alphas[j], mix.betas[j]);
  }
  double ll = 0.0;
  std::vector<double> t(m);
  for (std::size_t i = 0; i < lx.size(); ++i) {
    double best = -numerics::kInf;
    for (std::size_t j = 0; j < m; ++j) {
      t[j] = lw[j] + (mix.alphas[j] - 1.0) * lx[i] + (mix.betas[j] - 1.0) * l1x[i] - lb[j];
      best = std::max(best, t[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(t[j] - best);
    ll += best + std::log(s);
  }
  return ll;
}

EmRun run_em(BetaMixture mix, std::span<const double> samples, std::span<const double> lx,
             std::span<const double> l1x, const EmOptions& opts) {
  const std::size_t n = samples.size();
  const std::size_t m = mix.components();
  std::vector<double> resp(n * m);
  EmRun run{mix, mixture_log_likelihood(mix, lx, l1x), 0, false, {}};
  for (int iter = 1; iter <= opts.max_iterations; ++iter) {
    std::vector<double> lw(m), lb(m);
    for (std::size_t j = 0; j < m; ++j) {
      lw[j] = std::log(run.mix.weights[j]);
      lb[j] = log_beta_fn(run.mix.alphas[j], run.mix.betas[j]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double best = -numerics::kInf;
      for (std::size_t j = 0; j < m; ++j) {
        resp[i * m + j] = lw[j] + (run.mix.alphas[j] - 1.0) * lx[i] + (run.mix.betas[j] - 1.0) * l1x[i] - lb[j];
        best = std::max(best, resp[i * m + j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        resp[i * m + j] = std::exp(resp[i * m + j] - best);
        s += resp[i * m + j];
      }
      for (std::size_t j = 0; j < m; ++j) resp[i * m + j] /= s;
    }
    BetaMixture next = run.mix;
    for (std::size_t j = 0; j < m; ++j) {
      double rs = 0.0, s1 = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp[i * m + j];
        rs += r;
        s1 += r * lx[i];
        s2 += r * l1x[i];
      }
      if (rs < 1e-10) {
        next.weights[j] = 1e-12;  // collapsed component: keep its shape, starve its weight
        continue;
      }
      next.weights[j] = rs / static_cast<double>(n);
      const Shape s = beta_mle(s1 / rs, s2 / rs, {run.mix.alphas[j], run.mix.betas[j]});
      next.alphas[j] = s.alpha;
      next.betas[j] = s.beta;
    }
    const double total = std::accumulate(next.weights.begin(), next.weights.end(), 0.0);
    for (auto& w : next.weights) w /= total;

    const double ll = mixture_log_likelihood(next, lx, l1x);
    run.trace.push_back(ll);
    run.iterations = iter;
    const double improvement = ll - run.ll;
    run.mix = std::move(next);
    const double prev = run.ll;
    run.ll = ll;
    if (improvement < opts.rel_tol * std::max(std::abs(prev), 1.0)) {
      run.converged = true;
      break;
    }
  }
  return run;
}

BetaMixture init_from_groups(const std::vector<std::vector<double>>& groups, std::size_t n) {
  BetaMixture mix;
  for (const auto& g : groups) {
    double mean = 0.0, var = 0.0;
    for (double v : g) mean += v;
    mean /= static_cast<double>(std::max<std::size_t>(g.size(), 1));
    for (double v : g) var += (v - mean) * (v - mean);
    var /= static_cast<double>(std::max<std::size_t>(g.size(), 2) - 1);
    const Shape s = moment_match(mean, var);
    mix.weights.push_back(std::max(static_cast<double>(g.size()) / static_cast<double>(n), 1e-3));
    mix.alphas.push_back(s.alpha);
    mix.betas.push_back(s.beta);
  }
  const double total = std::accumulate(mix.weights.begin(), mix.weights.end(), 0.0);
  for (auto& w : mix.weights) w /= total;
  return mix;
}

}  // namespace

BetaMixtureFit fit_beta_mixture(std::span<const double> samples, int components, const EmOptions& opts) {
  if (components < 1 || components > kMaxMixtureComponents)
    fail(ErrorKind::InvalidArgument, "mixture component count must be 1..3");
  if (samples.size() < 30) fail(ErrorKind::InvalidArgument, "beta mixture fit needs at least 30 samples");
  for (double s : samples)
    if (!(s > 0.0 && s < 1.0))
      fail(ErrorKind::InvalidArgument, "beta mixture samples must lie strictly inside (0,1)");

  const std::size_t n = samples.size();
  const auto m = static_cast<std::size_t>(components);
  std::vector<double> lx(n), l1x(n);
  for (std::size_t i = 0; i < n; ++i) {
    lx[i] = std::log(samples[i]);
    l1x[i] = std::log1p(-samples[i]);
  }
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());

  std::mt19937_64 rng(opts.seed);
  std::optional<EmRun> best;
  const int restarts = components == 1 ? 1 : std::max(opts.restarts, 1);
  for (int r = 0; r < restarts; ++r) {
    std::vector<std::vector<double>> groups(m);
    if (r == 0) {
      // Quantile spread: equal-count slices of the sorted sample.
      for (std::size_t i = 0; i < n; ++i) groups[std::min(i * m / n, m - 1)].push_back(sorted[i]);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      std::vector<double> centers(m);
      for (auto& c : centers) c = sorted[pick(rng)];
      std::sort(centers.begin(), centers.end());
      for (double v : sorted) {
        std::size_t best_j = 0;
        for (std::size_t j = 1; j < m; ++j)
          if (std::abs(v - centers[j]) < std::abs(v - centers[best_j])) best_j = j;
        groups[best_j].push_back(v);
      }
      for (auto& g : groups)
        if (g.size() < 2) g = {sorted[pick(rng)], sorted[pick(rng)]};
    }
    EmRun run = run_em(init_from_groups(groups, n), samples, lx, l1x, opts);
    if (!best || run.ll > best->ll) best = std::move(run);
  }
  return {best->mix, best->ll, best->iterations, best->converged, best->trace};
}

double bic(double log_likelihood, int components, std::size_t n) {
  return -2.0 * log_likelihood + (3.0 * components - 1.0) * std::log(static_cast<double>(n));
}

MixtureSelection select_beta_mixture(std::span<const double> samples, int max_components, const EmOptions& opts) {
  MixtureSelection sel;
  double best_bic = numerics::kInf;
  for (int m = 1; m <= max_components; ++m) {
    auto fit = fit_beta_mixture(samples, m, opts);
    const double b = bic(fit.log_likelihood, m, samples.size());
    sel.bic_by_components.emplace_back(m, b);
    sel.log_likelihood_by_components.emplace_back(m, fit.log_likelihood);
    if (b < best_bic) {
      best_bic = b;
      sel.best = std::move(fit);
    }
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Kendall tau and copula fitting

namespace {

// Merge sort counting exchanges needed to sort v.
std::int64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<std::int64_t>(mid - i);
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

}  // namespace

double kendall_tau(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (y.size() != n || n < 2) fail(ErrorKind::InvalidArgument, "kendall tau needs two equal-length samples");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });

  auto pairs = [](std::int64_t t) { return t * (t - 1) / 2; };
  const std::int64_t n0 = pairs(static_cast<std::int64_t>(n));
  std::int64_t n1 = 0, n3 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && x[idx[j]] == x[idx[i]]) ++j;
    n1 += pairs(static_cast<std::int64_t>(j - i));
    for (std::size_t a = i; a < j;) {
      std::size_t b = a;
      while (b < j && y[idx[b]] == y[idx[a]]) ++b;
      n3 += pairs(static_cast<std::int64_t>(b - a));
      a = b;
    }
    i = j;
  }
  std::vector<double> ys(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
  const std::int64_t swaps = merge_count(ys, buf, 0, n);
  std::int64_t n2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && ys[j] == ys[i]) ++j;
    n2 += pairs(static_cast<std::int64_t>(j - i));
    i = j;
  }
  const double denom = std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
  if (!(denom > 0.0)) fail(ErrorKind::Degenerate, "kendall tau undefined for a constant margin");
  return static_cast<double>(n0 - n1 - n2 + n3 - 2 * swaps) / denom;
}

PairCopula fit_pair_copula(std::span<const std::pair<double, double>> pseudo_observations) {
  if (pseudo_observations.size() < 30) fail(ErrorKind::InvalidArgument, "copula fit needs at least 30 pairs");
  std::vector<double> u, v;
  u.reserve(pseudo_observations.size());
  v.reserve(pseudo_observations.size());
  for (const auto& [a, b] : pseudo_observations) {
    u.push_back(a);
    v.push_back(b);
  }
  const double tau = kendall_tau(u, v);
  const double rho = std::sin(std::numbers::pi * tau / 2.0);
  return {CopulaFamily::Gaussian, std::clamp(rho, -kMaxCopulaRho, kMaxCopulaRho)};
}

JointFit fit_markov_model(const std::vector<std::vector<double>>& columns, const JointFitOptions& opts) {
  if (columns.empty()) fail(ErrorKind::InvalidArgument, "joint fit needs at least one model column");
  const std::size_t n = columns.front().size();
  for (const auto& c : columns)
    if (c.size() != n) fail(ErrorKind::InvalidArgument, "joint fit columns must have equal length");

  std::vector<BetaMixture> marginals;
  std::vector<MixtureSelection> fits;
  for (const auto& col : columns) {
    MixtureSelection sel;
    if (opts.components) {
      sel.best = fit_beta_mixture(col, *opts.components, opts.em);
      sel.bic_by_components.emplace_back(*opts.components, bic(sel.best.log_likelihood, *opts.components, n));
      sel.log_likelihood_by_components.emplace_back(*opts.components, sel.best.log_likelihood);
    } else {
      sel = select_beta_mixture(col, kMaxMixtureComponents, opts.em);
    }
    marginals.push_back(sel.best.mixture);
    fits.push_back(std::move(sel));
  }
  std::vector<PairCopula> copulas;
  for (std::size_t i = 1; i < columns.size(); ++i) {
    std::vector<std::pair<double, double>> pairs(n);
    for (std::size_t r = 0; r < n; ++r)
      pairs[r] = {marginals[i - 1].cdf(columns[i - 1][r]), marginals[i].cdf(columns[i][r])};
    copulas.push_back(fit_pair_copula(pairs));
  }
  return {MarkovJointModel(std::move(marginals), std::move(copulas)), std::move(fits)};
}

// ---------------------------------------------------------------------------
// Queries

namespace {

void check_interval(Interval iv) {
  if (!(iv.lo >= 0.0 && iv.hi <= 1.0 && iv.lo <= iv.hi))
    fail(ErrorKind::InvalidArgument, "interval must satisfy 0 <= lo <= hi <= 1");
}

constexpr double kMinConditioningMass = 1e-12;

}  // namespace

double conditional_interval_prob(const MarkovJointModel& model, std::size_t i, Interval target, Interval given) {
  if (i == 0 || i >= model.size()) fail(ErrorKind::InvalidArgument, "conditional probability needs 1 <= i < k");
  check_interval(target);
  check_interval(given);
  const auto& prev = model.transform(i - 1);
  const auto& cur = model.transform(i);
  const double mass = interval_prob(model.marginals()[i - 1], given.lo, given.hi);
  if (mass < kMinConditioningMass) fail(ErrorKind::Degenerate, "conditioning event has zero probability");
  const double joint = numerics::bvn_rectangle(prev.to_latent(given.lo), prev.to_latent(given.hi),
                                               cur.to_latent(target.lo), cur.to_latent(target.hi), model.rho(i));
  return std::clamp(joint / mass, 0.0, 1.0);
}

double partial_expectation(const MarkovJointModel& model, std::size_t i, double threshold,
                           std::optional<Interval> given) {
  if (i >= model.size()) fail(ErrorKind::InvalidArgument, "model index out of range");
  if (!given) return model.marginals()[i].partial_mean_above(threshold);
  if (i == 0) fail(ErrorKind::InvalidArgument, "the first model has no predecessor to condition on");
  check_interval(*given);
  const auto& prev = model.transform(i - 1);
  const auto& cur = model.transform(i);
  const double mass = interval_prob(model.marginals()[i - 1], given->lo, given->hi);
  if (mass < kMinConditioningMass) fail(ErrorKind::Degenerate, "conditioning event has zero probability");

  const double rho = model.rho(i);
  const double s = std::sqrt(1.0 - rho * rho);
  const double a = prev.to_latent(given->lo), b = prev.to_latent(given->hi);
  const double lo = std::max(cur.to_latent(threshold), -numerics::kLatentBound);
  const double hi = numerics::kLatentBound;
  auto integrand = [&](double z) {
    const double w = numerics::normal_cdf((b - rho * z) / s) - numerics::normal_cdf((a - rho * z) / s);
    return cur.from_latent(z) * numerics::normal_pdf(z) * w;
  };
  const auto q = numerics::integrate(integrand, lo, hi, {1e-13, 1e-12, 4000});
  if (!q.converged)
    fail(ErrorKind::Numerical, "partial expectation quadrature did not converge (error " +
                                   std::to_string(q.abs_error) + ")");
  return q.value / mass;
}

std::vector<std::vector<double>> sample_joint(const MarkovJointModel& model, std::size_t n, std::uint64_t seed) {
  if (n < 1) fail(ErrorKind::InvalidArgument, "sample_joint needs n >= 1");
  const std::size_t k = model.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> scale(k, 1.0);
  for (std::size_t i = 1; i < k; ++i) scale[i] = std::sqrt(1.0 - model.rho(i) * model.rho(i));

  std::vector<std::vector<double>> out(n, std::vector<double>(k));
  for (std::size_t r = 0; r < n; ++r) {
    double z = normal(rng);
    out[r][0] = model.transform(0).from_latent(z);
    for (std::size_t i = 1; i < k; ++i) {
      z = model.rho(i) * z + scale[i] * normal(rng);
      out[r][i] = model.transform(i).from_latent(z);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const MarkovJointModel& model) {
  nlohmann::json j;
  j["k"] = model.size();
  j["marginals"] = nlohmann::json::array();
  for (const auto& m : model.marginals())
    j["marginals"].push_back({{"weights", m.weights}, {"alphas", m.alphas}, {"betas", m.betas}});
  j["copulas"] = nlohmann::json::array();
  for (const auto& c : model.copulas()) j["copulas"].push_back({{"family", "gaussian"}, {"rho", c.rho}});
  return j;
}

MarkovJointModel markov_model_from_json(const nlohmann::json& j) {
  try {
    const auto k = j.at("k").get<std::size_t>();
    std::vector<BetaMixture> marginals;
    for (const auto& m : j.at("marginals"))
      marginals.push_back({m.at("weights").get<std::vector<double>>(), m.at("alphas").get<std::vector<double>>(),
                           m.at("betas").get<std::vector<double>>()});
    std::vector<PairCopula> copulas;
    for (const auto& c : j.at("copulas")) {
      if (c.at("family").get<std::string>() != "gaussian")
        fail(ErrorKind::Schema, "unsupported copula family '" + c.at("family").get<std::string>() + "'");
      copulas.push_back({CopulaFamily::Gaussian, c.at("rho").get<double>()});
    }
    if (marginals.size() != k) fail(ErrorKind::Schema, "model JSON: k does not match the marginal count");
    return MarkovJointModel(std::move(marginals), std::move(copulas));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, std::string("model JSON: ") + e.what());
  }
}

}  // namespace cascade
