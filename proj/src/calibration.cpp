#include "cascade/calibration.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "cascade/error.hpp"

namespace cascade {

namespace {

double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

// log(1 + exp(t)) without overflow.
double softplus(double t) { return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

}  // namespace

double transform_raw(double p_raw, double clamp_eps) {
  const double p = std::clamp(p_raw, clamp_eps, 1.0 - clamp_eps);
  return -std::log1p(-p);
}

double LogisticModel::linear(std::span<const double> features) const {
  double t = intercept;
  for (std::size_t j = 0; j < slopes.size(); ++j) t += slopes[j] * features[j];
  return t;
}

double LogisticModel::probability(std::span<const double> features) const { return sigmoid(linear(features)); }

LogisticModel fit_logistic(const std::vector<std::vector<double>>& features, const std::vector<bool>& labels,
                           const LogisticOptions& opts) {
  const std::size_t n = features.size();
  if (n == 0 || labels.size() != n) fail(ErrorKind::InvalidArgument, "logistic fit needs matching features and labels");
  const std::size_t d = features.front().size();
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (positives == 0 || positives == n)
    fail(ErrorKind::Degenerate, "logistic fit needs both classes in the labels");

  Eigen::MatrixXd x(n, d + 1);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != d) fail(ErrorKind::InvalidArgument, "ragged feature rows");
    x(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(features[i][j])) fail(ErrorKind::InvalidArgument, "non-finite logistic feature");
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j + 1)) = features[i][j];
    }
    y(static_cast<Eigen::Index>(i)) = labels[i] ? 1.0 : 0.0;
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(d + 1), opts.l2);
  penalty(0) = 0.0;

  auto objective = [&](const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = x * beta;
    double nll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) nll += softplus(eta(i)) - y(i) * eta(i);
    return nll * inv_n + 0.5 * beta.cwiseProduct(penalty).dot(beta);
  };

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d + 1));
  const double base_rate = static_cast<double>(positives) * inv_n;
  beta(0) = std::log(base_rate / (1.0 - base_rate));

  LogisticModel out;
  double current = objective(beta);
  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    const Eigen::VectorXd eta = x * beta;
    Eigen::VectorXd p(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      p(i) = sigmoid(eta(i));
      w(i) = p(i) * (1.0 - p(i));
    }
    const Eigen::VectorXd grad = x.transpose() * (p - y) * inv_n + penalty.cwiseProduct(beta);
    out.iterations = iter;
    if (grad.norm() <= opts.gradient_tol) {
      out.converged = true;
      break;
    }
    Eigen::MatrixXd hess = x.transpose() * w.asDiagonal() * x * inv_n;
    hess.diagonal() += penalty;
    // Tiny ridge so the solve stays defined for separable data.
    hess.diagonal().array() += 1e-12;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);

    double scale = 1.0;
    Eigen::VectorXd next = beta - step;
    double value = objective(next);
    while (value > current - 1e-4 * scale * grad.dot(step) && scale > 1e-10) {
      scale *= 0.5;
      next = beta - scale * step;
      value = objective(next);
    }
    beta = next;
    current = value;
  }
  out.intercept = beta(0);
  out.slopes.assign(beta.data() + 1, beta.data() + beta.size());
  return out;
}

CalibrationModel fit_calibration(std::span<const std::pair<double, bool>> train, const LogisticOptions& opts) {
  if (train.size() < 10) fail(ErrorKind::InvalidArgument, "calibration needs at least 10 training examples");
  std::vector<std::vector<double>> features;
  std::vector<bool> labels;
  features.reserve(train.size());
  labels.reserve(train.size());
  for (const auto& [p_raw, correct] : train) {
    if (!(p_raw >= 0.0 && p_raw <= 1.0)) fail(ErrorKind::InvalidArgument, "raw confidence outside [0,1]");
    features.push_back({transform_raw(p_raw)});
    labels.push_back(correct);
  }
  const auto fit = fit_logistic(features, labels, opts);
  CalibrationModel m;
  m.intercept = fit.intercept;
  m.slope = fit.slopes.front();
  return m;
}

double apply_calibration(const CalibrationModel& m, double p_raw) {
  const double p = sigmoid(m.intercept + m.slope * transform_raw(p_raw, m.clamp_eps));
  return std::clamp(p, m.output_eps, 1.0 - m.output_eps);
}

double brier_score(std::span<const double> probabilities, const std::vector<bool>& labels) {
  if (probabilities.size() != labels.size() || labels.empty())
    fail(ErrorKind::InvalidArgument, "brier score needs matching nonempty inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double d = probabilities[i] - (labels[i] ? 1.0 : 0.0);
    s += d * d;
  }
  return s / static_cast<double>(labels.size());
}

}  // namespace cascade
