#pragma once

// Shared test fixtures and independent oracles.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cascade/core.hpp"
#include "cascade/joint_density.hpp"

namespace fixtures {

inline cascade::CascadeSpec two_models(double c1 = 1.0, double c2 = 10.0,
                                       cascade::Architecture a = cascade::Architecture::EarlyAbstention) {
  return cascade::CascadeSpec({{"small", c1, 0}, {"large", c2, 0}}, a);
}

inline cascade::CascadeSpec chain(std::vector<double> costs,
                                  cascade::Architecture a = cascade::Architecture::EarlyAbstention) {
  std::vector<cascade::ModelProfile> ms;
  for (std::size_t i = 0; i < costs.size(); ++i) ms.push_back({"m" + std::to_string(i + 1), costs[i], 0});
  return cascade::CascadeSpec(ms, a);
}

inline cascade::BetaMixture beta(double a, double b) { return {{1.0}, {a}, {b}}; }

inline cascade::BetaMixture two_bump() { return {{0.4, 0.6}, {2.0, 7.0}, {6.0, 2.0}}; }

inline cascade::MarkovJointModel model_k2(double rho) {
  return cascade::MarkovJointModel({two_bump(), beta(5.0, 2.0)}, {{cascade::CopulaFamily::Gaussian, rho}});
}

inline cascade::MarkovJointModel model_k3(double rho1, double rho2) {
  return cascade::MarkovJointModel({two_bump(), beta(3.0, 2.0), beta(6.0, 1.5)},
                                   {{cascade::CopulaFamily::Gaussian, rho1}, {cascade::CopulaFamily::Gaussian, rho2}});
}

// Composite Simpson with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 20000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double phi(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }
inline double Phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Route one record by literally walking the cascade.
struct Trace {
  bool abstained;
  std::size_t model;
  double cost;
  bool error;
};

inline Trace trace(const std::vector<double>& phi_t, const std::vector<double>& xi, const std::vector<double>& conf,
                   const std::vector<bool>& correct, const std::vector<double>& costs) {
  double c = 0.0;
  const std::size_t k = conf.size();
  for (std::size_t i = 0; i < k; ++i) {
    c += costs[i];
    if (i + 1 == k) {
      if (conf[i] < xi[i]) return {true, i, c, false};
      return {false, i, c, !correct[i]};
    }
    if (conf[i] > phi_t[i]) return {false, i, c, !correct[i]};
    if (conf[i] < xi[i]) return {true, i, c, false};
  }
  return {};
}

}  // namespace fixtures
