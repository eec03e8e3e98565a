#include "cascade/numerics.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <numbers>

namespace cascade::numerics {

namespace {
constexpr double kInvSqrt2Pi = 0.398942280401432677939946059934;
constexpr double kSqrt2 = std::numbers::sqrt2;
}  // namespace

double normal_pdf(double z) {
  if (std::isinf(z)) return 0.0;
  return kInvSqrt2Pi * std::exp(-0.5 * z * z);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / kSqrt2); }

double normal_sf(double z) { return 0.5 * std::erfc(z / kSqrt2); }

double normal_quantile(double p) {
  if (p <= 0.0) return -kInf;
  if (p >= 1.0) return kInf;
  if (p > 0.5) return normal_quantile_upper(1.0 - p);
  return -kSqrt2 * boost::math::erfc_inv(2.0 * p);
}

double normal_quantile_upper(double q) {
  if (q <= 0.0) return kInf;
  if (q >= 1.0) return -kInf;
  if (q > 0.5) return normal_quantile(1.0 - q);
  return kSqrt2 * boost::math::erfc_inv(2.0 * q);
}

namespace {

// P(X > h, Y > k).
double bvn_upper(double h, double k, double r) {
  if (h == kInf || k == kInf) return 0.0;
  if (h == -kInf) return k == -kInf ? 1.0 : normal_sf(k);
  if (k == -kInf) return normal_sf(h);
  if (r == 0.0) return normal_sf(h) * normal_sf(k);

  static constexpr double w6[3] = {0.1713244923791705, 0.3607615730481384, 0.4679139345726904};
  static constexpr double x6[3] = {0.9324695142031522, 0.6612093864662647, 0.2386191860831970};
  static constexpr double w12[6] = {0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                                    0.2031674267230659, 0.2334925365383547, 0.2491470458134029};
  static constexpr double x12[6] = {0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                                    0.5873179542866171, 0.3678314989981802, 0.1252334085114692};
  static constexpr double w20[10] = {0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                                     0.08327674157670475, 0.1019301198172404,  0.1181945319615184,
                                     0.1316886384491766,  0.1420961093183821,  0.1491729864726037,
                                     0.1527533871307259};
  static constexpr double x20[10] = {0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                                     0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                                     0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                                     0.07652652113349733};
  const double* w;
  const double* x;
  int ng;
  const double ar = std::abs(r);
  if (ar < 0.3) {
    w = w6, x = x6, ng = 3;
  } else if (ar < 0.75) {
    w = w12, x = x12, ng = 6;
  } else {
    w = w20, x = x20, ng = 10;
  }
  constexpr double tp = 2.0 * std::numbers::pi;
  double hk = h * k;
  double bvn = 0.0;
  if (ar < 0.925) {
    const double hs = 0.5 * (h * h + k * k);
    const double asr = 0.5 * std::asin(r);
    for (int i = 0; i < ng; ++i) {
      for (double sign : {-1.0, 1.0}) {
        const double sn = std::sin(asr * (1.0 + sign * x[i]));
        bvn += w[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
      }
    }
    return std::clamp(bvn * asr / tp + normal_sf(h) * normal_sf(k), 0.0, 1.0);
  }
  if (r < 0.0) {
    k = -k;
    hk = -hk;
  }
  if (ar < 1.0) {
    const double as = 1.0 - r * r;
    double a = std::sqrt(as);
    const double bs = (h - k) * (h - k);
    const double c = (4.0 - hk) / 8.0;
    const double d = (12.0 - hk) / 80.0;
    double asr = -0.5 * (bs / as + hk);
    if (asr > -100.0) bvn = a * std::exp(asr) * (1.0 - c * (bs - as) * (1.0 - d * bs) / 3.0 + c * d * as * as);
    if (hk > -100.0) {
      const double b = std::sqrt(bs);
      const double sp = std::sqrt(tp) * normal_cdf(-b / a);
      bvn -= std::exp(-0.5 * hk) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
    }
    a *= 0.5;
    double sum = 0.0;
    for (int i = 0; i < ng; ++i) {
      for (double sign : {-1.0, 1.0}) {
        const double xi = a * (1.0 + sign * x[i]);
        const double xs = xi * xi;
        const double asr_i = -0.5 * (bs / xs + hk);
        if (asr_i > -100.0) {
          const double sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
          const double rs = std::sqrt(1.0 - xs);
          const double ep = std::exp(-0.5 * hk * xs / ((1.0 + rs) * (1.0 + rs))) / rs;
          sum += w[i] * std::exp(asr_i) * (sp - ep);
        }
      }
    }
    bvn = (a * sum - bvn) / tp;
  }
  if (r > 0.0) {
    bvn += normal_cdf(-std::max(h, k));
  } else if (h >= k) {
    bvn = -bvn;
  } else {
    const double l = h < 0.0 ? normal_cdf(k) - normal_cdf(h) : normal_cdf(-h) - normal_cdf(-k);
    bvn = l - bvn;
  }
  return std::clamp(bvn, 0.0, 1.0);
}

}  // namespace

double bvn_lower(double h, double k, double rho) {
  if (h == -kInf || k == -kInf) return 0.0;
  if (h == kInf) return normal_cdf(k);
  if (k == kInf) return normal_cdf(h);
  return bvn_upper(-h, -k, rho);
}

double bvn_rectangle(double a1, double b1, double a2, double b2, double rho) {
  if (!(b1 > a1) || !(b2 > a2)) return 0.0;
  const double p = bvn_lower(b1, b2, rho) - bvn_lower(a1, b2, rho) - bvn_lower(b1, a2, rho) +
                   bvn_lower(a1, a2, rho);
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace cascade::numerics
