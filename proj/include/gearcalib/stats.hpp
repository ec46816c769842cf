#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gearcalib {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2*pi)

inline double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * kLog2Pi - std::log(sd) - 0.5 * z * z;
}

/// log Pois(count | exp(log_rate)); lgamma term supplied by the caller when hot.
inline double poisson_logpmf_lograte(double count, double log_rate, double lgamma_count_p1) {
  return count * log_rate - std::exp(log_rate) - lgamma_count_p1;
}

inline double poisson_logpmf(std::int64_t count, double rate) {
  const double k = static_cast<double>(count);
  if (rate <= 0.0) return count == 0 ? 0.0 : -INFINITY;
  return k * std::log(rate) - rate - std::lgamma(k + 1.0);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }
inline double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double mean(std::span<const double> x);
/// Sample variance with the n-1 denominator; 0 for fewer than two values.
double variance(std::span<const double> x);
double covariance(std::span<const double> x, std::span<const double> y);
/// Pearson correlation; 0 when either input is constant.
double correlation(std::span<const double> x, std::span<const double> y);

/// Empirical quantile, linear interpolation between order statistics
/// (Hyndman-Fan type 7). `p` in [0, 1].
double quantile(std::span<const double> x, double p);
double median(std::span<const double> x);

struct Interval {
  double lo;
  double hi;
  bool contains(double v) const { return lo <= v && v <= hi; }
};

/// Central credible interval of the given mass from type-7 quantiles.
Interval central_interval(std::span<const double> x, double mass);

/// Hex SHA-256 digest of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace gearcalib
