#pragma once

// Data-parallel inner loops shared by the log-posterior and the per-draw
// least-squares fits. Each kernel has a scalar reference and an AVX2 variant;
// the variant is chosen once at startup from CPUID (override with the
// environment variable GEARCALIB_SIMD=scalar).
//
// The two variants are bitwise identical: elementwise kernels apply the same
// operation sequence per row, and reductions use four interleaved partial sums
// (element i feeds lane i mod 4, lanes combined as (l0 + l1) + (l2 + l3), the
// remaining tail added in order). No kernel uses fused multiply-add. Seeded
// runs therefore reproduce across machines with and without AVX2.

#include <array>
#include <cstddef>
#include <span>
#include <string_view>

namespace gearcalib::kernels {

enum class Isa { scalar, avx2 };

/// Rows share one covariate x. For each response column l < responses:
///   e_l = (y_l[s] - intercept_l) - slope_l * (x[s] - x_shift)
/// and the kernel writes sum_l e_l and sum_l e_l^2 for every row s.
struct SharedCovariateBlock {
  std::size_t rows = 0;
  const double* x = nullptr;
  double x_shift = 0.0;
  int responses = 0;  // 1..4
  std::array<const double*, 4> y{};
  std::array<double, 4> intercept{};
  std::array<double, 4> slope{};
};

/// One response with up to four shifted covariates:
///   e = (y[s] - intercept) - sum_k coef_k * (z_k[s] - shift_k), k in order.
struct MultiCovariateBlock {
  std::size_t rows = 0;
  const double* y = nullptr;
  double intercept = 0.0;
  int covariates = 0;  // 0..4
  std::array<const double*, 4> z{};
  std::array<double, 4> shift{};
  std::array<double, 4> coef{};
};

struct CrossMoments {
  double sxy = 0.0;  // sum xc * (y - ybar)
  double syy = 0.0;  // sum (y - ybar)^2
};

struct Table {
  void (*residual_moments)(const SharedCovariateBlock&, double* sum_out, double* sumsq_out);
  void (*affine_residuals)(const MultiCovariateBlock&, double* out);
  double (*sum)(const double* x, std::size_t n);
  CrossMoments (*centered_cross)(const double* xc, const double* y, std::size_t n, double ybar);
};

namespace scalar {
void residual_moments(const SharedCovariateBlock& b, double* sum_out, double* sumsq_out);
void affine_residuals(const MultiCovariateBlock& b, double* out);
double sum(const double* x, std::size_t n);
CrossMoments centered_cross(const double* xc, const double* y, std::size_t n, double ybar);
}  // namespace scalar

#if defined(GEARCALIB_HAVE_AVX2)
namespace avx2 {
void residual_moments(const SharedCovariateBlock& b, double* sum_out, double* sumsq_out);
void affine_residuals(const MultiCovariateBlock& b, double* out);
double sum(const double* x, std::size_t n);
CrossMoments centered_cross(const double* xc, const double* y, std::size_t n, double ybar);
}  // namespace avx2
#endif

bool isa_supported(Isa isa);
Isa active_isa();
/// Switch the dispatch table; throws std::runtime_error when unsupported.
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);
const Table& table_for(Isa isa);

// Dispatched entry points.
void residual_moments(const SharedCovariateBlock& b, std::span<double> sum_out,
                      std::span<double> sumsq_out);
void affine_residuals(const MultiCovariateBlock& b, std::span<double> out);
double sum(std::span<const double> x);
CrossMoments centered_cross(std::span<const double> xc, std::span<const double> y, double ybar);

}  // namespace gearcalib::kernels
