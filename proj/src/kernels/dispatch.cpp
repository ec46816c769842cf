#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "gearcalib/kernels.hpp"

namespace gearcalib::kernels {

namespace {

constexpr Table kScalar{&scalar::residual_moments, &scalar::affine_residuals, &scalar::sum,
                        &scalar::centered_cross};
#if defined(GEARCALIB_HAVE_AVX2)
constexpr Table kAvx2{&avx2::residual_moments, &avx2::affine_residuals, &avx2::sum,
                      &avx2::centered_cross};
#endif

bool cpu_has_avx2() {
#if defined(GEARCALIB_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Isa initial_isa() {
  if (const char* env = std::getenv("GEARCALIB_SIMD"); env && std::string(env) == "scalar")
    return Isa::scalar;
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

bool isa_supported(Isa isa) { return isa == Isa::scalar || cpu_has_avx2(); }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::runtime_error("instruction set not supported: " + std::string(isa_name(isa)));
  current().store(isa, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

const Table& table_for(Isa isa) {
#if defined(GEARCALIB_HAVE_AVX2)
  if (isa == Isa::avx2) return kAvx2;
#endif
  (void)isa;
  return kScalar;
}

void residual_moments(const SharedCovariateBlock& b, std::span<double> sum_out,
                      std::span<double> sumsq_out) {
  if (sum_out.size() < b.rows || sumsq_out.size() < b.rows)
    throw std::invalid_argument("residual_moments: output too small");
  table_for(active_isa()).residual_moments(b, sum_out.data(), sumsq_out.data());
}

void affine_residuals(const MultiCovariateBlock& b, std::span<double> out) {
  if (out.size() < b.rows) throw std::invalid_argument("affine_residuals: output too small");
  table_for(active_isa()).affine_residuals(b, out.data());
}

double sum(std::span<const double> x) { return table_for(active_isa()).sum(x.data(), x.size()); }

CrossMoments centered_cross(std::span<const double> xc, std::span<const double> y, double ybar) {
  if (xc.size() != y.size()) throw std::invalid_argument("centered_cross: length mismatch");
  return table_for(active_isa()).centered_cross(xc.data(), y.data(), y.size(), ybar);
}

}  // namespace gearcalib::kernels
