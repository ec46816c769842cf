#include "gearcalib/kernels.hpp"

#include <immintrin.h>

namespace gearcalib::kernels::avx2 {

namespace {

// (l0 + l1) + (l2 + l3), matching the scalar lane combination.
inline double combine_lanes(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d lo_sum = _mm_add_sd(lo, _mm_unpackhi_pd(lo, lo));
  const __m128d hi_sum = _mm_add_sd(hi, _mm_unpackhi_pd(hi, hi));
  return _mm_cvtsd_f64(_mm_add_sd(lo_sum, hi_sum));
}

}  // namespace

void residual_moments(const SharedCovariateBlock& b, double* sum_out, double* sumsq_out) {
  const std::size_t body = b.rows - b.rows % 4;
  const __m256d shift = _mm256_set1_pd(b.x_shift);
  __m256d icpt[4], slope[4];
  for (int l = 0; l < b.responses; ++l) {
    icpt[l] = _mm256_set1_pd(b.intercept[l]);
    slope[l] = _mm256_set1_pd(b.slope[l]);
  }
  for (std::size_t s = 0; s < body; s += 4) {
    const __m256d xs = _mm256_sub_pd(_mm256_loadu_pd(b.x + s), shift);
    __m256d acc = _mm256_setzero_pd();
    __m256d acc2 = _mm256_setzero_pd();
    for (int l = 0; l < b.responses; ++l) {
      const __m256d y = _mm256_loadu_pd(b.y[l] + s);
      const __m256d e = _mm256_sub_pd(_mm256_sub_pd(y, icpt[l]), _mm256_mul_pd(slope[l], xs));
      acc = _mm256_add_pd(acc, e);
      acc2 = _mm256_add_pd(acc2, _mm256_mul_pd(e, e));
    }
    _mm256_storeu_pd(sum_out + s, acc);
    _mm256_storeu_pd(sumsq_out + s, acc2);
  }
  if (body < b.rows) {
    SharedCovariateBlock tail = b;
    tail.rows = b.rows - body;
    tail.x = b.x + body;
    for (int l = 0; l < b.responses; ++l) tail.y[l] = b.y[l] + body;
    scalar::residual_moments(tail, sum_out + body, sumsq_out + body);
  }
}

void affine_residuals(const MultiCovariateBlock& b, double* out) {
  const std::size_t body = b.rows - b.rows % 4;
  const __m256d icpt = _mm256_set1_pd(b.intercept);
  __m256d shift[4], coef[4];
  for (int k = 0; k < b.covariates; ++k) {
    shift[k] = _mm256_set1_pd(b.shift[k]);
    coef[k] = _mm256_set1_pd(b.coef[k]);
  }
  for (std::size_t s = 0; s < body; s += 4) {
    __m256d e = _mm256_sub_pd(_mm256_loadu_pd(b.y + s), icpt);
    for (int k = 0; k < b.covariates; ++k) {
      const __m256d zk = _mm256_sub_pd(_mm256_loadu_pd(b.z[k] + s), shift[k]);
      e = _mm256_sub_pd(e, _mm256_mul_pd(coef[k], zk));
    }
    _mm256_storeu_pd(out + s, e);
  }
  if (body < b.rows) {
    MultiCovariateBlock tail = b;
    tail.rows = b.rows - body;
    tail.y = b.y + body;
    for (int k = 0; k < b.covariates; ++k) tail.z[k] = b.z[k] + body;
    scalar::affine_residuals(tail, out + body);
  }
}

double sum(const double* x, std::size_t n) {
  const std::size_t body = n - n % 4;
  __m256d acc = _mm256_setzero_pd();
  for (std::size_t i = 0; i < body; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double total = combine_lanes(acc);
  for (std::size_t i = body; i < n; ++i) total = total + x[i];
  return total;
}

CrossMoments centered_cross(const double* xc, const double* y, std::size_t n, double ybar) {
  const std::size_t body = n - n % 4;
  const __m256d mean = _mm256_set1_pd(ybar);
  __m256d axy = _mm256_setzero_pd();
  __m256d ayy = _mm256_setzero_pd();
  for (std::size_t i = 0; i < body; i += 4) {
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(y + i), mean);
    axy = _mm256_add_pd(axy, _mm256_mul_pd(_mm256_loadu_pd(xc + i), d));
    ayy = _mm256_add_pd(ayy, _mm256_mul_pd(d, d));
  }
  CrossMoments m{combine_lanes(axy), combine_lanes(ayy)};
  for (std::size_t i = body; i < n; ++i) {
    const double d = y[i] - ybar;
    m.sxy = m.sxy + xc[i] * d;
    m.syy = m.syy + d * d;
  }
  return m;
}

}  // namespace gearcalib::kernels::avx2
