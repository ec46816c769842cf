#include "gearcalib/kernels.hpp"

namespace gearcalib::kernels::scalar {

void residual_moments(const SharedCovariateBlock& b, double* sum_out, double* sumsq_out) {
  for (std::size_t s = 0; s < b.rows; ++s) {
    const double xs = b.x[s] - b.x_shift;
    double acc = 0.0;
    double acc2 = 0.0;
    for (int l = 0; l < b.responses; ++l) {
      const double e = (b.y[l][s] - b.intercept[l]) - b.slope[l] * xs;
      acc = acc + e;
      acc2 = acc2 + e * e;
    }
    sum_out[s] = acc;
    sumsq_out[s] = acc2;
  }
}

void affine_residuals(const MultiCovariateBlock& b, double* out) {
  for (std::size_t s = 0; s < b.rows; ++s) {
    double e = b.y[s] - b.intercept;
    for (int k = 0; k < b.covariates; ++k) e = e - b.coef[k] * (b.z[k][s] - b.shift[k]);
    out[s] = e;
  }
}

double sum(const double* x, std::size_t n) {
  double lane[4] = {0.0, 0.0, 0.0, 0.0};
  const std::size_t body = n - n % 4;
  for (std::size_t i = 0; i < body; i += 4)
    for (int k = 0; k < 4; ++k) lane[k] = lane[k] + x[i + k];
  double total = (lane[0] + lane[1]) + (lane[2] + lane[3]);
  for (std::size_t i = body; i < n; ++i) total = total + x[i];
  return total;
}

CrossMoments centered_cross(const double* xc, const double* y, std::size_t n, double ybar) {
  double lxy[4] = {0.0, 0.0, 0.0, 0.0};
  double lyy[4] = {0.0, 0.0, 0.0, 0.0};
  const std::size_t body = n - n % 4;
  for (std::size_t i = 0; i < body; i += 4) {
    for (int k = 0; k < 4; ++k) {
      const double d = y[i + k] - ybar;
      lxy[k] = lxy[k] + xc[i + k] * d;
      lyy[k] = lyy[k] + d * d;
    }
  }
  CrossMoments m{(lxy[0] + lxy[1]) + (lxy[2] + lxy[3]), (lyy[0] + lyy[1]) + (lyy[2] + lyy[3])};
  for (std::size_t i = body; i < n; ++i) {
    const double d = y[i] - ybar;
    m.sxy = m.sxy + xc[i] * d;
    m.syy = m.syy + d * d;
  }
  return m;
}

}  // namespace gearcalib::kernels::scalar
