#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "gearcalib/ratio.hpp"
#include "gearcalib/rng.hpp"

using namespace gearcalib;

TEST_CASE("exact linear data is recovered with R2 = 1") {
  std::vector<std::int64_t> y{0, 3, 7, 12, 1, 20};
  std::vector<double> cr{0.1, 0.9, 0.4, 0.7, 0.3, 0.55}, r;
  for (double c : cr) r.push_back(0.2 + 0.8 * c);
  const auto m = fit_ratio_regression(Camera::S, r, y, cr);
  CHECK(m.coef(0) == doctest::Approx(0.2));
  CHECK(m.coef(1) == doctest::Approx(0.0).scale(1.0));
  CHECK(m.coef(2) == doctest::Approx(0.8));
  CHECK(m.r2 == doctest::Approx(1.0));
  CHECK(m.n == 6);
}

TEST_CASE("collinear designs name the offending column") {
  std::vector<std::int64_t> y{0, 3, 7, 12, 1};
  std::vector<double> r{0.1, 0.2, 0.3, 0.4, 0.5};
  try {
    (void)fit_ratio_regression(Camera::D, r, y, std::vector<double>(5, 0.4));
    FAIL("expected CollinearityError");
  } catch (const CollinearityError& e) {
    CHECK(e.column() == "camera_ratio");
  }
  try {
    (void)fit_ratio_regression(Camera::D, r, std::vector<std::int64_t>(5, 2), {0.1, 0.5, 0.2, 0.9, 0.4});
    FAIL("expected CollinearityError");
  } catch (const CollinearityError& e) {
    CHECK(e.column() == "log_maxn_plus_1");
  }
  CHECK_THROWS_AS(fit_ratio_regression(Camera::D, {0.1, 0.2, 0.3}, {1, 2, 3}, {0.1, 0.2, 0.4}),
                  std::invalid_argument);
}

TEST_CASE("property: OLS matches normal equations; pred_se >= s; residuals orthogonal") {
  Rng rng(51, 0);
  for (int rep = 0; rep < 1000; ++rep) {
    const int n = 4 + static_cast<int>(rng.uniform() * 30);
    std::vector<std::int64_t> y(n);
    std::vector<double> cr(n), r(n);
    Eigen::MatrixXd x(n, 3);
    Eigen::VectorXd yy(n);
    for (int s = 0; s < n; ++s) {
      y[s] = rng.poisson(20.0 * rng.uniform());
      cr[s] = rng.uniform();
      r[s] = 0.1 + 0.05 * std::log(y[s] + 1.0) + 0.6 * cr[s] + 0.05 * rng.normal();
      x.row(s) << 1.0, std::log(static_cast<double>(y[s]) + 1.0), cr[s];
      yy(s) = r[s];
    }
    RatioRegressionModel m;
    try {
      m = fit_ratio_regression(Camera::T, r, y, cr);
    } catch (const CollinearityError&) {
      continue;
    }
    const Eigen::Matrix3d xtx = x.transpose() * x;
    const Eigen::Vector3d oracle = xtx.ldlt().solve(x.transpose() * yy);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(m.coef(k) - oracle(k)) < 1e-10 * std::max(1.0, std::abs(oracle(k))));
    const Eigen::VectorXd resid = yy - x * m.coef;
    CHECK((x.transpose() * resid).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((m.covariance - m.covariance.transpose()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(m.covariance).eigenvalues().minCoeff() > -1e-12);
    const auto p = predict_pooled_ratio(m, rng.poisson(10.0), rng.uniform());
    CHECK(p.pred_se >= std::sqrt(m.s2));
  }
}

TEST_CASE("prediction examples") {
  RatioRegressionModel zero;
  zero.coef << 0.3, 0.1, 0.5;
  auto p = predict_pooled_ratio(zero, 4, 0.5);
  CHECK(p.pred_se == 0.0);
  CHECK(p.r_hat == doctest::Approx(0.3 + 0.1 * std::log(5.0) + 0.25));
  CHECK(predict_pooled_ratio(zero, 0, 0.2).r_hat == doctest::Approx(0.3 + 0.5 * 0.2));
  CHECK_FALSE(p.caveat.empty());
  CHECK_THROWS_AS(predict_pooled_ratio(zero, 1, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(predict_pooled_ratio(zero, -1, 0.5), std::invalid_argument);

  zero.coef << 0.9, 0.1, 0.5;
  p = predict_pooled_ratio(zero, 20, 0.9);
  CHECK(p.out_of_range);
  CHECK(p.r_hat > 1.0);
}

TEST_CASE("centered orthogonal design: pred_se^2 at the mean is s2 (1 + 1/n)") {
  // x1 = log(y + 1) and camratio chosen symmetric so that, after centering,
  // the columns are orthogonal to each other and to the intercept.
  const std::vector<std::int64_t> y{0, 0, 3, 3, 0, 0, 3, 3};
  const std::vector<double> cr{0.2, 0.8, 0.2, 0.8, 0.2, 0.8, 0.2, 0.8};
  const std::vector<double> r{0.21, 0.60, 0.33, 0.78, 0.15, 0.66, 0.29, 0.70};
  const auto m = fit_ratio_regression(Camera::S, r, y, cr);
  const double xbar = std::log(4.0) / 2.0;
  const auto p = predict_pooled_ratio(m, 0, 0.5);
  // The mean of log(y+1) is not reachable with integer maxn; evaluate directly.
  const Eigen::Vector3d x0(1.0, xbar, 0.5);
  const double se2 = m.s2 * (1.0 + x0.dot(m.xtx_inverse * x0));
  CHECK(se2 == doctest::Approx(m.s2 * (1.0 + 1.0 / 8.0)).epsilon(1e-12));
  CHECK(p.pred_se >= std::sqrt(m.s2));
}

TEST_CASE("r_hat is monotone in camratio when its coefficient is positive") {
  RatioRegressionModel m;
  m.coef << 0.1, 0.02, 0.7;
  double prev = -1.0;
  for (double c = 0.0; c <= 1.0; c += 0.05) {
    const double v = predict_pooled_ratio(m, 3, c).r_hat;
    CHECK(v > prev);
    prev = v;
  }
}
