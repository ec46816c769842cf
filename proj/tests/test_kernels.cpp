#include <doctest.h>

#include <bit>
#include <vector>

#include "gearcalib/kernels.hpp"
#include "gearcalib/rng.hpp"

using namespace gearcalib;
using namespace gearcalib::kernels;

namespace {

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

std::vector<double> randn(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("scalar and avx2 kernels agree bit for bit") {
  if (!isa_supported(Isa::avx2)) {
    MESSAGE("AVX2 not available; equivalence not exercised");
    return;
  }
  const Table& s = table_for(Isa::scalar);
  const Table& v = table_for(Isa::avx2);
  Rng rng(2024, 0);
  for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 13u, 21u, 126u, 1001u}) {
    CAPTURE(n);
    const auto x = randn(rng, n, 3.0);
    std::vector<std::vector<double>> y;
    for (int l = 0; l < 4; ++l) y.push_back(randn(rng, n, 2.0));

    for (int responses = 1; responses <= 4; ++responses) {
      SharedCovariateBlock b;
      b.rows = n;
      b.x = x.data();
      b.x_shift = 0.37;
      b.responses = responses;
      for (int l = 0; l < responses; ++l) {
        b.y[l] = y[l].data();
        b.intercept[l] = rng.normal();
        b.slope[l] = std::exp(rng.normal());
      }
      std::vector<double> s1(n), s2(n), v1(n), v2(n);
      s.residual_moments(b, s1.data(), s2.data());
      v.residual_moments(b, v1.data(), v2.data());
      for (std::size_t k = 0; k < n; ++k) {
        CHECK(same_bits(s1[k], v1[k]));
        CHECK(same_bits(s2[k], v2[k]));
      }
    }
    for (int cov = 0; cov <= 4; ++cov) {
      MultiCovariateBlock b;
      b.rows = n;
      b.y = y[0].data();
      b.intercept = 0.25;
      b.covariates = cov;
      for (int k = 0; k < cov; ++k) {
        b.z[k] = (k == 0 ? x : y[k]).data();
        b.shift[k] = rng.normal();
        b.coef[k] = rng.normal();
      }
      std::vector<double> a1(n), a2(n);
      s.affine_residuals(b, a1.data());
      v.affine_residuals(b, a2.data());
      for (std::size_t k = 0; k < n; ++k) CHECK(same_bits(a1[k], a2[k]));
    }
    CHECK(same_bits(s.sum(x.data(), n), v.sum(x.data(), n)));
    const auto cs = s.centered_cross(x.data(), y[1].data(), n, 0.5);
    const auto cv = v.centered_cross(x.data(), y[1].data(), n, 0.5);
    CHECK(same_bits(cs.sxy, cv.sxy));
    CHECK(same_bits(cs.syy, cv.syy));
  }
}

TEST_CASE("scalar kernels match direct formulas") {
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  const std::vector<double> y{2, 4, 6, 8, 10, 12};
  CHECK(table_for(Isa::scalar).sum(x.data(), x.size()) == 21.0);
  SharedCovariateBlock b;
  b.rows = 6;
  b.x = x.data();
  b.x_shift = 0.0;
  b.responses = 2;
  b.y = {y.data(), x.data()};
  b.intercept = {0.0, 1.0};
  b.slope = {2.0, 1.0};
  std::vector<double> s1(6), s2(6);
  table_for(Isa::scalar).residual_moments(b, s1.data(), s2.data());
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(s1[k] == -1.0);
    CHECK(s2[k] == 1.0);
  }
}

TEST_CASE("dispatch can be forced to scalar") {
  const Isa before = active_isa();
  set_isa(Isa::scalar);
  CHECK(active_isa() == Isa::scalar);
  CHECK(isa_name(Isa::scalar) == "scalar");
  set_isa(before);
}
