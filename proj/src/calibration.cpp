#include "gearcalib/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gearcalib/kernels.hpp"
#include "gearcalib/model.hpp"

namespace gearcalib {

namespace {

struct CenteredX {
  std::vector<double> xc;
  double mean = 0.0;
  double sxx = 0.0;
};

CenteredX center(std::span<const double> x) {
  if (x.size() < 2) throw std::invalid_argument("least squares needs at least 2 points");
  CenteredX c;
  c.mean = kernels::sum(x) / static_cast<double>(x.size());
  c.xc.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) c.xc[i] = x[i] - c.mean;
  c.sxx = kernels::centered_cross(c.xc, x, c.mean).syy;
  if (!(c.sxx > 0.0)) throw std::invalid_argument("least squares with constant x");
  return c;
}

LineFit fit_centered(const CenteredX& cx, std::span<const double> y) {
  const std::size_t n = y.size();
  const double ybar = kernels::sum(y) / static_cast<double>(n);
  const auto m = kernels::centered_cross(cx.xc, y, ybar);
  LineFit f;
  f.n_points = static_cast<int>(n);
  double rss;
  const double ols = m.sxy / cx.sxx;
  if (ols < 0.0) {
    f.clamped = true;
    f.slope = 0.0;
    f.intercept = ybar;
    rss = m.syy;
  } else {
    f.slope = ols;
    f.intercept = ybar - ols * cx.mean;
    rss = std::max(0.0, m.syy - ols * m.sxy);
  }
  f.residual_sd = std::sqrt(rss / static_cast<double>(std::max<std::size_t>(n - 2, 1)));
  f.r2 = m.syy > 0.0 ? std::clamp(1.0 - rss / m.syy, 0.0, 1.0) : 0.0;
  return f;
}

LineFamily gather(std::span<const double> x, std::span<const double> rows) {
  const auto fits = constrained_ls_rows(x, rows);
  LineFamily fam;
  fam.n_points = static_cast<int>(x.size());
  for (const auto& f : fits) {
    fam.intercept.push_back(f.intercept);
    fam.slope.push_back(f.slope);
    fam.r2.push_back(f.r2);
    fam.n_clamped += f.clamped;
  }
  fam.intercept_summary = summarize(fam.intercept);
  fam.slope_summary = summarize(fam.slope);
  fam.median_r2 = median(fam.r2);
  fam.covariance = covariance(fam.intercept, fam.slope);
  fam.correlation = correlation(fam.intercept, fam.slope);
  return fam;
}

/// Rows of the phi matrix restricted to some trip columns.
std::vector<double> select_columns(std::span<const double> phi, std::size_t n,
                                   const std::vector<std::size_t>& keep) {
  const std::size_t m = phi.size() / n;
  std::vector<double> out;
  out.reserve(m * keep.size());
  for (std::size_t d = 0; d < m; ++d)
    for (std::size_t s : keep) out.push_back(phi[d * n + s]);
  return out;
}

}  // namespace

LineFit constrained_ls(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("x and y lengths differ");
  return fit_centered(center(x), y);
}

std::vector<LineFit> constrained_ls_rows(std::span<const double> x, std::span<const double> y_rows) {
  const std::size_t n = x.size();
  if (n == 0 || y_rows.size() % n != 0) throw std::invalid_argument("response rows do not match x");
  const CenteredX cx = center(x);
  std::vector<LineFit> out(y_rows.size() / n);
  for (std::size_t m = 0; m < out.size(); ++m) out[m] = fit_centered(cx, y_rows.subspan(m * n, n));
  return out;
}

Summary summarize(std::span<const double> x) {
  Summary s;
  if (x.empty()) return s;
  s.mean = mean(x);
  s.median = median(x);
  s.variance = variance(x);
  s.q05 = quantile(x, 0.05);
  s.q95 = quantile(x, 0.95);
  return s;
}

std::vector<double> phi_matrix(const PosteriorDraws& draws, const std::vector<TripRecord>& trips) {
  std::vector<std::size_t> cols;
  for (const auto& t : trips) cols.push_back(draws.index(ModelGraph::log_phi_name(t)));
  const std::size_t n = trips.size();
  std::vector<double> out(draws.n_draws() * n);
  for (std::size_t d = 0; d < draws.n_draws(); ++d)
    for (std::size_t s = 0; s < n; ++s) out[d * n + s] = std::exp(draws.value(d, cols[s]));
  return out;
}

AdequacyBlock adequacy_alignment(const PosteriorDraws& draws, const std::vector<TripRecord>& trips) {
  const auto phi = phi_matrix(draws, trips);
  const std::size_t n = trips.size();
  AdequacyBlock block;

  std::vector<double> rn(n);
  for (std::size_t s = 0; s < n; ++s)
    rn[s] = trips[s].pooled_ratio * static_cast<double>(trips[s].acoustic_total);
  block.acoustic = gather(rn, phi);

  std::vector<std::size_t> mr_trips;
  std::vector<double> nmr;
  for (std::size_t s = 0; s < n; ++s)
    if (trips[s].markrecapture) {
      mr_trips.push_back(s);
      nmr.push_back(static_cast<double>(*trips[s].markrecapture));
    }
  if (mr_trips.size() < 2) {
    block.markrecapture_omitted = true;
  } else {
    block.markrecapture = gather(nmr, select_columns(phi, n, mr_trips));
  }
  if (draws.has("rho")) block.rho = summarize(draws.column("rho"));
  return block;
}

CameraCalibration derive_calibration(const PosteriorDraws& draws, const std::vector<TripRecord>& trips,
                                     Camera camera) {
  std::vector<std::size_t> keep;
  std::vector<double> y;
  for (std::size_t s = 0; s < trips.size(); ++s)
    if (const auto& m = trips[s].maxn[index_of(camera)]) {
      keep.push_back(s);
      y.push_back(static_cast<double>(*m));
    }
  if (keep.size() < 3)
    throw std::invalid_argument(std::string("camera ") + camera_code(camera) +
                                " is observed on fewer than 3 trips");
  const auto phi = phi_matrix(draws, trips);
  CameraCalibration entry;
  entry.camera = camera;
  entry.fit = gather(y, select_columns(phi, trips.size(), keep));
  entry.errors = calibration_error(draws, entry, trips);
  return entry;
}

std::vector<ErrorRow> calibration_error(const PosteriorDraws& draws, const CameraCalibration& entry,
                                        const std::vector<TripRecord>& trips) {
  const double b0 = entry.fit.median_intercept(), b1 = entry.fit.median_slope();
  std::vector<ErrorRow> rows;
  std::vector<double> err(draws.n_draws());
  for (const auto& t : trips) {
    const auto& m = t.maxn[index_of(entry.camera)];
    if (!m) continue;
    const double line = b0 + b1 * static_cast<double>(*m);
    const std::size_t col = draws.index(ModelGraph::log_phi_name(t));
    for (std::size_t d = 0; d < draws.n_draws(); ++d) err[d] = line - std::exp(draws.value(d, col));
    const auto iv = central_interval(err, 0.80);
    rows.push_back({t.trip_id, t.reef_type, t.boat, t.reef_size, *m, median(err), iv.lo, iv.hi});
  }
  return rows;
}

CalibratedEstimate apply_calibration(const CameraCalibration& entry, std::int64_t maxn) {
  if (maxn < 0) throw std::invalid_argument("maxn must be nonnegative");
  const double m = static_cast<double>(maxn);
  const auto& f = entry.fit;
  const double var = f.intercept_summary.variance + m * m * f.slope_summary.variance + 2.0 * m * f.covariance;
  return {f.median_intercept() + f.median_slope() * m, std::sqrt(std::max(0.0, var))};
}

}  // namespace gearcalib
