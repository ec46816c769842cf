#pragma once

// Per-draw least-squares post-processing of posterior draws: alignment of the
// latent abundance with acoustic and mark-recapture counts, camera-to-abundance
// calibration lines, and calibration errors.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gearcalib/dataset.hpp"
#include "gearcalib/inference.hpp"
#include "gearcalib/stats.hpp"

namespace gearcalib {

/// y = intercept + slope * x with a nonnegative slope.
struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double residual_sd = 0.0;  // sqrt(RSS / max(n - 2, 1))
  double r2 = 0.0;           // of the returned line, clipped to [0, 1]; 0 when y is constant
  int n_points = 0;
  bool clamped = false;  // OLS slope was negative: slope 0, intercept mean(y)
};

/// OLS of y on x, clamped to slope 0 when the OLS slope is negative.
/// Throws std::invalid_argument on length mismatch, n < 2 or constant x.
LineFit constrained_ls(std::span<const double> x, std::span<const double> y);

/// constrained_ls for many responses sharing one x. `y_rows` is row-major,
/// one row of x.size() values per fit.
std::vector<LineFit> constrained_ls_rows(std::span<const double> x, std::span<const double> y_rows);

struct Summary {
  double mean = 0.0, median = 0.0, variance = 0.0, q05 = 0.0, q95 = 0.0;
};
Summary summarize(std::span<const double> x);

/// Per-draw coefficient arrays of one family of regressions.
struct LineFamily {
  std::vector<double> intercept, slope, r2;
  std::size_t n_clamped = 0;
  int n_points = 0;
  Summary intercept_summary, slope_summary;
  double median_r2 = 0.0;
  double covariance = 0.0;   // Cov(intercept, slope) over draws
  double correlation = 0.0;  // Corr(intercept, slope) over draws

  /// (median intercept, median slope).
  double median_intercept() const { return intercept_summary.median; }
  double median_slope() const { return slope_summary.median; }
};

struct AdequacyBlock {
  LineFamily acoustic;  // phi on r N, all trips
  std::optional<LineFamily> markrecapture;  // phi on N_mr, trips with an estimate
  bool markrecapture_omitted = false;       // fewer than 2 trips with N_mr
  std::optional<Summary> rho;               // when the draws carry a single rho
};

/// phi per draw (exp of the stored log phi) for the given trips, row-major M x n.
std::vector<double> phi_matrix(const PosteriorDraws& draws, const std::vector<TripRecord>& trips);

AdequacyBlock adequacy_alignment(const PosteriorDraws& draws, const std::vector<TripRecord>& trips);

struct ErrorRow {
  std::string trip_id;
  std::string reef_type;
  int boat = 0, reef_size = 0;
  std::int64_t maxn = 0;
  double median = 0.0, lo = 0.0, hi = 0.0;  // of (median-line value - phi), 80% central
};

struct CameraCalibration {
  Camera camera = Camera::D;
  LineFamily fit;  // phi on y_camera
  std::vector<ErrorRow> errors;
};

/// Per-draw constrained fits of phi on the observed counts of one camera.
/// Throws std::invalid_argument when fewer than 3 trips observe the camera.
CameraCalibration derive_calibration(const PosteriorDraws& draws, const std::vector<TripRecord>& trips,
                                     Camera camera);

/// Error rows for every trip observing the camera, using the entry's median line.
std::vector<ErrorRow> calibration_error(const PosteriorDraws& draws, const CameraCalibration& entry,
                                        const std::vector<TripRecord>& trips);

struct CalibratedEstimate {
  double estimate = 0.0;
  double approx_se = 0.0;
};

/// Median line at maxn, with SE from the posterior covariance of (b0, b1).
CalibratedEstimate apply_calibration(const CameraCalibration& entry, std::int64_t maxn);

}  // namespace gearcalib
