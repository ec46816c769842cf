#pragma once

// Least-squares prediction of the pooled GAJ:GAJ+ ratio from one camera's
// MaxN and that camera's own ratio, for surveys pairing a single camera with
// the echosounder.

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gearcalib/dataset.hpp"

namespace gearcalib {

inline constexpr std::array<const char*, 3> kRatioColumns{"intercept", "log_maxn_plus_1",
                                                          "camera_ratio"};

/// Rank-deficient design; `column` names the first column that is a linear
/// combination of the ones before it.
class CollinearityError : public std::invalid_argument {
 public:
  explicit CollinearityError(std::string column)
      : std::invalid_argument("rank-deficient design: column '" + column +
                              "' is collinear with earlier columns"),
        column_(std::move(column)) {}
  const std::string& column() const { return column_; }

 private:
  std::string column_;
};

struct RatioRegressionModel {
  Camera camera = Camera::D;
  Eigen::Vector3d coef = Eigen::Vector3d::Zero();  // intercept, log(maxn+1), camera ratio
  Eigen::Matrix3d xtx_inverse = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();  // s2 * xtx_inverse
  double s2 = 0.0;
  double r2 = 0.0;
  int n = 0;
  // Observed design ranges, used to flag extrapolation.
  double log_maxn_min = 0.0, log_maxn_max = 0.0;
  double camratio_min = 0.0, camratio_max = 0.0;
};

/// OLS of r on (1, log(y+1), camera ratio) over trips where the camera is
/// present and its ratio defined. Needs n >= 4.
RatioRegressionModel fit_ratio_regression(const std::vector<TripRecord>& trips,
                                          const std::vector<std::array<std::optional<double>, kCameraCount>>& camera_ratios,
                                          Camera camera);

/// Same fit from explicit columns.
RatioRegressionModel fit_ratio_regression(Camera camera, const std::vector<double>& pooled_ratio,
                                          const std::vector<std::int64_t>& maxn,
                                          const std::vector<double>& camratio);

struct RatioPrediction {
  double r_hat = 0.0;
  double pred_se = 0.0;
  bool out_of_range = false;  // r_hat outside [1e-6, 1 + 1e-6]; reported, never clipped
  bool extrapolation = false;  // inputs outside the fitted design range
  std::string caveat;
};

/// Caveat attached to every prediction.
extern const char* const kRatioCaveat;

/// Throws std::invalid_argument for maxn < 0 or camratio outside [0, 1 + 1e-6].
RatioPrediction predict_pooled_ratio(const RatioRegressionModel& model, std::int64_t maxn, double camratio);

}  // namespace gearcalib
