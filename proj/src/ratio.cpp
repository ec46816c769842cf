#include "gearcalib/ratio.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace gearcalib {

const char* const kRatioCaveat =
    "r_hat predicts the pooled GAJ:GAJ+ ratio only. Whether r_hat times the acoustic count is "
    "itself an abundance estimate is not established, and no uncertainty from r_hat is "
    "propagated into that product.";

namespace {

void check_rank(const Eigen::MatrixXd& x) {
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x.leftCols(j + 1));
    qr.setThreshold(1e-10);
    if (qr.rank() < j + 1) throw CollinearityError(kRatioColumns[static_cast<std::size_t>(j)]);
  }
}

}  // namespace

RatioRegressionModel fit_ratio_regression(Camera camera, const std::vector<double>& pooled_ratio,
                                          const std::vector<std::int64_t>& maxn,
                                          const std::vector<double>& camratio) {
  const std::size_t n = pooled_ratio.size();
  if (maxn.size() != n || camratio.size() != n)
    throw std::invalid_argument("ratio regression columns differ in length");
  if (n < 4) throw std::invalid_argument("ratio regression needs at least 4 trips");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 3);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t s = 0; s < n; ++s) {
    if (maxn[s] < 0) throw std::invalid_argument("negative MaxN in ratio regression");
    const auto i = static_cast<Eigen::Index>(s);
    x(i, 0) = 1.0;
    x(i, 1) = std::log(static_cast<double>(maxn[s]) + 1.0);
    x(i, 2) = camratio[s];
    y(i) = pooled_ratio[s];
  }
  check_rank(x);

  RatioRegressionModel m;
  m.camera = camera;
  m.n = static_cast<int>(n);
  m.coef = x.householderQr().solve(y);
  const Eigen::Matrix3d xtx = x.transpose() * x;
  m.xtx_inverse = xtx.inverse();
  m.xtx_inverse = 0.5 * (m.xtx_inverse + m.xtx_inverse.transpose()).eval();
  const Eigen::VectorXd resid = y - x * m.coef;
  const double rss = resid.squaredNorm();
  m.s2 = rss / static_cast<double>(n - 3);
  m.covariance = m.s2 * m.xtx_inverse;
  const double tss = (y.array() - y.mean()).square().sum();
  m.r2 = tss > 0.0 ? std::clamp(1.0 - rss / tss, 0.0, 1.0) : 0.0;
  m.log_maxn_min = x.col(1).minCoeff();
  m.log_maxn_max = x.col(1).maxCoeff();
  m.camratio_min = x.col(2).minCoeff();
  m.camratio_max = x.col(2).maxCoeff();
  return m;
}

RatioRegressionModel fit_ratio_regression(
    const std::vector<TripRecord>& trips,
    const std::vector<std::array<std::optional<double>, kCameraCount>>& camera_ratios, Camera camera) {
  if (camera_ratios.size() != trips.size())
    throw std::invalid_argument("camera ratios do not match the trips");
  std::vector<double> r, cr;
  std::vector<std::int64_t> y;
  for (std::size_t s = 0; s < trips.size(); ++s) {
    const auto& m = trips[s].maxn[index_of(camera)];
    const auto& c = camera_ratios[s][index_of(camera)];
    if (!m || !c || !std::isfinite(trips[s].pooled_ratio)) continue;
    r.push_back(trips[s].pooled_ratio);
    y.push_back(*m);
    cr.push_back(*c);
  }
  return fit_ratio_regression(camera, r, y, cr);
}

RatioPrediction predict_pooled_ratio(const RatioRegressionModel& model, std::int64_t maxn, double camratio) {
  if (maxn < 0) throw std::invalid_argument("maxn must be nonnegative");
  if (!(camratio >= 0.0 && camratio <= 1.0 + kRatioShift))
    throw std::invalid_argument("camratio must lie in [0, 1 + 1e-6]");
  const Eigen::Vector3d x0(1.0, std::log(static_cast<double>(maxn) + 1.0), camratio);
  RatioPrediction p;
  p.r_hat = x0.dot(model.coef);
  const double lev = x0.dot(model.xtx_inverse * x0);
  p.pred_se = std::sqrt(std::max(0.0, model.s2 * (1.0 + lev)));
  p.out_of_range = !(p.r_hat >= kRatioShift && p.r_hat <= 1.0 + kRatioShift);
  p.extrapolation = x0(1) < model.log_maxn_min || x0(1) > model.log_maxn_max ||
                    camratio < model.camratio_min || camratio > model.camratio_max;
  p.caveat = kRatioCaveat;
  return p;
}

}  // namespace gearcalib
