#include "support.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "gearcalib/rng.hpp"

namespace gearcalib::testing {

double dense_mvn(const std::vector<double>& e, double sigma, double rho) {
  const auto d = static_cast<Eigen::Index>(e.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(d, d, rho * sigma * sigma);
  cov.diagonal().setConstant(sigma * sigma);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(e.data(), d);
  const Eigen::VectorXd z = llt.matrixL().solve(x);
  double logdet = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
  return -0.5 * static_cast<double>(d) * kLog2Pi - 0.5 * logdet - 0.5 * z.squaredNorm();
}

std::pair<double, double> normal_equations(const std::vector<double>& x, const std::vector<double>& y) {
  double n = static_cast<double>(x.size()), sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return {(sy - b * sx) / n, b};
}

double trapezoid(const std::function<double(double)>& f, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  double s = 0.5 * (f(lo) + f(hi));
  for (int k = 1; k < n; ++k) s += f(lo + k * h);
  return s * h;
}

QuadratureSummary quadrature_summary(const std::function<double(double)>& log_density, double lo,
                                     double hi, int n) {
  const double h = (hi - lo) / n;
  std::vector<double> x(n + 1), lp(n + 1);
  double peak = -INFINITY;
  for (int k = 0; k <= n; ++k) {
    x[k] = lo + k * h;
    lp[k] = log_density(x[k]);
    peak = std::max(peak, lp[k]);
  }
  std::vector<double> w(n + 1);
  for (int k = 0; k <= n; ++k) w[k] = std::exp(lp[k] - peak);
  // Cumulative trapezoid mass, then linear inversion for quantiles.
  std::vector<double> cdf(n + 1, 0.0);
  double first = 0.0;
  for (int k = 1; k <= n; ++k) {
    cdf[k] = cdf[k - 1] + 0.5 * (w[k] + w[k - 1]) * h;
    first += 0.5 * (w[k] * x[k] + w[k - 1] * x[k - 1]) * h;
  }
  const double z = cdf[n];
  QuadratureSummary out;
  out.mean = first / z;
  const auto inv = [&](double p) {
    const double target = p * z;
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), target);
    const auto k = static_cast<std::size_t>(it - cdf.begin());
    if (k == 0) return x[0];
    const double f = (target - cdf[k - 1]) / (cdf[k] - cdf[k - 1]);
    return x[k - 1] + f * h;
  };
  out.q05 = inv(0.05);
  out.q95 = inv(0.95);
  return out;
}

TripRecord make_trip(std::string id, int boat, int reef, std::array<Count, 4> maxn,
                     std::int64_t n, Count mr, double r) {
  TripRecord t;
  t.trip_id = std::move(id);
  t.boat = boat;
  t.reef_size = reef;
  t.maxn = maxn;
  t.acoustic_total = n;
  t.acoustic_focal = n;
  t.markrecapture = mr;
  t.pooled_ratio = r;
  return t;
}

std::vector<TripRecord> random_trips(std::uint64_t seed, int n) {
  Rng rng(seed, 0);
  std::vector<TripRecord> trips;
  for (int s = 0; s < n; ++s) {
    const int boat = 1 + s % 2, reef = 1 + (s / 2) % 2;
    std::array<Count, 4> maxn{};
    for (int l = 0; l < 4; ++l)
      if (l == 1 || l == 2 || rng.uniform() < 0.7) maxn[l] = rng.poisson(5.0);
    Count mr;
    if (reef == 1 && rng.uniform() < 0.6) mr = rng.poisson(60.0);
    trips.push_back(make_trip("s" + std::to_string(s), boat, reef, maxn, rng.poisson(50.0), mr,
                              0.05 + 0.9 * rng.uniform()));
  }
  // Guarantee at least one mark-recapture estimate.
  trips[0].markrecapture = 40;
  assign_replicates(trips);
  return trips;
}

ParameterState random_state(const ModelGraph& graph, std::uint64_t seed) {
  Rng rng(seed, 1);
  ParameterState st;
  for (const auto& p : graph.population()) {
    const double u = p.prior.mean + 0.5 * rng.normal();
    for (const auto& a : p.aliases) st.population[a] = to_natural_scale(p.prior.transform, u);
  }
  const std::size_t n = graph.n_trips();
  st.log_phi.resize(n);
  st.log_mu.resize(n);
  st.log_tau1.resize(n);
  st.log_tau2.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    st.log_phi[s] = 3.0 + rng.normal();
    for (auto& m : st.log_mu[s]) m = 1.5 + rng.normal();
    st.log_tau1[s] = 3.5 + rng.normal();
    st.log_tau2[s] = 4.0 + rng.normal();
  }
  return st;
}

PackFixture pack_fixture(int n_draws, bool rov_rare) {
  PackFixture f;
  f.trips = random_trips(61, 14);
  if (rov_rare)
    for (std::size_t s = 2; s < f.trips.size(); ++s) f.trips[s].maxn[3].reset();
  Rng rng(62, 0);
  for (const auto& t : f.trips) {
    std::array<std::optional<double>, kCameraCount> r{};
    for (Camera c : kCameras)
      if (t.observed(c)) r[index_of(c)] = 0.2 + 0.6 * rng.uniform();
    f.ratios.push_back(r);
  }
  std::vector<std::string> names;
  for (const auto& t : f.trips) names.push_back(ModelGraph::log_phi_name(t));
  names.push_back("rho");
  f.draws = PosteriorDraws(names, 2);
  std::vector<double> row(names.size());
  for (int k = 0; k < n_draws; ++k) {
    for (std::size_t s = 0; s < f.trips.size(); ++s)
      row[s] = std::log(5.0 + 0.8 * f.trips[s].pooled_ratio * static_cast<double>(f.trips[s].acoustic_total) +
                        std::exp(rng.normal()));
    row.back() = 0.3 + 0.1 * rng.uniform();
    f.draws.add_row(k % 2, row);
  }
  return f;
}

}  // namespace gearcalib::testing
