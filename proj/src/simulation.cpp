#include "gearcalib/simulation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "gearcalib/rng.hpp"
#include "gearcalib/stats.hpp"

namespace gearcalib {

namespace {

constexpr const char* kCams = "DSTR";

std::string cam_str(int l) { return std::string(1, kCams[l]); }

double boat_code(const TripRecord& t) { return t.boat == 1 ? 1.0 : -1.0; }
double reef_code(const TripRecord& t) { return t.reef_size == 1 ? 1.0 : -1.0; }

double value_or_zero(const TrueParams& p, const std::string& name) {
  const auto it = p.values.find(name);
  return it == p.values.end() ? 0.0 : it->second;
}

std::string sigma_phi_name(const ModelConfig& c, int reef) {
  return c.reef_specific_sigma_phi ? "sigma_phi_" + std::to_string(reef) : "sigma_phi";
}

// Least squares with a minimum-norm answer for rank-deficient designs.
Eigen::VectorXd solve_ls(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (x.rows() == 0) return Eigen::VectorXd::Zero(x.cols());
  return x.completeOrthogonalDecomposition().solve(y);
}

double sample_sd(const std::vector<double>& v) { return v.size() < 2 ? 0.0 : std::sqrt(variance(v)); }

// The value a regression slope contributes: |slope|, floored.
double usable_slope(double ls, std::string& note) {
  double v = ls;
  if (v < 0.0) {
    v = -v;
    note += "; negative LS slope multiplied by -1";
  }
  if (v < kSimScaleFloor) {
    v = kSimScaleFloor;
    note += "; floored at 0.05";
  }
  return v;
}

double usable_scale(double sd, std::string& note) {
  if (sd < kSimScaleFloor) {
    note += "; floored at 0.05";
    return kSimScaleFloor;
  }
  return sd;
}

// Generator for one configuration and one set of values.
class Generator {
 public:
  explicit Generator(const TrueParams& p) : p_(p), c_(p.config) {}

  double intercept(int boat, int reef, int l) const {
    return value_or_zero(p_, "beta_y0_" + cam_str(l)) +
           paired_effect(value_or_zero(p_, "nu_y_1" + cam_str(l)), boat) +
           paired_effect(value_or_zero(p_, "gamma_y_1" + cam_str(l)), reef);
  }
  double slope(int reef, int l) const { return p_.at("beta1_" + std::to_string(reef) + cam_str(l)); }

  SimulatedLatent latent(const std::vector<TripRecord>& trips, Rng& rng) const {
    const std::size_t n = trips.size();
    SimulatedLatent out;
    out.log_phi.resize(n);
    out.log_mu.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
      const auto& t = trips[s];
      out.log_phi[s] = p_.m_log(t.boat, t.reef_size) + p_.at(sigma_phi_name(c_, t.reef_size)) * rng.normal();
    }
    const double mean_phi = c_.center_logphi ? mean(out.log_phi) : 0.0;
    const int d = c_.mvn_dimension();
    const double sigma_y = p_.at("sigma_y");
    Eigen::Matrix3d chol = Eigen::Matrix3d::Identity();
    if (c_.correlation == Correlation::free) {
      Eigen::Matrix3d pm = Eigen::Matrix3d::Identity();
      pm(0, 1) = pm(1, 0) = p_.at("rho_DS");
      pm(0, 2) = pm(2, 0) = p_.at("rho_DT");
      pm(1, 2) = pm(2, 1) = p_.at("rho_ST");
      Eigen::LLT<Eigen::Matrix3d> llt(pm);
      if (llt.info() != Eigen::Success) throw std::domain_error("correlation matrix is not positive definite");
      chol = llt.matrixL();
    }
    for (std::size_t s = 0; s < n; ++s) {
      const auto& t = trips[s];
      double eps[kCameraCount]{};
      if (c_.correlation == Correlation::exchangeable) {
        const double rho = p_.at("rho");
        const double z0 = rng.normal();
        for (int l = 0; l < d; ++l) eps[l] = sigma_y * (std::sqrt(rho) * z0 + std::sqrt(1.0 - rho) * rng.normal());
      } else {
        Eigen::Vector3d z(rng.normal(), rng.normal(), rng.normal());
        const Eigen::Vector3d e = sigma_y * (chol * z);
        for (int l = 0; l < 3; ++l) eps[l] = e(l);
      }
      for (int l = 0; l < d; ++l)
        out.log_mu[s][l] = intercept(t.boat, t.reef_size, l) +
                           slope(t.reef_size, l) * (out.log_phi[s] - mean_phi) + eps[l];
    }
    if (c_.rov_separate) {
      double mean_mu[3]{};
      if (c_.center_logmu)
        for (int l = 0; l < 3; ++l) {
          for (std::size_t s = 0; s < n; ++s) mean_mu[l] += out.log_mu[s][l];
          mean_mu[l] /= static_cast<double>(n);
        }
      const double rov[3] = {p_.at("beta1_D"), p_.at("beta1_S"), p_.at("beta1_T")};
      const double sigma_r = p_.at("sigma_yR");
      for (std::size_t s = 0; s < n; ++s) {
        const auto& t = trips[s];
        double v = intercept(t.boat, t.reef_size, 3) + slope(t.reef_size, 3) * (out.log_phi[s] - mean_phi);
        for (int l = 0; l < 3; ++l) v += rov[l] * (out.log_mu[s][l] - mean_mu[l]);
        out.log_mu[s][3] = v + sigma_r * rng.normal();
      }
    }
    return out;
  }

  // Draws the MaxN of every camera present in the design.
  void counts(std::vector<TripRecord>& trips, const SimulatedLatent& lat, Rng& rng) const {
    for (std::size_t s = 0; s < trips.size(); ++s)
      for (int l = 0; l < kCameraCount; ++l)
        if (trips[s].maxn[l]) trips[s].maxn[l] = rng.poisson(std::exp(std::min(lat.log_mu[s][l], 20.0)));
  }

  // Acoustic totals, focal subsets and mark-recapture estimates; needs the
  // trips' pooled ratios. `focal_share` is the expected N_f / N per trip.
  void acoustic(std::vector<TripRecord>& trips, const SimulatedLatent& lat, const std::vector<double>& focal_share,
                Rng& rng) const {
    const bool mr = c_.include_markrecapture;
    const double xi = value_or_zero(p_, "xi_1");
    for (std::size_t s = 0; s < trips.size(); ++s) {
      auto& t = trips[s];
      const double log_r = c_.include_ratio_offset ? std::log(t.pooled_ratio) : 0.0;
      double rate = lat.log_phi[s] - log_r;
      if (mr) {
        rate += xi;
        if (t.reef_size == 1 || !c_.reef_specific_sigma_x) rate += p_.at("sigma_x_1") * rng.normal();
      }
      t.acoustic_total = rng.poisson(std::exp(std::min(rate, 20.0)));
      t.acoustic_focal = rng.binomial(t.acoustic_total, focal_share[s]);
      if (t.markrecapture) {
        // Without the mark-recapture level the estimate is Poisson around phi.
        double log_tau2 = lat.log_phi[s];
        if (mr) log_tau2 += -xi + p_.at("sigma_x_2") * rng.normal();
        t.markrecapture = rng.poisson(std::exp(std::min(log_tau2, 20.0)));
      }
    }
  }

 private:
  const TrueParams& p_;
  const ModelConfig& c_;
};

double jitter_ratio(double r, double sd, Rng& rng) {
  if (sd == 0.0) return r;
  for (;;) {
    const double v = std::exp(std::log(r) + sd * rng.normal());
    if (v >= kRatioShift && v <= 1.0 + kRatioShift) return v;
  }
}

// A base ratio at the shift floor means no focal fish on any camera; it is no
// usable focal share, so such trips borrow the mean positive ratio of their
// reef size (of all trips if the reef size has none).
std::vector<double> generating_ratios(const std::vector<TripRecord>& base) {
  const auto positive = [](const TripRecord& t) { return t.pooled_ratio > 2.0 * kRatioShift; };
  double sum[3] = {0.0, 0.0, 0.0};
  int count[3] = {0, 0, 0};
  for (const auto& t : base)
    if (positive(t)) {
      sum[t.reef_size] += t.pooled_ratio;
      sum[0] += t.pooled_ratio;
      ++count[t.reef_size];
      ++count[0];
    }
  if (count[0] == 0) throw std::invalid_argument("no base trip has a positive pooled ratio");
  std::vector<double> out;
  for (const auto& t : base) {
    const int j = count[t.reef_size] ? t.reef_size : 0;
    out.push_back(positive(t) ? t.pooled_ratio : sum[j] / count[j]);
  }
  return out;
}

std::vector<double> focal_shares(const std::vector<TripRecord>& base, int replication) {
  std::vector<double> out;
  for (int rep = 0; rep < replication; ++rep)
    for (const auto& t : base)
      out.push_back(t.acoustic_total > 0
                        ? static_cast<double>(t.acoustic_focal) / static_cast<double>(t.acoustic_total)
                        : 0.6);
  return out;
}

}  // namespace

double TrueParams::at(std::string_view name) const {
  const auto it = values.find(std::string(name));
  if (it == values.end()) throw std::out_of_range("no true value for '" + std::string(name) + "'");
  return it->second;
}

void TrueParams::set(const std::string& name, double value, std::string note) {
  values[name] = value;
  notes[name] = std::move(note);
}

void TrueParams::check(const ModelGraph& graph) const {
  if (!(graph.config() == config)) throw std::domain_error("true parameters belong to a different configuration");
  for (const auto& p : graph.population())
    for (const auto& alias : p.aliases) {
      const auto it = values.find(alias);
      if (it == values.end()) throw std::domain_error("no true value for '" + alias + "'");
      const double v = it->second;
      if (!std::isfinite(v)) throw std::domain_error("non-finite true value for '" + alias + "'");
      if (p.prior.transform == Transform::log && !(v > 0.0))
        throw std::domain_error("'" + alias + "' must be positive");
      if (p.prior.transform == Transform::logit && !(v > 0.0 && v < 1.0))
        throw std::domain_error("'" + alias + "' must lie in (0, 1)");
      if (p.aliases.size() > 1 && v != at(p.aliases.front()))
        throw std::domain_error("tied slopes '" + p.name + "' disagree");
    }
}

nlohmann::ordered_json TrueParams::to_json() const {
  nlohmann::ordered_json doc;
  doc["model_config"] = config.serialize();
  nlohmann::ordered_json vals = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values) {
    const auto it = notes.find(k);
    vals[k] = {{"value", v}, {"note", it == notes.end() ? "" : it->second}};
  }
  doc["values"] = std::move(vals);
  return doc;
}

TrueParams TrueParams::from_json(const nlohmann::json& doc) {
  TrueParams p;
  p.config = ModelConfig::parse(doc.at("model_config").get<std::string>());
  for (const auto& [k, v] : doc.at("values").items()) p.set(k, v.at("value").get<double>(), v.at("note").get<std::string>());
  return p;
}

double TrueParams::m_log(int boat, int reef) const {
  return value_or_zero(*this, "beta0") + paired_effect(value_or_zero(*this, "nu_x_1"), boat) +
         paired_effect(value_or_zero(*this, "gamma_x_1"), reef);
}

double TrueParams::m(int boat, int reef) const {
  const double s = at(sigma_phi_name(config, reef));
  return std::exp(m_log(boat, reef) + 0.5 * s * s);
}

TrueParams assign_sim_parameters(const PosteriorDraws& final_draws, const std::vector<TripRecord>& trips) {
  const std::size_t n = trips.size();
  if (std::none_of(trips.begin(), trips.end(), [](const TripRecord& t) { return t.markrecapture.has_value(); }))
    throw ValidationError("assigning simulation parameters needs mark-recapture estimates on at least one trip");
  TrueParams p;
  p.config = ModelConfig::comprehensive();

  std::vector<double> lhat(n);
  for (std::size_t s = 0; s < n; ++s) lhat[s] = median(final_draws.column(ModelGraph::log_phi_name(trips[s])));
  const double lbar = mean(lhat);
  std::vector<double> ltilde(n);
  for (std::size_t s = 0; s < n; ++s) ltilde[s] = lhat[s] - lbar;

  // Level 3.
  {
    Eigen::MatrixXd x(n, 3);
    Eigen::VectorXd y(n);
    for (std::size_t s = 0; s < n; ++s) {
      x.row(s) << 1.0, boat_code(trips[s]), reef_code(trips[s]);
      y(s) = lhat[s];
    }
    const Eigen::VectorXd b = solve_ls(x, y);
    const std::string src = "LS of posterior-median log phi on boat and reef size";
    p.set("beta0", b(0), src + ": intercept");
    p.set("nu_x_1", b(1), src + ": boat effect (+1/-1 coding)");
    p.set("gamma_x_1", b(2), src + ": reef effect (+1/-1 coding)");
    const Eigen::VectorXd e = y - x * b;
    for (int j = 1; j <= 2; ++j) {
      std::vector<double> ej;
      for (std::size_t s = 0; s < n; ++s)
        if (trips[s].reef_size == j) ej.push_back(e(s));
      std::string note = src + ": residual SD at reef size " + std::to_string(j);
      const double v = usable_scale(sample_sd(ej), note);
      p.set("sigma_phi_" + std::to_string(j), v, note);
    }
  }

  // Level 2.2.
  {
    std::vector<double> d1_all, d1_large, d2;
    for (std::size_t s = 0; s < n; ++s) {
      const auto& t = trips[s];
      const double d1 = std::log(t.pooled_ratio * static_cast<double>(t.acoustic_total) + 1.0) - lhat[s];
      d1_all.push_back(d1);
      if (t.reef_size == 1) d1_large.push_back(d1);
      if (t.markrecapture) d2.push_back(std::log(static_cast<double>(*t.markrecapture) + 1.0) - lhat[s]);
    }
    p.set("xi_1", 0.5 * (mean(d1_all) - mean(d2)),
          "half the difference of mean log(rN+1) - log phi and mean log(N_mr+1) - log phi (sum to zero)");
    std::string n1 = "SD of log(rN+1) - log phi at large reefs";
    p.set("sigma_x_1", usable_scale(sample_sd(d1_large), n1), n1);
    std::string n2 = "SD of log(N_mr+1) - log phi";
    p.set("sigma_x_2", usable_scale(sample_sd(d2), n2), n2);
  }

  // Level 2.1, cameras D, S, T.
  std::vector<std::array<double, 3>> resid(n, {NAN, NAN, NAN});
  std::vector<double> pooled_sq;
  std::size_t pooled_df = 0;
  for (int l = 0; l < 3; ++l) {
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < n; ++s)
      if (trips[s].maxn[l]) rows.push_back(s);
    const auto logy = [&](std::size_t s) { return std::log(static_cast<double>(*trips[s].maxn[l]) + 1.0); };
    Eigen::MatrixXd x(rows.size(), 5);
    Eigen::VectorXd y(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto& t = trips[rows[k]];
      const double lt = ltilde[rows[k]];
      x.row(k) << 1.0, t.reef_size == 1 ? lt : 0.0, t.reef_size == 2 ? lt : 0.0, boat_code(t), reef_code(t);
      y(k) = logy(rows[k]);
    }
    const Eigen::VectorXd b = solve_ls(x, y);
    const std::string src = "LS of log(y_" + cam_str(l) + "+1) on centered log phi, boat and reef size";
    double slope[2];
    for (int j = 0; j < 2; ++j) {
      std::string note = src + ": slope at reef size " + std::to_string(j + 1);
      slope[j] = usable_slope(b(1 + j), note);
      p.set("beta1_" + std::to_string(j + 1) + cam_str(l), slope[j], note);
    }
    Eigen::MatrixXd x2(rows.size(), 3);
    Eigen::VectorXd y2(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto& t = trips[rows[k]];
      x2.row(k) << 1.0, boat_code(t), reef_code(t);
      y2(k) = y(k) - slope[t.reef_size - 1] * ltilde[rows[k]];
    }
    const Eigen::VectorXd b2 = solve_ls(x2, y2);
    const std::string src2 = "refit of log(y_" + cam_str(l) + "+1) minus the slope terms on boat and reef size";
    p.set("beta_y0_" + cam_str(l), b2(0), src2 + ": intercept");
    p.set("nu_y_1" + cam_str(l), b2(1), src2 + ": boat effect");
    p.set("gamma_y_1" + cam_str(l), b2(2), src2 + ": reef effect");
    const Eigen::VectorXd e = y2 - x2 * b2;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      resid[rows[k]][l] = e(k);
      pooled_sq.push_back(e(k) * e(k));
    }
    pooled_df += rows.size() > 3 ? rows.size() - 3 : 0;
  }
  {
    double ss = 0.0;
    for (double v : pooled_sq) ss += v;
    std::string note = "pooled residual SD of the camera D, S, T refits";
    p.set("sigma_y", usable_scale(pooled_df ? std::sqrt(ss / static_cast<double>(pooled_df)) : 0.0, note), note);
    double sum = 0.0;
    int pairs = 0;
    for (int a = 0; a < 3; ++a)
      for (int c = a + 1; c < 3; ++c) {
        std::vector<double> xa, xc;
        for (std::size_t s = 0; s < n; ++s)
          if (!std::isnan(resid[s][a]) && !std::isnan(resid[s][c])) {
            xa.push_back(resid[s][a]);
            xc.push_back(resid[s][c]);
          }
        if (xa.size() >= 3) {
          sum += correlation(xa, xc);
          ++pairs;
        }
      }
    const double raw = pairs ? sum / pairs : 0.0;
    std::string rnote = "mean pairwise correlation of the camera D, S, T refit residuals";
    double rho = raw;
    if (rho < 0.05 || rho > 0.95) {
      rho = std::clamp(rho, 0.05, 0.95);
      rnote += "; clamped to [0.05, 0.95]";
    }
    p.set("rho", rho, rnote);
  }

  // Level 2.1, ROV.
  {
    std::array<double, 3> ybar{};
    for (int l = 0; l < 3; ++l) {
      std::vector<double> v;
      for (const auto& t : trips)
        if (t.maxn[l]) v.push_back(std::log(static_cast<double>(*t.maxn[l]) + 1.0));
      ybar[l] = v.empty() ? 0.0 : mean(v);
    }
    const auto yt = [&](std::size_t s, int l) {
      return trips[s].maxn[l] ? std::log(static_cast<double>(*trips[s].maxn[l]) + 1.0) - ybar[l] : 0.0;
    };
    const auto yr = [&](std::size_t s) { return std::log(static_cast<double>(*trips[s].maxn[3]) + 1.0); };
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < n; ++s)
      if (trips[s].maxn[3] && trips[s].maxn[1] && trips[s].maxn[2]) rows.push_back(s);
    Eigen::MatrixXd x(rows.size(), 6);
    Eigen::VectorXd y(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const std::size_t s = rows[k];
      const auto& t = trips[s];
      x.row(k) << 1.0, t.reef_size == 1 ? ltilde[s] : 0.0, t.reef_size == 2 ? ltilde[s] : 0.0, yt(s, 1), yt(s, 2),
          reef_code(t);
      y(k) = yr(s);
    }
    const Eigen::VectorXd b = solve_ls(x, y);
    const std::string src = "LS of log(y_R+1) on centered log phi, centered log(y_S+1), log(y_T+1) and reef size";
    std::string n1r = src + ": slope at reef size 1", n2r = src + ": slope at reef size 2",
                ns = src + ": log y_S slope", nt = src + ": log y_T slope";
    const double b1r = usable_slope(b(1), n1r), b2r = usable_slope(b(2), n2r);
    const double bs = usable_slope(b(3), ns), bt = usable_slope(b(4), nt);
    p.set("beta1_1R", b1r, n1r);
    p.set("beta1_2R", b2r, n2r);
    p.set("beta1_S", bs, ns);
    p.set("beta1_T", bt, nt);

    std::vector<std::size_t> large;
    for (std::size_t s : rows)
      if (trips[s].reef_size == 1 && trips[s].maxn[0]) large.push_back(s);
    Eigen::MatrixXd xd(large.size(), 2);
    Eigen::VectorXd yd(large.size());
    for (std::size_t k = 0; k < large.size(); ++k) {
      const std::size_t s = large[k];
      xd.row(k) << 1.0, yt(s, 0);
      yd(k) = yr(s) - b1r * ltilde[s] - bs * yt(s, 1) - bt * yt(s, 2);
    }
    std::string nd = "large-reef LS of the ROV remainder on centered log(y_D+1): slope";
    const double bd = usable_slope(solve_ls(xd, yd)(1), nd);
    p.set("beta1_D", bd, nd);

    Eigen::MatrixXd x3(rows.size(), 2);
    Eigen::VectorXd y3(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const std::size_t s = rows[k];
      const auto& t = trips[s];
      x3.row(k) << 1.0, reef_code(t);
      y3(k) = yr(s) - (t.reef_size == 1 ? b1r : b2r) * ltilde[s] - bd * yt(s, 0) - bs * yt(s, 1) - bt * yt(s, 2);
    }
    const Eigen::VectorXd b3 = solve_ls(x3, y3);
    const std::string src3 = "LS of log(y_R+1) minus all assigned slope terms on reef size";
    p.set("beta_y0_R", b3(0), src3 + ": intercept");
    p.set("gamma_y_1R", b3(1), src3 + ": reef effect");
    const Eigen::VectorXd e = y3 - x3 * b3;
    std::string ns3 = src3 + ": residual SD";
    const double sd = rows.size() > 2 ? std::sqrt(e.squaredNorm() / static_cast<double>(rows.size() - 2)) : 0.0;
    p.set("sigma_yR", usable_scale(sd, ns3), ns3);
  }
  return p;
}

std::vector<TripRecord> simulate_dataset(const TrueParams& truth, const std::vector<TripRecord>& base_trips,
                                         int replication, double jitter_sd, std::uint64_t seed,
                                         SimulatedLatent* latent) {
  if (replication < 1) throw std::invalid_argument("replication must be at least 1");
  if (!(jitter_sd >= 0.0)) throw std::invalid_argument("jitter_sd must be nonnegative");
  if (base_trips.empty()) throw std::invalid_argument("no base trips");
  Rng rng(seed, 0);
  const auto ratios = generating_ratios(base_trips);
  std::vector<TripRecord> trips;
  trips.reserve(base_trips.size() * static_cast<std::size_t>(replication));
  for (int rep = 1; rep <= replication; ++rep)
    for (std::size_t b = 0; b < base_trips.size(); ++b) {
      TripRecord t = base_trips[b];
      if (replication > 1) t.trip_id += "-" + std::to_string(rep);
      t.pooled_ratio = jitter_ratio(ratios[b], jitter_sd, rng);
      for (auto& m : t.maxn)
        if (m) m = 0;
      if (t.markrecapture) t.markrecapture = 0;
      trips.push_back(std::move(t));
    }
  assign_replicates(trips);
  const Generator gen(truth);
  SimulatedLatent lat = gen.latent(trips, rng);
  gen.counts(trips, lat, rng);
  gen.acoustic(trips, lat, focal_shares(base_trips, replication), rng);
  validate_trips(trips);
  if (latent) *latent = std::move(lat);
  return trips;
}

std::vector<TripRecord> experiment_design() {
  struct Row {
    int boat, reef;
    const char* type;
    const char* cams;  // cameras deployed
    bool mr;
    double r;
  };
  static constexpr Row rows[] = {
      {1, 1, "super pyramid", "DSTR", true, 0.62},  {1, 1, "super pyramid", "DSTR", true, 0.55},
      {1, 1, "super pyramid", "DSTR", true, 0.71},  {1, 1, "super pyramid", "DST", true, 0.48},
      {1, 1, "super pyramid", "DSTR", true, 0.66},  {1, 1, "pyramid", "DSTR", false, 0.40},
      {1, 1, "pyramid", "DSTR", false, 0.35},       {1, 1, "oil platform", "DST", false, 0.58},
      {1, 1, "oil platform", "DSTR", false, 0.80},  {1, 2, "small artificial", "DSTR", false, 0.30},
      {1, 2, "natural ledge", "STR", false, 0.25},  {2, 1, "super pyramid", "DST", true, 0.52},
      {2, 1, "super pyramid", "DST", true, 0.60},   {2, 1, "super pyramid", "ST", true, 0.45},
      {2, 1, "super pyramid", "DST", true, 0.68},   {2, 1, "super pyramid", "DST", true, 0.57},
      {2, 1, "pyramid", "DST", false, 0.38},        {2, 1, "oil platform", "ST", false, 0.74},
      {2, 1, "pyramid", "DST", false, 0.44},        {2, 2, "small artificial", "DST", false, 0.28},
      {2, 2, "natural ledge", "ST", false, 0.33},
  };
  std::vector<TripRecord> out;
  int id = 0;
  for (const auto& r : rows) {
    TripRecord t;
    std::ostringstream name;
    name << 'T' << std::setw(2) << std::setfill('0') << ++id;
    t.trip_id = name.str();
    t.boat = r.boat;
    t.reef_size = r.reef;
    t.reef_type = r.type;
    for (const char* c = r.cams; *c; ++c) t.maxn[index_of(parse_camera(std::string_view(c, 1)))] = 0;
    if (r.mr) t.markrecapture = 0;
    t.pooled_ratio = r.r;
    t.acoustic_total = 10;
    t.acoustic_focal = 6;
    out.push_back(std::move(t));
  }
  assign_replicates(out);
  return out;
}

TrueParams fixture_truth(const ModelConfig& config) {
  TrueParams p;
  p.config = config;
  const std::string note = "fixed fixture value";
  const auto set = [&](const std::string& k, double v) { p.set(k, v, note); };
  if (config.phi_intercept_beta0) set("beta0", 1.2);
  set("nu_x_1", 0.3);
  set("gamma_x_1", config.phi_intercept_beta0 ? 1.0 : 2.2);
  if (config.reef_specific_sigma_phi) {
    set("sigma_phi_1", 0.45);
    set("sigma_phi_2", 0.6);
  } else {
    set("sigma_phi", 0.5);
  }
  if (config.include_markrecapture) {
    set("xi_1", 0.2);
    set("sigma_x_1", 0.3);
    set("sigma_x_2", 0.25);
  }
  const double b0[4] = {1.4, 1.8, 0.8, 1.1};
  const double nu[4] = {0.1, -0.15, 0.05, 0.0};
  const double gamma[4] = {0.3, 0.2, 0.25, 0.1};
  const double s1[4] = {0.9, 0.8, 0.7, 0.6};
  const double s2[4] = {0.5, 0.9, 0.8, 0.4};
  for (int l = 0; l < 4; ++l) {
    if (config.mu_intercepts != MuIntercepts::none) set("beta_y0_" + cam_str(l), b0[l]);
    if (config.mu_intercepts == MuIntercepts::beta_plus_boat_plus_reef) {
      if (!(config.rov_separate && l == 3)) set("nu_y_1" + cam_str(l), nu[l]);
      set("gamma_y_1" + cam_str(l), gamma[l]);
    }
    set("beta1_1" + cam_str(l), s1[l]);
    set("beta1_2" + cam_str(l), s2[l]);
  }
  for (const auto& group : config.slope_ties) {
    const double v = p.at("beta1_" + slope_cell_code(group.front()));
    for (const auto& cell : group) set("beta1_" + slope_cell_code(cell), v);
  }
  if (config.rov_separate) {
    set("beta1_D", 0.3);
    set("beta1_S", 0.4);
    set("beta1_T", 0.2);
    set("sigma_yR", 0.4);
  }
  if (config.correlation == Correlation::exchangeable) {
    set("rho", 0.4);
  } else {
    set("rho_DS", 0.4);
    set("rho_DT", 0.3);
    set("rho_ST", 0.5);
  }
  set("sigma_y", 0.5);
  return p;
}

Fixture make_fixture(const ModelConfig& config, std::uint64_t seed) {
  Fixture f;
  f.truth = fixture_truth(config);
  f.trips = experiment_design();
  Rng rng(seed, 0);
  const Generator gen(f.truth);
  f.latent = gen.latent(f.trips, rng);
  gen.counts(f.trips, f.latent, rng);
  f.registry = {{"greater_amberjack", {true, true}},
                {"almaco_jack", {false, true}},
                {"red_snapper", {false, false}}};
  const auto design = experiment_design();
  for (std::size_t s = 0; s < f.trips.size(); ++s) {
    auto& t = f.trips[s];
    const double r0 = design[s].pooled_ratio;
    std::int64_t gaj = 0, plus = 0;
    for (Camera c : kCameras) {
      if (!t.observed(c)) continue;
      const std::int64_t y = *t.maxn[index_of(c)];
      std::int64_t other = rng.poisson(static_cast<double>(y) * (1.0 - r0) / r0);
      if (y + other == 0) other = 1;
      f.species.push_back({t.trip_id, c, "greater_amberjack", y});
      f.species.push_back({t.trip_id, c, "almaco_jack", other});
      f.species.push_back({t.trip_id, c, "red_snapper", rng.poisson(4.0)});
      gaj += y;
      plus += y + other;
    }
    t.pooled_ratio = static_cast<double>(gaj) / static_cast<double>(plus) + kRatioShift;
  }
  gen.acoustic(f.trips, f.latent, std::vector<double>(f.trips.size(), 0.6), rng);
  validate_trips(f.trips);
  return f;
}

void write_species_csv(std::ostream& out, const std::vector<SpeciesRow>& rows) {
  out << "trip_id,camera,species_id,maxn\n";
  for (const auto& r : rows) out << r.trip_id << ',' << camera_code(r.camera) << ',' << r.species_id << ',' << r.maxn << '\n';
}

void write_registry_csv(std::ostream& out, const std::map<std::string, SpeciesFlags>& registry) {
  out << "species_id,is_gaj,is_gaj_plus\n";
  for (const auto& [id, f] : registry) out << id << ',' << int(f.is_gaj) << ',' << int(f.is_gaj_plus) << '\n';
}

std::map<std::string, std::vector<double>> derived_abundance(const PosteriorDraws& draws, const ModelConfig& config) {
  std::map<std::string, std::vector<double>> out;
  const std::size_t m = draws.n_draws();
  const auto col = [&](const std::string& name) {
    return draws.has(name) ? draws.column(name) : std::vector<double>(m, 0.0);
  };
  const auto beta0 = col("beta0"), nu = col("nu_x_1"), gamma = col("gamma_x_1");
  for (int i = 1; i <= 2; ++i)
    for (int j = 1; j <= 2; ++j) {
      const auto sig = draws.column(sigma_phi_name(config, j));
      std::vector<double> ml(m), mm(m);
      for (std::size_t d = 0; d < m; ++d) {
        ml[d] = beta0[d] + paired_effect(nu[d], i) + paired_effect(gamma[d], j);
        mm[d] = std::exp(ml[d] + 0.5 * sig[d] * sig[d]);
      }
      const std::string ij = std::to_string(i) + std::to_string(j);
      out["M_log_" + ij] = std::move(ml);
      out["M_" + ij] = std::move(mm);
    }
  return out;
}

namespace {

std::string level_of(const std::string& name) {
  if (name.starts_with("M_") || name == "beta0" || name.starts_with("nu_x") || name.starts_with("gamma_x") ||
      name.starts_with("sigma_phi"))
    return "3";
  if (name.starts_with("xi") || name.starts_with("sigma_x")) return "2.2";
  if (name == "beta_y0_R" || name == "beta1_1R" || name == "beta1_2R" || name == "beta1_D" || name == "beta1_S" ||
      name == "beta1_T" || name == "gamma_y_1R" || name == "nu_y_1R" || name == "sigma_yR")
    return "2.1 (R)";
  return "2.1";
}

}  // namespace

int CaptureReport::n_included() const {
  return static_cast<int>(std::count_if(replicates.begin(), replicates.end(),
                                        [](const ReplicateStatus& r) { return r.converged; }));
}

double CaptureReport::pooled_rate(const std::function<bool(const CaptureRow&)>& select) const {
  int c = 0, t = 0;
  for (const auto& r : rows)
    if (select(r)) {
      c += r.captured;
      t += r.total;
    }
  return t ? static_cast<double>(c) / t : 0.0;
}

double CaptureReport::combined_rate() const {
  return pooled_rate([](const CaptureRow&) { return true; });
}

double CaptureReport::m_log_rate() const {
  return pooled_rate([](const CaptureRow& r) { return r.name.starts_with("M_log_"); });
}

double CaptureReport::level3_rate() const {
  return pooled_rate([](const CaptureRow& r) { return r.level == "3" && !r.name.starts_with("M_"); });
}

const CaptureRow& CaptureReport::row(std::string_view name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw std::out_of_range("no capture row '" + std::string(name) + "'");
}

std::string CaptureReport::table() const {
  std::vector<const CaptureRow*> cols[3];
  for (const auto& r : rows) {
    if (r.level == "2.1") cols[0].push_back(&r);
    else if (r.level == "3") cols[2].push_back(&r);
    else cols[1].push_back(&r);
  }
  std::size_t height = 0;
  for (const auto& c : cols) height = std::max(height, c.size());
  const auto cell = [](const std::vector<const CaptureRow*>& c, std::size_t k) {
    std::ostringstream o;
    if (k >= c.size()) {
      o << std::setw(8) << "" << ' ' << std::setw(12) << "" << ' ' << std::setw(5) << "";
      return o.str();
    }
    const bool first = k == 0 || c[k - 1]->level != c[k]->level;
    o << std::left << std::setw(8) << (first ? c[k]->level : "") << ' ' << std::setw(12) << c[k]->name << ' '
      << std::right << std::fixed << std::setprecision(2) << std::setw(5) << c[k]->rate();
    return o.str();
  };
  std::ostringstream out;
  out << "Capture rate of nominal " << std::lround(nominal * 100) << "% credible intervals over " << n_included()
      << " of " << replicates.size() << " replicates (non-converged excluded)\n";
  const std::string head = "Level    Parameter     Rate";
  out << head << " | " << head << " | " << head << '\n';
  out << std::string(head.size() * 3 + 6, '-') << '\n';
  for (std::size_t k = 0; k < height; ++k) out << cell(cols[0], k) << " | " << cell(cols[1], k) << " | " << cell(cols[2], k) << '\n';
  out << std::string(head.size() * 3 + 6, '-') << '\n';
  out << std::fixed << std::setprecision(2) << "Combined " << combined_rate() << "   M_log " << m_log_rate()
      << "   Level-3 scalars " << level3_rate() << '\n';
  for (const auto& r : replicates)
    if (!r.converged) {
      out << "excluded replicate " << r.index << " (seed " << r.seed << "), " << r.failures.size()
          << " gate failures:";
      for (std::size_t k = 0; k < std::min<std::size_t>(r.failures.size(), 3); ++k) out << ' ' << r.failures[k] << ';';
      if (r.failures.size() > 3) out << " ...";
      out << '\n';
    }
  return out.str();
}

nlohmann::ordered_json CaptureReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["nominal"] = nominal;
  doc["n_datasets"] = replicates.size();
  doc["n_included"] = n_included();
  doc["combined_rate"] = combined_rate();
  doc["m_log_rate"] = m_log_rate();
  doc["level3_rate"] = level3_rate();
  auto rows_doc = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    rows_doc.push_back({{"name", r.name}, {"level", r.level}, {"truth", r.truth}, {"captured", r.captured},
                        {"total", r.total}, {"rate", r.rate()}});
  doc["rows"] = std::move(rows_doc);
  auto reps = nlohmann::ordered_json::array();
  for (const auto& r : replicates)
    reps.push_back({{"index", r.index}, {"seed", r.seed}, {"converged", r.converged}, {"max_rhat", r.max_rhat},
                    {"min_ess", r.min_ess}, {"failures", r.failures}});
  doc["replicates"] = std::move(reps);
  return doc;
}

CaptureReport run_capture_study(const TrueParams& truth, const std::vector<TripRecord>& base_trips,
                                const CaptureStudyConfig& config) {
  if (config.n_datasets < 1) throw std::invalid_argument("n_datasets must be at least 1");
  if (!(config.nominal > 0.0 && config.nominal < 1.0)) throw std::invalid_argument("nominal must lie in (0, 1)");
  config.sampler.validate();

  // Tracked names and true values, from a graph on the base design.
  std::vector<std::string> names;
  std::vector<double> truths;
  {
    const auto probe = simulate_dataset(truth, base_trips, 1, 0.0, config.master_seed);
    const ModelGraph graph(truth.config, probe);
    truth.check(graph);
    for (const auto& p : graph.population())
      for (const auto& a : p.aliases) {
        names.push_back(a);
        truths.push_back(truth.at(a));
      }
    for (const char* prefix : {"M_log_", "M_"})
      for (int i = 1; i <= 2; ++i)
        for (int j = 1; j <= 2; ++j) {
          names.push_back(prefix + std::to_string(i) + std::to_string(j));
          truths.push_back(std::string_view(prefix) == "M_" ? truth.m(i, j) : truth.m_log(i, j));
        }
  }

  struct Outcome {
    ReplicateStatus status;
    std::vector<char> captured;
  };
  const int n = config.n_datasets;
  std::vector<Outcome> outcomes(n);
  std::atomic<int> next{0};
  std::mutex progress_mutex;
  std::exception_ptr error;
  std::mutex error_mutex;

  const auto work = [&] {
    for (int k; (k = next.fetch_add(1)) < n;) {
      try {
        Outcome& o = outcomes[k];
        o.status.index = k + 1;
        o.status.seed = config.master_seed ^ static_cast<std::uint64_t>(k + 1);
        const auto trips = simulate_dataset(truth, base_trips, config.replication, config.jitter_sd, o.status.seed);
        const ModelGraph graph(truth.config, trips);
        SamplerConfig sc = config.sampler;
        sc.seed = o.status.seed;
        sc.max_threads = 1;
        const auto draws = run_mcmc(graph, sc);
        const auto diag = diagnose(graph, draws, config.rhat_gate, config.ess_gate);
        o.status.converged = diag.converged;
        o.status.failures = diag.failures;
        o.status.max_rhat = 0.0;
        o.status.min_ess = std::numeric_limits<double>::infinity();
        for (const auto& p : diag.params) {
          o.status.max_rhat = std::max(o.status.max_rhat, p.rhat);
          o.status.min_ess = std::min(o.status.min_ess, p.ess.value);
        }
        const auto derived = derived_abundance(draws, truth.config);
        o.captured.resize(names.size());
        for (std::size_t q = 0; q < names.size(); ++q) {
          const auto it = derived.find(names[q]);
          const auto column = it != derived.end() ? it->second : draws.column(names[q]);
          o.captured[q] = central_interval(column, config.nominal).contains(truths[q]);
        }
        if (config.progress) {
          std::lock_guard lock(progress_mutex);
          config.progress(o.status);
        }
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
      }
    }
  };
  const int workers = worker_count(config.max_threads, n);
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  CaptureReport report;
  report.nominal = config.nominal;
  for (std::size_t q = 0; q < names.size(); ++q) report.rows.push_back({names[q], level_of(names[q]), truths[q], 0, 0});
  for (const auto& o : outcomes) {
    report.replicates.push_back(o.status);
    if (!o.status.converged) continue;
    for (std::size_t q = 0; q < names.size(); ++q) {
      report.rows[q].total += 1;
      report.rows[q].captured += o.captured[q];
    }
  }
  return report;
}

}  // namespace gearcalib
