#include "gearcalib/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "gearcalib/kernels.hpp"
#include "gearcalib/stats.hpp"

namespace gearcalib {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kEffectPriorSd = 3.0;
constexpr double kScalePriorSd = 2.0;

std::string trip_suffix(const TripRecord& t) {
  return std::to_string(t.boat) + "_" + std::to_string(t.reef_size) + "_" +
         std::to_string(t.replicate);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline double normal_lp(double x, double mean, double sd, double log_sd) {
  const double z = (x - mean) / sd;
  return -0.5 * kLog2Pi - log_sd - 0.5 * z * z;
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::string slope_cell_code(SlopeCell c) {
  return std::to_string(c.reef) + camera_code(c.camera);
}

SlopeCell parse_slope_cell(std::string_view s) {
  if (s.size() != 2 || (s[0] != '1' && s[0] != '2'))
    throw ConfigError("bad slope cell '" + std::string(s) + "' (expected e.g. 1D or 2T)");
  try {
    return {s[0] - '0', parse_camera(s.substr(1))};
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad slope cell '" + std::string(s) + "'");
  }
}

ModelConfig ModelConfig::comprehensive() {
  ModelConfig c;
  c.include_markrecapture = true;
  c.include_ratio_offset = true;
  c.mu_intercepts = MuIntercepts::beta_plus_boat_plus_reef;
  c.phi_intercept_beta0 = true;
  c.rov_separate = true;
  c.center_logphi = true;
  c.center_logmu = true;
  return c;
}

void ModelConfig::validate() const {
  if (beta1_prior_sd != 2.0 && beta1_prior_sd != 3.0)
    throw ConfigError("beta1_prior_sd must be 2 or 3");
  if (correlation == Correlation::free && !rov_separate)
    throw ConfigError(
        "free correlation needs rov_separate=true (trivariate residuals); the quadvariate "
        "free-correlation model is not estimable");
  if (center_logmu && !rov_separate)
    throw ConfigError("center_logmu only applies to the ROV sub-regression (rov_separate=true)");
  std::vector<SlopeCell> seen;
  for (const auto& group : slope_ties) {
    if (group.empty()) throw ConfigError("empty slope tie group");
    for (const auto& cell : group) {
      if (cell.reef < 1 || cell.reef > 2) throw ConfigError("slope tie reef index out of range");
      if (std::find(seen.begin(), seen.end(), cell) != seen.end())
        throw ConfigError("slope cell " + slope_cell_code(cell) + " appears in two tie groups");
      seen.push_back(cell);
    }
  }
}

namespace {

std::string intercepts_name(MuIntercepts m) {
  switch (m) {
    case MuIntercepts::none: return "none";
    case MuIntercepts::beta_only: return "beta_only";
    case MuIntercepts::beta_plus_boat_plus_reef: return "beta_plus_boat_plus_reef";
  }
  return "";
}

std::string ties_text(const std::vector<std::vector<SlopeCell>>& ties) {
  std::string out;
  for (std::size_t g = 0; g < ties.size(); ++g) {
    if (g) out += ',';
    for (std::size_t k = 0; k < ties[g].size(); ++k) {
      if (k) out += '+';
      out += slope_cell_code(ties[g][k]);
    }
  }
  return out;
}

}  // namespace

std::string ModelConfig::serialize() const {
  std::ostringstream o;
  auto b = [](bool v) { return v ? "true" : "false"; };
  o << "include_markrecapture = " << b(include_markrecapture) << '\n'
    << "include_ratio_offset = " << b(include_ratio_offset) << '\n'
    << "mu_intercepts = " << intercepts_name(mu_intercepts) << '\n'
    << "phi_intercept_beta0 = " << b(phi_intercept_beta0) << '\n'
    << "phi_boat_effect = " << b(phi_boat_effect) << '\n'
    << "phi_reef_effect = " << b(phi_reef_effect) << '\n'
    << "rov_separate = " << b(rov_separate) << '\n'
    << "correlation = " << (correlation == Correlation::free ? "free" : "exchangeable") << '\n'
    << "slope_ties = " << ties_text(slope_ties) << '\n'
    << "center_logphi = " << b(center_logphi) << '\n'
    << "center_logmu = " << b(center_logmu) << '\n'
    << "beta1_prior_sd = " << format_double(beta1_prior_sd) << '\n'
    << "reef_specific_sigma_phi = " << b(reef_specific_sigma_phi) << '\n'
    << "reef_specific_sigma_x = " << b(reef_specific_sigma_x) << '\n';
  return o.str();
}

ModelConfig ModelConfig::parse(std::string_view text) {
  ModelConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("model config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "include_markrecapture") c.include_markrecapture = parse_bool(key, v);
    else if (key == "include_ratio_offset") c.include_ratio_offset = parse_bool(key, v);
    else if (key == "phi_intercept_beta0") c.phi_intercept_beta0 = parse_bool(key, v);
    else if (key == "phi_boat_effect") c.phi_boat_effect = parse_bool(key, v);
    else if (key == "phi_reef_effect") c.phi_reef_effect = parse_bool(key, v);
    else if (key == "rov_separate") c.rov_separate = parse_bool(key, v);
    else if (key == "center_logphi") c.center_logphi = parse_bool(key, v);
    else if (key == "center_logmu") c.center_logmu = parse_bool(key, v);
    else if (key == "reef_specific_sigma_phi") c.reef_specific_sigma_phi = parse_bool(key, v);
    else if (key == "reef_specific_sigma_x") c.reef_specific_sigma_x = parse_bool(key, v);
    else if (key == "mu_intercepts") {
      if (v == "none") c.mu_intercepts = MuIntercepts::none;
      else if (v == "beta_only") c.mu_intercepts = MuIntercepts::beta_only;
      else if (v == "beta_plus_boat_plus_reef") c.mu_intercepts = MuIntercepts::beta_plus_boat_plus_reef;
      else throw ConfigError("mu_intercepts: unknown value '" + v + "'");
    } else if (key == "correlation") {
      if (v == "exchangeable") c.correlation = Correlation::exchangeable;
      else if (v == "free") c.correlation = Correlation::free;
      else throw ConfigError("correlation: unknown value '" + v + "'");
    } else if (key == "beta1_prior_sd") {
      try {
        c.beta1_prior_sd = std::stod(v);
      } catch (const std::exception&) {
        throw ConfigError("beta1_prior_sd: not a number '" + v + "'");
      }
    } else if (key == "slope_ties") {
      c.slope_ties.clear();
      if (v.empty() || v == "none") continue;
      std::istringstream groups(v);
      std::string group;
      while (std::getline(groups, group, ',')) {
        std::vector<SlopeCell> cells;
        std::istringstream members(group);
        std::string cell;
        while (std::getline(members, cell, '+')) cells.push_back(parse_slope_cell(trim(cell)));
        c.slope_ties.push_back(std::move(cells));
      }
    } else {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model config '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str());
}

std::string ModelConfig::hash() const { return sha256_hex(serialize()); }

// ---------------------------------------------------------------------------
// Priors and transforms

std::string PriorSpec::to_string() const {
  const char* family = transform == Transform::identity ? "normal"
                       : transform == Transform::log    ? "lognormal"
                                                        : "logitnormal";
  return std::string(family) + "(" + format_double(mean) + "," + format_double(sd) + ")";
}

PriorSpec PriorSpec::parse(std::string_view text) {
  const std::string t = trim(text);
  const auto open = t.find('('), comma = t.find(','), close = t.find(')');
  if (open == std::string::npos || comma == std::string::npos || close != t.size() - 1 ||
      comma < open)
    throw std::invalid_argument("unknown prior form '" + t + "'");
  PriorSpec p;
  const std::string family = t.substr(0, open);
  if (family == "normal") p.transform = Transform::identity;
  else if (family == "lognormal") p.transform = Transform::log;
  else if (family == "logitnormal") p.transform = Transform::logit;
  else throw std::invalid_argument("unknown prior form '" + t + "'");
  try {
    p.mean = std::stod(t.substr(open + 1, comma - open - 1));
    p.sd = std::stod(t.substr(comma + 1, close - comma - 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("unknown prior form '" + t + "'");
  }
  if (!(p.sd > 0.0)) throw std::invalid_argument("prior sd must be positive in '" + t + "'");
  return p;
}

double to_sampling_scale(Transform t, double natural) {
  switch (t) {
    case Transform::identity: return natural;
    case Transform::log: return std::log(natural);
    case Transform::logit: return logit(natural);
  }
  return natural;
}

double to_natural_scale(Transform t, double sampling) {
  switch (t) {
    case Transform::identity: return sampling;
    case Transform::log: return std::exp(sampling);
    case Transform::logit: return logistic(sampling);
  }
  return sampling;
}

// ---------------------------------------------------------------------------
// Exchangeable MVN

double exchangeable_mvn_logdensity(std::span<const double> residuals, double sigma, double rho) {
  const std::size_t d = residuals.size();
  if (d < 2) throw std::domain_error("exchangeable MVN needs dimension >= 2");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::domain_error("sigma must be positive");
  const double lower = -1.0 / static_cast<double>(d - 1);
  if (!(rho > lower && rho < 1.0))
    throw std::domain_error("rho outside the positive-definite range (-1/(d-1), 1)");
  double s = 0.0, s2 = 0.0;
  for (double e : residuals) {
    if (!std::isfinite(e)) throw std::domain_error("non-finite residual");
    s += e;
    s2 += e * e;
  }
  const double dd = static_cast<double>(d);
  const double var = sigma * sigma;
  const double lam1 = var * (1.0 + (dd - 1.0) * rho);  // eigenvector 1
  const double lam2 = var * (1.0 - rho);               // multiplicity d - 1
  const double logdet = std::log(lam1) + (dd - 1.0) * std::log(lam2);
  // Project onto the ones direction and its complement.
  const double along = s * s / dd;
  const double quad = along / lam1 + (s2 - along) / lam2;
  return -0.5 * dd * kLog2Pi - 0.5 * logdet - 0.5 * quad;
}

// ---------------------------------------------------------------------------
// Graph construction

ModelGraph::ModelGraph(ModelConfig config, std::vector<TripRecord> trips)
    : config_(std::move(config)), trips_(std::move(trips)) {
  config_.validate();
  if (trips_.empty()) throw ValidationError("no trips");
  validate_trips(trips_);
  std::stable_sort(trips_.begin(), trips_.end(), [](const TripRecord& a, const TripRecord& b) {
    return std::tie(a.boat, a.reef_size, a.replicate) < std::tie(b.boat, b.reef_size, b.replicate);
  });

  const std::size_t n = trips_.size();
  bool any_mr = false;
  for (const auto& t : trips_) {
    if (config_.include_ratio_offset && !std::isfinite(t.pooled_ratio))
      throw ValidationError("trip '" + t.trip_id + "' has no pooled ratio");
    if (config_.include_markrecapture && t.markrecapture) {
      if (t.reef_size != 1)
        throw ValidationError("trip '" + t.trip_id +
                              "': mark-recapture estimates are only modelled at large reefs");
      any_mr = true;
    }
  }
  if (config_.include_markrecapture && !any_mr)
    throw ValidationError("include_markrecapture requires at least one mark-recapture estimate");

  for (auto& cb : cell_bounds_) cb = {0, 0};
  for (std::size_t s = 0; s < n; ++s) {
    const int cell = 2 * (trips_[s].boat - 1) + (trips_[s].reef_size - 1);
    if (cell_bounds_[cell].first == cell_bounds_[cell].second) cell_bounds_[cell] = {s, s};
    cell_bounds_[cell].second = s + 1;
  }

  log_r_.resize(n);
  y_.resize(n);
  lgamma_y_.resize(n);
  n_.resize(n);
  lgamma_n_.resize(n);
  nmr_.assign(n, kNaN);
  lgamma_nmr_.assign(n, kNaN);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& t = trips_[s];
    log_r_[s] = config_.include_ratio_offset ? std::log(t.pooled_ratio) : 0.0;
    for (Camera c : kCameras) {
      const auto& m = t.maxn[index_of(c)];
      y_[s][index_of(c)] = m ? static_cast<double>(*m) : kNaN;
      lgamma_y_[s][index_of(c)] = m ? std::lgamma(static_cast<double>(*m) + 1.0) : kNaN;
    }
    n_[s] = static_cast<double>(t.acoustic_total);
    lgamma_n_[s] = std::lgamma(n_[s] + 1.0);
    if (t.markrecapture) {
      nmr_[s] = static_cast<double>(*t.markrecapture);
      lgamma_nmr_[s] = std::lgamma(nmr_[s] + 1.0);
    }
  }

  build_population();

  phi_off_ = population_.size();
  mu_off_ = phi_off_ + n;
  std::size_t next = mu_off_ + kCameraCount * n;
  tau1_coord_.assign(n, npos);
  tau2_coord_.assign(n, npos);
  if (config_.include_markrecapture) {
    for (std::size_t s = 0; s < n; ++s)
      if (trips_[s].reef_size == 1 || !config_.reef_specific_sigma_x) tau1_coord_[s] = next++;
    for (std::size_t s = 0; s < n; ++s)
      if (trips_[s].markrecapture) tau2_coord_[s] = next++;
  }
  dim_ = next;

  build_nodes();
  build_blankets();
}

ModelGraph::~ModelGraph() = default;
ModelGraph::ModelGraph(ModelGraph&&) noexcept = default;
ModelGraph& ModelGraph::operator=(ModelGraph&&) noexcept = default;

void ModelGraph::build_population() {
  const auto add = [this](std::string name, std::vector<std::string> aliases, PriorSpec prior) {
    const std::size_t id = population_.size();
    for (const auto& a : aliases) param_lookup_.emplace(a, id);
    param_lookup_.emplace(name, id);
    population_.push_back({std::move(name), std::move(aliases), prior});
    return id;
  };
  const auto simple = [&](const std::string& name, PriorSpec prior) {
    return add(name, {name}, prior);
  };
  const PriorSpec effect{Transform::identity, 0.0, kEffectPriorSd};
  const PriorSpec scale{Transform::log, 0.0, kScalePriorSd};
  const PriorSpec slope{Transform::log, 0.0, config_.beta1_prior_sd};
  const PriorSpec corr{Transform::logit, 0.0, kScalePriorSd};

  // Level 3
  if (config_.phi_intercept_beta0) idx_.beta0 = simple("beta0", effect);
  if (config_.phi_boat_effect) idx_.nu_x = simple("nu_x_1", effect);
  if (config_.phi_reef_effect) idx_.gamma_x = simple("gamma_x_1", effect);
  if (config_.reef_specific_sigma_phi) {
    idx_.sigma_phi[0] = simple("sigma_phi_1", scale);
    idx_.sigma_phi[1] = simple("sigma_phi_2", scale);
  } else {
    idx_.sigma_phi[0] = idx_.sigma_phi[1] = simple("sigma_phi", scale);
  }

  // Level 2.2
  if (config_.include_markrecapture) {
    idx_.xi = simple("xi_1", effect);
    idx_.sigma_x[0] = simple("sigma_x_1", scale);
    idx_.sigma_x[1] = simple("sigma_x_2", scale);
  }

  // Level 2.1
  const std::string cams = "DSTR";
  if (config_.mu_intercepts != MuIntercepts::none)
    for (int l = 0; l < kCameraCount; ++l)
      idx_.beta_y0[l] = simple(std::string("beta_y0_") + cams[l], effect);
  if (config_.mu_intercepts == MuIntercepts::beta_plus_boat_plus_reef) {
    for (int l = 0; l < kCameraCount; ++l)
      if (!(config_.rov_separate && l == index_of(Camera::R)))
        idx_.nu_y[l] = simple(std::string("nu_y_1") + cams[l], effect);
    for (int l = 0; l < kCameraCount; ++l)
      idx_.gamma_y[l] = simple(std::string("gamma_y_1") + cams[l], effect);
  }

  for (auto& row : idx_.slope)
    for (auto& v : row) v = npos;
  for (int j = 1; j <= 2; ++j) {
    for (Camera c : kCameras) {
      const SlopeCell cell{j, c};
      if (idx_.slope[j - 1][index_of(c)] != npos) continue;
      std::vector<SlopeCell> group{cell};
      for (const auto& g : config_.slope_ties)
        if (std::find(g.begin(), g.end(), cell) != g.end()) group = g;
      std::string name = "beta1_";
      std::vector<std::string> aliases;
      for (std::size_t k = 0; k < group.size(); ++k) {
        if (k) name += '+';
        name += slope_cell_code(group[k]);
        aliases.push_back("beta1_" + slope_cell_code(group[k]));
      }
      const std::size_t id = add(name, aliases, slope);
      for (const auto& m : group) idx_.slope[m.reef - 1][index_of(m.camera)] = id;
    }
  }
  if (config_.rov_separate) {
    idx_.rov[0] = simple("beta1_D", slope);
    idx_.rov[1] = simple("beta1_S", slope);
    idx_.rov[2] = simple("beta1_T", slope);
  }
  if (config_.correlation == Correlation::exchangeable) {
    idx_.rho[0] = simple("rho", corr);
  } else {
    idx_.rho[0] = simple("rho_DS", corr);
    idx_.rho[1] = simple("rho_DT", corr);
    idx_.rho[2] = simple("rho_ST", corr);
  }
  idx_.sigma_y = simple("sigma_y", scale);
  if (config_.rov_separate) idx_.sigma_yR = simple("sigma_yR", scale);
}

void ModelGraph::build_nodes() {
  const std::size_t n = trips_.size();
  nodes_.clear();
  for (std::size_t s = 0; s < n; ++s)
    for (Camera c : kCameras)
      if (trips_[s].observed(c)) nodes_.push_back({NodeKind::maxn_obs, s, c, 0});
  n_obs_y_ = nodes_.size();
  first_acoustic_ = nodes_.size();
  for (std::size_t s = 0; s < n; ++s) nodes_.push_back({NodeKind::acoustic_obs, s, Camera::D, 0});
  first_mr_ = nodes_.size();
  mr_node_of_trip_.assign(n, npos);
  for (std::size_t s = 0; s < n; ++s) {
    if (tau2_coord_[s] == npos) continue;
    mr_node_of_trip_[s] = nodes_.size();
    nodes_.push_back({NodeKind::markrecapture_obs, s, Camera::D, 0});
  }
  first_latent_ = nodes_.size();
  for (std::size_t s = 0; s < n; ++s) nodes_.push_back({NodeKind::trip_latent, s, Camera::D, 0});
  first_prior_ = nodes_.size();
  for (std::size_t p = 0; p < population_.size(); ++p)
    nodes_.push_back({NodeKind::population_prior, 0, Camera::D, p});
}

void ModelGraph::build_blankets() {
  const std::size_t n = trips_.size();
  blankets_.assign(dim_, {});
  std::vector<std::size_t> all_latent(n);
  std::iota(all_latent.begin(), all_latent.end(), first_latent_);

  std::vector<std::size_t> maxn_node(n * kCameraCount, npos);
  for (std::size_t id = 0; id < n_obs_y_; ++id)
    maxn_node[nodes_[id].trip * kCameraCount + index_of(nodes_[id].camera)] = id;

  // Acoustic nodes read log phi and xi directly when tau1 is not latent.
  const auto acoustic_reads_phi = [&](std::size_t s) {
    return !config_.include_markrecapture || tau1_coord_[s] == npos;
  };

  for (std::size_t p = 0; p < population_.size(); ++p) {
    auto& b = blankets_[p];
    if (p == idx_.xi)
      for (std::size_t s = 0; s < n; ++s)
        if (tau1_coord_[s] == npos) b.push_back(first_acoustic_ + s);
    b.insert(b.end(), all_latent.begin(), all_latent.end());
    b.push_back(first_prior_ + p);
  }
  for (std::size_t s = 0; s < n; ++s) {
    auto& b = blankets_[phi_off_ + s];
    if (acoustic_reads_phi(s)) b.push_back(first_acoustic_ + s);
    if (config_.center_logphi) b.insert(b.end(), all_latent.begin(), all_latent.end());
    else b.push_back(first_latent_ + s);
  }
  for (Camera c : kCameras) {
    const bool centered = config_.center_logmu && config_.rov_separate && c != Camera::R;
    for (std::size_t s = 0; s < n; ++s) {
      auto& b = blankets_[mu_offset(c) + s];
      if (const auto id = maxn_node[s * kCameraCount + index_of(c)]; id != npos) b.push_back(id);
      if (centered) b.insert(b.end(), all_latent.begin(), all_latent.end());
      else b.push_back(first_latent_ + s);
    }
  }
  for (std::size_t s = 0; s < n; ++s) {
    if (tau1_coord_[s] != npos)
      blankets_[tau1_coord_[s]] = {first_acoustic_ + s, first_latent_ + s};
    if (tau2_coord_[s] != npos)
      blankets_[tau2_coord_[s]] = {mr_node_of_trip_[s], first_latent_ + s};
  }
}

std::size_t ModelGraph::population_index(std::string_view name) const {
  const auto it = param_lookup_.find(name);
  if (it == param_lookup_.end())
    throw std::out_of_range("unknown population parameter '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> ModelGraph::coordinate_names() const {
  std::vector<std::string> out;
  out.reserve(dim_);
  for (const auto& p : population_) out.push_back(p.name);
  for (const auto& t : trips_) out.push_back(log_phi_name(t));
  for (Camera c : kCameras)
    for (const auto& t : trips_) out.push_back(log_mu_name(t, c));
  for (std::size_t s = 0; s < trips_.size(); ++s)
    if (tau1_coord_[s] != npos) out.push_back("log_tau1_" + trip_suffix(trips_[s]));
  for (std::size_t s = 0; s < trips_.size(); ++s)
    if (tau2_coord_[s] != npos) out.push_back("log_tau2_" + trip_suffix(trips_[s]));
  return out;
}

std::string ModelGraph::log_phi_name(const TripRecord& t) { return "log_phi_" + trip_suffix(t); }

std::string ModelGraph::log_mu_name(const TripRecord& t, Camera c) {
  return std::string("log_mu_") + camera_code(c) + "_" + trip_suffix(t);
}

std::string ModelGraph::node_name(std::size_t id) const {
  const NodeInfo& nd = nodes_.at(id);
  const std::string suffix = nd.kind == NodeKind::population_prior ? "" : trip_suffix(trips_[nd.trip]);
  switch (nd.kind) {
    case NodeKind::maxn_obs: return std::string("y_") + camera_code(nd.camera) + "_" + suffix;
    case NodeKind::acoustic_obs: return "N_" + suffix;
    case NodeKind::markrecapture_obs: return "N_mr_" + suffix;
    case NodeKind::trip_latent: return "latent_" + suffix;
    case NodeKind::population_prior: return "prior_" + population_[nd.param].name;
  }
  return {};
}

// ---------------------------------------------------------------------------
// Evaluation

void ModelGraph::resolve(std::span<const double> u, detail::Resolved& r) const {
  const auto val = [&](std::size_t id) { return id == npos ? 0.0 : u[id]; };
  const auto pe = [](double first, int index) { return paired_effect(first, index); };

  for (int i = 1; i <= 2; ++i)
    for (int j = 1; j <= 2; ++j)
      r.mean3[i - 1][j - 1] = val(idx_.beta0) + pe(val(idx_.nu_x), i) + pe(val(idx_.gamma_x), j);
  for (int j = 0; j < 2; ++j) {
    r.log_sigma_phi[j] = u[idx_.sigma_phi[j]];
    r.sigma_phi[j] = std::exp(r.log_sigma_phi[j]);
  }
  for (int i = 1; i <= 2; ++i)
    for (int j = 1; j <= 2; ++j)
      for (int l = 0; l < kCameraCount; ++l)
        r.a[i - 1][j - 1][l] =
            val(idx_.beta_y0[l]) + pe(val(idx_.nu_y[l]), i) + pe(val(idx_.gamma_y[l]), j);
  for (int j = 0; j < 2; ++j)
    for (int l = 0; l < kCameraCount; ++l) r.b[j][l] = std::exp(u[idx_.slope[j][l]]);
  for (int k = 0; k < 3; ++k) r.rov[k] = idx_.rov[k] == npos ? 0.0 : std::exp(u[idx_.rov[k]]);

  const double log_sigma_y = u[idx_.sigma_y];
  const double var = std::exp(2.0 * log_sigma_y);
  const int d = config_.mvn_dimension();
  if (config_.correlation == Correlation::exchangeable) {
    const double rho = logistic(u[idx_.rho[0]]);
    const double one_minus = logistic(-u[idx_.rho[0]]);
    const double dd = static_cast<double>(d);
    const double lam1 = 1.0 + (dd - 1.0) * rho;
    const double logdet = dd * 2.0 * log_sigma_y + std::log(lam1) + (dd - 1.0) * std::log(one_minus);
    r.mvn_const = -0.5 * dd * kLog2Pi - 0.5 * logdet;
    r.mvn_inv = 1.0 / (var * one_minus);
    r.mvn_kappa = rho / lam1;
    r.positive_definite = true;
  } else {
    const double pds = logistic(u[idx_.rho[0]]), pdt = logistic(u[idx_.rho[1]]),
                 pst = logistic(u[idx_.rho[2]]);
    const double P[3][3] = {{1.0, pds, pdt}, {pds, 1.0, pst}, {pdt, pst, 1.0}};
    const double c00 = P[1][1] * P[2][2] - P[1][2] * P[2][1];
    const double c01 = P[1][2] * P[2][0] - P[1][0] * P[2][2];
    const double c02 = P[1][0] * P[2][1] - P[1][1] * P[2][0];
    const double det = P[0][0] * c00 + P[0][1] * c01 + P[0][2] * c02;
    r.positive_definite = det > 0.0;
    if (r.positive_definite) {
      const double inv[3][3] = {
          {c00, P[0][2] * P[2][1] - P[0][1] * P[2][2], P[0][1] * P[1][2] - P[0][2] * P[1][1]},
          {c01, P[0][0] * P[2][2] - P[0][2] * P[2][0], P[0][2] * P[1][0] - P[0][0] * P[1][2]},
          {c02, P[0][1] * P[2][0] - P[0][0] * P[2][1], P[0][0] * P[1][1] - P[0][1] * P[1][0]}};
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) r.prec[a][b] = inv[a][b] / (det * var);
      r.mvn_const = -1.5 * kLog2Pi - 0.5 * (3.0 * 2.0 * log_sigma_y + std::log(det));
    }
  }
  if (idx_.sigma_yR != npos) {
    r.log_sigma_yR = u[idx_.sigma_yR];
    r.sigma_yR = std::exp(r.log_sigma_yR);
  }
  r.xi1 = val(idx_.xi);
  for (int h = 0; h < 2; ++h) {
    if (idx_.sigma_x[h] == npos) continue;
    r.log_sigma_x[h] = u[idx_.sigma_x[h]];
    r.sigma_x[h] = std::exp(r.log_sigma_x[h]);
  }
}

void ModelGraph::ensure_resolved(std::span<const double> u, Scratch& s) const {
  const std::size_t p = population_.size();
  if (s.valid && s.key.size() == p && std::equal(s.key.begin(), s.key.end(), u.begin())) return;
  s.key.assign(u.begin(), u.begin() + static_cast<std::ptrdiff_t>(p));
  resolve(u, s.r);
  s.valid = true;
}

std::unique_ptr<ModelGraph::Scratch> ModelGraph::make_scratch() const {
  auto s = std::make_unique<Scratch>();
  const std::size_t n = trips_.size();
  s->se.resize(n);
  s->se2.resize(n);
  s->e_rov.resize(n);
  for (auto& e : s->e_free) e.resize(n);
  return s;
}

void ModelGraph::eval_trip_range(std::span<const double> u, std::size_t begin, std::size_t end,
                                 double mean_phi, const double* mean_mu, Scratch& s,
                                 double* out) const {
  const std::size_t n = trips_.size();
  const detail::Resolved& r = s.r;
  const int d = config_.mvn_dimension();
  const double* phi = u.data() + phi_off_;
  const double* mu = u.data() + mu_off_;
  const bool free_corr = config_.correlation == Correlation::free;
  constexpr int kR = 3;

  for (int cell = 0; cell < 4; ++cell) {
    const std::size_t lo = std::max(begin, cell_bounds_[cell].first);
    const std::size_t hi = std::min(end, cell_bounds_[cell].second);
    if (lo >= hi) continue;
    const int bi = cell / 2, rj = cell % 2;
    const std::size_t rows = hi - lo;

    if (!free_corr) {
      kernels::SharedCovariateBlock blk;
      blk.rows = rows;
      blk.x = phi + lo;
      blk.x_shift = mean_phi;
      blk.responses = d;
      for (int l = 0; l < d; ++l) {
        blk.y[l] = mu + l * n + lo;
        blk.intercept[l] = r.a[bi][rj][l];
        blk.slope[l] = r.b[rj][l];
      }
      kernels::residual_moments(blk, std::span(s.se).subspan(lo, rows),
                                std::span(s.se2).subspan(lo, rows));
    } else {
      for (int l = 0; l < 3; ++l) {
        kernels::MultiCovariateBlock blk;
        blk.rows = rows;
        blk.y = mu + l * n + lo;
        blk.intercept = r.a[bi][rj][l];
        blk.covariates = 1;
        blk.z[0] = phi + lo;
        blk.shift[0] = mean_phi;
        blk.coef[0] = r.b[rj][l];
        kernels::affine_residuals(blk, std::span(s.e_free[l]).subspan(lo, rows));
      }
    }
    if (config_.rov_separate) {
      kernels::MultiCovariateBlock blk;
      blk.rows = rows;
      blk.y = mu + kR * n + lo;
      blk.intercept = r.a[bi][rj][kR];
      blk.covariates = 4;
      blk.z[0] = phi + lo;
      blk.shift[0] = mean_phi;
      blk.coef[0] = r.b[rj][kR];
      for (int k = 0; k < 3; ++k) {
        blk.z[k + 1] = mu + k * n + lo;
        blk.shift[k + 1] = mean_mu[k];
        blk.coef[k + 1] = r.rov[k];
      }
      kernels::affine_residuals(blk, std::span(s.e_rov).subspan(lo, rows));
    }

    const double m3 = r.mean3[bi][rj];
    const double sp = r.sigma_phi[rj], lsp = r.log_sigma_phi[rj];
    for (std::size_t t = lo; t < hi; ++t) {
      double term = normal_lp(phi[t], m3, sp, lsp);
      if (!free_corr) {
        term += r.mvn_const - 0.5 * r.mvn_inv * (s.se2[t] - r.mvn_kappa * s.se[t] * s.se[t]);
      } else if (!r.positive_definite) {
        term = -std::numeric_limits<double>::infinity();
      } else {
        const double e[3] = {s.e_free[0][t], s.e_free[1][t], s.e_free[2][t]};
        double q = 0.0;
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) q += e[a] * r.prec[a][b] * e[b];
        term += r.mvn_const - 0.5 * q;
      }
      if (config_.rov_separate) term += normal_lp(s.e_rov[t], 0.0, r.sigma_yR, r.log_sigma_yR);
      if (tau1_coord_[t] != npos)
        term += normal_lp(u[tau1_coord_[t]], phi[t] + r.xi1 - log_r_[t], r.sigma_x[0],
                          r.log_sigma_x[0]);
      if (tau2_coord_[t] != npos)
        term += normal_lp(u[tau2_coord_[t]], phi[t] - r.xi1, r.sigma_x[1], r.log_sigma_x[1]);
      out[t - begin] = term;
    }
  }
}

double ModelGraph::eval_single(std::span<const double> u, std::size_t id, Scratch& s) const {
  const NodeInfo& nd = nodes_[id];
  const std::size_t t = nd.trip;
  switch (nd.kind) {
    case NodeKind::maxn_obs: {
      const int l = index_of(nd.camera);
      return poisson_logpmf_lograte(y_[t][l], u[mu_offset(nd.camera) + t], lgamma_y_[t][l]);
    }
    case NodeKind::acoustic_obs: {
      double rate;
      if (!config_.include_markrecapture) rate = u[phi_off_ + t] - log_r_[t];
      else if (tau1_coord_[t] != npos) rate = u[tau1_coord_[t]];
      else rate = u[phi_off_ + t] + s.r.xi1 - log_r_[t];
      return poisson_logpmf_lograte(n_[t], rate, lgamma_n_[t]);
    }
    case NodeKind::markrecapture_obs:
      return poisson_logpmf_lograte(nmr_[t], u[tau2_coord_[t]], lgamma_nmr_[t]);
    case NodeKind::population_prior: {
      const PriorSpec& pr = population_[nd.param].prior;
      return normal_lp(u[nd.param], pr.mean, pr.sd, std::log(pr.sd));
    }
    case NodeKind::trip_latent: break;
  }
  throw std::logic_error("eval_single on a trip-latent node");
}

void ModelGraph::eval_nodes(std::span<const double> u, std::span<const std::size_t> ids,
                            std::span<double> out, Scratch& scratch) const {
  if (u.size() != dim_) throw std::invalid_argument("coordinate vector has wrong dimension");
  if (out.size() < ids.size()) throw std::invalid_argument("eval_nodes: output too small");
  ensure_resolved(u, scratch);
  const std::size_t n = trips_.size();
  bool means_ready = false;
  double mean_phi = 0.0;
  double mean_mu[3] = {0.0, 0.0, 0.0};
  std::size_t k = 0;
  while (k < ids.size()) {
    const std::size_t id = ids[k];
    if (id >= nodes_.size()) throw std::out_of_range("unknown node id " + std::to_string(id));
    if (nodes_[id].kind != NodeKind::trip_latent) {
      out[k] = eval_single(u, id, scratch);
      ++k;
      continue;
    }
    std::size_t run = 1;
    while (k + run < ids.size() && ids[k + run] == id + run && id + run < first_prior_) ++run;
    if (!means_ready) {
      const double dn = static_cast<double>(n);
      if (config_.center_logphi) mean_phi = kernels::sum(u.subspan(phi_off_, n)) / dn;
      if (config_.center_logmu && config_.rov_separate)
        for (int l = 0; l < 3; ++l) mean_mu[l] = kernels::sum(u.subspan(mu_off_ + l * n, n)) / dn;
      means_ready = true;
    }
    const std::size_t first_trip = id - first_latent_;
    eval_trip_range(u, first_trip, first_trip + run, mean_phi, mean_mu, scratch, out.data() + k);
    k += run;
  }
}

double ModelGraph::log_density(std::span<const double> u) const {
  std::vector<std::size_t> ids(nodes_.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return sub_log_density(u, ids);
}

double ModelGraph::sub_log_density(std::span<const double> u,
                                   std::span<const std::size_t> ids) const {
  auto scratch = make_scratch();
  std::vector<double> terms(ids.size());
  eval_nodes(u, ids, terms, *scratch);
  double total = 0.0;
  for (double v : terms) total += v;
  return total;
}

// ---------------------------------------------------------------------------
// State conversion

std::vector<double> ModelGraph::to_unconstrained(const ParameterState& state) const {
  const std::size_t n = trips_.size();
  std::vector<double> u(dim_, 0.0);
  for (std::size_t p = 0; p < population_.size(); ++p) {
    const auto& param = population_[p];
    double value = kNaN;
    for (const auto& alias : param.aliases) {
      const auto it = state.population.find(alias);
      if (it == state.population.end())
        throw std::invalid_argument("state is missing parameter '" + alias + "'");
      if (std::isnan(value)) value = it->second;
      else if (it->second != value)
        throw std::domain_error("tied slopes in '" + param.name + "' differ");
    }
    if (!std::isfinite(value)) throw std::domain_error("parameter '" + param.name + "' not finite");
    switch (param.prior.transform) {
      case Transform::log:
        if (!(value > 0.0)) throw std::domain_error("parameter '" + param.name + "' must be > 0");
        break;
      case Transform::logit:
        if (!(value > 0.0 && value < 1.0))
          throw std::domain_error("parameter '" + param.name + "' must lie in (0, 1)");
        break;
      case Transform::identity: break;
    }
    u[p] = to_sampling_scale(param.prior.transform, value);
  }
  if (config_.correlation == Correlation::free) {
    detail::Resolved r;
    resolve(u, r);
    if (!r.positive_definite)
      throw std::domain_error("correlation matrix is not positive definite");
  }
  if (state.log_phi.size() != n || state.log_mu.size() != n)
    throw std::invalid_argument("latent arrays do not match the trip count");
  for (std::size_t s = 0; s < n; ++s) {
    if (!std::isfinite(state.log_phi[s])) throw std::domain_error("log phi not finite");
    u[phi_off_ + s] = state.log_phi[s];
    for (Camera c : kCameras) {
      const double v = state.log_mu[s][index_of(c)];
      if (!std::isfinite(v)) throw std::domain_error("log mu not finite");
      u[mu_offset(c) + s] = v;
    }
    if (tau1_coord_[s] != npos) {
      if (state.log_tau1.size() != n || !std::isfinite(state.log_tau1[s]))
        throw std::domain_error("log tau1 missing or not finite for a latent slot");
      u[tau1_coord_[s]] = state.log_tau1[s];
    }
    if (tau2_coord_[s] != npos) {
      if (state.log_tau2.size() != n || !std::isfinite(state.log_tau2[s]))
        throw std::domain_error("log tau2 missing or not finite for a latent slot");
      u[tau2_coord_[s]] = state.log_tau2[s];
    }
  }
  return u;
}

ParameterState ModelGraph::from_unconstrained(std::span<const double> u) const {
  if (u.size() != dim_) throw std::invalid_argument("coordinate vector has wrong dimension");
  const std::size_t n = trips_.size();
  ParameterState st;
  for (std::size_t p = 0; p < population_.size(); ++p) {
    const double v = to_natural_scale(population_[p].prior.transform, u[p]);
    for (const auto& alias : population_[p].aliases) st.population[alias] = v;
  }
  st.log_phi.assign(u.begin() + static_cast<std::ptrdiff_t>(phi_off_),
                    u.begin() + static_cast<std::ptrdiff_t>(phi_off_ + n));
  st.log_mu.resize(n);
  st.log_tau1.assign(n, kNaN);
  st.log_tau2.assign(n, kNaN);
  for (std::size_t s = 0; s < n; ++s) {
    for (Camera c : kCameras) st.log_mu[s][index_of(c)] = u[mu_offset(c) + s];
    if (tau1_coord_[s] != npos) st.log_tau1[s] = u[tau1_coord_[s]];
    if (tau2_coord_[s] != npos) st.log_tau2[s] = u[tau2_coord_[s]];
  }
  return st;
}

std::vector<std::string> ModelGraph::output_names() const {
  std::vector<std::string> out;
  for (const auto& p : population_)
    for (const auto& a : p.aliases) out.push_back(a);
  for (const auto& t : trips_) out.push_back(log_phi_name(t));
  for (const auto& t : trips_)
    for (Camera c : kCameras) out.push_back(log_mu_name(t, c));
  return out;
}

void ModelGraph::outputs(std::span<const double> u, std::span<double> out) const {
  std::size_t k = 0;
  for (std::size_t p = 0; p < population_.size(); ++p) {
    const double v = to_natural_scale(population_[p].prior.transform, u[p]);
    for (std::size_t a = 0; a < population_[p].aliases.size(); ++a) out[k++] = v;
  }
  const std::size_t n = trips_.size();
  for (std::size_t s = 0; s < n; ++s) out[k++] = u[phi_off_ + s];
  for (std::size_t s = 0; s < n; ++s)
    for (Camera c : kCameras) out[k++] = u[mu_offset(c) + s];
}

// ---------------------------------------------------------------------------

ModelGraph build_model(const ModelConfig& config, const std::vector<TripRecord>& trips) {
  return ModelGraph(config, trips);
}

double log_posterior(const ModelGraph& graph, const ParameterState& state) {
  return graph.log_density(graph.to_unconstrained(state));
}

double sub_log_likelihood(const ModelGraph& graph, const ParameterState& state,
                          std::span<const std::size_t> node_set) {
  for (std::size_t id : node_set)
    if (id >= graph.node_count()) throw std::out_of_range("unknown node id " + std::to_string(id));
  return graph.sub_log_density(graph.to_unconstrained(state), node_set);
}

}  // namespace gearcalib
