#pragma once

// Joint log-posterior for the family of gear-calibration models.
//
// Sampling happens on a flat unconstrained coordinate vector u:
//
//   [ population (P) | log phi (n) | log mu, camera-major (4n) | log tau1 | log tau2 ]
//
// Positive parameters enter as logs, correlations as logits, sum-to-zero pairs
// through their first member only. Priors are normal on exactly these scales,
// so the density in u needs no extra Jacobian. Trips are kept sorted by
// (boat, reef size, replicate); latent arrays in ParameterState follow
// ModelGraph::trips() order.

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gearcalib/dataset.hpp"

namespace gearcalib {

enum class MuIntercepts { none, beta_only, beta_plus_boat_plus_reef };
enum class Correlation { exchangeable, free };

/// Slope cell (j, camera) of beta_{1,j,camera}.
struct SlopeCell {
  int reef = 1;
  Camera camera = Camera::D;
  bool operator==(const SlopeCell&) const = default;
};

std::string slope_cell_code(SlopeCell c);  // "1D"
SlopeCell parse_slope_cell(std::string_view s);

/// Thrown for configurations that cannot be estimated or are inconsistent.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  bool include_markrecapture = false;
  bool include_ratio_offset = true;
  MuIntercepts mu_intercepts = MuIntercepts::beta_only;
  bool phi_intercept_beta0 = false;
  bool phi_boat_effect = true;
  bool phi_reef_effect = true;
  bool rov_separate = false;
  Correlation correlation = Correlation::exchangeable;
  std::vector<std::vector<SlopeCell>> slope_ties;  // groups sharing one slope
  bool center_logphi = true;
  bool center_logmu = false;
  double beta1_prior_sd = 2.0;
  bool reef_specific_sigma_phi = true;
  bool reef_specific_sigma_x = true;

  /// Defaults: the reduced model used for calibration formulae.
  static ModelConfig final_model() { return {}; }
  /// Full hierarchy with mark-recapture, ROV sub-regression and all effects.
  static ModelConfig comprehensive();

  void validate() const;
  /// key=value lines in a fixed key order.
  std::string serialize() const;
  static ModelConfig parse(std::string_view text);
  static ModelConfig load(const std::filesystem::path& path);
  /// sha256 of serialize().
  std::string hash() const;

  int mvn_dimension() const { return rov_separate ? 3 : 4; }
  bool operator==(const ModelConfig&) const = default;
};

enum class Transform { identity, log, logit };

/// Normal prior on the sampling scale of a parameter.
struct PriorSpec {
  Transform transform = Transform::identity;
  double mean = 0.0;
  double sd = 1.0;

  /// "normal(0,3)", "lognormal(0,2)", "logitnormal(0,2)".
  std::string to_string() const;
  static PriorSpec parse(std::string_view text);
};

double to_sampling_scale(Transform t, double natural);
double to_natural_scale(Transform t, double sampling);

struct PopulationParam {
  std::string name;                  // coordinate name
  std::vector<std::string> aliases;  // natural-scale names (several for tied slopes)
  PriorSpec prior;
};

/// Natural-scale values. Population entries are keyed by alias name; tied
/// slope aliases must agree. Latent arrays follow ModelGraph::trips() order;
/// log_tau entries are ignored where the graph keeps tau deterministic.
struct ParameterState {
  std::map<std::string, double> population;
  std::vector<double> log_phi;
  std::vector<std::array<double, kCameraCount>> log_mu;
  std::vector<double> log_tau1;
  std::vector<double> log_tau2;
};

enum class NodeKind { maxn_obs, acoustic_obs, markrecapture_obs, trip_latent, population_prior };

struct NodeInfo {
  NodeKind kind;
  std::size_t trip = 0;  // trips() index, unused for population_prior
  Camera camera = Camera::D;
  std::size_t param = 0;  // population index for population_prior
};

namespace detail {

/// Population values resolved from u, cached per caller.
struct Resolved {
  double mean3[2][2]{};  // Level-3 mean by [boat][reef]
  double sigma_phi[2]{}, log_sigma_phi[2]{};
  double a[2][2][kCameraCount]{};  // Level-2 intercept by [boat][reef][camera]
  double b[2][kCameraCount]{};     // slope on centered log phi by [reef][camera]
  double rov[3]{};                 // ROV coefficients on log mu D, S, T
  double mvn_const = 0.0, mvn_inv = 0.0, mvn_kappa = 0.0;
  double prec[3][3]{};  // free correlation: inverse covariance
  bool positive_definite = true;
  double sigma_yR = 1.0, log_sigma_yR = 0.0;
  double xi1 = 0.0;
  double sigma_x[2]{1.0, 1.0}, log_sigma_x[2]{};
};

}  // namespace detail

class ModelGraph {
 public:
  /// Per-caller cache of resolved population values and kernel buffers.
  /// Not shared between threads.
  struct Scratch {
    std::vector<double> key;
    bool valid = false;
    detail::Resolved r;
    std::vector<double> se, se2, e_rov, e_free[3];
  };

  ModelGraph(ModelConfig config, std::vector<TripRecord> trips);
  ~ModelGraph();
  ModelGraph(ModelGraph&&) noexcept;
  ModelGraph& operator=(ModelGraph&&) noexcept;
  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;

  const ModelConfig& config() const { return config_; }
  const std::vector<TripRecord>& trips() const { return trips_; }
  std::size_t n_trips() const { return trips_.size(); }

  const std::vector<PopulationParam>& population() const { return population_; }
  /// Index of a population coordinate by coordinate or alias name.
  std::size_t population_index(std::string_view name) const;

  std::size_t dimension() const { return dim_; }
  std::vector<std::string> coordinate_names() const;
  std::size_t phi_offset() const { return phi_off_; }
  std::size_t mu_offset(Camera c) const { return mu_off_ + index_of(c) * trips_.size(); }
  /// Coordinate of latent log tau for trip s, or npos when deterministic.
  std::size_t tau1_coordinate(std::size_t trip) const { return tau1_coord_[trip]; }
  std::size_t tau2_coordinate(std::size_t trip) const { return tau2_coord_[trip]; }
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t node_count() const { return nodes_.size(); }
  const NodeInfo& node(std::size_t id) const { return nodes_.at(id); }
  std::string node_name(std::size_t id) const;
  std::size_t observed_y_count() const { return n_obs_y_; }

  /// Nodes whose value depends on coordinate c, ascending.
  std::span<const std::size_t> blanket(std::size_t c) const { return blankets_.at(c); }

  std::unique_ptr<Scratch> make_scratch() const;

  /// Evaluates the requested node terms at u.
  void eval_nodes(std::span<const double> u, std::span<const std::size_t> ids,
                  std::span<double> out, Scratch& scratch) const;
  double log_density(std::span<const double> u) const;
  double sub_log_density(std::span<const double> u, std::span<const std::size_t> ids) const;

  /// Throws std::domain_error on constraint violations.
  std::vector<double> to_unconstrained(const ParameterState& state) const;
  ParameterState from_unconstrained(std::span<const double> u) const;

  /// Natural-scale population aliases, then log_phi and log_mu per trip.
  std::vector<std::string> output_names() const;
  void outputs(std::span<const double> u, std::span<double> out) const;

  static std::string log_phi_name(const TripRecord& t);
  static std::string log_mu_name(const TripRecord& t, Camera c);

 private:
  void build_population();
  void build_nodes();
  void build_blankets();

  ModelConfig config_;
  std::vector<TripRecord> trips_;
  std::vector<PopulationParam> population_;
  std::map<std::string, std::size_t, std::less<>> param_lookup_;

  std::size_t phi_off_ = 0, mu_off_ = 0, dim_ = 0;
  std::vector<std::size_t> tau1_coord_, tau2_coord_;

  std::vector<NodeInfo> nodes_;
  std::size_t n_obs_y_ = 0;
  std::size_t first_acoustic_ = 0, first_mr_ = 0, first_latent_ = 0, first_prior_ = 0;
  std::vector<std::size_t> mr_node_of_trip_;
  std::vector<std::vector<std::size_t>> blankets_;

  // Per-trip constants.
  std::vector<double> log_r_;
  std::vector<std::array<double, kCameraCount>> y_;       // NaN when missing
  std::vector<std::array<double, kCameraCount>> lgamma_y_;
  std::vector<double> n_, lgamma_n_, nmr_, lgamma_nmr_;
  std::array<std::pair<std::size_t, std::size_t>, 4> cell_bounds_{};  // [2(i-1)+(j-1)]

  struct Index {
    std::size_t beta0 = npos, nu_x = npos, gamma_x = npos;
    std::size_t sigma_phi[2]{npos, npos};
    std::size_t xi = npos;
    std::size_t sigma_x[2]{npos, npos};
    std::size_t beta_y0[kCameraCount]{npos, npos, npos, npos};
    std::size_t nu_y[kCameraCount]{npos, npos, npos, npos};
    std::size_t gamma_y[kCameraCount]{npos, npos, npos, npos};
    std::size_t slope[2][kCameraCount]{};
    std::size_t rov[3]{npos, npos, npos};
    std::size_t rho[3]{npos, npos, npos};
    std::size_t sigma_y = npos, sigma_yR = npos;
  } idx_;

  void resolve(std::span<const double> u, detail::Resolved& r) const;
  void ensure_resolved(std::span<const double> u, Scratch& s) const;
  void eval_trip_range(std::span<const double> u, std::size_t begin, std::size_t end,
                       double mean_phi, const double* mean_mu, Scratch& s, double* out) const;
  double eval_single(std::span<const double> u, std::size_t id, Scratch& s) const;
};

ModelGraph build_model(const ModelConfig& config, const std::vector<TripRecord>& trips);

/// Sum of every node term at the given state.
double log_posterior(const ModelGraph& graph, const ParameterState& state);

/// Partial sum over node ids; throws std::out_of_range for unknown ids.
double sub_log_likelihood(const ModelGraph& graph, const ParameterState& state,
                          std::span<const std::size_t> node_set);

/// log N(0, sigma^2 P) with exchangeable P, via the two eigenvalues of P.
double exchangeable_mvn_logdensity(std::span<const double> residuals, double sigma, double rho);

/// Sum-to-zero partners: effect(1) = v, effect(2) = -v.
inline double paired_effect(double first, int index) { return index == 1 ? first : -first; }

}  // namespace gearcalib
