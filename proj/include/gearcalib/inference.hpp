#pragma once

// Adaptive random-walk Metropolis within Gibbs, convergence diagnostics and
// posterior-predictive imputation.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gearcalib/model.hpp"
#include "gearcalib/stats.hpp"

namespace gearcalib {

/// A log density written as a sum of terms, where each coordinate touches a
/// known subset of terms. The sampler only re-evaluates that subset.
class LogDensity {
 public:
  struct Workspace {
    virtual ~Workspace() = default;
  };

  /// Joint step of one coordinate x and the coordinates that track it:
  /// follower k moves by weights[k] * (g(x') - g(x)) * (u[covariates[k]] - c),
  /// with g the identity or exp and c the mean of the covariate pool (0 when
  /// the pool is empty; the covariate factor is 1 when `covariates` is empty).
  /// The map has unit Jacobian, so the plain Metropolis ratio applies.
  struct ShiftMove {
    std::string name;
    std::size_t driver = 0;
    bool exponential = false;
    std::vector<std::size_t> followers;
    std::vector<double> weights;
    std::vector<std::size_t> covariates;
    std::size_t pool_begin = 0, pool_size = 0;
    /// When non-empty, replaces `covariates`: follower k's factor is the sum
    /// of a * (u[coord] - c) over its (coord, a) pairs.
    std::vector<std::vector<std::pair<std::size_t, double>>> covariate_terms;
  };

  /// Joint step of a log-scale coordinate v and the deviations it scales:
  /// v' = v + e and follower k goes to c_k + exp(e) (x_k - c_k), where
  /// c_k = offsets[k] + sum of weight * u[coord] over centre[k]. The
  /// Jacobian exp(e * followers) enters the acceptance ratio.
  struct ScaleMove {
    std::string name;
    std::size_t driver = 0;
    std::vector<std::size_t> followers;
    std::vector<double> offsets;
    std::vector<std::vector<std::pair<std::size_t, double>>> centre;
  };

  virtual ~LogDensity() = default;
  virtual std::size_t dimension() const = 0;
  virtual std::size_t term_count() const = 0;
  virtual std::span<const std::size_t> blanket(std::size_t coord) const = 0;
  virtual std::unique_ptr<Workspace> make_workspace() const { return nullptr; }
  virtual void eval_terms(std::span<const double> u, std::span<const std::size_t> terms,
                          std::span<double> out, Workspace* ws) const = 0;
  virtual std::string term_name(std::size_t term) const { return "term " + std::to_string(term); }
  virtual std::vector<std::string> coordinate_names() const = 0;
  /// Starting point for one chain. `attempt` counts retries after a
  /// non-finite start.
  virtual std::vector<double> initial_point(std::uint64_t seed, int attempt) const = 0;
  virtual std::vector<std::string> output_names() const = 0;
  virtual void outputs(std::span<const double> u, std::span<double> out) const = 0;
  virtual std::vector<ShiftMove> shift_moves() const { return {}; }
  virtual std::vector<ScaleMove> scale_moves() const { return {}; }
  /// Sets of ShiftMove names proposed jointly, with an adapted covariance
  /// over their drivers; each follower takes the sum of its members' shifts.
  virtual std::vector<std::vector<std::string>> shift_groups() const { return {}; }
  /// Coordinate blocks updated jointly in place of their scalar updates
  /// whenever the extra moves are on and the user names no block touching them.
  virtual std::vector<std::vector<std::string>> default_blocks() const { return {}; }
};

/// LogDensity view of a ModelGraph; outputs are natural-scale population
/// values plus log phi and log mu per trip.
class GraphTarget final : public LogDensity {
 public:
  explicit GraphTarget(const ModelGraph& graph) : graph_(graph) {}

  std::size_t dimension() const override { return graph_.dimension(); }
  std::size_t term_count() const override { return graph_.node_count(); }
  std::span<const std::size_t> blanket(std::size_t c) const override { return graph_.blanket(c); }
  std::unique_ptr<Workspace> make_workspace() const override;
  void eval_terms(std::span<const double> u, std::span<const std::size_t> terms,
                  std::span<double> out, Workspace* ws) const override;
  std::string term_name(std::size_t term) const override { return graph_.node_name(term); }
  std::vector<std::string> coordinate_names() const override { return graph_.coordinate_names(); }
  std::vector<double> initial_point(std::uint64_t seed, int attempt) const override;
  std::vector<std::string> output_names() const override { return graph_.output_names(); }
  void outputs(std::span<const double> u, std::span<double> out) const override {
    graph_.outputs(u, out);
  }
  /// Intercepts, effects and slopes moved together with the log phi, log mu
  /// and log tau values they shift.
  std::vector<ShiftMove> shift_moves() const override;
  /// sigma_phi and sigma_x rescaling the log phi and log tau deviations.
  std::vector<ScaleMove> scale_moves() const override;
  /// Per camera: intercept, effects and slopes. Level 3: intercept and effects.
  std::vector<std::vector<std::string>> shift_groups() const override;
  /// Level 3 intercept and effects, without moving log phi.
  std::vector<std::vector<std::string>> default_blocks() const override;

 private:
  const ModelGraph& graph_;
};

struct SamplerConfig {
  int n_chains = 4;
  int n_iterations = 50000;
  int burn_in = 20000;
  int thin = 10;
  std::uint64_t seed = 1;
  double target_scalar = 0.44;
  double target_block = 0.234;
  int adapt_window = 50;
  /// Each block lists coordinate names updated jointly. The single token
  /// "trip_latent" expands to one block of (log phi, log mu) per trip.
  std::vector<std::vector<std::string>> blocks;
  int max_threads = 0;  // 0: hardware concurrency capped by GEARCALIB_THREADS
  bool shift_moves = true;  // run the target's shift and scale moves after every sweep

  void validate() const;
  int draws_per_chain() const { return (n_iterations - burn_in) / thin; }
  std::string serialize() const;
  static SamplerConfig parse(std::string_view text);
  static SamplerConfig load(const std::filesystem::path& path);
};

/// Worker count: min(requested or hardware, GEARCALIB_THREADS, jobs), at least 1.
int worker_count(int requested, int jobs);

class PosteriorDraws {
 public:
  PosteriorDraws() = default;
  PosteriorDraws(std::vector<std::string> names, int n_chains);

  const std::vector<std::string>& names() const { return names_; }
  std::size_t n_params() const { return names_.size(); }
  std::size_t n_draws() const { return chain_.size(); }
  int n_chains() const { return n_chains_; }
  bool has(std::string_view name) const;
  std::size_t index(std::string_view name) const;

  void add_row(int chain, std::span<const double> values);
  void append(const PosteriorDraws& other);

  double value(std::size_t draw, std::size_t param) const { return data_[draw * names_.size() + param]; }
  std::span<const double> row(std::size_t draw) const {
    return {data_.data() + draw * names_.size(), names_.size()};
  }
  int chain_of(std::size_t draw) const { return chain_[draw]; }
  std::vector<double> column(std::string_view name) const;
  std::vector<double> column(std::size_t param) const;
  /// Draws of one parameter, split by chain in chain order.
  std::vector<std::vector<double>> by_chain(std::string_view name) const;

  /// Post-burn-in acceptance rate per update unit, one entry per chain.
  std::map<std::string, std::vector<double>>& acceptance() { return acceptance_; }
  const std::map<std::string, std::vector<double>>& acceptance() const { return acceptance_; }

  /// "chain,<names...>" header, shortest round-trip decimal values.
  void write_csv(std::ostream& out) const;
  static PosteriorDraws read_csv(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static PosteriorDraws load(const std::filesystem::path& path);

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::size_t, std::less<>> lookup_;
  int n_chains_ = 0;
  std::vector<double> data_;
  std::vector<int> chain_;
  std::map<std::string, std::vector<double>> acceptance_;
};

class InitializationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

PosteriorDraws run_mcmc(const LogDensity& target, const SamplerConfig& config);
PosteriorDraws run_mcmc(const ModelGraph& graph, const SamplerConfig& config);

/// Data-driven start: log phi = log(r N + 1), log mu = log(y + 1) or log phi
/// when y is missing, population values at prior medians jittered by 10% of
/// the prior SD. Retries the jitter up to 100 times until the log posterior
/// is finite; otherwise throws InitializationError naming the first bad node.
ParameterState initialize_state(const ModelGraph& graph, std::uint64_t seed);

/// Split-chain potential scale reduction. Needs at least two chains.
double rhat(const PosteriorDraws& draws, std::string_view param);

struct EssResult {
  double value = 0.0;
  bool constant = false;  // zero variance: value is the draw count
};

/// Multi-chain ESS with Geyer's initial positive sequence. Needs M >= 100.
EssResult ess(const PosteriorDraws& draws, std::string_view param);

/// Monte Carlo standard error of the posterior mean.
double mcse_mean(const PosteriorDraws& draws, std::string_view param);
/// Monte Carlo standard error of the p-quantile (indicator-ESS and beta interval).
double mcse_quantile(const PosteriorDraws& draws, std::string_view param, double p);

/// 1 - overlap between a Gaussian KDE of the posterior and the analytic
/// prior, both on the prior's sampling scale. prior_spec uses
/// PriorSpec::to_string syntax; other forms throw std::invalid_argument.
double prior_posterior_shift(const PosteriorDraws& draws, std::string_view param,
                             std::string_view prior_spec);

struct ImputedCell {
  std::string trip_id;
  int boat = 0, reef_size = 0, replicate = 0;
  Camera camera = Camera::D;
  std::vector<std::int64_t> counts;  // one per draw
  double median = 0.0;
  Interval interval80{0.0, 0.0};
};

/// Poisson(mu) predictive draws for every missing (trip, camera).
std::vector<ImputedCell> impute_missing_y(const ModelGraph& graph, const PosteriorDraws& draws,
                                          std::uint64_t seed);

struct ParamDiagnostics {
  std::string name;
  double mean = 0.0, sd = 0.0, q05 = 0.0, median = 0.0, q95 = 0.0;
  double rhat = 0.0;
  EssResult ess;
  double shift = 0.0;  // prior-posterior shift
};

struct DiagnosticsReport {
  std::vector<ParamDiagnostics> params;
  double rhat_gate = 1.05;
  double ess_gate = 400.0;
  double min_acceptance = 0.0, max_acceptance = 0.0;
  bool converged = false;
  std::vector<std::string> failures;

  std::string to_json() const;
};

/// Diagnostics for every population parameter of the graph.
DiagnosticsReport diagnose(const ModelGraph& graph, const PosteriorDraws& draws,
                           double rhat_gate = 1.05, double ess_gate = 400.0);

}  // namespace gearcalib
