#pragma once

// Generating datasets from known parameters and checking how often credible
// intervals recover them.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gearcalib/dataset.hpp"
#include "gearcalib/inference.hpp"
#include "gearcalib/model.hpp"

namespace gearcalib {

/// Natural-scale population values for one model configuration, keyed by the
/// graph's alias names, with a note on where each value came from.
struct TrueParams {
  ModelConfig config;
  std::map<std::string, double> values;
  std::map<std::string, std::string> notes;

  double at(std::string_view name) const;
  void set(const std::string& name, double value, std::string note);
  /// Throws std::domain_error when a value is missing for the graph or breaks
  /// a constraint (positive scales and slopes, rho in (0, 1)).
  void check(const ModelGraph& graph) const;

  nlohmann::ordered_json to_json() const;
  static TrueParams from_json(const nlohmann::json& doc);

  /// E(log phi) for boat i, reef size j.
  double m_log(int boat, int reef) const;
  /// E(phi) = exp(m_log + sigma_phi_j^2 / 2).
  double m(int boat, int reef) const;
};

/// Floor applied to every generating SD and slope derived by regression.
inline constexpr double kSimScaleFloor = 0.05;

/// Regression cascade from a final-model fit on the calibration trips to the
/// parameters of the comprehensive model. Throws ValidationError when no trip
/// has a mark-recapture estimate.
TrueParams assign_sim_parameters(const PosteriorDraws& final_draws, const std::vector<TripRecord>& trips);

/// Latent values behind a simulated dataset, in the order of the returned trips.
struct SimulatedLatent {
  std::vector<double> log_phi;
  std::vector<std::array<double, kCameraCount>> log_mu;
};

/// Replicates the (boat, reef size, camera presence, MR presence) design of
/// `base_trips` `replication` times, jitters each pooled ratio on the log
/// scale, then draws counts from the model described by `truth.config`.
/// Base trips whose pooled ratio is zero (no focal fish seen) are simulated
/// at the mean positive ratio of their reef size.
std::vector<TripRecord> simulate_dataset(const TrueParams& truth, const std::vector<TripRecord>& base_trips,
                                         int replication, double jitter_sd, std::uint64_t seed,
                                         SimulatedLatent* latent = nullptr);

/// The 21-trip calibration experiment layout: 17 large-reef and 4 small-reef
/// trips, MR at 10 large-reef trips, ROV only on boat 1. Counts are zero
/// placeholders; use simulate_dataset or make_fixture to fill them.
std::vector<TripRecord> experiment_design();

/// Generating values for the bundled fixture under `config`.
TrueParams fixture_truth(const ModelConfig& config);

struct Fixture {
  std::vector<TripRecord> trips;
  std::vector<SpeciesRow> species;
  std::map<std::string, SpeciesFlags> registry;
  SimulatedLatent latent;
  TrueParams truth;
};

/// Synthetic calibration experiment at the 21-trip design with a per-species
/// MaxN table whose pooled ratios are the ratios used to generate N.
Fixture make_fixture(const ModelConfig& config, std::uint64_t seed);

void write_species_csv(std::ostream& out, const std::vector<SpeciesRow>& rows);
void write_registry_csv(std::ostream& out, const std::map<std::string, SpeciesFlags>& registry);

struct CaptureRow {
  std::string name;
  std::string level;  // "2.1", "2.1 (R)", "2.2", "3"
  double truth = 0.0;
  int captured = 0;
  int total = 0;
  double rate() const { return total ? static_cast<double>(captured) / total : 0.0; }
};

struct ReplicateStatus {
  int index = 0;
  std::uint64_t seed = 0;
  bool converged = false;
  double max_rhat = 0.0;
  double min_ess = 0.0;
  std::vector<std::string> failures;
};

struct CaptureReport {
  double nominal = 0.9;
  std::vector<CaptureRow> rows;
  std::vector<ReplicateStatus> replicates;

  int n_included() const;
  /// Captures over total pooled across rows accepted by `select`.
  double pooled_rate(const std::function<bool(const CaptureRow&)>& select) const;
  double combined_rate() const;
  double m_log_rate() const;   // M_log_ij rows
  double level3_rate() const;  // Level-3 scalar parameters
  const CaptureRow& row(std::string_view name) const;

  /// Three column groups of (level, parameter, rate) and a combined line.
  std::string table() const;
  nlohmann::ordered_json to_json() const;
};

struct CaptureStudyConfig {
  int n_datasets = 20;
  int replication = 6;
  double jitter_sd = 0.27;
  double nominal = 0.90;
  std::uint64_t master_seed = 1;
  SamplerConfig sampler;
  double rhat_gate = 1.05;
  double ess_gate = 400.0;
  int max_threads = 0;
  /// Called after each replicate finishes (from the worker thread).
  std::function<void(const ReplicateStatus&)> progress;
};

/// Simulate, fit the comprehensive model and record interval captures for
/// every population parameter and the derived M_ij, M_log_ij. Replicate i
/// uses seed master ^ i. Non-converged replicates are listed but excluded.
CaptureReport run_capture_study(const TrueParams& truth, const std::vector<TripRecord>& base_trips,
                                const CaptureStudyConfig& config);

/// Names and per-draw values of M_log_ij and M_ij from a draws table.
std::map<std::string, std::vector<double>> derived_abundance(const PosteriorDraws& draws,
                                                             const ModelConfig& config);

}  // namespace gearcalib
