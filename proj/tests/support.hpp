#pragma once

// Shared fixtures for the unit tests.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gearcalib/dataset.hpp"
#include "gearcalib/inference.hpp"

namespace gearcalib::testing {

/// A LogDensity assembled from closures; each term lists the coordinates it reads.
class LambdaTarget final : public LogDensity {
 public:
  struct Term {
    std::vector<std::size_t> reads;
    std::function<double(std::span<const double>)> f;
  };

  LambdaTarget(std::vector<std::string> names, std::vector<Term> terms, std::vector<double> start)
      : names_(std::move(names)), terms_(std::move(terms)), start_(std::move(start)),
        blankets_(names_.size()) {
    for (std::size_t t = 0; t < terms_.size(); ++t)
      for (std::size_t c : terms_[t].reads) blankets_[c].push_back(t);
  }

  std::size_t dimension() const override { return names_.size(); }
  std::size_t term_count() const override { return terms_.size(); }
  std::span<const std::size_t> blanket(std::size_t c) const override { return blankets_[c]; }
  void eval_terms(std::span<const double> u, std::span<const std::size_t> ids, std::span<double> out,
                  Workspace*) const override {
    for (std::size_t k = 0; k < ids.size(); ++k) out[k] = terms_[ids[k]].f(u);
  }
  std::vector<std::string> coordinate_names() const override { return names_; }
  std::vector<double> initial_point(std::uint64_t, int) const override { return start_; }
  std::vector<std::string> output_names() const override { return names_; }
  void outputs(std::span<const double> u, std::span<double> out) const override {
    std::copy(u.begin(), u.end(), out.begin());
  }
  std::vector<ShiftMove> shift_moves() const override { return shifts; }
  std::vector<ScaleMove> scale_moves() const override { return scales; }
  std::vector<std::vector<std::string>> shift_groups() const override { return groups; }

  std::vector<ShiftMove> shifts;
  std::vector<ScaleMove> scales;
  std::vector<std::vector<std::string>> groups;

 private:
  std::vector<std::string> names_;
  std::vector<Term> terms_;
  std::vector<double> start_;
  std::vector<std::vector<std::size_t>> blankets_;
};

/// Log density of N(0, sigma^2 ((1 - rho) I + rho 11')) by Cholesky of the dense matrix.
double dense_mvn(const std::vector<double>& e, double sigma, double rho);

/// Normal equations for y = a + b x; returns (a, b).
std::pair<double, double> normal_equations(const std::vector<double>& x, const std::vector<double>& y);

/// Trapezoid rule on [lo, hi] with n intervals.
double trapezoid(const std::function<double(double)>& f, double lo, double hi, int n);

/// Posterior mean and quantiles of a 1-D unnormalized log density by quadrature.
struct QuadratureSummary {
  double mean = 0.0, q05 = 0.0, q95 = 0.0;
};
QuadratureSummary quadrature_summary(const std::function<double(double)>& log_density, double lo,
                                     double hi, int n);

TripRecord make_trip(std::string id, int boat, int reef, std::array<Count, 4> maxn,
                     std::int64_t n, Count mr, double r);

/// Random trips covering all four (boat, reef) cells with some missing
/// cameras; mark-recapture only at large reefs. Replicates assigned.
std::vector<TripRecord> random_trips(std::uint64_t seed, int n);

/// A state with every population parameter set from its prior (on the
/// sampling scale) and latent values drawn around the data.
ParameterState random_state(const ModelGraph& graph, std::uint64_t seed);

/// 14 random trips, camera ratios and a two-chain table of log phi and rho
/// draws roughly tracking r N. With `rov_rare` only two trips keep the ROV.
struct PackFixture {
  std::vector<TripRecord> trips;
  std::vector<std::array<std::optional<double>, kCameraCount>> ratios;
  PosteriorDraws draws;
};
PackFixture pack_fixture(int n_draws, bool rov_rare);

}  // namespace gearcalib::testing
