// Acceptance suite: one PASS/FAIL line per primary criterion.
//
//   gearcalib_acceptance <gearcalib executable> <data dir> [criterion ...]
//
// Criteria are numbered 1-8; with no list all of them run. Exit status is 0
// only when every selected criterion passes.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <sys/wait.h>
#include <unistd.h>

#include "gearcalib/calibration.hpp"
#include "gearcalib/dataset.hpp"
#include "gearcalib/inference.hpp"
#include "gearcalib/model.hpp"
#include "gearcalib/ratio.hpp"
#include "gearcalib/rng.hpp"
#include "gearcalib/simulation.hpp"
#include "gearcalib/stats.hpp"
#include "support.hpp"

using namespace gearcalib;
namespace fs = std::filesystem;
using gearcalib::testing::LambdaTarget;

namespace {

constexpr double kZ95 = 1.6448536269514722;  // standard normal 0.95 quantile

fs::path g_cli, g_data;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1: oracles

struct Oracle {
  std::string name;
  double mean, q05, q95;
};

// Mean and both 90% endpoints within 2 MCSE of the oracle for every listed parameter.
bool within_mcse(const PosteriorDraws& d, const std::vector<Oracle>& oracles, std::string& worst) {
  bool ok = true;
  double max_z = 0.0;
  for (const auto& o : oracles) {
    const auto x = d.column(o.name);
    const double z[3] = {std::abs(mean(x) - o.mean) / mcse_mean(d, o.name),
                         std::abs(quantile(x, 0.05) - o.q05) / mcse_quantile(d, o.name, 0.05),
                         std::abs(quantile(x, 0.95) - o.q95) / mcse_quantile(d, o.name, 0.95)};
    for (double v : z) {
      ok = ok && v <= 2.0;
      max_z = std::max(max_z, v);
    }
  }
  worst = fmt(max_z, 3);
  return ok;
}

SamplerConfig oracle_sampler(std::uint64_t seed) {
  SamplerConfig c;
  c.n_chains = 4;
  c.n_iterations = 22000;
  c.burn_in = 2000;
  c.thin = 1;
  c.seed = seed;
  return c;
}

Outcome sampler_oracles() {
  std::string detail;
  bool all = true;
  double slowest = 0.0;
  const auto run = [&](const std::string& label, const LambdaTarget& target, const std::vector<Oracle>& oracles) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto d = run_mcmc(target, oracle_sampler(20240611));
    std::string worst;
    const bool ok = within_mcse(d, oracles, worst);
    const double t = seconds_since(t0);
    slowest = std::max(slowest, t);
    all = all && ok && t < 60.0;
    detail += label + " max|err|/MCSE " + worst + " in " + fmt(t, 2) + "s; ";
  };

  // theta ~ N(0, 1), x = 2 ~ N(theta, 1): theta | x ~ N(1, 1/2).
  run("normal-normal",
      LambdaTarget({"theta"},
                   {{{0}, [](auto u) { return normal_logpdf(u[0], 0.0, 1.0); }},
                    {{0}, [](auto u) { return normal_logpdf(2.0, u[0], 1.0); }}},
                   {0.0}),
      {{"theta", 1.0, 1.0 - kZ95 * std::sqrt(0.5), 1.0 + kZ95 * std::sqrt(0.5)}});

  // log phi ~ N(0, 1), n = 3 ~ Pois(phi); oracle by quadrature.
  const auto q = gearcalib::testing::quadrature_summary(
      [](double v) { return normal_logpdf(v, 0.0, 1.0) + 3.0 * v - std::exp(v); }, -8.0, 8.0, 200000);
  run("poisson-lognormal",
      LambdaTarget({"log_phi"},
                   {{{0}, [](auto u) { return normal_logpdf(u[0], 0.0, 1.0); }},
                    {{0}, [](auto u) { return poisson_logpmf_lograte(3.0, u[0], std::lgamma(4.0)); }}},
                   {0.0}),
      {{"log_phi", q.mean, q.q05, q.q95}});

  // mu ~ N(0, 1); theta_g ~ N(mu, 0.5); x_gk lognormal with log x_gk ~ N(theta_g, 1).
  // The joint posterior of (mu, theta) is Gaussian with precision Q and Q m = b.
  const std::vector<std::vector<double>> log_x{{0.4, 1.1}, {-0.3, 0.2, 0.5}, {1.6}};
  const double tau2 = 0.25;
  Eigen::Matrix4d prec = Eigen::Matrix4d::Zero();
  Eigen::Vector4d b = Eigen::Vector4d::Zero();
  prec(0, 0) = 1.0 + 3.0 / tau2;
  std::vector<LambdaTarget::Term> terms{{{0}, [](auto u) { return normal_logpdf(u[0], 0.0, 1.0); }}};
  for (int g = 0; g < 3; ++g) {
    const auto c = static_cast<std::size_t>(g + 1);
    prec(0, c) = prec(c, 0) = -1.0 / tau2;
    prec(c, c) = 1.0 / tau2 + static_cast<double>(log_x[g].size());
    terms.push_back({{0, c}, [c](auto u) { return normal_logpdf(u[c], u[0], 0.5); }});
    for (double v : log_x[g]) {
      b(c) += v;
      terms.push_back({{c}, [c, v](auto u) { return normal_logpdf(v, u[c], 1.0) - v; }});
    }
  }
  const Eigen::Matrix4d cov = prec.inverse();
  const Eigen::Vector4d m = cov * b;
  std::vector<Oracle> two_level;
  const std::vector<std::string> names{"mu", "theta_1", "theta_2", "theta_3"};
  for (int k = 0; k < 4; ++k) {
    const double sd = std::sqrt(cov(k, k));
    two_level.push_back({names[k], m(k), m(k) - kZ95 * sd, m(k) + kZ95 * sd});
  }
  run("two-level lognormal", LambdaTarget(names, std::move(terms), {0.0, 0.0, 0.0, 0.0}), two_level);
  detail += "tolerance 2 MCSE, limit 60s";
  return {all, detail};
}

// ------------------------------------------------------- 2: exchangeable MVN

Outcome exchangeable_mvn() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(20240612, 0);
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const int d = 2 + static_cast<int>(rng.uniform() * 3);
    const double sigma = std::exp(rng.normal());
    const double lower = -1.0 / (d - 1);
    const double rho = lower + (1.0 - lower) * (0.02 + 0.96 * rng.uniform());
    std::vector<double> e(d);
    for (auto& v : e) v = sigma * 2.0 * rng.normal();
    worst = std::max(worst, std::abs(exchangeable_mvn_logdensity(e, sigma, rho) -
                                     gearcalib::testing::dense_mvn(e, sigma, rho)));
  }
  return {worst < 1e-10, "1000 cases d in [2, 4], max |log-density error| " + fmt(worst, 3) + " (limit 1e-10) in " +
                             fmt(seconds_since(t0), 2) + "s"};
}

// --------------------------------------------------- 3: constrained least squares

Outcome constrained_least_squares() {
  Rng rng(20240613, 0);
  int positive = 0, negative = 0, bad = 0;
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const int n = 2 + static_cast<int>(rng.uniform() * 30);
    std::vector<double> x(n), y(n);
    const double slope = rng.normal();
    for (int i = 0; i < n; ++i) {
      x[i] = 10.0 * rng.uniform();
      y[i] = 1.0 + slope * x[i] + rng.normal();
    }
    const auto f = constrained_ls(x, y);
    const auto [a, s] = gearcalib::testing::normal_equations(x, y);
    if (s >= 0.0) {
      ++positive;
      const double err = std::max(std::abs(f.intercept - a) / std::max(1.0, std::abs(a)),
                                  std::abs(f.slope - s) / std::max(1.0, std::abs(s)));
      worst = std::max(worst, err);
      if (f.clamped || err > 1e-10) ++bad;
    } else {
      ++negative;
      if (!f.clamped || f.slope != 0.0 || std::abs(f.intercept - mean(y)) > 1e-12 * std::max(1.0, std::abs(mean(y))))
        ++bad;
    }
  }
  return {bad == 0 && positive > 0 && negative > 0,
          std::to_string(positive) + " nonnegative-slope cases, max relative error " + fmt(worst, 3) +
              " (limit 1e-10); " + std::to_string(negative) + " negative-slope cases clamped to (mean, 0); " +
              std::to_string(bad) + " violations"};
}

// ------------------------------------------------- 4: generate and recover

Outcome generate_and_recover() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto config = ModelConfig::final_model();
  const auto truth = fixture_truth(config);
  const std::vector<std::string> gated{"nu_x_1", "gamma_x_1", "sigma_phi_1"};
  std::map<std::string, int> captured;
  bool adequacy_ok = true;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto trips = simulate_dataset(truth, experiment_design(), 6, 0.27, 1000 + seed);
    const ModelGraph graph(config, trips);
    SamplerConfig sc;
    sc.seed = seed;
    const auto draws = run_mcmc(graph, sc);
    const auto adequacy = adequacy_alignment(draws, trips);
    double mean_rn = 0.0;
    for (const auto& t : trips) mean_rn += t.pooled_ratio * static_cast<double>(t.acoustic_total);
    mean_rn /= static_cast<double>(trips.size());
    const double c0 = adequacy.acoustic.median_intercept(), c1 = adequacy.acoustic.median_slope();
    const bool ok = c1 >= 0.8 && c1 <= 1.2 && std::abs(c0) < 0.1 * mean_rn;
    if (seed == 1) adequacy_ok = ok;
    detail += "seed " + std::to_string(seed) + (seed == 1 ? " (adequacy gated)" : "") + ": c1 " + fmt(c1, 3) +
              ", c0 " + fmt(c0, 3) + " vs " + fmt(0.1 * mean_rn, 3) + ", captured {";
    for (const auto& name : gated) {
      const auto ci = central_interval(draws.column(name), 0.9);
      const bool hit = ci.contains(truth.at(name));
      captured[name] += hit;
      detail += name + (hit ? " yes " : " no ");
    }
    detail.back() = '}';
    detail += "; ";
  }
  bool capture_ok = true;
  for (const auto& name : gated) capture_ok = capture_ok && captured[name] >= 3;
  const double t = seconds_since(t0);
  detail += "runtime " + fmt(t / 60.0, 3) + " min (limit 20)";
  return {adequacy_ok && capture_ok && t < 1200.0, detail};
}

// ------------------------------------------------- fixture fit shared by 5 and 6

struct FixtureFit {
  std::vector<TripRecord> trips;
  PosteriorDraws draws;
  bool converged = false;
};

const FixtureFit& fixture_fit() {
  static const FixtureFit fit = [] {
    FixtureFit f;
    f.trips = load_trips(g_data / "trips.csv");
    const auto table = load_species_table(g_data / "species.csv", g_data / "registry.csv");
    attach_pooled_ratios(f.trips, table);
    validate_trips(f.trips);
    const ModelGraph graph(ModelConfig::load(g_data / "model_final.cfg"), f.trips);
    f.draws = run_mcmc(graph, SamplerConfig::load(g_data / "sampler.cfg"));
    f.converged = diagnose(graph, f.draws).converged;
    return f;
  }();
  return fit;
}

// ------------------------------------------------------- 5: capture study

Outcome capture_study() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& fit = fixture_fit();
  const auto truth = assign_sim_parameters(fit.draws, fit.trips);
  CaptureStudyConfig sc;
  sc.master_seed = 20240615;
  sc.progress = [](const ReplicateStatus& r) {
    std::cerr << "  capture replicate " << r.index << (r.converged ? " converged" : " NOT converged")
              << " (max R-hat " << fmt(r.max_rhat) << ", min ESS " << fmt(r.min_ess) << ")" << std::endl;
  };
  const auto report = run_capture_study(truth, fit.trips, sc);
  std::ofstream("acceptance_capture_table.txt") << report.table();
  const int included = report.n_included();
  const double m_log = report.m_log_rate(), level3 = report.level3_rate();
  const double t = seconds_since(t0);
  const bool ok = included > 0 && m_log >= 0.75 && level3 >= 0.70;
  return {ok, std::to_string(included) + "/" + std::to_string(sc.n_datasets) + " replicates converged; M_log rate " +
                  fmt(m_log, 3) + " (>= 0.75), Level-3 rate " + fmt(level3, 3) + " (>= 0.70), Level-2.1 rate " +
                  fmt(report.pooled_rate([](const CaptureRow& r) { return r.level.starts_with("2.1"); }), 3) +
                  " (not gated); runtime " + fmt(t / 3600.0, 3) + " h on " + std::to_string(worker_count(0, 1 << 20)) +
                  " worker(s); table in acceptance_capture_table.txt"};
}

// ------------------------------------------------------ 6: trap-camera R2

Outcome trap_camera_r2() {
  const auto& fit = fixture_fit();
  const auto entry = derive_calibration(fit.draws, fit.trips, Camera::T);
  const double r2 = entry.fit.median_r2;
  return {std::isfinite(r2) && r2 >= 0.0 && r2 <= 1.0,
          "fixture fit (" + std::string(fit.converged ? "converged" : "NOT converged") +
              "), phi on y_T posterior-median R2 = " + fmt(r2, 4) + " over " + std::to_string(entry.fit.n_points) +
              " trips (reported, not gated)"};
}

// ------------------------------------------------------ 7: ratio regression

Outcome ratio_regression() {
  Rng rng(20240617, 0);
  int cases = 0, skipped = 0, bad_coef = 0, bad_se = 0;
  double worst = 0.0;
  while (cases < 1000) {
    const int n = 4 + static_cast<int>(rng.uniform() * 30);
    std::vector<std::int64_t> y(n);
    std::vector<double> cr(n), r(n);
    Eigen::MatrixXd x(n, 3);
    Eigen::VectorXd yy(n);
    for (int s = 0; s < n; ++s) {
      y[s] = rng.poisson(20.0 * rng.uniform());
      cr[s] = rng.uniform();
      r[s] = 0.1 + 0.05 * std::log(y[s] + 1.0) + 0.6 * cr[s] + 0.05 * rng.normal();
      x.row(s) << 1.0, std::log(static_cast<double>(y[s]) + 1.0), cr[s];
      yy(s) = r[s];
    }
    RatioRegressionModel m;
    try {
      m = fit_ratio_regression(Camera::T, r, y, cr);
    } catch (const CollinearityError&) {
      ++skipped;
      continue;
    }
    ++cases;
    const Eigen::Matrix3d xtx = x.transpose() * x;
    const Eigen::Vector3d oracle = xtx.ldlt().solve(x.transpose() * yy);
    double err = 0.0;
    for (int k = 0; k < 3; ++k) err = std::max(err, std::abs(m.coef(k) - oracle(k)) / std::max(1.0, std::abs(oracle(k))));
    worst = std::max(worst, err);
    bad_coef += err > 1e-10;
    const auto p = predict_pooled_ratio(m, rng.poisson(10.0), rng.uniform());
    bad_se += !(p.pred_se >= std::sqrt(m.s2));
  }
  return {bad_coef == 0 && bad_se == 0,
          "1000 cases (" + std::to_string(skipped) + " rank-deficient draws skipped), max relative coefficient error " +
              fmt(worst, 3) + " (limit 1e-10), pred_se < s in " + std::to_string(bad_se) + " cases"};
}

// ------------------------------------------------------ 8: determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = "\"" + g_cli.string() + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Every file except the manifest byte-identical; manifests equal without timings.
bool same_outputs(const fs::path& a, const fs::path& b, std::string& detail) {
  std::set<std::string> names;
  for (const auto& dir : {a, b})
    for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
  bool ok = true;
  for (const auto& n : names) {
    if (!fs::exists(a / n) || !fs::exists(b / n)) {
      detail += n + " missing; ";
      ok = false;
      continue;
    }
    if (n == "manifest.json") {
      auto ma = nlohmann::json::parse(slurp(a / n)), mb = nlohmann::json::parse(slurp(b / n));
      ma.erase("timings_seconds");
      mb.erase("timings_seconds");
      if (ma != mb) {
        detail += n + " differs; ";
        ok = false;
      }
    } else if (slurp(a / n) != slurp(b / n)) {
      detail += n + " differs; ";
      ok = false;
    }
  }
  return ok;
}

Outcome determinism() {
  const auto tmp = fs::temp_directory_path() / ("gearcalib_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(tmp);
  const std::string inputs = "--trips " + q(g_data / "trips.csv") + " --species " + q(g_data / "species.csv") +
                             " --registry " + q(g_data / "registry.csv") + " --model-config " +
                             q(g_data / "model_final.cfg");
  const auto small = tmp / "sampler_small.cfg";
  std::ofstream(small) << "n_chains = 4\nn_iterations = 3000\nburn_in = 1000\nthin = 2\nseed = 5\n";
  std::string detail;
  bool ok = true;
  std::vector<std::string> compared;
  for (const std::string cmd : {"fit", "pack", "simulate"}) {
    for (int k = 1; k <= 2; ++k) {
      const auto out = tmp / (cmd + std::to_string(k));
      std::string args;
      if (cmd == "fit") args = "fit " + inputs + " --sampler-config " + q(g_data / "sampler.cfg");
      if (cmd == "pack") args = "pack " + inputs + " --draws " + q(tmp / "fit1" / "draws.csv");
      if (cmd == "simulate")
        args = "simulate --trips " + q(g_data / "trips.csv") + " --draws " + q(tmp / "fit1" / "draws.csv") +
               " --n-datasets 2 --replication 1 --sampler-config " + q(small);
      const int code = run_cli(args + " --out " + q(out));
      if (code != 0 && code != 1) {
        detail += cmd + " run " + std::to_string(k) + " exited " + std::to_string(code) + "; ";
        ok = false;
      }
    }
    if (same_outputs(tmp / (cmd + "1"), tmp / (cmd + "2"), detail)) {
      std::size_t files = 0;
      for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp / (cmd + "1"))) ++files;
      compared.push_back(cmd + " (" + std::to_string(files) + " files)");
    } else {
      ok = false;
    }
  }
  fs::remove_all(tmp);
  std::string list;
  for (const auto& c : compared) list += (list.empty() ? "" : ", ") + c;
  return {ok, "identical across two runs: " + (list.empty() ? std::string("none") : list) +
                  (detail.empty() ? "" : "; " + detail) + " (manifest timings excluded)"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: gearcalib_acceptance <gearcalib executable> <data dir> [criterion ...]\n";
    return 2;
  }
  g_cli = fs::absolute(argv[1]);
  g_data = fs::absolute(argv[2]);
  std::set<int> selected;
  for (int k = 3; k < argc; ++k) selected.insert(std::atoi(argv[k]));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"sampler matches closed-form and quadrature oracles", sampler_oracles},
      {"exchangeable MVN equals the dense oracle", exchangeable_mvn},
      {"constrained least squares equals normal equations or clamps", constrained_least_squares},
      {"generate and recover on the final model", generate_and_recover},
      {"capture study on the comprehensive model", capture_study},
      {"trap-camera R2 emitted on the fixture fit", trap_camera_r2},
      {"ratio regression equals normal equations; pred_se >= s", ratio_regression},
      {"fit, pack and simulate are deterministic", determinism},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[k].first << ": " << o.detail
              << std::endl;
  }
  return failed ? 1 : 0;
}
