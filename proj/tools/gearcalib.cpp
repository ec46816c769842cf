// gearcalib command-line entry points.
//
// Exit codes: 0 success, 1 nonconvergence, 2 input or runtime error.

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gearcalib/calibration.hpp"
#include "gearcalib/dataset.hpp"
#include "gearcalib/inference.hpp"
#include "gearcalib/model.hpp"
#include "gearcalib/pack.hpp"
#include "gearcalib/service.hpp"
#include "gearcalib/simulation.hpp"
#include "gearcalib/stats.hpp"

namespace fs = std::filesystem;
using namespace gearcalib;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kNotConverged = 1;
constexpr int kInputError = 2;

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << bytes;
}

void require_file(const std::string& flag, const fs::path& p) {
  if (p.empty()) throw InputError(flag + " is required");
  if (!fs::is_regular_file(p)) throw InputError(flag + ": no such file " + p.string());
}

/// Inputs and outputs of one command, written last as manifest.json.
class Manifest {
 public:
  Manifest(std::string command, fs::path out_dir)
      : command_(std::move(command)), out_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {}

  void input(const std::string& role, const fs::path& p) {
    inputs_.push_back({{"role", role}, {"path", p.string()}, {"sha256", sha256_hex(read_file(p))}});
  }
  void config(const std::string& key, ojson value) { config_[key] = std::move(value); }
  /// Writes `bytes` under the output directory and records it.
  void output(const std::string& name, std::string_view bytes) {
    write_file(out_ / name, bytes);
    outputs_.push_back({{"path", name}, {"sha256", sha256_hex(bytes)}, {"bytes", bytes.size()}});
  }
  void phase(const std::string& name) {
    const auto now = std::chrono::steady_clock::now();
    timings_[name] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }
  void finish(int exit_code) {
    ojson doc;
    doc["command"] = command_;
    doc["exit_code"] = exit_code;
    doc["config"] = config_;
    doc["inputs"] = inputs_;
    doc["outputs"] = outputs_;
    timings_["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    doc["timings_seconds"] = timings_;
    write_file(out_ / "manifest.json", doc.dump(2) + "\n");
  }

 private:
  std::string command_;
  fs::path out_;
  std::chrono::steady_clock::time_point start_, last_ = std::chrono::steady_clock::now();
  ojson config_ = ojson::object(), inputs_ = ojson::array(), outputs_ = ojson::array(),
        timings_ = ojson::object();
};

struct Common {
  fs::path trips, species, registry, model_config, sampler_config, out;
  std::optional<std::uint64_t> seed;
};

std::vector<TripRecord> load_inputs(const Common& c, Manifest& m,
                                    std::optional<SpeciesMaxNTable>* table_out = nullptr) {
  require_file("--trips", c.trips);
  m.input("trips", c.trips);
  auto trips = load_trips(c.trips);
  if (!c.species.empty() || !c.registry.empty()) {
    require_file("--species", c.species);
    require_file("--registry", c.registry);
    m.input("species", c.species);
    m.input("registry", c.registry);
    auto table = load_species_table(c.species, c.registry);
    attach_pooled_ratios(trips, table);
    if (table_out) table_out->emplace(std::move(table));
  }
  validate_trips(trips);
  return trips;
}

ModelConfig load_model(const Common& c, Manifest& m, ModelConfig fallback) {
  if (c.model_config.empty()) return fallback;
  require_file("--model-config", c.model_config);
  m.input("model_config", c.model_config);
  return ModelConfig::load(c.model_config);
}

SamplerConfig load_sampler(const Common& c, Manifest& m) {
  SamplerConfig s;
  if (!c.sampler_config.empty()) {
    require_file("--sampler-config", c.sampler_config);
    m.input("sampler_config", c.sampler_config);
    s = SamplerConfig::load(c.sampler_config);
  }
  if (c.seed) s.seed = *c.seed;
  s.validate();
  return s;
}

void prepare_out(const fs::path& out) {
  if (out.empty()) throw InputError("--out is required");
  fs::create_directories(out);
}

std::string trace_json(const PosteriorDraws& draws, const DiagnosticsReport& report) {
  ojson doc;
  doc["chains"] = draws.n_chains();
  doc["draws_per_chain"] = draws.n_chains() ? draws.n_draws() / static_cast<std::size_t>(draws.n_chains()) : 0;
  ojson series = ojson::object();
  for (const auto& p : report.params) series[p.name] = draws.by_chain(p.name);
  doc["series"] = std::move(series);
  return doc.dump() + "\n";
}

std::string draws_csv(const PosteriorDraws& d) {
  std::ostringstream s;
  d.write_csv(s);
  return s.str();
}

std::string trips_text(const std::vector<TripRecord>& trips) {
  std::ostringstream s;
  write_trips(s, trips);
  return s.str();
}

int cmd_fit(const Common& c) {
  prepare_out(c.out);
  Manifest m("fit", c.out);
  const auto trips = load_inputs(c, m);
  const auto model = load_model(c, m, ModelConfig::final_model());
  const auto sampler = load_sampler(c, m);
  m.config("model", model.serialize());
  m.config("model_hash", model.hash());
  m.config("sampler", sampler.serialize());
  m.config("seed", sampler.seed);
  const ModelGraph graph(model, trips);
  m.phase("setup");
  const auto draws = run_mcmc(graph, sampler);
  m.phase("sampling");
  const auto report = diagnose(graph, draws);
  m.output("draws.csv", draws_csv(draws));
  m.output("diagnostics.json", report.to_json());
  m.output("trace.json", trace_json(draws, report));
  m.output("trips.csv", trips_text(trips));
  m.phase("write");
  const int code = report.converged ? kOk : kNotConverged;
  m.finish(code);
  std::cout << "fit: " << draws.n_draws() << " draws of " << graph.dimension() << " coordinates; "
            << (report.converged ? "converged" : "NOT converged") << '\n';
  for (const auto& f : report.failures) std::cout << "  " << f << '\n';
  return code;
}

/// Provenance seed and model hash come from the fit manifest next to the draws.
std::pair<std::string, std::uint64_t> fit_provenance(const fs::path& draws) {
  const auto manifest = draws.parent_path() / "manifest.json";
  if (!fs::is_regular_file(manifest)) return {"unknown", 0};
  const auto doc = nlohmann::json::parse(read_file(manifest), nullptr, false);
  if (doc.is_discarded() || !doc.contains("config")) return {"unknown", 0};
  const auto& cfg = doc["config"];
  return {cfg.value("model_hash", std::string("unknown")), cfg.value("seed", std::uint64_t{0})};
}

int cmd_pack(const Common& c, const fs::path& draws_path, const std::vector<std::string>& cameras) {
  prepare_out(c.out);
  Manifest m("pack", c.out);
  std::optional<SpeciesMaxNTable> table;
  const auto trips = load_inputs(c, m, &table);
  require_file("--draws", draws_path);
  m.input("draws", draws_path);
  const auto draws = PosteriorDraws::load(draws_path);
  auto [hash, seed] = fit_provenance(draws_path);
  if (!c.model_config.empty()) hash = load_model(c, m, {}).hash();
  if (c.seed) seed = *c.seed;
  PackProvenance prov{hash, seed, 0, 0, sha256_hex(trips_text(trips))};
  std::vector<std::array<std::optional<double>, kCameraCount>> ratios;
  if (table) ratios = compute_camera_ratios(*table, trips);
  auto pack = build_pack(draws, trips, table ? &ratios : nullptr, prov);
  if (!cameras.empty()) {
    std::set<Camera> keep;
    for (const auto& s : cameras) keep.insert(parse_camera(s));
    std::erase_if(pack.cameras, [&](const auto& kv) { return !keep.contains(kv.first); });
    std::erase_if(pack.paired, [&](const auto& kv) { return !keep.contains(kv.first); });
  }
  m.phase("build");
  m.output("pack.json", pack.dump());
  m.finish(kOk);
  for (const auto& w : pack.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << "pack: " << pack.cameras.size() << " cameras, " << pack.paired.size() << " paired models, "
            << pack.provenance.draw_count << " draws\n";
  for (const auto& [cam, entry] : pack.cameras)
    std::cout << "  " << camera_code(cam) << ": phi = " << entry.fit.median_intercept() << " + "
              << entry.fit.median_slope() << " * maxn, median R2 " << entry.fit.median_r2 << '\n';
  return kOk;
}

int cmd_simulate(const Common& c, const fs::path& draws_path, int n_datasets, int replication, double jitter) {
  prepare_out(c.out);
  Manifest m("simulate", c.out);
  const auto trips = load_inputs(c, m);
  require_file("--draws", draws_path);
  m.input("final_draws", draws_path);
  if (n_datasets < 1) throw InputError("--n-datasets must be at least 1");
  const auto draws = PosteriorDraws::load(draws_path);
  const auto truth = assign_sim_parameters(draws, trips);
  CaptureStudyConfig sc;
  sc.n_datasets = n_datasets;
  sc.replication = replication;
  sc.jitter_sd = jitter;
  sc.sampler = load_sampler(c, m);
  sc.master_seed = sc.sampler.seed;
  sc.progress = [](const ReplicateStatus& r) {
    std::cerr << "replicate " << r.index << (r.converged ? " converged" : " NOT converged") << " (max R-hat "
              << r.max_rhat << ", min ESS " << r.min_ess << ")\n";
  };
  m.config("n_datasets", n_datasets);
  m.config("replication", replication);
  m.config("jitter_sd", jitter);
  m.config("master_seed", sc.master_seed);
  m.config("sampler", sc.sampler.serialize());
  m.output("truth.json", truth.to_json().dump(2) + "\n");
  m.phase("assign");
  const auto report = run_capture_study(truth, trips, sc);
  m.phase("study");
  m.output("capture_table.txt", report.table());
  m.output("capture.json", report.to_json().dump(2) + "\n");
  const int code = report.n_included() > 0 ? kOk : kNotConverged;
  m.finish(code);
  std::cout << report.table();
  return code;
}

int cmd_fixture(const Common& c) {
  prepare_out(c.out);
  Manifest m("fixture", c.out);
  const std::uint64_t seed = c.seed.value_or(20240601);
  const auto model = load_model(c, m, ModelConfig::final_model());
  const auto fx = make_fixture(model, seed);
  m.config("seed", seed);
  std::ostringstream species, registry;
  write_species_csv(species, fx.species);
  write_registry_csv(registry, fx.registry);
  m.output("trips.csv", trips_text(fx.trips));
  m.output("species.csv", species.str());
  m.output("registry.csv", registry.str());
  m.output("model_final.cfg", ModelConfig::final_model().serialize());
  m.output("model_comprehensive.cfg", ModelConfig::comprehensive().serialize());
  m.output("sampler.cfg", SamplerConfig{}.serialize());
  m.output("truth.json", fx.truth.to_json().dump(2) + "\n");
  m.finish(kOk);
  std::cout << "fixture: " << fx.trips.size() << " trips written to " << c.out.string() << '\n';
  return kOk;
}

int cmd_calibrate(const fs::path& pack_path, const std::string& camera, std::int64_t maxn) {
  require_file("--pack", pack_path);
  const auto pack = load_pack(pack_path);
  const Camera cam = parse_camera(camera);
  if (!pack.has_camera(cam)) throw InputError("camera " + camera + " is not in the pack");
  if (maxn < 0) throw InputError("--maxn must be nonnegative");
  const auto est = apply_calibration(pack.camera(cam), maxn);
  std::cout << ojson{{"camera", camera}, {"maxn", maxn}, {"estimate", est.estimate}, {"approx_se", est.approx_se}}.dump()
            << '\n';
  return kOk;
}

HttpServer* g_server = nullptr;

int cmd_serve(const ServiceConfig& cfg) {
  require_file("--pack", cfg.pack_path);
  auto service = std::make_shared<const CalibrationService>(CalibrationService::from_file(cfg.pack_path, cfg.cors_allowlist));
  HttpServer server(service, cfg.bind_address, cfg.port);
  const int port = server.bind();
  std::cout << "serving " << cfg.pack_path.string() << " on http://" << cfg.bind_address << ':' << port
            << " (ETag " << service->etag() << ")" << std::endl;
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  server.listen();
  g_server = nullptr;
  return kOk;
}

void add_common(CLI::App* app, Common& c, bool species, bool configs) {
  app->add_option("--trips", c.trips, "trips CSV");
  if (species) {
    app->add_option("--species", c.species, "per-species MaxN CSV (trip_id,camera,species_id,maxn)");
    app->add_option("--registry", c.registry, "species registry CSV (species_id,is_gaj,is_gaj_plus)");
  }
  if (configs) {
    app->add_option("--model-config", c.model_config, "model configuration file");
    app->add_option("--sampler-config", c.sampler_config, "sampler configuration file");
  }
  app->add_option("--seed", c.seed, "seed for all randomness");
  app->add_option("--out", c.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian gear calibration: fit, pack, simulate and serve"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gearcalib 1.0");

  Common fit_c, pack_c, sim_c, fx_c;
  auto* fit = app.add_subcommand("fit", "fit a model to calibration trips");
  add_common(fit, fit_c, true, true);

  fs::path pack_draws;
  std::vector<std::string> pack_cameras;
  auto* pack = app.add_subcommand("pack", "build a calibration pack from posterior draws");
  add_common(pack, pack_c, true, true);
  pack->add_option("--draws", pack_draws, "draws.csv from fit");
  pack->add_option("--camera", pack_cameras, "keep only these cameras")->check(CLI::IsMember({"D", "S", "T", "R"}));

  fs::path sim_draws;
  int n_datasets = 20, replication = 6;
  double jitter = 0.27;
  auto* sim = app.add_subcommand("simulate", "capture-rate study from a final-model fit");
  add_common(sim, sim_c, false, true);
  sim->add_option("--draws", sim_draws, "draws.csv of the final-model fit");
  sim->add_option("--n-datasets", n_datasets, "number of simulated datasets");
  sim->add_option("--replication", replication, "copies of the base design per dataset");
  sim->add_option("--jitter", jitter, "log-scale SD of the pooled-ratio jitter");

  auto* fx = app.add_subcommand("fixture", "write the synthetic 21-trip fixture");
  fx->add_option("--model-config", fx_c.model_config, "model configuration for the generator");
  fx->add_option("--seed", fx_c.seed, "generator seed");
  fx->add_option("--out", fx_c.out, "output directory");

  fs::path cal_pack;
  std::string cal_camera;
  std::int64_t cal_maxn = 0;
  auto* cal = app.add_subcommand("calibrate", "convert one MaxN count with a pack");
  cal->add_option("--pack", cal_pack, "calibration pack")->required();
  cal->add_option("--camera", cal_camera, "camera code")->required()->check(CLI::IsMember({"D", "S", "T", "R"}));
  cal->add_option("--maxn", cal_maxn, "MaxN count")->required();

  ServiceConfig svc;
  auto* serve = app.add_subcommand("serve", "serve a pack over HTTP");
  serve->add_option("--pack", svc.pack_path, "calibration pack")->required();
  serve->add_option("--host", svc.bind_address, "bind address");
  serve->add_option("--port", svc.port, "port (0 picks a free one)");
  serve->add_option("--cors", svc.cors_allowlist, "allowed origins ('*' for any)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInputError;
  }

  try {
    if (*fit) return cmd_fit(fit_c);
    if (*pack) return cmd_pack(pack_c, pack_draws, pack_cameras);
    if (*sim) return cmd_simulate(sim_c, sim_draws, n_datasets, replication, jitter);
    if (*fx) return cmd_fixture(fx_c);
    if (*cal) return cmd_calibrate(cal_pack, cal_camera, cal_maxn);
    if (*serve) return cmd_serve(svc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  }
  return kInputError;
}
