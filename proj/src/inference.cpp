#include "gearcalib/inference.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <boost/math/distributions/beta.hpp>
#include <json.hpp>

#include "gearcalib/rng.hpp"

namespace gearcalib {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

double parse_double(const std::string& s, std::string_view what) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end)
    throw std::invalid_argument(std::string(what) + ": not a number '" + s + "'");
  return v;
}

template <typename Int>
Int parse_int(const std::string& s, std::string_view what) {
  Int v = 0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end)
    throw std::invalid_argument(std::string(what) + ": not an integer '" + s + "'");
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph adapter and initialization

namespace {

struct GraphWorkspace final : LogDensity::Workspace {
  std::unique_ptr<ModelGraph::Scratch> scratch;
};

ParameterState initial_state_attempt(const ModelGraph& graph, std::uint64_t seed, int attempt) {
  Rng rng(seed, static_cast<std::uint64_t>(attempt));
  const auto& trips = graph.trips();
  const std::size_t n = trips.size();
  ParameterState st;
  for (const auto& p : graph.population()) {
    const double u = p.prior.mean + 0.1 * p.prior.sd * rng.normal();
    const double v = to_natural_scale(p.prior.transform, u);
    for (const auto& a : p.aliases) st.population[a] = v;
  }
  const double xi = st.population.contains("xi_1") ? st.population.at("xi_1") : 0.0;
  st.log_phi.resize(n);
  st.log_mu.resize(n);
  st.log_tau1.assign(n, kNaN);
  st.log_tau2.assign(n, kNaN);
  const bool offset = graph.config().include_ratio_offset;
  for (std::size_t s = 0; s < n; ++s) {
    const auto& t = trips[s];
    const double r = offset ? t.pooled_ratio : 1.0;
    st.log_phi[s] = std::log(r * static_cast<double>(t.acoustic_total) + 1.0);
    for (Camera c : kCameras) {
      const auto& y = t.maxn[index_of(c)];
      st.log_mu[s][index_of(c)] = y ? std::log(static_cast<double>(*y) + 1.0) : st.log_phi[s];
    }
    st.log_tau1[s] = st.log_phi[s] + xi - (offset ? std::log(r) : 0.0);
    st.log_tau2[s] = st.log_phi[s] - xi;
  }
  return st;
}

// First node whose term is not finite, or npos.
std::size_t first_bad_term(const LogDensity& target, std::span<const double> u,
                           std::vector<double>& terms, LogDensity::Workspace* ws) {
  std::vector<std::size_t> ids(target.term_count());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  terms.assign(ids.size(), 0.0);
  target.eval_terms(u, ids, terms, ws);
  for (std::size_t k = 0; k < terms.size(); ++k)
    if (!std::isfinite(terms[k])) return k;
  return static_cast<std::size_t>(-1);
}

}  // namespace

std::unique_ptr<LogDensity::Workspace> GraphTarget::make_workspace() const {
  auto ws = std::make_unique<GraphWorkspace>();
  ws->scratch = graph_.make_scratch();
  return ws;
}

void GraphTarget::eval_terms(std::span<const double> u, std::span<const std::size_t> terms,
                             std::span<double> out, Workspace* ws) const {
  if (auto* g = dynamic_cast<GraphWorkspace*>(ws)) {
    graph_.eval_nodes(u, terms, out, *g->scratch);
    return;
  }
  auto scratch = graph_.make_scratch();
  graph_.eval_nodes(u, terms, out, *scratch);
}

std::vector<double> GraphTarget::initial_point(std::uint64_t seed, int attempt) const {
  return graph_.to_unconstrained(initial_state_attempt(graph_, seed, attempt));
}

std::vector<LogDensity::ShiftMove> GraphTarget::shift_moves() const {
  const ModelGraph& g = graph_;
  const ModelConfig& cfg = g.config();
  const auto& trips = g.trips();
  const std::size_t n = trips.size();
  std::vector<ShiftMove> moves;
  const auto coord = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t p = 0; p < g.population().size(); ++p)
      if (g.population()[p].name == name) return p;
    return std::nullopt;
  };
  const auto sign = [](bool first) { return first ? 1.0 : -1.0; };

  // Level 3: log phi and any latent log tau follow the cell mean.
  for (const char* name : {"beta0", "nu_x_1", "gamma_x_1"}) {
    const auto d = coord(name);
    if (!d) continue;
    ShiftMove m;
    m.name = name;
    m.driver = *d;
    for (std::size_t s = 0; s < n; ++s) {
      double w = 1.0;
      if (std::string_view(name) == "nu_x_1") w = sign(trips[s].boat == 1);
      if (std::string_view(name) == "gamma_x_1") w = sign(trips[s].reef_size == 1);
      m.followers.push_back(g.phi_offset() + s);
      m.weights.push_back(w);
      for (std::size_t tc : {g.tau1_coordinate(s), g.tau2_coordinate(s)})
        if (tc != ModelGraph::npos) {
          m.followers.push_back(tc);
          m.weights.push_back(w);
        }
    }
    moves.push_back(std::move(m));
  }
  if (const auto d = coord("xi_1")) {
    ShiftMove m;
    m.name = "xi_1";
    m.driver = *d;
    for (std::size_t s = 0; s < n; ++s) {
      if (g.tau1_coordinate(s) != ModelGraph::npos) {
        m.followers.push_back(g.tau1_coordinate(s));
        m.weights.push_back(1.0);
      }
      if (g.tau2_coordinate(s) != ModelGraph::npos) {
        m.followers.push_back(g.tau2_coordinate(s));
        m.weights.push_back(-1.0);
      }
    }
    if (!m.followers.empty()) moves.push_back(std::move(m));
  }

  // Level 2.1 intercepts and effects move log mu of their camera.
  for (Camera c : kCameras) {
    const std::string code(1, camera_code(c));
    for (const std::string prefix : {"beta_y0_", "nu_y_1", "gamma_y_1"}) {
      const auto d = coord(prefix + code);
      if (!d) continue;
      ShiftMove m;
      m.name = prefix + code;
      m.driver = *d;
      for (std::size_t s = 0; s < n; ++s) {
        m.followers.push_back(g.mu_offset(c) + s);
        m.weights.push_back(prefix == "nu_y_1"      ? sign(trips[s].boat == 1)
                            : prefix == "gamma_y_1" ? sign(trips[s].reef_size == 1)
                                                    : 1.0);
      }
      moves.push_back(std::move(m));
    }
  }

  // Slopes on centered log phi move log mu of the cells they govern.
  for (std::size_t p = 0; p < g.population().size(); ++p) {
    const auto& param = g.population()[p];
    if (param.prior.transform != Transform::log || !param.name.starts_with("beta1_")) continue;
    ShiftMove m;
    m.name = param.name;
    m.driver = p;
    m.exponential = true;
    if (param.name.size() == 7) {
      // ROV coefficient on centered log mu of D, S or T.
      const Camera on = parse_camera(param.name.substr(6));
      for (std::size_t s = 0; s < n; ++s) {
        m.followers.push_back(g.mu_offset(Camera::R) + s);
        m.weights.push_back(1.0);
        m.covariates.push_back(g.mu_offset(on) + s);
      }
      if (cfg.center_logmu) {
        m.pool_begin = g.mu_offset(on);
        m.pool_size = n;
      }
    } else {
      for (const auto& alias : param.aliases) {
        const SlopeCell cell = parse_slope_cell(std::string_view(alias).substr(6));
        for (std::size_t s = 0; s < n; ++s) {
          if (trips[s].reef_size != cell.reef) continue;
          m.followers.push_back(g.mu_offset(cell.camera) + s);
          m.weights.push_back(1.0);
          m.covariates.push_back(g.phi_offset() + s);
        }
      }
      if (cfg.center_logphi) {
        m.pool_begin = g.phi_offset();
        m.pool_size = n;
      }
    }
    if (!m.followers.empty()) moves.push_back(std::move(m));
  }

  // Pivots: a cell slope steps while the camera intercept and reef effect
  // keep both reef-size cell means of the linear predictor fixed. With the
  // slope on the log scale this ridge is curved, which a linear block
  // proposal cannot follow. The "+" variant also moves log mu about the
  // cell mean of log phi.
  for (std::size_t p = 0; p < g.population().size(); ++p) {
    const auto& param = g.population()[p];
    if (param.prior.transform != Transform::log || !param.name.starts_with("beta1_") || param.name.size() == 7 ||
        param.aliases.size() != 1)
      continue;
    const SlopeCell cell = parse_slope_cell(std::string_view(param.name).substr(6));
    const std::string code(1, camera_code(cell.camera));
    const auto b0 = coord("beta_y0_" + code), gamma = coord("gamma_y_1" + code);
    if (!b0 || !gamma) continue;
    std::vector<std::size_t> in_cell;
    for (std::size_t s = 0; s < n; ++s)
      if (trips[s].reef_size == cell.reef) in_cell.push_back(s);
    if (in_cell.empty()) continue;
    const double inv = 1.0 / static_cast<double>(in_cell.size());
    std::vector<std::pair<std::size_t, double>> cell_mean;
    for (std::size_t s : in_cell) cell_mean.emplace_back(g.phi_offset() + s, inv);
    for (bool with_latent : {false, true}) {
      ShiftMove m;
      m.name = (with_latent ? "pivot+:" : "pivot:") + param.name;
      m.driver = p;
      m.exponential = true;
      m.followers = {*b0, *gamma};
      m.weights = {-0.5, -0.5 * sign(cell.reef == 1)};
      m.covariate_terms = {cell_mean, cell_mean};
      if (with_latent) {
        for (std::size_t s : in_cell) {
          m.followers.push_back(g.mu_offset(cell.camera) + s);
          m.weights.push_back(1.0);
          auto terms = cell_mean;
          for (auto& t : terms) t.second = -t.second;
          terms.emplace_back(g.phi_offset() + s, 1.0);
          m.covariate_terms.push_back(std::move(terms));
        }
      }
      if (cfg.center_logphi) {
        m.pool_begin = g.phi_offset();
        m.pool_size = n;
      }
      moves.push_back(std::move(m));
    }
  }
  return moves;
}

std::vector<std::vector<std::string>> GraphTarget::shift_groups() const {
  std::vector<std::vector<std::string>> groups{{"beta0", "nu_x_1", "gamma_x_1"}};
  for (Camera c : kCameras) {
    const std::string code(1, camera_code(c));
    std::vector<std::string> g{"beta_y0_" + code, "nu_y_1" + code, "gamma_y_1" + code};
    for (const auto& p : graph_.population())
      if (p.name.starts_with("beta1_") && p.name.size() > 7 && p.name.ends_with(code)) g.push_back(p.name);
    if (c == Camera::R)
      for (const char* on : {"beta1_D", "beta1_S", "beta1_T"}) g.emplace_back(on);
    groups.push_back(std::move(g));
  }
  return groups;
}

std::vector<std::vector<std::string>> GraphTarget::default_blocks() const {
  std::vector<std::string> level3;
  for (const auto& p : graph_.population())
    if (p.name == "beta0" || p.name == "nu_x_1" || p.name == "gamma_x_1") level3.push_back(p.name);
  if (level3.size() < 2) return {};
  return {level3};
}

std::vector<LogDensity::ScaleMove> GraphTarget::scale_moves() const {
  const ModelGraph& g = graph_;
  const auto& trips = g.trips();
  const std::size_t n = trips.size();
  std::vector<ScaleMove> moves;
  const auto coord = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t p = 0; p < g.population().size(); ++p)
      if (g.population()[p].name == name) return p;
    return std::nullopt;
  };
  const auto beta0 = coord("beta0"), nu = coord("nu_x_1"), gamma = coord("gamma_x_1"), xi = coord("xi_1");

  const bool shared = g.config().reef_specific_sigma_phi == false;
  for (int j = 1; j <= 2; ++j) {
    const auto d = coord(shared ? "sigma_phi" : "sigma_phi_" + std::to_string(j));
    if (!d || (shared && j == 2)) continue;
    ScaleMove m;
    m.name = g.population()[*d].name;
    m.driver = *d;
    for (std::size_t s = 0; s < n; ++s) {
      if (!shared && trips[s].reef_size != j) continue;
      std::vector<std::pair<std::size_t, double>> c;
      if (beta0) c.emplace_back(*beta0, 1.0);
      if (nu) c.emplace_back(*nu, trips[s].boat == 1 ? 1.0 : -1.0);
      if (gamma) c.emplace_back(*gamma, trips[s].reef_size == 1 ? 1.0 : -1.0);
      m.followers.push_back(g.phi_offset() + s);
      m.offsets.push_back(0.0);
      m.centre.push_back(std::move(c));
    }
    if (!m.followers.empty()) moves.push_back(std::move(m));
  }
  for (int h = 1; h <= 2; ++h) {
    const auto d = coord("sigma_x_" + std::to_string(h));
    if (!d) continue;
    ScaleMove m;
    m.name = "sigma_x_" + std::to_string(h);
    m.driver = *d;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t tc = h == 1 ? g.tau1_coordinate(s) : g.tau2_coordinate(s);
      if (tc == ModelGraph::npos) continue;
      std::vector<std::pair<std::size_t, double>> c{{g.phi_offset() + s, 1.0}};
      if (xi) c.emplace_back(*xi, h == 1 ? 1.0 : -1.0);
      const double log_r = g.config().include_ratio_offset ? std::log(trips[s].pooled_ratio) : 0.0;
      m.followers.push_back(tc);
      m.offsets.push_back(h == 1 ? -log_r : 0.0);
      m.centre.push_back(std::move(c));
    }
    if (!m.followers.empty()) moves.push_back(std::move(m));
  }
  return moves;
}

ParameterState initialize_state(const ModelGraph& graph, std::uint64_t seed) {
  GraphTarget target(graph);
  auto ws = target.make_workspace();
  std::vector<double> terms;
  std::size_t bad = 0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    ParameterState st = initial_state_attempt(graph, seed, attempt);
    const auto u = graph.to_unconstrained(st);
    bad = first_bad_term(target, u, terms, ws.get());
    if (bad == static_cast<std::size_t>(-1)) return st;
  }
  throw InitializationError("non-finite log posterior at initialization after 100 attempts; node " +
                            graph.node_name(bad));
}

// ---------------------------------------------------------------------------
// Sampler configuration

void SamplerConfig::validate() const {
  if (n_chains < 1) throw std::invalid_argument("n_chains must be >= 1");
  if (thin < 1) throw std::invalid_argument("thin must be >= 1");
  if (burn_in < 0 || burn_in >= n_iterations)
    throw std::invalid_argument("burn_in must lie in [0, n_iterations)");
  if (draws_per_chain() < 100)
    throw std::invalid_argument("(n_iterations - burn_in) / thin must be >= 100");
  if (adapt_window < 1) throw std::invalid_argument("adapt_window must be >= 1");
  if (!(target_scalar > 0.0 && target_scalar < 1.0) || !(target_block > 0.0 && target_block < 1.0))
    throw std::invalid_argument("acceptance targets must lie in (0, 1)");
}

std::string SamplerConfig::serialize() const {
  std::ostringstream o;
  o << "n_chains = " << n_chains << '\n'
    << "n_iterations = " << n_iterations << '\n'
    << "burn_in = " << burn_in << '\n'
    << "thin = " << thin << '\n'
    << "seed = " << seed << '\n'
    << "target_scalar = " << format_double(target_scalar) << '\n'
    << "target_block = " << format_double(target_block) << '\n'
    << "adapt_window = " << adapt_window << '\n'
    << "blocks = ";
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (b) o << "; ";
    for (std::size_t k = 0; k < blocks[b].size(); ++k) o << (k ? "+" : "") << blocks[b][k];
  }
  o << '\n' << "max_threads = " << max_threads << '\n'
    << "shift_moves = " << (shift_moves ? "true" : "false") << '\n';
  return o.str();
}

SamplerConfig SamplerConfig::parse(std::string_view text) {
  SamplerConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("sampler config: expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "n_chains") c.n_chains = parse_int<int>(v, key);
    else if (key == "n_iterations") c.n_iterations = parse_int<int>(v, key);
    else if (key == "burn_in") c.burn_in = parse_int<int>(v, key);
    else if (key == "thin") c.thin = parse_int<int>(v, key);
    else if (key == "seed") c.seed = parse_int<std::uint64_t>(v, key);
    else if (key == "target_scalar") c.target_scalar = parse_double(v, key);
    else if (key == "target_block") c.target_block = parse_double(v, key);
    else if (key == "adapt_window") c.adapt_window = parse_int<int>(v, key);
    else if (key == "max_threads") c.max_threads = parse_int<int>(v, key);
    else if (key == "shift_moves") {
      if (v != "true" && v != "false") throw std::invalid_argument("shift_moves: expected true or false");
      c.shift_moves = v == "true";
    }
    else if (key == "blocks") {
      c.blocks.clear();
      std::istringstream groups(v);
      std::string group;
      while (std::getline(groups, group, ';')) {
        if (trim(group).empty()) continue;
        std::vector<std::string> names;
        std::istringstream members(group);
        std::string name;
        while (std::getline(members, name, '+')) names.push_back(trim(name));
        c.blocks.push_back(std::move(names));
      }
    } else {
      throw std::invalid_argument("unknown sampler config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

SamplerConfig SamplerConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open sampler config '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str());
}

int worker_count(int requested, int jobs) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("GEARCALIB_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1) n = std::min(n, cap);
    } catch (const std::exception&) {
    }
  }
  return std::max(1, std::min(n, std::max(jobs, 1)));
}

// ---------------------------------------------------------------------------
// PosteriorDraws

PosteriorDraws::PosteriorDraws(std::vector<std::string> names, int n_chains)
    : names_(std::move(names)), n_chains_(n_chains) {
  for (std::size_t k = 0; k < names_.size(); ++k)
    if (!lookup_.emplace(names_[k], k).second)
      throw std::invalid_argument("duplicate draw column '" + names_[k] + "'");
}

bool PosteriorDraws::has(std::string_view name) const { return lookup_.find(name) != lookup_.end(); }

std::size_t PosteriorDraws::index(std::string_view name) const {
  const auto it = lookup_.find(name);
  if (it == lookup_.end()) throw std::out_of_range("no draw column '" + std::string(name) + "'");
  return it->second;
}

void PosteriorDraws::add_row(int chain, std::span<const double> values) {
  if (values.size() != names_.size()) throw std::invalid_argument("draw row has wrong width");
  if (chain < 0 || chain >= n_chains_) throw std::out_of_range("chain id out of range");
  data_.insert(data_.end(), values.begin(), values.end());
  chain_.push_back(chain);
}

void PosteriorDraws::append(const PosteriorDraws& other) {
  if (other.names_ != names_) throw std::invalid_argument("appending draws with other columns");
  data_.insert(data_.end(), other.data_.begin(), other.data_.end());
  chain_.insert(chain_.end(), other.chain_.begin(), other.chain_.end());
  for (const auto& [k, v] : other.acceptance_) {
    auto& dst = acceptance_[k];
    dst.resize(std::max<std::size_t>(dst.size(), v.size()), kNaN);
    for (std::size_t c = 0; c < v.size(); ++c)
      if (!std::isnan(v[c])) dst[c] = v[c];
  }
}

std::vector<double> PosteriorDraws::column(std::size_t param) const {
  std::vector<double> out(n_draws());
  for (std::size_t m = 0; m < out.size(); ++m) out[m] = value(m, param);
  return out;
}

std::vector<double> PosteriorDraws::column(std::string_view name) const { return column(index(name)); }

std::vector<std::vector<double>> PosteriorDraws::by_chain(std::string_view name) const {
  const std::size_t p = index(name);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n_chains_));
  for (std::size_t m = 0; m < n_draws(); ++m) out[chain_[m]].push_back(value(m, p));
  return out;
}

void PosteriorDraws::write_csv(std::ostream& out) const {
  out << "chain";
  for (const auto& n : names_) out << ',' << n;
  out << '\n';
  char buf[64];
  for (std::size_t m = 0; m < n_draws(); ++m) {
    out << chain_[m];
    for (std::size_t p = 0; p < names_.size(); ++p) {
      const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value(m, p));
      out << ',' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
    }
    out << '\n';
  }
}

PosteriorDraws PosteriorDraws::read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty draws file");
  std::vector<std::string> header;
  {
    std::istringstream h(line);
    std::string f;
    while (std::getline(h, f, ',')) header.push_back(trim(f));
  }
  if (header.empty() || header[0] != "chain") throw std::runtime_error("draws file lacks chain column");
  std::vector<std::string> names(header.begin() + 1, header.end());
  std::vector<std::pair<int, std::vector<double>>> rows;
  int max_chain = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<double> vals;
    vals.reserve(names.size());
    int chain = 0;
    std::size_t pos = 0, field = 0;
    while (pos <= line.size()) {
      auto next = line.find(',', pos);
      if (next == std::string::npos) next = line.size();
      const std::string f = trim(std::string_view(line).substr(pos, next - pos));
      if (field == 0) chain = parse_int<int>(f, "chain");
      else vals.push_back(parse_double(f, "draw value"));
      ++field;
      pos = next + 1;
    }
    if (vals.size() != names.size())
      throw std::runtime_error("draws line " + std::to_string(line_no) + " has wrong width");
    max_chain = std::max(max_chain, chain);
    rows.emplace_back(chain, std::move(vals));
  }
  PosteriorDraws d(std::move(names), max_chain + 1);
  for (const auto& [c, v] : rows) d.add_row(c, v);
  return d;
}

void PosteriorDraws::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  write_csv(out);
}

PosteriorDraws PosteriorDraws::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open draws file '" + path.string() + "'");
  return read_csv(in);
}

// ---------------------------------------------------------------------------
// Sampler

namespace {

struct Unit {
  std::string name;
  std::vector<std::size_t> coords;
  std::vector<std::size_t> blanket;
  double log_scale = std::log(0.2);
  int accepted_window = 0;
  long accepted_after = 0, proposed_after = 0;
  int times_adapted = 0;
  // Block proposals
  Eigen::MatrixXd cov, chol;
  Eigen::VectorXd win_sum;
  Eigen::MatrixXd win_outer;
  int win_count = 0;
};

std::vector<Unit> make_units(const LogDensity& target, const SamplerConfig& cfg) {
  const auto names = target.coordinate_names();
  std::map<std::string, std::size_t> lookup;
  for (std::size_t c = 0; c < names.size(); ++c) lookup.emplace(names[c], c);

  std::vector<std::vector<std::size_t>> blocks;
  for (const auto& spec : cfg.blocks) {
    if (spec.size() == 1 && spec[0] == "trip_latent") {
      // Group log_phi_<suffix> with log_mu_<camera>_<suffix>.
      std::map<std::string, std::vector<std::size_t>> by_trip;
      for (std::size_t c = 0; c < names.size(); ++c) {
        const auto& nm = names[c];
        if (nm.rfind("log_phi_", 0) == 0) by_trip[nm.substr(8)].insert(by_trip[nm.substr(8)].begin(), c);
        else if (nm.rfind("log_mu_", 0) == 0 && nm.size() > 9) by_trip[nm.substr(9)].push_back(c);
      }
      for (auto& [suffix, coords] : by_trip) blocks.push_back(coords);
      continue;
    }
    std::vector<std::size_t> coords;
    for (const auto& nm : spec) {
      const auto it = lookup.find(nm);
      if (it == lookup.end()) throw std::invalid_argument("block names unknown coordinate '" + nm + "'");
      coords.push_back(it->second);
    }
    blocks.push_back(std::move(coords));
  }

  std::vector<int> owner(names.size(), -1);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (std::size_t c : blocks[b]) {
      if (owner[c] != -1) throw std::invalid_argument("coordinate '" + names[c] + "' in two blocks");
      owner[c] = static_cast<int>(b);
    }
  if (cfg.shift_moves) {
    for (const auto& spec : target.default_blocks()) {
      std::vector<std::size_t> coords;
      for (const auto& nm : spec)
        if (const auto it = lookup.find(nm); it != lookup.end() && owner[it->second] == -1) coords.push_back(it->second);
      if (coords.size() != spec.size()) continue;
      for (std::size_t c : coords) owner[c] = static_cast<int>(blocks.size());
      blocks.push_back(std::move(coords));
    }
  }

  std::vector<Unit> units;
  std::vector<bool> placed(blocks.size(), false);
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (owner[c] < 0) {
      Unit u;
      u.name = names[c];
      u.coords = {c};
      const auto b = target.blanket(c);
      u.blanket.assign(b.begin(), b.end());
      units.push_back(std::move(u));
      continue;
    }
    const auto b = static_cast<std::size_t>(owner[c]);
    if (placed[b]) continue;
    placed[b] = true;
    Unit u;
    u.coords = blocks[b];
    u.name = "block";
    for (std::size_t k = 0; k < u.coords.size(); ++k) u.name += (k ? "+" : ":") + names[u.coords[k]];
    for (std::size_t cc : u.coords) {
      const auto bl = target.blanket(cc);
      u.blanket.insert(u.blanket.end(), bl.begin(), bl.end());
    }
    std::sort(u.blanket.begin(), u.blanket.end());
    u.blanket.erase(std::unique(u.blanket.begin(), u.blanket.end()), u.blanket.end());
    const auto d = static_cast<Eigen::Index>(u.coords.size());
    u.cov = Eigen::MatrixXd::Identity(d, d) * 0.01;
    u.chol = Eigen::MatrixXd::Identity(d, d) * 0.1;
    u.log_scale = 0.0;
    u.win_sum = Eigen::VectorXd::Zero(d);
    u.win_outer = Eigen::MatrixXd::Zero(d, d);
    units.push_back(std::move(u));
  }
  return units;
}

double covariate_factor(const LogDensity::ShiftMove& m, std::size_t k, std::span<const double> u, double centre) {
  if (!m.covariate_terms.empty()) {
    double f = 0.0;
    for (const auto& [c, a] : m.covariate_terms[k]) f += a * (u[c] - centre);
    return f;
  }
  return m.covariates.empty() ? 1.0 : u[m.covariates[k]] - centre;
}

struct ShiftUnit {
  LogDensity::ShiftMove move;
  std::optional<LogDensity::ScaleMove> scale;
  std::vector<std::size_t> blanket;
  std::vector<double> saved;
  double log_scale = std::log(0.2);
  int accepted_window = 0;
  long accepted_after = 0, proposed_after = 0;
  int times_adapted = 0;
};

std::vector<ShiftUnit> make_shift_units(const LogDensity& target, const SamplerConfig& cfg) {
  std::vector<ShiftUnit> units;
  if (!cfg.shift_moves) return units;
  for (auto& m : target.shift_moves()) {
    if (m.weights.size() != m.followers.size() || (!m.covariates.empty() && m.covariates.size() != m.followers.size()) ||
        (!m.covariate_terms.empty() && m.covariate_terms.size() != m.followers.size()))
      throw std::logic_error("shift move '" + m.name + "' has inconsistent lengths");
    std::vector<std::size_t> read = m.covariates;
    for (const auto& terms : m.covariate_terms)
      for (const auto& t : terms) read.push_back(t.first);
    std::sort(read.begin(), read.end());
    for (std::size_t f : m.followers) {
      if (f == m.driver || (m.pool_size && f >= m.pool_begin && f < m.pool_begin + m.pool_size) ||
          std::binary_search(read.begin(), read.end(), f))
        throw std::logic_error("shift move '" + m.name + "' moves its own driver or covariates");
    }
    ShiftUnit u;
    const auto add = [&](std::size_t c) {
      const auto b = target.blanket(c);
      u.blanket.insert(u.blanket.end(), b.begin(), b.end());
    };
    add(m.driver);
    for (std::size_t f : m.followers) add(f);
    std::sort(u.blanket.begin(), u.blanket.end());
    u.blanket.erase(std::unique(u.blanket.begin(), u.blanket.end()), u.blanket.end());
    u.saved.resize(m.followers.size());
    u.move = std::move(m);
    units.push_back(std::move(u));
  }
  for (auto& m : target.scale_moves()) {
    if (m.offsets.size() != m.followers.size() || m.centre.size() != m.followers.size())
      throw std::logic_error("scale move '" + m.name + "' has inconsistent lengths");
    std::vector<std::size_t> fs = m.followers;
    std::sort(fs.begin(), fs.end());
    for (const auto& terms : m.centre)
      for (const auto& [c, w] : terms)
        if (c == m.driver || std::binary_search(fs.begin(), fs.end(), c))
          throw std::logic_error("scale move '" + m.name + "' centres on a moved coordinate");
    ShiftUnit u;
    const auto add = [&](std::size_t c) {
      const auto b = target.blanket(c);
      u.blanket.insert(u.blanket.end(), b.begin(), b.end());
    };
    add(m.driver);
    for (std::size_t f : m.followers) add(f);
    std::sort(u.blanket.begin(), u.blanket.end());
    u.blanket.erase(std::unique(u.blanket.begin(), u.blanket.end()), u.blanket.end());
    u.saved.resize(m.followers.size());
    u.move.name = m.name;
    u.scale = std::move(m);
    units.push_back(std::move(u));
  }
  return units;
}

// Several ShiftMoves proposed together from an adapted driver covariance.
struct ShiftGroupUnit {
  std::string name;
  std::vector<LogDensity::ShiftMove> members;
  std::vector<std::size_t> followers;  // union
  std::vector<std::vector<std::size_t>> slot;  // member follower k -> index in followers
  std::vector<double> saved, delta, old_drivers;
  std::vector<std::size_t> blanket;
  double log_scale = 0.0;
  int accepted_window = 0;
  long accepted_after = 0, proposed_after = 0;
  int times_adapted = 0;
  Eigen::MatrixXd cov, chol;
  Eigen::VectorXd win_sum;
  Eigen::MatrixXd win_outer;
  int win_count = 0;
};

std::vector<ShiftGroupUnit> make_shift_groups(const LogDensity& target, const SamplerConfig& cfg) {
  std::vector<ShiftGroupUnit> units;
  if (!cfg.shift_moves) return units;
  const auto all = target.shift_moves();
  for (const auto& spec : target.shift_groups()) {
    ShiftGroupUnit g;
    for (const auto& nm : spec) {
      const auto it = std::find_if(all.begin(), all.end(), [&](const auto& m) { return m.name == nm; });
      if (it != all.end()) g.members.push_back(*it);
    }
    if (g.members.size() < 2) continue;
    g.name = "group";
    std::map<std::size_t, std::size_t> where;
    std::vector<std::size_t> fixed;  // drivers, covariates and pools: must not be followers
    for (const auto& m : g.members) {
      g.name += (g.name.size() > 5 ? "+" : ":") + m.name;
      fixed.push_back(m.driver);
      fixed.insert(fixed.end(), m.covariates.begin(), m.covariates.end());
      for (const auto& terms : m.covariate_terms)
        for (const auto& t : terms) fixed.push_back(t.first);
      for (std::size_t k = 0; k < m.pool_size; ++k) fixed.push_back(m.pool_begin + k);
      std::vector<std::size_t> slots;
      for (std::size_t f : m.followers) {
        auto [it, fresh] = where.emplace(f, g.followers.size());
        if (fresh) g.followers.push_back(f);
        slots.push_back(it->second);
      }
      g.slot.push_back(std::move(slots));
    }
    for (std::size_t c : fixed)
      if (where.count(c)) throw std::logic_error("shift group '" + g.name + "' moves a coordinate it reads");
    const auto add = [&](std::size_t c) {
      const auto b = target.blanket(c);
      g.blanket.insert(g.blanket.end(), b.begin(), b.end());
    };
    for (const auto& m : g.members) add(m.driver);
    for (std::size_t f : g.followers) add(f);
    std::sort(g.blanket.begin(), g.blanket.end());
    g.blanket.erase(std::unique(g.blanket.begin(), g.blanket.end()), g.blanket.end());
    const auto d = static_cast<Eigen::Index>(g.members.size());
    g.saved.resize(g.followers.size());
    g.delta.resize(g.followers.size());
    g.old_drivers.resize(g.members.size());
    g.cov = Eigen::MatrixXd::Identity(d, d) * 0.01;
    g.chol = Eigen::MatrixXd::Identity(d, d) * 0.1;
    g.win_sum = Eigen::VectorXd::Zero(d);
    g.win_outer = Eigen::MatrixXd::Zero(d, d);
    units.push_back(std::move(g));
  }
  return units;
}

struct ChainResult {
  std::vector<double> rows;
  std::map<std::string, double> acceptance;
};

ChainResult run_chain(const LogDensity& target, const SamplerConfig& cfg, int chain) {
  const std::uint64_t chain_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(chain) + 1);
  auto ws = target.make_workspace();
  std::vector<double> terms;
  std::vector<double> u;
  std::size_t bad = 0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    u = target.initial_point(chain_seed, attempt);
    bad = first_bad_term(target, u, terms, ws.get());
    if (bad == static_cast<std::size_t>(-1)) break;
  }
  if (bad != static_cast<std::size_t>(-1))
    throw InitializationError("chain " + std::to_string(chain) +
                              ": non-finite log density at initialization; node " +
                              target.term_name(bad));

  std::vector<Unit> units = make_units(target, cfg);
  std::vector<ShiftUnit> shifts = make_shift_units(target, cfg);
  std::vector<ShiftGroupUnit> groups = make_shift_groups(target, cfg);
  Rng rng(chain_seed, 1);
  std::vector<double> fresh(target.term_count());
  std::vector<double> saved;
  const std::size_t n_out = target.output_names().size();
  ChainResult result;
  result.rows.reserve(static_cast<std::size_t>(cfg.draws_per_chain()) * n_out);
  std::vector<double> out_row(n_out);

  const auto try_accept = [&](const std::vector<std::size_t>& blanket, double log_jacobian = 0.0) {
    std::span<double> nb(fresh.data(), blanket.size());
    target.eval_terms(u, blanket, nb, ws.get());
    double delta = log_jacobian;
    for (std::size_t k = 0; k < blanket.size(); ++k) delta += nb[k] - terms[blanket[k]];
    const double draw = rng.uniform();
    if (!std::isnan(delta) && (delta >= 0.0 || std::log(draw) < delta)) {
      for (std::size_t k = 0; k < blanket.size(); ++k) terms[blanket[k]] = nb[k];
      return true;
    }
    return false;
  };

  // One proposal in ten is eight times wider; the mixture is still symmetric
  // and lets log-scale coordinates cross flat prior-dominated tails.
  const auto jump = [&] {
    const double z = rng.normal();
    return rng.uniform() < 0.1 ? 8.0 * z : z;
  };

  const auto scale_step = [&](ShiftUnit& su) {
    const auto& m = *su.scale;
    const double v = u[m.driver];
    const double e = std::exp(su.log_scale) * rng.normal();
    const double factor = std::exp(e);
    for (std::size_t k = 0; k < m.followers.size(); ++k) {
      double c = m.offsets[k];
      for (const auto& [idx, w] : m.centre[k]) c += w * u[idx];
      const std::size_t f = m.followers[k];
      su.saved[k] = u[f];
      u[f] = c + factor * (u[f] - c);
    }
    u[m.driver] = v + e;
    if (try_accept(su.blanket, e * static_cast<double>(m.followers.size()))) return true;
    u[m.driver] = v;
    for (std::size_t k = 0; k < m.followers.size(); ++k) u[m.followers[k]] = su.saved[k];
    return false;
  };

  const auto shift_step = [&](ShiftUnit& su) {
    if (su.scale) return scale_step(su);
    const auto& m = su.move;
    const double x = u[m.driver];
    const double x_new = x + std::exp(su.log_scale) * jump();
    const double g = m.exponential ? std::exp(x_new) - std::exp(x) : x_new - x;
    double centre = 0.0;
    if (m.pool_size) {
      for (std::size_t k = 0; k < m.pool_size; ++k) centre += u[m.pool_begin + k];
      centre /= static_cast<double>(m.pool_size);
    }
    for (std::size_t k = 0; k < m.followers.size(); ++k) {
      const std::size_t f = m.followers[k];
      su.saved[k] = u[f];
      u[f] += m.weights[k] * g * covariate_factor(m, k, u, centre);
    }
    u[m.driver] = x_new;
    if (try_accept(su.blanket)) return true;
    u[m.driver] = x;
    for (std::size_t k = 0; k < m.followers.size(); ++k) u[m.followers[k]] = su.saved[k];
    return false;
  };

  const auto group_step = [&](ShiftGroupUnit& g) {
    const auto d = static_cast<Eigen::Index>(g.members.size());
    Eigen::VectorXd z(d);
    for (Eigen::Index k = 0; k < d; ++k) z[k] = rng.normal();
    const Eigen::VectorXd step = std::exp(g.log_scale) * (g.chol * z);
    std::fill(g.delta.begin(), g.delta.end(), 0.0);
    for (Eigen::Index k = 0; k < d; ++k) {
      const auto& m = g.members[k];
      const double x = u[m.driver];
      const double x_new = x + step[k];
      const double dg = m.exponential ? std::exp(x_new) - std::exp(x) : x_new - x;
      double centre = 0.0;
      if (m.pool_size) {
        for (std::size_t j = 0; j < m.pool_size; ++j) centre += u[m.pool_begin + j];
        centre /= static_cast<double>(m.pool_size);
      }
      for (std::size_t j = 0; j < m.followers.size(); ++j) {
        g.delta[g.slot[k][j]] += m.weights[j] * dg * covariate_factor(m, j, u, centre);
      }
    }
    for (Eigen::Index k = 0; k < d; ++k) {
      g.old_drivers[k] = u[g.members[k].driver];
      u[g.members[k].driver] += step[k];
    }
    for (std::size_t j = 0; j < g.followers.size(); ++j) {
      g.saved[j] = u[g.followers[j]];
      u[g.followers[j]] += g.delta[j];
    }
    if (try_accept(g.blanket)) return true;
    for (Eigen::Index k = 0; k < d; ++k) u[g.members[k].driver] = g.old_drivers[k];
    for (std::size_t j = 0; j < g.followers.size(); ++j) u[g.followers[j]] = g.saved[j];
    return false;
  };

  int stored = 0;
  for (int it = 0; it < cfg.n_iterations; ++it) {
    const bool burning = it < cfg.burn_in;
    for (Unit& unit : units) {
      bool accepted;
      if (unit.coords.size() == 1) {
        const std::size_t c = unit.coords[0];
        const double old = u[c];
        u[c] = old + std::exp(unit.log_scale) * jump();
        accepted = try_accept(unit.blanket);
        if (!accepted) u[c] = old;
      } else {
        const auto d = static_cast<Eigen::Index>(unit.coords.size());
        Eigen::VectorXd z(d);
        for (Eigen::Index k = 0; k < d; ++k) z[k] = rng.normal();
        const Eigen::VectorXd step = std::exp(unit.log_scale) * (unit.chol * z);
        saved.resize(unit.coords.size());
        for (Eigen::Index k = 0; k < d; ++k) {
          saved[k] = u[unit.coords[k]];
          u[unit.coords[k]] += step[k];
        }
        accepted = try_accept(unit.blanket);
        if (!accepted)
          for (Eigen::Index k = 0; k < d; ++k) u[unit.coords[k]] = saved[k];
        if (burning) {
          Eigen::VectorXd x(d);
          for (Eigen::Index k = 0; k < d; ++k) x[k] = u[unit.coords[k]];
          unit.win_sum += x;
          unit.win_outer += x * x.transpose();
          ++unit.win_count;
        }
      }
      if (burning) {
        unit.accepted_window += accepted;
      } else {
        unit.accepted_after += accepted;
        ++unit.proposed_after;
      }
    }

    for (ShiftUnit& su : shifts) {
      const bool accepted = shift_step(su);
      if (burning) {
        su.accepted_window += accepted;
      } else {
        su.accepted_after += accepted;
        ++su.proposed_after;
      }
    }

    for (ShiftGroupUnit& g : groups) {
      const bool accepted = group_step(g);
      if (burning) {
        g.accepted_window += accepted;
        const auto d = static_cast<Eigen::Index>(g.members.size());
        Eigen::VectorXd x(d);
        for (Eigen::Index k = 0; k < d; ++k) x[k] = u[g.members[k].driver];
        g.win_sum += x;
        g.win_outer += x * x.transpose();
        ++g.win_count;
      } else {
        g.accepted_after += accepted;
        ++g.proposed_after;
      }
    }

    if (burning && (it + 1) % cfg.adapt_window == 0) {
      for (ShiftGroupUnit& g : groups) {
        const double rate = static_cast<double>(g.accepted_window) / cfg.adapt_window;
        const double gamma = 1.0 / std::pow(g.times_adapted + 3.0, 0.8);
        const double m = g.win_count;
        const Eigen::VectorXd mean = g.win_sum / m;
        const Eigen::MatrixXd emp = (g.win_outer - m * mean * mean.transpose()) / (m - 1.0);
        g.cov += gamma * (emp - g.cov);
        const auto d = g.cov.rows();
        Eigen::LLT<Eigen::MatrixXd> llt(g.cov + 1e-10 * Eigen::MatrixXd::Identity(d, d));
        if (llt.info() == Eigen::Success) g.chol = llt.matrixL();
        g.win_sum.setZero();
        g.win_outer.setZero();
        g.win_count = 0;
        g.log_scale = std::clamp(g.log_scale + 10.0 * gamma * (rate - cfg.target_block), -30.0, 10.0);
        g.accepted_window = 0;
        ++g.times_adapted;
      }
      for (ShiftUnit& su : shifts) {
        const double rate = static_cast<double>(su.accepted_window) / cfg.adapt_window;
        const double gamma = 1.0 / std::pow(su.times_adapted + 3.0, 0.8);
        su.log_scale = std::clamp(su.log_scale + 10.0 * gamma * (rate - cfg.target_scalar), -30.0, 10.0);
        su.accepted_window = 0;
        ++su.times_adapted;
      }
      for (Unit& unit : units) {
        const double rate = static_cast<double>(unit.accepted_window) / cfg.adapt_window;
        const double gamma = 1.0 / std::pow(unit.times_adapted + 3.0, 0.8);
        const bool block = unit.coords.size() > 1;
        const double target_rate = block ? cfg.target_block : cfg.target_scalar;
        if (block && unit.win_count > 1) {
          const double m = unit.win_count;
          const Eigen::VectorXd mean = unit.win_sum / m;
          const Eigen::MatrixXd emp = (unit.win_outer - m * mean * mean.transpose()) / (m - 1.0);
          unit.cov += gamma * (emp - unit.cov);
          const auto d = unit.cov.rows();
          Eigen::LLT<Eigen::MatrixXd> llt(unit.cov + 1e-10 * Eigen::MatrixXd::Identity(d, d));
          if (llt.info() == Eigen::Success) unit.chol = llt.matrixL();
          unit.win_sum.setZero();
          unit.win_outer.setZero();
          unit.win_count = 0;
        }
        unit.log_scale += 10.0 * gamma * (rate - target_rate);
        unit.log_scale = std::clamp(unit.log_scale, -30.0, 10.0);
        unit.accepted_window = 0;
        ++unit.times_adapted;
      }
    }

    if (!burning && (it - cfg.burn_in + 1) % cfg.thin == 0 && stored < cfg.draws_per_chain()) {
      target.outputs(u, out_row);
      result.rows.insert(result.rows.end(), out_row.begin(), out_row.end());
      ++stored;
    }
  }
  for (const Unit& unit : units)
    result.acceptance[unit.name] =
        unit.proposed_after ? static_cast<double>(unit.accepted_after) / unit.proposed_after : kNaN;
  for (const ShiftGroupUnit& g : groups)
    result.acceptance[g.name] = g.proposed_after ? static_cast<double>(g.accepted_after) / g.proposed_after : kNaN;
  for (const ShiftUnit& su : shifts)
    result.acceptance[(su.scale ? "scale:" : "shift:") + su.move.name] =
        su.proposed_after ? static_cast<double>(su.accepted_after) / su.proposed_after : kNaN;
  return result;
}

}  // namespace

PosteriorDraws run_mcmc(const LogDensity& target, const SamplerConfig& config) {
  config.validate();
  const int chains = config.n_chains;
  std::vector<ChainResult> results(static_cast<std::size_t>(chains));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(chains));
  std::atomic<int> next{0};
  const auto worker = [&] {
    for (int c = next++; c < chains; c = next++) {
      try {
        results[c] = run_chain(target, config, c);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const int workers = worker_count(config.max_threads, chains);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  PosteriorDraws draws(target.output_names(), chains);
  const std::size_t width = draws.n_params();
  for (int c = 0; c < chains; ++c) {
    const auto& rows = results[c].rows;
    for (std::size_t off = 0; off < rows.size(); off += width)
      draws.add_row(c, std::span(rows).subspan(off, width));
    for (const auto& [name, rate] : results[c].acceptance) {
      auto& v = draws.acceptance()[name];
      v.resize(static_cast<std::size_t>(chains), kNaN);
      v[c] = rate;
    }
  }
  return draws;
}

PosteriorDraws run_mcmc(const ModelGraph& graph, const SamplerConfig& config) {
  GraphTarget target(graph);
  return run_mcmc(target, config);
}

// ---------------------------------------------------------------------------
// Diagnostics

namespace {

std::vector<std::vector<double>> equal_chains(const PosteriorDraws& draws, std::string_view param) {
  auto chains = draws.by_chain(param);
  chains.erase(std::remove_if(chains.begin(), chains.end(), [](const auto& c) { return c.empty(); }),
               chains.end());
  std::size_t n = std::numeric_limits<std::size_t>::max();
  for (const auto& c : chains) n = std::min(n, c.size());
  for (auto& c : chains) c.resize(n);
  return chains;
}

double autocov(const std::vector<double>& x, double mean, std::size_t lag) {
  const std::size_t n = x.size();
  double s = 0.0;
  for (std::size_t i = 0; i + lag < n; ++i) s += (x[i] - mean) * (x[i + lag] - mean);
  return s / static_cast<double>(n);
}

EssResult ess_of_chains(const std::vector<std::vector<double>>& chains) {
  const std::size_t m = chains.size();
  const std::size_t n = chains.at(0).size();
  const double total = static_cast<double>(m * n);
  std::vector<double> means(m), vars(m);
  for (std::size_t c = 0; c < m; ++c) {
    means[c] = mean(chains[c]);
    vars[c] = variance(chains[c]);
  }
  const double w = mean(vars);
  double var_plus = w * (static_cast<double>(n) - 1.0) / static_cast<double>(n);
  if (m > 1) var_plus += variance(means);
  if (!(var_plus > 0.0)) return {total, true};

  const auto rho = [&](std::size_t t) {
    double acov = 0.0;
    for (std::size_t c = 0; c < m; ++c) acov += autocov(chains[c], means[c], t);
    acov /= static_cast<double>(m);
    return 1.0 - (w - acov) / var_plus;
  };
  // Geyer: sum consecutive pairs while positive, enforcing monotone pairs.
  double sum_pairs = 0.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t + 1 < n; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (pair < 0.0) break;
    pair = std::min(pair, prev_pair);
    sum_pairs += pair;
    prev_pair = pair;
  }
  const double tau = std::max(-1.0 + 2.0 * sum_pairs, 1.0 / std::log10(total));
  return {total / tau, false};
}

}  // namespace

double rhat(const PosteriorDraws& draws, std::string_view param) {
  auto chains = equal_chains(draws, param);
  if (chains.size() < 2) throw std::invalid_argument("rhat needs at least two chains");
  const std::size_t half = chains[0].size() / 2;
  if (half < 2) throw std::invalid_argument("rhat needs at least four draws per chain");
  std::vector<std::vector<double>> split;
  for (const auto& c : chains) {
    split.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    split.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  }
  std::vector<double> means, vars;
  for (const auto& s : split) {
    means.push_back(mean(s));
    vars.push_back(variance(s));
  }
  const double n = static_cast<double>(half);
  const double w = mean(vars);
  const double b_over_n = variance(means);
  if (w == 0.0) return b_over_n == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  const double var_plus = (n - 1.0) / n * w + b_over_n;
  return std::sqrt(var_plus / w);
}

EssResult ess(const PosteriorDraws& draws, std::string_view param) {
  if (draws.n_draws() < 100) throw std::invalid_argument("ess needs at least 100 draws");
  return ess_of_chains(equal_chains(draws, param));
}

double mcse_mean(const PosteriorDraws& draws, std::string_view param) {
  const auto e = ess(draws, param);
  if (e.constant) return 0.0;
  return std::sqrt(variance(draws.column(param)) / e.value);
}

double mcse_quantile(const PosteriorDraws& draws, std::string_view param, double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  const auto x = draws.column(param);
  const double q = quantile(x, p);
  auto chains = equal_chains(draws, param);
  for (auto& c : chains)
    for (double& v : c) v = v <= q ? 1.0 : 0.0;
  const EssResult e = ess_of_chains(chains);
  if (e.constant) return 0.0;
  const double s = e.value;
  boost::math::beta_distribution<double> beta(s * p + 1.0, s * (1.0 - p) + 1.0);
  const double lo = boost::math::quantile(beta, 0.15865525393145705);
  const double hi = boost::math::quantile(beta, 0.8413447460685429);
  return (quantile(x, std::clamp(hi, 0.0, 1.0)) - quantile(x, std::clamp(lo, 0.0, 1.0))) / 2.0;
}

double prior_posterior_shift(const PosteriorDraws& draws, std::string_view param,
                             std::string_view prior_spec) {
  const PriorSpec prior = PriorSpec::parse(prior_spec);
  std::vector<double> x = draws.column(param);
  for (double& v : x) v = to_sampling_scale(prior.transform, v);
  const double sd = std::sqrt(variance(x));
  const double iqr = quantile(x, 0.75) - quantile(x, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd > 0.0 ? sd : 1e-6 * std::max(1.0, std::abs(mean(x)));
  const double h = 0.9 * spread * std::pow(static_cast<double>(x.size()), -0.2);

  std::sort(x.begin(), x.end());
  const double lo = std::min(x.front() - 5.0 * h, prior.mean - 8.0 * prior.sd);
  const double hi = std::max(x.back() + 5.0 * h, prior.mean + 8.0 * prior.sd);
  // The posterior may be far narrower than the prior: put grid points where
  // the KDE has mass as well as across the prior range.
  std::vector<double> grid;
  constexpr int kCoarse = 4000, kFine = 2000;
  for (int g = 0; g <= kCoarse; ++g) grid.push_back(lo + (hi - lo) * g / kCoarse);
  const double flo = x.front() - 5.0 * h, fhi = x.back() + 5.0 * h;
  for (int g = 0; g <= kFine; ++g) grid.push_back(flo + (fhi - flo) * g / kFine);
  std::sort(grid.begin(), grid.end());

  const double norm = 1.0 / (static_cast<double>(x.size()) * h * std::sqrt(2.0 * M_PI));
  const auto kde = [&](double at) {
    const auto first = std::lower_bound(x.begin(), x.end(), at - 8.0 * h);
    const auto last = std::upper_bound(x.begin(), x.end(), at + 8.0 * h);
    double s = 0.0;
    for (auto it = first; it != last; ++it) {
      const double z = (at - *it) / h;
      s += std::exp(-0.5 * z * z);
    }
    return s * norm;
  };
  const auto prior_pdf = [&](double at) {
    const double z = (at - prior.mean) / prior.sd;
    return std::exp(-0.5 * z * z) / (prior.sd * std::sqrt(2.0 * M_PI));
  };
  double overlap = 0.0;
  double prev_x = grid[0], prev_f = std::min(kde(grid[0]), prior_pdf(grid[0]));
  for (std::size_t g = 1; g < grid.size(); ++g) {
    const double f = std::min(kde(grid[g]), prior_pdf(grid[g]));
    overlap += 0.5 * (f + prev_f) * (grid[g] - prev_x);
    prev_x = grid[g];
    prev_f = f;
  }
  return std::clamp(1.0 - overlap, 0.0, 1.0);
}

std::vector<ImputedCell> impute_missing_y(const ModelGraph& graph, const PosteriorDraws& draws,
                                          std::uint64_t seed) {
  std::vector<ImputedCell> cells;
  std::uint64_t stream = 0;
  for (const auto& t : graph.trips()) {
    for (Camera c : kCameras) {
      if (t.observed(c)) continue;
      ImputedCell cell;
      cell.trip_id = t.trip_id;
      cell.boat = t.boat;
      cell.reef_size = t.reef_size;
      cell.replicate = t.replicate;
      cell.camera = c;
      const std::size_t col = draws.index(ModelGraph::log_mu_name(t, c));
      Rng rng(seed, stream++);
      std::vector<double> as_double;
      cell.counts.reserve(draws.n_draws());
      for (std::size_t m = 0; m < draws.n_draws(); ++m) {
        const double log_mu = draws.value(m, col);
        const std::int64_t k = log_mu < -700.0 ? 0 : rng.poisson(std::exp(log_mu));
        cell.counts.push_back(k);
        as_double.push_back(static_cast<double>(k));
      }
      if (!as_double.empty()) {
        cell.median = median(as_double);
        cell.interval80 = central_interval(as_double, 0.80);
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

DiagnosticsReport diagnose(const ModelGraph& graph, const PosteriorDraws& draws, double rhat_gate,
                           double ess_gate) {
  DiagnosticsReport rep;
  rep.rhat_gate = rhat_gate;
  rep.ess_gate = ess_gate;
  rep.converged = true;
  for (const auto& p : graph.population()) {
    ParamDiagnostics d;
    d.name = p.aliases.front();
    const auto x = draws.column(d.name);
    d.mean = mean(x);
    d.sd = std::sqrt(variance(x));
    d.q05 = quantile(x, 0.05);
    d.median = median(x);
    d.q95 = quantile(x, 0.95);
    d.rhat = draws.n_chains() >= 2 ? rhat(draws, d.name) : kNaN;
    d.ess = ess(draws, d.name);
    d.shift = prior_posterior_shift(draws, d.name, p.prior.to_string());
    if (!(d.rhat < rhat_gate)) {
      rep.converged = false;
      rep.failures.push_back(d.name + ": rhat " + format_double(d.rhat));
    }
    if (!d.ess.constant && !(d.ess.value > ess_gate)) {
      rep.converged = false;
      rep.failures.push_back(d.name + ": ess " + format_double(d.ess.value));
    }
    rep.params.push_back(std::move(d));
  }
  rep.min_acceptance = 1.0;
  rep.max_acceptance = 0.0;
  for (const auto& [name, rates] : draws.acceptance())
    for (double r : rates) {
      if (std::isnan(r)) continue;
      rep.min_acceptance = std::min(rep.min_acceptance, r);
      rep.max_acceptance = std::max(rep.max_acceptance, r);
    }
  return rep;
}

std::string DiagnosticsReport::to_json() const {
  nlohmann::ordered_json j;
  j["converged"] = converged;
  j["rhat_gate"] = rhat_gate;
  j["ess_gate"] = ess_gate;
  j["acceptance"] = {{"min", min_acceptance}, {"max", max_acceptance}};
  j["failures"] = failures;
  auto& arr = j["parameters"] = nlohmann::ordered_json::array();
  for (const auto& p : params) {
    arr.push_back({{"name", p.name},
                   {"mean", p.mean},
                   {"sd", p.sd},
                   {"q05", p.q05},
                   {"median", p.median},
                   {"q95", p.q95},
                   {"rhat", p.rhat},
                   {"ess", p.ess.value},
                   {"ess_constant", p.ess.constant},
                   {"prior_posterior_shift", p.shift}});
  }
  return j.dump(2) + "\n";
}

}  // namespace gearcalib
