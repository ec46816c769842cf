#include "gearcalib/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include <boost/tokenizer.hpp>

namespace gearcalib {

namespace {

using Fields = std::vector<std::string>;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

Fields split_csv(const std::string& line, std::size_t line_no) {
  using Sep = boost::escaped_list_separator<char>;
  try {
    boost::tokenizer<Sep> tok(line, Sep('\\', ',', '"'));
    Fields out;
    for (const auto& f : tok) out.push_back(trim(f));
    return out;
  } catch (const boost::escaped_list_error& e) {
    throw ParseError(std::string("malformed CSV: ") + e.what(), line_no);
  }
}

bool is_missing(const std::string& f) { return f.empty() || f == "NA"; }

std::int64_t parse_count(const std::string& f, std::string_view column, std::size_t line_no) {
  std::int64_t v = 0;
  const auto* end = f.data() + f.size();
  const auto [p, ec] = std::from_chars(f.data(), end, v);
  if (ec != std::errc() || p != end)
    throw ParseError("column '" + std::string(column) + "': expected integer, got '" + f + "'",
                     line_no);
  if (v < 0)
    throw ParseError("column '" + std::string(column) + "': negative count " + f, line_no);
  return v;
}

double parse_real(const std::string& f, std::string_view column, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(f, &used);
    if (used != f.size()) throw std::invalid_argument(f);
    return v;
  } catch (const std::exception&) {
    throw ParseError("column '" + std::string(column) + "': expected number, got '" + f + "'",
                     line_no);
  }
}

int parse_boat(const std::string& f, std::size_t line_no) {
  if (f == "1") return 1;
  if (f == "2") return 2;
  throw ParseError("column 'boat': expected 1 or 2, got '" + f + "'", line_no);
}

int parse_reef_size(const std::string& f, std::size_t line_no) {
  std::string v = f;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "l" || v == "large") return 1;
  if (v == "2" || v == "s" || v == "small") return 2;
  throw ParseError("column 'reef_size': expected 1/L/large or 2/S/small, got '" + f + "'",
                   line_no);
}

bool parse_flag(const std::string& f, std::string_view column, std::size_t line_no) {
  if (f == "1" || f == "true" || f == "TRUE") return true;
  if (f == "0" || f == "false" || f == "FALSE") return false;
  throw ParseError("column '" + std::string(column) + "': expected 0/1, got '" + f + "'",
                   line_no);
}

struct Header {
  std::map<std::string, std::size_t> index;

  std::size_t require(const std::string& name) const {
    const auto it = index.find(name);
    if (it == index.end()) throw ParseError("missing required column '" + name + "'", 1);
    return it->second;
  }
  std::optional<std::size_t> find(const std::string& name) const {
    const auto it = index.find(name);
    if (it == index.end()) return std::nullopt;
    return it->second;
  }
};

Header read_header(std::istream& in, std::string_view what) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("no " + std::string(what));
  Header h;
  const auto fields = split_csv(line, 1);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (!h.index.emplace(fields[i], i).second)
      throw ParseError("duplicate column '" + fields[i] + "'", 1);
  }
  return h;
}

std::string format_count(const Count& c) { return c ? std::to_string(*c) : "NA"; }

std::string format_real(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

char camera_code(Camera c) {
  static constexpr char kCodes[] = {'D', 'S', 'T', 'R'};
  return kCodes[index_of(c)];
}

Camera parse_camera(std::string_view s) {
  if (s == "D") return Camera::D;
  if (s == "S") return Camera::S;
  if (s == "T") return Camera::T;
  if (s == "R") return Camera::R;
  throw std::invalid_argument("unknown camera '" + std::string(s) + "' (expected D, S, T or R)");
}

std::set<Camera> TripRecord::present_cameras() const {
  std::set<Camera> out;
  for (Camera c : kCameras)
    if (observed(c)) out.insert(c);
  return out;
}

SpeciesMaxNTable::SpeciesMaxNTable(std::vector<SpeciesRow> rows,
                                   std::map<std::string, SpeciesFlags> registry)
    : rows_(std::move(rows)), registry_(std::move(registry)) {
  for (const auto& [id, flags] : registry_) {
    if (flags.is_gaj && !flags.is_gaj_plus)
      throw ValidationError("species '" + id + "' is flagged GAJ but not GAJ+");
  }
  std::set<std::tuple<std::string, Camera, std::string>> seen;
  for (const auto& r : rows_) {
    if (!registry_.contains(r.species_id))
      throw ValidationError("species '" + r.species_id + "' not in registry");
    if (r.maxn < 0) throw ValidationError("negative MaxN for species '" + r.species_id + "'");
    if (!seen.emplace(r.trip_id, r.camera, r.species_id).second)
      throw ValidationError("duplicate species row (" + r.trip_id + ", " +
                            camera_code(r.camera) + ", " + r.species_id + ")");
  }
}

std::pair<std::int64_t, std::int64_t> SpeciesMaxNTable::sums(
    std::string_view trip_id, const std::set<Camera>& cameras) const {
  std::int64_t gaj = 0, gaj_plus = 0;
  for (const auto& r : rows_) {
    if (r.trip_id != trip_id || !cameras.contains(r.camera)) continue;
    const auto& flags = registry_.at(r.species_id);
    if (flags.is_gaj) gaj += r.maxn;
    if (flags.is_gaj_plus) gaj_plus += r.maxn;
  }
  return {gaj, gaj_plus};
}

bool SpeciesMaxNTable::has_rows(std::string_view trip_id, Camera camera) const {
  return std::any_of(rows_.begin(), rows_.end(), [&](const SpeciesRow& r) {
    return r.trip_id == trip_id && r.camera == camera;
  });
}

double compute_pooled_ratio(const SpeciesMaxNTable& table, std::string_view trip_id,
                            const std::set<Camera>& present_cameras) {
  const auto [gaj, gaj_plus] = table.sums(trip_id, present_cameras);
  if (gaj_plus == 0)
    throw ValidationError("no GAJ+ observations for trip '" + std::string(trip_id) + "'");
  return static_cast<double>(gaj) / static_cast<double>(gaj_plus) + kRatioShift;
}

std::optional<double> compute_camera_ratio(const SpeciesMaxNTable& table,
                                           std::string_view trip_id, Camera camera) {
  if (!table.has_rows(trip_id, camera)) return std::nullopt;
  const auto [gaj, gaj_plus] = table.sums(trip_id, {camera});
  if (gaj_plus == 0)
    throw ValidationError("no GAJ+ observations for trip '" + std::string(trip_id) +
                          "' on camera " + camera_code(camera));
  return static_cast<double>(gaj) / static_cast<double>(gaj_plus) + kRatioShift;
}

std::vector<std::array<std::optional<double>, kCameraCount>> compute_camera_ratios(
    const SpeciesMaxNTable& table, const std::vector<TripRecord>& trips) {
  std::vector<std::array<std::optional<double>, kCameraCount>> out(trips.size());
  for (std::size_t s = 0; s < trips.size(); ++s)
    for (Camera c : kCameras)
      if (trips[s].observed(c)) out[s][index_of(c)] = compute_camera_ratio(table, trips[s].trip_id, c);
  return out;
}

std::vector<TripRecord> parse_trips(std::istream& in) {
  const Header h = read_header(in, "trips");
  const std::size_t c_id = h.require("trip_id"), c_boat = h.require("boat"),
                    c_reef = h.require("reef_size"), c_type = h.require("reef_type"),
                    c_n = h.require("N"), c_nf = h.require("N_focal"), c_mr = h.require("N_mr");
  std::array<std::size_t, kCameraCount> c_maxn{};
  for (Camera c : kCameras) c_maxn[index_of(c)] = h.require(std::string("maxn_") + camera_code(c));
  const auto c_r = h.find("r");

  std::vector<TripRecord> trips;
  std::array<std::array<int, 2>, 2> next_k{};
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line, line_no);
    if (f.size() != h.index.size())
      throw ParseError("expected " + std::to_string(h.index.size()) + " fields, got " +
                           std::to_string(f.size()),
                       line_no);
    TripRecord t;
    t.trip_id = f[c_id];
    if (t.trip_id.empty()) throw ParseError("empty trip_id", line_no);
    t.boat = parse_boat(f[c_boat], line_no);
    t.reef_size = parse_reef_size(f[c_reef], line_no);
    t.reef_type = f[c_type];
    for (Camera c : kCameras) {
      const auto& v = f[c_maxn[index_of(c)]];
      if (!is_missing(v))
        t.maxn[index_of(c)] = parse_count(v, std::string("maxn_") + camera_code(c), line_no);
    }
    if (is_missing(f[c_n])) throw ParseError("N is never missing", line_no);
    if (is_missing(f[c_nf])) throw ParseError("N_focal is never missing", line_no);
    t.acoustic_total = parse_count(f[c_n], "N", line_no);
    t.acoustic_focal = parse_count(f[c_nf], "N_focal", line_no);
    if (!is_missing(f[c_mr])) t.markrecapture = parse_count(f[c_mr], "N_mr", line_no);
    t.pooled_ratio = std::numeric_limits<double>::quiet_NaN();
    if (c_r && !is_missing(f[*c_r])) t.pooled_ratio = parse_real(f[*c_r], "r", line_no);
    t.replicate = ++next_k[t.boat - 1][t.reef_size - 1];
    if (t.acoustic_focal > t.acoustic_total)
      throw ValidationError("trip '" + t.trip_id + "': N_focal > N (line " +
                            std::to_string(line_no) + ")");
    trips.push_back(std::move(t));
  }
  if (trips.empty()) throw ValidationError("no trips");
  validate_trips(trips);
  return trips;
}

std::vector<TripRecord> load_trips(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trips file '" + path.string() + "'");
  return parse_trips(in);
}

void attach_pooled_ratios(std::vector<TripRecord>& trips, const SpeciesMaxNTable& table) {
  for (auto& t : trips) t.pooled_ratio = compute_pooled_ratio(table, t.trip_id, t.present_cameras());
}

SpeciesMaxNTable parse_species_table(std::istream& species, std::istream& registry) {
  std::map<std::string, SpeciesFlags> reg;
  {
    const Header h = read_header(registry, "species registry");
    const auto c_id = h.require("species_id"), c_gaj = h.require("is_gaj"),
               c_plus = h.require("is_gaj_plus");
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(registry, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      const auto f = split_csv(line, line_no);
      if (f.size() != h.index.size()) throw ParseError("wrong field count", line_no);
      SpeciesFlags flags{parse_flag(f[c_gaj], "is_gaj", line_no),
                         parse_flag(f[c_plus], "is_gaj_plus", line_no)};
      if (!reg.emplace(f[c_id], flags).second)
        throw ValidationError("duplicate species id '" + f[c_id] + "' in registry");
    }
  }
  std::vector<SpeciesRow> rows;
  {
    const Header h = read_header(species, "species rows");
    const auto c_trip = h.require("trip_id"), c_cam = h.require("camera"),
               c_sp = h.require("species_id"), c_maxn = h.require("maxn");
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(species, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      const auto f = split_csv(line, line_no);
      if (f.size() != h.index.size()) throw ParseError("wrong field count", line_no);
      Camera cam;
      try {
        cam = parse_camera(f[c_cam]);
      } catch (const std::invalid_argument& e) {
        throw ParseError(e.what(), line_no);
      }
      rows.push_back({f[c_trip], cam, f[c_sp], parse_count(f[c_maxn], "maxn", line_no)});
    }
  }
  return SpeciesMaxNTable(std::move(rows), std::move(reg));
}

SpeciesMaxNTable load_species_table(const std::filesystem::path& species_csv,
                                    const std::filesystem::path& registry_csv) {
  std::ifstream s(species_csv), r(registry_csv);
  if (!s) throw std::runtime_error("cannot open species file '" + species_csv.string() + "'");
  if (!r) throw std::runtime_error("cannot open registry file '" + registry_csv.string() + "'");
  return parse_species_table(s, r);
}

void assign_replicates(std::vector<TripRecord>& trips) {
  int next_k[2][2]{};
  for (auto& t : trips) {
    if (t.boat < 1 || t.boat > 2 || t.reef_size < 1 || t.reef_size > 2)
      throw ValidationError("trip '" + t.trip_id + "': boat and reef size must be 1 or 2");
    t.replicate = ++next_k[t.boat - 1][t.reef_size - 1];
  }
}

void validate_trips(const std::vector<TripRecord>& trips) {
  if (trips.empty()) throw ValidationError("no trips");
  std::set<std::string> ids;
  std::set<std::tuple<int, int, int>> cells;
  std::array<std::array<int, 2>, 2> max_k{};
  for (const auto& t : trips) {
    if (!ids.insert(t.trip_id).second) throw ValidationError("duplicate trip_id '" + t.trip_id + "'");
    if (t.boat < 1 || t.boat > 2 || t.reef_size < 1 || t.reef_size > 2)
      throw ValidationError("trip '" + t.trip_id + "': boat/reef index out of range");
    if (t.replicate < 1) throw ValidationError("trip '" + t.trip_id + "': replicate index < 1");
    if (!cells.emplace(t.boat, t.reef_size, t.replicate).second)
      throw ValidationError("duplicate (i,j,k) = (" + std::to_string(t.boat) + "," +
                            std::to_string(t.reef_size) + "," + std::to_string(t.replicate) + ")");
    max_k[t.boat - 1][t.reef_size - 1] = std::max(max_k[t.boat - 1][t.reef_size - 1], t.replicate);
    if (t.acoustic_total < 0 || t.acoustic_focal < 0)
      throw ValidationError("trip '" + t.trip_id + "': negative acoustic count");
    if (t.acoustic_focal > t.acoustic_total)
      throw ValidationError("trip '" + t.trip_id + "': N_focal > N");
    for (const auto& m : t.maxn)
      if (m && *m < 0) throw ValidationError("trip '" + t.trip_id + "': negative MaxN");
    if (t.markrecapture && *t.markrecapture < 0)
      throw ValidationError("trip '" + t.trip_id + "': negative N_mr");
    if (!std::isnan(t.pooled_ratio) &&
        !(t.pooled_ratio >= kRatioShift && t.pooled_ratio <= 1.0 + kRatioShift))
      throw ValidationError("trip '" + t.trip_id + "': pooled ratio outside [1e-6, 1+1e-6]");
  }
  const auto sizes = cell_sizes(trips);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      if (max_k[i][j] != sizes[i][j])
        throw ValidationError("replicate indices have gaps in cell (" + std::to_string(i + 1) +
                              "," + std::to_string(j + 1) + ")");
}

void write_trips(std::ostream& out, const std::vector<TripRecord>& trips) {
  out << "trip_id,boat,reef_size,reef_type,maxn_D,maxn_S,maxn_T,maxn_R,N,N_focal,N_mr,r\n";
  for (const auto& t : trips) {
    out << t.trip_id << ',' << t.boat << ',' << t.reef_size << ',' << t.reef_type;
    for (const auto& m : t.maxn) out << ',' << format_count(m);
    out << ',' << t.acoustic_total << ',' << t.acoustic_focal << ',' << format_count(t.markrecapture)
        << ',' << (std::isnan(t.pooled_ratio) ? std::string("NA") : format_real(t.pooled_ratio))
        << '\n';
  }
}

void save_trips(const std::filesystem::path& path, const std::vector<TripRecord>& trips) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  write_trips(out, trips);
}

std::array<std::array<int, 2>, 2> cell_sizes(const std::vector<TripRecord>& trips) {
  std::array<std::array<int, 2>, 2> k{};
  for (const auto& t : trips) ++k[t.boat - 1][t.reef_size - 1];
  return k;
}

}  // namespace gearcalib
