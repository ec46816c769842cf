#include "gearcalib/pack.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace gearcalib {

using ojson = nlohmann::ordered_json;
using nlohmann::json;

ojson error_json(const ErrorRow& r) {
  return ojson{{"trip_id", r.trip_id}, {"reef_type", r.reef_type}, {"boat", r.boat},
               {"reef_size", r.reef_size}, {"maxn", r.maxn},       {"median", r.median},
               {"lo", r.lo},           {"hi", r.hi}};
}

namespace {

std::string cam_key(Camera c) { return std::string(1, camera_code(c)); }

ojson summary_json(const Summary& s) {
  return ojson{{"mean", s.mean}, {"median", s.median}, {"variance", s.variance}, {"q05", s.q05}, {"q95", s.q95}};
}

Summary summary_from(const json& j) {
  Summary s;
  s.mean = j.at("mean").get<double>();
  s.median = j.at("median").get<double>();
  s.variance = j.at("variance").get<double>();
  s.q05 = j.at("q05").get<double>();
  s.q95 = j.at("q95").get<double>();
  return s;
}

ojson family_json(const LineFamily& f) {
  return ojson{{"n_points", f.n_points},
               {"n_clamped", f.n_clamped},
               {"median_line", {{"intercept", f.median_intercept()}, {"slope", f.median_slope()}}},
               {"median_r2", f.median_r2},
               {"summary",
                {{"intercept", summary_json(f.intercept_summary)},
                 {"slope", summary_json(f.slope_summary)},
                 {"covariance", f.covariance},
                 {"correlation", f.correlation}}},
               {"intercept", f.intercept},
               {"slope", f.slope},
               {"r2", f.r2}};
}

LineFamily family_from(const json& j) {
  LineFamily f;
  f.n_points = j.at("n_points").get<int>();
  f.n_clamped = j.at("n_clamped").get<std::size_t>();
  f.median_r2 = j.at("median_r2").get<double>();
  const auto& s = j.at("summary");
  f.intercept_summary = summary_from(s.at("intercept"));
  f.slope_summary = summary_from(s.at("slope"));
  f.covariance = s.at("covariance").get<double>();
  f.correlation = s.at("correlation").get<double>();
  f.intercept = j.at("intercept").get<std::vector<double>>();
  f.slope = j.at("slope").get<std::vector<double>>();
  f.r2 = j.at("r2").get<std::vector<double>>();
  return f;
}

ErrorRow error_from(const json& j) {
  ErrorRow r;
  r.trip_id = j.at("trip_id").get<std::string>();
  r.reef_type = j.at("reef_type").get<std::string>();
  r.boat = j.at("boat").get<int>();
  r.reef_size = j.at("reef_size").get<int>();
  r.maxn = j.at("maxn").get<std::int64_t>();
  r.median = j.at("median").get<double>();
  r.lo = j.at("lo").get<double>();
  r.hi = j.at("hi").get<double>();
  return r;
}

ojson matrix_json(const Eigen::Matrix3d& m) {
  ojson out = ojson::array();
  for (int i = 0; i < 3; ++i) out.push_back({m(i, 0), m(i, 1), m(i, 2)});
  return out;
}

Eigen::Matrix3d matrix_from(const json& j) {
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) m(i, k) = j.at(i).at(k).get<double>();
  return m;
}

ojson paired_json(const RatioRegressionModel& m) {
  return ojson{{"columns", kRatioColumns},
               {"coef", {m.coef(0), m.coef(1), m.coef(2)}},
               {"covariance", matrix_json(m.covariance)},
               {"xtx_inverse", matrix_json(m.xtx_inverse)},
               {"s2", m.s2},
               {"r2", m.r2},
               {"n", m.n},
               {"design_range",
                {{"log_maxn_plus_1", {m.log_maxn_min, m.log_maxn_max}},
                 {"camera_ratio", {m.camratio_min, m.camratio_max}}}},
               {"caveat", kRatioCaveat}};
}

RatioRegressionModel paired_from(Camera c, const json& j) {
  RatioRegressionModel m;
  m.camera = c;
  const auto& coef = j.at("coef");
  for (int i = 0; i < 3; ++i) m.coef(i) = coef.at(i).get<double>();
  m.covariance = matrix_from(j.at("covariance"));
  m.xtx_inverse = matrix_from(j.at("xtx_inverse"));
  m.s2 = j.at("s2").get<double>();
  m.r2 = j.at("r2").get<double>();
  m.n = j.at("n").get<int>();
  const auto& range = j.at("design_range");
  m.log_maxn_min = range.at("log_maxn_plus_1").at(0).get<double>();
  m.log_maxn_max = range.at("log_maxn_plus_1").at(1).get<double>();
  m.camratio_min = range.at("camera_ratio").at(0).get<double>();
  m.camratio_max = range.at("camera_ratio").at(1).get<double>();
  return m;
}

// Validation helpers: each appends a message and returns false on failure.
struct Checker {
  std::vector<std::string> errors;

  bool fail(const std::string& where, const std::string& what) {
    errors.push_back(where + ": " + what);
    return false;
  }
  const json* field(const json& obj, const std::string& where, const char* key) {
    if (!obj.is_object()) {
      fail(where, "expected an object");
      return nullptr;
    }
    const auto it = obj.find(key);
    if (it == obj.end()) {
      fail(where, std::string("missing '") + key + "'");
      return nullptr;
    }
    return &*it;
  }
  bool number(const json& obj, const std::string& where, const char* key) {
    const json* v = field(obj, where, key);
    if (!v) return false;
    if (!v->is_number()) return fail(where + "." + key, "expected a number");
    return true;
  }
  bool integer(const json& obj, const std::string& where, const char* key, std::int64_t min) {
    const json* v = field(obj, where, key);
    if (!v) return false;
    if (!v->is_number_integer()) return fail(where + "." + key, "expected an integer");
    if (v->get<std::int64_t>() < min) return fail(where + "." + key, "below " + std::to_string(min));
    return true;
  }
  bool string(const json& obj, const std::string& where, const char* key) {
    const json* v = field(obj, where, key);
    if (!v) return false;
    if (!v->is_string()) return fail(where + "." + key, "expected a string");
    return true;
  }
  // Array of numbers; returns its length or -1.
  long numbers(const json& obj, const std::string& where, const char* key) {
    const json* v = field(obj, where, key);
    if (!v) return -1;
    if (!v->is_array()) {
      fail(where + "." + key, "expected an array");
      return -1;
    }
    for (const auto& x : *v)
      if (!x.is_number()) {
        fail(where + "." + key, "non-numeric element");
        return -1;
      }
    return static_cast<long>(v->size());
  }
  void summary(const json& obj, const std::string& where) {
    for (const char* k : {"mean", "median", "variance", "q05", "q95"}) number(obj, where, k);
    if (obj.is_object() && obj.contains("variance") && obj["variance"].is_number() &&
        obj["variance"].get<double>() < 0.0)
      fail(where + ".variance", "negative");
  }
  // Returns the draw count of the family or -1.
  long family(const json& f, const std::string& where, bool nonnegative_slope) {
    integer(f, where, "n_points", 2);
    integer(f, where, "n_clamped", 0);
    number(f, where, "median_r2");
    if (const json* line = field(f, where, "median_line")) {
      number(*line, where + ".median_line", "intercept");
      number(*line, where + ".median_line", "slope");
    }
    if (const json* s = field(f, where, "summary")) {
      if (const json* v = field(*s, where + ".summary", "intercept")) summary(*v, where + ".summary.intercept");
      if (const json* v = field(*s, where + ".summary", "slope")) summary(*v, where + ".summary.slope");
      number(*s, where + ".summary", "covariance");
      number(*s, where + ".summary", "correlation");
    }
    const long a = numbers(f, where, "intercept");
    const long b = numbers(f, where, "slope");
    const long c = numbers(f, where, "r2");
    if (a < 0 || b < 0 || c < 0) return -1;
    if (a != b || a != c) {
      fail(where, "intercept, slope and r2 arrays differ in length");
      return -1;
    }
    if (a == 0) {
      fail(where, "no draws");
      return -1;
    }
    if (nonnegative_slope)
      for (const auto& v : f["slope"])
        if (v.get<double>() < 0.0) {
          fail(where + ".slope", "negative slope");
          break;
        }
    for (const auto& v : f["r2"]) {
      const double r = v.get<double>();
      if (r < 0.0 || r > 1.0) {
        fail(where + ".r2", "outside [0, 1]");
        break;
      }
    }
    return a;
  }
  void matrix3(const json& obj, const std::string& where, const char* key) {
    const json* m = field(obj, where, key);
    if (!m) return;
    bool ok = m->is_array() && m->size() == 3;
    if (ok)
      for (const auto& row : *m) {
        ok = ok && row.is_array() && row.size() == 3;
        if (ok)
          for (const auto& x : row) ok = ok && x.is_number();
      }
    if (!ok) fail(where + "." + key, "expected a 3x3 numeric matrix");
  }
};

}  // namespace

std::vector<std::string> validate_pack(const json& doc) {
  Checker c;
  if (!doc.is_object()) return {"document: expected an object"};
  if (c.string(doc, "document", "format") && doc["format"].get<std::string>() != kPackFormat)
    c.fail("document.format", "unknown format");
  if (c.integer(doc, "document", "version", 1) && doc["version"].get<int>() != kPackVersion)
    c.fail("document.version", "unsupported version");
  if (const json* p = c.field(doc, "document", "provenance")) {
    c.string(*p, "provenance", "model_config_hash");
    c.integer(*p, "provenance", "seed", 0);
    c.integer(*p, "provenance", "draw_count", 1);
    c.integer(*p, "provenance", "n_trips", 1);
    c.string(*p, "provenance", "trips_hash");
  }
  long m = -1;
  if (const json* cams = c.field(doc, "document", "cameras")) {
    if (!cams->is_object() || cams->empty()) c.fail("cameras", "expected a non-empty object");
    else
      for (const auto& [key, entry] : cams->items()) {
        const std::string where = "cameras." + key;
        if (key.size() != 1 || std::string_view("DSTR").find(key[0]) == std::string_view::npos) {
          c.fail(where, "unknown camera");
          continue;
        }
        const long len = c.family(entry, where, true);
        if (len > 0) {
          if (m < 0) m = len;
          else if (len != m) c.fail(where, "draw count differs from other cameras");
        }
        const json* errs = c.field(entry, where, "errors");
        if (!errs) continue;
        if (!errs->is_array()) {
          c.fail(where + ".errors", "expected an array");
          continue;
        }
        for (std::size_t i = 0; i < errs->size(); ++i) {
          const auto& row = (*errs)[i];
          const std::string w = where + ".errors[" + std::to_string(i) + "]";
          c.string(row, w, "trip_id");
          c.string(row, w, "reef_type");
          c.integer(row, w, "boat", 1);
          c.integer(row, w, "reef_size", 1);
          c.integer(row, w, "maxn", 0);
          if (c.number(row, w, "median") & c.number(row, w, "lo") & c.number(row, w, "hi")) {
            const double lo = row["lo"].get<double>(), med = row["median"].get<double>(),
                         hi = row["hi"].get<double>();
            if (!(lo <= med && med <= hi)) c.fail(w, "interval not ordered lo <= median <= hi");
          }
        }
      }
  }
  if (const json* pp = c.field(doc, "document", "paired")) {
    if (!pp->is_object()) c.fail("paired", "expected an object");
    else
      for (const auto& [key, entry] : pp->items()) {
        const std::string where = "paired." + key;
        if (key.size() != 1 || std::string_view("DSTR").find(key[0]) == std::string_view::npos) {
          c.fail(where, "unknown camera");
          continue;
        }
        if (c.numbers(entry, where, "coef") != 3) c.fail(where + ".coef", "expected 3 coefficients");
        c.matrix3(entry, where, "covariance");
        c.matrix3(entry, where, "xtx_inverse");
        if (c.number(entry, where, "s2") && entry["s2"].get<double>() < 0.0) c.fail(where + ".s2", "negative");
        c.number(entry, where, "r2");
        c.integer(entry, where, "n", 4);
        c.string(entry, where, "caveat");
        if (const json* r = c.field(entry, where, "design_range")) {
          if (c.numbers(*r, where + ".design_range", "log_maxn_plus_1") != 2)
            c.fail(where + ".design_range.log_maxn_plus_1", "expected [min, max]");
          if (c.numbers(*r, where + ".design_range", "camera_ratio") != 2)
            c.fail(where + ".design_range.camera_ratio", "expected [min, max]");
        }
      }
  }
  if (const json* a = c.field(doc, "document", "adequacy")) {
    if (const json* ac = c.field(*a, "adequacy", "acoustic")) {
      const long len = c.family(*ac, "adequacy.acoustic", true);
      if (len > 0 && m > 0 && len != m) c.fail("adequacy.acoustic", "draw count differs from cameras");
    }
    if (const json* mr = c.field(*a, "adequacy", "markrecapture"); mr && !mr->is_null())
      c.family(*mr, "adequacy.markrecapture", true);
    if (const json* om = c.field(*a, "adequacy", "markrecapture_omitted"); om && !om->is_boolean())
      c.fail("adequacy.markrecapture_omitted", "expected a boolean");
    if (const json* rho = c.field(*a, "adequacy", "rho"); rho && !rho->is_null()) c.summary(*rho, "adequacy.rho");
  }
  if (const json* w = c.field(doc, "document", "warnings"); w && !w->is_array()) c.fail("warnings", "expected an array");
  if (m > 0 && doc.contains("provenance") && doc["provenance"].contains("draw_count") &&
      doc["provenance"]["draw_count"].is_number_integer() && doc["provenance"]["draw_count"].get<long>() != m)
    c.fail("provenance.draw_count", "does not match the array length");
  return c.errors;
}

const CameraCalibration& CalibrationPack::camera(Camera c) const {
  const auto it = cameras.find(c);
  if (it == cameras.end()) throw std::out_of_range(std::string("camera ") + camera_code(c) + " is not in the pack");
  return it->second;
}

const RatioRegressionModel& CalibrationPack::paired_model(Camera c) const {
  const auto it = paired.find(c);
  if (it == paired.end())
    throw std::out_of_range(std::string("no paired ratio model for camera ") + camera_code(c));
  return it->second;
}

ojson CalibrationPack::to_json() const {
  ojson doc;
  doc["format"] = kPackFormat;
  doc["version"] = kPackVersion;
  doc["provenance"] = {{"model_config_hash", provenance.model_config_hash},
                       {"seed", provenance.seed},
                       {"draw_count", provenance.draw_count},
                       {"n_trips", provenance.n_trips},
                       {"trips_hash", provenance.trips_hash}};
  ojson cams = ojson::object();
  for (const auto& [c, entry] : cameras) {
    ojson e = family_json(entry.fit);
    ojson rows = ojson::array();
    for (const auto& r : entry.errors) rows.push_back(error_json(r));
    e["errors"] = std::move(rows);
    cams[cam_key(c)] = std::move(e);
  }
  doc["cameras"] = std::move(cams);
  ojson paired_doc = ojson::object();
  for (const auto& [c, m] : paired) paired_doc[cam_key(c)] = paired_json(m);
  doc["paired"] = std::move(paired_doc);
  ojson adequacy_doc;
  adequacy_doc["acoustic"] = family_json(adequacy.acoustic);
  adequacy_doc["markrecapture"] = adequacy.markrecapture ? family_json(*adequacy.markrecapture) : ojson(nullptr);
  adequacy_doc["markrecapture_omitted"] = adequacy.markrecapture_omitted;
  adequacy_doc["rho"] = adequacy.rho ? summary_json(*adequacy.rho) : ojson(nullptr);
  doc["adequacy"] = std::move(adequacy_doc);
  doc["warnings"] = warnings;
  return doc;
}

std::string CalibrationPack::dump() const { return to_json().dump() + "\n"; }

CalibrationPack CalibrationPack::from_json(const json& doc) {
  if (const auto errors = validate_pack(doc); !errors.empty()) {
    std::string msg = "invalid calibration pack:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw PackError(msg);
  }
  CalibrationPack p;
  const auto& prov = doc.at("provenance");
  p.provenance.model_config_hash = prov.at("model_config_hash").get<std::string>();
  p.provenance.seed = prov.at("seed").get<std::uint64_t>();
  p.provenance.draw_count = prov.at("draw_count").get<std::size_t>();
  p.provenance.n_trips = prov.at("n_trips").get<std::size_t>();
  p.provenance.trips_hash = prov.at("trips_hash").get<std::string>();
  for (const auto& [key, entry] : doc.at("cameras").items()) {
    CameraCalibration cal;
    cal.camera = parse_camera(key);
    cal.fit = family_from(entry);
    for (const auto& row : entry.at("errors")) cal.errors.push_back(error_from(row));
    p.cameras.emplace(cal.camera, std::move(cal));
  }
  for (const auto& [key, entry] : doc.at("paired").items()) {
    const Camera c = parse_camera(key);
    p.paired.emplace(c, paired_from(c, entry));
  }
  const auto& a = doc.at("adequacy");
  p.adequacy.acoustic = family_from(a.at("acoustic"));
  if (!a.at("markrecapture").is_null()) p.adequacy.markrecapture = family_from(a.at("markrecapture"));
  p.adequacy.markrecapture_omitted = a.at("markrecapture_omitted").get<bool>();
  if (!a.at("rho").is_null()) p.adequacy.rho = summary_from(a.at("rho"));
  p.warnings = doc.at("warnings").get<std::vector<std::string>>();
  return p;
}

CalibrationPack CalibrationPack::parse(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw PackError(std::string("calibration pack is not valid JSON: ") + e.what());
  }
  return from_json(doc);
}

CalibrationPack build_pack(const PosteriorDraws& draws, const std::vector<TripRecord>& trips,
                           const std::vector<std::array<std::optional<double>, kCameraCount>>* camera_ratios,
                           PackProvenance provenance) {
  CalibrationPack p;
  provenance.draw_count = draws.n_draws();
  provenance.n_trips = trips.size();
  p.provenance = std::move(provenance);
  for (Camera c : kCameras) {
    try {
      p.cameras.emplace(c, derive_calibration(draws, trips, c));
    } catch (const std::invalid_argument& e) {
      p.warnings.push_back(std::string("camera ") + camera_code(c) + " skipped: " + e.what());
    }
  }
  if (p.cameras.empty()) throw std::invalid_argument("no camera is observed on 3 or more trips");
  p.adequacy = adequacy_alignment(draws, trips);
  if (camera_ratios) {
    for (Camera c : kCameras) {
      try {
        p.paired.emplace(c, fit_ratio_regression(trips, *camera_ratios, c));
      } catch (const std::invalid_argument& e) {
        p.warnings.push_back(std::string("paired model for camera ") + camera_code(c) + " skipped: " + e.what());
      }
    }
  } else {
    p.warnings.push_back("no species table: paired ratio models omitted");
  }
  return p;
}

void save_pack(const std::filesystem::path& path, const CalibrationPack& pack) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << pack.dump();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

CalibrationPack load_pack(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return CalibrationPack::parse(buf.str());
}

}  // namespace gearcalib
