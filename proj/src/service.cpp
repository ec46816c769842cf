#include "gearcalib/service.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "gearcalib/stats.hpp"

namespace gearcalib {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

Response json_response(int status, const ojson& doc) {
  Response r;
  r.status = status;
  r.body = doc.dump() + "\n";
  r.headers["Content-Type"] = "application/json";
  return r;
}

Response error_response(int status, const std::string& message) {
  return json_response(status, ojson{{"error", message}});
}

// Thrown while decoding a request body; becomes a 400.
struct BadRequest : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

json parse_body(const Request& req) {
  json doc = json::parse(req.body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw BadRequest("body must be a JSON object");
  return doc;
}

Camera camera_field(const json& doc) {
  const auto it = doc.find("camera");
  if (it == doc.end() || !it->is_string()) throw BadRequest("camera must be a string");
  const auto s = it->get<std::string>();
  if (s != "D" && s != "S" && s != "T" && s != "R") throw BadRequest("unknown camera '" + s + "'");
  return parse_camera(s);
}

std::int64_t maxn_field(const json& doc) {
  const auto it = doc.find("maxn");
  if (it == doc.end() || !it->is_number()) throw BadRequest("maxn must be a number");
  if (it->is_number_float()) {
    const double v = it->get<double>();
    if (!(std::isfinite(v) && v == std::floor(v) && std::abs(v) < 9e15)) throw BadRequest("maxn must be an integer");
    if (v < 0) throw BadRequest("maxn must be nonnegative");
    return static_cast<std::int64_t>(v);
  }
  if (it->is_number_unsigned()) return static_cast<std::int64_t>(std::min<std::uint64_t>(it->get<std::uint64_t>(), INT64_MAX));
  const auto v = it->get<std::int64_t>();
  if (v < 0) throw BadRequest("maxn must be nonnegative");
  return v;
}

double camratio_field(const json& doc) {
  const auto it = doc.find("camratio");
  if (it == doc.end() || !it->is_number()) throw BadRequest("camratio must be a number");
  return it->get<double>();
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

CalibrationService::CalibrationService(std::string pack_bytes, std::vector<std::string> cors_allowlist)
    : bytes_(std::move(pack_bytes)), cors_(std::move(cors_allowlist)) {
  const json doc = json::parse(bytes_, nullptr, false);
  if (doc.is_discarded()) throw PackError("pack is not valid JSON");
  const auto problems = validate_pack(doc);
  if (!problems.empty()) {
    std::string msg = "pack failed validation:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw PackError(msg);
  }
  pack_ = CalibrationPack::from_json(doc);
  etag_ = "\"" + sha256_hex(bytes_) + "\"";
}

CalibrationService CalibrationService::from_file(const std::filesystem::path& path,
                                                 std::vector<std::string> cors_allowlist) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open pack " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return CalibrationService(ss.str(), std::move(cors_allowlist));
}

void CalibrationService::add_cors(const Request& req, Response& res) const {
  const auto it = req.headers.find("origin");
  if (it == req.headers.end()) return;
  const bool any = std::find(cors_.begin(), cors_.end(), "*") != cors_.end();
  if (!any && std::find(cors_.begin(), cors_.end(), it->second) == cors_.end()) return;
  res.headers["Access-Control-Allow-Origin"] = any ? "*" : it->second;
  res.headers["Access-Control-Expose-Headers"] = "ETag";
  if (!any) res.headers["Vary"] = "Origin";
}

Response CalibrationService::handle(const Request& req) const {
  Response res;
  const bool known = req.path == "/pack" || req.path == "/calibrate" || req.path == "/predict-ratio";
  if (!known) {
    res = error_response(404, "no such endpoint: " + req.path);
  } else if (req.method == "OPTIONS") {
    res.status = 204;
    res.headers["Access-Control-Allow-Methods"] = req.path == "/pack" ? "GET, OPTIONS" : "POST, OPTIONS";
    res.headers["Access-Control-Allow-Headers"] = "Content-Type, If-None-Match";
    res.headers["Access-Control-Max-Age"] = "600";
  } else if (req.path == "/pack") {
    res = req.method == "GET" ? get_pack(req) : error_response(405, "use GET");
    if (res.status == 405) res.headers["Allow"] = "GET, OPTIONS";
  } else if (req.method != "POST") {
    res = error_response(405, "use POST");
    res.headers["Allow"] = "POST, OPTIONS";
  } else {
    try {
      res = req.path == "/calibrate" ? calibrate(req) : predict_ratio(req);
    } catch (const BadRequest& e) {
      res = error_response(400, e.what());
    } catch (const std::invalid_argument& e) {
      res = error_response(400, e.what());
    }
  }
  add_cors(req, res);
  return res;
}

Response CalibrationService::get_pack(const Request& req) const {
  Response res;
  res.headers["ETag"] = etag_;
  res.headers["Cache-Control"] = "no-cache";
  const auto it = req.headers.find("if-none-match");
  if (it != req.headers.end() && it->second == etag_) {
    res.status = 304;
    return res;
  }
  res.body = bytes_;
  res.headers["Content-Type"] = "application/json";
  return res;
}

Response CalibrationService::calibrate(const Request& req) const {
  const json doc = parse_body(req);
  const Camera cam = camera_field(doc);
  const std::int64_t maxn = maxn_field(doc);
  std::optional<std::string> reef;
  if (const auto it = doc.find("reef_type"); it != doc.end() && !it->is_null()) {
    if (!it->is_string()) throw BadRequest("reef_type must be a string");
    reef = it->get<std::string>();
  }
  if (!pack_.has_camera(cam)) throw BadRequest(std::string("camera ") + camera_code(cam) + " is not in the pack");
  const auto& entry = pack_.camera(cam);
  const auto est = apply_calibration(entry, maxn);

  ojson rows = ojson::array();
  for (const auto& r : entry.errors)
    if (!reef || r.reef_type == *reef) rows.push_back(error_json(r));
  ojson out;
  out["camera"] = std::string(1, camera_code(cam));
  out["maxn"] = maxn;
  out["estimate"] = est.estimate;
  out["approx_se"] = est.approx_se;
  out["median_line"] = {{"intercept", entry.fit.median_intercept()}, {"slope", entry.fit.median_slope()}};
  out["calibration_error_context"] = {{"reef_type", reef ? ojson(*reef) : ojson(nullptr)},
                                      {"interval_mass", 0.8},
                                      {"rows", std::move(rows)}};
  return json_response(200, out);
}

Response CalibrationService::predict_ratio(const Request& req) const {
  const json doc = parse_body(req);
  const Camera cam = camera_field(doc);
  const std::int64_t maxn = maxn_field(doc);
  const double camratio = camratio_field(doc);
  if (!pack_.paired.contains(cam))
    throw BadRequest(std::string("no paired ratio model for camera ") + camera_code(cam));
  const auto p = predict_pooled_ratio(pack_.paired_model(cam), maxn, camratio);
  ojson out;
  out["camera"] = std::string(1, camera_code(cam));
  out["maxn"] = maxn;
  out["camratio"] = camratio;
  out["r_hat"] = p.r_hat;
  out["pred_se"] = p.pred_se;
  out["flags"] = {{"out_of_range", p.out_of_range}, {"extrapolation", p.extrapolation}};
  out["caveat"] = p.caveat;
  return json_response(200, out);
}

struct HttpServer::Impl {
  std::shared_ptr<const CalibrationService> service;
  std::string host;
  int port = 0;
  httplib::Server server;
  bool bound = false;
};

HttpServer::HttpServer(std::shared_ptr<const CalibrationService> service, std::string bind_address, int port)
    : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  impl_->host = std::move(bind_address);
  impl_->port = port;
  const auto adapt = [svc = impl_->service](const httplib::Request& in, httplib::Response& out) {
    Request req;
    req.method = in.method;
    req.path = in.path;
    req.body = in.body;
    for (const auto& [k, v] : in.headers) req.headers.emplace(lower(k), v);
    const Response res = svc->handle(req);
    out.status = res.status;
    for (const auto& [k, v] : res.headers)
      if (k != "Content-Type") out.set_header(k, v);
    const auto ct = res.headers.find("Content-Type");
    if (!res.body.empty() || ct != res.headers.end())
      out.set_content(res.body, ct != res.headers.end() ? ct->second : "text/plain");
  };
  for (const char* path : {"/pack", "/calibrate", "/predict-ratio"}) {
    impl_->server.Get(path, adapt);
    impl_->server.Post(path, adapt);
    impl_->server.Options(path, adapt);
    impl_->server.Put(path, adapt);
    impl_->server.Delete(path, adapt);
  }
  impl_->server.set_error_handler([](const httplib::Request& in, httplib::Response& out) {
    if (out.status == 404) out.set_content(ojson{{"error", "no such endpoint: " + in.path}}.dump() + "\n", "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
  auto& s = impl_->server;
  if (impl_->port == 0) {
    impl_->port = s.bind_to_any_port(impl_->host);
    if (impl_->port < 0) throw std::runtime_error("cannot bind " + impl_->host);
  } else if (!s.bind_to_port(impl_->host, impl_->port)) {
    throw std::runtime_error("cannot bind " + impl_->host + ":" + std::to_string(impl_->port));
  }
  impl_->bound = true;
  return impl_->port;
}

void HttpServer::listen() {
  if (!impl_->bound) throw std::logic_error("HttpServer::listen before bind");
  impl_->server.listen_after_bind();
}

void HttpServer::stop() {
  if (impl_ && impl_->bound) impl_->server.stop();
}

}  // namespace gearcalib
