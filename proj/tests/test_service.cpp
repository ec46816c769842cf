#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "gearcalib/service.hpp"
#include "gearcalib/stats.hpp"
#include "support.hpp"

// After Eigen: glibc's resolv.h defines a _res macro.
#include <httplib.h>

using namespace gearcalib;
using nlohmann::json;

namespace {

std::string fixture_pack_text(bool rov_rare = false) {
  const auto f = testing::pack_fixture(300, rov_rare);
  return build_pack(f.draws, f.trips, &f.ratios, {"cfg", 3, 0, 0, "trips"}).dump();
}

Request post(std::string path, const json& body) {
  return {"POST", std::move(path), body.dump(), {{"content-type", "application/json"}}};
}

json body_of(const Response& r) { return json::parse(r.body); }

// Camera D replaced by the identity line with no posterior spread.
std::string identity_pack_text() {
  json doc = json::parse(fixture_pack_text());
  auto& d = doc["cameras"]["D"];
  const std::size_t m = d["intercept"].size();
  d["intercept"] = std::vector<double>(m, 0.0);
  d["slope"] = std::vector<double>(m, 1.0);
  d["median_line"] = {{"intercept", 0.0}, {"slope", 1.0}};
  d["summary"]["intercept"] = {{"mean", 0.0}, {"median", 0.0}, {"variance", 0.0}, {"q05", 0.0}, {"q95", 0.0}};
  d["summary"]["slope"] = {{"mean", 1.0}, {"median", 1.0}, {"variance", 0.0}, {"q05", 1.0}, {"q95", 1.0}};
  d["summary"]["covariance"] = 0.0;
  d["summary"]["correlation"] = 0.0;
  auto& p = doc["paired"]["D"];
  p["s2"] = 0.0;
  p["coef"] = {2.0, 0.0, 0.0};
  return doc.dump() + "\n";
}

}  // namespace

TEST_CASE("GET /pack returns the file bytes with a stable ETag") {
  const std::string text = fixture_pack_text();
  const CalibrationService a(text, {}), b(text, {});
  const auto r = a.handle({"GET", "/pack", "", {}});
  CHECK(r.status == 200);
  CHECK(r.body == text);
  CHECK(r.headers.at("ETag") == "\"" + sha256_hex(text) + "\"");
  CHECK(r.headers.at("ETag") == b.etag());
  CHECK(validate_pack(json::parse(r.body)).empty());

  const auto cached = a.handle({"GET", "/pack", "", {{"if-none-match", a.etag()}}});
  CHECK(cached.status == 304);
  CHECK(cached.body.empty());
  const auto stale = a.handle({"GET", "/pack", "", {{"if-none-match", "\"other\""}}});
  CHECK(stale.status == 200);
}

TEST_CASE("pack file is served byte for byte") {
  const auto path = std::filesystem::temp_directory_path() / "gearcalib_service_pack.json";
  const auto f = testing::pack_fixture(120, false);
  const auto pack = build_pack(f.draws, f.trips, &f.ratios, {"cfg", 3, 0, 0, "trips"});
  save_pack(path, pack);
  const auto svc = CalibrationService::from_file(path, {});
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(svc.handle({"GET", "/pack", "", {}}).body == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS(CalibrationService::from_file(path, {}));
}

TEST_CASE("startup rejects invalid packs") {
  CHECK_THROWS_AS(CalibrationService("not json", {}), PackError);
  json doc = json::parse(fixture_pack_text());
  doc["cameras"]["S"]["slope"][0] = -1.0;
  CHECK_THROWS_AS(CalibrationService(doc.dump(), {}), PackError);
  doc = json::parse(fixture_pack_text());
  doc.erase("provenance");
  CHECK_THROWS_AS(CalibrationService(doc.dump(), {}), PackError);
}

TEST_CASE("POST /calibrate matches the library call exactly") {
  const CalibrationService svc(fixture_pack_text(), {});
  for (Camera c : kCameras)
    for (std::int64_t maxn : {0, 1, 3, 10, 57}) {
      const auto r = svc.handle(post("/calibrate", {{"camera", std::string(1, camera_code(c))}, {"maxn", maxn}}));
      REQUIRE(r.status == 200);
      const auto j = body_of(r);
      const auto lib = apply_calibration(svc.pack().camera(c), maxn);
      CHECK(j["estimate"].get<double>() == lib.estimate);
      CHECK(j["approx_se"].get<double>() == lib.approx_se);
      CHECK(j["calibration_error_context"]["rows"].size() == svc.pack().camera(c).errors.size());
      CHECK(j["calibration_error_context"]["reef_type"].is_null());
    }
}

TEST_CASE("calibration error rows are filtered by reef type") {
  const CalibrationService svc(fixture_pack_text(), {});
  const auto& rows = svc.pack().camera(Camera::S).errors;
  REQUIRE_FALSE(rows.empty());
  const std::string reef = rows.front().reef_type;
  const auto expected = std::count_if(rows.begin(), rows.end(), [&](const ErrorRow& r) { return r.reef_type == reef; });
  const auto j = body_of(svc.handle(post("/calibrate", {{"camera", "S"}, {"maxn", 4}, {"reef_type", reef}})));
  const auto& got = j["calibration_error_context"]["rows"];
  CHECK(static_cast<long>(got.size()) == expected);
  for (const auto& r : got) {
    CHECK(r["reef_type"] == reef);
    CHECK(r["lo"].get<double>() <= r["median"].get<double>());
    CHECK(r["median"].get<double>() <= r["hi"].get<double>());
  }
  const auto none = body_of(svc.handle(post("/calibrate", {{"camera", "S"}, {"maxn", 4}, {"reef_type", "moon base"}})));
  CHECK(none["calibration_error_context"]["rows"].empty());
}

TEST_CASE("identity pack calibrates maxn to itself") {
  const CalibrationService svc(identity_pack_text(), {});
  const auto j = body_of(svc.handle(post("/calibrate", {{"camera", "D"}, {"maxn", 5}})));
  CHECK(j["estimate"].get<double>() == 5.0);
  CHECK(j["approx_se"].get<double>() == 0.0);
}

TEST_CASE("POST /calibrate rejects bad input with 400") {
  const CalibrationService svc(fixture_pack_text(true), {});
  CHECK_FALSE(svc.pack().has_camera(Camera::R));
  const std::vector<json> bad{
      {{"camera", "D"}, {"maxn", -1}},    {{"camera", "D"}, {"maxn", 2.5}}, {{"camera", "X"}, {"maxn", 1}},
      {{"camera", "R"}, {"maxn", 1}},     {{"maxn", 1}},                    {{"camera", "D"}},
      {{"camera", "D"}, {"maxn", "3"}},   {{"camera", 4}, {"maxn", 1}},     json::array({1, 2}),
      {{"camera", "D"}, {"maxn", 1}, {"reef_type", 3}}};
  for (const auto& b : bad) {
    const auto r = svc.handle(post("/calibrate", b));
    CHECK_MESSAGE(r.status == 400, b.dump());
    CHECK(body_of(r).contains("error"));
  }
  const auto r = svc.handle({"POST", "/calibrate", "{not json", {}});
  CHECK(r.status == 400);
  CHECK(svc.handle(post("/calibrate", {{"camera", "D"}, {"maxn", 3.0}})).status == 200);
}

TEST_CASE("POST /predict-ratio matches the library oracle") {
  const CalibrationService svc(fixture_pack_text(), {});
  for (Camera c : kCameras)
    for (std::int64_t maxn : {0, 2, 9})
      for (double cr : {0.0, 0.35, 0.8, 1.0}) {
        const auto r = svc.handle(post("/predict-ratio", {{"camera", std::string(1, camera_code(c))},
                                                          {"maxn", maxn},
                                                          {"camratio", cr}}));
        REQUIRE(r.status == 200);
        const auto j = body_of(r);
        const auto lib = predict_pooled_ratio(svc.pack().paired_model(c), maxn, cr);
        CHECK(j["r_hat"].get<double>() == lib.r_hat);
        CHECK(j["pred_se"].get<double>() == lib.pred_se);
        CHECK(j["flags"]["out_of_range"].get<bool>() == lib.out_of_range);
        CHECK(j["flags"]["extrapolation"].get<bool>() == lib.extrapolation);
        CHECK(j["caveat"] == lib.caveat);
      }
}

TEST_CASE("predict-ratio flags and zero-variance models") {
  const CalibrationService svc(identity_pack_text(), {});
  const auto j = body_of(svc.handle(post("/predict-ratio", {{"camera", "D"}, {"maxn", 3}, {"camratio", 0.5}})));
  CHECK(j["r_hat"].get<double>() == 2.0);
  CHECK(j["pred_se"].get<double>() == 0.0);
  CHECK(j["flags"]["out_of_range"].get<bool>());
}

TEST_CASE("POST /predict-ratio rejects bad input with 400") {
  const CalibrationService svc(fixture_pack_text(), {});
  for (const json& b : std::vector<json>{{{"camera", "D"}, {"maxn", 3}, {"camratio", 2.0}},
                                         {{"camera", "D"}, {"maxn", 3}, {"camratio", -0.1}},
                                         {{"camera", "D"}, {"maxn", -1}, {"camratio", 0.5}},
                                         {{"camera", "D"}, {"maxn", 3}},
                                         {{"camera", "Q"}, {"maxn", 3}, {"camratio", 0.5}}})
    CHECK_MESSAGE(svc.handle(post("/predict-ratio", b)).status == 400, b.dump());

  const auto f = testing::pack_fixture(100, false);
  const CalibrationService unpaired(build_pack(f.draws, f.trips, nullptr, {"cfg", 3, 0, 0, "t"}).dump(), {});
  CHECK(unpaired.handle(post("/predict-ratio", {{"camera", "D"}, {"maxn", 3}, {"camratio", 0.5}})).status == 400);
}

TEST_CASE("routing: unknown paths and wrong methods") {
  const CalibrationService svc(fixture_pack_text(), {});
  CHECK(svc.handle({"GET", "/nope", "", {}}).status == 404);
  CHECK(svc.handle({"POST", "/pack", "", {}}).status == 405);
  const auto r = svc.handle({"GET", "/calibrate", "", {}});
  CHECK(r.status == 405);
  CHECK(r.headers.at("Allow") == "POST, OPTIONS");
}

TEST_CASE("CORS follows the allowlist") {
  const std::string text = fixture_pack_text();
  const CalibrationService svc(text, {"http://widget.local"});
  auto r = svc.handle({"GET", "/pack", "", {{"origin", "http://widget.local"}}});
  CHECK(r.headers.at("Access-Control-Allow-Origin") == "http://widget.local");
  CHECK(r.headers.at("Vary") == "Origin");
  r = svc.handle({"GET", "/pack", "", {{"origin", "http://evil.example"}}});
  CHECK(r.headers.count("Access-Control-Allow-Origin") == 0);
  r = svc.handle({"GET", "/pack", "", {}});
  CHECK(r.headers.count("Access-Control-Allow-Origin") == 0);

  r = svc.handle({"OPTIONS", "/calibrate", "", {{"origin", "http://widget.local"}}});
  CHECK(r.status == 204);
  CHECK(r.headers.at("Access-Control-Allow-Methods") == "POST, OPTIONS");
  CHECK(r.headers.at("Access-Control-Allow-Origin") == "http://widget.local");

  const CalibrationService open(text, {"*"});
  r = open.handle({"GET", "/pack", "", {{"origin", "http://anything"}}});
  CHECK(r.headers.at("Access-Control-Allow-Origin") == "*");
}

TEST_CASE("replaying a request log gives identical responses") {
  const std::string text = fixture_pack_text();
  std::vector<Request> log;
  for (int k = 0; k < 40; ++k) {
    const std::string cam(1, "DSTR"[k % 4]);
    switch (k % 5) {
      case 0: log.push_back({"GET", "/pack", "", {}}); break;
      case 1: log.push_back(post("/calibrate", {{"camera", cam}, {"maxn", k}})); break;
      case 2: log.push_back(post("/predict-ratio", {{"camera", cam}, {"maxn", k}, {"camratio", 0.02 * k}})); break;
      case 3: log.push_back(post("/calibrate", {{"camera", cam}, {"maxn", -k}})); break;
      default: log.push_back(post("/predict-ratio", {{"camera", cam}, {"maxn", 1}, {"camratio", 1.0 + k}})); break;
    }
  }
  const CalibrationService first(text, {});
  std::vector<Response> expected;
  for (const auto& r : log) expected.push_back(first.handle(r));

  const CalibrationService second(text, {});
  for (std::size_t k = log.size(); k-- > 0;) {
    const auto r = second.handle(log[k]);
    CHECK(r.status == expected[k].status);
    CHECK(r.body == expected[k].body);
    CHECK(r.headers == expected[k].headers);
  }

  std::vector<Response> concurrent(log.size());
  std::vector<std::thread> pool;
  for (int w = 0; w < 4; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t k = w; k < log.size(); k += 4) concurrent[k] = first.handle(log[k]);
    });
  for (auto& t : pool) t.join();
  for (std::size_t k = 0; k < log.size(); ++k) CHECK(concurrent[k].body == expected[k].body);
}

TEST_CASE("HTTP server serves the same responses over a socket") {
  const std::string text = fixture_pack_text();
  auto svc = std::make_shared<const CalibrationService>(text, std::vector<std::string>{"http://widget.local"});
  HttpServer server(svc, "127.0.0.1", 0);
  const int port = server.bind();
  REQUIRE(port > 0);
  std::thread th([&] { server.listen(); });

  httplib::Client cli("127.0.0.1", port);
  cli.set_connection_timeout(5);
  auto g = cli.Get("/pack", {{"Origin", "http://widget.local"}});
  REQUIRE(g);
  CHECK(g->status == 200);
  CHECK(g->body == text);
  CHECK(g->get_header_value("ETag") == svc->etag());
  CHECK(g->get_header_value("Access-Control-Allow-Origin") == "http://widget.local");
  CHECK(g->get_header_value("Content-Type") == "application/json");

  const json req{{"camera", "T"}, {"maxn", 6}};
  auto p = cli.Post("/calibrate", req.dump(), "application/json");
  REQUIRE(p);
  CHECK(p->status == 200);
  CHECK(p->body == svc->handle(post("/calibrate", req)).body);

  auto bad = cli.Post("/predict-ratio", json{{"camera", "T"}, {"maxn", 1}, {"camratio", 2}}.dump(), "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto missing = cli.Get("/elsewhere");
  REQUIRE(missing);
  CHECK(missing->status == 404);

  server.stop();
  th.join();
}
