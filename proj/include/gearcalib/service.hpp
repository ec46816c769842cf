#pragma once

// Read-only HTTP facade over one CalibrationPack.
//
//   GET  /pack            the pack file, byte for byte, with a sha256 ETag
//   POST /calibrate       {camera, maxn, reef_type?}
//   POST /predict-ratio   {camera, maxn, camratio}
//
// Request handling is a pure function of (pack, request); the HTTP server
// only adapts cpp-httplib requests to Request and back.

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gearcalib/pack.hpp"

namespace gearcalib {

struct ServiceConfig {
  std::filesystem::path pack_path;
  std::string bind_address = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  /// Origins allowed to read responses; "*" allows any origin.
  std::vector<std::string> cors_allowlist;
};

struct Request {
  std::string method;
  std::string path;
  std::string body;
  std::map<std::string, std::string> headers;  // lower-case names
};

struct Response {
  int status = 200;
  std::string body;
  std::map<std::string, std::string> headers;
};

class CalibrationService {
 public:
  /// Parses and validates the pack bytes; throws PackError on any violation.
  CalibrationService(std::string pack_bytes, std::vector<std::string> cors_allowlist);
  static CalibrationService from_file(const std::filesystem::path& path, std::vector<std::string> cors_allowlist);

  Response handle(const Request& request) const;

  const CalibrationPack& pack() const { return pack_; }
  const std::string& etag() const { return etag_; }

 private:
  Response get_pack(const Request& request) const;
  Response calibrate(const Request& request) const;
  Response predict_ratio(const Request& request) const;
  void add_cors(const Request& request, Response& response) const;

  std::string bytes_;
  std::string etag_;
  CalibrationPack pack_;
  std::vector<std::string> cors_;
};

/// Blocking HTTP/1.1 server around a CalibrationService.
class HttpServer {
 public:
  HttpServer(std::shared_ptr<const CalibrationService> service, std::string bind_address, int port);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds the socket; returns the bound port. Throws std::runtime_error.
  int bind();
  /// Serves until stop() is called. bind() must have succeeded.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gearcalib
