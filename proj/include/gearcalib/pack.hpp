#pragma once

// CalibrationPack: everything the service and the widget need, as one
// versioned JSON document.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gearcalib/calibration.hpp"
#include "gearcalib/ratio.hpp"

namespace gearcalib {

inline constexpr std::string_view kPackFormat = "gearcalib.calibration-pack";
inline constexpr int kPackVersion = 1;

struct PackProvenance {
  std::string model_config_hash;
  std::uint64_t seed = 0;
  std::size_t draw_count = 0;
  std::size_t n_trips = 0;
  std::string trips_hash;  // sha256 of the trips file as written by write_trips
};

/// Thrown by from_json and load_pack when the document breaks the format.
class PackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CalibrationPack {
  PackProvenance provenance;
  std::map<Camera, CameraCalibration> cameras;
  std::map<Camera, RatioRegressionModel> paired;
  AdequacyBlock adequacy;
  std::vector<std::string> warnings;

  bool has_camera(Camera c) const { return cameras.contains(c); }
  /// Throws std::out_of_range for a camera missing from the pack.
  const CameraCalibration& camera(Camera c) const;
  const RatioRegressionModel& paired_model(Camera c) const;

  nlohmann::ordered_json to_json() const;
  /// Compact JSON plus a trailing newline; the exact bytes written to disk.
  std::string dump() const;
  static CalibrationPack from_json(const nlohmann::json& doc);
  static CalibrationPack parse(std::string_view text);
};

/// One calibration-error row as it appears in the pack.
nlohmann::ordered_json error_json(const ErrorRow& row);

/// Structural and invariant checks on a pack document. Empty when valid.
std::vector<std::string> validate_pack(const nlohmann::json& doc);

/// Calibration for every camera observed on >= 3 trips (others become
/// warnings), adequacy block and, when camera ratios are given, the paired
/// ratio regression per camera.
CalibrationPack build_pack(const PosteriorDraws& draws, const std::vector<TripRecord>& trips,
                           const std::vector<std::array<std::optional<double>, kCameraCount>>* camera_ratios,
                           PackProvenance provenance);

void save_pack(const std::filesystem::path& path, const CalibrationPack& pack);
/// Reads and validates; throws PackError listing every violation.
CalibrationPack load_pack(const std::filesystem::path& path);

}  // namespace gearcalib
