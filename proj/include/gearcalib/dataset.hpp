#pragma once

// Calibration-experiment data: one record per boat trip plus the long-format
// per-species MaxN table used to build GAJ:GAJ+ ratios.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gearcalib {

/// Camera gear types: drop, stereo baited RUV, trap, remotely operated vehicle.
enum class Camera : std::uint8_t { D = 0, S = 1, T = 2, R = 3 };
inline constexpr int kCameraCount = 4;
inline constexpr std::array<Camera, kCameraCount> kCameras{Camera::D, Camera::S, Camera::T,
                                                           Camera::R};

char camera_code(Camera c);
Camera parse_camera(std::string_view s);  // "D", "S", "T", "R"
inline int index_of(Camera c) { return static_cast<int>(c); }

/// Shift added to every GAJ:GAJ+ ratio so that log(r) is finite.
inline constexpr double kRatioShift = 1e-6;

/// Malformed input (bad field, bad header); carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + (line ? " (line " + std::to_string(line) + ")" : "")),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Semantically invalid data (duplicates, N_focal > N, missing ratio, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Count = std::optional<std::int64_t>;

struct TripRecord {
  std::string trip_id;
  int boat = 1;       // i in {1, 2}
  int reef_size = 1;  // j: 1 = large, 2 = small
  int replicate = 0;  // k, 1..K_ij in file order within (i, j)
  std::array<Count, kCameraCount> maxn{};
  std::int64_t acoustic_total = 0;  // N, all transects
  std::int64_t acoustic_focal = 0;  // N_f <= N
  Count markrecapture;              // Lincoln-Petersen estimate
  double pooled_ratio = 1.0 + kRatioShift;
  std::string reef_type;  // display only

  bool observed(Camera c) const { return maxn[index_of(c)].has_value(); }
  std::set<Camera> present_cameras() const;
};

struct SpeciesRow {
  std::string trip_id;
  Camera camera;
  std::string species_id;
  std::int64_t maxn = 0;
};

struct SpeciesFlags {
  bool is_gaj = false;
  bool is_gaj_plus = false;
};

class SpeciesMaxNTable {
 public:
  SpeciesMaxNTable(std::vector<SpeciesRow> rows, std::map<std::string, SpeciesFlags> registry);

  const std::vector<SpeciesRow>& rows() const { return rows_; }
  const std::map<std::string, SpeciesFlags>& registry() const { return registry_; }

  /// (GAJ MaxN, GAJ+ MaxN) summed over the given trip and cameras.
  std::pair<std::int64_t, std::int64_t> sums(std::string_view trip_id,
                                            const std::set<Camera>& cameras) const;
  bool has_rows(std::string_view trip_id, Camera camera) const;

 private:
  std::vector<SpeciesRow> rows_;
  std::map<std::string, SpeciesFlags> registry_;
};

/// Pooled GAJ:GAJ+ ratio over the cameras present on a trip, plus the shift.
/// Throws ValidationError("no GAJ+ observations") when the denominator is zero.
double compute_pooled_ratio(const SpeciesMaxNTable& table, std::string_view trip_id,
                            const std::set<Camera>& present_cameras);

/// Single-camera ratio plus the shift; nullopt when the camera is absent.
std::optional<double> compute_camera_ratio(const SpeciesMaxNTable& table,
                                           std::string_view trip_id, Camera camera);

/// Camera ratios for every trip and camera (absent cameras are nullopt).
std::vector<std::array<std::optional<double>, kCameraCount>> compute_camera_ratios(
    const SpeciesMaxNTable& table, const std::vector<TripRecord>& trips);

/// Reads trips.csv. Missing values are empty fields or "NA". Replicate
/// indices are assigned in file order within each (boat, reef size) cell.
/// The optional `r` column may be blank when a species table will fill it.
std::vector<TripRecord> load_trips(const std::filesystem::path& path);
std::vector<TripRecord> parse_trips(std::istream& in);

/// Fills pooled_ratio on every trip from the species table.
void attach_pooled_ratios(std::vector<TripRecord>& trips, const SpeciesMaxNTable& table);

SpeciesMaxNTable load_species_table(const std::filesystem::path& species_csv,
                                    const std::filesystem::path& registry_csv);
SpeciesMaxNTable parse_species_table(std::istream& species, std::istream& registry);

/// Sets k to 1..K_ij in vector order within each (boat, reef size) cell.
void assign_replicates(std::vector<TripRecord>& trips);

/// Checks unique ids and (i, j, k), gap-free replicates, N_f <= N and ratio range.
void validate_trips(const std::vector<TripRecord>& trips);

void write_trips(std::ostream& out, const std::vector<TripRecord>& trips);
void save_trips(const std::filesystem::path& path, const std::vector<TripRecord>& trips);

/// K_ij, indexed [boat - 1][reef_size - 1].
std::array<std::array<int, 2>, 2> cell_sizes(const std::vector<TripRecord>& trips);

}  // namespace gearcalib
