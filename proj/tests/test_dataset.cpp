#include <doctest.h>

#include <sstream>

#include "gearcalib/dataset.hpp"
#include "gearcalib/rng.hpp"

using namespace gearcalib;

namespace {

const char* kHeader = "trip_id,boat,reef_size,reef_type,maxn_D,maxn_S,maxn_T,maxn_R,N,N_focal,N_mr,r\n";

std::string design_csv() {
  std::ostringstream o;
  o << kHeader;
  const int cells[4][3] = {{1, 1, 13}, {1, 2, 2}, {2, 1, 4}, {2, 2, 2}};
  int id = 0;
  for (const auto& c : cells)
    for (int k = 0; k < c[2]; ++k)
      o << "t" << ++id << ',' << c[0] << ',' << (c[1] == 1 ? "L" : "small") << ",pyramid,"
        << (id % 5 == 0 ? "NA" : "3") << ",4,5," << (c[0] == 2 ? "" : "2") << ",40,30,"
        << (c[1] == 1 && id % 2 ? "55" : "NA") << ",0.5\n";
  return o.str();
}

SpeciesMaxNTable table(std::vector<SpeciesRow> rows) {
  std::map<std::string, SpeciesFlags> reg{{"gaj", {true, true}},
                                          {"almaco", {false, true}},
                                          {"snapper", {false, false}}};
  return SpeciesMaxNTable(std::move(rows), reg);
}

}  // namespace

TEST_CASE("cell sizes follow file order") {
  std::istringstream in(design_csv());
  const auto trips = parse_trips(in);
  REQUIRE(trips.size() == 21);
  const auto k = cell_sizes(trips);
  CHECK(k[0][0] == 13);
  CHECK(k[0][1] == 2);
  CHECK(k[1][0] == 4);
  CHECK(k[1][1] == 2);
  CHECK(trips[0].replicate == 1);
  CHECK(trips[12].replicate == 13);
  CHECK(trips[13].replicate == 1);
}

TEST_CASE("missing encodings") {
  std::istringstream in(design_csv());
  const auto trips = parse_trips(in);
  CHECK_FALSE(trips[4].maxn[0].has_value());  // "NA"
  CHECK_FALSE(trips[15].maxn[3].has_value());  // empty field
  CHECK(trips[0].maxn[1] == 4);
  CHECK(trips[0].markrecapture == 55);
  CHECK_FALSE(trips[1].markrecapture.has_value());
}

TEST_CASE("empty file and header-only file report no trips") {
  std::istringstream empty("");
  CHECK_THROWS_WITH_AS(parse_trips(empty), doctest::Contains("no trips"), ValidationError);
  std::istringstream header_only(kHeader);
  CHECK_THROWS_WITH_AS(parse_trips(header_only), doctest::Contains("no trips"), ValidationError);
}

TEST_CASE("malformed rows carry line numbers") {
  std::istringstream bad(std::string(kHeader) + "a,1,1,x,1,1,1,1,5,5,NA,0.5\nb,3,1,x,1,1,1,1,5,5,NA,0.5\n");
  try {
    (void)parse_trips(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::istringstream negative(std::string(kHeader) + "a,1,1,x,-1,1,1,1,5,5,NA,0.5\n");
  CHECK_THROWS_AS(parse_trips(negative), ParseError);
  std::istringstream short_row(std::string(kHeader) + "a,1,1,x,1,1\n");
  CHECK_THROWS_AS(parse_trips(short_row), ParseError);
}

TEST_CASE("focal count above total is a validation error") {
  std::istringstream in(std::string(kHeader) + "a,1,1,x,1,1,1,1,5,6,NA,0.5\n");
  CHECK_THROWS_AS(parse_trips(in), ValidationError);
}

TEST_CASE("duplicate trip ids and duplicate indices are rejected") {
  std::istringstream in(std::string(kHeader) + "a,1,1,x,1,1,1,1,5,5,NA,0.5\na,1,1,x,1,1,1,1,5,5,NA,0.5\n");
  CHECK_THROWS_AS(parse_trips(in), ValidationError);
  std::istringstream ok(design_csv());
  auto trips = parse_trips(ok);
  trips[1].replicate = trips[0].replicate;
  CHECK_THROWS_AS(validate_trips(trips), ValidationError);
  trips[1].replicate = 20;
  CHECK_THROWS_AS(validate_trips(trips), ValidationError);
}

TEST_CASE("pooled ratio examples") {
  const auto t = table({{"a", Camera::S, "gaj", 0}, {"a", Camera::S, "almaco", 5},
                        {"b", Camera::D, "gaj", 7}, {"b", Camera::T, "snapper", 3},
                        {"c", Camera::S, "gaj", 3}, {"c", Camera::T, "almaco", 9},
                        {"d", Camera::S, "snapper", 4}});
  CHECK(compute_pooled_ratio(t, "a", {Camera::S}) == 1e-6);
  CHECK(compute_pooled_ratio(t, "b", {Camera::D, Camera::T}) == 1.0 + 1e-6);
  CHECK(compute_pooled_ratio(t, "c", {Camera::S, Camera::T}) == doctest::Approx(0.250001).epsilon(1e-12));
  CHECK_THROWS_WITH_AS(compute_pooled_ratio(t, "d", {Camera::S}),
                       doctest::Contains("no GAJ+ observations"), ValidationError);
}

TEST_CASE("camera ratio examples") {
  const auto t = table({{"a", Camera::T, "gaj", 2}, {"a", Camera::T, "almaco", 2},
                        {"a", Camera::S, "gaj", 0}, {"a", Camera::S, "almaco", 9},
                        {"a", Camera::D, "snapper", 1}});
  CHECK_FALSE(compute_camera_ratio(t, "a", Camera::R).has_value());
  CHECK(*compute_camera_ratio(t, "a", Camera::T) == doctest::Approx(0.500001).epsilon(1e-12));
  CHECK(*compute_camera_ratio(t, "a", Camera::S) == 1e-6);
  CHECK_THROWS_AS(compute_camera_ratio(t, "a", Camera::D), ValidationError);
}

TEST_CASE("registry rejects GAJ species without the GAJ+ flag") {
  std::map<std::string, SpeciesFlags> reg{{"gaj", {true, false}}};
  CHECK_THROWS_AS(SpeciesMaxNTable({}, reg), ValidationError);
}

TEST_CASE("species table rejects duplicate rows") {
  CHECK_THROWS_AS(table({{"a", Camera::T, "gaj", 2}, {"a", Camera::T, "gaj", 3}}), ValidationError);
}

TEST_CASE("property: pooled ratio lies in [1e-6, 1 + 1e-6]; one camera pools to its own ratio") {
  Rng rng(77, 0);
  const char* species[] = {"gaj", "almaco", "snapper"};
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<SpeciesRow> rows;
    for (Camera c : kCameras)
      for (const char* sp : species) {
        const bool forced = c == Camera::S && std::string(sp) == "almaco";
        if (forced) rows.push_back({"t", c, sp, 1 + rng.poisson(2.0)});
        else if (rng.uniform() < 0.7) rows.push_back({"t", c, sp, rng.poisson(3.0)});
      }
    const auto t = table(rows);
    std::set<Camera> present;
    for (Camera c : kCameras)
      if (t.has_rows("t", c)) present.insert(c);
    const double r = compute_pooled_ratio(t, "t", present);
    CHECK(r >= 1e-6);
    CHECK(r <= 1.0 + 1e-6);
    const double rs = compute_pooled_ratio(t, "t", {Camera::S});
    CHECK(rs == *compute_camera_ratio(t, "t", Camera::S));
  }
}

TEST_CASE("species and registry files parse") {
  std::istringstream sp("trip_id,camera,species_id,maxn\na,S,gaj,3\na,S,almaco,9\n");
  std::istringstream reg("species_id,is_gaj,is_gaj_plus\ngaj,1,1\nalmaco,0,1\n");
  const auto t = parse_species_table(sp, reg);
  CHECK(compute_pooled_ratio(t, "a", {Camera::S}) == doctest::Approx(0.250001).epsilon(1e-12));
}

TEST_CASE("property: write then parse round-trips integer fields exactly") {
  Rng rng(5, 0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<TripRecord> trips;
    const int n = 1 + static_cast<int>(rng.uniform() * 30);
    for (int s = 0; s < n; ++s) {
      TripRecord t;
      t.trip_id = "trip" + std::to_string(s);
      t.boat = rng.uniform() < 0.5 ? 1 : 2;
      t.reef_size = rng.uniform() < 0.5 ? 1 : 2;
      for (auto& m : t.maxn)
        if (rng.uniform() < 0.8) m = rng.poisson(1e3 * rng.uniform());
      t.acoustic_total = rng.poisson(5e4 * rng.uniform());
      t.acoustic_focal = rng.binomial(t.acoustic_total, 0.6);
      if (rng.uniform() < 0.3) t.markrecapture = rng.poisson(200);
      t.pooled_ratio = 1e-6 + rng.uniform();
      t.reef_type = "reef";
      trips.push_back(t);
    }
    assign_replicates(trips);
    std::stringstream io;
    write_trips(io, trips);
    const auto back = parse_trips(io);
    REQUIRE(back.size() == trips.size());
    for (std::size_t s = 0; s < trips.size(); ++s) {
      CHECK(back[s].trip_id == trips[s].trip_id);
      CHECK(back[s].boat == trips[s].boat);
      CHECK(back[s].reef_size == trips[s].reef_size);
      CHECK(back[s].replicate == trips[s].replicate);
      CHECK(back[s].maxn == trips[s].maxn);
      CHECK(back[s].acoustic_total == trips[s].acoustic_total);
      CHECK(back[s].acoustic_focal == trips[s].acoustic_focal);
      CHECK(back[s].markrecapture == trips[s].markrecapture);
      CHECK(back[s].pooled_ratio == trips[s].pooled_ratio);
    }
  }
}
