#include <gtest/gtest.h>

#include <fstream>

#include "sourcenet/sourcenet.hpp"

using namespace sourcenet;

namespace {

std::string data_path(const std::string& name) { return std::string(SOURCENET_DATA_DIR) + "/" + name; }

nlohmann::json desk_json() {
  std::ifstream in(data_path("desk.json"));
  return nlohmann::json::parse(in);
}

GenContext desk_context(std::uint64_t seed) {
  GenContext ctx;
  ctx.cfg = parse_run_config(desk_json());
  ctx.cfg.seed = seed;
  ctx.stations = load_stations(data_path("stations.txt"));
  ctx.base = load_velocity_model(data_path("socal_base.vel"));
  ctx.library = training_library(ctx.cfg, ctx.base);
  ctx.noise = synthetic_noise(seed);
  return ctx;
}

std::vector<char> bytes(const std::vector<EventRecord>& r) { return encode_container({ContainerKind::Dataset, r}); }

}  // namespace

TEST(Config, BundledPresetsParse) {
  const auto c = load_run_config(data_path("desk.json"));
  EXPECT_EQ(c.model.d_model, 64);
  EXPECT_EQ(c.stations.n_min, 30u);
  EXPECT_EQ(c.stations.n_max, 50u);
  EXPECT_NO_THROW(load_run_config(data_path("paper.json")));
  // Serialized form parses back to the same document.
  EXPECT_EQ(run_config_json(parse_run_config(run_config_json(c))), run_config_json(c));
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  auto j = desk_json();
  j["bogus"] = 1;
  EXPECT_THROW(parse_run_config(j), ConfigError);
  j = desk_json();
  j["model"]["d_modle"] = 8;
  EXPECT_THROW(parse_run_config(j), ConfigError);
  j = desk_json();
  j["train"]["pretrain"]["lr"] = -1.0;
  EXPECT_THROW(parse_run_config(j), ConfigError);
  j = desk_json();
  j["region"]["mw"] = {5.0, 3.0};
  EXPECT_THROW(parse_run_config(j), ConfigError);
  j = desk_json();
  j["stations"]["n_range"] = {50, 30};
  EXPECT_THROW(parse_run_config(j), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/cfg.json"), IoError);
}

TEST(Stations, ParseAndErrors) {
  const auto s = parse_stations("# header\nA 34.0 -117.5\n\nB 33.5 -118.0  # trailing\n");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[1].name, "B");
  EXPECT_DOUBLE_EQ(s[1].lon, -118.0);
  try {
    parse_stations("A 34 -117\nB 34\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(parse_stations("A 95 0\n"), ParseError);
  EXPECT_THROW(parse_stations("# nothing\n"), ParseError);
  EXPECT_GT(load_stations(data_path("stations.txt")).size(), 50u);
}

TEST(Gen, SerialAndParallelAreByteIdentical) {
  const auto ctx = desk_context(7);
  GenStats st;
  const auto serial = generate_dataset(ctx, 24, Domain::Synthetic, 1, &st);
  const auto threaded = generate_dataset(ctx, 24, Domain::Synthetic, 3);
  EXPECT_EQ(bytes(serial), bytes(threaded));
  EXPECT_EQ(bytes(generate_dataset(ctx, 24, Domain::Synthetic, 1)), bytes(serial));
  EXPECT_NE(bytes(generate_dataset(desk_context(8), 24, Domain::Synthetic, 1)), bytes(serial));
  std::size_t hist = 0;
  for (const auto& [k, v] : st.station_hist) hist += v;
  EXPECT_EQ(hist, 24u);
  EXPECT_EQ(serial[3].id, event_id(Domain::Synthetic, 3));
}

TEST(Gen, StationCountsFollowSubsampleRule) {
  auto ctx = desk_context(11);
  ctx.cfg.psdr.keep_prob = {1.0, 1.0};  // every station in range is a candidate
  const auto recs = generate_dataset(ctx, 30, Domain::Synthetic);
  std::size_t large = 0;
  for (const auto& r : recs) {
    const EventGeom g{r.lat, r.lon, r.depth_km};
    std::size_t near = 0;
    for (const auto& s : ctx.stations)
      if (geo_to_local(g, s).dist_km <= ctx.cfg.stations.max_dist_km) ++near;
    EXPECT_GE(r.stations.size(), 5u) << r.id;
    EXPECT_LE(r.stations.size(), 50u) << r.id;
    if (near > 50) {
      ++large;
      EXPECT_GE(r.stations.size(), 30u) << r.id;
    }
  }
  EXPECT_GT(large, 0u);

  // Default keep probabilities still respect the floor and the cap.
  for (const auto& r : generate_dataset(desk_context(12), 30, Domain::PseudoReal)) {
    EXPECT_GE(r.stations.size(), 5u);
    EXPECT_LE(r.stations.size(), 50u);
    EXPECT_EQ(r.domain, Domain::PseudoReal);
  }
}

TEST(Catalog, ParseAndApply) {
  const auto ctx = desk_context(3);
  auto recs = generate_dataset(ctx, 2, Domain::Synthetic);
  const std::string line = R"({"id": ")" + recs[1].id +
                           R"(", "lat": 34.1, "lon": -117.2, "depth_km": 8.5, "mw": 4.2, "mt": [0, 0, 0, 1e15, 0, 0]})";
  const auto cat = parse_catalog("\n" + line + "\n" + R"({"id": "other", "lat": 0, "lon": 0, "depth_km": 1, "mw": 3, "mt": [1, -1, 0, 0, 0, 0]})");
  ASSERT_EQ(cat.size(), 2u);
  EXPECT_EQ(apply_catalog(recs, cat), 1u);
  EXPECT_EQ(recs[1].domain, Domain::Real);
  EXPECT_NE(recs[0].domain, Domain::Real);
  EXPECT_FLOAT_EQ(recs[1].label[5], 4.2f);
  EXPECT_FLOAT_EQ(recs[1].depth_km, 8.5f);
  try {
    parse_catalog(line + "\n{\"id\": 3}\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  auto bad = cat;
  bad[0].stations = {{"X", 34, -117}};
  EXPECT_THROW(apply_catalog(recs, bad), InvariantError);
}
