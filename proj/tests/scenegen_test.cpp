#include <gtest/gtest.h>

#include <filesystem>

#include "sagdrive/geometry.hpp"
#include "sagdrive/scenegen.hpp"

using namespace sagdrive;

namespace {

// Minimal hand-built world: fully drivable map, straight centerline, straight
// ground-truth path at 1.5 m per waypoint.
Scenario blank_scenario() {
  Scenario sc;
  std::fill(sc.map.grid.begin(), sc.map.grid.end(), 1);
  sc.map.lane_centerline = Polyline({{-20.0, 0.0}, {24.0, 0.0}});
  sc.ego.speed = 3.0;
  for (int w = 0; w < Trajectory::kNumWaypoints; ++w)
    sc.gt_trajectory.waypoints[static_cast<size_t>(w)] = {1.5 * (w + 1), 0.0, 0.0};
  const auto& last = sc.gt_trajectory.waypoints.back();
  sc.gt_goal = {{last.x, last.y}, last.heading};
  sc.history.assign(kHistoryLen, EgoState{});
  return sc;
}

}  // namespace

TEST(Geometry, ObbOverlapIsStrict) {
  Obb a{{0.0, 0.0}, 0.0, 4.5, 2.0};
  Obb tangent{{4.51, 0.0}, 0.0, 4.5, 2.0};  // 0.01 m gap
  Obb touching{{4.5, 0.0}, 0.0, 4.5, 2.0};  // exact touch
  Obb overlap{{4.49, 0.0}, 0.0, 4.5, 2.0};  // 0.01 m overlap
  EXPECT_FALSE(obb_overlap(a, tangent));
  EXPECT_FALSE(obb_overlap(a, touching));
  EXPECT_TRUE(obb_overlap(a, overlap));
  Obb rotated{{3.0, 1.0}, M_PI / 4.0, 4.0, 2.0};
  EXPECT_TRUE(obb_overlap(a, rotated));
}

TEST(Geometry, WrapAngle) {
  EXPECT_NEAR(wrap_angle(3.0 * M_PI), M_PI, 1e-12);
  EXPECT_NEAR(wrap_angle(-M_PI), M_PI, 1e-12);
  EXPECT_NEAR(wrap_angle(0.3), 0.3, 1e-12);
}

TEST(Geometry, PolylineProjection) {
  Polyline line({{0.0, 0.0}, {10.0, 0.0}});
  auto pr = line.project({3.0, 2.0});
  EXPECT_NEAR(pr.s, 3.0, 1e-12);
  EXPECT_NEAR(pr.distance, 2.0, 1e-12);
  EXPECT_NEAR(line.point_at(7.5).x, 7.5, 1e-12);
}

TEST(SceneGen, DeterministicBytes) {
  GenConfig cfg;
  Scenario a = generate_scenario(7, cfg);
  Scenario b = generate_scenario(7, cfg);
  EXPECT_EQ(scenario_bytes(a), scenario_bytes(b));
  EXPECT_EQ(a, b);
}

TEST(SceneGen, EmptyAgentRange) {
  GenConfig cfg;
  cfg.agent_count_max = 0;
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    Scenario sc = generate_scenario(seed, cfg);
    EXPECT_TRUE(sc.agents.empty());
    EXPECT_TRUE(validate_feasibility(sc).ok);
  }
}

TEST(SceneGen, InfeasibleConfigRejected) {
  GenConfig cfg;
  cfg.road_half_width = 0.1;  // degenerate drivable area
  try {
    generate_scenario(1, cfg);
    FAIL() << "expected config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("drivable"), std::string::npos);
  }
  GenConfig bad_agents;
  bad_agents.agent_count_min = 5;
  bad_agents.agent_count_max = 2;
  EXPECT_THROW(generate_scenario(1, bad_agents), ConfigError);
}

TEST(SceneGen, FeasibilityOverSeeds) {
  GenConfig cfg;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    Scenario sc = generate_scenario(seed, cfg);
    FeasibilityReport rep = validate_feasibility(sc);
    EXPECT_TRUE(rep.ok) << "seed " << seed << ": " << rep.reason;
    EXPECT_EQ(sc.history.size(), static_cast<size_t>(kHistoryLen));
    EXPECT_GE(sc.ego.speed, 0.0);
    EXPECT_TRUE(sc.map.drivable_at({0.0, 0.0}));
    EXPECT_LE(static_cast<int>(sc.agents.size()), cfg.agent_count_max);
  }
}

TEST(SceneGen, GoalEqualsLastWaypointExactly) {
  GenConfig cfg;
  for (uint64_t seed = 10; seed < 40; ++seed) {
    Scenario sc = generate_scenario(seed, cfg);
    const auto& last = sc.gt_trajectory.waypoints.back();
    EXPECT_EQ(sc.gt_goal.position.x, last.x);
    EXPECT_EQ(sc.gt_goal.position.y, last.y);
    EXPECT_EQ(sc.gt_goal.heading, last.heading);
  }
}

TEST(SceneGen, CenterlineInsideDrivableCells) {
  GenConfig cfg;
  for (uint64_t seed = 50; seed < 70; ++seed) {
    Scenario sc = generate_scenario(seed, cfg);
    for (Vec2 p : sc.map.lane_centerline.points()) {
      if (std::abs(p.x) >= GridFrame::kHalfExtent || std::abs(p.y) >= GridFrame::kHalfExtent)
        continue;
      EXPECT_TRUE(sc.map.drivable_at(p)) << "seed " << seed;
    }
  }
}

TEST(Rasterize, EmptySceneAllFree) {
  Scenario sc = blank_scenario();
  OccupancyGrid occ = rasterize_occupancy(sc, TimePoint::kCurrent);
  EXPECT_EQ(occ.count(), 0);
}

TEST(Rasterize, AxisAlignedVehicleCoversExactBlock) {
  Scenario sc = blank_scenario();
  ScriptedAgent agent;
  agent.box.center = {5.0, 0.0};
  agent.box.heading = 0.0;
  agent.box.length = 4.0;
  agent.box.width = 2.0;
  agent.box.cls = AgentClass::kVehicle;
  sc.agents.push_back(agent);
  OccupancyGrid occ = rasterize_occupancy(sc, TimePoint::kCurrent);
  // x in (3,7) -> cols 38..45; y in (-1,1) -> rows 30..33
  int64_t expected = 0;
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j < GridFrame::kSize; ++j) {
      bool inside = (i >= 30 && i <= 33 && j >= 38 && j <= 45);
      EXPECT_EQ(occ.at(i, j), inside ? 1 : 0) << "cell " << i << "," << j;
      expected += inside;
    }
  EXPECT_EQ(occ.count(), expected);
}

TEST(Rasterize, MovingAgentShiftsByDisplacement) {
  Scenario sc = blank_scenario();
  ScriptedAgent agent;
  agent.box.center = {3.0, 2.0};
  agent.box.length = 4.0;
  agent.box.width = 2.0;
  agent.box.velocity = {1.0, 0.0};  // 4 m over the horizon = 8 cells
  sc.agents.push_back(agent);
  OccupancyGrid now = rasterize_occupancy(sc, TimePoint::kCurrent);
  OccupancyGrid later = rasterize_occupancy(sc, TimePoint::kFuture);
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j + 8 < GridFrame::kSize; ++j)
      EXPECT_EQ(now.at(i, j), later.at(i, j + 8));
}

TEST(SafetyCritical, BehindExcludedAheadIncluded) {
  Scenario sc = blank_scenario();
  ScriptedAgent behind;
  behind.box = AgentBox{{-5.0, 0.0}, 0.0, 4.0, 2.0, {0.0, 0.0}, AgentClass::kVehicle};
  ScriptedAgent ahead;
  ahead.box = AgentBox{{3.0, 0.0}, 0.0, 4.0, 2.0, {0.0, 0.0}, AgentClass::kVehicle};
  sc.agents = {behind, ahead};
  auto picked = select_safety_critical_agents(sc, TimePoint::kCurrent, 8);
  ASSERT_EQ(picked.size(), 1u);
  EXPECT_EQ(picked[0].center.x, 3.0);
}

TEST(SafetyCritical, MatchesBruteForceFilter) {
  GenConfig cfg;
  for (uint64_t seed = 100; seed < 300; ++seed) {
    Scenario sc = generate_scenario(seed, cfg);
    for (TimePoint tp : {TimePoint::kCurrent, TimePoint::kFuture}) {
      double tau = tp == TimePoint::kCurrent ? 0.0 : kFutureHorizon;
      Polyline path = trajectory_polyline(sc.gt_trajectory);
      std::vector<std::pair<double, AgentBox>> oracle;
      for (const ScriptedAgent& agent : sc.agents) {
        AgentBox b = agent_box_at(agent, tau);
        double d = b.center.norm();
        bool in_frustum = d <= 1e-9 || std::abs(std::atan2(b.center.y, b.center.x)) <= M_PI / 3.0;
        bool near_path = path.project(b.center).distance <= 8.0;
        if (in_frustum && near_path) oracle.emplace_back(d, b);
      }
      std::stable_sort(oracle.begin(), oracle.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      if (oracle.size() > 8) oracle.resize(8);
      auto picked = select_safety_critical_agents(sc, tp, 8);
      ASSERT_EQ(picked.size(), oracle.size()) << "seed " << seed;
      for (size_t i = 0; i < picked.size(); ++i)
        EXPECT_EQ(picked[i], oracle[i].second) << "seed " << seed;
    }
  }
}

TEST(Prompt, CommandChangesOnlyTokenZero) {
  GenConfig cfg;
  Scenario sc = generate_scenario(11, cfg);
  Scenario other = sc;
  other.command = sc.command == Command::kLeft ? Command::kRight : Command::kLeft;
  PromptTokens a = encode_prompt(sc);
  PromptTokens b = encode_prompt(other);
  EXPECT_NE(a.command_id, b.command_id);
  EXPECT_EQ(a.speed_bin, b.speed_bin);
  EXPECT_EQ(a.accel_bin, b.accel_bin);
  EXPECT_EQ(a.patch_features.data, b.patch_features.data);
}

TEST(Prompt, DeterministicAndQuantized) {
  GenConfig cfg;
  Scenario sc = generate_scenario(12, cfg);
  EXPECT_EQ(encode_prompt(sc), encode_prompt(sc));
  sc.ego.speed = 3.2;
  EXPECT_EQ(encode_prompt(sc).speed_bin, 6);
}

TEST(Dataset, RoundTrip) {
  GenConfig cfg;
  std::vector<Scenario> scenarios;
  for (uint64_t seed = 400; seed < 500; ++seed) scenarios.push_back(generate_scenario(seed, cfg));
  std::string path = (std::filesystem::temp_directory_path() / "sag_ds_test.sgds").string();
  write_dataset(scenarios, path);
  std::vector<Scenario> loaded = read_dataset(path);
  ASSERT_EQ(loaded.size(), scenarios.size());
  for (size_t i = 0; i < loaded.size(); ++i) EXPECT_EQ(loaded[i], scenarios[i]);
  std::filesystem::remove(path);
}

TEST(Dataset, CorruptedMagicRejected) {
  std::string path = (std::filesystem::temp_directory_path() / "sag_ds_bad.sgds").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "XXXXX";
    binio::write_u32(os, 1);
    binio::write_u64(os, 0);
  }
  EXPECT_THROW(read_dataset(path), DataError);
  std::filesystem::remove(path);
}

TEST(Dataset, VersionMismatchRejected) {
  std::string path = (std::filesystem::temp_directory_path() / "sag_ds_ver.sgds").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "SGDS1";
    binio::write_u32(os, 99);  // future version
    binio::write_u64(os, 0);
  }
  try {
    read_dataset(path);
    FAIL() << "expected version error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Dataset, TruncatedFileRejected) {
  GenConfig cfg;
  std::vector<Scenario> scenarios{generate_scenario(1, cfg), generate_scenario(2, cfg)};
  std::string path = (std::filesystem::temp_directory_path() / "sag_ds_trunc.sgds").string();
  write_dataset(scenarios, path);
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 64);
  EXPECT_THROW(read_dataset(path), DataError);
  std::filesystem::remove(path);
}

TEST(Dataset, SizeGrowsLinearly) {
  GenConfig cfg;
  std::vector<Scenario> scenarios;
  for (uint64_t seed = 600; seed < 660; ++seed) scenarios.push_back(generate_scenario(seed, cfg));
  auto tmp = std::filesystem::temp_directory_path();
  std::string half = (tmp / "sag_ds_half.sgds").string();
  std::string full = (tmp / "sag_ds_full.sgds").string();
  write_dataset({scenarios.begin(), scenarios.begin() + 30}, half);
  write_dataset(scenarios, full);
  double ratio = static_cast<double>(std::filesystem::file_size(full)) /
                 static_cast<double>(std::filesystem::file_size(half));
  EXPECT_GE(ratio, 1.8);
  EXPECT_LE(ratio, 2.2);
  std::filesystem::remove(half);
  std::filesystem::remove(full);
}
