#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sagdrive/binio.hpp"
#include "sagdrive/errors.hpp"
#include "sagdrive/geometry.hpp"
#include "sagdrive/rng.hpp"
#include "sagdrive/tensor.hpp"

namespace sagdrive {

// ---------------------------------------------------------------------------
// Domain types. Everything lives in the ego frame at time t: x forward,
// y left, ego at the origin with heading 0.
// ---------------------------------------------------------------------------

enum class Command : uint8_t { kStraight = 0, kLeft = 1, kRight = 2 };
enum class AgentClass : uint8_t { kVehicle = 0, kPedestrian = 1, kCyclist = 2 };
enum class LightState : uint8_t { kRed = 0, kGreen = 1 };

struct EgoState {
  Vec2 position;
  double heading = 0.0;
  double speed = 0.0;
  double accel = 0.0;
  bool operator==(const EgoState&) const = default;
};

struct AgentBox {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;  // along heading; length >= width > 0
  double width = 0.0;
  Vec2 velocity;
  AgentClass cls = AgentClass::kVehicle;

  Obb obb() const { return Obb{center, heading, length, width}; }
  bool operator==(const AgentBox&) const = default;
};

// Piecewise kinematic script: constant velocity, optionally braking to a
// stop at a fixed rate from brake_time onward.
struct AgentMotion {
  double brake_time = -1.0;  // < 0 means never brakes
  double brake_decel = 0.0;
  bool operator==(const AgentMotion&) const = default;
};

struct ScriptedAgent {
  AgentBox box;
  AgentMotion motion;
  bool operator==(const ScriptedAgent&) const = default;
};

struct TrafficLight {
  Vec2 stop_position;  // stop line center, on the lane centerline
  LightState state = LightState::kGreen;
  bool operator==(const TrafficLight&) const = default;
};

// 64x64 boolean BEV raster over a 32 m window centered on the ego at t.
struct GridFrame {
  static constexpr int kSize = 64;
  static constexpr double kResolution = 0.5;
  static constexpr double kHalfExtent = 16.0;

  static int cell_of(double coord) {
    double c = (coord + kHalfExtent) / kResolution;
    if (c < 0.0 || c >= kSize) return -1;
    return static_cast<int>(c);
  }
  static double cell_center(int idx) { return -kHalfExtent + kResolution * (idx + 0.5); }
};

struct DrivableMap {
  std::vector<uint8_t> grid;  // row-major [y][x], 1 = drivable
  Polyline lane_centerline;
  std::optional<TrafficLight> traffic_light;

  DrivableMap() : grid(GridFrame::kSize * GridFrame::kSize, 0) {}

  bool drivable_at(Vec2 p) const {
    int j = GridFrame::cell_of(p.x), i = GridFrame::cell_of(p.y);
    if (i < 0 || j < 0) return false;
    return grid[static_cast<size_t>(i * GridFrame::kSize + j)] != 0;
  }
  bool operator==(const DrivableMap&) const = default;
};

struct OccupancyGrid {
  std::vector<uint8_t> grid;  // row-major [y][x], 1 = occupied
  OccupancyGrid() : grid(GridFrame::kSize * GridFrame::kSize, 0) {}

  uint8_t& at(int i, int j) { return grid[static_cast<size_t>(i * GridFrame::kSize + j)]; }
  uint8_t at(int i, int j) const { return grid[static_cast<size_t>(i * GridFrame::kSize + j)]; }
  int64_t count() const {
    int64_t n = 0;
    for (uint8_t v : grid) n += v;
    return n;
  }
  bool operator==(const OccupancyGrid&) const = default;
};

struct GoalPose {
  Vec2 position;
  double heading = 0.0;
  bool operator==(const GoalPose&) const = default;
};

struct Trajectory {
  static constexpr int kNumWaypoints = 8;
  static constexpr double kDt = 0.5;  // 4 s horizon

  struct Waypoint {
    double x = 0.0, y = 0.0, heading = 0.0;
    bool operator==(const Waypoint&) const = default;
  };
  std::array<Waypoint, kNumWaypoints> waypoints;
  bool operator==(const Trajectory&) const = default;
};

enum class TimePoint : uint8_t { kCurrent = 0, kFuture = 1 };
constexpr double kFutureHorizon = 4.0;  // n, seconds
constexpr int kHistoryLen = 4;          // K past ego states at 0.5 s

struct Scenario {
  uint64_t seed = 0;
  DrivableMap map;
  Command command = Command::kStraight;
  EgoState ego;                    // state at t
  std::vector<EgoState> history;   // K strictly-past states, oldest first
  std::vector<ScriptedAgent> agents;
  Trajectory gt_trajectory;
  GoalPose gt_goal;
  OccupancyGrid gt_occ_t;
  OccupancyGrid gt_occ_future;
  std::vector<AgentBox> gt_agents_t;
  std::vector<AgentBox> gt_agents_future;
  bool operator==(const Scenario&) const = default;
};

enum class Family : uint8_t {
  kStraightFollow = 0,
  kLeftTurn = 1,
  kRightTurn = 2,
  kLeadBrake = 3,
  kCrossingPedestrian = 4,
};

struct GenConfig {
  int agent_count_min = 0;
  int agent_count_max = 6;
  double ego_speed_min = 1.5;
  double ego_speed_max = 3.2;
  double vehicle_speed_min = 0.5;
  double vehicle_speed_max = 3.0;
  double pedestrian_speed_min = 0.4;
  double pedestrian_speed_max = 1.4;
  double cyclist_speed_min = 1.0;
  double cyclist_speed_max = 3.0;
  // straight-follow, left turn, right turn, lead-brake, crossing pedestrian
  std::array<double, 5> family_mix = {0.20, 0.175, 0.175, 0.30, 0.15};
  double traffic_light_prob = 0.2;
  double red_light_prob = 0.35;
  double road_half_width = 3.0;
  double yield_crossing_prob = 0.45;  // crossing scenes where the plan must brake

  void validate() const {
    if (agent_count_min < 0 || agent_count_max < agent_count_min)
      throw ConfigError("gen config: agent count range [" + std::to_string(agent_count_min) +
                        "," + std::to_string(agent_count_max) + "] is invalid");
    if (ego_speed_min <= 0.0 || ego_speed_max < ego_speed_min || ego_speed_max > 3.5)
      throw ConfigError("gen config: ego speed range must satisfy 0 < min <= max <= 3.5 m/s "
                        "(the 32 m window must contain 4 s of motion)");
    double mix_sum = 0.0;
    for (double w : family_mix) {
      if (w < 0.0) throw ConfigError("gen config: family mix weights must be non-negative");
      mix_sum += w;
    }
    if (mix_sum <= 0.0) throw ConfigError("gen config: family mix weights sum to zero");
    if (road_half_width < 2.5 || road_half_width > 8.0)
      throw ConfigError("gen config: road half width out of range [2.5, 8] (zero or degenerate "
                        "drivable area)");
  }
};

// ---------------------------------------------------------------------------
// Scripted kinematics
// ---------------------------------------------------------------------------

inline AgentBox agent_box_at(const ScriptedAgent& agent, double tau) {
  AgentBox b = agent.box;
  double speed = b.velocity.norm();
  if (speed < 1e-12 || tau <= 0.0) return b;
  Vec2 dir = b.velocity * (1.0 / speed);
  const AgentMotion& m = agent.motion;
  if (m.brake_time < 0.0 || tau <= m.brake_time) {
    double run = (m.brake_time < 0.0) ? tau : std::min(tau, m.brake_time);
    (void)run;
    b.center = b.center + dir * (speed * tau);
    return b;
  }
  double s = speed * m.brake_time;
  double t2 = tau - m.brake_time;
  double t_stop = m.brake_decel > 0.0 ? speed / m.brake_decel : 1e18;
  double tc = std::min(t2, t_stop);
  s += speed * tc - 0.5 * m.brake_decel * tc * tc;
  double v_now = std::max(0.0, speed - m.brake_decel * tc);
  b.center = b.center + dir * s;
  b.velocity = dir * v_now;
  return b;
}

// ---------------------------------------------------------------------------
// Occupancy rasterization: a cell is occupied iff it has positive-area
// overlap with some agent rectangle at that time, or is non-drivable
// static structure.
// ---------------------------------------------------------------------------

inline OccupancyGrid rasterize_occupancy(const Scenario& sc, TimePoint time) {
  OccupancyGrid occ;
  constexpr int n = GridFrame::kSize;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      occ.at(i, j) = sc.map.grid[static_cast<size_t>(i * n + j)] ? 0 : 1;

  double tau = time == TimePoint::kCurrent ? 0.0 : kFutureHorizon;
  for (const ScriptedAgent& agent : sc.agents) {
    AgentBox b = agent_box_at(agent, tau);
    Obb obb = b.obb();
    double reach = 0.5 * std::hypot(b.length, b.width);
    int j0 = std::max(0, GridFrame::cell_of(b.center.x - reach));
    int j1 = std::min(n - 1, static_cast<int>((b.center.x + reach + GridFrame::kHalfExtent) /
                                              GridFrame::kResolution));
    int i0 = std::max(0, GridFrame::cell_of(b.center.y - reach));
    int i1 = std::min(n - 1, static_cast<int>((b.center.y + reach + GridFrame::kHalfExtent) /
                                              GridFrame::kResolution));
    if (b.center.x + reach < -GridFrame::kHalfExtent || b.center.y + reach < -GridFrame::kHalfExtent)
      continue;
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j) {
        Obb cell{{GridFrame::cell_center(j), GridFrame::cell_center(i)}, 0.0,
                 GridFrame::kResolution, GridFrame::kResolution};
        if (obb_overlap(obb, cell)) occ.at(i, j) = 1;
      }
  }
  return occ;
}

// ---------------------------------------------------------------------------
// Safety-critical agent selection: inside the forward frustum anchored at
// the ego pose at t, and near the planned path; closest first, capped.
// ---------------------------------------------------------------------------

constexpr double kFrustumHalfAngle = M_PI / 3.0;  // 60 degrees
constexpr double kPathLateralGate = 8.0;

inline Polyline trajectory_polyline(const Trajectory& traj) {
  std::vector<Vec2> pts;
  pts.push_back({0.0, 0.0});
  for (const auto& w : traj.waypoints) pts.push_back({w.x, w.y});
  return Polyline(std::move(pts));
}

inline std::vector<AgentBox> select_safety_critical_agents(const Scenario& sc, TimePoint time,
                                                           int cap) {
  double tau = time == TimePoint::kCurrent ? 0.0 : kFutureHorizon;
  Polyline path = trajectory_polyline(sc.gt_trajectory);
  std::vector<std::pair<double, AgentBox>> picked;
  for (const ScriptedAgent& agent : sc.agents) {
    AgentBox b = agent_box_at(agent, tau);
    double dist = b.center.norm();
    if (dist > 1e-9) {
      double angle = std::atan2(b.center.y, b.center.x);
      if (std::abs(angle) > kFrustumHalfAngle) continue;
    }
    if (path.project(b.center).distance > kPathLateralGate) continue;
    picked.emplace_back(dist, b);
  }
  std::stable_sort(picked.begin(), picked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<AgentBox> out;
  for (const auto& [d, b] : picked) {
    if (static_cast<int>(out.size()) >= cap) break;
    out.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompt encoding: [command][speed bin][accel bin] + 16 BEV patch tokens.
// Each patch summarizes a 16x16-cell region as a 4x4 average pool of the
// drivable and occupied channels (32 features).
// ---------------------------------------------------------------------------

struct PromptTokens {
  static constexpr int kNumPatches = 16;
  static constexpr int kPatchFeatureDim = 32;
  static constexpr int kLength = 3 + kNumPatches;  // 19 tokens
  static constexpr int kSpeedBins = 32;
  static constexpr int kAccelBins = 17;

  int command_id = 0;
  int speed_bin = 0;
  int accel_bin = 0;
  Tensor patch_features;  // [16, 32]

  bool operator==(const PromptTokens& o) const {
    return command_id == o.command_id && speed_bin == o.speed_bin && accel_bin == o.accel_bin &&
           patch_features.shape == o.patch_features.shape &&
           patch_features.data == o.patch_features.data;
  }
};

inline PromptTokens encode_prompt(const Scenario& sc) {
  PromptTokens p;
  p.command_id = static_cast<int>(sc.command);
  p.speed_bin = std::clamp(static_cast<int>(std::floor(sc.ego.speed / 0.5)), 0,
                           PromptTokens::kSpeedBins - 1);
  p.accel_bin = std::clamp(static_cast<int>(std::floor((sc.ego.accel + 4.0) / 0.5)), 0,
                           PromptTokens::kAccelBins - 1);
  p.patch_features = Tensor({PromptTokens::kNumPatches, PromptTokens::kPatchFeatureDim});
  const OccupancyGrid& occ = sc.gt_occ_t;
  for (int pi = 0; pi < 4; ++pi)
    for (int pj = 0; pj < 4; ++pj) {
      int patch = pi * 4 + pj;
      for (int si = 0; si < 4; ++si)
        for (int sj = 0; sj < 4; ++sj) {
          double drivable = 0.0, occupied = 0.0;
          for (int di = 0; di < 4; ++di)
            for (int dj = 0; dj < 4; ++dj) {
              int i = pi * 16 + si * 4 + di;
              int j = pj * 16 + sj * 4 + dj;
              drivable += sc.map.grid[static_cast<size_t>(i * GridFrame::kSize + j)];
              occupied += occ.at(i, j);
            }
          int sub = si * 4 + sj;
          p.patch_features.at2(patch, 2 * sub + 0) = drivable / 16.0;
          p.patch_features.at2(patch, 2 * sub + 1) = occupied / 16.0;
        }
    }
  return p;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail_gen {

constexpr double kSimDt = 0.1;
constexpr int kSimSteps = 41;  // 0..4 s inclusive
constexpr double kMaxPathLength = 12.5;
constexpr double kEgoLength = 4.5;
constexpr double kEgoWidth = 2.0;

struct PathPlan {
  Polyline centerline;
  double s0 = 0.0;  // arc position of the ego at t
};

inline Polyline build_centerline(Family family, Rng& rng, double* turn_radius) {
  std::vector<Vec2> pts;
  auto push_line = [&pts](Vec2 a, Vec2 b, double step) {
    double len = (b - a).norm();
    int n = std::max(1, static_cast<int>(len / step));
    for (int i = 0; i < n; ++i) pts.push_back(a + (b - a) * (static_cast<double>(i) / n));
  };
  if (family == Family::kLeftTurn || family == Family::kRightTurn) {
    double d0 = rng.uniform(0.5, 2.5);
    double radius = rng.uniform(5.2, 13.0);
    if (turn_radius) *turn_radius = radius;
    double sign = family == Family::kLeftTurn ? 1.0 : -1.0;
    push_line({-20.0, 0.0}, {d0, 0.0}, 0.5);
    Vec2 center{d0, sign * radius};
    int arc_steps = static_cast<int>((M_PI / 2.0) * radius / 0.25);
    for (int i = 0; i <= arc_steps; ++i) {
      double theta = (M_PI / 2.0) * i / arc_steps;
      pts.push_back({center.x + radius * std::sin(theta),
                     center.y - sign * radius * std::cos(theta)});
    }
    // short exit segment past the arc
    double exit_heading = sign * M_PI / 2.0;
    Vec2 end = pts.back();
    Vec2 exit_dir{std::cos(exit_heading), std::sin(exit_heading)};
    push_line(end, end + exit_dir * 6.0, 0.5);
    pts.push_back(end + exit_dir * 6.0);
  } else {
    if (turn_radius) *turn_radius = 0.0;
    push_line({-20.0, 0.0}, {24.0, 0.0}, 0.5);
    pts.push_back({24.0, 0.0});
  }
  return Polyline(std::move(pts));
}

// Speed profile sampled at kSimDt over the horizon; returns speeds v[0..40].
inline std::vector<double> base_speed_profile(double v0, double a_plan) {
  std::vector<double> v(kSimSteps);
  for (int i = 0; i < kSimSteps; ++i)
    v[static_cast<size_t>(i)] = std::clamp(v0 + a_plan * i * kSimDt, 0.25, 3.4);
  return v;
}

inline std::vector<double> braking_profile(double v0, double start, double decel) {
  std::vector<double> v(kSimSteps);
  for (int i = 0; i < kSimSteps; ++i) {
    double tau = i * kSimDt;
    double cur = tau <= start ? v0 : v0 - decel * (tau - start);
    v[static_cast<size_t>(i)] = std::max(cur, 0.0);
  }
  return v;
}

inline double profile_length(const std::vector<double>& v) {
  double s = 0.0;
  for (size_t i = 1; i < v.size(); ++i) s += 0.5 * (v[i - 1] + v[i]) * kSimDt;
  return s;
}

inline void cap_profile(std::vector<double>& v, double max_len) {
  double len = profile_length(v);
  if (len > max_len) {
    double k = max_len / len;
    for (double& x : v) x *= k;
  }
}

// Integrate the speed profile along the centerline from s0.
inline std::vector<double> arc_positions(const std::vector<double>& v, double s0) {
  std::vector<double> s(v.size());
  s[0] = s0;
  for (size_t i = 1; i < v.size(); ++i) s[i] = s[i - 1] + 0.5 * (v[i - 1] + v[i]) * kSimDt;
  return s;
}

}  // namespace detail_gen

// Dense ego poses along the ground-truth plan at 0.1 s, used by the
// validator and by the scoring playback.
inline std::vector<EgoState> interpolate_trajectory(const Trajectory& traj, double sim_dt = 0.1) {
  std::vector<EgoState> out;
  int per = static_cast<int>(Trajectory::kDt / sim_dt + 0.5);
  Vec2 prev{0.0, 0.0};
  double prev_heading = 0.0;
  for (int w = 0; w < Trajectory::kNumWaypoints; ++w) {
    Vec2 next{traj.waypoints[static_cast<size_t>(w)].x, traj.waypoints[static_cast<size_t>(w)].y};
    double next_heading = traj.waypoints[static_cast<size_t>(w)].heading;
    for (int k = (w == 0 ? 0 : 1); k <= per; ++k) {
      double t = static_cast<double>(k) / per;
      EgoState e;
      e.position = prev + (next - prev) * t;
      e.heading = lerp_angle(prev_heading, next_heading, t);
      double dist = (next - prev).norm();
      e.speed = dist / Trajectory::kDt;
      out.push_back(e);
    }
    prev = next;
    prev_heading = next_heading;
  }
  return out;
}

struct FeasibilityReport {
  bool ok = true;
  std::string reason;
};

// Checks the generator contract on a ground-truth plan: stays on drivable
// cells (all four ego-box corners), collision-free against scripted agents
// at every 0.1 s step, |accel| <= 4, |curvature| <= 0.2, monotone progress.
inline FeasibilityReport validate_feasibility(const Scenario& sc) {
  auto fail = [](std::string why) { return FeasibilityReport{false, std::move(why)}; };
  std::vector<EgoState> dense = interpolate_trajectory(sc.gt_trajectory);

  for (size_t k = 0; k < dense.size(); ++k) {
    Obb ego{dense[k].position, dense[k].heading, detail_gen::kEgoLength, detail_gen::kEgoWidth};
    for (Vec2 c : ego.corners())
      if (!sc.map.drivable_at(c)) return fail("ego box leaves drivable area");
    double tau = static_cast<double>(k) * 0.1;
    for (const ScriptedAgent& agent : sc.agents)
      if (obb_overlap(ego, agent_box_at(agent, tau).obb()))
        return fail("ground-truth trajectory collides with an agent");
  }

  // waypoint-level kinematics, anchored at the origin pose
  std::vector<Vec2> pos{{0.0, 0.0}};
  for (const auto& w : sc.gt_trajectory.waypoints) pos.push_back({w.x, w.y});
  std::vector<Vec2> vel;
  for (size_t i = 0; i + 1 < pos.size(); ++i)
    vel.push_back((pos[i + 1] - pos[i]) * (1.0 / Trajectory::kDt));
  for (size_t i = 0; i + 1 < vel.size(); ++i) {
    double acc = ((vel[i + 1] - vel[i]) * (1.0 / Trajectory::kDt)).norm();
    if (acc > 4.0 + 1e-9) return fail("acceleration bound exceeded");
  }
  for (size_t i = 0; i + 1 < pos.size() - 1; ++i) {
    Vec2 d = pos[i + 1] - pos[i];
    double dist = d.norm();
    if (dist < 0.05) continue;
    double h0 = std::atan2(d.y, d.x);
    Vec2 d1 = pos[i + 2] - pos[i + 1];
    if (d1.norm() < 0.05) continue;
    double h1 = std::atan2(d1.y, d1.x);
    double curvature = std::abs(wrap_angle(h1 - h0)) / dist;
    if (curvature > 0.2 + 1e-9) return fail("curvature bound exceeded");
  }

  const Polyline& cl = sc.map.lane_centerline;
  double prev_s = cl.project({0.0, 0.0}).s;
  for (const auto& w : sc.gt_trajectory.waypoints) {
    double s = cl.project({w.x, w.y}).s;
    if (s < prev_s - 1e-6) return fail("progress along centerline reverses");
    prev_s = s;
  }
  return {};
}

namespace detail_gen {

inline AgentBox make_agent(AgentClass cls, Vec2 center, double heading, Vec2 velocity, Rng& rng) {
  AgentBox b;
  b.cls = cls;
  b.center = center;
  b.heading = heading;
  b.velocity = velocity;
  switch (cls) {
    case AgentClass::kVehicle:
      b.length = rng.uniform(3.8, 5.0);
      b.width = rng.uniform(1.7, 2.1);
      break;
    case AgentClass::kCyclist:
      b.length = 1.8;
      b.width = 0.6;
      break;
    case AgentClass::kPedestrian:
      b.length = 0.5;
      b.width = 0.5;
      break;
  }
  return b;
}

inline Scenario try_generate(uint64_t seed, const GenConfig& cfg, Rng& rng) {
  Scenario sc;
  sc.seed = seed;

  // family
  double mix_sum = 0.0;
  for (double w : cfg.family_mix) mix_sum += w;
  double pick = rng.uniform() * mix_sum;
  int fam_idx = 0;
  for (; fam_idx < 4; ++fam_idx) {
    pick -= cfg.family_mix[static_cast<size_t>(fam_idx)];
    if (pick < 0.0) break;
  }
  Family family = static_cast<Family>(fam_idx);
  sc.command = family == Family::kLeftTurn    ? Command::kLeft
               : family == Family::kRightTurn ? Command::kRight
                                              : Command::kStraight;

  double turn_radius = 0.0;
  Polyline centerline = build_centerline(family, rng, &turn_radius);
  double s0 = centerline.project({0.0, 0.0}).s;

  // drivable raster from lateral distance to the centerline
  sc.map.lane_centerline = centerline;
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j < GridFrame::kSize; ++j) {
      Vec2 c{GridFrame::cell_center(j), GridFrame::cell_center(i)};
      sc.map.grid[static_cast<size_t>(i * GridFrame::kSize + j)] =
          centerline.project(c).distance <= cfg.road_half_width ? 1 : 0;
    }

  double v0 = rng.uniform(cfg.ego_speed_min, cfg.ego_speed_max);
  // Straight-line families keep a flat speed history so the right behavior
  // (cruise, brake, yield) is only visible through the world state, never
  // through the ego features alone.
  bool is_turn = family == Family::kLeftTurn || family == Family::kRightTurn;
  double a_plan = is_turn ? rng.uniform(-0.5, 0.6) : 0.0;

  // traffic light (straight-follow only, so stop profiles never conflict
  // with a scripted lead)
  bool red_light = false;
  if (family == Family::kStraightFollow && rng.uniform() < cfg.traffic_light_prob) {
    TrafficLight light;
    red_light = rng.uniform() < cfg.red_light_prob;
    light.state = red_light ? LightState::kRed : LightState::kGreen;
    double s_min = v0 * 0.6 + v0 * v0 / 4.0 + 4.0;
    double s_stop = rng.uniform(std::max(6.0, s_min), 13.0);
    light.stop_position = centerline.point_at(s0 + s_stop);
    sc.map.traffic_light = light;
  }

  // ego speed profile; braking never begins before t + 0.3 s
  std::vector<double> profile;
  int agents_budget = cfg.agent_count_max;
  std::vector<ScriptedAgent> agents;
  if (red_light) {
    double s_stop = centerline.project(sc.map.traffic_light->stop_position).s - s0;
    double ego_start = rng.uniform(0.3, 0.6);
    double target = std::max(s_stop - 1.5 - v0 * ego_start, 1.0);
    profile = braking_profile(v0, ego_start, std::min(v0 * v0 / (2.0 * target), 2.8));
  } else if (family == Family::kLeadBrake && agents_budget > 0) {
    double gap = 4.5 + v0 * 1.2 + rng.uniform(0.0, 2.5);
    double v_lead = std::clamp(v0 + rng.uniform(-0.3, 0.4), cfg.vehicle_speed_min,
                               cfg.vehicle_speed_max);
    double t_brake = rng.uniform(0.2, 1.0);
    double d_lead = rng.uniform(1.5, 3.0);
    ScriptedAgent lead;
    lead.box = make_agent(AgentClass::kVehicle, centerline.point_at(s0 + gap),
                          centerline.heading_at(s0 + gap), {v_lead, 0.0}, rng);
    lead.box.velocity = Vec2{std::cos(lead.box.heading), std::sin(lead.box.heading)} * v_lead;
    lead.motion = AgentMotion{t_brake, d_lead};
    agents.push_back(lead);
    --agents_budget;

    double lead_stop = gap + v_lead * t_brake + v_lead * v_lead / (2.0 * d_lead);
    double available = lead_stop - 6.5;
    double ego_start = t_brake + 0.3;
    double pre = v0 * ego_start;
    if (available - pre < 0.5) {
      ego_start = 0.3;
      pre = v0 * ego_start;
    }
    double ego_decel = std::min(v0 * v0 / (2.0 * std::max(available - pre, 0.8)), 2.8);
    profile = braking_profile(v0, ego_start, ego_decel);
  } else if (family == Family::kCrossingPedestrian && agents_budget > 0 &&
             rng.uniform() < cfg.yield_crossing_prob) {
    // a pedestrian steps onto the road exactly when a non-braking ego would
    // arrive; the plan yields and stops short of the crossing point
    double x_c = std::max(3.5 + v0 * 0.45 + v0 * v0 / 4.4 + rng.uniform(1.0, 4.0),
                          rng.uniform(6.0, 10.0));
    double ego_start = rng.uniform(0.3, 0.6);
    double target = std::max(x_c - 3.5 - v0 * ego_start, 0.8);
    profile = braking_profile(v0, ego_start, std::min(v0 * v0 / (2.0 * target), 2.8));
    double t_hit = x_c / v0;
    double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
    double y0 = side * rng.uniform(2.6, 3.4);
    double vp = std::clamp(std::abs(y0) / t_hit, cfg.pedestrian_speed_min,
                           cfg.pedestrian_speed_max);
    y0 = side * std::max(vp * t_hit, 2.4);
    ScriptedAgent ped;
    ped.box = make_agent(AgentClass::kPedestrian, {x_c, y0}, -side * M_PI / 2.0,
                         {0.0, -side * vp}, rng);
    agents.push_back(ped);
    --agents_budget;
  } else {
    profile = base_speed_profile(v0, a_plan);
  }
  cap_profile(profile, kMaxPathLength);

  std::vector<double> arc = arc_positions(profile, s0);
  double path_len = arc.back() - s0;

  // crossing pedestrian that clears the path on its own
  if (family == Family::kCrossingPedestrian && agents_budget > 0 && agents.empty()) {
    double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
    double y0 = side * rng.uniform(2.6, 4.5);
    bool beyond = rng.uniform() < 0.4 || path_len < 2.0;
    double vp = rng.uniform(cfg.pedestrian_speed_min, cfg.pedestrian_speed_max);
    double x_c;
    if (beyond) {
      x_c = std::min(path_len + rng.uniform(1.5, 5.0), 15.0);
    } else {
      x_c = std::clamp(rng.uniform(0.35, 0.75) * path_len, 1.0, 15.0);
      // time the crossing to start only after the ego has passed
      double t_ego = 4.0;
      for (int i = 0; i < kSimSteps; ++i)
        if (arc[static_cast<size_t>(i)] - s0 >= x_c) {
          t_ego = i * kSimDt;
          break;
        }
      double v_needed = (std::abs(y0) - 2.0) / std::max(t_ego + 0.6, 0.2);
      vp = std::min(v_needed, cfg.pedestrian_speed_max);
      if (vp < cfg.pedestrian_speed_min) vp = cfg.pedestrian_speed_min;  // validator backstop
    }
    ScriptedAgent ped;
    ped.box = make_agent(AgentClass::kPedestrian, {x_c, y0}, -side * M_PI / 2.0,
                         {0.0, -side * vp}, rng);
    agents.push_back(ped);
    --agents_budget;
  }

  // optional constant-speed lead in the plain straight family, far enough
  // ahead that the plan never reacts to it
  if (family == Family::kStraightFollow && !red_light && agents_budget > 0 &&
      rng.uniform() < 0.6) {
    double gap = 8.0 + v0 * 2.0 + rng.uniform(0.0, 4.0);
    double v_lead = std::clamp(v0 + rng.uniform(-0.4, 0.8), cfg.vehicle_speed_min,
                               cfg.vehicle_speed_max);
    ScriptedAgent lead;
    lead.box = make_agent(AgentClass::kVehicle, {gap, 0.0}, 0.0, {v_lead, 0.0}, rng);
    agents.push_back(lead);
    --agents_budget;
  }

  // parked background agents, off the road or behind the ego
  int placed = static_cast<int>(agents.size());
  int extra_min = std::clamp(cfg.agent_count_min - placed, 0, agents_budget);
  int extra = static_cast<int>(rng.uniform_int(extra_min, agents_budget));
  for (int a = 0; a < extra; ++a) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      Vec2 c{rng.uniform(-14.0, 14.0), rng.uniform(-14.0, 14.0)};
      bool off_road = centerline.project(c).distance >= 5.5;
      bool behind = c.x < -4.0;
      if (!off_road && !behind) continue;
      if (c.norm() < 5.0) continue;
      double cls_pick = rng.uniform();
      AgentClass cls = cls_pick < 0.6   ? AgentClass::kVehicle
                       : cls_pick < 0.8 ? AgentClass::kPedestrian
                                        : AgentClass::kCyclist;
      AgentBox cand = make_agent(cls, c, rng.uniform(-M_PI, M_PI), {0.0, 0.0}, rng);
      bool clash = false;
      for (const ScriptedAgent& other : agents)
        if (obb_overlap(cand.obb(), other.box.obb())) clash = true;
      if (clash) continue;
      agents.push_back(ScriptedAgent{cand, {}});
      break;
    }
  }
  sc.agents = std::move(agents);

  // ego state, history, trajectory
  sc.ego.position = {0.0, 0.0};
  sc.ego.heading = 0.0;
  sc.ego.speed = profile[0];
  sc.ego.accel = (profile[1] - profile[0]) / kSimDt;
  double v_hist = profile[0];
  std::vector<EgoState> rev_history;
  double x_hist = 0.0;
  for (int k = 1; k <= kHistoryLen * 5; ++k) {
    v_hist = std::clamp(v_hist - a_plan * kSimDt, 0.2, 3.4);
    x_hist -= v_hist * kSimDt;
    if (k % 5 == 0) {
      EgoState h;
      h.position = {x_hist, 0.0};
      h.heading = 0.0;
      h.speed = v_hist;
      h.accel = a_plan;
      rev_history.push_back(h);
    }
  }
  sc.history.assign(rev_history.rbegin(), rev_history.rend());

  for (int w = 0; w < Trajectory::kNumWaypoints; ++w) {
    int idx = (w + 1) * 5;
    double s = arc[static_cast<size_t>(idx)];
    Vec2 p = centerline.point_at(s);
    sc.gt_trajectory.waypoints[static_cast<size_t>(w)] = {p.x, p.y, centerline.heading_at(s)};
  }
  const auto& last = sc.gt_trajectory.waypoints.back();
  sc.gt_goal = GoalPose{{last.x, last.y}, last.heading};

  sc.gt_occ_t = rasterize_occupancy(sc, TimePoint::kCurrent);
  sc.gt_occ_future = rasterize_occupancy(sc, TimePoint::kFuture);
  sc.gt_agents_t = select_safety_critical_agents(sc, TimePoint::kCurrent, 8);
  sc.gt_agents_future = select_safety_critical_agents(sc, TimePoint::kFuture, 8);
  return sc;
}

}  // namespace detail_gen

inline Scenario generate_scenario(uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  std::string last_reason;
  for (uint64_t attempt = 0; attempt < 32; ++attempt) {
    Rng rng(Rng::mix(seed, attempt));
    Scenario sc = detail_gen::try_generate(seed, cfg, rng);
    FeasibilityReport report = validate_feasibility(sc);
    if (report.ok) return sc;
    last_reason = report.reason;
  }
  throw ConfigError("generate_scenario: no feasible scenario for seed " + std::to_string(seed) +
                    " (" + last_reason + ")");
}

// ---------------------------------------------------------------------------
// Dataset persistence: magic "SGDS1", little-endian.
// ---------------------------------------------------------------------------

namespace detail_gen {

inline void write_bitgrid(std::ostream& os, const std::vector<uint8_t>& grid) {
  for (size_t base = 0; base < grid.size(); base += 8) {
    uint8_t byte = 0;
    for (size_t b = 0; b < 8 && base + b < grid.size(); ++b)
      if (grid[base + b]) byte |= static_cast<uint8_t>(1u << b);
    binio::write_u8(os, byte);
  }
}

inline void read_bitgrid(std::istream& is, std::vector<uint8_t>& grid) {
  for (size_t base = 0; base < grid.size(); base += 8) {
    uint8_t byte = binio::read_u8(is);
    for (size_t b = 0; b < 8 && base + b < grid.size(); ++b)
      grid[base + b] = (byte >> b) & 1u;
  }
}

inline void write_vec2(std::ostream& os, Vec2 v) {
  binio::write_f64(os, v.x);
  binio::write_f64(os, v.y);
}

inline Vec2 read_vec2(std::istream& is) {
  Vec2 v;
  v.x = binio::read_f64(is);
  v.y = binio::read_f64(is);
  return v;
}

inline void write_ego(std::ostream& os, const EgoState& e) {
  write_vec2(os, e.position);
  binio::write_f64(os, e.heading);
  binio::write_f64(os, e.speed);
  binio::write_f64(os, e.accel);
}

inline EgoState read_ego(std::istream& is) {
  EgoState e;
  e.position = read_vec2(is);
  e.heading = binio::read_f64(is);
  e.speed = binio::read_f64(is);
  e.accel = binio::read_f64(is);
  return e;
}

inline void write_agent_box(std::ostream& os, const AgentBox& b) {
  write_vec2(os, b.center);
  binio::write_f64(os, b.heading);
  binio::write_f64(os, b.length);
  binio::write_f64(os, b.width);
  write_vec2(os, b.velocity);
  binio::write_u8(os, static_cast<uint8_t>(b.cls));
}

inline AgentBox read_agent_box(std::istream& is) {
  AgentBox b;
  b.center = read_vec2(is);
  b.heading = binio::read_f64(is);
  b.length = binio::read_f64(is);
  b.width = binio::read_f64(is);
  b.velocity = read_vec2(is);
  b.cls = static_cast<AgentClass>(binio::read_u8(is));
  return b;
}

}  // namespace detail_gen

inline void serialize_scenario(const Scenario& sc, std::ostream& os) {
  using namespace detail_gen;
  binio::write_u64(os, sc.seed);
  binio::write_u8(os, static_cast<uint8_t>(sc.command));
  write_bitgrid(os, sc.map.grid);
  const auto& cl = sc.map.lane_centerline.points();
  binio::write_u32(os, static_cast<uint32_t>(cl.size()));
  for (Vec2 p : cl) write_vec2(os, p);
  binio::write_u8(os, sc.map.traffic_light.has_value() ? 1 : 0);
  if (sc.map.traffic_light) {
    write_vec2(os, sc.map.traffic_light->stop_position);
    binio::write_u8(os, static_cast<uint8_t>(sc.map.traffic_light->state));
  }
  write_ego(os, sc.ego);
  binio::write_u32(os, static_cast<uint32_t>(sc.history.size()));
  for (const EgoState& h : sc.history) write_ego(os, h);
  binio::write_u32(os, static_cast<uint32_t>(sc.agents.size()));
  for (const ScriptedAgent& a : sc.agents) {
    write_agent_box(os, a.box);
    binio::write_f64(os, a.motion.brake_time);
    binio::write_f64(os, a.motion.brake_decel);
  }
  for (const auto& w : sc.gt_trajectory.waypoints) {
    binio::write_f64(os, w.x);
    binio::write_f64(os, w.y);
    binio::write_f64(os, w.heading);
  }
  write_vec2(os, sc.gt_goal.position);
  binio::write_f64(os, sc.gt_goal.heading);
  write_bitgrid(os, sc.gt_occ_t.grid);
  write_bitgrid(os, sc.gt_occ_future.grid);
  binio::write_u32(os, static_cast<uint32_t>(sc.gt_agents_t.size()));
  for (const AgentBox& b : sc.gt_agents_t) write_agent_box(os, b);
  binio::write_u32(os, static_cast<uint32_t>(sc.gt_agents_future.size()));
  for (const AgentBox& b : sc.gt_agents_future) write_agent_box(os, b);
}

inline Scenario deserialize_scenario(std::istream& is) {
  using namespace detail_gen;
  Scenario sc;
  sc.seed = binio::read_u64(is);
  sc.command = static_cast<Command>(binio::read_u8(is));
  read_bitgrid(is, sc.map.grid);
  uint32_t n_cl = binio::read_u32(is);
  std::vector<Vec2> cl(n_cl);
  for (auto& p : cl) p = read_vec2(is);
  sc.map.lane_centerline = Polyline(std::move(cl));
  if (binio::read_u8(is)) {
    TrafficLight light;
    light.stop_position = read_vec2(is);
    light.state = static_cast<LightState>(binio::read_u8(is));
    sc.map.traffic_light = light;
  }
  sc.ego = read_ego(is);
  uint32_t n_hist = binio::read_u32(is);
  sc.history.resize(n_hist);
  for (auto& h : sc.history) h = read_ego(is);
  uint32_t n_agents = binio::read_u32(is);
  sc.agents.resize(n_agents);
  for (auto& a : sc.agents) {
    a.box = read_agent_box(is);
    a.motion.brake_time = binio::read_f64(is);
    a.motion.brake_decel = binio::read_f64(is);
  }
  for (auto& w : sc.gt_trajectory.waypoints) {
    w.x = binio::read_f64(is);
    w.y = binio::read_f64(is);
    w.heading = binio::read_f64(is);
  }
  sc.gt_goal.position = read_vec2(is);
  sc.gt_goal.heading = binio::read_f64(is);
  read_bitgrid(is, sc.gt_occ_t.grid);
  read_bitgrid(is, sc.gt_occ_future.grid);
  uint32_t n_at = binio::read_u32(is);
  sc.gt_agents_t.resize(n_at);
  for (auto& b : sc.gt_agents_t) b = read_agent_box(is);
  uint32_t n_af = binio::read_u32(is);
  sc.gt_agents_future.resize(n_af);
  for (auto& b : sc.gt_agents_future) b = read_agent_box(is);
  return sc;
}

inline std::string scenario_bytes(const Scenario& sc) {
  std::ostringstream os(std::ios::binary);
  serialize_scenario(sc, os);
  return os.str();
}

constexpr uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::vector<Scenario>& scenarios, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("dataset: cannot open for write: " + path);
  os.write("SGDS1", 5);
  binio::write_u32(os, kDatasetVersion);
  binio::write_u64(os, scenarios.size());
  for (const Scenario& sc : scenarios) serialize_scenario(sc, os);
  if (!os) throw DataError("dataset: write failed: " + path);
}

inline std::vector<Scenario> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("dataset: cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != "SGDS1")
    throw DataError("dataset: bad magic, not a dataset file: " + path);
  uint32_t version = binio::read_u32(is);
  if (version != kDatasetVersion)
    throw DataError("dataset: unsupported version " + std::to_string(version) + " in " + path);
  uint64_t count = binio::read_u64(is);
  std::vector<Scenario> out;
  out.reserve(count);
  try {
    for (uint64_t i = 0; i < count; ++i) out.push_back(deserialize_scenario(is));
  } catch (const std::runtime_error& e) {
    throw DataError("dataset: truncated or corrupt file: " + path);
  }
  return out;
}

}  // namespace sagdrive
