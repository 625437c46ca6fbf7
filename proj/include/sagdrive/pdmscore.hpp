#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sagdrive/errors.hpp"
#include "sagdrive/geometry.hpp"
#include "sagdrive/scenegen.hpp"

namespace sagdrive {

constexpr double kEgoBoxLength = 4.5;
constexpr double kEgoBoxWidth = 2.0;
constexpr double kScoreDt = 0.1;

struct ScoreCard {
  double nc = 1.0, dac = 1.0, ttc = 1.0, comfort = 1.0, ep = 1.0;
  double tl = 1.0, lk = 1.0, ec = 1.0, ddc = 1.0;
  double pdms = 0.0, epdms = 0.0;
};

struct Weights {
  double ep_w = 5.0;
  double ttc_w = 5.0;
  double c_w = 2.0;
  double lk_w = 2.0;
  double ec_w = 2.0;

  void validate() const {
    if (ep_w <= 0.0 || ttc_w <= 0.0 || c_w <= 0.0 || lk_w <= 0.0 || ec_w <= 0.0)
      throw ConfigError("score weights must all be positive");
  }
};

namespace detail_score {

inline void check_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0))
    throw std::invalid_argument(std::string("subscore ") + name + " outside [0,1]: " +
                                std::to_string(v));
}

inline Obb ego_box(const EgoState& e) {
  return Obb{e.position, e.heading, kEgoBoxLength, kEgoBoxWidth};
}

// velocity vectors along the interpolated plan, forward differences
inline std::vector<Vec2> velocities(const std::vector<EgoState>& dense, double dt) {
  std::vector<Vec2> v;
  for (size_t i = 0; i + 1 < dense.size(); ++i)
    v.push_back((dense[i + 1].position - dense[i].position) * (1.0 / dt));
  if (!v.empty()) v.push_back(v.back());
  return v;
}

}  // namespace detail_score

// No at-fault collisions: any positive-area overlap between the ego box and
// any scripted agent at any interpolated step fails.
inline double subscore_nc(const Trajectory& traj, const Scenario& sc) {
  std::vector<EgoState> dense = interpolate_trajectory(traj, kScoreDt);
  for (size_t k = 0; k < dense.size(); ++k) {
    Obb ego = detail_score::ego_box(dense[k]);
    double tau = static_cast<double>(k) * kScoreDt;
    for (const ScriptedAgent& agent : sc.agents)
      if (obb_overlap(ego, agent_box_at(agent, tau).obb())) return 0.0;
  }
  return 1.0;
}

// Drivable-area compliance: all four ego-box corners on drivable cells at
// every interpolated step.
inline double subscore_dac(const Trajectory& traj, const DrivableMap& map) {
  for (const EgoState& e : interpolate_trajectory(traj, kScoreDt))
    for (Vec2 corner : detail_score::ego_box(e).corners())
      if (!map.drivable_at(corner)) return 0.0;
  return 1.0;
}

// Time-to-collision: project ego and agents forward at constant velocity
// for tau seconds from every step; any projected overlap fails.
inline double subscore_ttc(const Trajectory& traj, const Scenario& sc, double tau = 1.0) {
  std::vector<EgoState> dense = interpolate_trajectory(traj, kScoreDt);
  std::vector<Vec2> ego_vel = detail_score::velocities(dense, kScoreDt);
  for (size_t k = 0; k < dense.size(); ++k) {
    double now = static_cast<double>(k) * kScoreDt;
    for (double ahead = kScoreDt; ahead <= tau + 1e-9; ahead += kScoreDt) {
      Obb ego = detail_score::ego_box(dense[k]);
      ego.center = ego.center + ego_vel[k] * ahead;
      for (const ScriptedAgent& agent : sc.agents) {
        AgentBox b = agent_box_at(agent, now);
        Obb box = b.obb();
        box.center = box.center + b.velocity * ahead;
        if (obb_overlap(ego, box)) return 0.0;
      }
    }
  }
  return 1.0;
}

// Comfort: waypoint-level vector acceleration and jerk bounds.
inline double subscore_comfort(const Trajectory& traj, double max_accel = 4.0,
                               double max_jerk = 8.0) {
  std::vector<Vec2> pos{{0.0, 0.0}};
  for (const auto& w : traj.waypoints) pos.push_back({w.x, w.y});
  std::vector<Vec2> vel, acc;
  for (size_t i = 0; i + 1 < pos.size(); ++i)
    vel.push_back((pos[i + 1] - pos[i]) * (1.0 / Trajectory::kDt));
  for (size_t i = 0; i + 1 < vel.size(); ++i) {
    Vec2 a = (vel[i + 1] - vel[i]) * (1.0 / Trajectory::kDt);
    if (a.norm() > max_accel) return 0.0;
    acc.push_back(a);
  }
  for (size_t i = 0; i + 1 < acc.size(); ++i)
    if (((acc[i + 1] - acc[i]) * (1.0 / Trajectory::kDt)).norm() > max_jerk) return 0.0;
  return 1.0;
}

// Ego progress: arc-length gain along the lane centerline relative to the
// ground truth plan, clamped to [0, 1].
inline double subscore_ep(const Trajectory& traj, const Scenario& sc) {
  const Polyline& cl = sc.map.lane_centerline;
  double s_start = cl.project({0.0, 0.0}).s;
  auto progress_of = [&](const Trajectory& t) {
    const auto& last = t.waypoints.back();
    return cl.project({last.x, last.y}).s - s_start;
  };
  double gt = progress_of(sc.gt_trajectory);
  if (gt < 0.1) return 1.0;
  return std::clamp(progress_of(traj) / gt, 0.0, 1.0);
}

struct ExtendedSubscores {
  double tl = 1.0, lk = 1.0, ec = 1.0, ddc = 1.0;
};

// TL: red stop-line crossings. LK: lateral deviation bound, straight
// commands only. DDC: monotone forward progress. EC: comfort verdict
// agreement with the previous evaluation tick's plan (1 when none exists).
inline ExtendedSubscores extended_subscores(const Trajectory& traj, const Scenario& sc,
                                            const std::optional<Trajectory>& previous_plan = {}) {
  ExtendedSubscores out;
  const Polyline& cl = sc.map.lane_centerline;
  std::vector<EgoState> dense = interpolate_trajectory(traj, kScoreDt);

  if (sc.map.traffic_light && sc.map.traffic_light->state == LightState::kRed) {
    double s_stop = cl.project(sc.map.traffic_light->stop_position).s;
    for (const EgoState& e : dense)
      if (cl.project(e.position).s > s_stop) {
        out.tl = 0.0;
        break;
      }
  }

  if (sc.command == Command::kStraight) {
    for (const EgoState& e : dense)
      if (cl.project(e.position).distance > 1.0) {
        out.lk = 0.0;
        break;
      }
  }

  double prev_s = cl.project({0.0, 0.0}).s;
  for (const EgoState& e : dense) {
    double s = cl.project(e.position).s;
    if (s < prev_s - 0.1) {
      out.ddc = 0.0;
      break;
    }
    prev_s = std::max(prev_s, s);
  }

  if (previous_plan)
    out.ec = subscore_comfort(traj) == subscore_comfort(*previous_plan) ? 1.0 : 0.0;
  return out;
}

// PDMS = (NC * DAC) * weighted_mean(EP, TTC, Comfort).
inline double aggregate_pdms(const ScoreCard& card, const Weights& w) {
  w.validate();
  detail_score::check_unit(card.nc, "nc");
  detail_score::check_unit(card.dac, "dac");
  detail_score::check_unit(card.ttc, "ttc");
  detail_score::check_unit(card.comfort, "comfort");
  detail_score::check_unit(card.ep, "ep");
  double penalty = card.nc * card.dac;
  double weighted = (w.ep_w * card.ep + w.ttc_w * card.ttc + w.c_w * card.comfort) /
                    (w.ep_w + w.ttc_w + w.c_w);
  return penalty * weighted;
}

// EPDMS = (NC * DAC * DDC * TL) * weighted_mean(EP, TTC, Comfort, LK, EC).
inline double aggregate_epdms(const ScoreCard& card, const Weights& w) {
  w.validate();
  detail_score::check_unit(card.tl, "tl");
  detail_score::check_unit(card.lk, "lk");
  detail_score::check_unit(card.ec, "ec");
  detail_score::check_unit(card.ddc, "ddc");
  detail_score::check_unit(card.nc, "nc");
  detail_score::check_unit(card.dac, "dac");
  detail_score::check_unit(card.ttc, "ttc");
  detail_score::check_unit(card.comfort, "comfort");
  detail_score::check_unit(card.ep, "ep");
  double penalty = card.nc * card.dac * card.ddc * card.tl;
  double weighted = (w.ep_w * card.ep + w.ttc_w * card.ttc + w.c_w * card.comfort +
                     w.lk_w * card.lk + w.ec_w * card.ec) /
                    (w.ep_w + w.ttc_w + w.c_w + w.lk_w + w.ec_w);
  return penalty * weighted;
}

inline ScoreCard score_trajectory(const Trajectory& traj, const Scenario& sc, const Weights& w,
                                  const std::optional<Trajectory>& previous_plan = {}) {
  ScoreCard card;
  card.nc = subscore_nc(traj, sc);
  card.dac = subscore_dac(traj, sc.map);
  card.ttc = subscore_ttc(traj, sc);
  card.comfort = subscore_comfort(traj);
  card.ep = subscore_ep(traj, sc);
  ExtendedSubscores ext = extended_subscores(traj, sc, previous_plan);
  card.tl = ext.tl;
  card.lk = ext.lk;
  card.ec = ext.ec;
  card.ddc = ext.ddc;
  card.pdms = aggregate_pdms(card, w);
  card.epdms = aggregate_epdms(card, w);
  return card;
}

// ---------------------------------------------------------------------------
// Set-level scoring: per-scenario cards first, then the mean of every
// column (the paper-table convention; the aggregate of means is NOT the
// mean of aggregates).
// ---------------------------------------------------------------------------

struct ScoredScenario {
  uint64_t scenario_seed = 0;
  ScoreCard card;
};

struct ScoreReport {
  std::vector<ScoredScenario> rows;
  ScoreCard means;  // arithmetic means of all columns including pdms/epdms
};

inline ScoreReport score_set(const std::vector<std::pair<uint64_t, ScoreCard>>& cards) {
  ScoreReport report;
  ScoreCard sum{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  for (const auto& [seed, card] : cards) {
    report.rows.push_back({seed, card});
    sum.nc += card.nc;
    sum.dac += card.dac;
    sum.ttc += card.ttc;
    sum.comfort += card.comfort;
    sum.ep += card.ep;
    sum.tl += card.tl;
    sum.lk += card.lk;
    sum.ec += card.ec;
    sum.ddc += card.ddc;
    sum.pdms += card.pdms;
    sum.epdms += card.epdms;
  }
  double n = cards.empty() ? 1.0 : static_cast<double>(cards.size());
  report.means = {sum.nc / n, sum.dac / n, sum.ttc / n,  sum.comfort / n, sum.ep / n, sum.tl / n,
                  sum.lk / n, sum.ec / n,  sum.ddc / n,  sum.pdms / n,    sum.epdms / n};
  return report;
}

// CSV with one row per scenario plus a summary row; values are multiplied
// by 100 and printed with one decimal, matching the usual table format.
inline void write_score_csv(const ScoreReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("score csv: cannot open for write: " + path);
  os << "scenario,nc,dac,ttc,comfort,ep,tl,lk,ec,ddc,pdms,epdms\n";
  auto row = [&os](const std::string& label, const ScoreCard& c) {
    os << label << std::fixed << std::setprecision(1);
    for (double v : {c.nc, c.dac, c.ttc, c.comfort, c.ep, c.tl, c.lk, c.ec, c.ddc, c.pdms, c.epdms})
      os << ',' << v * 100.0;
    os << '\n';
    os.unsetf(std::ios_base::floatfield);
  };
  for (const ScoredScenario& s : report.rows) row(std::to_string(s.scenario_seed), s.card);
  row("mean", report.means);
  if (!os) throw DataError("score csv: write failed: " + path);
}

}  // namespace sagdrive
