#pragma once

#include <map>
#include <string>
#include <vector>

#include "sagdrive/harness.hpp"

namespace sagdrive {

namespace detail_report {

constexpr double kPlotSize = 512.0;

inline double px(double x) { return (x + GridFrame::kHalfExtent) / 32.0 * kPlotSize; }
inline double py(double y) { return (GridFrame::kHalfExtent - y) / 32.0 * kPlotSize; }

inline std::vector<std::pair<double, double>> box_points(const Obb& box) {
  std::vector<std::pair<double, double>> pts;
  for (Vec2 c : box.corners()) pts.emplace_back(px(c.x), py(c.y));
  return pts;
}

// BEV panel: map, occupancy, agents, predicted world state, and the planned
// versus ground-truth trajectories.
inline void draw_scenario(const Scenario& sc, const Trajectory& plan, const Tensor& occ_prob,
                          const std::vector<std::pair<int, std::array<double, 6>>>& pred_agents,
                          const GoalPose& pred_goal, const fs::path& path) {
  SvgCanvas svg(kPlotSize, kPlotSize + 40.0);
  double cell = kPlotSize / GridFrame::kSize;
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j < GridFrame::kSize; ++j) {
      bool drivable = sc.map.grid[static_cast<size_t>(i * GridFrame::kSize + j)] != 0;
      if (!drivable)
        svg.rect(j * cell, kPlotSize - (i + 1) * cell, cell, cell, "#d9d9d9");
    }
  // predicted occupancy probability above one half, in grid layout
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j < GridFrame::kSize; ++j)
      if (occ_prob.numel() == GridFrame::kSize * GridFrame::kSize &&
          occ_prob.at2(i, j) > 0.5)
        svg.rect(j * cell, kPlotSize - (i + 1) * cell, cell, cell, "#ff9933", 0.35);
  // ground-truth occupied cells at t (outline only via small dark squares)
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j < GridFrame::kSize; ++j)
      if (sc.gt_occ_t.at(i, j))
        svg.rect(j * cell + cell * 0.3, kPlotSize - (i + 1) * cell + cell * 0.3, cell * 0.4,
                 cell * 0.4, "#555555", 0.5);

  if (!sc.map.lane_centerline.empty()) {
    std::vector<std::pair<double, double>> cl;
    for (Vec2 p : sc.map.lane_centerline.points()) cl.emplace_back(px(p.x), py(p.y));
    svg.polyline(cl, "#9999ff", 1.0, "4,4");
  }
  for (const ScriptedAgent& agent : sc.agents)
    svg.polygon(box_points(agent.box.obb()), "#3355cc", "#7799ee", 0.5);
  for (const auto& [cls, box] : pred_agents) {
    double heading = std::atan2(box[2], box[3]);
    Obb obb{{box[0], box[1]}, heading, box[4], box[5]};
    svg.polygon(box_points(obb), "#cc2222", "none", 0.0);
  }
  svg.polygon(box_points(Obb{{0.0, 0.0}, 0.0, kEgoBoxLength, kEgoBoxWidth}), "#222222",
              "#bbbbbb", 0.8);

  std::vector<std::pair<double, double>> gt_pts{{px(0.0), py(0.0)}};
  for (const auto& w : sc.gt_trajectory.waypoints) gt_pts.emplace_back(px(w.x), py(w.y));
  svg.polyline(gt_pts, "#119911", 2.5);
  std::vector<std::pair<double, double>> plan_pts{{px(0.0), py(0.0)}};
  for (const auto& w : plan.waypoints) plan_pts.emplace_back(px(w.x), py(w.y));
  svg.polyline(plan_pts, "#cc2222", 2.5);
  svg.circle(px(sc.gt_goal.position.x), py(sc.gt_goal.position.y), 5.0, "#119911");
  svg.circle(px(pred_goal.position.x), py(pred_goal.position.y), 5.0, "#cc2222");

  svg.text(8.0, kPlotSize + 16.0,
           "scenario " + std::to_string(sc.seed) + "  gt=green plan=red agents=blue pred=red-box",
           12);
  svg.text(8.0, kPlotSize + 32.0, "orange: predicted occupancy > 0.5, gray: non-drivable", 12);
  svg.save(path.string());
}

inline std::vector<std::vector<double>> read_csv_columns(const fs::path& path, size_t n_cols,
                                                         bool skip_label_rows) {
  std::ifstream is(path);
  if (!is) throw DataError("report: cannot open " + path.string());
  std::string line;
  std::getline(is, line);  // header
  std::vector<std::vector<double>> cols(n_cols);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() < n_cols) continue;
    if (skip_label_rows && !fields[0].empty() && !std::isdigit(static_cast<unsigned char>(fields[0][0])))
      continue;
    for (size_t c = 0; c < n_cols; ++c) cols[c].push_back(std::stod(fields[c]));
  }
  return cols;
}

inline void draw_loss_curves(const fs::path& csv, const fs::path& out) {
  std::vector<std::vector<double>> cols = read_csv_columns(csv, 7, false);
  const std::vector<std::string> names = {"L_geo_t", "L_geo_f", "L_agent_t",
                                          "L_agent_f", "L_goal", "total"};
  const std::vector<std::string> colors = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                           "#d62728", "#9467bd", "#111111"};
  double w = 640.0, h = 420.0, margin = 50.0;
  SvgCanvas svg(w, h);
  double max_y = 1e-9, max_x = 1.0;
  for (size_t c = 1; c < 7; ++c)
    for (double v : cols[c]) max_y = std::max(max_y, v);
  for (double v : cols[0]) max_x = std::max(max_x, v);
  auto sx = [&](double e) { return margin + e / max_x * (w - 2 * margin); };
  auto sy = [&](double v) { return h - margin - v / max_y * (h - 2 * margin); };
  svg.line(margin, h - margin, w - margin, h - margin, "#333333");
  svg.line(margin, margin, margin, h - margin, "#333333");
  svg.text(w / 2 - 20, h - 12, "epoch");
  for (size_t c = 1; c < 7; ++c) {
    std::vector<std::pair<double, double>> pts;
    for (size_t i = 0; i < cols[0].size(); ++i) pts.emplace_back(sx(cols[0][i]), sy(cols[c][i]));
    svg.polyline(pts, colors[c - 1], c == 6 ? 2.5 : 1.5);
    svg.text(w - margin + 4, margin + 16.0 * static_cast<double>(c), names[c - 1], 11,
             colors[c - 1]);
  }
  std::ostringstream top;
  top << "max " << std::setprecision(3) << max_y;
  svg.text(4, margin, top.str(), 10);
  svg.save(out.string());
}

inline void draw_pdms_histogram(const fs::path& scores_csv, const fs::path& out) {
  std::vector<std::vector<double>> cols = read_csv_columns(scores_csv, 11, true);
  const std::vector<double>& pdms = cols[10];
  std::vector<int> bins(10, 0);
  for (double v : pdms) {
    int b = std::clamp(static_cast<int>(v / 10.0), 0, 9);  // values are x100
    bins[static_cast<size_t>(b)]++;
  }
  double w = 520.0, h = 360.0, margin = 40.0;
  SvgCanvas svg(w, h);
  int max_count = 1;
  for (int b : bins) max_count = std::max(max_count, b);
  double bar_w = (w - 2 * margin) / 10.0;
  for (int b = 0; b < 10; ++b) {
    double bh = (h - 2 * margin) * bins[static_cast<size_t>(b)] / max_count;
    svg.rect(margin + b * bar_w + 2, h - margin - bh, bar_w - 4, bh, "#4477cc");
    svg.text(margin + b * bar_w + bar_w / 2 - 10, h - margin + 16, std::to_string(b * 10), 10);
  }
  svg.text(w / 2 - 60, 20, "per-scenario PDMS (x100)", 13);
  svg.save(out.string());
}

}  // namespace detail_report

struct ReportPaths {
  std::vector<fs::path> plots;
  fs::path summary;
};

// Renders BEV panels for the first test scenarios with the trained model's
// predictions, the stage-1 loss curves, and the PDMS distribution.
inline ReportPaths cmd_report(const fs::path& run_dir, int n_scenario_plots = 4) {
  fs::path eval_dir = run_dir / "eval";
  if (!fs::exists(eval_dir / "summary.json") || !fs::exists(eval_dir / "trajectories.csv"))
    throw DataError("report: no evaluation artifacts in " + eval_dir.string() +
                    " (run eval first)");
  fs::path report_dir = run_dir / "report";
  fs::create_directories(report_dir);

  json eval_summary;
  {
    std::ifstream is(eval_dir / "summary.json");
    is >> eval_summary;
  }
  for (const char* key : {"n_scenarios", "methods", "ade"})
    if (!eval_summary.contains(key))
      throw DataError(std::string("report: eval summary missing key ") + key);

  ReportPaths out;
  fs::path losses = report_dir / "losses.svg";
  detail_report::draw_loss_curves(run_dir / "stage1_metrics.csv", losses);
  out.plots.push_back(losses);
  fs::path hist = report_dir / "pdms_hist.svg";
  detail_report::draw_pdms_histogram(eval_dir / "scores_model.csv", hist);
  out.plots.push_back(hist);

  // model predictions for the first few test scenarios
  std::vector<Scenario> test = read_dataset((run_dir / "data" / "test.sgds").string());
  WorldModel model = load_world_model((run_dir / "stage1.ckpt").string());

  // the attention masks as images, for inspection against the run config
  write_mask_pgm(build_structured_mask(model.layout()),
                 (report_dir / "mask_structured.pgm").string());
  write_mask_pgm(build_causal_mask(model.layout()), (report_dir / "mask_causal.pgm").string());

  std::map<uint64_t, Trajectory> plans;
  {
    std::ifstream is(eval_dir / "trajectories.csv");
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string f;
      std::getline(row, f, ',');
      uint64_t seed = std::stoull(f);
      std::getline(row, f, ',');
      int wp = std::stoi(f);
      Trajectory::Waypoint w;
      std::getline(row, f, ',');
      w.x = std::stod(f);
      std::getline(row, f, ',');
      w.y = std::stod(f);
      std::getline(row, f, ',');
      w.heading = std::stod(f);
      if (wp >= 0 && wp < Trajectory::kNumWaypoints)
        plans[seed].waypoints[static_cast<size_t>(wp)] = w;
    }
  }

  int plotted = 0;
  for (const Scenario& sc : test) {
    if (plotted >= n_scenario_plots) break;
    auto it = plans.find(sc.seed);
    if (it == plans.end()) continue;

    std::vector<Scenario> one{sc};
    WorldBatch batch = make_world_batch(one, model.config().n_agent_queries);
    Graph g;
    GraphParams p(g, model.params());
    WorldForward fwd = model.forward(g, p, batch, model.mask());
    Tensor occ_grid({GridFrame::kSize, GridFrame::kSize});
    if (model.config().scene_on) {
      Var logits = model.decode_occupancy(p, *fwd.blocks[0], TimePoint::kCurrent);
      Tensor probs = logits.value();
      for (auto& v : probs.data) v = 1.0 / (1.0 + std::exp(-v));
      occ_grid = patch_major_to_grid(Tensor({kOccCells}, probs.data));
    }
    std::vector<std::pair<int, std::array<double, 6>>> pred_agents;
    if (model.config().agent_on) {
      WorldModel::AgentHead head = model.decode_agents(p, *fwd.blocks[1], TimePoint::kCurrent);
      const Tensor& cls = head.class_logits.value();
      const Tensor& boxes = head.boxes.value();
      for (int64_t q = 0; q < cls.shape[1]; ++q) {
        int best = 0;
        for (int c = 1; c < kNumAgentClasses; ++c)
          if (cls.data[static_cast<size_t>(q * kNumAgentClasses + c)] >
              cls.data[static_cast<size_t>(q * kNumAgentClasses + best)])
            best = c;
        if (best == kNoObjectClass) continue;
        std::array<double, 6> b;
        for (int c = 0; c < kBoxDim; ++c) b[static_cast<size_t>(c)] =
            boxes.data[static_cast<size_t>(q * kBoxDim + c)];
        pred_agents.emplace_back(best, b);
      }
    }
    GoalPose pred_goal = sc.gt_goal;
    if (model.config().goal_on) {
      Tensor goal = model.predict_goal(p, *fwd.blocks[2]).value();
      pred_goal = GoalPose{{goal[0], goal[1]}, goal[2]};
    }
    fs::path plot = report_dir / ("scenario_" + std::to_string(sc.seed) + ".svg");
    detail_report::draw_scenario(sc, it->second, occ_grid, pred_agents, pred_goal, plot);
    out.plots.push_back(plot);
    ++plotted;
  }

  json summary;
  summary["plots"] = json::array();
  for (const fs::path& p : out.plots) summary["plots"].push_back(p.filename().string());
  summary["eval"] = eval_summary;
  out.summary = report_dir / "summary.json";
  std::ofstream os(out.summary);
  os << summary.dump(2) << '\n';
  if (!os) throw DataError("report: cannot write summary");
  return out;
}

}  // namespace sagdrive
