#pragma once

#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sagdrive/harness.hpp"

namespace sagdrive {

// One table row: a query-block/mask variant evaluated at one seed.
struct AblationRow {
  std::string exp;
  bool scene = true, agent = true, goal = true, future = true;
  std::string mask = "structured";
  uint64_t seed = 0;
  ScoreCard means;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::map<std::string, ScoreCard> variant_means;  // averaged over seeds
  bool full_ge_no_future = false;        // PDMS(d) >= PDMS(c)
  bool structured_ep_within_margin = false;  // EP(d) >= EP(e) - 1.0 points
  bool full_ge_scene_only = false;       // PDMS(d) >= PDMS(a)
  double pdms_full = 0.0, pdms_no_future = 0.0, pdms_scene_only = 0.0;
  double ep_structured = 0.0, ep_causal = 0.0;
};

namespace detail_ablate {

struct Variant {
  std::string name;
  bool scene, agent, goal, future;
  MaskMode mask;
};

inline std::vector<Variant> variants() {
  return {
      {"a_scene", true, false, false, false, MaskMode::kStructured},
      {"b_scene_agent", true, true, false, false, MaskMode::kStructured},
      {"c_scene_agent_goal", true, true, true, false, MaskMode::kStructured},
      {"d_full", true, true, true, true, MaskMode::kStructured},
      {"e_full_causal", true, true, true, true, MaskMode::kCausal},
  };
}

}  // namespace detail_ablate

inline void write_ablation_csv(const AblationResult& result, const fs::path& path) {
  std::ofstream os(path);
  os << "exp,seed,scene,agent,goal,future,mask,NC,DAC,TTC,EP,PDMS\n";
  os << std::fixed << std::setprecision(1);
  auto emit = [&os](const AblationRow& r, const std::string& seed_label) {
    os << r.exp << ',' << seed_label << ',' << (r.scene ? 1 : 0) << ',' << (r.agent ? 1 : 0)
       << ',' << (r.goal ? 1 : 0) << ',' << (r.future ? 1 : 0) << ',' << r.mask << ','
       << r.means.nc * 100.0 << ',' << r.means.dac * 100.0 << ',' << r.means.ttc * 100.0 << ','
       << r.means.ep * 100.0 << ',' << r.means.pdms * 100.0 << '\n';
  };
  for (const AblationRow& r : result.rows) emit(r, std::to_string(r.seed));
  for (const auto& [name, means] : result.variant_means) {
    AblationRow mean_row;
    mean_row.exp = name;
    mean_row.means = means;
    for (const AblationRow& r : result.rows)
      if (r.exp == name) {
        mean_row.scene = r.scene;
        mean_row.agent = r.agent;
        mean_row.goal = r.goal;
        mean_row.future = r.future;
        mean_row.mask = r.mask;
        break;
      }
    emit(mean_row, "mean");
  }
  if (!os) throw DataError("ablation: cannot write " + path.string());
}

inline std::string ablation_table_text(const AblationResult& result) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "Exp                   Scene Agent Goal Future Mask        NC    DAC   TTC   EP    PDMS\n";
  for (const auto& [name, m] : result.variant_means) {
    const AblationRow* proto = nullptr;
    for (const AblationRow& r : result.rows)
      if (r.exp == name) proto = &r;
    os << std::left << std::setw(22) << name << std::right << std::setw(5)
       << (proto && proto->scene ? "x" : "-") << std::setw(6) << (proto && proto->agent ? "x" : "-")
       << std::setw(5) << (proto && proto->goal ? "x" : "-") << std::setw(7)
       << (proto && proto->future ? "x" : "-") << "  " << std::left << std::setw(11)
       << (proto ? proto->mask : "") << std::right << std::setw(6) << m.nc * 100.0 << std::setw(6)
       << m.dac * 100.0 << std::setw(6) << m.ttc * 100.0 << std::setw(6) << m.ep * 100.0
       << std::setw(7) << m.pdms * 100.0 << '\n';
  }
  return os.str();
}

// Sweeps the query-block and mask variants over three seeds, sharing the
// generated data between variants at each seed, and reports directional
// comparisons rather than absolute targets.
inline AblationResult cmd_ablate(const RunConfig& base, const fs::path& out_dir) {
  AblationResult result;
  fs::create_directories(out_dir);
  write_effective_config(base, out_dir);

  std::map<std::string, std::vector<ScoreCard>> per_variant;
  for (uint64_t seed_offset = 0; seed_offset < 3; ++seed_offset) {
    RunConfig cfg = base;
    cfg.seed = base.seed + seed_offset;
    fs::path seed_dir = out_dir / ("seed_" + std::to_string(cfg.seed));
    fs::path data_dir = seed_dir / "data";
    cmd_gen_data(cfg, data_dir);

    for (const detail_ablate::Variant& v : detail_ablate::variants()) {
      RunConfig vcfg = cfg;
      vcfg.model.scene_on = v.scene;
      vcfg.model.agent_on = v.agent;
      vcfg.model.goal_on = v.goal;
      vcfg.model.future_on = v.future;
      vcfg.model.mask_mode = v.mask;
      fs::path run_dir = seed_dir / v.name;
      Stage1Result s1 = cmd_train_stage1(vcfg, data_dir, run_dir);
      Stage2Result s2 = cmd_train_stage2(vcfg, data_dir, s1.checkpoint.string(), run_dir);
      EvalResult ev = cmd_eval(vcfg, data_dir, s1.checkpoint.string(), s2.checkpoint.string(),
                               run_dir / "eval");
      AblationRow row;
      row.exp = v.name;
      row.scene = v.scene;
      row.agent = v.agent;
      row.goal = v.goal;
      row.future = v.future;
      row.mask = v.mask == MaskMode::kStructured ? "structured" : "causal";
      row.seed = cfg.seed;
      row.means = ev.model.means;
      result.rows.push_back(row);
      per_variant[v.name].push_back(ev.model.means);
    }
  }

  for (const auto& [name, cards] : per_variant) {
    ScoreCard mean{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    for (const ScoreCard& c : cards) {
      mean.nc += c.nc;
      mean.dac += c.dac;
      mean.ttc += c.ttc;
      mean.comfort += c.comfort;
      mean.ep += c.ep;
      mean.tl += c.tl;
      mean.lk += c.lk;
      mean.ec += c.ec;
      mean.ddc += c.ddc;
      mean.pdms += c.pdms;
      mean.epdms += c.epdms;
    }
    double n = static_cast<double>(cards.size());
    mean.nc /= n;
    mean.dac /= n;
    mean.ttc /= n;
    mean.comfort /= n;
    mean.ep /= n;
    mean.tl /= n;
    mean.lk /= n;
    mean.ec /= n;
    mean.ddc /= n;
    mean.pdms /= n;
    mean.epdms /= n;
    result.variant_means[name] = mean;
  }

  result.pdms_full = result.variant_means.at("d_full").pdms * 100.0;
  result.pdms_no_future = result.variant_means.at("c_scene_agent_goal").pdms * 100.0;
  result.pdms_scene_only = result.variant_means.at("a_scene").pdms * 100.0;
  result.ep_structured = result.variant_means.at("d_full").ep * 100.0;
  result.ep_causal = result.variant_means.at("e_full_causal").ep * 100.0;
  result.full_ge_no_future = result.pdms_full >= result.pdms_no_future;
  result.structured_ep_within_margin = result.ep_structured >= result.ep_causal - 1.0;
  result.full_ge_scene_only = result.pdms_full >= result.pdms_scene_only;

  write_ablation_csv(result, out_dir / "ablation.csv");
  json summary;
  for (const auto& [name, means] : result.variant_means)
    summary["variants"][name] = score_means_json(means);
  summary["flags"] = {{"full_ge_no_future", result.full_ge_no_future},
                      {"structured_ep_within_margin", result.structured_ep_within_margin},
                      {"full_ge_scene_only", result.full_ge_scene_only}};
  summary["deltas"] = {{"pdms_full_minus_no_future", result.pdms_full - result.pdms_no_future},
                       {"pdms_full_minus_scene_only", result.pdms_full - result.pdms_scene_only},
                       {"ep_structured_minus_causal", result.ep_structured - result.ep_causal}};
  std::ofstream os(out_dir / "ablation_summary.json");
  os << summary.dump(2) << '\n';
  if (!os) throw DataError("ablation: cannot write summary in " + out_dir.string());
  return result;
}

}  // namespace sagdrive
