#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sagdrive/diffplanner.hpp"
#include "sagdrive/errors.hpp"
#include "sagdrive/pdmscore.hpp"
#include "sagdrive/scenegen.hpp"
#include "sagdrive/svg.hpp"
#include "sagdrive/worldmodel.hpp"

namespace sagdrive {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration: JSON document with defaults for every field, strict
// (unknown keys rejected), dot-path overrides for sweeps.
// ---------------------------------------------------------------------------

struct RunConfig {
  uint64_t seed = 42;
  int train_count = 2000, val_count = 200, test_count = 200;
  GenConfig gen;
  WorldModelConfig model;
  PlannerConfig planner;
  double s1_lr = 3e-4;
  int s1_epochs = 10;
  int s1_batch = 16;
  int s1_patience = 3;
  double s2_lr = 1e-3;
  int s2_epochs = 15;
  int s2_batch = 16;
  double grad_clip = 5.0;
  Weights weights;
  int sample_batch = 16;
};

namespace detail_cfg {

inline void check_keys(const json& j, const std::set<std::string>& known,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("config: unknown key \"" + it.key() + "\" in " + where);
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail_cfg

inline json config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data"] = {{"train", c.train_count}, {"val", c.val_count}, {"test", c.test_count}};
  j["gen"] = {{"agent_count_min", c.gen.agent_count_min},
              {"agent_count_max", c.gen.agent_count_max},
              {"ego_speed_min", c.gen.ego_speed_min},
              {"ego_speed_max", c.gen.ego_speed_max},
              {"vehicle_speed_min", c.gen.vehicle_speed_min},
              {"vehicle_speed_max", c.gen.vehicle_speed_max},
              {"pedestrian_speed_min", c.gen.pedestrian_speed_min},
              {"pedestrian_speed_max", c.gen.pedestrian_speed_max},
              {"cyclist_speed_min", c.gen.cyclist_speed_min},
              {"cyclist_speed_max", c.gen.cyclist_speed_max},
              {"family_mix", c.gen.family_mix},
              {"traffic_light_prob", c.gen.traffic_light_prob},
              {"red_light_prob", c.gen.red_light_prob},
              {"road_half_width", c.gen.road_half_width}};
  j["model"] = {{"d_model", c.model.d_model},
                {"n_layers", c.model.n_layers},
                {"n_heads", c.model.n_heads},
                {"n_agent_queries", c.model.n_agent_queries},
                {"n_scene_latents", c.model.n_scene_latents},
                {"scene", c.model.scene_on},
                {"agent", c.model.agent_on},
                {"goal", c.model.goal_on},
                {"future", c.model.future_on},
                {"mask", c.model.mask_mode == MaskMode::kStructured ? "structured" : "causal"}};
  std::string fusion = c.planner.fusion == FusionMode::kConcat        ? "concat"
                       : c.planner.fusion == FusionMode::kIncremental ? "incremental"
                                                                      : "per-layer";
  j["planner"] = {{"d_model", c.planner.d_model},
                  {"n_layers", c.planner.n_layers},
                  {"n_heads", c.planner.n_heads},
                  {"time_embed_dim", c.planner.time_embed_dim},
                  {"steps", c.planner.diffusion_steps},
                  {"beta_min", c.planner.beta_min},
                  {"beta_max", c.planner.beta_max},
                  {"fusion", fusion}};
  j["optim"] = {{"s1_lr", c.s1_lr},           {"s1_epochs", c.s1_epochs},
                {"s1_batch", c.s1_batch},     {"s1_patience", c.s1_patience},
                {"s2_lr", c.s2_lr},           {"s2_epochs", c.s2_epochs},
                {"s2_batch", c.s2_batch},     {"grad_clip", c.grad_clip}};
  j["weights"] = {{"ep", c.weights.ep_w},
                  {"ttc", c.weights.ttc_w},
                  {"comfort", c.weights.c_w},
                  {"lk", c.weights.lk_w},
                  {"ec", c.weights.ec_w}};
  j["eval"] = {{"sample_batch", c.sample_batch}};
  return j;
}

inline RunConfig config_from_json(const json& j) {
  using detail_cfg::check_keys;
  using detail_cfg::maybe;
  RunConfig c;
  check_keys(j, {"seed", "data", "gen", "model", "planner", "optim", "weights", "eval"}, "root");
  maybe(j, "seed", c.seed);
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"train", "val", "test"}, "data");
    maybe(d, "train", c.train_count);
    maybe(d, "val", c.val_count);
    maybe(d, "test", c.test_count);
  }
  if (j.contains("gen")) {
    const json& g = j.at("gen");
    check_keys(g,
               {"agent_count_min", "agent_count_max", "ego_speed_min", "ego_speed_max",
                "vehicle_speed_min", "vehicle_speed_max", "pedestrian_speed_min",
                "pedestrian_speed_max", "cyclist_speed_min", "cyclist_speed_max", "family_mix",
                "traffic_light_prob", "red_light_prob", "road_half_width"},
               "gen");
    maybe(g, "agent_count_min", c.gen.agent_count_min);
    maybe(g, "agent_count_max", c.gen.agent_count_max);
    maybe(g, "ego_speed_min", c.gen.ego_speed_min);
    maybe(g, "ego_speed_max", c.gen.ego_speed_max);
    maybe(g, "vehicle_speed_min", c.gen.vehicle_speed_min);
    maybe(g, "vehicle_speed_max", c.gen.vehicle_speed_max);
    maybe(g, "pedestrian_speed_min", c.gen.pedestrian_speed_min);
    maybe(g, "pedestrian_speed_max", c.gen.pedestrian_speed_max);
    maybe(g, "cyclist_speed_min", c.gen.cyclist_speed_min);
    maybe(g, "cyclist_speed_max", c.gen.cyclist_speed_max);
    maybe(g, "family_mix", c.gen.family_mix);
    maybe(g, "traffic_light_prob", c.gen.traffic_light_prob);
    maybe(g, "red_light_prob", c.gen.red_light_prob);
    maybe(g, "road_half_width", c.gen.road_half_width);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m,
               {"d_model", "n_layers", "n_heads", "n_agent_queries", "n_scene_latents", "scene",
                "agent", "goal", "future", "mask"},
               "model");
    maybe(m, "d_model", c.model.d_model);
    maybe(m, "n_layers", c.model.n_layers);
    maybe(m, "n_heads", c.model.n_heads);
    maybe(m, "n_agent_queries", c.model.n_agent_queries);
    maybe(m, "n_scene_latents", c.model.n_scene_latents);
    maybe(m, "scene", c.model.scene_on);
    maybe(m, "agent", c.model.agent_on);
    maybe(m, "goal", c.model.goal_on);
    maybe(m, "future", c.model.future_on);
    if (m.contains("mask")) {
      std::string mask = m.at("mask").get<std::string>();
      if (mask == "structured")
        c.model.mask_mode = MaskMode::kStructured;
      else if (mask == "causal")
        c.model.mask_mode = MaskMode::kCausal;
      else
        throw ConfigError("config: model.mask must be structured or causal, got " + mask);
    }
  }
  if (j.contains("planner")) {
    const json& p = j.at("planner");
    check_keys(p,
               {"d_model", "n_layers", "n_heads", "time_embed_dim", "steps", "beta_min",
                "beta_max", "fusion"},
               "planner");
    maybe(p, "d_model", c.planner.d_model);
    maybe(p, "n_layers", c.planner.n_layers);
    maybe(p, "n_heads", c.planner.n_heads);
    maybe(p, "time_embed_dim", c.planner.time_embed_dim);
    maybe(p, "steps", c.planner.diffusion_steps);
    maybe(p, "beta_min", c.planner.beta_min);
    maybe(p, "beta_max", c.planner.beta_max);
    if (p.contains("fusion")) {
      std::string fusion = p.at("fusion").get<std::string>();
      if (fusion == "concat")
        c.planner.fusion = FusionMode::kConcat;
      else if (fusion == "incremental")
        c.planner.fusion = FusionMode::kIncremental;
      else if (fusion == "per-layer")
        c.planner.fusion = FusionMode::kPerLayer;
      else
        throw ConfigError("config: planner.fusion must be concat, incremental, or per-layer");
    }
  }
  if (j.contains("optim")) {
    const json& o = j.at("optim");
    check_keys(o,
               {"s1_lr", "s1_epochs", "s1_batch", "s1_patience", "s2_lr", "s2_epochs", "s2_batch",
                "grad_clip"},
               "optim");
    maybe(o, "s1_lr", c.s1_lr);
    maybe(o, "s1_epochs", c.s1_epochs);
    maybe(o, "s1_batch", c.s1_batch);
    maybe(o, "s1_patience", c.s1_patience);
    maybe(o, "s2_lr", c.s2_lr);
    maybe(o, "s2_epochs", c.s2_epochs);
    maybe(o, "s2_batch", c.s2_batch);
    maybe(o, "grad_clip", c.grad_clip);
  }
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    check_keys(w, {"ep", "ttc", "comfort", "lk", "ec"}, "weights");
    maybe(w, "ep", c.weights.ep_w);
    maybe(w, "ttc", c.weights.ttc_w);
    maybe(w, "comfort", c.weights.c_w);
    maybe(w, "lk", c.weights.lk_w);
    maybe(w, "ec", c.weights.ec_w);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, {"sample_batch"}, "eval");
    maybe(e, "sample_batch", c.sample_batch);
  }
  c.planner.cond_width = c.model.d_model;
  c.gen.validate();
  c.weights.validate();
  if (c.train_count < 0 || c.val_count < 0 || c.test_count < 0)
    throw ConfigError("config: dataset counts must be non-negative");
  if (c.s1_batch < 1 || c.s2_batch < 1) throw ConfigError("config: batch sizes must be >= 1");
  return c;
}

// "key.path=value" override; the value is parsed as JSON when possible,
// otherwise taken as a string.
inline void apply_override(json& j, const std::string& spec) {
  size_t eq = spec.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects key.path=value, got \"" + spec + "\"");
  std::string path = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  json* node = &j;
  size_t pos = 0;
  while (true) {
    size_t dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw ConfigError("--set: empty key segment in \"" + path + "\"");
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      break;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    try {
      is >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError("config: parse error in " + path + ": " + e.what());
    }
  }
  for (const std::string& spec : overrides) apply_override(j, spec);
  return config_from_json(j);
}

inline void write_effective_config(const RunConfig& c, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream os(dir / "config.json");
  os << config_to_json(c).dump(2) << '\n';
  if (!os) throw DataError("config: cannot write effective config in " + dir.string());
}

// Run-directory root from the environment, applied to relative paths.
inline fs::path resolve_run_path(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("SAGDRIVE_RUN_ROOT")) return fs::path(root) / p;
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint metadata helpers
// ---------------------------------------------------------------------------

namespace detail_meta {

inline Tensor u64_tensor(uint64_t v) {
  Tensor t({4});
  for (int i = 0; i < 4; ++i) t[i] = static_cast<double>((v >> (16 * i)) & 0xffffULL);
  return t;
}

inline uint64_t tensor_u64(const Tensor& t) {
  uint64_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint64_t>(t[i]) << (16 * i);
  return v;
}

}  // namespace detail_meta

inline std::map<std::string, Tensor> world_model_meta(const WorldModelConfig& cfg) {
  std::map<std::string, Tensor> meta;
  meta["mask_mode"] = Tensor::scalar(cfg.mask_mode == MaskMode::kStructured ? 1.0 : 0.0);
  meta["dims"] = Tensor({3}, {static_cast<double>(cfg.d_model), static_cast<double>(cfg.n_layers),
                              static_cast<double>(cfg.n_heads)});
  meta["toggles"] = Tensor({4}, {cfg.scene_on ? 1.0 : 0.0, cfg.agent_on ? 1.0 : 0.0,
                                 cfg.goal_on ? 1.0 : 0.0, cfg.future_on ? 1.0 : 0.0});
  meta["queries"] = Tensor({2}, {static_cast<double>(cfg.n_agent_queries),
                                 static_cast<double>(cfg.n_scene_latents)});
  return meta;
}

inline WorldModelConfig world_model_config_from_meta(const std::map<std::string, Tensor>& meta) {
  WorldModelConfig cfg;
  cfg.mask_mode = meta.at("mask_mode")[0] > 0.5 ? MaskMode::kStructured : MaskMode::kCausal;
  const Tensor& dims = meta.at("dims");
  cfg.d_model = static_cast<int>(dims[0]);
  cfg.n_layers = static_cast<int>(dims[1]);
  cfg.n_heads = static_cast<int>(dims[2]);
  const Tensor& tog = meta.at("toggles");
  cfg.scene_on = tog[0] > 0.5;
  cfg.agent_on = tog[1] > 0.5;
  cfg.goal_on = tog[2] > 0.5;
  cfg.future_on = tog[3] > 0.5;
  const Tensor& q = meta.at("queries");
  cfg.n_agent_queries = static_cast<int>(q[0]);
  cfg.n_scene_latents = static_cast<int>(q[1]);
  return cfg;
}

inline void save_world_model(const std::string& path, const WorldModel& model) {
  save_store(path, model.params(), world_model_meta(model.config()));
}

inline WorldModel load_world_model(const std::string& path) {
  std::map<std::string, Tensor> meta;
  ParamStore store = load_store(path, &meta);
  if (!meta.count("mask_mode")) throw DataError("checkpoint: missing world-model metadata in " + path);
  return WorldModel(world_model_config_from_meta(meta), std::move(store));
}

inline void save_planner(const std::string& path, const DiffusionPlanner& planner,
                         uint64_t backbone_checksum) {
  std::map<std::string, Tensor> meta;
  const PlannerConfig& cfg = planner.config();
  meta["fusion"] = Tensor::scalar(static_cast<double>(cfg.fusion));
  meta["dims"] = Tensor({4}, {static_cast<double>(cfg.d_model), static_cast<double>(cfg.n_layers),
                              static_cast<double>(cfg.n_heads),
                              static_cast<double>(cfg.time_embed_dim)});
  meta["steps"] = Tensor({3}, {static_cast<double>(cfg.diffusion_steps), cfg.beta_min, cfg.beta_max});
  meta["cond_width"] = Tensor::scalar(static_cast<double>(cfg.cond_width));
  meta["norm_mean"] = planner.norm().mean;
  meta["norm_std"] = planner.norm().stddev;
  meta["backbone_checksum"] = detail_meta::u64_tensor(backbone_checksum);
  save_store(path, planner.params(), meta);
}

struct LoadedPlanner {
  DiffusionPlanner planner;
  uint64_t backbone_checksum = 0;
};

inline LoadedPlanner load_planner(const std::string& path) {
  std::map<std::string, Tensor> meta;
  ParamStore store = load_store(path, &meta);
  if (!meta.count("fusion")) throw DataError("checkpoint: missing planner metadata in " + path);
  PlannerConfig cfg;
  cfg.fusion = static_cast<FusionMode>(static_cast<int>(meta.at("fusion")[0]));
  const Tensor& dims = meta.at("dims");
  cfg.d_model = static_cast<int>(dims[0]);
  cfg.n_layers = static_cast<int>(dims[1]);
  cfg.n_heads = static_cast<int>(dims[2]);
  cfg.time_embed_dim = static_cast<int>(dims[3]);
  const Tensor& steps = meta.at("steps");
  cfg.diffusion_steps = static_cast<int>(steps[0]);
  cfg.beta_min = steps[1];
  cfg.beta_max = steps[2];
  cfg.cond_width = static_cast<int>(meta.at("cond_width")[0]);
  LoadedPlanner out{DiffusionPlanner(cfg, std::move(store)),
                    detail_meta::tensor_u64(meta.at("backbone_checksum"))};
  out.planner.norm().mean = meta.at("norm_mean");
  out.planner.norm().stddev = meta.at("norm_std");
  return out;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct DatasetPaths {
  fs::path train, val, test;
};

inline DatasetPaths dataset_paths(const fs::path& dir) {
  return {dir / "train.sgds", dir / "val.sgds", dir / "test.sgds"};
}

// Disjoint seed ranges per split: train first, then val, then test.
inline DatasetPaths cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  DatasetPaths paths = dataset_paths(out_dir);
  auto make_split = [&](uint64_t first, int count, const fs::path& path) {
    std::vector<Scenario> scenarios;
    scenarios.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
      scenarios.push_back(generate_scenario(first + static_cast<uint64_t>(i), cfg.gen));
    write_dataset(scenarios, path.string());
  };
  uint64_t base = cfg.seed * 1000003ULL;
  make_split(base, cfg.train_count, paths.train);
  make_split(base + static_cast<uint64_t>(cfg.train_count), cfg.val_count, paths.val);
  make_split(base + static_cast<uint64_t>(cfg.train_count + cfg.val_count), cfg.test_count,
             paths.test);
  write_effective_config(cfg, out_dir);
  return paths;
}

// ---------------------------------------------------------------------------
// Stage-1 training
// ---------------------------------------------------------------------------

struct Stage1Metrics {
  int epoch = 0;
  double geo_t = 0.0, geo_f = 0.0, agent_t = 0.0, agent_f = 0.0, goal = 0.0, total = 0.0;
};

inline void write_stage1_csv(const std::vector<Stage1Metrics>& rows, const fs::path& path) {
  std::ofstream os(path);
  os << "epoch,L_geo_t,L_geo_f,L_agent_t,L_agent_f,L_goal,total\n";
  for (const Stage1Metrics& m : rows)
    os << m.epoch << ',' << m.geo_t << ',' << m.geo_f << ',' << m.agent_t << ',' << m.agent_f
       << ',' << m.goal << ',' << m.total << '\n';
  if (!os) throw DataError("metrics: cannot write " + path.string());
}

namespace detail_train {

inline void clip_gradients(std::map<std::string, Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data) sq += v * v;
  double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  double k = max_norm / norm;
  for (auto& [name, g] : grads)
    for (double& v : g.data) v *= k;
}

struct Stage1Pass {
  Stage1Metrics sums;  // component sums weighted by batch sizes
  int count = 0;

  void absorb(const Stage1Components& c, double total, int batch) {
    auto val = [](const std::optional<Var>& v) { return v ? v->value()[0] : 0.0; };
    sums.geo_t += val(c.geo_t) * batch;
    sums.geo_f += val(c.geo_f) * batch;
    sums.agent_t += val(c.agent_t) * batch;
    sums.agent_f += val(c.agent_f) * batch;
    sums.goal += val(c.goal) * batch;
    sums.total += total * batch;
    count += batch;
  }

  Stage1Metrics mean(int epoch) const {
    Stage1Metrics m;
    m.epoch = epoch;
    double n = std::max(count, 1);
    m.geo_t = sums.geo_t / n;
    m.geo_f = sums.geo_f / n;
    m.agent_t = sums.agent_t / n;
    m.agent_f = sums.agent_f / n;
    m.goal = sums.goal / n;
    m.total = sums.total / n;
    return m;
  }
};

// One forward pass with all enabled stage-1 losses.
inline std::pair<Var, Stage1Components> stage1_forward(WorldModel& model, Graph& g,
                                                       GraphParams& p, const WorldBatch& batch,
                                                       const AttentionMask& mask) {
  WorldForward fwd = model.forward(g, p, batch, mask);
  const WorldModelConfig& cfg = model.config();
  Stage1Components c;
  if (cfg.scene_on) {
    c.geo_t = loss_geo(g, model.decode_occupancy(p, *fwd.blocks[0], TimePoint::kCurrent),
                       batch.occ_t, batch.seeds)
                  .total;
    if (cfg.future_on)
      c.geo_f = loss_geo(g, model.decode_occupancy(p, *fwd.blocks[3], TimePoint::kFuture),
                         batch.occ_f, batch.seeds)
                    .total;
  }
  if (cfg.agent_on) {
    c.agent_t = loss_agent(g, model.decode_agents(p, *fwd.blocks[1], TimePoint::kCurrent),
                           batch.agents_t);
    if (cfg.future_on)
      c.agent_f = loss_agent(g, model.decode_agents(p, *fwd.blocks[4], TimePoint::kFuture),
                             batch.agents_f);
  }
  if (cfg.goal_on) c.goal = loss_goal(g, model.predict_goal(p, *fwd.blocks[2]), batch.goal);
  return {stage1_loss(g, c), c};
}

inline Stage1Metrics stage1_eval(WorldModel& model, std::span<const Scenario> scenarios,
                                 const AttentionMask& mask, int batch_size, int epoch) {
  Stage1Pass pass;
  for (size_t base = 0; base < scenarios.size(); base += static_cast<size_t>(batch_size)) {
    size_t count = std::min(static_cast<size_t>(batch_size), scenarios.size() - base);
    WorldBatch batch =
        make_world_batch(scenarios.subspan(base, count), model.config().n_agent_queries);
    Graph g;
    GraphParams p(g, model.params());
    auto [total, comps] = stage1_forward(model, g, p, batch, mask);
    pass.absorb(comps, total.value()[0], static_cast<int>(count));
  }
  return pass.mean(epoch);
}

}  // namespace detail_train

struct Stage1Result {
  fs::path checkpoint;
  fs::path metrics_csv;
  std::vector<Stage1Metrics> train_curve;  // epoch 0 = pre-training evaluation
  std::vector<Stage1Metrics> val_curve;
};

inline Stage1Result cmd_train_stage1(const RunConfig& cfg, const fs::path& data_dir,
                                     const fs::path& run_dir,
                                     const std::string& resume_path = "") {
  DatasetPaths paths = dataset_paths(data_dir);
  std::vector<Scenario> train = read_dataset(paths.train.string());
  std::vector<Scenario> val = read_dataset(paths.val.string());
  if (train.empty()) throw DataError("stage1: empty training split in " + data_dir.string());
  fs::create_directories(run_dir);
  write_effective_config(cfg, run_dir);

  WorldModel model = resume_path.empty()
                         ? WorldModel(cfg.model, Rng::mix(cfg.seed, 0x51a9e1ULL))
                         : load_world_model(resume_path);
  AttentionMask mask = model.mask();
  AdamConfig adam;
  adam.lr = cfg.s1_lr;

  Stage1Result result;
  result.checkpoint = run_dir / "stage1.ckpt";
  result.metrics_csv = run_dir / "stage1_metrics.csv";
  result.train_curve.push_back(
      detail_train::stage1_eval(model, train, mask, cfg.s1_batch, 0));
  result.val_curve.push_back(detail_train::stage1_eval(model, val, mask, cfg.s1_batch, 0));

  double best_val = result.val_curve.back().total;
  int epochs_since_best = 0;
  for (int epoch = 1; epoch <= cfg.s1_epochs; ++epoch) {
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(Rng::mix(Rng::mix(cfg.seed, 0x0e90c4ULL), static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

    detail_train::Stage1Pass pass;
    for (size_t base = 0; base < order.size(); base += static_cast<size_t>(cfg.s1_batch)) {
      size_t count = std::min(static_cast<size_t>(cfg.s1_batch), order.size() - base);
      std::vector<Scenario> chunk;
      chunk.reserve(count);
      for (size_t i = 0; i < count; ++i) chunk.push_back(train[order[base + i]]);
      WorldBatch batch = make_world_batch(chunk, cfg.model.n_agent_queries);
      Graph g;
      GraphParams p(g, model.params());
      auto [total, comps] = detail_train::stage1_forward(model, g, p, batch, mask);
      double value = total.value()[0];
      g.backward(total);
      std::map<std::string, Tensor> grads = p.grads();
      detail_train::clip_gradients(grads, cfg.grad_clip);
      model.params().adam_step(grads, adam);
      pass.absorb(comps, value, static_cast<int>(count));
    }
    result.train_curve.push_back(pass.mean(epoch));
    result.val_curve.push_back(detail_train::stage1_eval(model, val, mask, cfg.s1_batch, epoch));

    double val_total = result.val_curve.back().total;
    if (val_total < best_val - 1e-9) {
      best_val = val_total;
      epochs_since_best = 0;
    } else if (++epochs_since_best > cfg.s1_patience) {
      break;  // early stop on the validation total
    }
  }

  write_stage1_csv(result.train_curve, result.metrics_csv);
  write_stage1_csv(result.val_curve, run_dir / "stage1_val_metrics.csv");
  save_world_model(result.checkpoint.string(), model);
  return result;
}

// ---------------------------------------------------------------------------
// Stage-2 training: backbone frozen, diffusion objective (plus direct
// supervision of the learned prior, whose parameters are planner-only).
// ---------------------------------------------------------------------------

struct Stage2Result {
  fs::path checkpoint;
  fs::path metrics_csv;
  uint64_t backbone_checksum_before = 0;
  uint64_t backbone_checksum_after = 0;
  std::vector<std::array<double, 3>> curve;  // epoch, diff loss, prior loss
};

inline Stage2Result cmd_train_stage2(const RunConfig& cfg, const fs::path& data_dir,
                                     const std::string& stage1_ckpt, const fs::path& run_dir) {
  DatasetPaths paths = dataset_paths(data_dir);
  std::vector<Scenario> train = read_dataset(paths.train.string());
  if (train.empty()) throw DataError("stage2: empty training split in " + data_dir.string());
  fs::create_directories(run_dir);
  write_effective_config(cfg, run_dir);

  WorldModel model = load_world_model(stage1_ckpt);
  if (model.config().block_sizes() != cfg.model.block_sizes() ||
      model.config().d_model != cfg.model.d_model)
    throw ConfigError("stage2: checkpoint " + stage1_ckpt +
                      " was trained with a different query layout than this config");

  Stage2Result result;
  result.checkpoint = run_dir / "planner.ckpt";
  result.metrics_csv = run_dir / "stage2_metrics.csv";
  result.backbone_checksum_before = model.params().checksum();

  std::vector<ConditionSource> conds = make_condition_sources(model, train, cfg.sample_batch);

  PlannerConfig pcfg = cfg.planner;
  pcfg.cond_width = model.config().d_model;
  DiffusionPlanner planner(pcfg, Rng::mix(cfg.seed, 0x52a9e2ULL));
  planner.norm() = compute_traj_norm(train);
  const DiffusionSchedule& schedule = planner.schedule();
  AdamConfig adam;
  adam.lr = cfg.s2_lr;

  std::vector<Tensor> targets;  // normalized flat trajectories
  targets.reserve(train.size());
  for (const Scenario& sc : train)
    targets.push_back(planner.norm().normalize(trajectory_to_flat(sc.gt_trajectory)));

  Rng noise_rng(Rng::mix(cfg.seed, 0xd1f2f3ULL));
  for (int epoch = 1; epoch <= cfg.s2_epochs; ++epoch) {
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(Rng::mix(Rng::mix(cfg.seed, 0x0e90c5ULL), static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

    double diff_sum = 0.0, prior_sum = 0.0;
    int seen = 0;
    for (size_t base = 0; base < order.size(); base += static_cast<size_t>(cfg.s2_batch)) {
      size_t count = std::min(static_cast<size_t>(cfg.s2_batch), order.size() - base);
      Tensor noisy({static_cast<int64_t>(count), kTrajDim});
      Tensor eps({static_cast<int64_t>(count), kTrajDim});
      Tensor clean({static_cast<int64_t>(count), kTrajDim});
      std::vector<int> ts;
      std::vector<const ConditionSource*> batch_conds;
      for (size_t i = 0; i < count; ++i) {
        size_t idx = order[base + i];
        ts.push_back(static_cast<int>(noise_rng.uniform_int(1, schedule.steps)));
        batch_conds.push_back(&conds[idx]);
        Tensor e({kTrajDim});
        for (auto& v : e.data) v = noise_rng.normal();
        Tensor at = q_sample(schedule, ts.back(), targets[idx], e);
        for (int jj = 0; jj < kTrajDim; ++jj) {
          noisy.at2(static_cast<int64_t>(i), jj) = at[jj];
          eps.at2(static_cast<int64_t>(i), jj) = e[jj];
          clean.at2(static_cast<int64_t>(i), jj) = targets[idx][jj];
        }
      }
      Graph g;
      GraphParams p(g, planner.params());
      Var eps_hat = planner.net_forward(g, p, g.input(noisy), ts, batch_conds).eps_hat;
      Var diff_loss = diffusion_l2(eps_hat, eps);
      Var prior_loss = scale(sum_all(square(sub(planner.prior(g, p, batch_conds),
                                                g.input(clean)))),
                             1.0 / static_cast<double>(count));
      Var total = add(diff_loss, prior_loss);
      diff_sum += diff_loss.value()[0] * static_cast<double>(count);
      prior_sum += prior_loss.value()[0] * static_cast<double>(count);
      seen += static_cast<int>(count);
      g.backward(total);
      std::map<std::string, Tensor> grads = p.grads();
      detail_train::clip_gradients(grads, cfg.grad_clip);
      planner.params().adam_step(grads, adam);
    }
    result.curve.push_back({static_cast<double>(epoch), diff_sum / seen, prior_sum / seen});
  }

  result.backbone_checksum_after = model.params().checksum();
  if (result.backbone_checksum_after != result.backbone_checksum_before)
    throw std::logic_error("stage2: backbone parameters changed during planner training");

  std::ofstream os(result.metrics_csv);
  os << "epoch,loss_diff,loss_prior\n";
  for (const auto& row : result.curve) os << row[0] << ',' << row[1] << ',' << row[2] << '\n';
  save_planner(result.checkpoint.string(), planner, result.backbone_checksum_after);
  return result;
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

inline Trajectory constant_velocity_trajectory(const Scenario& sc) {
  Trajectory t;
  for (int w = 0; w < Trajectory::kNumWaypoints; ++w) {
    double tau = Trajectory::kDt * (w + 1);
    t.waypoints[static_cast<size_t>(w)] = {sc.ego.speed * tau, 0.0, 0.0};
  }
  return t;
}

// Small ego-history regression head trained on the same split: command
// one-hot plus ego and history features to the 24 trajectory coordinates.
class EgoMlpBaseline {
 public:
  static constexpr int kInDim = 3 + kEgoFeatureDim + kHistoryFeatureDim;
  static constexpr int kHidden = 64;

  EgoMlpBaseline(std::span<const Scenario> train, uint64_t seed, int epochs = 60)
      : norm_(compute_traj_norm(train)) {
    Rng rng(seed);
    store_.create("w1", rng.normal_tensor({kInDim, kHidden}, 0.2));
    store_.create("b1", Tensor::zeros({kHidden}));
    store_.create("w2", rng.normal_tensor({kHidden, kTrajDim}, 0.2));
    store_.create("b2", Tensor::zeros({kTrajDim}));
    if (train.empty()) return;

    Tensor features({static_cast<int64_t>(train.size()), kInDim});
    Tensor targets({static_cast<int64_t>(train.size()), kTrajDim});
    for (size_t i = 0; i < train.size(); ++i) {
      Tensor f = featurize(train[i]);
      std::copy(f.data.begin(), f.data.end(), features.data.begin() + static_cast<int64_t>(i) * kInDim);
      Tensor z = norm_.normalize(trajectory_to_flat(train[i].gt_trajectory));
      std::copy(z.data.begin(), z.data.end(), targets.data.begin() + static_cast<int64_t>(i) * kTrajDim);
    }
    AdamConfig adam;
    adam.lr = 1e-3;
    int64_t n = static_cast<int64_t>(train.size());
    int64_t batch = 64;
    Rng shuffle_rng(Rng::mix(seed, 0xabcULL));
    for (int epoch = 0; epoch < epochs; ++epoch) {
      std::vector<int64_t> order(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
      for (int64_t i = n; i > 1; --i)
        std::swap(order[static_cast<size_t>(i - 1)],
                  order[static_cast<size_t>(shuffle_rng.uniform_int(0, i - 1))]);
      for (int64_t base = 0; base < n; base += batch) {
        int64_t count = std::min(batch, n - base);
        Tensor fb({count, kInDim}), tb({count, kTrajDim});
        for (int64_t i = 0; i < count; ++i) {
          int64_t idx = order[static_cast<size_t>(base + i)];
          std::copy_n(features.data.begin() + idx * kInDim, kInDim, fb.data.begin() + i * kInDim);
          std::copy_n(targets.data.begin() + idx * kTrajDim, kTrajDim,
                      tb.data.begin() + i * kTrajDim);
        }
        Graph g;
        GraphParams p(g, store_);
        Var pred = forward(g, p, fb);
        Var loss = scale(sum_all(square(sub(pred, g.input(tb)))), 1.0 / static_cast<double>(count));
        g.backward(loss);
        store_.adam_step(p.grads(), adam);
      }
    }
  }

  Trajectory predict(const Scenario& sc) {
    Graph g;
    GraphParams p(g, store_);
    Tensor f = featurize(sc);
    Tensor fb({1, kInDim}, f.data);
    Tensor z = forward(g, p, fb).value();
    return flat_to_trajectory(norm_.denormalize(Tensor({kTrajDim}, z.data)));
  }

 private:
  Tensor featurize(const Scenario& sc) const {
    Tensor f({kInDim});
    f[static_cast<int64_t>(sc.command)] = 1.0;
    f[3] = sc.ego.speed;
    f[4] = sc.ego.accel;
    int64_t o = 5;
    for (const EgoState& h : sc.history) {
      f[o++] = h.position.x;
      f[o++] = h.position.y;
      f[o++] = std::sin(h.heading);
      f[o++] = std::cos(h.heading);
      f[o++] = h.speed;
    }
    return f;
  }

  Var forward(Graph& g, GraphParams& p, const Tensor& features) {
    Var h = tanh_op(add(matmul(g.input(features), p("w1")), p("b1")));
    return add(matmul(h, p("w2")), p("b2"));
  }

  TrajNorm norm_;
  ParamStore store_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline double displacement_error(const Trajectory& a, const Trajectory& b) {
  double total = 0.0;
  for (int w = 0; w < Trajectory::kNumWaypoints; ++w) {
    double dx = a.waypoints[static_cast<size_t>(w)].x - b.waypoints[static_cast<size_t>(w)].x;
    double dy = a.waypoints[static_cast<size_t>(w)].y - b.waypoints[static_cast<size_t>(w)].y;
    total += std::hypot(dx, dy);
  }
  return total / Trajectory::kNumWaypoints;
}

struct EvalResult {
  ScoreReport model, constant_velocity, ego_mlp, ground_truth;
  double model_ade = 0.0, cv_ade = 0.0, mlp_ade = 0.0, prior_ade = 0.0;
  std::vector<std::pair<uint64_t, Trajectory>> model_trajectories;
};

inline void write_trajectories_csv(const std::vector<std::pair<uint64_t, Trajectory>>& rows,
                                   const fs::path& path) {
  std::ofstream os(path);
  os << "scenario,waypoint,x,y,heading\n";
  os << std::setprecision(17);
  for (const auto& [seed, traj] : rows)
    for (int w = 0; w < Trajectory::kNumWaypoints; ++w)
      os << seed << ',' << w << ',' << traj.waypoints[static_cast<size_t>(w)].x << ','
         << traj.waypoints[static_cast<size_t>(w)].y << ','
         << traj.waypoints[static_cast<size_t>(w)].heading << '\n';
  if (!os) throw DataError("trajectories: cannot write " + path.string());
}

inline json score_means_json(const ScoreCard& m) {
  return json{{"nc", m.nc},     {"dac", m.dac}, {"ttc", m.ttc},   {"comfort", m.comfort},
              {"ep", m.ep},     {"tl", m.tl},   {"lk", m.lk},     {"ec", m.ec},
              {"ddc", m.ddc},   {"pdms", m.pdms}, {"epdms", m.epdms}};
}

inline EvalResult cmd_eval(const RunConfig& cfg, const fs::path& data_dir,
                           const std::string& stage1_ckpt, const std::string& planner_ckpt,
                           const fs::path& out_dir) {
  DatasetPaths paths = dataset_paths(data_dir);
  std::vector<Scenario> test = read_dataset(paths.test.string());
  std::vector<Scenario> train = read_dataset(paths.train.string());
  if (test.empty()) throw DataError("eval: empty test split in " + data_dir.string());
  fs::create_directories(out_dir);

  WorldModel model = load_world_model(stage1_ckpt);
  LoadedPlanner loaded = load_planner(planner_ckpt);
  DiffusionPlanner& planner = loaded.planner;
  if (loaded.backbone_checksum != model.params().checksum())
    throw ConfigError("eval: planner checkpoint was trained against a different backbone");

  std::vector<ConditionSource> conds = make_condition_sources(model, test, cfg.sample_batch);

  // two plans per scenario: the scored plan and the previous-tick plan that
  // feeds the extended-comfort consistency check
  std::vector<Trajectory> plans(test.size()), prev_plans(test.size());
  for (size_t base = 0; base < test.size(); base += static_cast<size_t>(cfg.sample_batch)) {
    size_t count = std::min(static_cast<size_t>(cfg.sample_batch), test.size() - base);
    std::vector<const ConditionSource*> batch_conds;
    std::vector<uint64_t> seed_a, seed_b;
    for (size_t i = 0; i < count; ++i) {
      batch_conds.push_back(&conds[base + i]);
      uint64_t s = Rng::mix(cfg.seed, test[base + i].seed);
      seed_a.push_back(Rng::mix(s, 1));
      seed_b.push_back(Rng::mix(s, 2));
    }
    std::vector<Trajectory> a = sample_trajectories(planner, batch_conds, seed_a);
    std::vector<Trajectory> b = sample_trajectories(planner, batch_conds, seed_b);
    for (size_t i = 0; i < count; ++i) {
      plans[base + i] = a[i];
      prev_plans[base + i] = b[i];
    }
  }

  EgoMlpBaseline mlp(train, Rng::mix(cfg.seed, 0x317bULL));

  EvalResult result;
  std::vector<std::pair<uint64_t, ScoreCard>> model_cards, cv_cards, mlp_cards, gt_cards;
  double prior_ade_sum = 0.0;
  {
    // prior quality: mean displacement error of the raw learned prior
    Graph g;
    GraphParams p(g, planner.params());
    std::vector<const ConditionSource*> all;
    for (const ConditionSource& c : conds) all.push_back(&c);
    Tensor prior_z = planner.prior(g, p, all).value();
    for (size_t i = 0; i < test.size(); ++i) {
      Tensor flat({kTrajDim});
      for (int64_t c = 0; c < kTrajDim; ++c) flat[c] = prior_z.at2(static_cast<int64_t>(i), c);
      prior_ade_sum += displacement_error(flat_to_trajectory(planner.norm().denormalize(flat)),
                                          test[i].gt_trajectory);
    }
  }

  for (size_t i = 0; i < test.size(); ++i) {
    const Scenario& sc = test[i];
    Trajectory cv = constant_velocity_trajectory(sc);
    Trajectory ml = mlp.predict(sc);
    model_cards.emplace_back(sc.seed, score_trajectory(plans[i], sc, cfg.weights, prev_plans[i]));
    cv_cards.emplace_back(sc.seed, score_trajectory(cv, sc, cfg.weights, cv));
    mlp_cards.emplace_back(sc.seed, score_trajectory(ml, sc, cfg.weights, ml));
    gt_cards.emplace_back(sc.seed,
                          score_trajectory(sc.gt_trajectory, sc, cfg.weights, sc.gt_trajectory));
    result.model_ade += displacement_error(plans[i], sc.gt_trajectory);
    result.cv_ade += displacement_error(cv, sc.gt_trajectory);
    result.mlp_ade += displacement_error(ml, sc.gt_trajectory);
    result.model_trajectories.emplace_back(sc.seed, plans[i]);
  }
  double n = static_cast<double>(test.size());
  result.model_ade /= n;
  result.cv_ade /= n;
  result.mlp_ade /= n;
  result.prior_ade = prior_ade_sum / n;
  result.model = score_set(model_cards);
  result.constant_velocity = score_set(cv_cards);
  result.ego_mlp = score_set(mlp_cards);
  result.ground_truth = score_set(gt_cards);

  write_score_csv(result.model, (out_dir / "scores_model.csv").string());
  write_score_csv(result.constant_velocity, (out_dir / "scores_constant_velocity.csv").string());
  write_score_csv(result.ego_mlp, (out_dir / "scores_ego_mlp.csv").string());
  write_score_csv(result.ground_truth, (out_dir / "scores_ground_truth.csv").string());
  write_trajectories_csv(result.model_trajectories, out_dir / "trajectories.csv");

  json summary;
  summary["n_scenarios"] = test.size();
  summary["methods"] = {{"model", score_means_json(result.model.means)},
                        {"constant_velocity", score_means_json(result.constant_velocity.means)},
                        {"ego_mlp", score_means_json(result.ego_mlp.means)},
                        {"ground_truth", score_means_json(result.ground_truth.means)}};
  summary["ade"] = {{"model", result.model_ade},
                    {"constant_velocity", result.cv_ade},
                    {"ego_mlp", result.mlp_ade},
                    {"prior", result.prior_ade}};
  std::ofstream os(out_dir / "summary.json");
  os << summary.dump(2) << '\n';
  if (!os) throw DataError("eval: cannot write summary in " + out_dir.string());
  return result;
}

// ---------------------------------------------------------------------------
// Standalone scorer over a trajectory CSV
// ---------------------------------------------------------------------------

inline ScoreReport cmd_score(const std::string& dataset_path, const std::string& traj_csv,
                             const Weights& weights, const fs::path& out_dir) {
  std::vector<Scenario> scenarios = read_dataset(dataset_path);
  std::map<uint64_t, const Scenario*> by_seed;
  for (const Scenario& sc : scenarios) by_seed[sc.seed] = &sc;

  std::ifstream is(traj_csv);
  if (!is) throw DataError("score: cannot open trajectory csv " + traj_csv);
  std::string line;
  std::getline(is, line);  // header
  std::map<uint64_t, Trajectory> trajectories;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    uint64_t seed;
    int wp;
    double x, y, heading;
    std::getline(row, field, ',');
    seed = std::stoull(field);
    std::getline(row, field, ',');
    wp = std::stoi(field);
    std::getline(row, field, ',');
    x = std::stod(field);
    std::getline(row, field, ',');
    y = std::stod(field);
    std::getline(row, field, ',');
    heading = std::stod(field);
    if (wp < 0 || wp >= Trajectory::kNumWaypoints)
      throw DataError("score: waypoint index out of range in " + traj_csv);
    trajectories[seed].waypoints[static_cast<size_t>(wp)] = {x, y, heading};
  }
  if (trajectories.empty()) throw DataError("score: no trajectories in " + traj_csv);

  std::vector<std::pair<uint64_t, ScoreCard>> cards;
  for (const auto& [seed, traj] : trajectories) {
    auto it = by_seed.find(seed);
    if (it == by_seed.end())
      throw DataError("score: scenario " + std::to_string(seed) + " not present in dataset");
    cards.emplace_back(seed, score_trajectory(traj, *it->second, weights));
  }
  ScoreReport report = score_set(cards);
  fs::create_directories(out_dir);
  write_score_csv(report, (out_dir / "scores.csv").string());
  json summary;
  summary["n_scenarios"] = cards.size();
  summary["means"] = score_means_json(report.means);
  std::ofstream os(out_dir / "score_summary.json");
  os << summary.dump(2) << '\n';
  return report;
}

}  // namespace sagdrive
