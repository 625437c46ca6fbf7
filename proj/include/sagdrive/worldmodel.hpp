#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sagdrive/autodiff.hpp"
#include "sagdrive/maskattn.hpp"
#include "sagdrive/optim.hpp"
#include "sagdrive/rng.hpp"
#include "sagdrive/scenegen.hpp"

namespace sagdrive {

constexpr double kLambdaCls = 10.0;    // class term weight in the agent set loss
constexpr double kLambdaAgent = 0.1;   // agent loss weight in the stage-1 total
constexpr int kNumAgentClasses = 4;    // vehicle, pedestrian, cyclist, no-object
constexpr int kNoObjectClass = 3;

enum class MaskMode : int { kCausal = 0, kStructured = 1 };

struct WorldModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int n_agent_queries = 8;
  int n_scene_latents = 16;  // 4x4 patch latents decoding the 64x64 grid
  bool scene_on = true;
  bool agent_on = true;
  bool goal_on = true;
  bool future_on = true;
  MaskMode mask_mode = MaskMode::kStructured;

  std::array<int, 5> block_sizes() const {
    int s = scene_on ? n_scene_latents : 0;
    int a = agent_on ? n_agent_queries : 0;
    int g = goal_on ? 1 : 0;
    return {s, a, g, future_on ? s : 0, future_on ? a : 0};
  }

  int ffn_dim() const { return 2 * d_model; }
};

// Context vector feeding the world query encoder: ego state, flattened
// history, and a scene summary (mean patch feature plus traffic-light
// state, which the raster channels do not carry).
constexpr int kEgoFeatureDim = 2;                    // speed, accel
constexpr int kHistoryFeatureDim = 5 * kHistoryLen;  // x, y, sin, cos, speed per frame
constexpr int kSceneSummaryDim = PromptTokens::kPatchFeatureDim + 2;
constexpr int kCtxDim = kEgoFeatureDim + kHistoryFeatureDim + kSceneSummaryDim;

constexpr int kCellsPerPatch = 256;  // 16x16 cells per scene latent
constexpr int kOccCells = GridFrame::kSize * GridFrame::kSize;
constexpr int kBoxDim = 6;  // x, y, sin h, cos h, length, width

// ---------------------------------------------------------------------------
// Patch-major occupancy layout: latent j owns the 16x16-cell region at patch
// row j/4, patch col j%4. Losses and heads work in this layout; the
// converters go back to grid coordinates for reporting.
// ---------------------------------------------------------------------------

inline int64_t patch_major_index(int i, int j) {
  int pi = i / 16, pj = j / 16, di = i % 16, dj = j % 16;
  return (pi * 4 + pj) * kCellsPerPatch + di * 16 + dj;
}

inline Tensor occupancy_to_patch_major(const OccupancyGrid& occ) {
  Tensor t({kOccCells});
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j < GridFrame::kSize; ++j)
      t.data[static_cast<size_t>(patch_major_index(i, j))] = occ.at(i, j);
  return t;
}

inline Tensor patch_major_to_grid(const Tensor& pm) {
  if (pm.numel() != kOccCells)
    throw std::invalid_argument("patch_major_to_grid: need 4096 values, got " + pm.shape_string());
  Tensor grid({GridFrame::kSize, GridFrame::kSize});
  for (int i = 0; i < GridFrame::kSize; ++i)
    for (int j = 0; j < GridFrame::kSize; ++j)
      grid.at2(i, j) = pm.data[static_cast<size_t>(patch_major_index(i, j))];
  return grid;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

struct AgentTarget {
  int cls = 0;
  std::array<double, kBoxDim> box{};  // x, y, sin h, cos h, length, width
};

inline AgentTarget agent_target_from_box(const AgentBox& b) {
  AgentTarget t;
  t.cls = static_cast<int>(b.cls);
  t.box = {b.center.x, b.center.y, std::sin(b.heading), std::cos(b.heading), b.length, b.width};
  return t;
}

struct WorldBatch {
  int batch = 0;
  std::vector<int64_t> command_ids, speed_ids, accel_ids;
  Tensor patch_features;  // [B, 16, 32]
  Tensor ctx;             // [B, kCtxDim]
  Tensor occ_t, occ_f;    // [B, 4096] patch-major 0/1
  std::vector<std::vector<AgentTarget>> agents_t, agents_f;
  Tensor goal;            // [B, 3] x, y, heading
  std::vector<uint64_t> seeds;
};

inline Tensor context_features(const Scenario& sc, const PromptTokens& prompt) {
  Tensor ctx({kCtxDim});
  int64_t o = 0;
  ctx[o++] = sc.ego.speed;
  ctx[o++] = sc.ego.accel;
  for (const EgoState& h : sc.history) {
    ctx[o++] = h.position.x;
    ctx[o++] = h.position.y;
    ctx[o++] = std::sin(h.heading);
    ctx[o++] = std::cos(h.heading);
    ctx[o++] = h.speed;
  }
  for (int f = 0; f < PromptTokens::kPatchFeatureDim; ++f) {
    double mean = 0.0;
    for (int p = 0; p < PromptTokens::kNumPatches; ++p) mean += prompt.patch_features.at2(p, f);
    ctx[o++] = mean / PromptTokens::kNumPatches;
  }
  bool red = sc.map.traffic_light && sc.map.traffic_light->state == LightState::kRed;
  ctx[o++] = red ? 1.0 : 0.0;
  if (red && !sc.map.lane_centerline.empty()) {
    const Polyline& cl = sc.map.lane_centerline;
    double dist = cl.project(sc.map.traffic_light->stop_position).s - cl.project({0.0, 0.0}).s;
    ctx[o++] = std::clamp(dist / GridFrame::kHalfExtent, 0.0, 1.0);
  } else {
    ctx[o++] = 1.0;
  }
  return ctx;
}

inline WorldBatch make_world_batch(std::span<const Scenario> scenarios, int n_agent_queries = 8) {
  WorldBatch b;
  b.batch = static_cast<int>(scenarios.size());
  int64_t n = b.batch;
  b.patch_features = Tensor({n, PromptTokens::kNumPatches, PromptTokens::kPatchFeatureDim});
  b.ctx = Tensor({n, kCtxDim});
  b.occ_t = Tensor({n, kOccCells});
  b.occ_f = Tensor({n, kOccCells});
  b.goal = Tensor({n, 3});
  for (int64_t s = 0; s < n; ++s) {
    const Scenario& sc = scenarios[static_cast<size_t>(s)];
    PromptTokens prompt = encode_prompt(sc);
    b.command_ids.push_back(prompt.command_id);
    b.speed_ids.push_back(prompt.speed_bin);
    b.accel_ids.push_back(prompt.accel_bin);
    std::copy(prompt.patch_features.data.begin(), prompt.patch_features.data.end(),
              b.patch_features.data.begin() + s * PromptTokens::kNumPatches *
                                                  PromptTokens::kPatchFeatureDim);
    Tensor ctx = context_features(sc, prompt);
    std::copy(ctx.data.begin(), ctx.data.end(), b.ctx.data.begin() + s * kCtxDim);
    Tensor pm_t = occupancy_to_patch_major(sc.gt_occ_t);
    Tensor pm_f = occupancy_to_patch_major(sc.gt_occ_future);
    std::copy(pm_t.data.begin(), pm_t.data.end(), b.occ_t.data.begin() + s * kOccCells);
    std::copy(pm_f.data.begin(), pm_f.data.end(), b.occ_f.data.begin() + s * kOccCells);
    std::vector<AgentTarget> at, af;
    for (const AgentBox& box : sc.gt_agents_t)
      if (static_cast<int>(at.size()) < n_agent_queries) at.push_back(agent_target_from_box(box));
    for (const AgentBox& box : sc.gt_agents_future)
      if (static_cast<int>(af.size()) < n_agent_queries) af.push_back(agent_target_from_box(box));
    b.agents_t.push_back(std::move(at));
    b.agents_f.push_back(std::move(af));
    b.goal.at2(s, 0) = sc.gt_goal.position.x;
    b.goal.at2(s, 1) = sc.gt_goal.position.y;
    b.goal.at2(s, 2) = sc.gt_goal.heading;
    b.seeds.push_back(sc.seed);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Hungarian matching (minimum-cost assignment, O(n^3) potentials method).
// Rows are predictions, columns ground truths; n >= m required and every
// ground truth ends up matched.
// ---------------------------------------------------------------------------

struct Matching {
  std::vector<std::pair<int, int>> pairs;  // (prediction, ground truth)
  double total_cost = 0.0;
};

inline Matching hungarian_match(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  int m = n == 0 ? 0 : static_cast<int>(cost[0].size());
  if (m > n)
    throw std::invalid_argument("hungarian_match: more ground truths (" + std::to_string(m) +
                                ") than predictions (" + std::to_string(n) + ")");
  Matching result;
  if (m == 0) return result;

  // pad to square with zero-cost dummy columns
  auto a = [&](int i, int j) -> double { return j < m ? cost[static_cast<size_t>(i)][static_cast<size_t>(j)] : 0.0; };
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = a(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  for (int j = 1; j <= m; ++j) {
    int i = p[static_cast<size_t>(j)] - 1;
    result.pairs.emplace_back(i, j - 1);
    result.total_cost += cost[static_cast<size_t>(i)][static_cast<size_t>(j - 1)];
  }
  return result;
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

struct WorldForward {
  Var init;           // [B, W, d] world-query initialization (leakage probes read its grad)
  Var final_states;   // [B, L, d]
  Var world_latents;  // [B, W, d]
  std::array<std::optional<Var>, 5> blocks;  // per enabled block, [B, size, d]
};

class WorldModel {
 public:
  WorldModel(const WorldModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    layout_ = build_layout(PromptTokens::kLength, cfg.block_sizes());
    init_params(init_seed);
  }

  WorldModel(const WorldModelConfig& cfg, ParamStore&& store)
      : cfg_(cfg), store_(std::move(store)) {
    layout_ = build_layout(PromptTokens::kLength, cfg.block_sizes());
  }

  const WorldModelConfig& config() const { return cfg_; }
  const QueryLayout& layout() const { return layout_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  AttentionMask mask() const {
    return cfg_.mask_mode == MaskMode::kStructured ? build_structured_mask(layout_)
                                                   : build_causal_mask(layout_);
  }

  // Prompt token embedding: [B, 19, d].
  Var embed_prompt(Graph& g, GraphParams& p, const WorldBatch& batch) const {
    int64_t bsz = batch.batch, d = cfg_.d_model;
    Var cmd = reshape(embedding(p("embed.command"), batch.command_ids), {bsz, 1, d});
    Var spd = reshape(embedding(p("embed.speed"), batch.speed_ids), {bsz, 1, d});
    Var acc = reshape(embedding(p("embed.accel"), batch.accel_ids), {bsz, 1, d});
    Var patches = add(matmul(g.input(batch.patch_features), p("embed.patch.w")),
                      p("embed.patch.b"));  // [B, 16, d]
    return concat({cmd, spd, acc, patches}, 1);
  }

  // World query initialization: learned per-slot base plus a shared
  // projection of [ego || history || scene summary] added to every slot.
  Var init_world_queries(Graph& g, GraphParams& p, const WorldBatch& batch) const {
    int64_t w = layout_.world_total();
    Var ctx_proj = add(matmul(g.input(batch.ctx), p("wq.proj.w")), p("wq.proj.b"));  // [B, d]
    Var broadcast = repeat_middle(ctx_proj, w);                                      // [B, W, d]
    return add(broadcast, p("wq.base"));
  }

  WorldForward forward(Graph& g, GraphParams& p, const WorldBatch& batch,
                       const AttentionMask& mask) const {
    if (mask.size != layout_.total())
      throw std::invalid_argument("forward: mask size " + std::to_string(mask.size) +
                                  " does not match layout total " +
                                  std::to_string(layout_.total()));
    int64_t bsz = batch.batch, d = cfg_.d_model;
    WorldForward fwd;
    Var prompt = embed_prompt(g, p, batch);
    fwd.init = init_world_queries(g, p, batch);
    Var x = add(concat({prompt, fwd.init}, 1), p("embed.pos"));  // [B, L, d]
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string pre = "layer" + std::to_string(l) + ".";
      Var normed = layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b"));
      Var q = add(matmul(normed, p(pre + "attn.q.w")), p(pre + "attn.q.b"));
      Var k = add(matmul(normed, p(pre + "attn.k.w")), p(pre + "attn.k.b"));
      Var v = add(matmul(normed, p(pre + "attn.v.w")), p(pre + "attn.v.b"));
      Var mixed = masked_attention(q, k, v, mask, cfg_.n_heads);
      Var attn_out = add(matmul(mixed, p(pre + "attn.o.w")), p(pre + "attn.o.b"));
      x = add(x, attn_out);
      Var normed2 = layer_norm(x, p(pre + "ln2.g"), p(pre + "ln2.b"));
      Var hidden = gelu(add(matmul(normed2, p(pre + "ffn.w1")), p(pre + "ffn.b1")));
      Var ffn_out = add(matmul(hidden, p(pre + "ffn.w2")), p(pre + "ffn.b2"));
      x = add(x, ffn_out);
    }
    x = layer_norm(x, p("final_ln.g"), p("final_ln.b"));
    fwd.final_states = x;
    fwd.world_latents = slice(x, 1, layout_.n_prompt, layout_.world_total());
    for (int b = 0; b < 5; ++b) {
      int size = layout_.block_sizes[static_cast<size_t>(b)];
      if (size == 0) continue;
      fwd.blocks[static_cast<size_t>(b)] =
          slice(x, 1, layout_.block_offsets[static_cast<size_t>(b)], size);
    }
    (void)bsz;
    (void)d;
    return fwd;
  }

  // Scene latents [B, 16, d] -> per-cell logits [B, 4096] in patch-major
  // order; one shared per-patch linear decoder.
  Var decode_occupancy(GraphParams& p, Var scene_block, TimePoint horizon) const {
    std::string head = horizon == TimePoint::kCurrent ? "head.occ_t." : "head.occ_f.";
    Var logits = add(matmul(scene_block, p(head + "w")), p(head + "b"));  // [B, 16, 256]
    int64_t bsz = logits.value().shape[0];
    return reshape(logits, {bsz, static_cast<int64_t>(kOccCells)});
  }

  struct AgentHead {
    Var class_logits;  // [B, Nq, 4]
    Var boxes;         // [B, Nq, 6], sizes already softplus-decoded
  };

  AgentHead decode_agents(GraphParams& p, Var agent_block, TimePoint horizon) const {
    std::string head = horizon == TimePoint::kCurrent ? "head.agent_t." : "head.agent_f.";
    AgentHead out;
    out.class_logits = add(matmul(agent_block, p(head + "cls.w")), p(head + "cls.b"));
    Var raw = add(matmul(agent_block, p(head + "box.w")), p(head + "box.b"));
    Var pose = slice(raw, 2, 0, 4);
    Var size = softplus(slice(raw, 2, 4, 2));
    out.boxes = concat({pose, size}, 2);
    return out;
  }

  // Goal latent [B, 1, d] -> pose [B, 3] via a small two-layer head.
  Var predict_goal(GraphParams& p, Var goal_block) const {
    int64_t bsz = goal_block.value().shape[0];
    Var flat = reshape(goal_block, {bsz, static_cast<int64_t>(cfg_.d_model)});
    Var hidden = tanh_op(add(matmul(flat, p("head.goal.w1")), p("head.goal.b1")));
    return add(matmul(hidden, p("head.goal.w2")), p("head.goal.b2"));
  }

 private:
  void init_params(uint64_t seed) {
    Rng rng(seed);
    auto w = [&](const std::string& name, std::vector<int64_t> shape, double std_dev = 0.02) {
      store_.create(name, rng.normal_tensor(std::move(shape), std_dev));
    };
    auto zeros = [&](const std::string& name, std::vector<int64_t> shape) {
      store_.create(name, Tensor::zeros(std::move(shape)));
    };
    auto ones = [&](const std::string& name, std::vector<int64_t> shape) {
      store_.create(name, Tensor::full(std::move(shape), 1.0));
    };
    int64_t d = cfg_.d_model, ffn = cfg_.ffn_dim();
    w("embed.command", {3, d});
    w("embed.speed", {PromptTokens::kSpeedBins, d});
    w("embed.accel", {PromptTokens::kAccelBins, d});
    w("embed.patch.w", {PromptTokens::kPatchFeatureDim, d});
    zeros("embed.patch.b", {d});
    w("embed.pos", {layout_.total(), d});
    w("wq.base", {layout_.world_total(), d});
    w("wq.proj.w", {kCtxDim, d});
    zeros("wq.proj.b", {d});
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string pre = "layer" + std::to_string(l) + ".";
      for (const char* proj : {"q", "k", "v", "o"}) {
        w(pre + "attn." + proj + ".w", {d, d});
        zeros(pre + "attn." + proj + ".b", {d});
      }
      ones(pre + "ln1.g", {d});
      zeros(pre + "ln1.b", {d});
      ones(pre + "ln2.g", {d});
      zeros(pre + "ln2.b", {d});
      w(pre + "ffn.w1", {d, ffn});
      zeros(pre + "ffn.b1", {ffn});
      w(pre + "ffn.w2", {ffn, d});
      zeros(pre + "ffn.b2", {d});
    }
    ones("final_ln.g", {d});
    zeros("final_ln.b", {d});
    if (cfg_.scene_on) {
      w("head.occ_t.w", {d, kCellsPerPatch});
      zeros("head.occ_t.b", {kCellsPerPatch});
      if (cfg_.future_on) {
        w("head.occ_f.w", {d, kCellsPerPatch});
        zeros("head.occ_f.b", {kCellsPerPatch});
      }
    }
    if (cfg_.agent_on) {
      w("head.agent_t.cls.w", {d, kNumAgentClasses});
      zeros("head.agent_t.cls.b", {kNumAgentClasses});
      w("head.agent_t.box.w", {d, kBoxDim});
      zeros("head.agent_t.box.b", {kBoxDim});
      if (cfg_.future_on) {
        w("head.agent_f.cls.w", {d, kNumAgentClasses});
        zeros("head.agent_f.cls.b", {kNumAgentClasses});
        w("head.agent_f.box.w", {d, kBoxDim});
        zeros("head.agent_f.box.b", {kBoxDim});
      }
    }
    if (cfg_.goal_on) {
      w("head.goal.w1", {d, d});
      zeros("head.goal.b1", {d});
      w("head.goal.w2", {d, 3});
      zeros("head.goal.b2", {3});
    }
  }

  WorldModelConfig cfg_;
  QueryLayout layout_;
  ParamStore store_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct GeoLoss {
  Var full;       // mean BCE over every cell
  Var resampled;  // mean BCE over positives plus an equal draw of negatives
  Var total;
};

// gt entries are 0/1; the resampled negative draw is deterministic per
// example seed. A gt with no positive cells falls back to 64 random
// negatives for the resampled term.
inline GeoLoss loss_geo(Graph& g, Var logits, const Tensor& gt,
                        const std::vector<uint64_t>& seeds) {
  (void)g;  // losses read the graph through their vars
  const std::vector<int64_t> shape = logits.value().shape;
  if (shape.size() != 2 || gt.shape != shape)
    throw std::invalid_argument("loss_geo: logits " + Tensor::shape_str(shape) + " vs gt " +
                                gt.shape_string());
  int64_t bsz = shape[0], cells = shape[1];
  if (static_cast<int64_t>(seeds.size()) != bsz)
    throw std::invalid_argument("loss_geo: need one seed per example");

  GeoLoss out;
  out.full = mean_all(bce_logits(logits, gt));

  Var flat = reshape(logits, {bsz * cells});
  std::optional<Var> acc;
  for (int64_t s = 0; s < bsz; ++s) {
    std::vector<int64_t> pos, neg;
    for (int64_t c = 0; c < cells; ++c)
      (gt.data[static_cast<size_t>(s * cells + c)] > 0.5 ? pos : neg).push_back(c);
    Rng rng(Rng::mix(seeds[static_cast<size_t>(s)], 0x9e0cc0ffeeULL));
    std::vector<int64_t> idx = pos;
    int64_t draws = pos.empty() ? 64 : static_cast<int64_t>(pos.size());
    if (!neg.empty())
      for (int64_t k = 0; k < draws; ++k)
        idx.push_back(neg[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(neg.size()) - 1))]);
    Tensor targets({static_cast<int64_t>(idx.size())});
    std::vector<int64_t> global;
    global.reserve(idx.size());
    for (size_t k = 0; k < idx.size(); ++k) {
      global.push_back(s * cells + idx[k]);
      targets.data[k] = gt.data[static_cast<size_t>(s * cells + idx[k])];
    }
    Var sample_loss = mean_all(bce_logits(gather_rows(flat, global), targets));
    acc = acc ? add(*acc, sample_loss) : sample_loss;
  }
  out.resampled = scale(*acc, 1.0 / static_cast<double>(bsz));
  out.total = add(out.full, out.resampled);
  return out;
}

// Matching cost mirrors the loss: lambda_cls * (1 - p(class)) + L1(box).
inline std::vector<std::vector<double>> agent_match_cost(const Tensor& class_logits_row,
                                                         const Tensor& boxes_row,
                                                         const std::vector<AgentTarget>& gts) {
  int nq = static_cast<int>(class_logits_row.shape[0]);
  std::vector<std::vector<double>> cost(static_cast<size_t>(nq),
                                        std::vector<double>(gts.size(), 0.0));
  for (int i = 0; i < nq; ++i) {
    // softmax over the class row
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < kNumAgentClasses; ++c) mx = std::max(mx, class_logits_row.at2(i, c));
    double z = 0.0;
    for (int c = 0; c < kNumAgentClasses; ++c) z += std::exp(class_logits_row.at2(i, c) - mx);
    for (size_t j = 0; j < gts.size(); ++j) {
      double p = std::exp(class_logits_row.at2(i, gts[j].cls) - mx) / z;
      double l1 = 0.0;
      for (int k = 0; k < kBoxDim; ++k)
        l1 += std::abs(boxes_row.at2(i, k) - gts[j].box[static_cast<size_t>(k)]);
      cost[static_cast<size_t>(i)][j] = kLambdaCls * (1.0 - p) + l1;
    }
  }
  return cost;
}

// Set loss over one horizon: lambda_cls * CE on every query (unmatched
// queries supervised to the no-object class) plus L1 on matched boxes,
// normalized by the query count.
inline Var loss_agent(Graph& g, const WorldModel::AgentHead& head,
                      const std::vector<std::vector<AgentTarget>>& gts) {
  const std::vector<int64_t> shape = head.class_logits.value().shape;  // [B, Nq, 4]
  int64_t bsz = shape[0], nq = shape[1];
  if (static_cast<int64_t>(gts.size()) != bsz)
    throw std::invalid_argument("loss_agent: ground-truth batch mismatch");
  std::optional<Var> acc;
  for (int64_t s = 0; s < bsz; ++s) {
    const std::vector<AgentTarget>& gt = gts[static_cast<size_t>(s)];
    if (static_cast<int64_t>(gt.size()) > nq)
      throw std::invalid_argument("loss_agent: more ground truths than queries");
    Var cls_row = reshape(slice(head.class_logits, 0, s, 1), {nq, kNumAgentClasses});
    Var box_row = reshape(slice(head.boxes, 0, s, 1), {nq, kBoxDim});
    Matching match = hungarian_match(agent_match_cost(cls_row.value(), box_row.value(), gt));
    std::vector<int64_t> cls_target(static_cast<size_t>(nq), kNoObjectClass);
    std::vector<int64_t> matched_rows;
    Tensor matched_boxes({static_cast<int64_t>(match.pairs.size()), kBoxDim});
    for (size_t k = 0; k < match.pairs.size(); ++k) {
      auto [pi, gj] = match.pairs[k];
      cls_target[static_cast<size_t>(pi)] = gt[static_cast<size_t>(gj)].cls;
      matched_rows.push_back(pi);
      for (int c = 0; c < kBoxDim; ++c)
        matched_boxes.at2(static_cast<int64_t>(k), c) = gt[static_cast<size_t>(gj)].box[static_cast<size_t>(c)];
    }
    Var sample = scale(sum_all(ce_logits(cls_row, cls_target)), kLambdaCls);
    if (!matched_rows.empty())
      sample = add(sample, l1_to(gather_rows(box_row, matched_rows), matched_boxes));
    acc = acc ? add(*acc, scale(sample, 1.0 / static_cast<double>(nq)))
              : scale(sample, 1.0 / static_cast<double>(nq));
  }
  if (!acc) return g.input(Tensor::scalar(0.0));
  return scale(*acc, 1.0 / static_cast<double>(bsz));
}

// L1 over (x, y, heading), averaged over the batch.
inline Var loss_goal(Graph& g, Var goal_pred, const Tensor& gt) {
  (void)g;
  int64_t bsz = goal_pred.value().shape[0];
  return scale(l1_to(goal_pred, gt), 1.0 / static_cast<double>(bsz));
}

struct Stage1Components {
  std::optional<Var> geo_t, geo_f, agent_t, agent_f, goal;
  double text = 0.0;  // VQA term; fixed to zero at this scale
};

// Total stage-1 objective: L_text + L_geo(t) + L_geo(t+n)
//                          + lambda_agent * (L_agent(t) + L_agent(t+n)) + L_goal.
inline Var stage1_loss(Graph& g, const Stage1Components& c) {
  Var total = g.input(Tensor::scalar(c.text));
  if (c.geo_t) total = add(total, *c.geo_t);
  if (c.geo_f) total = add(total, *c.geo_f);
  std::optional<Var> agent;
  if (c.agent_t) agent = c.agent_t;
  if (c.agent_f) agent = agent ? std::optional<Var>(add(*agent, *c.agent_f)) : c.agent_f;
  if (agent) total = add(total, scale(*agent, kLambdaAgent));
  if (c.goal) total = add(total, *c.goal);
  return total;
}

}  // namespace sagdrive
