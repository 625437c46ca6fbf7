#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sagdrive/autodiff.hpp"
#include "sagdrive/maskattn.hpp"
#include "sagdrive/optim.hpp"
#include "sagdrive/rng.hpp"
#include "sagdrive/worldmodel.hpp"

namespace sagdrive {

constexpr int kTrajDim = Trajectory::kNumWaypoints * 3;  // 24 flattened coordinates

inline Tensor trajectory_to_flat(const Trajectory& t) {
  Tensor out({kTrajDim});
  for (int w = 0; w < Trajectory::kNumWaypoints; ++w) {
    out[w * 3 + 0] = t.waypoints[static_cast<size_t>(w)].x;
    out[w * 3 + 1] = t.waypoints[static_cast<size_t>(w)].y;
    out[w * 3 + 2] = t.waypoints[static_cast<size_t>(w)].heading;
  }
  return out;
}

inline Trajectory flat_to_trajectory(const Tensor& flat) {
  if (flat.numel() != kTrajDim)
    throw std::invalid_argument("flat_to_trajectory: need 24 values, got " + flat.shape_string());
  Trajectory t;
  for (int w = 0; w < Trajectory::kNumWaypoints; ++w)
    t.waypoints[static_cast<size_t>(w)] = {flat[w * 3 + 0], flat[w * 3 + 1], flat[w * 3 + 2]};
  return t;
}

// ---------------------------------------------------------------------------
// Noise schedule: linear betas, cached cumulative products. Index convention:
// step t in [1, T]; alpha_bar(0) == 1 at the clean end.
// ---------------------------------------------------------------------------

struct DiffusionSchedule {
  int steps = 0;
  std::vector<double> betas;       // betas[t-1] = beta_t
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // alpha_bars[t-1] = prod_{s<=t} alpha_s

  double beta(int t) const { return betas[static_cast<size_t>(t - 1)]; }
  double alpha(int t) const { return alphas[static_cast<size_t>(t - 1)]; }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t - 1)]; }
};

inline DiffusionSchedule build_schedule(int steps, double beta_min = 1e-4,
                                        double beta_max = 0.02) {
  if (steps < 2) throw std::invalid_argument("schedule: need at least 2 steps");
  DiffusionSchedule s;
  s.steps = steps;
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    double beta = beta_min + (beta_max - beta_min) * t / (steps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    prod *= 1.0 - beta;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

// Closed-form corruption at a given cumulative product.
inline Tensor q_sample_with(double alpha_bar, const Tensor& clean, const Tensor& noise) {
  check_same_shape(clean, noise, "q_sample");
  Tensor out = clean;
  double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[static_cast<size_t>(i)] = a * clean.data[static_cast<size_t>(i)] +
                                       b * noise.data[static_cast<size_t>(i)];
  return out;
}

inline Tensor q_sample(const DiffusionSchedule& s, int t, const Tensor& clean,
                       const Tensor& noise) {
  if (t < 1 || t > s.steps) throw std::invalid_argument("q_sample: t out of [1, T]");
  return q_sample_with(s.alpha_bar(t), clean, noise);
}

// ---------------------------------------------------------------------------
// Per-coordinate trajectory normalization from training-set statistics,
// keeping the diffusion variable at unit scale.
// ---------------------------------------------------------------------------

struct TrajNorm {
  Tensor mean{std::vector<int64_t>{kTrajDim}};
  Tensor stddev{std::vector<int64_t>{kTrajDim}};

  Tensor normalize(const Tensor& flat) const {
    Tensor out = flat;
    for (int64_t i = 0; i < kTrajDim; ++i)
      out.data[static_cast<size_t>(i)] = (flat[i] - mean[i]) / stddev[i];
    return out;
  }
  Tensor denormalize(const Tensor& z) const {
    Tensor out = z;
    for (int64_t i = 0; i < kTrajDim; ++i)
      out.data[static_cast<size_t>(i)] = z[i] * stddev[i] + mean[i];
    return out;
  }
};

inline TrajNorm compute_traj_norm(std::span<const Scenario> scenarios) {
  TrajNorm norm;
  if (scenarios.empty()) {
    std::fill(norm.stddev.data.begin(), norm.stddev.data.end(), 1.0);
    return norm;
  }
  for (const Scenario& sc : scenarios) {
    Tensor flat = trajectory_to_flat(sc.gt_trajectory);
    for (int64_t i = 0; i < kTrajDim; ++i) norm.mean.data[static_cast<size_t>(i)] += flat[i];
  }
  for (auto& v : norm.mean.data) v /= static_cast<double>(scenarios.size());
  for (const Scenario& sc : scenarios) {
    Tensor flat = trajectory_to_flat(sc.gt_trajectory);
    for (int64_t i = 0; i < kTrajDim; ++i) {
      double d = flat[i] - norm.mean[i];
      norm.stddev.data[static_cast<size_t>(i)] += d * d;
    }
  }
  for (auto& v : norm.stddev.data)
    v = std::max(std::sqrt(v / static_cast<double>(scenarios.size())), 1e-2);
  return norm;
}

// ---------------------------------------------------------------------------
// Planner condition: frozen world latents (all five blocks, undecoded) plus
// the ego state; history feeds the learned prior.
// ---------------------------------------------------------------------------

struct ConditionSource {
  Tensor latents;              // [W, cond_width] final backbone states
  std::vector<int> block_ids;  // length W, values 0..4
  Tensor ego;                  // [kEgoFeatureDim]
  Tensor history;              // [kHistoryFeatureDim]
};

// Runs the frozen backbone in batches and detaches everything the planner
// needs, one ConditionSource per scenario.
inline std::vector<ConditionSource> make_condition_sources(const WorldModel& model,
                                                           std::span<const Scenario> scenarios,
                                                           int batch_size = 16) {
  std::vector<ConditionSource> out;
  out.reserve(scenarios.size());
  WorldModel& mutable_model = const_cast<WorldModel&>(model);
  AttentionMask mask = model.mask();
  const QueryLayout& layout = model.layout();
  std::vector<int> block_ids;
  for (int b = 0; b < 5; ++b)
    for (int i = 0; i < layout.block_sizes[static_cast<size_t>(b)]; ++i) block_ids.push_back(b);
  int64_t w_total = layout.world_total();
  int64_t d = model.config().d_model;

  for (size_t base = 0; base < scenarios.size(); base += static_cast<size_t>(batch_size)) {
    size_t count = std::min(static_cast<size_t>(batch_size), scenarios.size() - base);
    WorldBatch batch =
        make_world_batch(scenarios.subspan(base, count), model.config().n_agent_queries);
    Graph g;
    GraphParams p(g, mutable_model.params());
    WorldForward fwd = model.forward(g, p, batch, mask);
    const Tensor& lat = fwd.world_latents.value();  // [count, W, d]
    for (size_t s = 0; s < count; ++s) {
      const Scenario& sc = scenarios[base + s];
      ConditionSource cond;
      cond.latents = Tensor({w_total, d});
      std::copy_n(lat.data.data() + static_cast<int64_t>(s) * w_total * d, w_total * d,
                  cond.latents.data.data());
      cond.block_ids = block_ids;
      cond.ego = Tensor({kEgoFeatureDim}, {sc.ego.speed, sc.ego.accel});
      cond.history = Tensor({kHistoryFeatureDim});
      int64_t o = 0;
      for (const EgoState& h : sc.history) {
        cond.history[o++] = h.position.x;
        cond.history[o++] = h.position.y;
        cond.history[o++] = std::sin(h.heading);
        cond.history[o++] = std::cos(h.heading);
        cond.history[o++] = h.speed;
      }
      out.push_back(std::move(cond));
    }
  }
  return out;
}

inline ConditionSource make_condition_source(const WorldModel& model, const Scenario& sc) {
  return make_condition_sources(model, std::span<const Scenario>(&sc, 1))[0];
}

enum class FusionMode : int {
  kIncremental = 0,  // layer l sees categories up to l
  kPerLayer = 1,     // layer l sees exactly category l
  kConcat = 2,       // every layer sees every block
};

// Rows of the latent matrix a given cross-attention layer may read.
inline std::vector<int64_t> fusion_rows(FusionMode mode, int layer,
                                        const std::vector<int>& block_ids) {
  auto cat_of = [](int block) { return static_cast<int>(category_of_block(block)); };
  std::vector<int64_t> rows;
  for (size_t i = 0; i < block_ids.size(); ++i) {
    int c = cat_of(block_ids[i]);
    bool keep = mode == FusionMode::kConcat || (mode == FusionMode::kIncremental ? c <= layer
                                                                                 : c == layer);
    if (keep) rows.push_back(static_cast<int64_t>(i));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// The planner network: waypoint tokens with sinusoidal step embedding, three
// blocks of self-attention, cross-attention to the condition memory, and a
// feedforward, with a zero-initialized output head.
// ---------------------------------------------------------------------------

struct PlannerConfig {
  int d_model = 128;
  int n_layers = 3;
  int n_heads = 4;
  int time_embed_dim = 64;
  int diffusion_steps = 100;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  FusionMode fusion = FusionMode::kConcat;
  int cond_width = 128;  // backbone hidden width

  int ffn_dim() const { return 2 * d_model; }
};

inline Tensor sinusoidal_embedding(int t, int dim) {
  Tensor out({dim});
  for (int i = 0; i < dim / 2; ++i) {
    double freq = std::exp(-std::log(10000.0) * (2.0 * i / dim));
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

class DiffusionPlanner {
 public:
  DiffusionPlanner(const PlannerConfig& cfg, uint64_t init_seed)
      : cfg_(cfg), schedule_(build_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)) {
    init_params(init_seed);
    norm_.stddev = Tensor::full({kTrajDim}, 1.0);
  }

  DiffusionPlanner(const PlannerConfig& cfg, ParamStore&& store)
      : cfg_(cfg), schedule_(build_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)),
        store_(std::move(store)) {
    norm_.stddev = Tensor::full({kTrajDim}, 1.0);
  }

  const PlannerConfig& config() const { return cfg_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  TrajNorm& norm() { return norm_; }
  const TrajNorm& norm() const { return norm_; }

  struct NetOut {
    Var eps_hat;                   // [B, 24]
    std::vector<Var> latent_vars;  // stacked input (uniform layout) or one per sample
  };

  // eps prediction for a batch of noisy trajectories at (possibly different)
  // steps, conditioned per sample.
  NetOut net_forward(Graph& g, GraphParams& p, Var noisy, const std::vector<int>& ts,
                     const std::vector<const ConditionSource*>& conds) {
    int64_t bsz = noisy.value().shape[0];
    if (static_cast<int64_t>(ts.size()) != bsz || static_cast<int64_t>(conds.size()) != bsz)
      throw std::invalid_argument("planner: per-sample step/condition count mismatch");
    NetOut out;
    std::vector<std::vector<Var>> memory = build_memories(g, p, conds, &out.latent_vars);
    bool uniform = memory[0].size() == 1;
    out.eps_hat = trunk(g, p, noisy, ts, [&](Graph& gg, GraphParams& pp, int layer, Var cq) {
      const std::vector<Var>& mems = memory[static_cast<size_t>(layer)];
      std::string pre = "block" + std::to_string(layer) + ".";
      if (uniform) {
        Var ck = add(matmul(mems[0], pp(pre + "cross.k.w")), pp(pre + "cross.k.b"));
        Var cv = add(matmul(mems[0], pp(pre + "cross.v.w")), pp(pre + "cross.v.b"));
        return cross_mix(gg, cq, ck, cv);
      }
      std::vector<Var> rows;
      for (int64_t s = 0; s < bsz; ++s) {
        Var mem = mems[static_cast<size_t>(s)];
        Var ck = add(matmul(mem, pp(pre + "cross.k.w")), pp(pre + "cross.k.b"));
        Var cv = add(matmul(mem, pp(pre + "cross.v.w")), pp(pre + "cross.v.b"));
        rows.push_back(cross_mix(gg, slice(cq, 0, s, 1), ck, cv));
      }
      return bsz == 1 ? rows[0] : concat(rows, 0);
    });
    return out;
  }

  // The condition memory never changes across diffusion steps, so sampling
  // projects each layer's cross-attention keys and values once per batch.
  struct CrossCache {
    int64_t batch = 0;
    std::vector<Tensor> keys;    // per layer, [B, M, d]
    std::vector<Tensor> values;  // per layer, [B, M, d]
  };

  CrossCache build_cross_cache(const std::vector<const ConditionSource*>& conds) {
    for (size_t s = 1; s < conds.size(); ++s)
      if (conds[s]->block_ids != conds[0]->block_ids)
        throw std::invalid_argument("cross cache: batch must share one block layout");
    CrossCache cache;
    cache.batch = static_cast<int64_t>(conds.size());
    Graph g;
    GraphParams p(g, store_);
    std::vector<std::vector<Var>> memory = build_memories(g, p, conds, nullptr);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string pre = "block" + std::to_string(l) + ".";
      Var mem = memory[static_cast<size_t>(l)][0];
      cache.keys.push_back(add(matmul(mem, p(pre + "cross.k.w")), p(pre + "cross.k.b")).value());
      cache.values.push_back(add(matmul(mem, p(pre + "cross.v.w")), p(pre + "cross.v.b")).value());
    }
    return cache;
  }

  // Forward pass against precomputed keys/values, one step index for the
  // whole batch; the sampling loop calls this once per diffusion step.
  Tensor denoise_cached(const Tensor& noisy, int t, const CrossCache& cache) {
    Graph g;
    GraphParams p(g, store_);
    int64_t bsz = noisy.shape[0];
    Var eps = trunk(g, p, g.input(noisy), std::vector<int>(static_cast<size_t>(bsz), t),
                    [&](Graph& gg, GraphParams& pp, int layer, Var cq) {
                      (void)pp;
                      Var ck = gg.input(cache.keys[static_cast<size_t>(layer)]);
                      Var cv = gg.input(cache.values[static_cast<size_t>(layer)]);
                      return cross_mix(gg, cq, ck, cv);
                    });
    return eps.value();
  }

  // Learned prior in normalized trajectory space: a single linear projection
  // of [mean-pooled latents || flattened history].
  Var prior(Graph& g, GraphParams& p, const std::vector<const ConditionSource*>& conds) {
    int64_t bsz = static_cast<int64_t>(conds.size());
    Tensor feats({bsz, cfg_.cond_width + kHistoryFeatureDim});
    for (int64_t s = 0; s < bsz; ++s) {
      const ConditionSource& c = *conds[static_cast<size_t>(s)];
      int64_t w_rows = c.latents.shape.empty() ? 0 : c.latents.shape[0];
      for (int64_t col = 0; col < cfg_.cond_width; ++col) {
        double m = 0.0;
        for (int64_t r = 0; r < w_rows; ++r)
          m += c.latents.data[static_cast<size_t>(r * cfg_.cond_width + col)];
        feats.at2(s, col) = w_rows > 0 ? m / static_cast<double>(w_rows) : 0.0;
      }
      for (int64_t i = 0; i < kHistoryFeatureDim; ++i)
        feats.at2(s, cfg_.cond_width + i) = c.history[i];
    }
    return add(matmul(g.input(feats), p("prior.w")), p("prior.b"));  // [B, 24]
  }

 private:
  // attention of waypoint queries over a memory; cq [B, 8, d], ck/cv [B, M, d]
  Var cross_mix(Graph& g, Var cq, Var ck, Var cv) {
    (void)g;
    int64_t bsz = cq.value().shape[0];
    int64_t n_wp = cq.value().shape[1];
    int64_t mem_len = ck.value().shape[1];
    Tensor allow = Tensor::full({n_wp, mem_len}, 1.0);
    Var wgt = attention_weights(cq, ck, allow, cfg_.n_heads);
    Var vh = detail_attn::split_heads(cv, cfg_.n_heads);
    return reshape(permute(matmul(wgt, vh), {0, 2, 1, 3}), {bsz, n_wp, cfg_.d_model});
  }

  // memory tokens per layer: one stacked [B, M, d] entry when the batch
  // shares a block layout, otherwise one [1, M_s, d] entry per sample
  std::vector<std::vector<Var>> build_memories(Graph& g, GraphParams& p,
                                               const std::vector<const ConditionSource*>& conds,
                                               std::vector<Var>* latent_vars) {
    int64_t bsz = static_cast<int64_t>(conds.size());
    int64_t d = cfg_.d_model;
    bool uniform = true;
    for (int64_t s = 1; s < bsz; ++s)
      if (conds[static_cast<size_t>(s)]->block_ids != conds[0]->block_ids) uniform = false;

    std::vector<std::vector<Var>> memory(static_cast<size_t>(cfg_.n_layers));
    if (uniform) {
      int64_t w_rows = static_cast<int64_t>(conds[0]->block_ids.size());
      Tensor lat_stack({bsz, w_rows, static_cast<int64_t>(cfg_.cond_width)});
      Tensor ego_stack({bsz, static_cast<int64_t>(kEgoFeatureDim)});
      for (int64_t s = 0; s < bsz; ++s) {
        const ConditionSource& c = *conds[static_cast<size_t>(s)];
        std::copy(c.latents.data.begin(), c.latents.data.end(),
                  lat_stack.data.begin() + s * w_rows * cfg_.cond_width);
        std::copy(c.ego.data.begin(), c.ego.data.end(), ego_stack.data.begin() + s * kEgoFeatureDim);
      }
      Var lat = g.input(std::move(lat_stack));
      if (latent_vars) latent_vars->push_back(lat);
      Var ego_tok = reshape(
          add(matmul(g.input(std::move(ego_stack)), p("cond.ego.w")), p("cond.ego.b")),
          {bsz, 1, d});
      std::optional<Var> tokens;
      if (w_rows > 0) {
        std::vector<int64_t> block_rows(conds[0]->block_ids.begin(), conds[0]->block_ids.end());
        Var proj = add(matmul(lat, p("cond.proj.w")), p("cond.proj.b"));  // [B, W, d]
        tokens = add(proj, gather_rows(p("cond.block"), block_rows));     // broadcast [W, d]
      }
      for (int l = 0; l < cfg_.n_layers; ++l) {
        std::vector<int64_t> rows = fusion_rows(cfg_.fusion, l, conds[0]->block_ids);
        std::vector<Var> parts;
        if (tokens && !rows.empty()) {
          // rows come in contiguous runs; slice each run along the token axis
          size_t i = 0;
          while (i < rows.size()) {
            size_t j = i;
            while (j + 1 < rows.size() && rows[j + 1] == rows[j] + 1) ++j;
            parts.push_back(slice(*tokens, 1, rows[i], static_cast<int64_t>(j - i + 1)));
            i = j + 1;
          }
        }
        parts.push_back(ego_tok);
        memory[static_cast<size_t>(l)].push_back(parts.size() == 1 ? parts[0] : concat(parts, 1));
      }
      return memory;
    }

    for (int64_t s = 0; s < bsz; ++s) {
      const ConditionSource& c = *conds[static_cast<size_t>(s)];
      Var lat = g.input(c.latents);
      if (latent_vars) latent_vars->push_back(lat);
      Var ego_tok = reshape(
          add(matmul(reshape(g.input(c.ego), {1, kEgoFeatureDim}), p("cond.ego.w")),
              p("cond.ego.b")),
          {1, d});
      std::vector<int64_t> block_rows(c.block_ids.begin(), c.block_ids.end());
      std::optional<Var> tokens;
      if (!c.block_ids.empty()) {
        Var proj = add(matmul(lat, p("cond.proj.w")), p("cond.proj.b"));  // [W, d]
        tokens = add(proj, gather_rows(p("cond.block"), block_rows));
      }
      for (int l = 0; l < cfg_.n_layers; ++l) {
        std::vector<int64_t> rows = fusion_rows(cfg_.fusion, l, c.block_ids);
        Var mem = tokens && !rows.empty() ? concat({gather_rows(*tokens, rows), ego_tok}, 0)
                                          : ego_tok;
        memory[static_cast<size_t>(l)].push_back(reshape(mem, {1, mem.value().shape[0], d}));
      }
    }
    return memory;
  }

  // waypoint-side computation; the cross-attention memory comes from the
  // callback so training and cached sampling share one definition
  using CrossFn = std::function<Var(Graph&, GraphParams&, int layer, Var cq)>;

  Var trunk(Graph& g, GraphParams& p, Var noisy, const std::vector<int>& ts,
            const CrossFn& cross) {
    int64_t bsz = noisy.value().shape[0];
    if (noisy.value().shape != std::vector<int64_t>{bsz, kTrajDim})
      throw std::invalid_argument("planner: noisy batch must be [B,24], got " +
                                  noisy.value().shape_string());
    int64_t d = cfg_.d_model;
    int64_t n_wp = Trajectory::kNumWaypoints;

    Var x = reshape(noisy, {bsz, n_wp, 3});
    x = add(matmul(x, p("wp.in.w")), p("wp.in.b"));  // [B, 8, d]
    Tensor time_feats({bsz, cfg_.time_embed_dim});
    for (int64_t s = 0; s < bsz; ++s) {
      Tensor e = sinusoidal_embedding(ts[static_cast<size_t>(s)], cfg_.time_embed_dim);
      std::copy(e.data.begin(), e.data.end(), time_feats.data.begin() + s * cfg_.time_embed_dim);
    }
    Var time_proj = add(matmul(g.input(time_feats), p("time.w")), p("time.b"));  // [B, d]
    x = add(x, repeat_middle(time_proj, n_wp));
    x = add(x, p("wp.pos"));

    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string pre = "block" + std::to_string(l) + ".";
      Var normed = layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b"));
      Var q = add(matmul(normed, p(pre + "self.q.w")), p(pre + "self.q.b"));
      Var k = add(matmul(normed, p(pre + "self.k.w")), p(pre + "self.k.b"));
      Var v = add(matmul(normed, p(pre + "self.v.w")), p(pre + "self.v.b"));
      Var qh = detail_attn::split_heads(q, cfg_.n_heads);
      Var kh = detail_attn::split_heads(k, cfg_.n_heads);
      Var vh = detail_attn::split_heads(v, cfg_.n_heads);
      Var w = softmax_last(scale(matmul(qh, transpose_last2(kh)),
                                 1.0 / std::sqrt(static_cast<double>(d / cfg_.n_heads))));
      Var mixed = reshape(permute(matmul(w, vh), {0, 2, 1, 3}), {bsz, n_wp, d});
      x = add(x, add(matmul(mixed, p(pre + "self.o.w")), p(pre + "self.o.b")));

      Var normed_c = layer_norm(x, p(pre + "lnc.g"), p(pre + "lnc.b"));
      Var cq = add(matmul(normed_c, p(pre + "cross.q.w")), p(pre + "cross.q.b"));
      Var cross_mixed = cross(g, p, l, cq);
      x = add(x, add(matmul(cross_mixed, p(pre + "cross.o.w")), p(pre + "cross.o.b")));

      Var normed2 = layer_norm(x, p(pre + "ln2.g"), p(pre + "ln2.b"));
      Var hidden = gelu(add(matmul(normed2, p(pre + "ffn.w1")), p(pre + "ffn.b1")));
      x = add(x, add(matmul(hidden, p(pre + "ffn.w2")), p(pre + "ffn.b2")));
    }
    x = layer_norm(x, p("final_ln.g"), p("final_ln.b"));
    Var eps = add(matmul(x, p("out.w")), p("out.b"));  // [B, 8, 3]
    return reshape(eps, {bsz, kTrajDim});
  }

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
    w("wp.in.w", {3, d});
    zeros("wp.in.b", {d});
    w("wp.pos", {Trajectory::kNumWaypoints, d});
    w("time.w", {cfg_.time_embed_dim, d});
    zeros("time.b", {d});
    w("cond.proj.w", {cfg_.cond_width, d});
    zeros("cond.proj.b", {d});
    w("cond.block", {5, d});
    w("cond.ego.w", {kEgoFeatureDim, d});
    zeros("cond.ego.b", {d});
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string pre = "block" + std::to_string(l) + ".";
      for (const char* group : {"self", "cross"})
        for (const char* proj : {"q", "k", "v", "o"}) {
          w(pre + group + "." + proj + ".w", {d, d});
          zeros(pre + group + "." + proj + ".b", {d});
        }
      for (const char* ln : {"ln1", "lnc", "ln2"}) {
        ones(pre + ln + ".g", {d});
        zeros(pre + ln + ".b", {d});
      }
      w(pre + "ffn.w1", {d, ffn});
      zeros(pre + "ffn.b1", {ffn});
      w(pre + "ffn.w2", {ffn, d});
      zeros(pre + "ffn.b2", {d});
    }
    ones("final_ln.g", {d});
    zeros("final_ln.b", {d});
    zeros("out.w", {d, 3});  // eps-hat starts at exactly zero
    zeros("out.b", {3});
    w("prior.w", {cfg_.cond_width + kHistoryFeatureDim, kTrajDim});
    zeros("prior.b", {kTrajDim});
  }

  PlannerConfig cfg_;
  DiffusionSchedule schedule_;
  ParamStore store_;
  TrajNorm norm_;
};

// Standard L2 objective on the noise residual, summed over trajectory
// coordinates and averaged over the batch.
inline Var diffusion_l2(Var eps_hat, const Tensor& eps) {
  int64_t bsz = eps_hat.value().shape[0];
  Var t = eps_hat.g->input(eps);
  return scale(sum_all(square(sub(eps_hat, t))), 1.0 / static_cast<double>(bsz));
}

// ---------------------------------------------------------------------------
// DDPM ancestral sampling, injectable network for oracle tests.
// ---------------------------------------------------------------------------

using DenoiseFn = std::function<Tensor(const Tensor& noisy, int t)>;

inline Tensor ddpm_sample(const DiffusionSchedule& s, const DenoiseFn& net, const Tensor& init,
                          uint64_t seed, std::vector<Tensor>* x0_trace = nullptr) {
  Rng rng(seed);
  Tensor z = init;
  for (int t = s.steps; t >= 1; --t) {
    Tensor eps_hat = net(z, t);
    check_same_shape(z, eps_hat, "ddpm_sample");
    double ab_t = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
    Tensor x0(z.shape);
    for (int64_t i = 0; i < z.numel(); ++i)
      x0.data[static_cast<size_t>(i)] =
          (z.data[static_cast<size_t>(i)] -
           std::sqrt(1.0 - ab_t) * eps_hat.data[static_cast<size_t>(i)]) /
          std::sqrt(ab_t);
    if (x0_trace) x0_trace->push_back(x0);
    if (t == 1) {
      z = x0;
      break;
    }
    double beta = s.beta(t), alpha = s.alpha(t);
    double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab_t);
    double c1 = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t);
    double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t));
    for (int64_t i = 0; i < z.numel(); ++i)
      z.data[static_cast<size_t>(i)] = c0 * x0.data[static_cast<size_t>(i)] +
                                       c1 * z.data[static_cast<size_t>(i)] +
                                       sigma * rng.normal();
  }
  return z;
}

// Batched ancestral sampling from the learned-prior initialization. Each
// sample draws from its own seeded noise stream, so results do not depend
// on how scenarios are grouped into batches.
inline std::vector<Trajectory> sample_trajectories(
    DiffusionPlanner& planner, const std::vector<const ConditionSource*>& conds,
    const std::vector<uint64_t>& seeds) {
  if (conds.size() != seeds.size())
    throw std::invalid_argument("sample_trajectories: seed/condition count mismatch");
  int64_t bsz = static_cast<int64_t>(conds.size());
  if (bsz == 0) return {};
  const DiffusionSchedule& s = planner.schedule();

  Tensor prior_value;
  {
    Graph g;
    GraphParams p(g, planner.params());
    prior_value = planner.prior(g, p, conds).value();  // [B, 24]
  }
  DiffusionPlanner::CrossCache cache = planner.build_cross_cache(conds);

  std::vector<Rng> streams;
  streams.reserve(conds.size());
  Tensor z({bsz, kTrajDim});
  double noise_scale = std::sqrt(1.0 - s.alpha_bar(s.steps));
  for (int64_t i = 0; i < bsz; ++i) {
    streams.emplace_back(Rng::mix(seeds[static_cast<size_t>(i)], 0xD1FFu));
    for (int64_t c = 0; c < kTrajDim; ++c)
      z.at2(i, c) = prior_value.at2(i, c) + noise_scale * streams.back().normal();
  }

  for (int t = s.steps; t >= 1; --t) {
    Tensor eps_hat = planner.denoise_cached(z, t, cache);
    double ab_t = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
    if (t == 1) {
      for (int64_t i = 0; i < z.numel(); ++i)
        z.data[static_cast<size_t>(i)] =
            (z.data[static_cast<size_t>(i)] -
             std::sqrt(1.0 - ab_t) * eps_hat.data[static_cast<size_t>(i)]) /
            std::sqrt(ab_t);
      break;
    }
    double beta = s.beta(t), alpha = s.alpha(t);
    double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab_t);
    double c1 = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t);
    double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t));
    for (int64_t i = 0; i < bsz; ++i)
      for (int64_t c = 0; c < kTrajDim; ++c) {
        double zi = z.at2(i, c);
        double x0 = (zi - std::sqrt(1.0 - ab_t) * eps_hat.at2(i, c)) / std::sqrt(ab_t);
        z.at2(i, c) = c0 * x0 + c1 * zi + sigma * streams[static_cast<size_t>(i)].normal();
      }
  }

  std::vector<Trajectory> out;
  out.reserve(conds.size());
  for (int64_t i = 0; i < bsz; ++i) {
    Tensor flat({kTrajDim});
    for (int64_t c = 0; c < kTrajDim; ++c) flat[c] = z.at2(i, c);
    out.push_back(flat_to_trajectory(planner.norm().denormalize(flat)));
  }
  return out;
}

inline Trajectory sample_trajectory(DiffusionPlanner& planner, const ConditionSource& cond,
                                    uint64_t seed) {
  return sample_trajectories(planner, {&cond}, {seed})[0];
}

}  // namespace sagdrive
