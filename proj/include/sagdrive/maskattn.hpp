#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sagdrive/autodiff.hpp"
#include "sagdrive/tensor.hpp"

namespace sagdrive {

// Blocks of the world-query sequence, in token order after the prompt.
enum class QueryBlock : int {
  kSceneT = 0,
  kAgentT = 1,
  kGoal = 2,
  kSceneFuture = 3,
  kAgentFuture = 4,
};

// Knowledge categories: the two scene blocks share one, the two agent
// blocks another, the goal stands alone.
enum class QueryCategory : int { kScene = 0, kAgent = 1, kGoal = 2 };

inline QueryCategory category_of_block(int block) {
  switch (block) {
    case 0:
    case 3:
      return QueryCategory::kScene;
    case 1:
    case 4:
      return QueryCategory::kAgent;
    default:
      return QueryCategory::kGoal;
  }
}

struct QueryLayout {
  int n_prompt = 0;
  std::array<int, 5> block_sizes{};    // scene_t, agent_t, goal, scene_future, agent_future
  std::array<int, 5> block_offsets{};  // start indices, prompt first

  static constexpr std::array<int, 5> kDefaultBlockSizes = {16, 8, 1, 16, 8};

  int total() const {
    int t = n_prompt;
    for (int s : block_sizes) t += s;
    return t;
  }
  int world_total() const { return total() - n_prompt; }

  int block_of(int pos) const {  // -1 for prompt positions
    if (pos < n_prompt) return -1;
    for (int b = 0; b < 5; ++b)
      if (pos >= block_offsets[static_cast<size_t>(b)] &&
          pos < block_offsets[static_cast<size_t>(b)] + block_sizes[static_cast<size_t>(b)])
        return b;
    throw std::out_of_range("layout: position " + std::to_string(pos) + " beyond total " +
                            std::to_string(total()));
  }
};

inline QueryLayout build_layout(int n_prompt,
                                std::array<int, 5> block_sizes = QueryLayout::kDefaultBlockSizes) {
  if (n_prompt < 0) throw std::invalid_argument("layout: negative prompt length");
  for (int s : block_sizes)
    if (s < 0) throw std::invalid_argument("layout: negative block size");
  QueryLayout layout;
  layout.n_prompt = n_prompt;
  layout.block_sizes = block_sizes;
  int off = n_prompt;
  for (int b = 0; b < 5; ++b) {
    layout.block_offsets[static_cast<size_t>(b)] = off;
    off += block_sizes[static_cast<size_t>(b)];
  }
  return layout;
}

struct AttentionMask {
  int size = 0;
  std::vector<uint8_t> allow;  // row-major [query][key]

  explicit AttentionMask(int n = 0) : size(n), allow(static_cast<size_t>(n) * n, 0) {}

  bool allowed(int q, int k) const { return allow[static_cast<size_t>(q) * size + k] != 0; }
  void set(int q, int k, bool v) { allow[static_cast<size_t>(q) * size + k] = v ? 1 : 0; }

  int64_t allowed_count() const {
    int64_t n = 0;
    for (uint8_t v : allow) n += v;
    return n;
  }

  Tensor to_tensor() const {
    Tensor t({size, size});
    for (size_t i = 0; i < allow.size(); ++i) t.data[i] = allow[i] ? 1.0 : 0.0;
    return t;
  }
};

inline AttentionMask build_causal_mask(const QueryLayout& layout) {
  int n = layout.total();
  AttentionMask mask(n);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k <= q; ++k) mask.set(q, k, true);
  return mask;
}

// Prompt rows stay causal over the prompt and never see world queries.
// World rows see the whole prompt plus earlier positions of their own
// category only; the goal attends the prompt and itself.
inline AttentionMask build_structured_mask(const QueryLayout& layout) {
  int n = layout.total();
  AttentionMask mask(n);
  for (int q = 0; q < n; ++q) {
    int qb = layout.block_of(q);
    if (qb < 0) {
      for (int k = 0; k <= q; ++k) mask.set(q, k, true);
      continue;
    }
    QueryCategory qc = category_of_block(qb);
    for (int k = 0; k < layout.n_prompt; ++k) mask.set(q, k, true);
    for (int k = layout.n_prompt; k <= q; ++k) {
      int kb = layout.block_of(k);
      if (category_of_block(kb) == qc) mask.set(q, k, true);
    }
  }
  return mask;
}

// 8-bit binary PGM, 255 = attention allowed; matches the usual mask figures.
inline void write_mask_pgm(const AttentionMask& mask, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("pgm: cannot open " + path);
  os << "P5\n" << mask.size << " " << mask.size << "\n255\n";
  for (uint8_t v : mask.allow) os.put(v ? static_cast<char>(255) : static_cast<char>(0));
  if (!os) throw std::runtime_error("pgm: write failed " + path);
}

// ---------------------------------------------------------------------------
// Masked multi-head attention. Q, K, V: [L, D] or [B, L, D]; mask [L, L].
// Disallowed logits receive -1e9 before the softmax; the output is the
// attention-weighted value mixture (projections live in the caller).
// ---------------------------------------------------------------------------

namespace detail_attn {

inline void check_attention_shapes(const Tensor& q, const Tensor& k, const Tensor& v,
                                   int mask_rows, int mask_cols, int n_heads) {
  if (q.rank() != k.rank() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3))
    throw std::invalid_argument("attention: Q/K/V must all be [L,D] or [B,L,D], got " +
                                q.shape_string() + ", " + k.shape_string() + ", " +
                                v.shape_string());
  int64_t d = q.shape.back();
  if (k.shape.back() != d || v.shape.back() != d)
    throw std::invalid_argument("attention: model width mismatch " + q.shape_string() + " vs " +
                                k.shape_string() + " vs " + v.shape_string());
  if (d % n_heads != 0)
    throw std::invalid_argument("attention: width " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(n_heads));
  int64_t lq = q.shape[static_cast<size_t>(q.rank() - 2)];
  int64_t lk = k.shape[static_cast<size_t>(k.rank() - 2)];
  if (lq != mask_rows || lk != mask_cols)
    throw std::invalid_argument("attention: sequence length " + std::to_string(lq) + "/" +
                                std::to_string(lk) + " does not match mask " +
                                std::to_string(mask_rows) + "x" + std::to_string(mask_cols));
  if (v.shape[static_cast<size_t>(v.rank() - 2)] != lk)
    throw std::invalid_argument("attention: K/V length mismatch " + k.shape_string() + " vs " +
                                v.shape_string());
}

inline Var split_heads(Var x, int n_heads) {
  const Tensor& t = x.value();
  int64_t b = t.rank() == 3 ? t.shape[0] : 1;
  int64_t l = t.shape[static_cast<size_t>(t.rank() - 2)];
  int64_t d = t.shape.back();
  Var r = reshape(x, {b, l, n_heads, d / n_heads});
  return permute(r, {0, 2, 1, 3});  // [B, H, L, dh]
}

}  // namespace detail_attn

// Softmaxed attention weights [B, H, Lq, Lk]; exposed so tests can measure
// mass on disallowed keys directly.
inline Var attention_weights(Var q, Var k, const Tensor& allow, int n_heads) {
  detail_attn::check_attention_shapes(q.value(), k.value(), k.value(),
                                      static_cast<int>(allow.shape[0]),
                                      static_cast<int>(allow.shape[1]), n_heads);
  int64_t dh = q.value().shape.back() / n_heads;
  Var qh = detail_attn::split_heads(q, n_heads);
  Var kh = detail_attn::split_heads(k, n_heads);
  Var scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  return softmax_last(masked_fill(scores, allow));
}

inline Var masked_attention(Var q, Var k, Var v, const AttentionMask& mask, int n_heads) {
  // node construction reallocates graph storage, so copy shape facts first
  const std::vector<int64_t> q_shape = q.value().shape;
  detail_attn::check_attention_shapes(q.value(), k.value(), v.value(), mask.size, mask.size,
                                      n_heads);
  bool flat = q_shape.size() == 2;
  Tensor allow = mask.to_tensor();
  Var w = attention_weights(q, k, allow, n_heads);
  Var vh = detail_attn::split_heads(v, n_heads);
  Var mixed = matmul(w, vh);                  // [B, H, L, dh]
  Var merged = permute(mixed, {0, 2, 1, 3});  // [B, L, H, dh]
  int64_t b = flat ? 1 : q_shape[0];
  int64_t l = q_shape[q_shape.size() - 2];
  int64_t d = q_shape.back();
  Var out = reshape(merged, {b, l, d});
  return flat ? reshape(out, {l, d}) : out;
}

}  // namespace sagdrive
