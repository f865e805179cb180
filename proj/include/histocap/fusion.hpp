#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "histocap/error.hpp"
#include "histocap/numerics/ops.hpp"
#include "histocap/params.hpp"
#include "histocap/thumbnail_encoder.hpp"

namespace histocap {

struct FusionConfig {
  std::size_t patch_dim = 576;
  std::size_t attn_dim = 128;
  std::size_t proj_dim = 512;

  bool operator==(const FusionConfig&) const = default;
};

// Patch-token matrices of several slides, zero-padded to a common row count.
template <typename T>
struct PatchBatch {
  Tensor<T> tokens;                // [B × M_max × D]
  std::vector<std::uint8_t> mask;  // B·M_max, 1 = real row
  std::vector<std::size_t> counts;

  static PatchBatch collate(const std::vector<Tensor<T>>& slides) {
    if (slides.empty()) throw ValueError("cannot collate an empty batch");
    const std::size_t d = slides.front().dim(1);
    std::size_t m_max = 0;
    for (const auto& s : slides) {
      if (s.rank() != 2 || s.dim(1) != d) {
        throw ShapeError("patch tokens " + shape_str(s.shape()) + " do not share width " + std::to_string(d));
      }
      if (s.dim(0) == 0) throw DataError("slide with zero patches in batch");
      m_max = std::max(m_max, s.dim(0));
    }
    PatchBatch b;
    std::vector<T> v(slides.size() * m_max * d, T(0));
    b.mask.assign(slides.size() * m_max, 0);
    for (std::size_t i = 0; i < slides.size(); ++i) {
      const auto src = slides[i].data();
      std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(i * m_max * d));
      std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(i * m_max), slides[i].dim(0), 1);
      b.counts.push_back(slides[i].dim(0));
    }
    b.tokens = Tensor<T>({slides.size(), m_max, d}, std::move(v));
    return b;
  }
};

template <typename T>
struct SlideVector {
  Tensor<T> alpha;      // [B × M_max], zero on padding
  Tensor<T> pooled;     // [B × patch_dim]
  Tensor<T> projected;  // [B × proj_dim]
};

template <typename T>
struct FusedRepresentation {
  Tensor<T> annotations;  // [B × G² × (D_thumb + proj_dim)]
  Tensor<T> global;       // [B × (D_thumb + proj_dim)]
};

// score_i = w2ᵀ tanh(W1ᵀ p_i); α = masked softmax; pooled = Σ α_i p_i;
// projected = relu(pooled·P + b).
template <typename T>
class AttentionPool {
 public:
  FusionConfig config;
  Tensor<T> w1, w2, proj_w, proj_b;

  static AttentionPool random(const FusionConfig& cfg, Rng& rng) {
    AttentionPool a;
    a.config = cfg;
    a.w1 = linear_uniform<T>(rng, {cfg.patch_dim, cfg.attn_dim}, cfg.patch_dim);
    a.w2 = linear_uniform<T>(rng, {cfg.attn_dim, 1}, cfg.attn_dim);
    a.proj_w = linear_uniform<T>(rng, {cfg.patch_dim, cfg.proj_dim}, cfg.patch_dim);
    a.proj_b = Tensor<T>({cfg.proj_dim});
    set_trainable(a.params(), true);
    return a;
  }

  ParamList<T> params() const {
    return {{"pool.attn.w1", w1}, {"pool.attn.w2", w2}, {"pool.proj.weight", proj_w}, {"pool.proj.bias", proj_b}};
  }

  SlideVector<T> forward(const PatchBatch<T>& batch) const {
    const auto& p = batch.tokens;
    if (p.rank() != 3 || p.dim(2) != config.patch_dim) {
      throw ShapeError("attention pool expects [BxMx" + std::to_string(config.patch_dim) + "], got " +
                       shape_str(p.shape()));
    }
    const std::size_t b = p.dim(0), m = p.dim(1), d = p.dim(2);
    const Tensor<T> scores = matmul(tanh(matmul(reshape(p, {b * m, d}), w1)), w2);
    SlideVector<T> out;
    out.alpha = masked_softmax(reshape(scores, {b, m}), batch.mask);
    out.pooled = reshape(bmm(reshape(out.alpha, {b, 1, m}), p), {b, d});
    out.projected = relu(add_bias(matmul(out.pooled, proj_w), proj_b));
    return out;
  }

  // One slide, no padding.
  SlideVector<T> forward(const Tensor<T>& patch_tokens) const {
    if (patch_tokens.rank() != 2 || patch_tokens.dim(0) == 0) {
      throw DataError("attention pool needs M >= 1 patch tokens, got " + shape_str(patch_tokens.shape()));
    }
    return forward(PatchBatch<T>::collate({patch_tokens}));
  }
};

// Broadcast-concatenates the projected slide vector onto every thumbnail grid
// position, and onto the global thumbnail vector.
template <typename T>
FusedRepresentation<T> fuse(const ThumbFeatures<T>& thumb, const SlideVector<T>& slide) {
  const auto& grid = thumb.grid;
  const auto& proj = slide.projected;
  if (grid.rank() != 3 || proj.rank() != 2 || grid.dim(0) != proj.dim(0) ||
      thumb.global.rank() != 2 || thumb.global.dim(0) != grid.dim(0) || thumb.global.dim(1) != grid.dim(2)) {
    throw ShapeError("fuse: incompatible thumbnail " + shape_str(grid.shape()) + " / " +
                     shape_str(thumb.global.shape()) + " and slide vector " + shape_str(proj.shape()));
  }
  FusedRepresentation<T> f;
  f.annotations = concat<T>({grid, expand(proj, grid.dim(1))}, 2);
  f.global = concat<T>({thumb.global, proj}, 1);
  return f;
}

struct RankedPatch {
  std::size_t index;
  double alpha;
};

// Indices by α descending, ties by ascending index.
inline std::vector<RankedPatch> top_k_patches(const std::vector<double>& alpha, std::size_t k) {
  if (k > alpha.size()) {
    throw ValueError("top_k: k=" + std::to_string(k) + " exceeds M=" + std::to_string(alpha.size()));
  }
  std::vector<std::size_t> order(alpha.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return alpha[a] > alpha[b]; });
  std::vector<RankedPatch> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], alpha[order[i]]});
  return out;
}

}  // namespace histocap
