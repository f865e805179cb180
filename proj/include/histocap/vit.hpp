#pragma once

// Frozen hierarchical ViT encoding of large patches.
//
// A patch of L4×L4 pixels is cut into (L4/L2)² sub-patches of L2×L2 pixels.
// ViT_L2 turns each sub-patch (tokens of l×l pixels) into a CLS vector; the
// grid of sub-patch CLS vectors is the token sequence of ViT_L4, whose token
// embedding is the dimension bridge between the two levels. The patch token
// is concat(CLS_L4, mean of the sub-patch CLS vectors).

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "histocap/archive.hpp"
#include "histocap/error.hpp"
#include "histocap/image.hpp"
#include "histocap/numerics/ops.hpp"
#include "histocap/rng.hpp"
#include "histocap/tiler.hpp"

namespace histocap {

struct ViTConfig {
  std::size_t input_size = 256;  // L
  std::size_t token_size = 16;   // l
  std::size_t token_dim = 768;   // features per input token
  std::size_t embed_dim = 384;   // output CLS dim
  std::size_t depth = 12;
  std::size_t heads = 6;
  double mlp_ratio = 4.0;
  double ln_eps = 1e-6;

  std::size_t grid() const { return input_size / token_size; }
  std::size_t n_tokens() const { return grid() * grid(); }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::lround(static_cast<double>(embed_dim) * mlp_ratio));
  }

  void validate(const std::string& name) const {
    if (token_size == 0 || input_size % token_size != 0) {
      throw ConfigError(name + ": input_size " + std::to_string(input_size) +
                        " is not divisible by token_size " + std::to_string(token_size));
    }
    if (heads == 0 || embed_dim % heads != 0) {
      throw ConfigError(name + ": embed_dim " + std::to_string(embed_dim) +
                        " is not divisible by heads " + std::to_string(heads));
    }
    if (depth == 0 || token_dim == 0 || mlp_hidden() == 0) {
      throw ConfigError(name + ": depth, token_dim and mlp width must be positive");
    }
  }

  bool operator==(const ViTConfig&) const = default;
};

struct HierarchyConfig {
  ViTConfig vit256;
  ViTConfig vit4096{4096, 256, 384, 192, 6, 6, 4.0, 1e-6};
  double pixel_mean = 0.5;
  double pixel_std = 0.5;

  std::size_t patch_size() const { return vit4096.input_size; }
  std::size_t cls_patch_dim() const { return vit4096.embed_dim + vit256.embed_dim; }

  void validate() const {
    vit256.validate("vit256");
    vit4096.validate("vit4096");
    if (vit256.token_dim != 3 * vit256.token_size * vit256.token_size) {
      throw ConfigError("vit256.token_dim must be 3·token_size² for RGB pixel tokens");
    }
    if (vit4096.token_size != vit256.input_size) {
      throw ConfigError("vit4096.token_size must equal vit256.input_size");
    }
    if (vit4096.token_dim != vit256.embed_dim) {
      throw ConfigError("vit4096.token_dim must equal vit256.embed_dim");
    }
  }

  // Target architecture for externally converted pre-trained weights.
  static HierarchyConfig hipt_compat() { return {}; }

  // Full output widths (384/192) at 1/16 pixel scale: 256 sub-patches of
  // 256 single-pixel tokens each.
  static HierarchyConfig toy() {
    HierarchyConfig c;
    c.vit256 = {16, 1, 3, 384, 2, 6, 4.0, 1e-6};
    c.vit4096 = {256, 16, 384, 192, 2, 6, 4.0, 1e-6};
    return c;
  }

  // Narrow widths and a 4×4 hierarchy (16 sub-patches of 16 tokens) for
  // end-to-end desk runs.
  static HierarchyConfig micro() {
    HierarchyConfig c;
    c.vit256 = {16, 4, 48, 24, 1, 2, 2.0, 1e-6};
    c.vit4096 = {64, 16, 24, 12, 1, 2, 2.0, 1e-6};
    return c;
  }

  bool operator==(const HierarchyConfig&) const = default;
};

template <typename T>
struct ViTBlock {
  Tensor<T> norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b;
  Tensor<T> norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

// Called with (block, head, attention matrix [(n+1)×(n+1)]).
template <typename T>
using AttentionProbe = std::function<void(std::size_t, std::size_t, const Tensor<T>&)>;

namespace detail {

template <typename T>
Tensor<T> xavier(Rng& rng, std::size_t in, std::size_t out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> v(in * out);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>({in, out}, std::move(v));
}

template <typename T>
Tensor<T> normal(Rng& rng, Shape shape, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace detail

// Pre-norm vision transformer returning the final-normalized CLS row.
template <typename T>
class ViT {
 public:
  ViTConfig config;
  Tensor<T> patch_w, patch_b, cls_token, pos_embed;
  std::vector<ViTBlock<T>> blocks;
  Tensor<T> norm_w, norm_b;

  static ViT random(const ViTConfig& cfg, Rng& rng) {
    cfg.validate("vit");
    const std::size_t d = cfg.embed_dim, hidden = cfg.mlp_hidden();
    ViT v;
    v.config = cfg;
    v.patch_w = detail::xavier<T>(rng, cfg.token_dim, d);
    v.patch_b = Tensor<T>({d});
    v.cls_token = detail::normal<T>(rng, {1, d}, 0.02);
    v.pos_embed = detail::normal<T>(rng, {cfg.n_tokens() + 1, d}, 0.02);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      ViTBlock<T> b;
      b.norm1_w = Tensor<T>({d}, T(1));
      b.norm1_b = Tensor<T>({d});
      b.qkv_w = detail::xavier<T>(rng, d, 3 * d);
      b.qkv_b = Tensor<T>({3 * d});
      b.proj_w = detail::xavier<T>(rng, d, d);
      b.proj_b = Tensor<T>({d});
      b.norm2_w = Tensor<T>({d}, T(1));
      b.norm2_b = Tensor<T>({d});
      b.fc1_w = detail::xavier<T>(rng, d, hidden);
      b.fc1_b = Tensor<T>({hidden});
      b.fc2_w = detail::xavier<T>(rng, hidden, d);
      b.fc2_b = Tensor<T>({d});
      v.blocks.push_back(std::move(b));
    }
    v.norm_w = Tensor<T>({d}, T(1));
    v.norm_b = Tensor<T>({d});
    return v;
  }

  // Every tensor with its archive name and required shape.
  std::vector<std::tuple<std::string, Tensor<T>*, Shape>> named_tensors(const std::string& prefix) {
    const std::size_t d = config.embed_dim, hidden = config.mlp_hidden();
    std::vector<std::tuple<std::string, Tensor<T>*, Shape>> out = {
        {prefix + ".patch_embed.weight", &patch_w, {config.token_dim, d}},
        {prefix + ".patch_embed.bias", &patch_b, {d}},
        {prefix + ".cls_token", &cls_token, {1, d}},
        {prefix + ".pos_embed", &pos_embed, {config.n_tokens() + 1, d}},
        {prefix + ".norm.weight", &norm_w, {d}},
        {prefix + ".norm.bias", &norm_b, {d}},
    };
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string p = prefix + ".blocks." + std::to_string(i);
      out.insert(out.end(), {{p + ".norm1.weight", &b.norm1_w, {d}},
                             {p + ".norm1.bias", &b.norm1_b, {d}},
                             {p + ".attn.qkv.weight", &b.qkv_w, {d, 3 * d}},
                             {p + ".attn.qkv.bias", &b.qkv_b, {3 * d}},
                             {p + ".attn.proj.weight", &b.proj_w, {d, d}},
                             {p + ".attn.proj.bias", &b.proj_b, {d}},
                             {p + ".norm2.weight", &b.norm2_w, {d}},
                             {p + ".norm2.bias", &b.norm2_b, {d}},
                             {p + ".mlp.fc1.weight", &b.fc1_w, {d, hidden}},
                             {p + ".mlp.fc1.bias", &b.fc1_b, {hidden}},
                             {p + ".mlp.fc2.weight", &b.fc2_w, {hidden, d}},
                             {p + ".mlp.fc2.bias", &b.fc2_b, {d}}});
    }
    return out;
  }

  void save_to(TensorMap& out, const std::string& prefix) const {
    auto& self = const_cast<ViT&>(*this);
    for (auto& [name, t, shape] : self.named_tensors(prefix)) put_tensor(out, name, *t);
  }

  static ViT load_from(const TensorMap& in, const std::string& prefix, const ViTConfig& cfg) {
    cfg.validate(prefix);
    ViT v;
    v.config = cfg;
    v.blocks.resize(cfg.depth);
    for (auto& [name, t, shape] : v.named_tensors(prefix)) *t = take_tensor<T>(in, name, shape);
    return v;
  }

  // tokens [n_tokens × token_dim] -> CLS [1 × embed_dim]
  Tensor<T> forward(const Tensor<T>& tokens, const AttentionProbe<T>& probe = {}) const {
    const std::size_t n = config.n_tokens(), d = config.embed_dim;
    if (tokens.rank() != 2 || tokens.dim(0) != n || tokens.dim(1) != config.token_dim) {
      throw ShapeError("vit_forward expects tokens [" + std::to_string(n) + "x" +
                       std::to_string(config.token_dim) + "], got " + shape_str(tokens.shape()));
    }
    const T eps = static_cast<T>(config.ln_eps);
    const T att_scale = T(1) / std::sqrt(static_cast<T>(config.head_dim()));
    Tensor<T> x = add_bias(matmul(tokens, patch_w), patch_b);
    x = add(concat<T>({cls_token, x}, 0), pos_embed);
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const auto& b = blocks[bi];
      const Tensor<T> h = layernorm(x, b.norm1_w, b.norm1_b, eps);
      const Tensor<T> qkv = add_bias(matmul(h, b.qkv_w), b.qkv_b);
      std::vector<Tensor<T>> heads;
      const std::size_t hd = config.head_dim();
      for (std::size_t hi = 0; hi < config.heads; ++hi) {
        const Tensor<T> q = slice(qkv, 1, hi * hd, hd);
        const Tensor<T> k = slice(qkv, 1, d + hi * hd, hd);
        const Tensor<T> v = slice(qkv, 1, 2 * d + hi * hd, hd);
        const Tensor<T> att = softmax(scale(matmul(q, transpose(k)), att_scale), 1);
        if (probe) probe(bi, hi, att);
        heads.push_back(matmul(att, v));
      }
      x = add(x, add_bias(matmul(concat<T>(heads, 1), b.proj_w), b.proj_b));
      const Tensor<T> h2 = layernorm(x, b.norm2_w, b.norm2_b, eps);
      const Tensor<T> mlp = add_bias(matmul(gelu(add_bias(matmul(h2, b.fc1_w), b.fc1_b)), b.fc2_w), b.fc2_b);
      x = add(x, mlp);
    }
    return slice(layernorm(x, norm_w, norm_b, eps), 0, 0, 1);
  }
};

template <typename T>
struct HierarchyWeights {
  HierarchyConfig config;
  ViT<T> vit256;
  ViT<T> vit4096;

  static HierarchyWeights random(const HierarchyConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    HierarchyWeights w{cfg, ViT<T>::random(cfg.vit256, rng), ViT<T>::random(cfg.vit4096, rng)};
    return w;
  }

  TensorMap to_archive() const {
    TensorMap m;
    vit256.save_to(m, "vit256");
    vit4096.save_to(m, "vit4096");
    return m;
  }

  static HierarchyWeights from_archive(const TensorMap& m, const HierarchyConfig& cfg) {
    cfg.validate();
    return {cfg, ViT<T>::load_from(m, "vit256", cfg.vit256), ViT<T>::load_from(m, "vit4096", cfg.vit4096)};
  }

  void save(const std::filesystem::path& path) const { archive::save(path, to_archive()); }
  static HierarchyWeights load(const std::filesystem::path& path, const HierarchyConfig& cfg) {
    return from_archive(archive::load(path), cfg);
  }
};

// Pixel tokens of the square region at (x0, y0): row-major over the token
// grid, each token flattened channel-major (c, y, x) and normalized as
// (v/255 − mean)/std.
template <typename T>
Tensor<T> pixel_tokens(const SlideImage& img, std::size_t x0, std::size_t y0, const ViTConfig& cfg,
                       double mean, double stddev) {
  const std::size_t l = cfg.token_size, g = cfg.grid();
  std::vector<T> v(cfg.n_tokens() * cfg.token_dim);
  std::size_t k = 0;
  for (std::size_t ty = 0; ty < g; ++ty)
    for (std::size_t tx = 0; tx < g; ++tx)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < l; ++y)
          for (std::size_t x = 0; x < l; ++x) {
            const double p = img.at(x0 + tx * l + x, y0 + ty * l + y)[c];
            v[k++] = static_cast<T>((p / 255.0 - mean) / stddev);
          }
  return Tensor<T>({cfg.n_tokens(), cfg.token_dim}, std::move(v));
}

template <typename T>
struct PatchEncoding {
  Tensor<T> cls256;    // [S × d256], one row per sub-patch, row-major
  Tensor<T> cls4096;   // [1 × d4096]
  Tensor<T> token;     // [1 × (d4096 + d256)] = concat(cls4096, mean(cls256))
};

template <typename T>
PatchEncoding<T> encode_patch_4096(const SlideImage& patch, const HierarchyWeights<T>& w) {
  const auto& cfg = w.config;
  const std::size_t size = cfg.patch_size(), sub = cfg.vit256.input_size;
  if (patch.width != size || patch.height != size) {
    throw ShapeError("patch must be " + std::to_string(size) + "x" + std::to_string(size) +
                     " pixels, got " + std::to_string(patch.width) + "x" + std::to_string(patch.height));
  }
  NoGradScope<T> inference;
  const std::size_t g = cfg.vit4096.grid();
  std::vector<Tensor<T>> rows;
  rows.reserve(g * g);
  for (std::size_t sy = 0; sy < g; ++sy)
    for (std::size_t sx = 0; sx < g; ++sx) {
      rows.push_back(w.vit256.forward(
          pixel_tokens<T>(patch, sx * sub, sy * sub, cfg.vit256, cfg.pixel_mean, cfg.pixel_std)));
    }
  PatchEncoding<T> out;
  out.cls256 = concat<T>(rows, 0);
  out.cls4096 = w.vit4096.forward(out.cls256);
  out.token = concat<T>({out.cls4096, reshape(mean(out.cls256, 0), {1, cfg.vit256.embed_dim})}, 1);
  return out;
}

// 𝒫 for one slide: one CLS_patch row per manifest patch, in manifest order.
// Patch rasters are resolved relative to `root`.
template <typename T>
Tensor<T> encode_slide(const SlideRecord& record, const std::filesystem::path& root,
                       const HierarchyWeights<T>& w) {
  if (record.patches.empty()) throw DataError("slide '" + record.id + "' has no patches (M=0)");
  std::vector<Tensor<T>> rows;
  for (const auto& p : record.patches) {
    if (p.path.empty()) throw DataError("slide '" + record.id + "' patch has no raster path");
    rows.push_back(encode_patch_4096(read_image(root / p.path), w).token);
  }
  return concat<T>(rows, 0);
}

inline std::filesystem::path feature_path(const std::filesystem::path& dir, const std::string& slide_id) {
  return dir / (slide_id + ".hct");
}

inline void save_patch_tokens(const std::filesystem::path& path, const Tensorf& tokens) {
  archive::save(path, {{"patch_tokens", tokens}});
}

inline Tensorf load_patch_tokens(const std::filesystem::path& path) {
  const auto m = archive::load(path);
  const auto it = m.find("patch_tokens");
  if (it == m.end()) throw DataError(path.string() + ": missing tensor 'patch_tokens'");
  if (it->second.rank() != 2) throw ShapeError(path.string() + ": patch_tokens must be rank 2");
  return it->second;
}

}  // namespace histocap
