#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "histocap/fusion.hpp"
#include "histocap/thumbnail_encoder.hpp"
#include "histocap/tiler.hpp"
#include "histocap/vit.hpp"
#include "histocap/vocab.hpp"

namespace histocap {

// Everything the trainable model needs for one slide.
struct Example {
  std::string id;
  Split split = Split::Train;
  std::string caption;
  std::vector<TokenId> ids;  // <start> ... <end>
  SlideImage thumbnail;
  Tensorf patches;           // [M × patch_dim]
  std::vector<PatchEntry> entries;
};

struct DatasetSpec {
  std::filesystem::path root;      // directory the manifest paths are relative to
  std::filesystem::path features;  // directory of <id>.hct patch-token archives
  std::size_t thumb_size = 1024;
  std::size_t patch_dim = 576;
};

// Slides without retained patches cannot be fused and are skipped.
inline std::vector<Example> load_examples(const std::vector<SlideRecord>& records, const DatasetSpec& spec,
                                          const Vocabulary& vocab, std::optional<Split> split = std::nullopt) {
  std::vector<Example> out;
  for (const auto& r : records) {
    if (split && r.split != *split) continue;
    if (!r.usable()) continue;
    Example ex;
    ex.id = r.id;
    ex.split = r.split;
    ex.caption = r.caption;
    ex.ids = vocab.encode(r.caption).ids;
    ex.entries = r.patches;
    if (r.thumbnail.empty()) throw DataError("slide '" + r.id + "' has no thumbnail");
    ex.thumbnail = read_image(spec.root / r.thumbnail);
    if (ex.thumbnail.width != spec.thumb_size || ex.thumbnail.height != spec.thumb_size) {
      throw DataError("slide '" + r.id + "' thumbnail is " + std::to_string(ex.thumbnail.width) + "x" +
                      std::to_string(ex.thumbnail.height) + ", expected " + std::to_string(spec.thumb_size));
    }
    const auto fpath = feature_path(spec.features, r.id);
    if (!std::filesystem::exists(fpath)) {
      throw DataError("missing encoded features for slide '" + r.id + "' (" + fpath.string() + ")");
    }
    ex.patches = load_patch_tokens(fpath);
    if (ex.patches.dim(0) != r.patches.size() || ex.patches.dim(1) != spec.patch_dim) {
      throw DataError("slide '" + r.id + "' features are " + shape_str(ex.patches.shape()) + ", expected [" +
                      std::to_string(r.patches.size()) + ", " + std::to_string(spec.patch_dim) + "]");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<Example> select_split(const std::vector<Example>& all, Split split) {
  std::vector<Example> out;
  for (const auto& e : all)
    if (e.split == split) out.push_back(e);
  return out;
}

inline const Example& find_example(const std::vector<Example>& all, const std::string& id) {
  for (const auto& e : all)
    if (e.id == id) return e;
  throw DataError("unknown slide id '" + id + "'");
}

template <typename T>
struct Batch {
  Tensor<T> thumbnails;  // [B × S × S × 3]
  PatchBatch<T> patches;
  std::vector<std::vector<TokenId>> gold;
};

template <typename T>
Batch<T> make_batch(const std::vector<const Example*>& items, std::size_t thumb_size) {
  if (items.empty()) throw ValueError("cannot build an empty batch");
  std::vector<const SlideImage*> images;
  std::vector<Tensor<T>> patches;
  Batch<T> b;
  for (const auto* e : items) {
    images.push_back(&e->thumbnail);
    if constexpr (std::is_same_v<T, float>) {
      patches.push_back(e->patches);
    } else {
      const auto v = e->patches.values();
      patches.emplace_back(e->patches.shape(), std::vector<T>(v.begin(), v.end()));
    }
    b.gold.push_back(e->ids);
  }
  b.thumbnails = thumbnail_batch<T>(images, thumb_size);
  b.patches = PatchBatch<T>::collate(patches);
  return b;
}

}  // namespace histocap
