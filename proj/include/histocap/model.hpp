#pragma once

#include <filesystem>

#include "histocap/decoder.hpp"
#include "histocap/fusion.hpp"
#include "histocap/thumbnail_encoder.hpp"

namespace histocap {

struct ModelConfig {
  ThumbConfig thumb;
  FusionConfig fusion;
  DecoderConfig decoder;

  void validate() const {
    thumb.validate();
    if (decoder.annot_dim != thumb.out_dim() + fusion.proj_dim) {
      throw ConfigError("decoder.annot_dim " + std::to_string(decoder.annot_dim) +
                        " must equal thumbnail width + projection width " +
                        std::to_string(thumb.out_dim() + fusion.proj_dim));
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ModelOutput {
  ThumbFeatures<T> thumb;
  SlideVector<T> slide;
  FusedRepresentation<T> fused;
};

// The trainable part of the captioner: thumbnail CNN, attention pool with
// projection, and decoder. Frozen patch features arrive precomputed.
template <typename T>
class CaptionModel {
 public:
  ModelConfig config;
  ThumbnailEncoder<T> thumb;
  AttentionPool<T> pool;
  CaptionDecoder<T> decoder;

  static CaptionModel random(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    CaptionModel m;
    m.config = cfg;
    m.thumb = ThumbnailEncoder<T>::random(cfg.thumb, rng);
    m.pool = AttentionPool<T>::random(cfg.fusion, rng);
    m.decoder = CaptionDecoder<T>::random(cfg.decoder, rng);
    return m;
  }

  ParamList<T> encoder_params() const { return thumb.params(); }

  ParamList<T> head_params() const {
    auto out = pool.params();
    const auto d = decoder.params();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }

  ParamList<T> all_params() const {
    auto out = encoder_params();
    const auto h = head_params();
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }

  ModelOutput<T> forward(const Tensor<T>& thumbnails, const PatchBatch<T>& patches, ThumbMode mode) const {
    if (thumbnails.dim(0) != patches.tokens.dim(0)) {
      throw ShapeError("batch has " + std::to_string(thumbnails.dim(0)) + " thumbnails but " +
                       std::to_string(patches.tokens.dim(0)) + " patch sets");
    }
    ModelOutput<T> out;
    out.thumb = thumb.forward(thumbnails, mode);
    out.slide = pool.forward(patches);
    out.fused = fuse(out.thumb, out.slide);
    return out;
  }

  TensorMap to_archive() const {
    TensorMap m;
    save_params(m, all_params());
    return m;
  }

  void load_archive(const TensorMap& m) { load_params(m, all_params()); }
};

}  // namespace histocap
