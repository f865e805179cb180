#pragma once

// Trainable CNN over the slide thumbnail: stride-2 3×3 conv stages with ReLU,
// average-pooled to a G×G feature grid whose spatial mean is the global vector.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "histocap/error.hpp"
#include "histocap/image.hpp"
#include "histocap/numerics/ops.hpp"
#include "histocap/params.hpp"

namespace histocap {

struct ThumbConfig {
  std::size_t input_size = 1024;
  std::vector<std::size_t> channels{16, 32, 64, 256, 512};
  std::size_t grid = 8;
  bool residual = false;  // adds a stride-1 residual conv after each stage

  std::size_t out_dim() const { return channels.back(); }
  std::size_t stage_extent() const { return input_size >> channels.size(); }

  void validate() const {
    if (channels.empty()) throw ConfigError("thumbnail encoder needs at least one stage");
    if (grid < 2) throw ConfigError("thumbnail grid must be at least 2");
    if (input_size % (std::size_t{1} << channels.size()) != 0) {
      throw ConfigError("thumbnail size " + std::to_string(input_size) + " is not divisible by 2^" +
                        std::to_string(channels.size()));
    }
    if (stage_extent() % grid != 0) {
      throw ConfigError("final feature map " + std::to_string(stage_extent()) +
                        " is not divisible by grid " + std::to_string(grid));
    }
  }

  bool operator==(const ThumbConfig&) const = default;
};

enum class ThumbMode { Train, Eval };

template <typename T>
struct ThumbFeatures {
  Tensor<T> grid;    // [B × G² × D], positions row-major
  Tensor<T> global;  // [B × D]
};

// uint8 RGB thumbnails -> [B×S×S×3], scaled to [-1, 1].
template <typename T>
Tensor<T> thumbnail_batch(const std::vector<const SlideImage*>& images, std::size_t size) {
  std::vector<T> v;
  v.reserve(images.size() * size * size * 3);
  for (const auto* img : images) {
    if (img->width != size || img->height != size) {
      throw ShapeError("thumbnail must be " + std::to_string(size) + "x" + std::to_string(size) +
                       ", got " + std::to_string(img->width) + "x" + std::to_string(img->height));
    }
    for (auto p : img->pixels) v.push_back(static_cast<T>(p / 127.5 - 1.0));
  }
  return Tensor<T>({images.size(), size, size, 3}, std::move(v));
}

template <typename T>
class ThumbnailEncoder {
 public:
  ThumbConfig config;
  std::vector<Tensor<T>> conv_w, conv_b, res_w, res_b;

  static ThumbnailEncoder random(const ThumbConfig& cfg, Rng& rng) {
    cfg.validate();
    ThumbnailEncoder e;
    e.config = cfg;
    std::size_t in = 3;
    for (const std::size_t out : cfg.channels) {
      e.conv_w.push_back(fan_in_uniform<T>(rng, {9 * in, out}, 9 * in));
      e.conv_b.push_back(Tensor<T>({out}));
      if (cfg.residual) {
        e.res_w.push_back(fan_in_uniform<T>(rng, {9 * out, out}, 9 * out));
        e.res_b.push_back(Tensor<T>({out}));
      }
      in = out;
    }
    set_trainable(e.params(), true);
    return e;
  }

  ParamList<T> params() const {
    ParamList<T> out;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      const std::string p = "thumb.stage" + std::to_string(i);
      out.push_back({p + ".conv.weight", conv_w[i]});
      out.push_back({p + ".conv.bias", conv_b[i]});
      if (config.residual) {
        out.push_back({p + ".res.weight", res_w[i]});
        out.push_back({p + ".res.bias", res_b[i]});
      }
    }
    return out;
  }

  ThumbFeatures<T> forward(const Tensor<T>& pixels, ThumbMode mode = ThumbMode::Train) const {
    const std::size_t s = config.input_size;
    if (pixels.rank() != 4 || pixels.dim(1) != s || pixels.dim(2) != s || pixels.dim(3) != 3) {
      throw ShapeError("thumbnail encoder expects [Bx" + std::to_string(s) + "x" + std::to_string(s) +
                       "x3], got " + shape_str(pixels.shape()));
    }
    std::optional<NoGradScope<T>> no_grad;
    if (mode == ThumbMode::Eval) no_grad.emplace();
    Tensor<T> x = pixels;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      x = relu(conv2d(x, conv_w[i], conv_b[i], {3, 2, 1}));
      if (config.residual) x = relu(add(x, conv2d(x, res_w[i], res_b[i], {3, 1, 1})));
    }
    const std::size_t b = pixels.dim(0), g = config.grid, d = config.out_dim();
    const Tensor<T> pooled = avg_pool2d(x, config.stage_extent() / g);
    ThumbFeatures<T> f;
    f.grid = reshape(pooled, {b, g * g, d});
    f.global = mean(f.grid, 1);
    return f;
  }

  void save(const std::filesystem::path& path) const {
    TensorMap m;
    save_params(m, params());
    archive::save(path, m);
  }

  static ThumbnailEncoder load(const std::filesystem::path& path, const ThumbConfig& cfg) {
    Rng rng(0);
    auto e = random(cfg, rng);
    load_params(archive::load(path), e.params());
    return e;
  }
};

}  // namespace histocap
