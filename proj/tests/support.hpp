#pragma once

// In-memory slides for trainer-level tests: colour-coded thumbnails and
// random patch tokens, no files involved.

#include <string>
#include <vector>

#include "histocap/dataset.hpp"
#include "histocap/model.hpp"
#include "histocap/rng.hpp"

namespace histocap::testing {

inline ModelConfig tiny_model_config(std::size_t vocab_size) {
  ModelConfig c;
  c.thumb = {16, {4, 8}, 2, false};
  c.fusion = {6, 8, 8};
  c.decoder.vocab_size = vocab_size;
  c.decoder.embed_dim = 8;
  c.decoder.hidden_dim = 16;
  c.decoder.annot_dim = 16;
  c.decoder.attn_dim = 8;
  c.decoder.max_len = 8;
  return c;
}

inline Vocabulary tiny_vocab() { return Vocabulary::from_tokens({"red", "blue", "green", "tissue", "cells", "with"}); }

inline std::vector<Example> tiny_examples(std::size_t n, const Vocabulary& vocab, std::uint64_t seed) {
  static const char* colour[] = {"red", "blue", "green"};
  static const std::uint8_t rgb[3][3] = {{200, 40, 40}, {40, 40, 200}, {40, 200, 40}};
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = i % 3;
    const std::size_t b = (i / 3) % 3;
    Example e;
    e.id = "s" + std::to_string(i);
    e.caption = std::string(colour[a]) + " tissue with " + colour[b] + " cells";
    e.ids = vocab.encode(e.caption).ids;
    e.thumbnail = SlideImage(16, 16);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const auto& c = (x < 8 && y < 8) ? rgb[b] : rgb[a];
        e.thumbnail.set(x, y, c[0], c[1], c[2]);
      }
    const std::size_t m = 1 + i % 4;
    std::vector<float> v(m * 6);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    e.patches = Tensorf({m, 6}, std::move(v));
    for (std::size_t k = 0; k < m; ++k) e.entries.push_back({e.id, 64 * k, 0, 1.0, ""});
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace histocap::testing
