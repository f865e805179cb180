#pragma once

// Inference over loaded examples: captioning, corpus evaluation and the
// attention-explanation bundle.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histocap/dataset.hpp"
#include "histocap/metrics.hpp"
#include "histocap/model.hpp"

namespace histocap {

struct DecodeOptions {
  std::size_t beam = 3;  // 1 selects greedy decoding
  std::size_t max_len = 60;
};

struct CaptionResult {
  std::string slide_id;
  std::string caption;
  std::vector<std::string> words;
  Hypothesis hyp;
  std::vector<double> alpha;  // patch attention, length M
};

inline std::vector<CaptionResult> caption_examples(const CaptionModel<float>& model, const Vocabulary& vocab,
                                                   const std::vector<Example>& examples, const DecodeOptions& opt,
                                                   std::size_t batch_size = 32) {
  if (opt.beam == 0) throw ValueError("beam width must be at least 1");
  std::vector<CaptionResult> out;
  NoGradScope<float> inference;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<const Example*> items;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) items.push_back(&examples[i]);
    const auto batch = make_batch<float>(items, model.config.thumb.input_size);
    const auto fwd = model.forward(batch.thumbnails, batch.patches, ThumbMode::Eval);
    const std::size_t m_max = fwd.slide.alpha.dim(1);
    const auto alpha = fwd.slide.alpha.data();
    for (std::size_t b = 0; b < items.size(); ++b) {
      const auto ann = slice(fwd.fused.annotations, 0, b, 1);
      CaptionResult r;
      r.slide_id = items[b]->id;
      r.hyp = opt.beam == 1 ? model.decoder.greedy_decode(ann, opt.max_len)
                            : model.decoder.beam_decode(ann, opt.beam, opt.max_len).front();
      r.words = vocab.words(r.hyp.tokens);
      r.caption = detokenize(r.words);
      const std::size_t m = batch.patches.counts[b];
      r.alpha.assign(alpha.begin() + static_cast<std::ptrdiff_t>(b * m_max),
                     alpha.begin() + static_cast<std::ptrdiff_t>(b * m_max + m));
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline nlohmann::json caption_json(const CaptionResult& r) {
  return {{"slide_id", r.slide_id}, {"caption", r.caption}, {"logprob", r.hyp.log_prob}};
}

// Decodes every example and scores it against its reference caption.
inline MetricsReport evaluate_corpus(const CaptionModel<float>& model, const Vocabulary& vocab,
                                     const std::vector<Example>& examples, const DecodeOptions& opt) {
  if (examples.empty()) throw DataError("nothing to evaluate: the selected split is empty");
  const auto results = caption_examples(model, vocab, examples, opt);
  std::vector<std::string> ids;
  std::vector<Tokens> cand, ref;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    ids.push_back(examples[i].id);
    cand.push_back(results[i].words);
    ref.push_back(tokenize(examples[i].caption));
  }
  return score_corpus(ids, cand, ref);
}

// Resamples a row-major g×g grid to size×size (pixel centres aligned,
// edges clamped).
inline std::vector<double> upsample_bilinear(const std::vector<double>& grid, std::size_t g, std::size_t size) {
  if (grid.size() != g * g || g == 0 || size == 0) throw ShapeError("upsample_bilinear: grid must be g×g");
  const auto coord = [&](std::size_t i, std::size_t& lo, std::size_t& hi, double& w) {
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(g) / static_cast<double>(size) - 0.5;
    const double c = std::clamp(s, 0.0, static_cast<double>(g - 1));
    lo = static_cast<std::size_t>(std::floor(c));
    hi = std::min(lo + 1, g - 1);
    w = c - static_cast<double>(lo);
  };
  std::vector<double> out(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    std::size_t y0, y1;
    double wy;
    coord(y, y0, y1, wy);
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t x0, x1;
      double wx;
      coord(x, x0, x1, wx);
      const double top = (1 - wx) * grid[y0 * g + x0] + wx * grid[y0 * g + x1];
      const double bot = (1 - wx) * grid[y1 * g + x0] + wx * grid[y1 * g + x1];
      out[y * size + x] = (1 - wy) * top + wy * bot;
    }
  }
  return out;
}

// Scales by the map maximum so the hottest cell is 255.
inline GrayImage heatmap_image(const std::vector<double>& values, std::size_t size) {
  GrayImage img{size, size, std::vector<std::uint8_t>(size * size)};
  const double mx = *std::max_element(values.begin(), values.end());
  for (std::size_t i = 0; i < values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(mx > 0 ? std::lround(255.0 * values[i] / mx) : 0);
  }
  return img;
}

// Thumbnail dimmed to half intensity with the heat added to the red channel.
inline SlideImage heat_overlay(const SlideImage& thumb, const GrayImage& heat) {
  SlideImage out = thumb;
  for (std::size_t i = 0; i < heat.pixels.size(); ++i) {
    const double h = heat.pixels[i] / 255.0;
    auto* p = out.pixels.data() + 3 * i;
    p[0] = static_cast<std::uint8_t>(std::lround(std::min(255.0, 0.5 * p[0] + 255.0 * h * 0.5)));
    p[1] = static_cast<std::uint8_t>(std::lround(0.5 * p[1] * (1 - h)));
    p[2] = static_cast<std::uint8_t>(std::lround(0.5 * p[2] * (1 - h)));
  }
  return out;
}

inline std::string filename_safe(const std::string& token) {
  std::string out;
  for (unsigned char c : token) out += std::isalnum(c) ? static_cast<char>(c) : '_';
  return out.empty() ? "_" : out;
}

struct ExplainOptions {
  std::size_t topk = 4;
  DecodeOptions decode;
};

// Writes word_<t>_<token>.pgm heatmaps, overlay_<t>_<token>.ppm overlays and
// explanation.json into `dir`; returns the JSON.
inline nlohmann::json explain_slide(const CaptionModel<float>& model, const Vocabulary& vocab, const Example& ex,
                                    const ExplainOptions& opt, const std::filesystem::path& dir) {
  const auto r = caption_examples(model, vocab, {ex}, opt.decode).front();
  const auto ranked = top_k_patches(r.alpha, opt.topk);
  std::filesystem::create_directories(dir);
  const std::size_t g = model.config.thumb.grid;
  const std::size_t size = ex.thumbnail.width;

  nlohmann::json words = nlohmann::json::array();
  for (std::size_t t = 0; t < r.words.size(); ++t) {
    const auto& att = r.hyp.attention.at(t);
    double total = 0.0;
    for (double b : att.beta) total += b;
    const std::string stem = std::to_string(t) + "_" + filename_safe(r.words[t]);
    const auto heat = heatmap_image(upsample_bilinear(att.beta, g, size), size);
    write_pgm(dir / ("word_" + stem + ".pgm"), heat);
    write_ppm(dir / ("overlay_" + stem + ".ppm"), heat_overlay(ex.thumbnail, heat));
    words.push_back({{"t", t},
                     {"token", r.words[t]},
                     {"beta", att.beta},
                     {"beta_sum", total},
                     {"gate", att.gate},
                     {"heatmap", "word_" + stem + ".pgm"},
                     {"overlay", "overlay_" + stem + ".ppm"}});
  }
  nlohmann::json top = nlohmann::json::array();
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& e = ex.entries.at(ranked[i].index);
    top.push_back({{"rank", i + 1}, {"index", ranked[i].index}, {"alpha", ranked[i].alpha},
                   {"x", e.x},      {"y", e.y},                 {"path", e.path}});
  }
  nlohmann::json j = {{"slide_id", ex.id},       {"caption", r.caption},  {"logprob", r.hyp.log_prob},
                      {"word_count", r.words.size()}, {"grid", g},       {"thumbnail_size", size},
                      {"words", words},          {"alpha", r.alpha},      {"topk", top}};
  std::ofstream out(dir / "explanation.json", std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "explanation.json").string());
  out << j.dump(2) << '\n';
  std::ofstream txt(dir / "caption.txt", std::ios::binary | std::ios::trunc);
  txt << r.caption << '\n';
  return j;
}

}  // namespace histocap
