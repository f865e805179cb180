#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histocap/error.hpp"
#include "histocap/image.hpp"

namespace histocap {

struct TilerConfig {
  std::size_t patch_size = 4096;
  std::size_t thumbnail_size = 1024;
  double min_tissue = 0.5;
  double saturation_threshold = 0.08;
  double brightness_limit = 0.95;
  // Metadata only; rasters carry no pyramid.
  std::string magnification = "20x";

  bool operator==(const TilerConfig&) const = default;
};

enum class Split { Train, Val, Test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + s + "'");
}

struct PatchEntry {
  std::string slide_id;
  std::size_t x = 0;
  std::size_t y = 0;
  double tissue_fraction = 0.0;
  std::string path;  // raster crop, empty until written

  bool operator==(const PatchEntry&) const = default;
};

struct SlideRecord {
  std::string id;
  std::string thumbnail;
  std::vector<PatchEntry> patches;
  std::string caption;
  Split split = Split::Train;
  std::size_t patch_size = 0;
  std::string magnification = "20x";

  bool usable() const { return !patches.empty(); }
  bool operator==(const SlideRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Thumbnail

namespace detail {

struct Tap {
  std::size_t index;
  double weight;
};

// Area-coverage weights mapping `out` cells onto [0, in) source cells.
inline std::vector<std::vector<Tap>> area_weights(std::size_t in, std::size_t out) {
  std::vector<std::vector<Tap>> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double lo = static_cast<double>(i) * scale;
    const double hi = static_cast<double>(i + 1) * scale;
    auto first = static_cast<std::size_t>(std::floor(lo));
    double total = 0.0;
    for (std::size_t s = first; s < in && static_cast<double>(s) < hi; ++s) {
      const double w = std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s));
      if (w <= 0.0) continue;
      taps[i].push_back({s, w});
      total += w;
    }
    for (auto& t : taps[i]) t.weight /= total;
  }
  return taps;
}

}  // namespace detail

// Pads the slide with white to a square anchored at (0,0), then area-averages
// it to size×size.
inline SlideImage make_thumbnail(const SlideImage& slide, std::size_t size = 1024) {
  if (slide.width == 0 || slide.height == 0) throw ValueError("cannot thumbnail an empty slide");
  const std::size_t side = std::max(slide.width, slide.height);
  const auto taps = detail::area_weights(side, size);
  SlideImage out(size, size);
  for (std::size_t oy = 0; oy < size; ++oy) {
    for (std::size_t ox = 0; ox < size; ++ox) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (const auto& ty : taps[oy]) {
        for (const auto& tx : taps[ox]) {
          const double w = ty.weight * tx.weight;
          if (tx.index < slide.width && ty.index < slide.height) {
            const auto* p = slide.at(tx.index, ty.index);
            for (int c = 0; c < 3; ++c) acc[c] += w * p[c];
          } else {
            for (double& a : acc) a += w * 255.0;
          }
        }
      }
      auto* q = out.at(ox, oy);
      for (int c = 0; c < 3; ++c) {
        q[c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc[c]), 0L, 255L));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tissue detection

struct TissueMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> tissue;  // 1 = tissue

  double fraction() const {
    std::size_t n = 0;
    for (auto v : tissue) n += v;
    return tissue.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(tissue.size());
  }
};

// Tissue iff saturation (max−min)/max(1,max) exceeds the threshold and the
// mean channel brightness is below brightness_limit·255.
inline bool is_tissue_pixel(const std::uint8_t* p, double saturation_threshold,
                            double brightness_limit) {
  const int mx = std::max({p[0], p[1], p[2]});
  const int mn = std::min({p[0], p[1], p[2]});
  const double saturation = static_cast<double>(mx - mn) / std::max(1, mx);
  const double brightness = (p[0] + p[1] + p[2]) / 3.0;
  return saturation > saturation_threshold && brightness < brightness_limit * 255.0;
}

inline TissueMask tissue_mask(const SlideImage& slide, double saturation_threshold = 0.08,
                              double brightness_limit = 0.95) {
  TissueMask mask{slide.width, slide.height, std::vector<std::uint8_t>(slide.width * slide.height)};
  for (std::size_t i = 0; i < mask.tissue.size(); ++i) {
    mask.tissue[i] = is_tissue_pixel(slide.pixels.data() + 3 * i, saturation_threshold,
                                     brightness_limit);
  }
  return mask;
}

// Tissue fraction of every grid cell, row-major; partial border cells are
// not part of the grid.
inline std::vector<double> cell_tissue_fractions(const TissueMask& mask, std::size_t patch) {
  const std::size_t cols = mask.width / patch, rows = mask.height / patch;
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t n = 0;
      for (std::size_t y = r * patch; y < (r + 1) * patch; ++y) {
        const auto* row = mask.tissue.data() + y * mask.width;
        for (std::size_t x = c * patch; x < (c + 1) * patch; ++x) n += row[x];
      }
      out[r * cols + c] = static_cast<double>(n) / static_cast<double>(patch * patch);
    }
  return out;
}

// Non-overlapping patch×patch grid anchored at (0,0), kept iff the cell's
// tissue fraction exceeds min_tissue. Row-major order.
inline std::vector<PatchEntry> extract_patches(const std::string& slide_id, const TissueMask& mask,
                                               std::size_t patch = 4096, double min_tissue = 0.5) {
  if (patch == 0) throw ValueError("patch size must be positive");
  std::vector<PatchEntry> out;
  const std::size_t cols = mask.width / patch;
  const auto fractions = cell_tissue_fractions(mask, patch);
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (fractions[i] > min_tissue) {
      out.push_back({slide_id, (i % cols) * patch, (i / cols) * patch, fractions[i], {}});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest (JSON lines, one SlideRecord per line)

inline void to_json(nlohmann::json& j, const PatchEntry& p) {
  j = {{"x", p.x}, {"y", p.y}, {"tissue_fraction", p.tissue_fraction}, {"path", p.path}};
}

inline nlohmann::json record_to_json(const SlideRecord& r) {
  nlohmann::json patches = nlohmann::json::array();
  for (const auto& p : r.patches) patches.push_back(p);
  return {{"id", r.id},           {"split", to_string(r.split)},
          {"caption", r.caption}, {"thumbnail", r.thumbnail},
          {"patch_size", r.patch_size}, {"magnification", r.magnification},
          {"patches", patches}};
}

inline SlideRecord record_from_json(const nlohmann::json& j) {
  SlideRecord r;
  r.id = j.at("id").get<std::string>();
  r.split = parse_split(j.at("split").get<std::string>());
  r.caption = j.at("caption").get<std::string>();
  r.thumbnail = j.value("thumbnail", std::string{});
  r.patch_size = j.value("patch_size", std::size_t{0});
  r.magnification = j.value("magnification", std::string{"20x"});
  for (const auto& p : j.value("patches", nlohmann::json::array())) {
    r.patches.push_back({r.id, p.at("x").get<std::size_t>(), p.at("y").get<std::size_t>(),
                         p.at("tissue_fraction").get<double>(), p.value("path", std::string{})});
  }
  return r;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<SlideRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

inline std::vector<SlideRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read manifest " + path.string());
  std::vector<SlideRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole-slide tiling

inline std::string patch_filename(const std::string& slide_id, std::size_t x, std::size_t y) {
  return slide_id + "_" + std::to_string(x) + "_" + std::to_string(y) + ".png";
}

// Writes <out>/thumbnails/<id>.png and <out>/patches/<id>_<x>_<y>.png and
// returns the slide's manifest record (paths relative to `out`).
inline SlideRecord tile_slide(const std::string& id, const SlideImage& slide, const std::string& caption,
                              Split split, const TilerConfig& cfg, const std::filesystem::path& out) {
  SlideRecord rec;
  rec.id = id;
  rec.caption = caption;
  rec.split = split;
  rec.patch_size = cfg.patch_size;
  rec.magnification = cfg.magnification;
  rec.thumbnail = (std::filesystem::path("thumbnails") / (id + ".png")).string();
  write_png(out / rec.thumbnail, make_thumbnail(slide, cfg.thumbnail_size));
  const auto mask = tissue_mask(slide, cfg.saturation_threshold, cfg.brightness_limit);
  rec.patches = extract_patches(id, mask, cfg.patch_size, cfg.min_tissue);
  for (auto& p : rec.patches) {
    p.path = (std::filesystem::path("patches") / patch_filename(id, p.x, p.y)).string();
    write_png(out / p.path, slide.crop(p.x, p.y, cfg.patch_size, cfg.patch_size));
  }
  return rec;
}

}  // namespace histocap
