#pragma once

// Synthetic slides built from flat-colour tissue archetypes on a white
// background. Each caption names the dominant archetype and, when present,
// the focal one, so captions are recoverable from pixel content.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histocap/config.hpp"
#include "histocap/image.hpp"
#include "histocap/rng.hpp"
#include "histocap/tiler.hpp"
#include "histocap/vocab.hpp"

namespace histocap {

struct Archetype {
  std::string name;
  std::array<int, 3> rgb{};
  std::string phrase;  // used when the archetype dominates
  std::string focal;   // used when it appears as a minor region

  bool operator==(const Archetype&) const = default;
};

inline std::vector<Archetype> default_archetypes() {
  return {
      {"adipose", {232, 204, 142}, "lobules of mature adipose tissue", "fat necrosis"},
      {"muscle", {186, 58, 72}, "bundles of skeletal muscle fibres", "muscle atrophy"},
      {"lymphoid", {88, 52, 142}, "sheets of dense lymphoid cells", "lymphoid aggregates"},
      {"fibrous", {218, 136, 168}, "bands of fibrous connective stroma", "stromal fibrosis"},
      {"necrotic", {138, 98, 48}, "areas of granular necrotic debris", "necrotic foci"},
      {"mucosa", {68, 108, 172}, "glands of intact columnar mucosa", "mucosal erosion"},
  };
}

struct SynthSpec {
  std::uint64_t seed = 7;
  std::size_t n_slides = 200;
  std::size_t slide_size = 256;
  std::size_t cell_size = 64;
  double pure_fraction = 0.15;  // slides with a single archetype
  int noise = 12;               // per-channel uniform jitter on tissue pixels
  bool shuffle_labels = false;  // control corpus: captions permuted across slides
  std::vector<Archetype> archetypes = default_archetypes();

  std::size_t cells() const { return slide_size / cell_size; }

  void validate() const {
    if (archetypes.size() < 2) throw ConfigError("synth needs at least 2 archetypes");
    if (n_slides == 0) throw ConfigError("synth n_slides must be positive");
    if (cell_size == 0 || slide_size % cell_size != 0 || cells() < 3) {
      throw ConfigError("synth slide_size must be a multiple of cell_size with at least 3 cells per side");
    }
    if (pure_fraction < 0 || pure_fraction > 1 || noise < 0 || noise > 40) {
      throw ConfigError("synth pure_fraction must be in [0,1] and noise in [0,40]");
    }
    std::set<std::string> names;
    for (const auto& a : archetypes) {
      if (a.name.empty() || a.phrase.empty() || a.focal.empty()) throw ConfigError("synth archetype fields must be non-empty");
      if (!names.insert(a.name).second) throw ConfigError("duplicate archetype '" + a.name + "'");
      for (int c : a.rgb)
        if (c < 0 || c > 255) throw ConfigError("archetype '" + a.name + "' colour out of range");
    }
  }

  bool operator==(const SynthSpec&) const = default;
};

inline std::string synth_caption(const SynthSpec& spec, std::size_t main, std::optional<std::size_t> focal) {
  const auto& a = spec.archetypes.at(main);
  if (!focal) return a.phrase + " throughout";
  return a.phrase + " with focal " + spec.archetypes.at(*focal).focal;
}

// Every word the grammar can emit.
inline std::set<std::string> grammar_terminals(const SynthSpec& spec) {
  std::set<std::string> out{"with", "focal", "throughout"};
  for (const auto& a : spec.archetypes) {
    for (auto& w : tokenize(a.phrase)) out.insert(w);
    for (auto& w : tokenize(a.focal)) out.insert(w);
  }
  return out;
}

struct SynthSlide {
  std::string id;
  SlideImage image;
  std::string caption;
  Split split = Split::Train;
  std::size_t main = 0;
  std::optional<std::size_t> focal;
  std::vector<int> cell_labels;  // per cell, row-major: archetype index or −1 for background
};

namespace detail {

inline std::uint8_t jitter(int base, int noise, Rng& rng) {
  const int v = base + static_cast<int>(rng.index(2 * static_cast<std::uint64_t>(noise) + 1)) - noise;
  return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
}

inline SynthSlide draw_slide(const SynthSpec& spec, std::size_t index, Rng& rng) {
  const std::size_t g = spec.cells();
  const std::size_t n_cells = g * g;
  const std::size_t k = spec.archetypes.size();
  SynthSlide s;
  char buf[16];
  std::snprintf(buf, sizeof buf, "syn%04zu", index);
  s.id = buf;
  s.main = rng.index(k);
  if (rng.uniform() >= spec.pure_fraction) {
    const std::size_t other = rng.index(k - 1);
    s.focal = other >= s.main ? other + 1 : other;
  }
  // Tissue covers between half the grid and all but two cells; focal
  // regions stay a strict minority of it.
  const std::size_t lo = n_cells / 2;
  const std::size_t n_tissue = lo + rng.index(n_cells - 2 - lo + 1);
  const std::size_t n_focal = s.focal ? 1 + rng.index(std::min<std::size_t>(3, (n_tissue - 1) / 3)) : 0;
  std::vector<std::size_t> order(n_cells);
  for (std::size_t i = 0; i < n_cells; ++i) order[i] = i;
  rng.shuffle(order);
  s.cell_labels.assign(n_cells, -1);
  for (std::size_t i = 0; i < n_tissue; ++i) {
    s.cell_labels[order[i]] = static_cast<int>(i < n_focal ? *s.focal : s.main);
  }
  s.image = SlideImage(spec.slide_size, spec.slide_size);
  for (std::size_t y = 0; y < spec.slide_size; ++y) {
    for (std::size_t x = 0; x < spec.slide_size; ++x) {
      const int label = s.cell_labels[(y / spec.cell_size) * g + x / spec.cell_size];
      if (label < 0) {
        s.image.set(x, y, static_cast<std::uint8_t>(255 - rng.index(7)), static_cast<std::uint8_t>(255 - rng.index(7)),
                    static_cast<std::uint8_t>(255 - rng.index(7)));
      } else {
        const auto& c = spec.archetypes[static_cast<std::size_t>(label)].rgb;
        s.image.set(x, y, jitter(c[0], spec.noise, rng), jitter(c[1], spec.noise, rng), jitter(c[2], spec.noise, rng));
      }
    }
  }
  s.caption = synth_caption(spec, s.main, s.focal);
  return s;
}

}  // namespace detail

// Slides are drawn in id order from one stream; splits come from a seeded
// shuffle of the ids (80/10/10). The control corpus permutes captions with
// an independent stream and leaves images and splits untouched.
inline std::vector<SynthSlide> generate_corpus(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<SynthSlide> slides;
  slides.reserve(spec.n_slides);
  for (std::size_t i = 0; i < spec.n_slides; ++i) slides.push_back(detail::draw_slide(spec, i, rng));

  Rng split_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(spec.n_slides);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  split_rng.shuffle(order);
  const auto n = static_cast<double>(spec.n_slides);
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * n));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * n));
  for (std::size_t r = 0; r < order.size(); ++r) {
    slides[order[r]].split = r < n_train ? Split::Train : r < n_train + n_val ? Split::Val : Split::Test;
  }

  if (spec.shuffle_labels) {
    Rng label_rng(spec.seed ^ 0xc2b2ae3d27d4eb4fULL);
    std::vector<std::string> captions;
    for (const auto& s : slides) captions.push_back(s.caption);
    label_rng.shuffle(captions);
    for (std::size_t i = 0; i < slides.size(); ++i) slides[i].caption = captions[i];
  }
  return slides;
}

// Raw-slide index consumed by the tiler: one {id, image, caption, split} per line.
struct SlideIndexEntry {
  std::string id;
  std::string image;  // relative to the index directory
  std::string caption;
  Split split = Split::Train;
};

inline constexpr const char* kSlideIndexName = "slides.jsonl";

inline void write_slide_index(const std::filesystem::path& path, const std::vector<SlideIndexEntry>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& e : entries) {
    out << nlohmann::json{{"id", e.id}, {"image", e.image}, {"caption", e.caption}, {"split", to_string(e.split)}}.dump()
        << '\n';
  }
}

inline std::vector<SlideIndexEntry> read_slide_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read slide index " + path.string());
  std::vector<SlideIndexEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("image").get<std::string>(),
                     j.at("caption").get<std::string>(), parse_split(j.value("split", std::string{"train"}))});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// Writes <out>/slides/<id>.png and <out>/slides.jsonl.
inline std::vector<SlideIndexEntry> write_corpus(const std::vector<SynthSlide>& slides, const std::filesystem::path& out) {
  std::filesystem::create_directories(out / "slides");
  std::vector<SlideIndexEntry> index;
  for (const auto& s : slides) {
    const auto rel = (std::filesystem::path("slides") / (s.id + ".png")).string();
    write_png(out / rel, s.image);
    index.push_back({s.id, rel, s.caption, s.split});
  }
  write_slide_index(out / kSlideIndexName, index);
  return index;
}

inline nlohmann::json to_json(const SynthSpec& s) {
  nlohmann::json arch = nlohmann::json::array();
  for (const auto& a : s.archetypes) {
    arch.push_back({{"name", a.name}, {"rgb", a.rgb}, {"phrase", a.phrase}, {"focal", a.focal}});
  }
  return {{"seed", s.seed},
          {"n_slides", s.n_slides},
          {"slide_size", s.slide_size},
          {"cell_size", s.cell_size},
          {"pure_fraction", s.pure_fraction},
          {"noise", s.noise},
          {"shuffle_labels", s.shuffle_labels},
          {"archetypes", arch}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  detail::StrictObject o(j, "synth");
  o.get("seed", s.seed);
  o.get("n_slides", s.n_slides);
  o.get("slide_size", s.slide_size);
  o.get("cell_size", s.cell_size);
  o.get("pure_fraction", s.pure_fraction);
  o.get("noise", s.noise);
  o.get("shuffle_labels", s.shuffle_labels);
  o.nested("archetypes", [&](const nlohmann::json& v, const std::string& where) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array");
    s.archetypes.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      Archetype a;
      detail::StrictObject e(v[i], where + "[" + std::to_string(i) + "]");
      e.get("name", a.name);
      e.get("rgb", a.rgb);
      e.get("phrase", a.phrase);
      e.get("focal", a.focal);
      e.finish();
      s.archetypes.push_back(a);
    }
  });
  o.finish();
  s.validate();
  return s;
}

inline SynthSpec load_synth_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read synth spec " + path.string());
  try {
    return synth_spec_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace histocap
