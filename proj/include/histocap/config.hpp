#pragma once

// One JSON document holding every module's settings. Missing keys take
// defaults; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "histocap/error.hpp"
#include "histocap/model.hpp"
#include "histocap/tiler.hpp"
#include "histocap/vit.hpp"

namespace histocap {

struct TrainConfig {
  std::size_t batch_size = 32;
  double encoder_lr = 1e-4;
  double decoder_lr = 4e-4;
  double lr_decay = 0.8;
  std::size_t plateau_patience = 8;
  std::size_t early_stop_patience = 20;
  double clip_value = 5.0;
  double lambda_att = 1.0;
  std::uint64_t seed = 13;
  std::size_t max_epochs = 100;
  bool freeze_thumbnail = false;

  void validate() const {
    if (batch_size == 0 || max_epochs == 0 || plateau_patience == 0 || early_stop_patience == 0) {
      throw ConfigError("batch_size, max_epochs and patience values must be positive");
    }
    if (!(encoder_lr > 0 && decoder_lr > 0 && lr_decay > 0 && lr_decay <= 1 && clip_value > 0 && lambda_att >= 0)) {
      throw ConfigError("learning rates, decay and clip value must be positive (decay <= 1)");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 13;
  std::size_t vocab_min_count = 1;
  TilerConfig tiler;
  HierarchyConfig vit = HierarchyConfig::hipt_compat();
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    vit.validate();
    model.validate();
    train.validate();
    if (tiler.patch_size != vit.patch_size()) {
      throw ConfigError("tiler.patch_size " + std::to_string(tiler.patch_size) +
                        " must equal the ViT hierarchy patch size " + std::to_string(vit.patch_size()));
    }
    if (tiler.thumbnail_size != model.thumb.input_size) {
      throw ConfigError("tiler.thumbnail_size must equal model.thumb.input_size");
    }
    if (model.fusion.patch_dim != vit.cls_patch_dim()) {
      throw ConfigError("model.fusion.patch_dim " + std::to_string(model.fusion.patch_dim) +
                        " must equal the patch token width " + std::to_string(vit.cls_patch_dim()));
    }
  }

  // Small widths on 256 px synthetic slides with 64 px patches.
  static RunConfig desk() {
    RunConfig c;
    c.vit = HierarchyConfig::micro();
    c.tiler.patch_size = 64;
    c.tiler.thumbnail_size = 32;
    c.model.thumb = {32, {8, 16}, 4, false};
    c.model.fusion = {c.vit.cls_patch_dim(), 32, 32};
    c.model.decoder.embed_dim = 32;
    c.model.decoder.hidden_dim = 64;
    c.model.decoder.annot_dim = 16 + 32;
    c.model.decoder.attn_dim = 32;
    c.model.decoder.max_len = 30;
    c.train.batch_size = 16;
    c.train.encoder_lr = 1e-3;
    c.train.decoder_lr = 4e-3;
    c.train.max_epochs = 60;
    return c;
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

// Reads fields off a JSON object and remembers which keys were consumed.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename V>
  void get(const char* key, V& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  // Nested object handled by `fn(json, path)`.
  template <typename Fn>
  void nested(const char* key, Fn&& fn) {
    seen_.insert(key);
    if (j_.contains(key)) fn(j_.at(key), where_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline nlohmann::json vit_json(const ViTConfig& c) {
  return {{"input_size", c.input_size}, {"token_size", c.token_size}, {"token_dim", c.token_dim},
          {"embed_dim", c.embed_dim},   {"depth", c.depth},           {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"ln_eps", c.ln_eps}};
}

inline void vit_from(const nlohmann::json& j, const std::string& where, ViTConfig& c) {
  StrictObject o(j, where);
  o.get("input_size", c.input_size);
  o.get("token_size", c.token_size);
  o.get("token_dim", c.token_dim);
  o.get("embed_dim", c.embed_dim);
  o.get("depth", c.depth);
  o.get("heads", c.heads);
  o.get("mlp_ratio", c.mlp_ratio);
  o.get("ln_eps", c.ln_eps);
  o.finish();
}

}  // namespace detail

inline nlohmann::json to_json(const HierarchyConfig& c) {
  return {{"vit256", detail::vit_json(c.vit256)},
          {"vit4096", detail::vit_json(c.vit4096)},
          {"pixel_mean", c.pixel_mean},
          {"pixel_std", c.pixel_std}};
}

inline void from_json(const nlohmann::json& j, const std::string& where, HierarchyConfig& c) {
  detail::StrictObject o(j, where);
  o.nested("vit256", [&](const nlohmann::json& v, const std::string& w) { detail::vit_from(v, w, c.vit256); });
  o.nested("vit4096", [&](const nlohmann::json& v, const std::string& w) { detail::vit_from(v, w, c.vit4096); });
  o.get("pixel_mean", c.pixel_mean);
  o.get("pixel_std", c.pixel_std);
  o.finish();
}

inline nlohmann::json to_json(const ModelConfig& c) {
  const auto& d = c.decoder;
  return {{"thumb",
           {{"input_size", c.thumb.input_size},
            {"channels", c.thumb.channels},
            {"grid", c.thumb.grid},
            {"residual", c.thumb.residual}}},
          {"fusion",
           {{"patch_dim", c.fusion.patch_dim}, {"attn_dim", c.fusion.attn_dim}, {"proj_dim", c.fusion.proj_dim}}},
          {"decoder",
           {{"vocab_size", d.vocab_size},
            {"embed_dim", d.embed_dim},
            {"hidden_dim", d.hidden_dim},
            {"annot_dim", d.annot_dim},
            {"attn_dim", d.attn_dim},
            {"lambda_att", d.lambda_att},
            {"length_norm", d.length_norm},
            {"beam_width", d.beam_width},
            {"max_len", d.max_len}}}};
}

inline void from_json(const nlohmann::json& j, const std::string& where, ModelConfig& c) {
  detail::StrictObject o(j, where);
  o.nested("thumb", [&](const nlohmann::json& v, const std::string& w) {
    detail::StrictObject t(v, w);
    t.get("input_size", c.thumb.input_size);
    t.get("channels", c.thumb.channels);
    t.get("grid", c.thumb.grid);
    t.get("residual", c.thumb.residual);
    t.finish();
  });
  o.nested("fusion", [&](const nlohmann::json& v, const std::string& w) {
    detail::StrictObject f(v, w);
    f.get("patch_dim", c.fusion.patch_dim);
    f.get("attn_dim", c.fusion.attn_dim);
    f.get("proj_dim", c.fusion.proj_dim);
    f.finish();
  });
  o.nested("decoder", [&](const nlohmann::json& v, const std::string& w) {
    detail::StrictObject d(v, w);
    d.get("vocab_size", c.decoder.vocab_size);
    d.get("embed_dim", c.decoder.embed_dim);
    d.get("hidden_dim", c.decoder.hidden_dim);
    d.get("annot_dim", c.decoder.annot_dim);
    d.get("attn_dim", c.decoder.attn_dim);
    d.get("lambda_att", c.decoder.lambda_att);
    d.get("length_norm", c.decoder.length_norm);
    d.get("beam_width", c.decoder.beam_width);
    d.get("max_len", c.decoder.max_len);
    d.finish();
  });
  o.finish();
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"encoder_lr", c.encoder_lr},
          {"decoder_lr", c.decoder_lr},
          {"lr_decay", c.lr_decay},
          {"plateau_patience", c.plateau_patience},
          {"early_stop_patience", c.early_stop_patience},
          {"clip_value", c.clip_value},
          {"lambda_att", c.lambda_att},
          {"seed", c.seed},
          {"max_epochs", c.max_epochs},
          {"freeze_thumbnail", c.freeze_thumbnail}};
}

inline void from_json(const nlohmann::json& j, const std::string& where, TrainConfig& c) {
  detail::StrictObject o(j, where);
  o.get("batch_size", c.batch_size);
  o.get("encoder_lr", c.encoder_lr);
  o.get("decoder_lr", c.decoder_lr);
  o.get("lr_decay", c.lr_decay);
  o.get("plateau_patience", c.plateau_patience);
  o.get("early_stop_patience", c.early_stop_patience);
  o.get("clip_value", c.clip_value);
  o.get("lambda_att", c.lambda_att);
  o.get("seed", c.seed);
  o.get("max_epochs", c.max_epochs);
  o.get("freeze_thumbnail", c.freeze_thumbnail);
  o.finish();
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"vocab_min_count", c.vocab_min_count},
          {"tiler",
           {{"patch_size", c.tiler.patch_size},
            {"thumbnail_size", c.tiler.thumbnail_size},
            {"min_tissue", c.tiler.min_tissue},
            {"saturation_threshold", c.tiler.saturation_threshold},
            {"brightness_limit", c.tiler.brightness_limit},
            {"magnification", c.tiler.magnification}}},
          {"vit", to_json(c.vit)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)}};
}

// Starts from `base` (defaults unless a preset is named under "preset").
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  if (j.is_object() && j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "desk") {
      c = RunConfig::desk();
    } else if (preset != "paper") {
      throw ConfigError("config: unknown preset '" + preset + "' (expected paper or desk)");
    }
  }
  detail::StrictObject o(j, "config");
  std::string preset;
  o.get("preset", preset);
  o.get("seed", c.seed);
  o.get("vocab_min_count", c.vocab_min_count);
  o.nested("tiler", [&](const nlohmann::json& v, const std::string& w) {
    detail::StrictObject t(v, w);
    t.get("patch_size", c.tiler.patch_size);
    t.get("thumbnail_size", c.tiler.thumbnail_size);
    t.get("min_tissue", c.tiler.min_tissue);
    t.get("saturation_threshold", c.tiler.saturation_threshold);
    t.get("brightness_limit", c.tiler.brightness_limit);
    t.get("magnification", c.tiler.magnification);
    t.finish();
  });
  o.nested("vit", [&](const nlohmann::json& v, const std::string& w) { from_json(v, w, c.vit); });
  o.nested("model", [&](const nlohmann::json& v, const std::string& w) { from_json(v, w, c.model); });
  o.nested("train", [&](const nlohmann::json& v, const std::string& w) { from_json(v, w, c.train); });
  o.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write config " + path.string());
  out << to_json(c).dump(2) << '\n';
}

// FNV-1a 64 over the canonical (key-sorted, compact) JSON text.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace histocap
