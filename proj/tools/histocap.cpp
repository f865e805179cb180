// histocap command-line front end.
//
// Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "histocap/config.hpp"
#include "histocap/dataset.hpp"
#include "histocap/pipeline.hpp"
#include "histocap/synth.hpp"
#include "histocap/tiler.hpp"
#include "histocap/trainer.hpp"
#include "histocap/vit.hpp"

namespace fs = std::filesystem;
using namespace histocap;

namespace {

std::size_t worker_count(std::size_t flag) {
  if (const char* env = std::getenv("HISTOCAP_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("HISTOCAP_THREADS must be a positive integer, got '") + env + "'");
  }
  if (flag > 0) return flag;
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on `threads` workers. The error from the
// lowest failing index is rethrown so failures are reported deterministically.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, n); ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string spec, out;
};

void cmd_synth(const SynthArgs& a) {
  const auto spec = a.spec.empty() ? SynthSpec{} : load_synth_spec(a.spec);
  const auto index = write_corpus(generate_corpus(spec), a.out);
  write_text(fs::path(a.out) / "synth_spec.json", to_json(spec).dump(2) + "\n");
  std::cerr << "synth: wrote " << index.size() << " slides to " << a.out << "\n";
}

// ---------------------------------------------------------------------------
// tile

struct TileArgs {
  std::string slides, out, config;
  std::optional<std::size_t> patch, thumb;
  std::optional<double> min_tissue;
  std::size_t threads = 0;
};

void cmd_tile(const TileArgs& a) {
  auto cfg = config_or_default(a.config).tiler;
  if (a.patch) cfg.patch_size = *a.patch;
  if (a.thumb) cfg.thumbnail_size = *a.thumb;
  if (a.min_tissue) cfg.min_tissue = *a.min_tissue;
  if (cfg.patch_size == 0 || cfg.thumbnail_size == 0) throw ConfigError("patch and thumbnail sizes must be positive");
  const fs::path slides_dir(a.slides);
  const auto index = read_slide_index(slides_dir / kSlideIndexName);
  std::vector<SlideRecord> records(index.size());
  parallel_for(index.size(), worker_count(a.threads), [&](std::size_t i) {
    const auto& e = index[i];
    SlideImage img;
    try {
      img = read_image(slides_dir / e.image);
    } catch (const Error& err) {
      throw DataError("unreadable slide '" + e.id + "': " + err.what());
    }
    records[i] = tile_slide(e.id, img, e.caption, e.split, cfg, a.out);
  });
  write_manifest(fs::path(a.out) / "manifest.jsonl", records);
  std::size_t patches = 0, unusable = 0;
  for (const auto& r : records) {
    patches += r.patches.size();
    unusable += !r.usable();
  }
  std::cerr << "tile: " << records.size() << " slides, " << patches << " patches, " << unusable
            << " slides without tissue patches\n";
}

// ---------------------------------------------------------------------------
// init-vit / encode

struct InitVitArgs {
  std::string config, out;
  std::uint64_t seed = 0;
};

void cmd_init_vit(const InitVitArgs& a) {
  const auto cfg = config_or_default(a.config);
  HierarchyWeights<float>::random(cfg.vit, a.seed).save(a.out);
  std::cerr << "init-vit: wrote " << a.out << "\n";
}

struct EncodeArgs {
  std::string manifest, weights, out, config, root;
  bool force = false;
  std::size_t threads = 0;
};

void cmd_encode(const EncodeArgs& a) {
  const auto cfg = config_or_default(a.config);
  const auto weights = HierarchyWeights<float>::load(a.weights, cfg.vit);
  const fs::path root = a.root.empty() ? fs::path(a.manifest).parent_path() : fs::path(a.root);
  const auto records = read_manifest(a.manifest);
  const auto weights_time = fs::last_write_time(a.weights);
  fs::create_directories(a.out);
  std::atomic<std::size_t> written{0}, skipped{0};
  parallel_for(records.size(), worker_count(a.threads), [&](std::size_t i) {
    const auto& r = records[i];
    if (!r.usable()) return;
    const auto out = feature_path(a.out, r.id);
    if (!a.force && fs::exists(out)) {
      const auto t = fs::last_write_time(out);
      bool fresh = t >= weights_time;
      for (const auto& p : r.patches) fresh = fresh && fs::exists(root / p.path) && t >= fs::last_write_time(root / p.path);
      if (fresh) {
        ++skipped;
        return;
      }
    }
    save_patch_tokens(out, encode_slide(r, root, weights));
    ++written;
  });
  std::cerr << "encode: " << written << " written, " << skipped << " up to date\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string manifest, features, config, out, root;
  bool resume = false;
};

fs::path data_root(const std::string& manifest, const std::string& root) {
  return root.empty() ? fs::path(manifest).parent_path() : fs::path(root);
}

void cmd_train(const TrainArgs& a) {
  auto cfg = config_or_default(a.config);
  const fs::path out(a.out);
  const auto records = read_manifest(a.manifest);
  std::vector<std::string> captions;
  for (const auto& r : records)
    if (r.split == Split::Train) captions.push_back(r.caption);
  if (captions.empty()) throw DataError("training split is empty");
  const auto vocab = Vocabulary::build(captions, cfg.vocab_min_count);
  cfg.model.decoder.vocab_size = vocab.size();

  const DatasetSpec ds{data_root(a.manifest, a.root), a.features, cfg.model.thumb.input_size, cfg.model.fusion.patch_dim};
  const auto all = load_examples(records, ds, vocab);
  const auto train = select_split(all, Split::Train);
  const auto val = select_split(all, Split::Val);
  if (train.empty()) throw DataError("training split has no usable slides");
  if (val.empty()) throw DataError("validation split has no usable slides");

  fs::create_directories(out / "checkpoints");
  save_run_config(out / "config.json", cfg);
  vocab.save(out / "vocab.txt");
  write_manifest(out / "manifest.jsonl", records);
  write_text(out / "data.json",
             nlohmann::json{{"manifest", fs::absolute(a.manifest).lexically_normal().string()},
                            {"root", fs::absolute(ds.root).lexically_normal().string()},
                            {"features", fs::absolute(a.features).lexically_normal().string()},
                            {"config_hash", config_hash(to_json(cfg))}}
                     .dump(2) +
                 "\n");

  const auto last = out / "checkpoints" / "last";
  std::optional<Trainer> trainer;
  if (a.resume && fs::exists(sidecar_path(last))) {
    trainer.emplace(Trainer::resume(last, cfg.train));
    if (trainer->vocab() != vocab) throw ConfigError("checkpoint vocabulary differs from the manifest's");
    std::cerr << "train: resuming after epoch " << trainer->epoch() << "\n";
  } else {
    fs::remove(out / "logs.jsonl");
    trainer.emplace(CaptionModel<float>::random(cfg.model, cfg.seed), vocab, cfg.train);
  }
  std::cerr << "train: " << train.size() << " train / " << val.size() << " val slides, vocabulary " << vocab.size()
            << "\n";
  trainer->fit(train, val, out / "checkpoints", out / "logs.jsonl", [](const EpochLog& l) {
    std::cerr << "epoch " << l.epoch << " loss " << l.train_loss << " val_bleu4 " << l.val_bleu4
              << (l.event.empty() ? "" : " " + l.event) << "\n";
  });
  std::cerr << "train: best val BLEU-4 " << trainer->best_bleu4() << " at epoch " << trainer->best_epoch() << "\n";
}

// ---------------------------------------------------------------------------
// generate / evaluate / explain

struct InferenceArgs {
  std::string checkpoint, manifest, features, root;
  std::optional<std::size_t> beam, max_len;
};

// A checkpoint under runs/<name>/checkpoints/ finds its data through
// runs/<name>/data.json unless paths are given explicitly.
struct InferenceContext {
  LoadedCheckpoint ck;
  fs::path run_dir;
  std::vector<SlideRecord> records;
  DatasetSpec ds;
  DecodeOptions decode;
};

InferenceContext open_inference(const InferenceArgs& a) {
  InferenceContext c;
  c.ck = load_checkpoint(a.checkpoint);
  c.run_dir = checkpoint_stem(a.checkpoint).parent_path().parent_path();
  std::string manifest = a.manifest, features = a.features, root = a.root;
  const auto data = c.run_dir / "data.json";
  if ((manifest.empty() || features.empty()) && fs::exists(data)) {
    const auto j = read_json(data);
    if (manifest.empty()) manifest = j.at("manifest").get<std::string>();
    if (features.empty()) features = j.at("features").get<std::string>();
    if (root.empty()) root = j.at("root").get<std::string>();
  }
  if (manifest.empty() || features.empty()) {
    throw ConfigError("--manifest and --features are required when the checkpoint is not inside a run directory");
  }
  c.records = read_manifest(manifest);
  const auto& mc = c.ck.model.config;
  c.ds = {data_root(manifest, root), features, mc.thumb.input_size, mc.fusion.patch_dim};
  c.decode = {a.beam.value_or(mc.decoder.beam_width), a.max_len.value_or(mc.decoder.max_len)};
  if (c.decode.beam == 0 || c.decode.max_len == 0) throw ConfigError("--beam and --max-len must be positive");
  return c;
}

std::vector<SlideRecord> pick_slide(const std::vector<SlideRecord>& records, const std::string& id) {
  for (const auto& r : records)
    if (r.id == id) {
      if (!r.usable()) throw DataError("slide '" + id + "' has no tissue patches");
      return {r};
    }
  throw DataError("unknown slide id '" + id + "'");
}

struct GenerateArgs : InferenceArgs {
  std::string slide = "all", out;
};

void cmd_generate(const GenerateArgs& a) {
  auto c = open_inference(a);
  const auto records = a.slide == "all" ? c.records : pick_slide(c.records, a.slide);
  const auto examples = load_examples(records, c.ds, c.ck.vocab);
  std::ostringstream text;
  for (const auto& r : caption_examples(c.ck.model, c.ck.vocab, examples, c.decode)) {
    text << caption_json(r).dump() << '\n';
  }
  if (a.out.empty()) {
    std::cout << text.str();
  } else {
    write_text(a.out, text.str());
  }
}

struct EvaluateArgs : InferenceArgs {
  std::string split = "test", out;
};

void cmd_evaluate(const EvaluateArgs& a) {
  auto c = open_inference(a);
  const auto split = parse_split(a.split);
  const auto examples = load_examples(c.records, c.ds, c.ck.vocab, split);
  const auto report = evaluate_corpus(c.ck.model, c.ck.vocab, examples, c.decode);
  auto j = report.to_json();
  j["split"] = a.split;
  j["decode"] = {{"beam", c.decode.beam}, {"max_len", c.decode.max_len}};
  j["config_hash"] = c.ck.meta.at("config_hash");
  const fs::path out = a.out.empty() ? c.run_dir / "reports" / (a.split + "_report.json") : fs::path(a.out);
  write_text(out, j.dump(2) + "\n");
  std::cout << "BLEU-1  BLEU-2  BLEU-3  BLEU-4  ROUGE_L\n" << std::fixed << std::setprecision(4);
  for (double b : report.bleu) std::cout << b << "  ";
  std::cout << report.rouge_l << "\n";
}

struct ExplainArgs : InferenceArgs {
  std::string slide, out;
  std::size_t topk = 4;
};

void cmd_explain(const ExplainArgs& a) {
  auto c = open_inference(a);
  const auto examples = load_examples(pick_slide(c.records, a.slide), c.ds, c.ck.vocab);
  const fs::path out = a.out.empty() ? c.run_dir / "reports" / "explain" / a.slide : fs::path(a.out);
  const auto j = explain_slide(c.ck.model, c.ck.vocab, examples.front(), {a.topk, c.decode}, out);
  std::cout << j.at("caption").get<std::string>() << "\n";
  for (const auto& p : j.at("topk")) {
    std::cout << "  #" << p.at("rank") << " patch " << p.at("index") << " at (" << p.at("x") << ", " << p.at("y")
              << ") alpha " << p.at("alpha") << "\n";
  }
}

void add_inference_flags(CLI::App* cmd, InferenceArgs& a) {
  cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint stem or .hct/.json path")->required();
  cmd->add_option("--manifest", a.manifest, "Manifest (defaults to the run's data.json)");
  cmd->add_option("--features", a.features, "Patch-feature directory (defaults to the run's data.json)");
  cmd->add_option("--root", a.root, "Directory manifest paths are relative to");
  cmd->add_option("--beam", a.beam, "Beam width (1 = greedy)");
  cmd->add_option("--max-len", a.max_len, "Maximum generated tokens");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"histocap: caption generation for whole-slide images"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic slide corpus");
  c_synth->add_option("--spec", synth.spec, "Synth spec JSON (defaults built in)");
  c_synth->add_option("--out", synth.out, "Output directory")->required();

  TileArgs tile;
  auto* c_tile = app.add_subcommand("tile", "Tile slides into patches, thumbnails and a manifest");
  c_tile->add_option("--slides", tile.slides, "Directory holding slides.jsonl")->required();
  c_tile->add_option("--out", tile.out, "Output directory")->required();
  c_tile->add_option("--config", tile.config, "Run config JSON");
  c_tile->add_option("--patch", tile.patch, "Patch size in pixels");
  c_tile->add_option("--thumb", tile.thumb, "Thumbnail size in pixels");
  c_tile->add_option("--min-tissue", tile.min_tissue, "Minimum tissue fraction to keep a patch");
  c_tile->add_option("--threads", tile.threads, "Worker count (HISTOCAP_THREADS overrides)");

  InitVitArgs init;
  auto* c_init = app.add_subcommand("init-vit", "Write seeded random ViT hierarchy weights");
  c_init->add_option("--config", init.config, "Run config JSON (vit section)");
  c_init->add_option("--seed", init.seed, "Initialisation seed");
  c_init->add_option("--out", init.out, "Output archive")->required();

  EncodeArgs enc;
  auto* c_enc = app.add_subcommand("encode", "Encode patches into frozen ViT tokens");
  c_enc->add_option("--manifest", enc.manifest, "Manifest from tile")->required();
  c_enc->add_option("--weights", enc.weights, "ViT hierarchy archive")->required();
  c_enc->add_option("--out", enc.out, "Feature directory")->required();
  c_enc->add_option("--config", enc.config, "Run config JSON (vit section)");
  c_enc->add_option("--root", enc.root, "Directory manifest paths are relative to");
  c_enc->add_flag("--force", enc.force, "Re-encode up-to-date slides");
  c_enc->add_option("--threads", enc.threads, "Worker count (HISTOCAP_THREADS overrides)");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train the captioner");
  c_train->add_option("--manifest", train.manifest, "Manifest from tile")->required();
  c_train->add_option("--features", train.features, "Feature directory from encode")->required();
  c_train->add_option("--config", train.config, "Run config JSON");
  c_train->add_option("--out", train.out, "Run directory")->required();
  c_train->add_option("--root", train.root, "Directory manifest paths are relative to");
  c_train->add_flag("--resume", train.resume, "Continue from <out>/checkpoints/last");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Caption slides");
  add_inference_flags(c_gen, gen);
  c_gen->add_option("--slide", gen.slide, "Slide id or 'all'");
  c_gen->add_option("--out", gen.out, "Write JSON lines here instead of stdout");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Score a split with BLEU-1..4 and ROUGE-L");
  add_inference_flags(c_ev, ev);
  c_ev->add_option("--split", ev.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  c_ev->add_option("--out", ev.out, "Report path (default <run>/reports/<split>_report.json)");

  ExplainArgs ex;
  auto* c_ex = app.add_subcommand("explain", "Export attention maps and top-k patches for one slide");
  add_inference_flags(c_ex, ex);
  c_ex->add_option("--slide", ex.slide, "Slide id")->required();
  c_ex->add_option("--topk", ex.topk, "Number of patches to rank");
  c_ex->add_option("--out", ex.out, "Bundle directory (default <run>/reports/explain/<slide>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*c_synth) cmd_synth(synth);
    if (*c_tile) cmd_tile(tile);
    if (*c_init) cmd_init_vit(init);
    if (*c_enc) cmd_encode(enc);
    if (*c_train) cmd_train(train);
    if (*c_gen) cmd_generate(gen);
    if (*c_ev) cmd_evaluate(ev);
    if (*c_ex) cmd_explain(ex);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
