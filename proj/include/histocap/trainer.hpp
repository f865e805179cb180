#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histocap/config.hpp"
#include "histocap/dataset.hpp"
#include "histocap/metrics.hpp"
#include "histocap/model.hpp"
#include "histocap/optim.hpp"

namespace histocap {

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_bleu4 = 0.0;
  double lr_encoder = 0.0;
  double lr_decoder = 0.0;
  std::string event;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},           {"train_loss", train_loss}, {"val_bleu4", val_bleu4},
            {"lr_encoder", lr_encoder}, {"lr_decoder", lr_decoder}, {"event", event}};
  }

  bool operator==(const EpochLog&) const = default;
};

// Batched forward in eval mode, then one greedy decode per slide.
inline std::vector<Hypothesis> greedy_captions(const CaptionModel<float>& model, const std::vector<Example>& examples,
                                               std::size_t max_len, std::size_t batch_size = 32) {
  std::vector<Hypothesis> out;
  NoGradScope<float> inference;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<const Example*> items;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) items.push_back(&examples[i]);
    const auto batch = make_batch<float>(items, model.config.thumb.input_size);
    const auto fwd = model.forward(batch.thumbnails, batch.patches, ThumbMode::Eval);
    for (std::size_t b = 0; b < items.size(); ++b) {
      out.push_back(model.decoder.greedy_decode(slice(fwd.fused.annotations, 0, b, 1), max_len));
    }
  }
  return out;
}

inline double validation_bleu4(const CaptionModel<float>& model, const Vocabulary& vocab,
                               const std::vector<Example>& val) {
  const auto hyps = greedy_captions(model, val, model.config.decoder.max_len);
  std::vector<Tokens> cand, ref;
  for (std::size_t i = 0; i < val.size(); ++i) {
    cand.push_back(vocab.words(hyps[i].tokens));
    ref.push_back(tokenize(val[i].caption));
  }
  return corpus_bleu(cand, ref)[3];
}

inline nlohmann::json vocab_json(const Vocabulary& v) {
  return std::vector<std::string>(v.tokens().begin() + kNumSpecials, v.tokens().end());
}

// Hash binding a checkpoint to its model shape, training settings and vocabulary.
inline std::string training_hash(const ModelConfig& m, const TrainConfig& t, const Vocabulary& v) {
  return config_hash({{"model", to_json(m)}, {"train", to_json(t)}, {"vocab", vocab_json(v)}});
}

struct LoadedCheckpoint {
  CaptionModel<float> model;
  Vocabulary vocab;
  nlohmann::json meta;
};

inline std::filesystem::path archive_path(const std::filesystem::path& stem) { return stem.string() + ".hct"; }
inline std::filesystem::path sidecar_path(const std::filesystem::path& stem) { return stem.string() + ".json"; }

inline nlohmann::json read_sidecar(const std::filesystem::path& stem) {
  std::ifstream in(sidecar_path(stem));
  if (!in) throw DataError("cannot read checkpoint sidecar " + sidecar_path(stem).string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(sidecar_path(stem).string() + ": " + e.what());
  }
}

// Accepts either the stem or the .hct / .json path.
inline std::filesystem::path checkpoint_stem(std::filesystem::path p) {
  if (p.extension() == ".hct" || p.extension() == ".json") p.replace_extension();
  return p;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto stem = checkpoint_stem(path);
  LoadedCheckpoint c;
  c.meta = read_sidecar(stem);
  ModelConfig mc;
  from_json(c.meta.at("model_config"), "checkpoint.model_config", mc);
  c.vocab = Vocabulary::from_tokens(c.meta.at("vocab").get<std::vector<std::string>>());
  if (mc.decoder.vocab_size != c.vocab.size()) throw ConfigError("checkpoint vocabulary size disagrees with decoder");
  c.model = CaptionModel<float>::random(mc, 0);
  c.model.load_archive(archive::load(archive_path(stem)));
  return c;
}

class Trainer {
 public:
  Trainer(CaptionModel<float> model, Vocabulary vocab, TrainConfig cfg)
      : model_(std::move(model)), vocab_(std::move(vocab)), cfg_(cfg), rng_(cfg.seed), adam_(groups()) {
    cfg_.validate();
    if (model_.config.decoder.vocab_size != vocab_.size()) {
      throw ConfigError("decoder vocab_size " + std::to_string(model_.config.decoder.vocab_size) +
                        " does not match vocabulary size " + std::to_string(vocab_.size()));
    }
    schedule_.plateau_patience = cfg_.plateau_patience;
    schedule_.stop_patience = cfg_.early_stop_patience;
    schedule_.decay = cfg_.lr_decay;
  }

  // Continues from `stem`; the stored hash must match this run's settings.
  static Trainer resume(const std::filesystem::path& stem_in, const TrainConfig& cfg) {
    const auto stem = checkpoint_stem(stem_in);
    auto ck = load_checkpoint(stem);
    const auto& m = ck.meta;
    const auto expected = training_hash(ck.model.config, cfg, ck.vocab);
    if (m.at("config_hash").get<std::string>() != expected) {
      throw ConfigError("checkpoint " + stem.string() + " was written under a different configuration (hash " +
                        m.at("config_hash").get<std::string>() + ", current " + expected + ")");
    }
    Trainer t(std::move(ck.model), std::move(ck.vocab), cfg);
    t.adam_.load_from(archive::load(archive_path(stem)), m.at("adam_step").get<std::size_t>());
    t.adam_.groups()[0].lr = m.at("lr_encoder").get<double>();
    if (t.adam_.groups().size() > 1) t.adam_.groups()[1].lr = m.at("lr_decoder").get<double>();
    t.epoch_ = m.at("epoch").get<std::size_t>();
    t.best_bleu4_ = m.at("best_bleu4").get<double>();
    t.best_epoch_ = m.at("best_epoch").get<std::size_t>();
    t.schedule_.best = m.at("schedule_best").get<double>();
    t.schedule_.since_decay = m.at("since_decay").get<std::size_t>();
    t.schedule_.since_best = m.at("since_best").get<std::size_t>();
    t.stopped_ = m.at("stopped").get<bool>();
    t.rng_.restore(m.at("rng_state").get<std::string>());
    const auto best = stem.parent_path() / "best.hct";
    if (t.best_epoch_ > 0 && std::filesystem::exists(best)) t.best_ = archive::load(best);
    return t;
  }

  const CaptionModel<float>& model() const { return model_; }
  CaptionModel<float>& model() { return model_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::size_t epoch() const { return epoch_; }
  bool stopped() const { return stopped_; }
  double best_bleu4() const { return best_bleu4_; }
  std::size_t best_epoch() const { return best_epoch_; }
  const Adam<float>& optimizer() const { return adam_; }
  std::string hash() const { return training_hash(model_.config, cfg_, vocab_); }

  double lr_encoder() const { return cfg_.freeze_thumbnail ? 0.0 : adam_.groups().front().lr; }
  double lr_decoder() const { return adam_.groups().back().lr; }

  // Called after every optimizer step with the largest post-clip |gradient|.
  std::function<void(double)> on_step;

  // One pass over `train` in seeded order; returns the example-weighted mean loss.
  double train_epoch(const std::vector<Example>& train) {
    if (train.empty()) throw DataError("training split is empty");
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      std::vector<const Example*> items;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg_.batch_size); ++i) {
        items.push_back(&train[order[i]]);
      }
      total += train_step(items) * static_cast<double>(items.size());
    }
    return total / static_cast<double>(train.size());
  }

  // Forward, loss, backward, clip, Adam; returns the batch loss.
  double train_step(const std::vector<const Example*>& items) {
    const auto batch = make_batch<float>(items, model_.config.thumb.input_size);
    GradTape<float> tape;
    TapeScope<float> scope(&tape);
    double value = 0.0;
    try {
      const auto fwd = model_.forward(batch.thumbnails, batch.patches,
                                      cfg_.freeze_thumbnail ? ThumbMode::Eval : ThumbMode::Train);
      const auto loss = model_.decoder.teacher_forced_loss(fwd.fused.annotations, batch.gold, cfg_.lambda_att);
      value = loss.loss.data()[0];
      if (!std::isfinite(value)) throw NumericError("loss is not finite");
      tape.backward(loss.loss);
    } catch (const NumericError& e) {
      std::string ids;
      for (const auto* x : items) ids += (ids.empty() ? "" : ",") + x->id;
      throw NumericError("epoch " + std::to_string(epoch_ + 1) + ", step " + std::to_string(adam_.step_count() + 1) +
                         " (slides " + ids + "): " + e.what());
    }
    const auto params = trainable_tensors();
    clip_gradients(params, cfg_.clip_value);
    if (on_step) {
      double mx = 0.0;
      for (const auto& p : params)
        if (p.has_grad())
          for (float g : p.grad()) mx = std::max(mx, static_cast<double>(std::fabs(g)));
      on_step(mx);
    }
    adam_.step();
    adam_.zero_grad();
    return value;
  }

  // Train one epoch, validate, apply the schedule, checkpoint.
  EpochLog run_epoch(const std::vector<Example>& train, const std::vector<Example>& val,
                     const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt) {
    if (val.empty()) throw DataError("validation split is empty");
    EpochLog log;
    log.train_loss = train_epoch(train);
    ++epoch_;
    log.epoch = epoch_;
    log.val_bleu4 = validation_bleu4(model_, vocab_, val);
    const auto event = schedule_.observe(log.val_bleu4);
    if (event == ScheduleEvent::Improved) {
      best_bleu4_ = log.val_bleu4;
      best_epoch_ = epoch_;
      best_ = model_.to_archive();
    } else if (event == ScheduleEvent::Decay) {
      adam_.scale_learning_rates(cfg_.lr_decay);
    } else if (event == ScheduleEvent::Stop) {
      stopped_ = true;
    }
    log.event = to_string(event);
    log.lr_encoder = lr_encoder();
    log.lr_decoder = lr_decoder();
    if (checkpoint_dir) {
      save_checkpoint(*checkpoint_dir / "last");
      if (event == ScheduleEvent::Improved) save_checkpoint(*checkpoint_dir / "best");
    }
    return log;
  }

  // Runs until max_epochs or early stop, appending each epoch to `log_path`,
  // then leaves the best-validation weights in the model.
  std::vector<EpochLog> fit(const std::vector<Example>& train, const std::vector<Example>& val,
                            const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                            const std::optional<std::filesystem::path>& log_path = std::nullopt,
                            std::function<void(const EpochLog&)> on_epoch = {}) {
    std::vector<EpochLog> logs;
    while (!stopped_ && epoch_ < cfg_.max_epochs) {
      logs.push_back(run_epoch(train, val, checkpoint_dir));
      if (log_path) append_log(*log_path, logs.back());
      if (on_epoch) on_epoch(logs.back());
    }
    restore_best();
    return logs;
  }

  void restore_best() {
    if (!best_.empty()) model_.load_archive(best_);
  }

  void save_checkpoint(const std::filesystem::path& stem) const {
    TensorMap m = model_.to_archive();
    adam_.save_to(m);
    archive::save(archive_path(stem), m);
    nlohmann::json j = {{"epoch", epoch_},
                        {"best_bleu4", best_bleu4_},
                        {"best_epoch", best_epoch_},
                        {"schedule_best", schedule_.best},
                        {"since_decay", schedule_.since_decay},
                        {"since_best", schedule_.since_best},
                        {"stopped", stopped_},
                        {"rng_state", rng_.state()},
                        {"adam_step", adam_.step_count()},
                        {"lr_encoder", adam_.groups().front().lr},
                        {"lr_decoder", lr_decoder()},
                        {"config_hash", hash()},
                        {"model_config", to_json(model_.config)},
                        {"train_config", to_json(cfg_)},
                        {"vocab", vocab_json(vocab_)}};
    std::ofstream out(sidecar_path(stem), std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + sidecar_path(stem).string());
    out << j.dump(2) << '\n';
  }

  static void append_log(const std::filesystem::path& path, const EpochLog& log) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw DataError("cannot append to " + path.string());
    out << log.to_json().dump() << '\n';
  }

 private:
  std::vector<ParamGroup<float>> groups() {
    set_trainable(model_.all_params(), true);
    std::vector<ParamGroup<float>> g;
    if (cfg_.freeze_thumbnail) {
      set_trainable(model_.encoder_params(), false);
    } else {
      g.push_back({"encoder", model_.encoder_params(), cfg_.encoder_lr});
    }
    g.push_back({"decoder", model_.head_params(), cfg_.decoder_lr});
    return g;
  }

  std::vector<Tensorf> trainable_tensors() const {
    std::vector<Tensorf> out;
    for (const auto& g : adam_.groups())
      for (const auto& p : g.params) out.push_back(p.tensor);
    return out;
  }

  CaptionModel<float> model_;
  Vocabulary vocab_;
  TrainConfig cfg_;
  Rng rng_;
  Adam<float> adam_;
  PlateauSchedule schedule_;
  std::size_t epoch_ = 0;
  double best_bleu4_ = -1.0;
  std::size_t best_epoch_ = 0;
  bool stopped_ = false;
  TensorMap best_;
};

}  // namespace histocap
