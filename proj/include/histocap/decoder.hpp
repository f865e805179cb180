#pragma once

// Attention LSTM caption decoder over a grid of annotation vectors.
//
// Per step, with previous hidden state h:
//   e_j  = vᵀ tanh(U_a a_j + U_h h + b)      β = softmax(e)
//   z    = sigmoid(W_b h + b_b) · Σ_j β_j a_j
//   (h', c') = LSTM([E[prev]; z], h, c)        gates ordered i, f, o, g
//   logits = (E[prev] + L_h h' + L_z z) L_o + b_o

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "histocap/error.hpp"
#include "histocap/numerics/ops.hpp"
#include "histocap/params.hpp"
#include "histocap/vocab.hpp"

namespace histocap {

struct DecoderConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 256;
  std::size_t hidden_dim = 512;
  std::size_t annot_dim = 1024;
  std::size_t attn_dim = 256;
  double lambda_att = 1.0;
  double length_norm = 0.7;
  std::size_t beam_width = 3;
  std::size_t max_len = 60;

  bool operator==(const DecoderConfig&) const = default;
};

template <typename T>
struct DecoderState {
  Tensor<T> h;  // [B × H]
  Tensor<T> c;  // [B × H]
};

// Annotation-side terms that stay fixed for a whole sequence.
template <typename T>
struct PreparedAnnotations {
  Tensor<T> annotations;  // [B × N × A]
  Tensor<T> projected;    // [B × N × attn_dim]
  std::size_t batch() const { return annotations.dim(0); }
  std::size_t positions() const { return annotations.dim(1); }
};

template <typename T>
struct StepOutput {
  Tensor<T> logits;  // [B × V]
  DecoderState<T> state;
  Tensor<T> beta;    // [B × N]
  Tensor<T> gate;    // [B × 1]
  Tensor<T> z;       // gated context [B × A]
};

struct StepAttention {
  std::vector<double> beta;
  double gate = 0.0;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated ids, <end> included when reached
  double log_prob = 0.0;
  std::vector<StepAttention> attention;
  bool finished = false;  // reached <end>
  bool truncated = false; // stopped at max_len

  std::vector<TokenId> words() const {
    std::vector<TokenId> w(tokens);
    if (!w.empty() && w.back() == kEndId) w.pop_back();
    return w;
  }
  double score(double length_norm) const {
    return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(tokens.size(), 1)), length_norm);
  }
};

template <typename T>
struct LossResult {
  Tensor<T> loss;        // scalar total
  Tensor<T> token_loss;  // cross-entropy part
  Tensor<T> penalty;     // λ-weighted attention regularizer
  std::vector<Tensor<T>> betas;  // per step [B × N]
};

// Token ids that are never emitted at inference.
inline bool suppressed_at_inference(TokenId id) { return id == kPadId || id == kStartId || id == kUnkId; }

// Log-softmax over the admissible tokens; suppressed ids get −inf.
template <typename T>
std::vector<double> inference_log_probs(std::span<const T> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (!suppressed_at_inference(j)) mx = std::max(mx, static_cast<double>(logits[j]));
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (!suppressed_at_inference(j)) total += std::exp(static_cast<double>(logits[j]) - mx);
  const double log_z = mx + std::log(total);
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (!suppressed_at_inference(j)) out[j] = static_cast<double>(logits[j]) - log_z;
  return out;
}

template <typename T>
class CaptionDecoder {
 public:
  DecoderConfig config;
  Tensor<T> embed;
  Tensor<T> lstm_wx, lstm_wh, lstm_b;
  Tensor<T> init_h_w, init_h_b, init_c_w, init_c_b;
  Tensor<T> att_ua, att_uh, att_b, att_v;
  Tensor<T> gate_w, gate_b;
  Tensor<T> out_lh, out_lz, out_lo, out_b;

  static CaptionDecoder random(const DecoderConfig& cfg, Rng& rng) {
    if (cfg.vocab_size <= kNumSpecials) throw ConfigError("decoder vocabulary must contain at least one word");
    const std::size_t v = cfg.vocab_size, e = cfg.embed_dim, h = cfg.hidden_dim, a = cfg.annot_dim,
                      k = cfg.attn_dim;
    CaptionDecoder d;
    d.config = cfg;
    std::vector<T> ev(v * e);
    for (auto& x : ev) x = static_cast<T>(rng.uniform(-0.1, 0.1));
    d.embed = Tensor<T>({v, e}, std::move(ev));
    d.lstm_wx = linear_uniform<T>(rng, {e + a, 4 * h}, h);
    d.lstm_wh = linear_uniform<T>(rng, {h, 4 * h}, h);
    d.lstm_b = Tensor<T>({4 * h});
    d.init_h_w = linear_uniform<T>(rng, {a, h}, a);
    d.init_h_b = Tensor<T>({h});
    d.init_c_w = linear_uniform<T>(rng, {a, h}, a);
    d.init_c_b = Tensor<T>({h});
    d.att_ua = linear_uniform<T>(rng, {a, k}, a);
    d.att_uh = linear_uniform<T>(rng, {h, k}, h);
    d.att_b = Tensor<T>({k});
    d.att_v = linear_uniform<T>(rng, {k, 1}, k);
    d.gate_w = linear_uniform<T>(rng, {h, 1}, h);
    d.gate_b = Tensor<T>({1});
    d.out_lh = linear_uniform<T>(rng, {h, e}, h);
    d.out_lz = linear_uniform<T>(rng, {a, e}, a);
    d.out_lo = linear_uniform<T>(rng, {e, v}, e);
    d.out_b = Tensor<T>({v});
    set_trainable(d.params(), true);
    return d;
  }

  ParamList<T> params() const {
    return {{"decoder.embed", embed},
            {"decoder.lstm.wx", lstm_wx},     {"decoder.lstm.wh", lstm_wh},
            {"decoder.lstm.bias", lstm_b},    {"decoder.init_h.weight", init_h_w},
            {"decoder.init_h.bias", init_h_b}, {"decoder.init_c.weight", init_c_w},
            {"decoder.init_c.bias", init_c_b}, {"decoder.att.ua", att_ua},
            {"decoder.att.uh", att_uh},       {"decoder.att.bias", att_b},
            {"decoder.att.v", att_v},         {"decoder.gate.weight", gate_w},
            {"decoder.gate.bias", gate_b},    {"decoder.out.lh", out_lh},
            {"decoder.out.lz", out_lz},       {"decoder.out.lo", out_lo},
            {"decoder.out.bias", out_b}};
  }

  PreparedAnnotations<T> prepare(const Tensor<T>& annotations) const {
    check_annotations(annotations);
    const std::size_t b = annotations.dim(0), n = annotations.dim(1);
    return {annotations,
            reshape(matmul(reshape(annotations, {b * n, config.annot_dim}), att_ua), {b, n, config.attn_dim})};
  }

  // h0 = tanh(f_init_h(mean_j a_j)), likewise c0.
  DecoderState<T> init_state(const Tensor<T>& annotations) const {
    check_annotations(annotations);
    const Tensor<T> m = mean(annotations, 1);
    return {tanh(add_bias(matmul(m, init_h_w), init_h_b)), tanh(add_bias(matmul(m, init_c_w), init_c_b))};
  }

  StepOutput<T> step(std::span<const TokenId> prev, const DecoderState<T>& s,
                     const PreparedAnnotations<T>& ann) const {
    const std::size_t b = ann.batch(), n = ann.positions(), h = config.hidden_dim;
    if (prev.size() != b) throw ShapeError("decoder step: one previous token per batch row required");
    for (const auto id : prev) {
      if (id >= config.vocab_size) {
        throw ValueError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(config.vocab_size));
      }
    }
    StepOutput<T> out;
    const Tensor<T> query = expand(add_bias(matmul(s.h, att_uh), att_b), n);
    const Tensor<T> hidden = tanh(add(ann.projected, query));
    const Tensor<T> energies = reshape(matmul(reshape(hidden, {b * n, config.attn_dim}), att_v), {b, n});
    out.beta = softmax(energies, 1);
    const Tensor<T> context = reshape(bmm(reshape(out.beta, {b, 1, n}), ann.annotations), {b, config.annot_dim});
    out.gate = sigmoid(add_bias(matmul(s.h, gate_w), gate_b));
    out.z = scale_rows(context, out.gate);
    const Tensor<T>& z = out.z;

    const Tensor<T> emb = embedding(embed, prev);
    const Tensor<T> gates =
        add_bias(add(matmul(concat<T>({emb, z}, 1), lstm_wx), matmul(s.h, lstm_wh)), lstm_b);
    const Tensor<T> i = sigmoid(slice(gates, 1, 0, h));
    const Tensor<T> f = sigmoid(slice(gates, 1, h, h));
    const Tensor<T> o = sigmoid(slice(gates, 1, 2 * h, h));
    const Tensor<T> g = tanh(slice(gates, 1, 3 * h, h));
    out.state.c = add(mul(f, s.c), mul(i, g));
    out.state.h = mul(o, tanh(out.state.c));

    const Tensor<T> deep = add(add(emb, matmul(out.state.h, out_lh)), matmul(z, out_lz));
    out.logits = add_bias(matmul(deep, out_lo), out_b);
    return out;
  }

  // Each gold sequence runs <start> ... <end>. Per-example token loss is the
  // mean over its targets; the batch loss averages examples. Padded steps
  // contribute neither cross-entropy nor attention mass.
  LossResult<T> teacher_forced_loss(const Tensor<T>& annotations, const std::vector<std::vector<TokenId>>& gold,
                                    double lambda_att) const {
    const auto ann = prepare(annotations);
    const std::size_t b = ann.batch();
    if (gold.size() != b) throw ShapeError("teacher_forced_loss: one caption per batch row required");
    std::size_t t_max = 0;
    for (const auto& g : gold) {
      if (g.size() < 2 || g.front() != kStartId || g.back() != kEndId) {
        throw ValueError("gold caption must start with <start>, end with <end> and be non-empty");
      }
      t_max = std::max(t_max, g.size() - 1);
    }
    DecoderState<T> state = init_state(annotations);
    std::vector<Tensor<T>> logits;
    std::vector<std::size_t> targets;
    std::vector<T> weights;
    LossResult<T> r;
    Tensor<T> attention_mass;
    for (std::size_t t = 0; t < t_max; ++t) {
      std::vector<TokenId> prev(b);
      std::vector<T> live(b);
      for (std::size_t k = 0; k < b; ++k) {
        const std::size_t steps = gold[k].size() - 1;
        const bool active = t < steps;
        prev[k] = active ? gold[k][t] : kPadId;
        live[k] = active ? T(1) : T(0);
        targets.push_back(active ? gold[k][t + 1] : kPadId);
        weights.push_back(active ? T(1) / static_cast<T>(steps * b) : T(0));
      }
      auto out = step(prev, state, ann);
      state = out.state;
      logits.push_back(out.logits);
      r.betas.push_back(out.beta);
      const Tensor<T> masked = scale_rows(out.beta, Tensor<T>({b}, live));
      attention_mass = attention_mass.defined() ? add(attention_mass, masked) : masked;
    }
    r.token_loss = cross_entropy(concat<T>(logits, 0), std::span<const std::size_t>(targets),
                                 std::span<const T>(weights));
    const Tensor<T> gap = add_scalar(scale(attention_mass, T(-1)), T(1));
    r.penalty = scale(sum_all(square(gap)), static_cast<T>(lambda_att / static_cast<double>(b)));
    r.loss = lambda_att == 0.0 ? r.token_loss : add(r.token_loss, r.penalty);
    return r;
  }

  Hypothesis greedy_decode(const Tensor<T>& annotations, std::size_t max_len) const {
    NoGradScope<T> inference;
    const auto ann = single(annotations);
    DecoderState<T> state = init_state(ann.annotations);
    Hypothesis hyp;
    TokenId prev = kStartId;
    for (std::size_t t = 0; t < max_len; ++t) {
      const auto out = step(std::span<const TokenId>(&prev, 1), state, ann);
      const auto lp = inference_log_probs<T>(out.logits.data());
      const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
      hyp.tokens.push_back(best);
      hyp.log_prob += lp[best];
      hyp.attention.push_back(attention_of(out));
      state = out.state;
      prev = best;
      if (best == kEndId) {
        hyp.finished = true;
        return hyp;
      }
    }
    hyp.truncated = true;
    return hyp;
  }

  // Keeps the top `width` expansions by total log-prob each step (ties by
  // token sequence). Hypotheses reaching <end> retire to a pool; the result
  // is ranked by log_prob / length^length_norm, ties by token sequence.
  std::vector<Hypothesis> beam_decode(const Tensor<T>& annotations, std::size_t width, std::size_t max_len) const {
    if (width == 0) throw ValueError("beam width must be at least 1");
    NoGradScope<T> inference;
    const auto ann = single(annotations);
    struct Live {
      Hypothesis hyp;
      DecoderState<T> state;
    };
    std::vector<Live> live{{Hypothesis{}, init_state(ann.annotations)}};
    std::vector<Hypothesis> pool;
    for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
      struct Candidate {
        std::size_t parent;
        TokenId token;
        double log_prob;
        std::vector<TokenId> seq;
      };
      std::vector<Candidate> cands;
      std::vector<StepOutput<T>> outs;
      for (std::size_t li = 0; li < live.size(); ++li) {
        const TokenId prev = live[li].hyp.tokens.empty() ? kStartId : live[li].hyp.tokens.back();
        outs.push_back(step(std::span<const TokenId>(&prev, 1), live[li].state, ann));
        const auto lp = inference_log_probs<T>(outs.back().logits.data());
        for (TokenId k = 0; k < lp.size(); ++k) {
          if (suppressed_at_inference(k)) continue;
          auto seq = live[li].hyp.tokens;
          seq.push_back(k);
          cands.push_back({li, k, live[li].hyp.log_prob + lp[k], std::move(seq)});
        }
      }
      std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
        return a.seq < b.seq;
      });
      cands.resize(std::min(cands.size(), width));
      std::vector<Live> next;
      for (auto& c : cands) {
        Live l{live[c.parent].hyp, outs[c.parent].state};
        l.hyp.tokens = std::move(c.seq);
        l.hyp.log_prob = c.log_prob;
        l.hyp.attention.push_back(attention_of(outs[c.parent]));
        if (c.token == kEndId) {
          l.hyp.finished = true;
          pool.push_back(std::move(l.hyp));
        } else {
          next.push_back(std::move(l));
        }
      }
      live = std::move(next);
    }
    for (auto& l : live) {
      l.hyp.truncated = true;
      pool.push_back(std::move(l.hyp));
    }
    const double alpha = config.length_norm;
    std::sort(pool.begin(), pool.end(), [alpha](const Hypothesis& a, const Hypothesis& b) {
      const double sa = a.score(alpha), sb = b.score(alpha);
      if (sa != sb) return sa > sb;
      return a.tokens < b.tokens;
    });
    return pool;
  }

  // Sum of the chosen per-step inference log-probs, replayed from scratch.
  double replay_log_prob(const Tensor<T>& annotations, const std::vector<TokenId>& tokens) const {
    NoGradScope<T> inference;
    const auto ann = single(annotations);
    DecoderState<T> state = init_state(ann.annotations);
    TokenId prev = kStartId;
    double total = 0.0;
    for (const auto tok : tokens) {
      const auto out = step(std::span<const TokenId>(&prev, 1), state, ann);
      total += inference_log_probs<T>(out.logits.data())[tok];
      state = out.state;
      prev = tok;
    }
    return total;
  }

 private:
  void check_annotations(const Tensor<T>& annotations) const {
    if (annotations.rank() != 3 || annotations.dim(2) != config.annot_dim) {
      throw ShapeError("decoder expects annotations [BxNx" + std::to_string(config.annot_dim) + "], got " +
                       shape_str(annotations.shape()));
    }
  }

  PreparedAnnotations<T> single(const Tensor<T>& annotations) const {
    const Tensor<T> a = annotations.rank() == 2 ? reshape(annotations, {1, annotations.dim(0), annotations.dim(1)})
                                                : annotations;
    if (a.rank() != 3 || a.dim(0) != 1) throw ShapeError("decoding expects annotations of one slide");
    return prepare(a);
  }

  static StepAttention attention_of(const StepOutput<T>& out) {
    StepAttention s;
    for (const T v : out.beta.data()) s.beta.push_back(static_cast<double>(v));
    s.gate = static_cast<double>(out.gate.item());
    return s;
  }
};

}  // namespace histocap
