#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "histocap/decoder.hpp"
#include "histocap/numerics/gradcheck.hpp"

using namespace histocap;

namespace {

DecoderConfig tiny(std::size_t vocab = 7) {
  DecoderConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 4;
  c.hidden_dim = 5;
  c.annot_dim = 6;
  c.attn_dim = 3;
  return c;
}

template <typename T>
Tensor<T> random_annotations(std::size_t b, std::size_t n, std::size_t a, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> v(b * n * a);
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>({b, n, a}, v);
}

// Every admissible sequence of up to max_len tokens: <end> only as last token;
// length-max_len sequences without <end> are truncated hypotheses.
void enumerate(std::size_t vocab, std::size_t max_len, std::vector<TokenId>& prefix,
               const std::function<void(const std::vector<TokenId>&)>& visit) {
  for (TokenId k = 0; k < vocab; ++k) {
    if (suppressed_at_inference(k)) continue;
    prefix.push_back(k);
    if (k == kEndId || prefix.size() == max_len) {
      visit(prefix);
    } else {
      enumerate(vocab, max_len, prefix, visit);
    }
    prefix.pop_back();
  }
}

}  // namespace

TEST(Decoder, InitStateShapesAtPaperWidths) {
  DecoderConfig cfg;
  cfg.vocab_size = 30;
  Rng rng(1);
  const auto dec = CaptionDecoder<float>::random(cfg, rng);
  const auto ann = random_annotations<float>(1, 4, 1024, 2);
  const auto s = dec.init_state(ann);
  EXPECT_EQ(s.h.shape(), (Shape{1, 512}));
  EXPECT_EQ(s.c.shape(), (Shape{1, 512}));
  const TokenId prev = kStartId;
  const auto out = dec.step(std::span<const TokenId>(&prev, 1), s, dec.prepare(ann));
  EXPECT_EQ(out.logits.shape(), (Shape{1, 30}));
  EXPECT_EQ(out.beta.shape(), (Shape{1, 4}));
}

TEST(Decoder, IdenticalAnnotationsInit) {
  Rng rng(2);
  const auto dec = CaptionDecoder<double>::random(tiny(), rng);
  const auto one = random_annotations<double>(1, 1, 6, 3);
  std::vector<double> rep;
  for (int j = 0; j < 5; ++j) rep.insert(rep.end(), one.data().begin(), one.data().end());
  const auto s = dec.init_state(Tensord({1, 5, 6}, rep));
  const auto expect = tanh(add_bias(matmul(reshape(one, {1, 6}), dec.init_h_w), dec.init_h_b));
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(s.h.data()[k], expect.data()[k], 1e-14);
}

TEST(Decoder, BetaIsDistributionAndSingletonContext) {
  Rng rng(3);
  const auto dec = CaptionDecoder<double>::random(tiny(), rng);
  const auto ann = random_annotations<double>(2, 5, 6, 4);
  const auto prep = dec.prepare(ann);
  const std::vector<TokenId> prev{kStartId, 5};
  const auto out = dec.step(prev, dec.init_state(ann), prep);
  for (std::size_t b = 0; b < 2; ++b) {
    double total = 0.0;
    for (std::size_t j = 0; j < 5; ++j) total += out.beta.at(b, j);
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_GT(out.gate.data()[b], 0.0);
    EXPECT_LT(out.gate.data()[b], 1.0);
  }

  const auto single = random_annotations<double>(1, 1, 6, 5);
  const TokenId p = kStartId;
  const auto o1 = dec.step(std::span<const TokenId>(&p, 1), dec.init_state(single), dec.prepare(single));
  EXPECT_EQ(o1.beta.item(), 1.0);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(o1.z.data()[k], o1.gate.item() * single.data()[k], 1e-15);
}

TEST(Decoder, StepRejectsOutOfRangeToken) {
  Rng rng(4);
  const auto dec = CaptionDecoder<float>::random(tiny(), rng);
  const auto ann = random_annotations<float>(1, 2, 6, 1);
  const TokenId bad = 7;
  EXPECT_THROW(dec.step(std::span<const TokenId>(&bad, 1), dec.init_state(ann), dec.prepare(ann)), ValueError);
}

TEST(Decoder, FullStepGradientsMatchFiniteDifferences) {
  Rng rng(5);
  const auto dec = CaptionDecoder<double>::random(tiny(), rng);
  const auto ann = random_annotations<double>(2, 3, 6, 6);
  Rng hr(7);
  std::vector<double> head(2 * 7);
  for (auto& v : head) v = hr.normal();
  const Tensord weights({2, 7}, head);
  const std::vector<TokenId> prev{kStartId, 4};
  const auto loss = [&] {
    const auto out = dec.step(prev, dec.init_state(ann), dec.prepare(ann));
    return add(sum_all(mul(out.logits, weights)), sum_all(square(out.state.c)));
  };
  const auto report = check_parameter_gradients<double>(loss, tensors_of(dec.params()), 1e-5);
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst_param;
}

TEST(Decoder, TeacherForcedGradientsWithPaddingAndPenalty) {
  Rng rng(8);
  const auto dec = CaptionDecoder<double>::random(tiny(), rng);
  auto ann = random_annotations<double>(2, 3, 6, 9);
  const std::vector<std::vector<TokenId>> gold{{kStartId, 4, 5, 6, kEndId}, {kStartId, 6, kEndId}};
  auto params = tensors_of(dec.params());
  params.push_back(ann);
  const auto loss = [&] { return dec.teacher_forced_loss(ann, gold, 0.7).loss; };
  const auto report = check_parameter_gradients<double>(loss, params, 1e-5);
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst_param;
}

TEST(Decoder, LossDecompositionAndPaddingExclusion) {
  Rng rng(9);
  const auto dec = CaptionDecoder<double>::random(tiny(), rng);
  const auto ann = random_annotations<double>(2, 3, 6, 10);
  const std::vector<std::vector<TokenId>> gold{{kStartId, 4, 5, 6, kEndId}, {kStartId, 6, kEndId}};
  const auto r = dec.teacher_forced_loss(ann, gold, 0.0);
  EXPECT_EQ(r.loss.item(), r.token_loss.item());

  // Oracle: run each example alone, step by step.
  double ce = 0.0, penalty = 0.0;
  for (std::size_t k = 0; k < 2; ++k) {
    const auto one = slice(ann, 0, k, 1);
    const auto prep = dec.prepare(one);
    auto state = dec.init_state(one);
    std::vector<double> mass(3, 0.0);
    double sum = 0.0;
    for (std::size_t t = 0; t + 1 < gold[k].size(); ++t) {
      const auto out = dec.step(std::span<const TokenId>(&gold[k][t], 1), state, prep);
      state = out.state;
      sum += cross_entropy(out.logits, gold[k][t + 1]).item();
      for (std::size_t j = 0; j < 3; ++j) mass[j] += out.beta.data()[j];
    }
    ce += sum / static_cast<double>(gold[k].size() - 1) / 2.0;
    for (double m : mass) penalty += (1.0 - m) * (1.0 - m) / 2.0;
  }
  EXPECT_NEAR(r.token_loss.item(), ce, 1e-12);
  const auto r2 = dec.teacher_forced_loss(ann, gold, 2.5);
  EXPECT_NEAR(r2.penalty.item(), 2.5 * penalty, 1e-12);
  EXPECT_NEAR(r2.loss.item(), ce + 2.5 * penalty, 1e-12);
}

TEST(Decoder, UntrainedLossIsNearLogV) {
  DecoderConfig cfg;
  cfg.vocab_size = 40;
  Rng rng(10);
  const auto dec = CaptionDecoder<float>::random(cfg, rng);
  const auto ann = random_annotations<float>(1, 16, 1024, 11);
  const std::vector<std::vector<TokenId>> gold{{kStartId, 4, 9, 17, 30, 22, kEndId}};
  const double per_token = dec.teacher_forced_loss(ann, gold, 0.0).loss.item();
  EXPECT_NEAR(per_token, std::log(40.0), 0.05 * std::log(40.0));
}

TEST(Decoder, GoldCaptionValidation) {
  Rng rng(11);
  const auto dec = CaptionDecoder<float>::random(tiny(), rng);
  const auto ann = random_annotations<float>(1, 2, 6, 1);
  EXPECT_THROW(dec.teacher_forced_loss(ann, {{kStartId}}, 1.0), ValueError);
  EXPECT_THROW(dec.teacher_forced_loss(ann, {{4, kEndId}}, 1.0), ValueError);
}

TEST(Decoder, GreedyDeterministicAndTruncates) {
  Rng rng(12);
  const auto dec = CaptionDecoder<float>::random(tiny(), rng);
  const auto ann = random_annotations<float>(1, 4, 6, 13);
  const auto a = dec.greedy_decode(ann, 10);
  const auto b = dec.greedy_decode(ann, 10);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.log_prob, b.log_prob);
  const auto one = dec.greedy_decode(ann, 1);
  EXPECT_EQ(one.tokens.size(), 1u);
  EXPECT_TRUE(one.truncated || one.finished);
  if (one.tokens[0] != kEndId) EXPECT_TRUE(one.truncated);
  for (auto t : a.tokens) EXPECT_FALSE(suppressed_at_inference(t));
  EXPECT_NEAR(dec.replay_log_prob(ann, a.tokens), a.log_prob, 1e-5);
  EXPECT_EQ(a.attention.size(), a.tokens.size());
}

TEST(Decoder, BeamWidthOneEqualsGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(100 + seed);
    const auto dec = CaptionDecoder<float>::random(tiny(5 + seed % 6), rng);
    const auto ann = random_annotations<float>(1, 3, 6, 200 + seed);
    const auto g = dec.greedy_decode(ann, 6);
    const auto beam = dec.beam_decode(ann, 1, 6);
    ASSERT_EQ(beam.size(), 1u);
    EXPECT_EQ(beam[0].tokens, g.tokens) << seed;
    EXPECT_DOUBLE_EQ(beam[0].log_prob, g.log_prob);
  }
}

TEST(Decoder, BeamMatchesExhaustiveSearch) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (std::size_t vocab : {5u, 6u}) {
      for (std::size_t max_len : {1u, 2u, 3u}) {
        Rng rng(300 + seed);
        auto cfg = tiny(vocab);
        const auto dec = CaptionDecoder<double>::random(cfg, rng);
        const auto ann = random_annotations<double>(1, 2, 6, 400 + seed);
        std::vector<TokenId> best, prefix;
        double best_score = -1e300;
        enumerate(vocab, max_len, prefix, [&](const std::vector<TokenId>& seq) {
          const double s = dec.replay_log_prob(ann, seq) / std::pow(static_cast<double>(seq.size()), 0.7);
          if (s > best_score || (s == best_score && seq < best)) {
            best_score = s;
            best = seq;
          }
        });
        const std::size_t admissible = vocab - 3;
        std::size_t width = 1;
        for (std::size_t i = 0; i < max_len; ++i) width *= admissible;
        const auto beams = dec.beam_decode(ann, width, max_len);
        ASSERT_FALSE(beams.empty());
        EXPECT_EQ(beams[0].tokens, best) << "seed " << seed << " V " << vocab << " len " << max_len;
        EXPECT_NEAR(beams[0].score(0.7), best_score, 1e-12);
        if (max_len == 2) EXPECT_EQ(dec.beam_decode(ann, vocab, max_len)[0].tokens, best);
        for (std::size_t i = 1; i < beams.size(); ++i) EXPECT_GE(beams[i - 1].score(0.7), beams[i].score(0.7));
        for (const auto& h : beams) EXPECT_NEAR(dec.replay_log_prob(ann, h.tokens), h.log_prob, 1e-9);
      }
    }
  }
}
