#include <gtest/gtest.h>

#include <filesystem>

#include "histocap/pipeline.hpp"
#include "histocap/trainer.hpp"
#include "support.hpp"

using namespace histocap;
using namespace histocap::testing;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  Vocabulary vocab = tiny_vocab();
  std::vector<Example> data = tiny_examples(6, vocab, 4);
  CaptionModel<float> model = CaptionModel<float>::random(tiny_model_config(vocab.size()), 12);
};

}  // namespace

TEST(Upsample, MatchesHandValues) {
  // g=2 → 4: sample positions clamp to 0, 0.25, 0.75, 1 on each axis.
  const std::vector<double> grid{0, 4, 8, 12};
  const auto up = upsample_bilinear(grid, 2, 4);
  const double w[4] = {0, 0.25, 0.75, 1};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_NEAR(up[y * 4 + x], 4 * w[x] + 8 * w[y], 1e-12);
  EXPECT_EQ(upsample_bilinear(grid, 2, 2), grid);
  for (double v : upsample_bilinear(std::vector<double>(9, 0.25), 3, 17)) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_THROW(upsample_bilinear(grid, 3, 4), ShapeError);
}

TEST(Pipeline, CaptioningIsDeterministicAndGreedyMatchesTrainer) {
  Fixture f;
  const auto a = caption_examples(f.model, f.vocab, f.data, {1, 8});
  const auto b = caption_examples(f.model, f.vocab, f.data, {1, 8}, 2);
  const auto g = greedy_captions(f.model, f.data, 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].hyp.tokens, b[i].hyp.tokens);
    EXPECT_EQ(a[i].alpha, b[i].alpha);
    EXPECT_EQ(a[i].hyp.tokens, g[i].tokens);
    EXPECT_EQ(a[i].alpha.size(), f.data[i].patches.dim(0));
  }
  EXPECT_EQ(evaluate_corpus(f.model, f.vocab, f.data, {3, 8}).to_json().dump(),
            evaluate_corpus(f.model, f.vocab, f.data, {3, 8}).to_json().dump());
  EXPECT_THROW(evaluate_corpus(f.model, f.vocab, {}, {3, 8}), DataError);
}

TEST(Pipeline, ExplainBundleIsConsistent) {
  Fixture f;
  // Enough patches for a top-4 ranking.
  Example ex = f.data[3];
  ASSERT_EQ(ex.patches.dim(0), 4u);
  const auto dir = fs::temp_directory_path() / "histocap_explain";
  fs::remove_all(dir);
  const auto j = explain_slide(f.model, f.vocab, ex, {4, {3, 8}}, dir);

  const auto caption = tokenize(j["caption"].get<std::string>());
  EXPECT_EQ(j["word_count"].get<std::size_t>(), caption.size());
  EXPECT_EQ(j["words"].size(), caption.size());
  std::size_t pgm = 0;
  for (const auto& e : fs::directory_iterator(dir)) pgm += e.path().extension() == ".pgm";
  EXPECT_EQ(pgm, caption.size());
  for (const auto& w : j["words"]) {
    EXPECT_NEAR(w["beta_sum"].get<double>(), 1.0, 1e-5);
    double s = 0;
    for (double b : w["beta"]) s += b;
    EXPECT_NEAR(s, 1.0, 1e-5);
    const auto img = read_pgm(dir / w["heatmap"].get<std::string>());
    EXPECT_EQ(img.width, ex.thumbnail.width);
    EXPECT_EQ(*std::max_element(img.pixels.begin(), img.pixels.end()), 255);
  }

  // Ranking oracle: sort (−α, index) pairs.
  const auto alpha = j["alpha"].get<std::vector<double>>();
  std::vector<std::pair<double, std::size_t>> oracle;
  for (std::size_t i = 0; i < alpha.size(); ++i) oracle.push_back({-alpha[i], i});
  std::sort(oracle.begin(), oracle.end());
  ASSERT_EQ(j["topk"].size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(j["topk"][i]["index"].get<std::size_t>(), oracle[i].second);
    EXPECT_EQ(j["topk"][i]["x"].get<std::size_t>(), ex.entries[oracle[i].second].x);
  }
  EXPECT_THROW(explain_slide(f.model, f.vocab, ex, {5, {3, 8}}, dir), ValueError);
  EXPECT_THROW(find_example(f.data, "nope"), DataError);
}
