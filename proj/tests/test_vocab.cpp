#include <gtest/gtest.h>

#include <filesystem>

#include "histocap/vocab.hpp"

using namespace histocap;

TEST(Vocab, BuildCountsAndOrders) {
  const auto v = Vocabulary::build({"a b", "a"}, 1);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("a"), 4u);  // most frequent first
  EXPECT_EQ(v.id("b"), 5u);

  const auto v2 = Vocabulary::build({"a b", "a"}, 2);
  EXPECT_EQ(v2.size(), 5u);
  EXPECT_EQ(v2.id("b"), kUnkId);
}

TEST(Vocab, TiesBreakLexicographically) {
  const auto v = Vocabulary::build({"zeta alpha mid", "mid"}, 1);
  EXPECT_EQ(v.tokens()[4], "mid");
  EXPECT_EQ(v.tokens()[5], "alpha");
  EXPECT_EQ(v.tokens()[6], "zeta");
}

TEST(Vocab, EmptyCorpusIsAnError) { EXPECT_THROW(Vocabulary::build({}, 1), ValueError); }

TEST(Vocab, EncodeDecode) {
  const auto v = Vocabulary::build({"Adipose tissue, autolyzed.", "mucosa: normal; clean"}, 1);
  EXPECT_EQ(v.encode("").ids, (std::vector<TokenId>{kStartId, kEndId}));
  const std::string text = "adipose tissue, autolyzed.";
  EXPECT_EQ(v.decode(v.encode(text).ids), text);
  EXPECT_EQ(v.decode(v.encode("ADIPOSE   Tissue").ids), "adipose tissue");
  EXPECT_EQ(v.decode(v.encode("adipose stroma").ids), "adipose <unk>");
}

TEST(Vocab, TokenizerSplitsPunctuation) {
  EXPECT_EQ(tokenize("Fat,  with: x;y."),
            (std::vector<std::string>{"fat", ",", "with", ":", "x", ";", "y", "."}));
}

TEST(Vocab, SaveLoadKeepsIds) {
  const auto v = Vocabulary::build({"c b a", "a b", "a"}, 1);
  const auto path = std::filesystem::temp_directory_path() / "histocap_vocab_test.txt";
  v.save(path);
  const auto back = Vocabulary::load(path);
  EXPECT_EQ(back, v);
  for (const auto& t : v.tokens()) EXPECT_EQ(back.id(t), v.id(t));
}

TEST(Vocab, EncodedCaptionInvariants) {
  const auto v = Vocabulary::build({"one two three"}, 1);
  const auto e = v.encode("three two unknown one");
  EXPECT_EQ(e.ids.front(), kStartId);
  EXPECT_EQ(e.ids.back(), kEndId);
  EXPECT_EQ(std::count(e.ids.begin(), e.ids.end(), kStartId), 1);
  EXPECT_EQ(std::count(e.ids.begin(), e.ids.end(), kEndId), 1);
  for (auto id : e.ids) EXPECT_LT(id, v.size());
}
