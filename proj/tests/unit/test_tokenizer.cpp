#include <gtest/gtest.h>

#include "fvlab/tokenizer.hpp"

using namespace fvlab;

TEST(Tokenizer, RoundTripsArbitraryText) {
  Tokenizer tok({"hello", "world"});
  const std::string text = "hello, world!\n\nQ: caf\xc3\xa9 42\nA: ";
  auto ids = tok.encode(text);
  EXPECT_EQ(tok.decode(ids), text);
}

TEST(Tokenizer, KnownWordsAreSingleTokens) {
  Tokenizer tok({"hello"});
  auto ids = tok.encode("hello hello");
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids[0], ids[2]);
  EXPECT_GE(ids[0], Tokenizer::kFirstWord);
}

TEST(Tokenizer, UnknownWordsFallBackToBytes) {
  Tokenizer tok;
  auto ids = tok.encode("xyz");
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids[0], Tokenizer::kFirstByte + 'x');
}

TEST(Tokenizer, AnswerCueNeverMergesWithTarget) {
  Tokenizer tok({"Paris"});
  auto cue = tok.encode("A: ");
  auto full = tok.encode("A: Paris");
  ASSERT_EQ(full.size(), cue.size() + 1);
  EXPECT_TRUE(std::equal(cue.begin(), cue.end(), full.begin()));
}

TEST(Tokenizer, SpecialsAreAddedVocabularyAndSkippedOnDecode) {
  Tokenizer tok;
  EXPECT_TRUE(tok.is_added_vocabulary(Tokenizer::kBos));
  EXPECT_FALSE(tok.is_added_vocabulary(Tokenizer::kFirstByte));
  std::vector<TokenId> ids{Tokenizer::kBos, Tokenizer::kFirstByte + 'a', Tokenizer::kEos};
  EXPECT_EQ(tok.decode(ids), "a");
}

TEST(Tokenizer, BadIdThrows) {
  Tokenizer tok;
  EXPECT_THROW(tok.check_id(-1), VocabularyError);
  EXPECT_THROW(tok.check_id(static_cast<TokenId>(tok.size())), VocabularyError);
}

TEST(Tokenizer, JsonRoundTrip) {
  Tokenizer tok = Tokenizer::from_texts({"Q: cat\nA: chat\n\n", "dog"});
  Tokenizer back = Tokenizer::from_json(tok.to_json());
  EXPECT_EQ(back.size(), tok.size());
  EXPECT_EQ(back.encode("cat dog chat"), tok.encode("cat dog chat"));
}
