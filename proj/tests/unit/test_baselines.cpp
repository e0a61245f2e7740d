#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fvlab/baselines.hpp"
#include "fvlab/miniature.hpp"
#include "oracle/reference_forward.hpp"

using namespace fvlab;

namespace {

// Exhaustive-scan oracle: for each candidate width k = 0, 1, ... count the
// entries directly; then repeatedly take the nearest remaining log-prob.
std::pair<std::vector<std::size_t>, int> exhaustive_match(const std::vector<MatchCandidate>& pool, int length,
                                                          double lp, std::size_t count, std::size_t min_candidates) {
  int k = 0;
  for (;; ++k) {
    std::size_t n = 0;
    for (const auto& c : pool) n += std::abs(c.length - length) <= k ? 1 : 0;
    if (n >= min_candidates) break;
  }
  std::vector<bool> taken(pool.size(), false);
  std::vector<std::size_t> chosen;
  for (std::size_t round = 0; round < count; ++round) {
    std::size_t best = pool.size();
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (taken[i] || std::abs(pool[i].length - length) > k) continue;
      if (best == pool.size() ||
          std::abs(pool[i].log_probability - lp) < std::abs(pool[best].log_probability - lp))
        best = i;
    }
    if (best == pool.size()) break;
    taken[best] = true;
    chosen.push_back(best);
  }
  return {chosen, k};
}

std::vector<double> log_softmax(const std::vector<double>& probs) {
  std::vector<double> out;
  for (double p : probs) out.push_back(std::log(p));
  return out;
}

}  // namespace

TEST(BandStep, MinimalKCoversGap) {
  EXPECT_EQ(minimal_band_step(0.0, 0.1, 0.1), 0);
  EXPECT_EQ(minimal_band_step(0.1, 0.1, 0.1), 0);
  EXPECT_EQ(minimal_band_step(0.1000001, 0.1, 0.1), 1);
  EXPECT_EQ(minimal_band_step(0.35, 0.1, 0.1), 3);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double gap = 5.0 * rng.uniform();
    const int k = minimal_band_step(gap, 0.1, 0.1);
    EXPECT_LE(gap, 0.1 + k * 0.1);
    if (k > 0) EXPECT_GT(gap, 0.1 + (k - 1) * 0.1);
  }
}

TEST(Equiprobable, LengthMatchAndMinimalBandUnderReference) {
  Checkpoint ck = miniature_checkpoint();
  TransformerGateway<double> g(ck);
  const std::vector<std::string> instructions = {"Give the opposite of the word.", "Write the capital city",
                                                 "Translate into French please", "Answer with one word"};
  const auto& masked = g.profile().added_vocabulary_ids;
  for (std::size_t n = 0; n < instructions.size(); ++n) {
    const auto& ins = instructions[n];
    auto b = sample_equiprobable(ins, "s", g, derive_seed(1, "eq", n));
    const auto src = g.encode(ins, true);
    ASSERT_EQ(b.tokens.size() + 1, src.size());
    EXPECT_EQ(b.length_tokens, static_cast<int>(src.size()) - 1);
    EXPECT_NE(b.text, ins);
    std::vector<TokenId> seq{g.bos()};
    std::vector<TokenId> src_prefix{g.bos()};
    double total = 0.0;
    for (std::size_t l = 0; l < b.tokens.size(); ++l) {
      const auto ref_lp = log_softmax(oracle::reference_forward(ck, seq).probs);
      const auto src_lp = log_softmax(oracle::reference_forward(ck, src_prefix).probs);
      const double target = src_lp[static_cast<std::size_t>(src[l + 1])];
      double min_gap = 1e300;
      for (std::size_t t = 0; t < ref_lp.size(); ++t)
        if (!masked.contains(static_cast<TokenId>(t))) min_gap = std::min(min_gap, std::abs(ref_lp[t] - target));
      int k = 0;
      while (min_gap > 0.1 + 0.1 * k + 1e-9) ++k;
      const double gap = std::abs(ref_lp[static_cast<std::size_t>(b.tokens[l])] - target);
      EXPECT_LE(gap, 0.1 + 0.1 * k + 1e-9);
      EXPECT_FALSE(masked.contains(b.tokens[l]));
      total += ref_lp[static_cast<std::size_t>(b.tokens[l])];
      seq.push_back(b.tokens[l]);
      src_prefix.push_back(src[l + 1]);
    }
    EXPECT_NEAR(total, b.log_probability, 1e-9);
  }
}

TEST(Equiprobable, PromptKeepsSampledTokensThatDoNotReencode) {
  auto g = open_model("miniature");
  BaselineSpec b;
  b.tokens = {g->encode("hot", false)[0], g->encode("cold", false)[0]};
  b.text = g->decode(b.tokens);
  b.length_tokens = 2;
  ASSERT_EQ(b.text, "hotcold");
  ASSERT_NE(g->encode(b.text, false), b.tokens);

  auto p = render_baseline_prompt(b, "up", "down", "s");
  EXPECT_EQ(p.text, "hotcold\nQ: up\nA: ");
  std::vector<TokenId> expected{g->bos(), b.tokens[0], b.tokens[1]};
  for (TokenId t : g->encode("\nQ: up\nA: ", false)) expected.push_back(t);
  EXPECT_EQ(g->encode_prompt(p), expected);

  p.prefix_length = 3;
  EXPECT_THROW(g->encode_prompt(p), PreconditionError);
}

TEST(Equiprobable, DeterministicPerSeed) {
  auto g = open_model("miniature");
  auto a = sample_equiprobable("Give the opposite word", "s", *g, 5);
  auto b = sample_equiprobable("Give the opposite word", "s", *g, 5);
  auto c = sample_equiprobable("Give the opposite word", "s", *g, 6);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.length_tokens, c.length_tokens);
}

TEST(Matching, AgreesWithExhaustiveScan) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<MatchCandidate> pool;
    const std::size_t n = 120 + rng.below(200);
    for (std::size_t i = 0; i < n; ++i)
      // Quantized log-probs create ties on purpose.
      pool.push_back({1 + static_cast<int>(rng.below(30)), -0.5 * static_cast<double>(rng.below(80))});
    const int length = 1 + static_cast<int>(rng.below(30));
    const double lp = -40.0 * rng.uniform();
    auto r = match_length_then_log_prob(pool, length, lp, 5, 100, [](std::size_t) { return true; });
    auto [chosen, k] = exhaustive_match(pool, length, lp, 5, 100);
    EXPECT_EQ(r.widening, k);
    EXPECT_GE(r.candidate_count, 100u);
    EXPECT_EQ(r.chosen, chosen);
    std::set<std::size_t> uniq(r.chosen.begin(), r.chosen.end());
    EXPECT_EQ(uniq.size(), r.chosen.size());
  }
}

TEST(Matching, InsufficientPoolThrows) {
  std::vector<MatchCandidate> pool(50, {3, -1.0});
  EXPECT_THROW(match_length_then_log_prob(pool, 3, -1.0, 5, 100, [](std::size_t) { return true; }),
               InsufficientPoolError);
}

TEST(CorpusCache, PrefixesScoredAndRoundTrip) {
  auto g = open_model("miniature");
  std::vector<std::string> corpus = {"the river runs near the old house", "a small dog walked home"};
  auto cache = build_corpus_cache(*g, corpus, 100, 64, "unit");
  EXPECT_EQ(cache.model_id, "miniature");
  // Only whitespace-terminated prefixes: the last word of an entry never ends one.
  ASSERT_EQ(cache.entries.size(), 6u + 4u);
  EXPECT_EQ(cache.entries[0].text, "the");
  EXPECT_EQ(cache.entries[5].text, "the river runs near the old");
  EXPECT_EQ(cache.entries[6].text, "a");
  for (const auto& e : cache.entries) EXPECT_NEAR(e.log_probability, g->sequence_log_prob(e.text), 1e-9);

  auto path = (std::filesystem::temp_directory_path() / "fvlab_cache_test.jsonl").string();
  save_corpus_cache(cache, path);
  auto back = load_corpus_cache(path, "miniature");
  ASSERT_EQ(back.entries.size(), cache.entries.size());
  EXPECT_EQ(back.entries[3].tokens, cache.entries[3].tokens);
  EXPECT_EQ(back.corpus_hash, cache.corpus_hash);
  EXPECT_THROW(load_corpus_cache(path, "miniature:3"), CacheMismatchError);
  std::filesystem::remove(path);
}

TEST(CorpusCache, TargetAndTokenLimit) {
  auto g = open_model("miniature");
  std::vector<std::string> corpus = {"one two three four five six", "seven eight nine"};
  auto cache = build_corpus_cache(*g, corpus, 4, 3);
  for (const auto& e : cache.entries) EXPECT_LE(e.tokens.size(), 3u);
  EXPECT_LE(cache.entries.size(), 3u + 3u);
}

TEST(RealText, PicksNearestMatchesFromCache) {
  auto g = open_model("miniature");
  std::vector<std::string> corpus;
  const auto& w = miniature_words();
  for (std::size_t i = 0; i + 6 < w.size(); ++i)
    corpus.push_back(w[i] + " " + w[i + 2] + " " + w[i + 4] + " " + w[i + 6]);
  auto cache = build_corpus_cache(*g, corpus, 10000, 64);
  ASSERT_GE(cache.entries.size(), 100u);
  const std::string ins = "Give the opposite";
  auto picks = sample_real_text(ins, "s", *g, cache, 5, 100);
  ASSERT_EQ(picks.size(), 5u);
  std::vector<MatchCandidate> pool;
  for (const auto& e : cache.entries) pool.push_back({e.length(), e.log_probability});
  auto [chosen, k] = exhaustive_match(pool, static_cast<int>(g->token_length(ins)), g->sequence_log_prob(ins), 5, 100);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(picks[i].text, cache.entries[chosen[i]].text);
  EXPECT_EQ(picks[0].widening, k);

  auto other = cache;
  other.model_id = "elsewhere";
  EXPECT_THROW(sample_real_text(ins, "s", *g, other), CacheMismatchError);
}

TEST(OtherTask, NeverDrawsFromOwnTask) {
  auto g = open_model("miniature");
  std::vector<InstructionSet> sets;
  const auto& w = miniature_words();
  for (int t = 0; t < 3; ++t) {
    InstructionSet s;
    s.task_id = "task" + std::to_string(t);
    for (int i = 0; i < 60; ++i)
      s.instructions.push_back({s.task_id + "/" + std::to_string(i),
                                w[static_cast<std::size_t>(i + t) % w.size()] + " " + w[static_cast<std::size_t>(2 * i + 1) % w.size()]});
    sets.push_back(s);
  }
  auto picks = sample_other_task(sets[0].instructions[0].text, "task0/0", "task0", sets, *g, 5, 100);
  ASSERT_EQ(picks.size(), 5u);
  for (const auto& p : picks) EXPECT_NE(p.text.find(' '), std::string::npos);
  std::set<std::string> own;
  for (const auto& i : sets[0].instructions) own.insert(i.text);
  for (const auto& p : picks) {
    bool from_other = false;
    for (int t = 1; t < 3; ++t)
      for (const auto& i : sets[static_cast<std::size_t>(t)].instructions) from_other |= i.text == p.text;
    EXPECT_TRUE(from_other);
  }
  EXPECT_THROW(sample_other_task("x y", "s", "task0", sets, *g, 5, 121), InsufficientPoolError);
}
