#include <gtest/gtest.h>

#include "fvlab/miniature.hpp"
#include "oracle/reference_forward.hpp"

using namespace fvlab;

namespace {
PromptInstance prompt() { return render_demo_prompt(
    TaskDataset{"t", {{"hot", "cold"}, {"big", "small"}, {"fast", "slow"}, {"happy", "sad"}}, {}, {}}, {0, 1, 2}, 3,
    false, 0); }
}  // namespace

TEST(Gateway, ProfileDescribesMiniature) {
  auto g = open_model("miniature");
  const auto& p = g->profile();
  EXPECT_EQ(p.n_layers, 2);
  EXPECT_EQ(p.n_heads_per_layer, 4);
  EXPECT_EQ(p.d_model, 32);
  EXPECT_EQ(p.total_heads(), 8);
  EXPECT_EQ(p.added_vocabulary_ids, (std::set<TokenId>{0, 1, 2}));
}

TEST(Gateway, ScoreSequenceConventions) {
  auto g = open_model("miniature");
  auto ids = g->encode("Give the opposite.", true);
  auto lp = g->score_sequence(ids);
  EXPECT_EQ(lp.size(), ids.size() - 1);
  for (double v : lp) EXPECT_LE(v, 0.0);
  EXPECT_THROW(g->score_sequence(std::vector<TokenId>{5, 6}), PreconditionError);
  EXPECT_THROW(g->score_sequence(std::vector<TokenId>{0, 99999}), VocabularyError);
  // Entry i equals the next-token distribution after the prefix.
  auto next = g->next_token_log_probs(std::span<const TokenId>(ids.data(), 3));
  EXPECT_NEAR(lp[2], next(ids[3]), 1e-12);
}

TEST(Gateway, HeadCaptureMatchesReference) {
  Checkpoint ck = miniature_checkpoint();
  TransformerGateway<double> g(ck);
  auto p = prompt();
  auto cap = g.capture_head_outputs(p);
  auto ref = oracle::reference_forward(ck, g.encode(p.text, true));
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 4; ++h) {
      const auto& v = cap.heads.at({l, h});
      const auto& r = ref.heads[static_cast<std::size_t>(l * 4 + h)];
      for (int i = 0; i < 32; ++i) EXPECT_NEAR(v(i), r[static_cast<std::size_t>(i)], 1e-12);
    }
  for (Eigen::Index i = 0; i < cap.distribution.size(); ++i)
    EXPECT_NEAR(cap.distribution(i), ref.probs[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Gateway, HeadOutputsSumToAttentionOutputMinusBias) {
  Checkpoint ck = miniature_checkpoint();
  TransformerGateway<double> g(ck);
  auto p = prompt();
  auto cap = g.capture_head_outputs(p);
  auto attn = g.attention_outputs(p);
  for (int l = 0; l < 2; ++l) {
    Vector sum = ck.weights.blocks[static_cast<std::size_t>(l)].b_o;
    for (int h = 0; h < 4; ++h) sum += cap.heads.at({l, h});
    EXPECT_LT((sum - attn[static_cast<std::size_t>(l)]).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Gateway, PatchAndAdditionMatchReference) {
  Checkpoint ck = miniature_checkpoint();
  TransformerGateway<double> g(ck);
  auto p = prompt();
  Rng rng(3);
  Vector patch(32), add(32);
  for (int i = 0; i < 32; ++i) {
    patch(i) = rng.normal();
    add(i) = rng.normal();
  }
  InterventionPlan plan;
  plan.head_patches.push_back({{0, 2}, patch});
  plan.additions.push_back({1, add});
  auto dist = g.run_with_interventions(p, plan);
  auto ref = oracle::reference_forward(ck, g.encode(p.text, true), {{0, 2, oracle::to_vec(patch)}},
                                       {{1, oracle::to_vec(add)}});
  for (Eigen::Index i = 0; i < dist.size(); ++i) EXPECT_NEAR(dist(i), ref.probs[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Gateway, PlanValidation) {
  auto g = open_model("miniature");
  InterventionPlan bad_layer;
  bad_layer.additions.push_back({2, Vector::Zero(32)});
  EXPECT_THROW(g->run_with_interventions(prompt(), bad_layer), PlanError);
  InterventionPlan bad_dim;
  bad_dim.additions.push_back({0, Vector::Zero(31)});
  EXPECT_THROW(g->run_with_interventions(prompt(), bad_dim), PlanError);
  InterventionPlan dup;
  dup.head_patches.push_back({{0, 0}, Vector::Zero(32)});
  dup.head_patches.push_back({{0, 0}, Vector::Zero(32)});
  EXPECT_THROW(g->run_with_interventions(prompt(), dup), PlanError);
}

TEST(Gateway, ProbesRequireDebugFlag) {
  auto g = open_model("miniature");
  EXPECT_THROW(g->probe_hidden_state(prompt(), 0, {}), PreconditionError);
  g->set_debug_probes(true);
  EXPECT_EQ(g->probe_hidden_state(prompt(), 0, {}).size(), 32);
}

TEST(Gateway, PromptLongerThanContextThrows) {
  auto g = open_model("miniature");
  std::string text;
  for (int i = 0; i < 600; ++i) text += "the ";
  auto err = [&] {
    try {
      g->run_with_interventions(render_instruction_prompt(text, "x"), {});
    } catch (const LengthError& e) {
      return e.token_count();
    }
    return std::size_t{0};
  }();
  EXPECT_GT(err, 512u);
}

TEST(Gateway, FirstTokenOfTarget) {
  auto g = open_model("miniature");
  auto p = render_zero_shot_prompt("hot", "cold");
  EXPECT_EQ(g->first_token_of("cold", p), g->encode("cold", false)[0]);
  EXPECT_THROW(g->first_token_of("", p), TokenizationError);
}
