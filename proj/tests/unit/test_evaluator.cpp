#include <gtest/gtest.h>

#include "fvlab/evaluator.hpp"
#include "fvlab/miniature.hpp"
#include "oracle/reference_forward.hpp"

using namespace fvlab;

namespace {

TaskDataset words_task() {
  const auto& w = miniature_words();
  TaskDataset t;
  t.task_id = "shift";
  for (std::size_t i = 0; i + 1 < 41; ++i) t.pairs.emplace_back(w[i], w[i + 1]);
  return t;
}

FunctionVector fv_of(const Vector& v, const std::string& model_id) {
  FunctionVector fv;
  fv.vector = v;
  fv.model_id = model_id;
  fv.task_id = "shift";
  return fv;
}

}  // namespace

TEST(InterventionLayer, ThirdOfDepthRounded) {
  EXPECT_EQ(default_intervention_layer(28), 9);
  EXPECT_EQ(default_intervention_layer(32), 11);
  // Independent rounding rule: nearest integer to L/3, halves up.
  for (int L = 1; L <= 100; ++L) EXPECT_EQ(default_intervention_layer(L), static_cast<int>(std::floor(L / 3.0 + 0.5)));
}

TEST(InterventionLayer, JointRangeIsQuarterToHalf) {
  for (int L = 1; L <= 64; ++L) {
    auto r = joint_layer_range(L);
    EXPECT_EQ(r.first, static_cast<int>(std::floor(L / 4.0)));
    EXPECT_EQ(r.last, static_cast<int>(std::ceil(L / 2.0)));
  }
}

TEST(Evaluation, PromptsIndependentOfSettingAndFromTrainSplit) {
  auto task = words_task();
  auto sp = split(task, 4);
  for (std::size_t q : sp.test) {
    auto a = evaluation_prompt(task, sp, q, Regime::shuffled_10_shot, 10, 9);
    auto b = evaluation_prompt(task, sp, q, Regime::shuffled_10_shot, 10, 9);
    EXPECT_EQ(a.text, b.text);
    EXPECT_EQ(a.context_indices.size(), 10u);
    for (auto c : a.context_indices) EXPECT_TRUE(std::binary_search(sp.train.begin(), sp.train.end(), c));
    auto z = evaluation_prompt(task, sp, q, Regime::zero_shot, 10, 9);
    EXPECT_EQ(z.text, "Q: " + task.pairs[q].first + "\nA: ");
  }
}

TEST(Evaluation, AccuracyMatchesReferenceCount) {
  Checkpoint ck = miniature_checkpoint();
  TransformerGateway<double> g(ck);
  auto task = words_task();
  auto sp = split(task, 1);
  Vector v = Vector::Zero(32);
  Rng rng(2);
  for (int i = 0; i < 32; ++i) v(i) = 2.0 * rng.normal();
  EvalSetting s;
  s.regime = Regime::zero_shot;
  s.fv_plan = {{fv_of(v, "miniature"), 1}};
  s.label = "demo_fv";
  auto r = evaluate(task, sp, s, g, 3);
  int correct = 0;
  for (std::size_t q : sp.test) {
    auto p = evaluation_prompt(task, sp, q, Regime::zero_shot, 10, 3);
    auto ref = oracle::reference_forward(ck, g.encode(p.text, true), {}, {{1, oracle::to_vec(v)}});
    auto best = std::max_element(ref.probs.begin(), ref.probs.end()) - ref.probs.begin();
    correct += best == g.first_token_of(p.target, p) ? 1 : 0;
  }
  EXPECT_EQ(r.n_correct, correct);
  EXPECT_EQ(r.n_queries, static_cast<int>(sp.test.size()));
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(correct) / static_cast<double>(sp.test.size()));
  EXPECT_EQ(r.layers, std::vector<int>{1});
  EXPECT_EQ(r.label, "demo_fv");
}

TEST(Evaluation, ZeroVectorReproducesBaseline) {
  auto g = open_model("miniature");
  auto task = words_task();
  auto sp = split(task, 1);
  for (Regime regime : {Regime::zero_shot, Regime::shuffled_10_shot}) {
    EvalSetting base;
    base.regime = regime;
    base.baseline_only = true;
    EvalSetting zero = base;
    zero.baseline_only = false;
    zero.fv_plan = {{fv_of(Vector::Zero(32), "miniature"), 0}};
    auto a = evaluate(task, sp, base, *g, 5);
    auto b = evaluate(task, sp, zero, *g, 5);
    EXPECT_EQ(a.n_correct, b.n_correct);
    for (std::size_t q : sp.test) {
      auto p = evaluation_prompt(task, sp, q, regime, 10, 5);
      InterventionPlan plan;
      plan.additions.push_back({0, Vector::Zero(32)});
      EXPECT_LE((g->run_with_interventions(p, plan) - g->run_with_interventions(p, {})).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Evaluation, JointEqualsSummedSingleAdditionAtOneLayer) {
  Checkpoint ck = miniature_checkpoint();
  TransformerGateway<double> g(ck);
  auto task = words_task();
  auto sp = split(task, 2);
  Rng rng(8);
  Vector a(32), b(32);
  for (int i = 0; i < 32; ++i) {
    a(i) = rng.normal();
    b(i) = rng.normal();
  }
  EvalSetting s;
  s.regime = Regime::zero_shot;
  auto joint = evaluate_joint(task, sp, fv_of(a, "miniature"), fv_of(b, "miniature"), 1, 1, s, g, 1);
  EvalSetting single = s;
  single.fv_plan = {{fv_of(a + b, "miniature"), 1}};
  auto summed = evaluate(task, sp, single, g, 1);
  EXPECT_EQ(joint.n_correct, summed.n_correct);
  EXPECT_EQ(joint.layers, (std::vector<int>{1, 1}));
  EXPECT_EQ(joint.label, "joint");
}

TEST(Evaluation, CompatibilityChecks) {
  auto g = open_model("miniature");
  auto task = words_task();
  auto sp = split(task, 2);
  EvalSetting s;
  s.fv_plan = {{fv_of(Vector::Zero(16), "miniature"), 0}};
  EXPECT_THROW(evaluate(task, sp, s, *g, 1), CompatibilityError);
  s.fv_plan = {{fv_of(Vector::Zero(32), "miniature:5"), 0}};
  EXPECT_THROW(evaluate(task, sp, s, *g, 1), CompatibilityError);
  s.fv_plan = {{fv_of(Vector::Zero(32), "miniature"), 2}};
  EXPECT_THROW(evaluate(task, sp, s, *g, 1), PlanError);

  ModelProfile other = g->profile();
  other.n_layers = 3;
  EvalSetting cross;
  EXPECT_THROW(steer_cross_model(fv_of(Vector::Zero(32), "x"), other, 0, cross, task, sp, *g, 1), CompatibilityError);
  other = g->profile();
  other.model_id = "miniature:5";
  auto r = steer_cross_model(fv_of(Vector::Zero(32), "miniature:5"), other, 0, cross, task, sp, *g, 1);
  EXPECT_EQ(r.fv_model_id, "miniature:5");
  EXPECT_EQ(r.model_id, "miniature");
}

TEST(Evaluation, SweepCoversRangeAndReportsBest) {
  auto g = open_model("miniature");
  auto task = words_task();
  auto sp = split(task, 3);
  Vector v = Vector::Constant(32, 0.5);
  EvalSetting s;
  s.fv_plan = {{fv_of(v, "miniature"), 0}};
  auto best = sweep_layers(task, sp, s, *g, {0, 1}, 4);
  ASSERT_TRUE(best.per_layer_curve.has_value());
  EXPECT_EQ(best.per_layer_curve->size(), 2u);
  EXPECT_EQ(best.layers.front(), best_layer(*best.per_layer_curve));
  for (const auto& [layer, acc] : *best.per_layer_curve) EXPECT_LE(acc, best.accuracy);
  EXPECT_THROW(sweep_layers(task, sp, s, *g, {0, 2}, 4), PlanError);
}

TEST(Summary, MeanAndSemAcrossTasks) {
  std::vector<EvalReport> rs(3);
  const double acc[] = {0.2, 0.4, 0.9};
  for (int i = 0; i < 3; ++i) {
    rs[i].model_id = "m";
    rs[i].label = "baseline";
    rs[i].task_id = "t" + std::to_string(i);
    rs[i].accuracy = acc[i];
  }
  auto s = summarize_across_tasks(rs);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].mean, 0.5, 1e-15);
  // Sample SD of {0.2, 0.4, 0.9} is sqrt(0.13); SEM divides by sqrt(3).
  EXPECT_NEAR(s[0].sem, std::sqrt(0.13 / 3.0), 1e-12);
  EXPECT_EQ(s[0].n_tasks, 3);
}

TEST(EvalJson, RoundTrips) {
  EvalReport r;
  r.model_id = "m";
  r.fv_model_id = "n";
  r.task_id = "t";
  r.label = "joint";
  r.regime = Regime::shuffled_10_shot;
  r.layers = {2, 3};
  r.accuracy = 0.25;
  r.n_queries = 4;
  r.n_correct = 1;
  r.sem = 0.25;
  r.seed = 99;
  r.per_layer_curve = std::map<int, double>{{0, 0.1}, {1, 0.25}};
  auto r2 = eval_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(to_json(r2), to_json(r));
}
