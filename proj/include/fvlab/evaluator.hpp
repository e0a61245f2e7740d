#pragma once

// Evaluation grid: FV interventions in 0-shot and shuffled 10-shot regimes,
// layer sweeps, joint interventions and cross-model steering.

#include <json.hpp>

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/fv.hpp"
#include "fvlab/gateway.hpp"
#include "fvlab/random.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

enum class Regime { zero_shot, shuffled_10_shot };

inline const char* to_string(Regime r) { return r == Regime::zero_shot ? "zero_shot" : "shuffled_10_shot"; }
inline Regime parse_eval_regime(const std::string& s) {
  if (s == "zero_shot") return Regime::zero_shot;
  if (s == "shuffled_10_shot") return Regime::shuffled_10_shot;
  throw FormatError("unknown evaluation regime '" + s + "'");
}

// round(L / 3): 9 of 28 layers, 11 of 32.
inline int default_intervention_layer(int n_layers) { return (2 * n_layers + 3) / 6; }

struct LayerRange {
  int first = 0;
  int last = 0;  // inclusive
};

// [floor(L/4), ceil(L/2)], both ends inclusive.
inline LayerRange joint_layer_range(int n_layers) { return {n_layers / 4, (n_layers + 1) / 2}; }

struct PlannedFv {
  FunctionVector fv;
  int layer = 0;
};

struct EvalSetting {
  Regime regime = Regime::zero_shot;
  std::vector<PlannedFv> fv_plan;
  bool baseline_only = false;
  int shots = kDefaultShots;
  std::string label;  // e.g. "demo_fv", "instruction_fv", "joint", "baseline"
};

struct EvalReport {
  std::string model_id;
  std::string fv_model_id;  // differs from model_id only for cross-model steering
  std::string task_id;
  std::string label;
  Regime regime = Regime::zero_shot;
  std::vector<int> layers;
  double accuracy = 0.0;
  int n_queries = 0;
  int n_correct = 0;
  double sem = 0.0;
  std::uint64_t seed = 0;
  std::optional<std::map<int, double>> per_layer_curve;
};

// Standard error of the mean of `values` (sample standard deviation / sqrt(n)).
inline double standard_error(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

// The evaluation prompt for test query `query_index`. Depends only on the
// task, split, regime and seed, so every setting sees the same prompts.
inline PromptInstance evaluation_prompt(const TaskDataset& task, const SplitSpec& split_spec, std::size_t query_index,
                                        Regime regime, int shots, std::uint64_t seed) {
  const auto& [x, y] = task.pairs.at(query_index);
  if (regime == Regime::zero_shot) return render_zero_shot_prompt(x, y);
  Rng rng(derive_seed(seed, "eval-context", query_index));
  auto context = sample_context(split_spec.train, query_index, shots, rng);
  return render_demo_prompt(task, context, query_index, true, derive_seed(seed, "eval-shuffle", query_index));
}

inline InterventionPlan plan_for(const EvalSetting& setting, const ModelProfile& profile) {
  InterventionPlan plan;
  if (setting.baseline_only) return plan;
  for (const auto& p : setting.fv_plan) {
    if (p.fv.vector.size() != profile.d_model)
      throw CompatibilityError("function vector has " + std::to_string(p.fv.vector.size()) +
                               " dimensions, model " + profile.model_id + " has d_model " +
                               std::to_string(profile.d_model));
    if (p.layer < 0 || p.layer >= profile.n_layers)
      throw PlanError("intervention layer " + std::to_string(p.layer) + " outside [0, " +
                      std::to_string(profile.n_layers) + ")");
    plan.additions.push_back({p.layer, p.fv.vector});
  }
  return plan;
}

namespace detail {

inline EvalReport run_evaluation(const TaskDataset& task, const SplitSpec& split_spec, const EvalSetting& setting,
                                 const ModelGateway& gateway, std::uint64_t seed) {
  if (split_spec.test.empty()) throw InsufficientDataError("task '" + task.task_id + "' has no test queries");
  const auto& profile = gateway.profile();
  const InterventionPlan plan = plan_for(setting, profile);

  EvalReport r;
  r.model_id = profile.model_id;
  r.fv_model_id = setting.fv_plan.empty() || setting.baseline_only ? profile.model_id : setting.fv_plan[0].fv.model_id;
  r.task_id = task.task_id;
  r.label = setting.label.empty() ? (plan.empty() ? "baseline" : "fv") : setting.label;
  r.regime = setting.regime;
  r.seed = seed;
  if (!setting.baseline_only)
    for (const auto& p : setting.fv_plan) r.layers.push_back(p.layer);

  std::vector<double> hits;
  hits.reserve(split_spec.test.size());
  for (std::size_t q : split_spec.test) {
    auto prompt = evaluation_prompt(task, split_spec, q, setting.regime, setting.shots, seed);
    const TokenId y = gateway.first_token_of(prompt.target, prompt);
    const bool ok = ModelGateway::argmax(gateway.run_with_interventions(prompt, plan)) == y;
    hits.push_back(ok ? 1.0 : 0.0);
    r.n_correct += ok ? 1 : 0;
  }
  r.n_queries = static_cast<int>(hits.size());
  r.accuracy = static_cast<double>(r.n_correct) / static_cast<double>(r.n_queries);
  r.sem = standard_error(hits);
  return r;
}

}  // namespace detail

inline EvalReport evaluate(const TaskDataset& task, const SplitSpec& split_spec, const EvalSetting& setting,
                           const ModelGateway& gateway, std::uint64_t seed) {
  if (!setting.baseline_only)
    for (const auto& p : setting.fv_plan)
      if (p.fv.model_id != gateway.profile().model_id)
        throw CompatibilityError("function vector comes from " + p.fv.model_id + ", not " +
                                 gateway.profile().model_id + "; use cross-model steering");
  return detail::run_evaluation(task, split_spec, setting, gateway, seed);
}

inline EvalReport evaluate_joint(const TaskDataset& task, const SplitSpec& split_spec, const FunctionVector& fv_a,
                                 const FunctionVector& fv_b, int layer_a, int layer_b, EvalSetting setting,
                                 const ModelGateway& gateway, std::uint64_t seed) {
  if (fv_a.vector.size() != fv_b.vector.size())
    throw CompatibilityError("joint intervention needs function vectors of equal dimension");
  setting.fv_plan = {{fv_a, layer_a}, {fv_b, layer_b}};
  setting.baseline_only = false;
  if (setting.label.empty()) setting.label = "joint";
  return evaluate(task, split_spec, setting, gateway, seed);
}

// Applies an FV extracted from `source` to the model behind `gateway`.
inline EvalReport steer_cross_model(const FunctionVector& fv, const ModelProfile& source, int layer,
                                    EvalSetting setting, const TaskDataset& task, const SplitSpec& split_spec,
                                    const ModelGateway& gateway, std::uint64_t seed) {
  const auto& target = gateway.profile();
  if (source.d_model != target.d_model || source.n_layers != target.n_layers)
    throw CompatibilityError("cannot steer " + target.model_id + " (d_model " + std::to_string(target.d_model) +
                             ", " + std::to_string(target.n_layers) + " layers) with a vector from " +
                             source.model_id + " (d_model " + std::to_string(source.d_model) + ", " +
                             std::to_string(source.n_layers) + " layers)");
  setting.fv_plan = {{fv, layer}};
  setting.baseline_only = false;
  if (setting.label.empty()) setting.label = "steer";
  return detail::run_evaluation(task, split_spec, setting, gateway, seed);
}

// One evaluation per layer in [range.first, range.last]. Every entry of the
// setting's FV plan is moved to the swept layer (joint sweeps share a layer).
inline EvalReport sweep_layers(const TaskDataset& task, const SplitSpec& split_spec, EvalSetting setting,
                               const ModelGateway& gateway, LayerRange range, std::uint64_t seed,
                               bool cross_model = false) {
  const int L = gateway.profile().n_layers;
  if (range.first < 0 || range.last >= L || range.first > range.last)
    throw PlanError("layer range [" + std::to_string(range.first) + ", " + std::to_string(range.last) +
                    "] outside [0, " + std::to_string(L) + ")");
  std::map<int, double> curve;
  EvalReport best;
  bool have_best = false;
  for (int layer = range.first; layer <= range.last; ++layer) {
    EvalSetting s = setting;
    for (auto& p : s.fv_plan) p.layer = layer;
    EvalReport r = cross_model ? detail::run_evaluation(task, split_spec, s, gateway, seed)
                               : evaluate(task, split_spec, s, gateway, seed);
    curve[layer] = r.accuracy;
    if (!have_best || r.accuracy > best.accuracy) {
      best = r;
      have_best = true;
    }
  }
  best.per_layer_curve = std::move(curve);
  return best;
}

inline int best_layer(const std::map<int, double>& curve) {
  if (curve.empty()) throw PreconditionError("empty layer curve");
  int best = curve.begin()->first;
  for (const auto& [layer, acc] : curve)
    if (acc > curve.at(best)) best = layer;
  return best;
}

struct AccuracySummary {
  std::string model_id;
  std::string label;
  Regime regime = Regime::zero_shot;
  double mean = 0.0;
  double sem = 0.0;
  int n_tasks = 0;
};

// Model-level mean over task accuracies with SEM across tasks.
inline std::vector<AccuracySummary> summarize_across_tasks(const std::vector<EvalReport>& reports) {
  std::map<std::tuple<std::string, std::string, Regime>, std::vector<double>> groups;
  for (const auto& r : reports) groups[{r.model_id, r.label, r.regime}].push_back(r.accuracy);
  std::vector<AccuracySummary> out;
  for (const auto& [key, values] : groups) {
    AccuracySummary s;
    std::tie(s.model_id, s.label, s.regime) = key;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    s.sem = standard_error(values);
    s.n_tasks = static_cast<int>(values.size());
    out.push_back(s);
  }
  return out;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"kind", "eval_report"},       {"model_id", r.model_id}, {"fv_model_id", r.fv_model_id},
                   {"task_id", r.task_id},         {"label", r.label},       {"regime", to_string(r.regime)},
                   {"layers", r.layers},           {"accuracy", r.accuracy}, {"n_queries", r.n_queries},
                   {"n_correct", r.n_correct},     {"sem", r.sem},           {"seed", r.seed}};
  if (r.per_layer_curve) {
    nlohmann::json curve = nlohmann::json::object();
    for (const auto& [l, a] : *r.per_layer_curve) curve[std::to_string(l)] = a;
    j["per_layer_curve"] = std::move(curve);
  }
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.fv_model_id = j.value("fv_model_id", r.model_id);
  r.task_id = j.at("task_id").get<std::string>();
  r.label = j.at("label").get<std::string>();
  r.regime = parse_eval_regime(j.at("regime").get<std::string>());
  r.layers = j.value("layers", std::vector<int>{});
  r.accuracy = j.at("accuracy").get<double>();
  r.n_queries = j.at("n_queries").get<int>();
  r.n_correct = j.value("n_correct", 0);
  r.sem = j.at("sem").get<double>();
  r.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("per_layer_curve")) {
    std::map<int, double> curve;
    for (const auto& [k, v] : j["per_layer_curve"].items()) curve[std::stoi(k)] = v.get<double>();
    r.per_layer_curve = std::move(curve);
  }
  return r;
}

}  // namespace fvlab
