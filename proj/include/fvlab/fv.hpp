#pragma once

// Mean task-conditioned head activations, causal indirect effects (CIE),
// head ranking and function-vector assembly.
//
//   mean_h  = (1/|P|) sum_{p in P} a_h(p)                     over successful prompts P
//   CIE_h   = f(p~ | a_h := mean_h)[y] - f(p~)[y]             probability of y's first token
//   FV      = sum_{h in A} mean_h

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/gateway.hpp"
#include "fvlab/hash.hpp"
#include "fvlab/heads.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

enum class ActivationForm { demo, instruction_short, instruction_long };
enum class CieCondition { shuffled_demo, equiprobable, real_text, other_task };

inline const char* to_string(ActivationForm f) {
  switch (f) {
    case ActivationForm::demo: return "demo";
    case ActivationForm::instruction_short: return "instruction_short";
    case ActivationForm::instruction_long: return "instruction_long";
  }
  return "?";
}
inline ActivationForm parse_activation_form(const std::string& s) {
  if (s == "demo") return ActivationForm::demo;
  if (s == "instruction_short") return ActivationForm::instruction_short;
  if (s == "instruction_long") return ActivationForm::instruction_long;
  throw FormatError("unknown activation form '" + s + "'");
}
inline const char* to_string(CieCondition c) {
  switch (c) {
    case CieCondition::shuffled_demo: return "shuffled_demo";
    case CieCondition::equiprobable: return "equiprobable";
    case CieCondition::real_text: return "real_text";
    case CieCondition::other_task: return "other_task";
  }
  return "?";
}
inline CieCondition parse_cie_condition(const std::string& s) {
  if (s == "shuffled_demo") return CieCondition::shuffled_demo;
  if (s == "equiprobable") return CieCondition::equiprobable;
  if (s == "real_text") return CieCondition::real_text;
  if (s == "other_task") return CieCondition::other_task;
  throw FormatError("unknown CIE condition '" + s + "'");
}
inline bool is_instruction_form(ActivationForm f) { return f != ActivationForm::demo; }

inline constexpr int kActivationPrompts = 100;
inline constexpr int kCiePrompts = 25;
inline constexpr int kHeadSetSize = 20;

struct ActivationSummary {
  std::string task_id;
  std::string model_id;
  ActivationForm form = ActivationForm::demo;
  std::map<HeadId, Vector> means;
  int prompt_count = 0;
  bool eligible = true;
  std::uint64_t seed = 0;
  std::string prompt_hash;
};

struct CieTensor {
  std::string task_id;
  std::string model_id;
  ActivationForm form = ActivationForm::demo;
  CieCondition condition = CieCondition::shuffled_demo;
  std::map<HeadId, double> scores;
  int prompts_used = 0;
  bool eligible = true;
  std::uint64_t seed = 0;
  std::string prompt_hash;
};

enum class HeadSetProvenance { demo, instruction, shared_analysis, least_important, bottom, custom };

inline const char* to_string(HeadSetProvenance p) {
  switch (p) {
    case HeadSetProvenance::demo: return "demo";
    case HeadSetProvenance::instruction: return "instruction";
    case HeadSetProvenance::shared_analysis: return "shared_analysis";
    case HeadSetProvenance::least_important: return "least_important";
    case HeadSetProvenance::bottom: return "bottom";
    case HeadSetProvenance::custom: return "custom";
  }
  return "?";
}
inline HeadSetProvenance parse_head_set_provenance(const std::string& s) {
  for (auto p : {HeadSetProvenance::demo, HeadSetProvenance::instruction, HeadSetProvenance::shared_analysis,
                 HeadSetProvenance::least_important, HeadSetProvenance::bottom, HeadSetProvenance::custom})
    if (s == to_string(p)) return p;
  throw FormatError("unknown head-set provenance '" + s + "'");
}

struct HeadSet {
  std::vector<HeadId> heads;
  HeadSetProvenance provenance = HeadSetProvenance::custom;

  std::size_t size() const { return heads.size(); }
  bool contains(const HeadId& h) const { return std::find(heads.begin(), heads.end(), h) != heads.end(); }
};

struct FunctionVector {
  Vector vector;
  HeadSet head_set;
  ActivationForm activation_source = ActivationForm::demo;
  std::string task_id;
  std::string model_id;
};

// ---------------------------------------------------------------------------

// Content hash of a prompt set (texts and targets, in order).
inline std::string prompt_set_hash(const std::vector<PromptInstance>& prompts) {
  std::string blob;
  for (const auto& p : prompts) {
    blob += p.text;
    blob += '\x1f';
    blob += p.target;
    blob += '\x1e';
  }
  return git_blob_hash(blob);
}

// Per-head arithmetic mean of final-token head outputs. Every prompt must be
// one the model solves (argmax == first token of the target).
inline ActivationSummary compute_mean_activations(const std::vector<PromptInstance>& prompts,
                                                  const ModelGateway& gateway, const std::string& task_id,
                                                  ActivationForm form) {
  if (prompts.empty()) throw TaskIneligibleError("task '" + task_id + "': no successful prompts to average");
  const auto& profile = gateway.profile();
  ActivationSummary s;
  s.task_id = task_id;
  s.model_id = profile.model_id;
  s.form = form;
  for (const auto& h : profile.all_heads()) s.means.emplace(h, Vector::Zero(profile.d_model));
  for (const auto& p : prompts) {
    HeadCapture cap = gateway.capture_head_outputs(p);
    if (ModelGateway::argmax(cap.distribution) != gateway.first_token_of(p.target, p))
      throw PreconditionError("prompt for query '" + p.query_input + "' is not solved by the model");
    for (auto& [head, sum] : s.means) sum += cap.heads.at(head);
  }
  for (auto& [head, sum] : s.means) sum /= static_cast<double>(prompts.size());
  s.prompt_count = static_cast<int>(prompts.size());
  s.prompt_hash = prompt_set_hash(prompts);
  return s;
}

inline double compute_cie(const HeadId& head, const PromptInstance& baseline_prompt, const ActivationSummary& summary,
                          const ModelGateway& gateway) {
  auto it = summary.means.find(head);
  if (it == summary.means.end()) throw CompletenessError("no mean activation for " + head.str());
  const TokenId y = gateway.first_token_of(baseline_prompt.target, baseline_prompt);
  const Vector clean = gateway.run_with_interventions(baseline_prompt, {});
  InterventionPlan plan;
  plan.head_patches.push_back({head, it->second});
  const Vector patched = gateway.run_with_interventions(baseline_prompt, plan);
  return patched(y) - clean(y);
}

// CIE of every head on one baseline prompt (one clean pass shared by all heads).
inline std::map<HeadId, double> compute_cie_all_heads(const PromptInstance& baseline_prompt,
                                                       const ActivationSummary& summary,
                                                       const ModelGateway& gateway) {
  const TokenId y = gateway.first_token_of(baseline_prompt.target, baseline_prompt);
  const double clean = gateway.run_with_interventions(baseline_prompt, {})(y);
  std::map<HeadId, double> out;
  for (const auto& h : gateway.profile().all_heads()) {
    auto it = summary.means.find(h);
    if (it == summary.means.end()) throw CompletenessError("no mean activation for " + h.str());
    InterventionPlan plan;
    plan.head_patches.push_back({h, it->second});
    out.emplace(h, gateway.run_with_interventions(baseline_prompt, plan)(y) - clean);
  }
  return out;
}

inline CieTensor compute_cie_tensor(const std::vector<PromptInstance>& baseline_prompts,
                                    const ActivationSummary& summary, const ModelGateway& gateway,
                                    CieCondition condition) {
  if (baseline_prompts.empty()) throw PreconditionError("no baseline prompts for CIE");
  CieTensor t;
  t.task_id = summary.task_id;
  t.model_id = summary.model_id;
  t.form = summary.form;
  t.condition = condition;
  for (const auto& h : gateway.profile().all_heads()) t.scores.emplace(h, 0.0);
  for (const auto& p : baseline_prompts)
    for (const auto& [h, v] : compute_cie_all_heads(p, summary, gateway)) t.scores[h] += v;
  for (auto& [h, v] : t.scores) v /= static_cast<double>(baseline_prompts.size());
  t.prompts_used = static_cast<int>(baseline_prompts.size());
  t.prompt_hash = prompt_set_hash(baseline_prompts);
  return t;
}

// Mean CIE per head over eligible tasks, each task weighted equally. For the
// instruction family a task's value is the flat mean of its condition cells
// (2 lengths x 3 baselines); the demo family has one cell per task.
inline std::map<HeadId, double> aggregate_cie(const std::vector<CieTensor>& records, bool instruction_family) {
  std::map<std::string, std::vector<const CieTensor*>> by_task;
  for (const auto& r : records) {
    if (is_instruction_form(r.form) != instruction_family || !r.eligible) continue;
    by_task[r.task_id].push_back(&r);
  }
  if (by_task.empty()) throw AggregationError("no eligible tasks to aggregate");
  std::map<HeadId, double> total;
  for (const auto& [task, cells] : by_task) {
    std::map<HeadId, double> task_mean;
    for (const auto* c : cells)
      for (const auto& [h, v] : c->scores) task_mean[h] += v;
    for (auto& [h, v] : task_mean) total[h] += v / static_cast<double>(cells.size());
  }
  for (auto& [h, v] : total) v /= static_cast<double>(by_task.size());
  return total;
}

enum class HeadSelectionMode { top, least_important_abs, bottom };

// top: largest scores; least_important_abs: smallest |score|; bottom: most
// negative (smallest) scores. Ties go to the lower (layer, head).
inline HeadSet select_heads(const std::map<HeadId, double>& aggregate, int k, HeadSelectionMode mode) {
  if (k < 0 || static_cast<std::size_t>(k) > aggregate.size())
    throw BoundsError("cannot select " + std::to_string(k) + " heads out of " + std::to_string(aggregate.size()));
  std::vector<std::pair<HeadId, double>> items(aggregate.begin(), aggregate.end());
  auto key = [mode](double v) {
    switch (mode) {
      case HeadSelectionMode::top: return -v;
      case HeadSelectionMode::least_important_abs: return std::abs(v);
      case HeadSelectionMode::bottom: return v;
    }
    return v;
  };
  std::stable_sort(items.begin(), items.end(), [&](const auto& a, const auto& b) {
    const double ka = key(a.second), kb = key(b.second);
    if (ka != kb) return ka < kb;
    return a.first < b.first;
  });
  HeadSet s;
  s.provenance = mode == HeadSelectionMode::top               ? HeadSetProvenance::custom
                 : mode == HeadSelectionMode::least_important_abs ? HeadSetProvenance::least_important
                                                                  : HeadSetProvenance::bottom;
  for (int i = 0; i < k; ++i) s.heads.push_back(items[static_cast<std::size_t>(i)].first);
  return s;
}

// Sum of the head-set means. Pairing a head set from one presentation with a
// summary from the other gives the heterogeneous ("incongruent") vectors.
inline FunctionVector build_fv(const HeadSet& head_set, const ActivationSummary& summary, int d_model) {
  FunctionVector fv;
  fv.vector = Vector::Zero(d_model);
  for (const auto& h : head_set.heads) {
    auto it = summary.means.find(h);
    if (it == summary.means.end()) throw CompletenessError("summary lacks a mean for " + h.str());
    if (it->second.size() != d_model) throw CompatibilityError("mean for " + h.str() + " has the wrong dimension");
    fv.vector += it->second;
  }
  fv.head_set = head_set;
  fv.activation_source = summary.form;
  fv.task_id = summary.task_id;
  fv.model_id = summary.model_id;
  return fv;
}

inline FunctionVector build_fv(const HeadSet& head_set, const ActivationSummary& summary) {
  if (summary.means.empty()) {
    if (!head_set.heads.empty()) throw CompletenessError("summary has no head means");
    throw CompletenessError("cannot infer d_model from an empty summary");
  }
  return build_fv(head_set, summary, static_cast<int>(summary.means.begin()->second.size()));
}

// Eligibility threshold: 1/|labels| for classification, a fixed floor otherwise.
inline constexpr double kOpenGenerationChance = 0.005;

inline double chance_level(const TaskDataset& task, double open_generation_floor = kOpenGenerationChance) {
  if (task.category == TaskCategory::classification && task.label_set && !task.label_set->empty())
    return 1.0 / static_cast<double>(task.label_set->size());
  return open_generation_floor;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
inline Vector vector_from_json(const nlohmann::json& j) {
  auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline nlohmann::json to_json(const ActivationSummary& s) {
  nlohmann::json means = nlohmann::json::object();
  for (const auto& [h, v] : s.means) means[h.str()] = vector_to_json(v);
  return {{"kind", "activation_summary"}, {"task_id", s.task_id},         {"model_id", s.model_id},
          {"form", to_string(s.form)},    {"prompt_count", s.prompt_count}, {"eligible", s.eligible},
          {"seed", s.seed},               {"prompt_hash", s.prompt_hash},   {"means", std::move(means)}};
}
inline ActivationSummary activation_summary_from_json(const nlohmann::json& j) {
  ActivationSummary s;
  s.task_id = j.at("task_id").get<std::string>();
  s.model_id = j.at("model_id").get<std::string>();
  s.form = parse_activation_form(j.at("form").get<std::string>());
  s.prompt_count = j.at("prompt_count").get<int>();
  s.eligible = j.value("eligible", true);
  s.seed = j.value("seed", std::uint64_t{0});
  s.prompt_hash = j.value("prompt_hash", "");
  for (const auto& [k, v] : j.at("means").items()) s.means.emplace(HeadId::parse(k), vector_from_json(v));
  return s;
}

inline nlohmann::json to_json(const CieTensor& t) {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [h, v] : t.scores) scores[h.str()] = v;
  return {{"kind", "cie_tensor"},
          {"task_id", t.task_id},
          {"model_id", t.model_id},
          {"form", to_string(t.form)},
          {"condition", to_string(t.condition)},
          {"prompts_used", t.prompts_used},
          {"eligible", t.eligible},
          {"seed", t.seed},
          {"prompt_hash", t.prompt_hash},
          {"scores", std::move(scores)}};
}
inline CieTensor cie_tensor_from_json(const nlohmann::json& j) {
  CieTensor t;
  t.task_id = j.at("task_id").get<std::string>();
  t.model_id = j.at("model_id").get<std::string>();
  t.form = parse_activation_form(j.at("form").get<std::string>());
  t.condition = parse_cie_condition(j.at("condition").get<std::string>());
  t.prompts_used = j.at("prompts_used").get<int>();
  t.eligible = j.value("eligible", true);
  t.seed = j.value("seed", std::uint64_t{0});
  t.prompt_hash = j.value("prompt_hash", "");
  for (const auto& [k, v] : j.at("scores").items()) t.scores.emplace(HeadId::parse(k), v.get<double>());
  return t;
}

inline nlohmann::json to_json(const HeadSet& s) {
  std::vector<std::string> heads;
  for (const auto& h : s.heads) heads.push_back(h.str());
  return {{"heads", heads}, {"size", s.heads.size()}, {"provenance", to_string(s.provenance)}};
}
inline HeadSet head_set_from_json(const nlohmann::json& j) {
  HeadSet s;
  for (const auto& h : j.at("heads")) s.heads.push_back(HeadId::parse(h.get<std::string>()));
  s.provenance = parse_head_set_provenance(j.at("provenance").get<std::string>());
  return s;
}

inline nlohmann::json to_json(const FunctionVector& fv) {
  return {{"kind", "function_vector"},
          {"task_id", fv.task_id},
          {"model_id", fv.model_id},
          {"activation_source", to_string(fv.activation_source)},
          {"head_set", to_json(fv.head_set)},
          {"vector", vector_to_json(fv.vector)}};
}
inline FunctionVector function_vector_from_json(const nlohmann::json& j) {
  FunctionVector fv;
  fv.task_id = j.at("task_id").get<std::string>();
  fv.model_id = j.at("model_id").get<std::string>();
  fv.activation_source = parse_activation_form(j.at("activation_source").get<std::string>());
  fv.head_set = head_set_from_json(j.at("head_set"));
  fv.vector = vector_from_json(j.at("vector"));
  return fv;
}

}  // namespace fvlab
