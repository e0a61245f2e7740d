#pragma once

// Word-pair task datasets, 70/30 splits, and the Q/A prompt templates.
//
// Demonstration template (K blocks, then the query):
//   "Q: x1\nA: y1\n\n" ... "Q: xq\nA: "
// Instruction template:
//   "<instruction>\nQ: xq\nA: "

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/random.hpp"

namespace fvlab {

enum class TaskCategory { open_generation, classification };

struct TaskDataset {
  std::string task_id;
  std::vector<std::pair<std::string, std::string>> pairs;
  TaskCategory category = TaskCategory::open_generation;
  std::optional<std::vector<std::string>> label_set;

  std::size_t size() const { return pairs.size(); }
};

inline TaskDataset parse_task(const nlohmann::json& j, const std::string& source,
                              std::vector<std::string>* warnings = nullptr) {
  auto fail = [&](const std::string& what) { throw FormatError(source + ": " + what); };
  if (!j.is_object()) fail("task file must hold a JSON object");
  if (!j.contains("task_id") || !j["task_id"].is_string() || j["task_id"].get<std::string>().empty())
    fail("missing string field 'task_id'");
  if (!j.contains("pairs") || !j["pairs"].is_array()) fail("missing array field 'pairs'");

  TaskDataset ds;
  ds.task_id = j["task_id"].get<std::string>();
  const auto& pairs = j["pairs"];
  if (pairs.empty()) fail("task '" + ds.task_id + "' has an empty pair list");
  std::set<std::string> seen_inputs;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (!p.is_array() || p.size() != 2 || !p[0].is_string() || !p[1].is_string())
      fail("record " + std::to_string(i) + " is not an [input, output] string pair");
    auto in = p[0].get<std::string>();
    auto out = p[1].get<std::string>();
    if (in.empty() || out.empty()) fail("record " + std::to_string(i) + " has an empty side");
    if (!seen_inputs.insert(in).second && warnings)
      warnings->push_back(source + ": duplicate input '" + in + "' at record " + std::to_string(i));
    ds.pairs.emplace_back(std::move(in), std::move(out));
  }
  if (j.contains("labels") && !j["labels"].is_null()) {
    if (!j["labels"].is_array()) fail("'labels' must be an array of strings");
    std::vector<std::string> labels;
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) fail("'labels' must be an array of strings");
      labels.push_back(l.get<std::string>());
    }
    std::set<std::string> label_lookup(labels.begin(), labels.end());
    for (std::size_t i = 0; i < ds.pairs.size(); ++i)
      if (!label_lookup.contains(ds.pairs[i].second))
        fail("record " + std::to_string(i) + " output '" + ds.pairs[i].second + "' is not in the label set");
    ds.label_set = std::move(labels);
    ds.category = TaskCategory::classification;
  }
  return ds;
}

inline TaskDataset load_task(const std::string& path, std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open task file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return parse_task(j, path, warnings);
}

inline nlohmann::json task_to_json(const TaskDataset& ds) {
  nlohmann::json j;
  j["task_id"] = ds.task_id;
  j["pairs"] = nlohmann::json::array();
  for (const auto& [x, y] : ds.pairs) j["pairs"].push_back({x, y});
  if (ds.label_set) j["labels"] = *ds.label_set;
  return j;
}

struct SplitSpec {
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  std::vector<std::size_t> train;  // ascending
  std::vector<std::size_t> test;   // ascending
};

// Seeded 70/30 partition: round(0.7 n) train indices, at least one on each side.
inline SplitSpec split(const TaskDataset& ds, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (n < 2)
    throw InsufficientDataError("task '" + ds.task_id + "' needs at least 2 pairs to split, has " +
                                std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  std::size_t n_train = (7 * n + 5) / 10;
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  SplitSpec s;
  s.seed = seed;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

enum class PromptForm { demo_k_shot, demo_shuffled, instruction, zero_shot, baseline_instruction };

inline const char* to_string(PromptForm f) {
  switch (f) {
    case PromptForm::demo_k_shot: return "demo_k_shot";
    case PromptForm::demo_shuffled: return "demo_shuffled";
    case PromptForm::instruction: return "instruction";
    case PromptForm::zero_shot: return "zero_shot";
    case PromptForm::baseline_instruction: return "baseline_instruction";
  }
  return "?";
}

struct PromptInstance {
  std::string text;
  std::string query_input;
  std::string target;
  PromptForm form = PromptForm::zero_shot;
  int k = 0;
  std::optional<std::string> source_spec_id;
  std::vector<std::size_t> context_indices;  // demo forms only
  std::vector<std::string> context_labels;   // labels as shown, after any shuffling
  // Token ids standing in for the first prefix_length bytes of text. Sampled
  // stand-ins need not re-encode to the ids they were drawn as.
  std::vector<std::int32_t> prefix_tokens;
  std::size_t prefix_length = 0;
};

inline constexpr int kDefaultShots = 10;

inline std::string render_query_block(const std::string& query) { return "Q: " + query + "\nA: "; }

inline PromptInstance render_demo_prompt(const TaskDataset& ds, const std::vector<std::size_t>& context_indices,
                                         std::size_t query_index, bool shuffle_labels, std::uint64_t seed) {
  if (query_index >= ds.size()) throw BoundsError("query index out of range");
  for (std::size_t c : context_indices) {
    if (c >= ds.size()) throw BoundsError("context index out of range");
    if (c == query_index)
      throw OverlapError("query index " + std::to_string(query_index) + " also appears in the context");
  }

  std::vector<std::string> labels;
  labels.reserve(context_indices.size());
  for (std::size_t c : context_indices) labels.push_back(ds.pairs[c].second);
  if (shuffle_labels) {
    Rng rng(derive_seed(seed, "shuffle-labels"));
    rng.shuffle(labels);
  }

  PromptInstance p;
  for (std::size_t i = 0; i < context_indices.size(); ++i)
    p.text += "Q: " + ds.pairs[context_indices[i]].first + "\nA: " + labels[i] + "\n\n";
  p.text += render_query_block(ds.pairs[query_index].first);
  p.query_input = ds.pairs[query_index].first;
  p.target = ds.pairs[query_index].second;
  p.form = shuffle_labels ? PromptForm::demo_shuffled : PromptForm::demo_k_shot;
  p.k = static_cast<int>(context_indices.size());
  p.context_indices = context_indices;
  p.context_labels = std::move(labels);
  return p;
}

inline PromptInstance render_instruction_prompt(const std::string& instruction_text, const std::string& query_input,
                                                std::string target = {},
                                                std::optional<std::string> spec_id = std::nullopt) {
  if (instruction_text.empty()) throw PreconditionError("instruction text must be non-empty");
  PromptInstance p;
  p.text = instruction_text + "\n" + render_query_block(query_input);
  p.query_input = query_input;
  p.target = std::move(target);
  p.form = PromptForm::instruction;
  p.source_spec_id = std::move(spec_id);
  return p;
}

// Same template as an instruction prompt, with an uninformative stand-in.
inline PromptInstance render_baseline_prompt(const std::string& baseline_text, const std::string& query_input,
                                             std::string target, std::string spec_id) {
  PromptInstance p = render_instruction_prompt(baseline_text, query_input, std::move(target), std::move(spec_id));
  p.form = PromptForm::baseline_instruction;
  return p;
}

inline PromptInstance render_zero_shot_prompt(const std::string& query_input, std::string target = {}) {
  PromptInstance p;
  p.text = render_query_block(query_input);
  p.query_input = query_input;
  p.target = std::move(target);
  p.form = PromptForm::zero_shot;
  return p;
}

// K context indices from `pool`, never containing `exclude`.
inline std::vector<std::size_t> sample_context(const std::vector<std::size_t>& pool, std::size_t exclude, int k,
                                               Rng& rng) {
  std::vector<std::size_t> candidates;
  candidates.reserve(pool.size());
  for (std::size_t i : pool)
    if (i != exclude) candidates.push_back(i);
  if (static_cast<int>(candidates.size()) < k)
    throw InsufficientDataError("need " + std::to_string(k) + " context pairs, only " +
                                std::to_string(candidates.size()) + " available");
  return rng.sample(std::move(candidates), static_cast<std::size_t>(k));
}

}  // namespace fvlab
