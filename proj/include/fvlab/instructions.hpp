#pragma once

// Candidate instruction generation (generate-then-deduplicate) and top-J
// selection by zero-shot train accuracy.

#include <Eigen/Dense>
#include <httplib.h>
#include <json.hpp>

// <resolv.h>, pulled in by httplib, defines _res as a macro; Eigen uses the
// same name for a parameter.
#ifdef _res
#undef _res
#endif

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/gateway.hpp"
#include "fvlab/random.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

enum class LengthRegime { short_form, long_form };

inline const char* to_string(LengthRegime r) { return r == LengthRegime::short_form ? "short" : "long"; }
inline LengthRegime parse_regime(const std::string& s) {
  if (s == "short") return LengthRegime::short_form;
  if (s == "long") return LengthRegime::long_form;
  throw FormatError("unknown instruction regime '" + s + "'");
}

inline constexpr std::size_t kShortInstructionMaxTokens = 16;
inline constexpr int kInstructionsPerRound = 10;
inline constexpr int kDefaultGenerationRounds = 20;

struct Instruction {
  std::string id;
  std::string text;
};

struct InstructionSet {
  std::string task_id;
  LengthRegime regime = LengthRegime::short_form;
  std::vector<Instruction> instructions;
  std::string generator_model;
  int rounds = 0;
  int skipped_unparseable = 0;
  int filtered_too_long = 0;
  int raw_generations = 0;
};

inline nlohmann::json to_json(const InstructionSet& s) {
  nlohmann::json j;
  j["task_id"] = s.task_id;
  j["regime"] = to_string(s.regime);
  j["instructions"] = nlohmann::json::array();
  for (const auto& i : s.instructions) j["instructions"].push_back({{"id", i.id}, {"text", i.text}});
  j["generator_model"] = s.generator_model;
  j["rounds"] = s.rounds;
  j["skipped_unparseable"] = s.skipped_unparseable;
  j["filtered_too_long"] = s.filtered_too_long;
  j["raw_generations"] = s.raw_generations;
  return j;
}

inline InstructionSet instruction_set_from_json(const nlohmann::json& j) {
  InstructionSet s;
  try {
    s.task_id = j.at("task_id").get<std::string>();
    s.regime = parse_regime(j.at("regime").get<std::string>());
    for (const auto& i : j.at("instructions"))
      s.instructions.push_back({i.at("id").get<std::string>(), i.at("text").get<std::string>()});
    s.generator_model = j.value("generator_model", "");
    s.rounds = j.value("rounds", 0);
    s.skipped_unparseable = j.value("skipped_unparseable", 0);
    s.filtered_too_long = j.value("filtered_too_long", 0);
    s.raw_generations = j.value("raw_generations", 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("instruction file: ") + e.what());
  }
  return s;
}

inline InstructionSet load_instruction_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open instruction file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return instruction_set_from_json(j);
}

inline void save_instruction_set(const InstructionSet& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << to_json(s).dump(2) << '\n';
}

struct GenerationRequest {
  std::string task_id;
  LengthRegime regime = LengthRegime::short_form;
  int round = 0;
  std::string prompt;
};

class InstructionGenerator {
 public:
  virtual ~InstructionGenerator() = default;
  virtual std::string model_id() const = 0;
  virtual std::string endpoint() const = 0;
  virtual std::string complete(const GenerationRequest& request) = 0;
};

// Replays exchanges recorded in a fixture file, keyed by (task, regime, round).
class FixtureGenerator final : public InstructionGenerator {
 public:
  explicit FixtureGenerator(const std::string& path) : path_(path) {
    std::ifstream in(path);
    if (!in) throw TransportError("generator fixture " + path + " is unreadable", "fixture:" + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ": " + e.what());
    }
    model_ = j.value("generator_model", "fixture");
    for (const auto& e : j.at("exchanges"))
      responses_[{e.at("task_id").get<std::string>(), e.at("regime").get<std::string>(), e.at("round").get<int>()}] =
          e.at("response").get<std::string>();
  }

  std::string model_id() const override { return model_; }
  std::string endpoint() const override { return "fixture:" + path_; }

  std::string complete(const GenerationRequest& r) override {
    auto it = responses_.find({r.task_id, to_string(r.regime), r.round});
    if (it == responses_.end())
      throw TransportError("no recorded exchange for " + r.task_id + "/" + to_string(r.regime) + " round " +
                               std::to_string(r.round),
                           endpoint());
    return it->second;
  }

 private:
  std::string path_;
  std::string model_;
  std::map<std::tuple<std::string, std::string, int>, std::string> responses_;
};

// OpenAI-style completions endpoint over plain HTTP.
class HttpGenerator final : public InstructionGenerator {
 public:
  struct Options {
    std::string base_url;                   // e.g. http://localhost:8000
    std::string path = "/v1/completions";
    std::string api_key;
    std::string model = "meta-llama/Llama-3.1-405B-Instruct";
    int max_tokens = 768;
    double temperature = 1.0;
    int retries = 3;
    int timeout_seconds = 120;
  };

  explicit HttpGenerator(Options o) : options_(std::move(o)) {}

  std::string model_id() const override { return options_.model; }
  std::string endpoint() const override { return options_.base_url + options_.path; }

  std::string complete(const GenerationRequest& r) override {
    nlohmann::json body = {{"model", options_.model},
                           {"prompt", r.prompt},
                           {"max_tokens", options_.max_tokens},
                           {"temperature", options_.temperature}};
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt < std::max(1, options_.retries); ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(200 << attempt));
      httplib::Client client(options_.base_url);
      client.set_connection_timeout(options_.timeout_seconds, 0);
      client.set_read_timeout(options_.timeout_seconds, 0);
      httplib::Headers headers;
      if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);
      auto res = client.Post(options_.path, headers, body.dump(), "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        if (res->status < 500 && res->status != 429) break;
        continue;
      }
      try {
        auto j = nlohmann::json::parse(res->body);
        const auto& choice = j.at("choices").at(0);
        if (choice.contains("text")) return choice.at("text").get<std::string>();
        return choice.at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        last_error = std::string("malformed response: ") + e.what();
      }
    }
    throw TransportError("generator endpoint " + endpoint() + " failed: " + last_error, endpoint());
  }

 private:
  Options options_;
};

// Forwards to another generator and keeps every exchange for replay.
class RecordingGenerator final : public InstructionGenerator {
 public:
  explicit RecordingGenerator(InstructionGenerator& inner) : inner_(inner) {}

  std::string model_id() const override { return inner_.model_id(); }
  std::string endpoint() const override { return inner_.endpoint(); }

  std::string complete(const GenerationRequest& r) override {
    std::string response = inner_.complete(r);
    std::lock_guard lock(mutex_);
    exchanges_.push_back({{"task_id", r.task_id},
                          {"regime", to_string(r.regime)},
                          {"round", r.round},
                          {"prompt", r.prompt},
                          {"response", response}});
    return response;
  }

  nlohmann::json fixture() const {
    std::lock_guard lock(mutex_);
    return {{"generator_model", inner_.model_id()}, {"exchanges", exchanges_}};
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << fixture().dump(2) << '\n';
  }

 private:
  InstructionGenerator& inner_;
  mutable std::mutex mutex_;
  nlohmann::json exchanges_ = nlohmann::json::array();
};

inline std::string build_generation_prompt(const std::string& demonstrations, LengthRegime regime) {
  std::string p =
      "Below are examples of a task. In each example, the line starting with \"Q:\" is an input and the line "
      "starting with \"A:\" is the correct output.\n\n";
  p += demonstrations;
  p += "Write " + std::to_string(kInstructionsPerRound) +
       " different instructions that explain how to perform this task on a new input, so that someone who has "
       "not seen the examples could follow them.";
  if (regime == LengthRegime::short_form) p += " Keep each instruction short: no more than a few words.";
  p += " Do not include any of the example inputs or outputs. Write one instruction per line, numbered 1 to " +
       std::to_string(kInstructionsPerRound) + ".\n\n1.";
  return p;
}

// Numbered-list items ("1. text", "2) text"). The prompt pre-fills "1.", so a
// leading unnumbered line is taken as item 1.
inline std::vector<std::string> parse_instruction_list(const std::string& response) {
  static const std::regex item(R"(^\s*\d+\s*[.)]\s*(.+?)\s*$)");
  std::vector<std::string> out;
  std::size_t start = 0;
  bool first_line = true;
  while (start <= response.size()) {
    std::size_t end = response.find('\n', start);
    if (end == std::string::npos) end = response.size();
    std::string line = response.substr(start, end - start);
    std::smatch m;
    std::string text;
    if (std::regex_match(line, m, item)) text = m[1].str();
    else if (first_line) text = line;
    const auto b = text.find_first_not_of(" \t\r");
    text = b == std::string::npos ? "" : text.substr(b, text.find_last_not_of(" \t\r") - b + 1);
    if (text.size() >= 2 && text.front() == '"' && text.back() == '"') text = text.substr(1, text.size() - 2);
    if (!text.empty()) out.push_back(text);
    first_line = false;
    start = end + 1;
  }
  return out;
}

struct GenerationOptions {
  LengthRegime regime = LengthRegime::short_form;
  int rounds = kDefaultGenerationRounds;
  int shots = kDefaultShots;
  std::uint64_t seed = 0;
  std::size_t short_max_tokens = kShortInstructionMaxTokens;
};

// `token_count` measures length with the subject model's tokenizer.
inline InstructionSet generate_instructions(const TaskDataset& task, const SplitSpec& split_spec,
                                            InstructionGenerator& generator, const GenerationOptions& options,
                                            const std::function<std::size_t(const std::string&)>& token_count,
                                            std::vector<std::string>* warnings = nullptr) {
  if (static_cast<int>(split_spec.train.size()) < options.shots + 1)
    throw InsufficientDataError("task '" + task.task_id + "' has too few training pairs for a " +
                                std::to_string(options.shots) + "-shot generation prompt");
  InstructionSet set;
  set.task_id = task.task_id;
  set.regime = options.regime;
  set.generator_model = generator.model_id();
  set.rounds = options.rounds;

  std::set<std::string> seen;
  for (int round = 0; round < options.rounds; ++round) {
    Rng rng(derive_seed(options.seed, "generation-demo", static_cast<std::uint64_t>(round)));
    auto ctx = rng.sample(split_spec.train, static_cast<std::size_t>(options.shots));
    std::string demos;
    for (std::size_t c : ctx) demos += "Q: " + task.pairs[c].first + "\nA: " + task.pairs[c].second + "\n\n";
    GenerationRequest req{task.task_id, options.regime, round, build_generation_prompt(demos, options.regime)};
    auto items = parse_instruction_list(generator.complete(req));
    if (items.empty()) {
      ++set.skipped_unparseable;
      continue;
    }
    for (auto& text : items) {
      ++set.raw_generations;
      if (!seen.insert(text).second) continue;
      if (options.regime == LengthRegime::short_form && token_count(text) > options.short_max_tokens) {
        ++set.filtered_too_long;
        continue;
      }
      char id[32];
      std::snprintf(id, sizeof id, "%03zu", set.instructions.size());
      set.instructions.push_back({task.task_id + "/" + to_string(options.regime) + "/" + id, std::move(text)});
    }
  }
  if (warnings) {
    if (set.skipped_unparseable > 0)
      warnings->push_back(task.task_id + ": skipped " + std::to_string(set.skipped_unparseable) +
                          " unparseable generations");
    if (set.filtered_too_long > 0)
      warnings->push_back(task.task_id + ": dropped " + std::to_string(set.filtered_too_long) +
                          " instructions longer than " + std::to_string(options.short_max_tokens) + " tokens");
  }
  return set;
}

struct RankedInstruction {
  std::string spec_id;
  std::string text;
  double train_accuracy = 0.0;
  int successes = 0;
};

struct TopInstructions {
  std::string task_id;
  LengthRegime regime = LengthRegime::short_form;
  int J = 5;
  std::vector<RankedInstruction> ranked;  // descending accuracy, ties by spec_id
};

inline nlohmann::json to_json(const TopInstructions& t) {
  nlohmann::json j;
  j["task_id"] = t.task_id;
  j["regime"] = to_string(t.regime);
  j["J"] = t.J;
  j["ranked"] = nlohmann::json::array();
  for (const auto& r : t.ranked)
    j["ranked"].push_back(
        {{"id", r.spec_id}, {"text", r.text}, {"train_accuracy", r.train_accuracy}, {"successes", r.successes}});
  return j;
}

inline TopInstructions top_instructions_from_json(const nlohmann::json& j) {
  TopInstructions t;
  t.task_id = j.at("task_id").get<std::string>();
  t.regime = parse_regime(j.at("regime").get<std::string>());
  t.J = j.at("J").get<int>();
  for (const auto& r : j.at("ranked"))
    t.ranked.push_back({r.at("id").get<std::string>(), r.at("text").get<std::string>(),
                        r.at("train_accuracy").get<double>(), r.at("successes").get<int>()});
  return t;
}

inline constexpr int kTopInstructions = 5;
inline constexpr int kMinSuccessfulPrompts = 20;

// Ranks every instruction by zero-shot first-token accuracy over the train
// split and keeps the best J. Throws TaskIneligibleError when fewer than J
// instructions reach `min_successes` successful prompts.
inline TopInstructions select_top_instructions(const TaskDataset& task, const SplitSpec& split_spec,
                                               const InstructionSet& set, const ModelGateway& gateway,
                                               int J = kTopInstructions, int min_successes = kMinSuccessfulPrompts) {
  if (split_spec.train.empty()) throw InsufficientDataError("task '" + task.task_id + "' has no train split");
  std::vector<RankedInstruction> all;
  for (const auto& ins : set.instructions) {
    RankedInstruction r{ins.id, ins.text, 0.0, 0};
    for (std::size_t i : split_spec.train) {
      auto p = render_instruction_prompt(ins.text, task.pairs[i].first, task.pairs[i].second, ins.id);
      if (gateway.predicts_target(p)) ++r.successes;
    }
    r.train_accuracy = static_cast<double>(r.successes) / static_cast<double>(split_spec.train.size());
    all.push_back(std::move(r));
  }
  std::sort(all.begin(), all.end(), [](const RankedInstruction& a, const RankedInstruction& b) {
    if (a.train_accuracy != b.train_accuracy) return a.train_accuracy > b.train_accuracy;
    return a.spec_id < b.spec_id;
  });

  int qualifying = 0;
  for (const auto& r : all)
    if (r.successes >= min_successes) ++qualifying;
  if (qualifying < J) {
    std::map<std::string, int> counts;
    for (const auto& r : all) counts[r.spec_id] = r.successes;
    throw TaskIneligibleError("task '" + task.task_id + "' (" + to_string(set.regime) + "): only " +
                                  std::to_string(qualifying) + " instructions reach " + std::to_string(min_successes) +
                                  " successful prompts, need " + std::to_string(J),
                              std::move(counts));
  }
  TopInstructions top;
  top.task_id = task.task_id;
  top.regime = set.regime;
  top.J = J;
  top.ranked.assign(all.begin(), all.begin() + J);
  return top;
}

}  // namespace fvlab
