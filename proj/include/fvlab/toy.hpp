#pragma once

// Synthetic in-context-learning setup small enough to train on a laptop CPU:
// three key-value tasks that are different bijections between one shared set
// of input words and one shared set of output words. A demonstration reveals
// the task only through its input/output pairing, so shuffling the labels
// removes it; instructions name the task with a keyword.
//
// Stage "base" trains on demonstration sequences only. Stage "post" continues
// from base on a mix of demonstrations and single-query instruction prompts.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fvlab/instructions.hpp"
#include "fvlab/random.hpp"
#include "fvlab/tasks.hpp"
#include "fvlab/tokenizer.hpp"
#include "fvlab/training.hpp"
#include "fvlab/transformer.hpp"

namespace fvlab {

struct ToyOptions {
  std::uint64_t seed = 7;
  int n_items = 40;
  ModelConfig arch{4, 16, 64, 256, 128, 0};
  int base_steps = 2000;
  int post_steps = 600;
  int batch = 8;
  double lr = 3e-3;
  int warmup = 50;
  double instruction_fraction = 0.5;  // share of instruction sequences in the post stage
  int min_pairs = kDefaultShots + 1;  // demonstration sequences hold min_pairs..shots+1 pairs
};

struct ToyTaskInfo {
  std::string task_id;
  std::vector<std::string> keywords;
};

inline const std::vector<ToyTaskInfo>& toy_tasks() {
  static const std::vector<ToyTaskInfo> tasks = {
      {"toy_alpha", {"alpha", "ember"}},
      {"toy_beta", {"beta", "frost"}},
      {"toy_gamma", {"gamma", "stone"}},
  };
  return tasks;
}

// Pronounceable pseudo-words: consonant-vowel-consonant-vowel.
inline std::vector<std::string> toy_words(std::uint64_t seed, std::size_t count, std::string_view tag) {
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  Rng rng(derive_seed(seed, tag));
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w;
    for (int i = 0; i < 2; ++i) {
      w += consonants[rng.below(14)];
      w += vowels[rng.below(5)];
    }
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

inline std::vector<std::string> toy_short_instructions(const ToyTaskInfo& t) {
  static const char* verbs[] = {"Give", "Write", "Return", "Output", "Name", "State"};
  static const char* nouns[] = {"partner", "match", "code", "pair", "twin"};
  std::vector<std::string> out;
  for (const auto& kw : t.keywords)
    for (const char* v : verbs)
      for (const char* n : nouns) out.push_back(std::string(v) + " the " + kw + " " + n + ".");
  return out;
}

inline std::vector<std::string> toy_long_instructions(const ToyTaskInfo& t) {
  static const char* openers[] = {"For each word you see,", "Look at the input word and", "Read the word after Q, then",
                                  "Given a single word,"};
  static const char* verbs[] = {"give", "write", "return", "output", "name"};
  static const char* nouns[] = {"partner", "match", "code", "pair", "twin"};
  static const char* closers[] = {"Answer with one word only.", "Do not add anything else.",
                                  "Put the answer after A."};
  std::vector<std::string> out;
  for (const auto& kw : t.keywords)
    for (const char* o : openers)
      for (const char* v : verbs)
        for (const char* n : nouns)
          for (const char* c : closers)
            out.push_back(std::string(o) + " " + v + " its " + kw + " " + n + " from the list. " + c);
  return out;
}

inline std::vector<std::string> toy_instruction_space(const ToyTaskInfo& t, LengthRegime regime) {
  return regime == LengthRegime::short_form ? toy_short_instructions(t) : toy_long_instructions(t);
}

// Sentences for the real-text corpus. They never mention a task keyword.
inline std::vector<std::string> toy_corpus(std::uint64_t seed, std::size_t n_sentences = 400) {
  static const char* subjects[] = {"The old man", "A small dog", "My sister", "The river", "Our teacher", "The city",
                                   "A green bird", "The wind", "Every child", "The market"};
  static const char* verbs[] = {"walked", "looked", "waited", "sang", "turned", "slept", "moved", "called"};
  static const char* tails[] = {"near the bridge",  "after the rain",      "in the morning", "along the road",
                                "without a sound", "for a long time",     "under the trees", "with great care",
                                "at the station",  "before the evening"};
  static const char* extras[] = {"and then it was quiet.", "while people watched.", "as the lights came on.",
                                 "because nobody else would.", "like it did every day."};
  Rng rng(derive_seed(seed, "corpus"));
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n_sentences; ++i) {
    std::string s = std::string(subjects[rng.below(10)]) + " " + verbs[rng.below(8)] + " " + tails[rng.below(10)];
    if (rng.below(2) == 0) s += " " + std::string(extras[rng.below(5)]);
    else s += ".";
    if (rng.below(3) == 0) s += " " + std::string(subjects[rng.below(10)]) + " " + verbs[rng.below(8)] + ".";
    out.push_back(std::move(s));
  }
  return out;
}

struct ToyBundle {
  std::vector<TaskDataset> tasks;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::string> corpus;
  nlohmann::json fixture;  // recorded generator exchanges for every task and regime
  Tokenizer tokenizer;
};

// Fixture generator responses: each round lists 10 instructions drawn with
// replacement from the template space, so rounds repeat each other.
inline nlohmann::json toy_fixture(std::uint64_t seed, int rounds = kDefaultGenerationRounds) {
  nlohmann::json j{{"generator_model", "toy-templates"}, {"exchanges", nlohmann::json::array()}};
  for (const auto& t : toy_tasks())
    for (auto regime : {LengthRegime::short_form, LengthRegime::long_form}) {
      const auto space = toy_instruction_space(t, regime);
      for (int round = 0; round < rounds; ++round) {
        Rng rng(derive_seed(seed, "fixture-" + t.task_id + "-" + to_string(regime), static_cast<std::uint64_t>(round)));
        std::string response;
        for (int i = 0; i < kInstructionsPerRound; ++i) {
          if (i > 0) response += "\n" + std::to_string(i + 1) + ".";
          response += " " + space[rng.below(space.size())];
        }
        j["exchanges"].push_back(
            {{"task_id", t.task_id}, {"regime", to_string(regime)}, {"round", round}, {"response", response}});
      }
    }
  return j;
}

inline ToyBundle make_toy_bundle(const ToyOptions& o) {
  ToyBundle b;
  b.inputs = toy_words(o.seed, static_cast<std::size_t>(o.n_items), "inputs");
  {
    auto pool = toy_words(o.seed, static_cast<std::size_t>(o.n_items) * 2, "outputs");
    std::set<std::string> in(b.inputs.begin(), b.inputs.end());
    for (const auto& w : pool)
      if (!in.contains(w) && b.outputs.size() < static_cast<std::size_t>(o.n_items)) b.outputs.push_back(w);
  }
  const std::size_t n = b.outputs.size();
  if (n < static_cast<std::size_t>(o.n_items)) throw Error("could not draw enough distinct toy words");
  // Task t maps input i to output perm[(i + offset_t) mod n]; distinct
  // offsets make the three tasks disagree on every input.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(derive_seed(o.seed, "toy-permutation"));
  rng.shuffle(perm);
  const std::size_t offsets[] = {0, n / 3, (2 * n) / 3};
  for (std::size_t t = 0; t < toy_tasks().size(); ++t) {
    TaskDataset ds;
    ds.task_id = toy_tasks()[t].task_id;
    for (std::size_t i = 0; i < n; ++i) ds.pairs.emplace_back(b.inputs[i], b.outputs[perm[(i + offsets[t]) % n]]);
    b.tasks.push_back(std::move(ds));
  }
  b.corpus = toy_corpus(o.seed);
  b.fixture = toy_fixture(o.seed);

  std::vector<std::string> texts = {"Q: x\nA: y\n\n"};
  for (const auto& ds : b.tasks)
    for (const auto& [x, y] : ds.pairs) texts.push_back(x + " " + y);
  for (const auto& t : toy_tasks())
    for (auto regime : {LengthRegime::short_form, LengthRegime::long_form})
      for (const auto& s : toy_instruction_space(t, regime)) texts.push_back(s);
  for (const auto& s : b.corpus) texts.push_back(s);
  b.tokenizer = Tokenizer::from_texts(texts);
  return b;
}

// One training sequence of `shots + 1` demonstrations; every answer is a target.
inline TrainingExample toy_demo_example(const TaskDataset& ds, const Tokenizer& tok, int pairs, Rng& rng) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  idx = rng.sample(std::move(idx), static_cast<std::size_t>(pairs));
  TrainingExample ex;
  ex.tokens.push_back(Tokenizer::kBos);
  for (std::size_t i : idx) {
    auto prefix = tok.encode("Q: " + ds.pairs[i].first + "\nA: ");
    ex.tokens.insert(ex.tokens.end(), prefix.begin(), prefix.end());
    auto answer = tok.encode(ds.pairs[i].second);
    ex.targets.emplace_back(static_cast<int>(ex.tokens.size()) - 1, answer[0]);
    ex.tokens.insert(ex.tokens.end(), answer.begin(), answer.end());
    auto sep = tok.encode("\n\n");
    ex.tokens.insert(ex.tokens.end(), sep.begin(), sep.end());
  }
  return ex;
}

inline TrainingExample toy_instruction_example(const TaskDataset& ds, const std::string& instruction,
                                               const Tokenizer& tok, Rng& rng) {
  const auto& [x, y] = ds.pairs[rng.below(ds.size())];
  TrainingExample ex;
  ex.tokens.push_back(Tokenizer::kBos);
  auto prefix = tok.encode(render_instruction_prompt(instruction, x).text);
  ex.tokens.insert(ex.tokens.end(), prefix.begin(), prefix.end());
  ex.targets.emplace_back(static_cast<int>(ex.tokens.size()) - 1, tok.encode(y)[0]);
  return ex;
}

struct ToyTrainingLog {
  std::vector<double> losses;  // mean loss per step
  double seconds = 0.0;
};

using ToyProgress = std::function<void(const std::string& stage, int step, int total, double loss)>;

// Trains in 32-bit and returns 64-bit weights.
inline TransformerWeights<double> train_toy_stage(const ToyBundle& b, const ModelConfig& config,
                                                  TransformerWeights<double> init, int steps, double instruction_fraction,
                                                  const ToyOptions& o, std::uint64_t seed, const std::string& stage,
                                                  ToyTrainingLog* log = nullptr, const ToyProgress& progress = {}) {
  const auto start = std::chrono::steady_clock::now();
  Transformer<float> model(config, init.cast<float>());
  Adam<float> opt(config);
  Rng rng(seed);
  std::vector<std::vector<std::string>> instr(toy_tasks().size());
  for (std::size_t t = 0; t < toy_tasks().size(); ++t) {
    instr[t] = toy_short_instructions(toy_tasks()[t]);
    auto l = toy_long_instructions(toy_tasks()[t]);
    instr[t].insert(instr[t].end(), l.begin(), l.end());
  }
  const int max_pairs = kDefaultShots + 1;
  const int min_pairs = std::clamp(o.min_pairs, 1, max_pairs);
  for (int step = 0; step < steps; ++step) {
    auto grad = TransformerWeights<float>::zeros(config);
    double loss = 0;
    for (int i = 0; i < o.batch; ++i) {
      const std::size_t t = rng.below(b.tasks.size());
      const bool use_instruction = instruction_fraction > 0 && rng.uniform() < instruction_fraction;
      auto ex = use_instruction ? toy_instruction_example(b.tasks[t], instr[t][rng.below(instr[t].size())], b.tokenizer, rng)
                                : toy_demo_example(b.tasks[t], b.tokenizer,
                                                   min_pairs + static_cast<int>(rng.below(max_pairs - min_pairs + 1)), rng);
      loss += accumulate_gradient(model, ex, grad, 1.0 / o.batch);
    }
    double lr = o.lr;
    if (step < o.warmup) lr *= static_cast<double>(step + 1) / o.warmup;
    const int decay_start = steps * 3 / 4;
    if (step >= decay_start) lr *= 1.0 - 0.9 * static_cast<double>(step - decay_start) / std::max(1, steps - decay_start);
    opt.step(model.mutable_weights(), grad, lr);
    if (log) log->losses.push_back(loss);
    if (progress) progress(stage, step + 1, steps, loss);
  }
  if (log)
    log->seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return model.weights().template cast<double>();
}

struct ToyModels {
  Checkpoint base;
  Checkpoint post;
  ToyTrainingLog base_log;
  ToyTrainingLog post_log;
};

inline ToyModels train_toy_models(const ToyBundle& b, const ToyOptions& o, const ToyProgress& progress = {}) {
  ModelConfig config = o.arch;
  config.vocab_size = static_cast<int>(b.tokenizer.size());
  config.validate();
  ToyModels m;
  auto init = TransformerWeights<double>::random(config, derive_seed(o.seed, "toy-init"), 1.0);
  auto base = train_toy_stage(b, config, std::move(init), o.base_steps, 0.0, o, derive_seed(o.seed, "toy-base"),
                              "base", &m.base_log, progress);
  auto post = train_toy_stage(b, config, base, o.post_steps, o.instruction_fraction, o,
                              derive_seed(o.seed, "toy-post"), "post", &m.post_log, progress);
  m.base = {"toy-base", config, b.tokenizer, std::move(base)};
  m.post = {"toy-post", config, b.tokenizer, std::move(post)};
  return m;
}

}  // namespace fvlab
