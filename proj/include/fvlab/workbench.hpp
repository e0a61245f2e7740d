#pragma once

// Pipeline orchestration: run configuration, on-disk layout, and the
// generate / cache / train / select / evaluate / steer / analyze steps.
//
// Layout under output_root:
//   instructions/<task>.<regime>.json       candidate instruction sets
//   <model>/cache.jsonl                     corpus prefix cache
//   <model>/top_instructions.jsonl          top-J instructions per task x regime
//   <model>/baselines.jsonl                 baseline texts used for CIE
//   <model>/activations.jsonl               ActivationSummary per task x form
//   <model>/cie.jsonl                       CieTensor per task x form x condition
//   <model>/heads.jsonl                     aggregates and head sets
//   <model>/fv.jsonl                        function vectors per task x kind
//   <model>/eval.jsonl                      EvalReports
//   steer.jsonl                             cross-model EvalReports
//   analysis/<hash12>/                      tables, figures, index.html

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fvlab/analyst.hpp"
#include "fvlab/baselines.hpp"
#include "fvlab/error.hpp"
#include "fvlab/evaluator.hpp"
#include "fvlab/fv.hpp"
#include "fvlab/hash.hpp"
#include "fvlab/instructions.hpp"
#include "fvlab/miniature.hpp"
#include "fvlab/store.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

namespace fs = std::filesystem;

struct Budgets {
  int activation_prompts = kActivationPrompts;
  int cie_prompts = kCiePrompts;
  int top_instructions = kTopInstructions;
  int min_successes = kMinSuccessfulPrompts;
  int head_set_size = kHeadSetSize;
  int shots = kDefaultShots;
  int generation_rounds = kDefaultGenerationRounds;
  int short_max_tokens = static_cast<int>(kShortInstructionMaxTokens);
  int candidate_pool = static_cast<int>(kCandidatePool);
  int cache_target = static_cast<int>(kCorpusCacheTarget);
  int cache_max_tokens = static_cast<int>(kMaxCachedTokens);
};

struct Seeds {
  std::uint64_t split = 1;
  std::uint64_t prompts = 2;
  std::uint64_t generation = 3;
  std::uint64_t baselines = 4;
  std::uint64_t evaluation = 5;
};

struct GeneratorConfig {
  std::string kind = "fixture";  // fixture | http
  std::string path;              // fixture file
  std::string base_url;          // http
  std::string api_path = "/v1/completions";
  std::string model;
};

struct SteerConfig {
  std::string source;  // model whose FVs are applied
  std::string target;  // model being steered
};

struct RunConfig {
  std::vector<std::string> models;
  std::vector<std::string> tasks;
  std::string output_root = "fvlab-run";
  Seeds seeds;
  Budgets budgets;
  EquiprobableOptions equiprobable;
  std::vector<BaselineMethod> baselines{BaselineMethod::equiprobable, BaselineMethod::real_text,
                                        BaselineMethod::other_task};
  std::vector<Regime> regimes{Regime::zero_shot, Regime::shuffled_10_shot};
  std::optional<int> layer;  // default: round(L / 3)
  bool sweep = false;
  GeneratorConfig generator;
  std::string corpus;  // one entry per line
  double open_generation_chance = kOpenGenerationChance;
  std::string precision = "f64";
  std::optional<SteerConfig> steer;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("budget '") + name + "' must be positive");
    };
    positive(budgets.activation_prompts, "activation_prompts");
    positive(budgets.cie_prompts, "cie_prompts");
    positive(budgets.top_instructions, "top_instructions");
    positive(budgets.min_successes, "min_successes");
    positive(budgets.head_set_size, "head_set_size");
    positive(budgets.shots, "shots");
    positive(budgets.generation_rounds, "generation_rounds");
    positive(budgets.short_max_tokens, "short_max_tokens");
    positive(budgets.candidate_pool, "candidate_pool");
    positive(budgets.cache_target, "cache_target");
    positive(budgets.cache_max_tokens, "cache_max_tokens");
    if (budgets.activation_prompts % budgets.top_instructions != 0 || budgets.cie_prompts % budgets.top_instructions != 0)
      throw ConfigError("activation_prompts and cie_prompts must be multiples of top_instructions");
    if (equiprobable.t0 < 0 || equiprobable.dt <= 0) throw ConfigError("equiprobable band needs t0 >= 0 and dt > 0");
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
    if (models.empty()) throw ConfigError("no models configured");
    if (tasks.empty()) throw ConfigError("no tasks configured");
    for (const auto& t : tasks)
      if (!fs::exists(t)) throw ConfigError("task file " + t + " does not exist");
    for (const auto& m : models)
      if (m.rfind("miniature", 0) != 0 && !fs::exists(m)) throw ConfigError("model checkpoint " + m + " does not exist");
    if (generator.kind == "fixture" && !generator.path.empty() && !fs::exists(generator.path))
      throw ConfigError("generator fixture " + generator.path + " does not exist");
    if (generator.kind != "fixture" && generator.kind != "http") throw ConfigError("generator kind must be fixture or http");
    if (!corpus.empty() && !fs::exists(corpus)) throw ConfigError("corpus file " + corpus + " does not exist");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["models"] = c.models;
  j["tasks"] = c.tasks;
  j["output_root"] = c.output_root;
  j["seeds"] = {{"split", c.seeds.split},
                {"prompts", c.seeds.prompts},
                {"generation", c.seeds.generation},
                {"baselines", c.seeds.baselines},
                {"evaluation", c.seeds.evaluation}};
  const auto& b = c.budgets;
  j["budgets"] = {{"activation_prompts", b.activation_prompts}, {"cie_prompts", b.cie_prompts},
                  {"top_instructions", b.top_instructions},     {"min_successes", b.min_successes},
                  {"head_set_size", b.head_set_size},           {"shots", b.shots},
                  {"generation_rounds", b.generation_rounds},   {"short_max_tokens", b.short_max_tokens},
                  {"candidate_pool", b.candidate_pool},         {"cache_target", b.cache_target},
                  {"cache_max_tokens", b.cache_max_tokens}};
  j["equiprobable"] = {{"t0", c.equiprobable.t0}, {"dt", c.equiprobable.dt}};
  j["baselines"] = nlohmann::json::array();
  for (auto m : c.baselines) j["baselines"].push_back(to_string(m));
  j["regimes"] = nlohmann::json::array();
  for (auto r : c.regimes) j["regimes"].push_back(to_string(r));
  j["layer"] = c.layer ? nlohmann::json(*c.layer) : nlohmann::json("third");
  j["sweep"] = c.sweep;
  j["generator"] = {{"kind", c.generator.kind},
                    {"path", c.generator.path},
                    {"base_url", c.generator.base_url},
                    {"api_path", c.generator.api_path},
                    {"model", c.generator.model}};
  j["corpus"] = c.corpus;
  j["open_generation_chance"] = c.open_generation_chance;
  j["precision"] = c.precision;
  if (c.steer) j["steer"] = {{"source", c.steer->source}, {"target", c.steer->target}};
  return j;
}

// Relative paths are resolved against `base_dir` (the config file's directory).
inline RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  RunConfig c;
  auto resolve = [&](const std::string& p) -> std::string {
    if (p.empty() || p.rfind("miniature", 0) == 0) return p;
    fs::path path(p);
    if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
    return path.lexically_normal().string();
  };
  try {
    for (const auto& m : j.value("models", std::vector<std::string>{})) c.models.push_back(resolve(m));
    for (const auto& t : j.value("tasks", std::vector<std::string>{})) c.tasks.push_back(resolve(t));
    if (j.contains("output_root")) c.output_root = resolve(j["output_root"].get<std::string>());
    if (j.contains("seeds")) {
      const auto& s = j["seeds"];
      c.seeds.split = s.value("split", c.seeds.split);
      c.seeds.prompts = s.value("prompts", c.seeds.prompts);
      c.seeds.generation = s.value("generation", c.seeds.generation);
      c.seeds.baselines = s.value("baselines", c.seeds.baselines);
      c.seeds.evaluation = s.value("evaluation", c.seeds.evaluation);
    }
    if (j.contains("budgets")) {
      const auto& b = j["budgets"];
      auto& o = c.budgets;
      o.activation_prompts = b.value("activation_prompts", o.activation_prompts);
      o.cie_prompts = b.value("cie_prompts", o.cie_prompts);
      o.top_instructions = b.value("top_instructions", o.top_instructions);
      o.min_successes = b.value("min_successes", o.min_successes);
      o.head_set_size = b.value("head_set_size", o.head_set_size);
      o.shots = b.value("shots", o.shots);
      o.generation_rounds = b.value("generation_rounds", o.generation_rounds);
      o.short_max_tokens = b.value("short_max_tokens", o.short_max_tokens);
      o.candidate_pool = b.value("candidate_pool", o.candidate_pool);
      o.cache_target = b.value("cache_target", o.cache_target);
      o.cache_max_tokens = b.value("cache_max_tokens", o.cache_max_tokens);
    }
    if (j.contains("equiprobable")) {
      c.equiprobable.t0 = j["equiprobable"].value("t0", c.equiprobable.t0);
      c.equiprobable.dt = j["equiprobable"].value("dt", c.equiprobable.dt);
    }
    if (j.contains("baselines")) {
      c.baselines.clear();
      for (const auto& m : j["baselines"]) c.baselines.push_back(parse_baseline_method(m.get<std::string>()));
    }
    if (j.contains("regimes")) {
      c.regimes.clear();
      for (const auto& r : j["regimes"]) c.regimes.push_back(parse_eval_regime(r.get<std::string>()));
    }
    if (j.contains("layer") && j["layer"].is_number_integer()) c.layer = j["layer"].get<int>();
    c.sweep = j.value("sweep", false);
    if (j.contains("generator")) {
      const auto& g = j["generator"];
      c.generator.kind = g.value("kind", c.generator.kind);
      c.generator.path = resolve(g.value("path", std::string{}));
      c.generator.base_url = g.value("base_url", std::string{});
      c.generator.api_path = g.value("api_path", c.generator.api_path);
      c.generator.model = g.value("model", std::string{});
    }
    c.corpus = resolve(j.value("corpus", std::string{}));
    c.open_generation_chance = j.value("open_generation_chance", c.open_generation_chance);
    c.precision = j.value("precision", c.precision);
    if (j.contains("steer"))
      c.steer = SteerConfig{resolve(j["steer"].at("source").get<std::string>()),
                            resolve(j["steer"].at("target").get<std::string>())};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j, fs::path(path).parent_path());
}

// Hash of everything that affects results (the output location does not).
inline std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("output_root");
  return git_blob_hash(j.dump());
}

// ---------------------------------------------------------------------------

inline std::string model_tag(const std::string& model_id) {
  std::string stem = model_id.rfind("miniature", 0) == 0 ? model_id : fs::path(model_id).stem().string();
  for (char& ch : stem)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '.') ch = '_';
  return stem;
}

struct Console {
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
  void info(const std::string& s) const { *out << s << '\n'; }
  void warn(const std::string& s) const { *err << "warning: " << s << '\n'; }
};

class Workbench {
 public:
  Workbench(RunConfig config, bool force = false, Console console = {})
      : config_(std::move(config)), force_(force), console_(console) {
    config_.validate();
    hash_ = config_hash(config_);
    root_ = config_.output_root;
    fs::create_directories(root_);
  }

  const RunConfig& config() const { return config_; }
  const std::string& hash() const { return hash_; }
  const fs::path& root() const { return root_; }
  fs::path model_dir(const std::string& model_id) const { return root_ / model_tag(model_id); }
  fs::path instruction_path(const std::string& task_id, LengthRegime regime) const {
    return root_ / "instructions" / (task_id + "." + to_string(regime) + ".json");
  }

  std::vector<TaskDataset> load_tasks() const {
    std::vector<TaskDataset> tasks;
    for (const auto& path : config_.tasks) {
      std::vector<std::string> warnings;
      tasks.push_back(load_task(path, &warnings));
      for (const auto& w : warnings) console_.warn(w);
    }
    return tasks;
  }

  std::unique_ptr<ModelGateway> open(const std::string& model_id) const {
    return open_model(model_id, config_.precision == "f32" ? Precision::f32 : Precision::f64);
  }

  ReportStore store(const std::string& model_id, const std::string& name) const {
    ReportStore s(model_dir(model_id) / (name + ".jsonl"));
    s.check_config_hash(hash_, force_);
    return s;
  }

  // ---- generate-instructions ------------------------------------------------
  // Returns the number of tasks that failed. Transport failures propagate.
  int generate_instructions(InstructionGenerator& generator) {
    int failures = 0;
    fs::create_directories(root_ / "instructions");
    for (const auto& task : load_tasks()) {
      try {
        const auto sp = split(task, config_.seeds.split);
        auto gw = open(config_.models.front());
        for (auto regime : {LengthRegime::short_form, LengthRegime::long_form}) {
          GenerationOptions opts;
          opts.regime = regime;
          opts.rounds = config_.budgets.generation_rounds;
          opts.shots = config_.budgets.shots;
          opts.seed = derive_seed(config_.seeds.generation, task.task_id);
          opts.short_max_tokens = static_cast<std::size_t>(config_.budgets.short_max_tokens);
          std::vector<std::string> warnings;
          auto set = generate_instructions_for(task, sp, generator, opts, *gw, warnings);
          for (const auto& w : warnings) console_.warn(w);
          auto j = to_json(set);
          j["config_hash"] = hash_;
          std::ofstream out(instruction_path(task.task_id, regime));
          out << j.dump(2) << '\n';
          console_.info(task.task_id + " " + to_string(regime) + ": " + std::to_string(set.instructions.size()) +
                        " instructions from " + std::to_string(set.raw_generations) + " generations");
        }
      } catch (const TransportError&) {
        throw;
      } catch (const Error& e) {
        console_.warn(task.task_id + ": " + e.what());
        ++failures;
      }
    }
    return failures;
  }

  std::vector<InstructionSet> load_instruction_sets(const std::vector<TaskDataset>& tasks) const {
    std::vector<InstructionSet> sets;
    for (const auto& t : tasks)
      for (auto regime : {LengthRegime::short_form, LengthRegime::long_form}) {
        auto path = instruction_path(t.task_id, regime);
        if (!fs::exists(path)) continue;
        std::ifstream in(path);
        nlohmann::json j;
        in >> j;
        if (j.value("config_hash", hash_) != hash_ && !force_)
          throw ConfigError(path.string() + " was produced by a different config (use --force to mix)");
        sets.push_back(instruction_set_from_json(j));
      }
    return sets;
  }

  // ---- build-cache ----------------------------------------------------------
  void build_cache() {
    if (config_.corpus.empty()) throw ConfigError("no corpus configured");
    std::vector<std::string> corpus;
    {
      std::ifstream in(config_.corpus);
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) corpus.push_back(line);
    }
    for (const auto& m : config_.models) {
      auto gw = open(m);
      auto cache = build_corpus_cache(*gw, corpus, static_cast<std::size_t>(config_.budgets.cache_target),
                                      static_cast<std::size_t>(config_.budgets.cache_max_tokens), config_.corpus);
      fs::create_directories(model_dir(m));
      save_corpus_cache(cache, (model_dir(m) / "cache.jsonl").string());
      console_.info(m + ": cached " + std::to_string(cache.entries.size()) + " corpus prefixes");
    }
  }

  // ---- train: activations and CIE -------------------------------------------
  // Returns the number of (task, form) cells skipped because of errors.
  int train() {
    int skipped = 0;
    const auto tasks = load_tasks();
    const auto sets = load_instruction_sets(tasks);
    for (const auto& m : config_.models) {
      auto gw = open(m);
      if (config_.budgets.head_set_size > gw->profile().total_heads())
        throw ConfigError("head_set_size " + std::to_string(config_.budgets.head_set_size) + " exceeds the " +
                          std::to_string(gw->profile().total_heads()) + " heads of " + m);
      auto acts = store(m, "activations");
      auto cies = store(m, "cie");
      auto tops = store(m, "top_instructions");
      auto bases = store(m, "baselines");
      std::optional<CorpusCache> cache;
      if (fs::exists(model_dir(m) / "cache.jsonl"))
        cache = load_corpus_cache((model_dir(m) / "cache.jsonl").string(), gw->profile().model_id);
      std::vector<ScoredInstruction> pool;
      bool pool_ready = false;
      for (const auto& task : tasks) {
        try {
          train_demo(task, *gw, acts, cies);
        } catch (const Error& e) {
          console_.warn(m + " " + task.task_id + " demo: " + e.what());
          ++skipped;
        }
        for (auto regime : {LengthRegime::short_form, LengthRegime::long_form}) {
          const InstructionSet* set = nullptr;
          for (const auto& s : sets)
            if (s.task_id == task.task_id && s.regime == regime) set = &s;
          if (!set) {
            console_.warn(m + " " + task.task_id + " " + to_string(regime) + ": no instruction set, skipped");
            ++skipped;
            continue;
          }
          if (!pool_ready) {
            pool = score_instruction_pool(sets, *gw);
            pool_ready = true;
          }
          try {
            train_instruction(task, *set, *gw, acts, cies, tops, bases, cache ? &*cache : nullptr, pool);
          } catch (const Error& e) {
            console_.warn(m + " " + task.task_id + " " + to_string(regime) + ": " + e.what());
            ++skipped;
          }
        }
      }
    }
    return skipped;
  }

  // ---- select-heads and FV assembly -----------------------------------------
  void select_heads_and_build() {
    const auto tasks = load_tasks();
    for (const auto& m : config_.models) {
      auto gw = open(m);
      const auto& profile = gw->profile();
      auto acts = store(m, "activations");
      auto cies = store(m, "cie");
      auto heads = store(m, "heads");
      auto fvs = store(m, "fv");
      std::vector<CieTensor> tensors;
      for (const auto& r : cies.records()) tensors.push_back(cie_tensor_from_json(r.payload));
      const int k = config_.budgets.head_set_size;

      auto family = [&](bool instruction, const char* name) -> std::optional<std::map<HeadId, double>> {
        try {
          return aggregate_cie(tensors, instruction);
        } catch (const AggregationError& e) {
          console_.warn(m + " " + name + " heads: " + e.what());
          return std::nullopt;
        }
      };
      auto demo_agg = family(false, "demo");
      auto instr_agg = family(true, "instruction");
      nlohmann::json record{{"model_id", profile.model_id}, {"n_layers", profile.n_layers}};
      auto put_family = [&](const char* name, const std::optional<std::map<HeadId, double>>& agg,
                            HeadSetProvenance prov) -> std::optional<HeadSet> {
        if (!agg) return std::nullopt;
        nlohmann::json scores = nlohmann::json::object();
        for (const auto& [h, v] : *agg) scores[h.str()] = v;
        HeadSet top = select_heads(*agg, k, HeadSelectionMode::top);
        top.provenance = prov;
        record[name] = {{"aggregate", scores},
                        {"top", to_json(top)},
                        {"least_important", to_json(select_heads(*agg, k, HeadSelectionMode::least_important_abs))},
                        {"bottom", to_json(select_heads(*agg, k, HeadSelectionMode::bottom))}};
        return top;
      };
      auto demo_heads = put_family("demo", demo_agg, HeadSetProvenance::demo);
      auto instr_heads = put_family("instruction", instr_agg, HeadSetProvenance::instruction);
      heads.put("heads", record, hash_, true);

      for (const auto& task : tasks) {
        auto get_summary = [&](ActivationForm f) -> std::optional<ActivationSummary> {
          auto j = acts.get(task.task_id + "|" + to_string(f));
          if (!j) return std::nullopt;
          auto s = activation_summary_from_json(*j);
          if (!s.eligible) return std::nullopt;
          return s;
        };
        auto demo = get_summary(ActivationForm::demo);
        auto shrt = get_summary(ActivationForm::instruction_short);
        auto lng = get_summary(ActivationForm::instruction_long);
        auto put_fv = [&](const std::string& kind, FunctionVector fv) {
          nlohmann::json j = to_json(fv);
          j["fv_kind"] = kind;
          fvs.put(task.task_id + "|" + kind, j, hash_, true);
        };
        std::optional<FunctionVector> instr_short, instr_long;
        if (demo && demo_heads) put_fv("demo", build_fv(*demo_heads, *demo));
        if (shrt && instr_heads) put_fv("instruction_short", *(instr_short = build_fv(*instr_heads, *shrt)));
        if (lng && instr_heads) put_fv("instruction_long", *(instr_long = build_fv(*instr_heads, *lng)));
        std::optional<ActivationSummary> instr_mean = average_summaries(shrt, lng);
        if (instr_mean && instr_heads) put_fv("instruction", build_fv(*instr_heads, *instr_mean));
        // Incongruent: one presentation's heads with the other's activations.
        if (instr_mean && demo_heads) put_fv("demo_heads_instruction_acts", build_fv(*demo_heads, *instr_mean));
        if (demo && instr_heads) put_fv("instruction_heads_demo_acts", build_fv(*instr_heads, *demo));
        // Controls.
        if (demo && demo_agg) {
          put_fv("demo_least_important", build_fv(select_heads(*demo_agg, k, HeadSelectionMode::least_important_abs), *demo));
          put_fv("demo_bottom", build_fv(select_heads(*demo_agg, k, HeadSelectionMode::bottom), *demo));
        }
        if (instr_mean && instr_agg) {
          put_fv("instruction_least_important",
                 build_fv(select_heads(*instr_agg, k, HeadSelectionMode::least_important_abs), *instr_mean));
          put_fv("instruction_bottom", build_fv(select_heads(*instr_agg, k, HeadSelectionMode::bottom), *instr_mean));
        }
      }
      if (demo_heads && instr_heads) {
        auto o = head_overlap(*demo_heads, *instr_heads, profile.model_id);
        console_.info(m + ": " + std::to_string(o.shared.size()) + " of " + std::to_string(k) +
                      " top heads shared between demonstrations and instructions");
      }
    }
  }

  // ---- evaluate ---------------------------------------------------------------
  int intervention_layer(const ModelProfile& p) const {
    return config_.layer ? *config_.layer : default_intervention_layer(p.n_layers);
  }

  void evaluate_all() {
    const auto tasks = load_tasks();
    for (const auto& m : config_.models) {
      auto gw = open(m);
      const auto& profile = gw->profile();
      auto fvs = store(m, "fv");
      auto evals = store(m, "eval");
      const int layer = intervention_layer(profile);
      for (const auto& task : tasks) {
        const auto sp = split(task, config_.seeds.split);
        auto fv_of = [&](const std::string& kind) -> std::optional<FunctionVector> {
          auto j = fvs.get(task.task_id + "|" + kind);
          if (!j) return std::nullopt;
          return function_vector_from_json(*j);
        };
        for (Regime regime : config_.regimes) {
          auto run = [&](const std::string& label, std::vector<PlannedFv> plan, bool sweep) {
            const std::string key = task.task_id + "|" + to_string(regime) + "|" + label;
            if (evals.contains(key)) return;
            EvalSetting s;
            s.regime = regime;
            s.shots = config_.budgets.shots;
            s.label = label;
            s.fv_plan = std::move(plan);
            s.baseline_only = s.fv_plan.empty();
            EvalReport r = evaluate(task, sp, s, *gw, config_.seeds.evaluation);
            if (sweep && !s.baseline_only) {
              const LayerRange range = s.fv_plan.size() > 1 ? joint_layer_range(profile.n_layers)
                                                             : LayerRange{0, profile.n_layers - 1};
              r.per_layer_curve =
                  sweep_layers(task, sp, s, *gw, range, config_.seeds.evaluation).per_layer_curve;
            }
            evals.put(key, to_json(r), hash_);
          };
          run("baseline", {}, false);
          for (const std::string kind :
               {"demo", "instruction", "instruction_short", "instruction_long", "demo_heads_instruction_acts",
                "instruction_heads_demo_acts", "demo_least_important", "demo_bottom", "instruction_least_important",
                "instruction_bottom"}) {
            if (auto fv = fv_of(kind)) run(kind + std::string("_fv"), {{*fv, layer}}, config_.sweep);
          }
          auto demo = fv_of("demo");
          auto instr = fv_of("instruction");
          if (demo && instr) run("joint", {{*demo, layer}, {*instr, layer}}, config_.sweep);
          if (demo) run("demo_twice", {{*demo, layer}, {*demo, layer}}, false);
          if (instr) run("instruction_twice", {{*instr, layer}, {*instr, layer}}, false);
        }
      }
      console_.info(m + ": " + std::to_string(evals.size()) + " evaluation records");
    }
  }

  // ---- steer --------------------------------------------------------------------
  void steer() {
    if (!config_.steer) throw ConfigError("no steer section (source and target models) configured");
    const auto tasks = load_tasks();
    auto source = open(config_.steer->source);
    auto target = open(config_.steer->target);
    const auto& sp_src = source->profile();
    const auto& sp_tgt = target->profile();
    if (sp_src.d_model != sp_tgt.d_model || sp_src.n_layers != sp_tgt.n_layers)
      throw CompatibilityError("cannot steer " + sp_tgt.model_id + " (d_model " + std::to_string(sp_tgt.d_model) +
                               ", " + std::to_string(sp_tgt.n_layers) + " layers) with vectors from " +
                               sp_src.model_id + " (d_model " + std::to_string(sp_src.d_model) + ", " +
                               std::to_string(sp_src.n_layers) + " layers)");
    ReportStore fvs(model_dir(config_.steer->source) / "fv.jsonl");
    fvs.check_config_hash(hash_, force_);
    ReportStore out(root_ / "steer.jsonl");
    out.check_config_hash(hash_, force_);
    const int layer = intervention_layer(sp_tgt);
    for (const auto& task : tasks) {
      const auto sp = split(task, config_.seeds.split);
      for (Regime regime : config_.regimes) {
        EvalSetting base;
        base.regime = regime;
        base.shots = config_.budgets.shots;
        base.baseline_only = true;
        base.label = "baseline";
        out.put(task.task_id + "|" + to_string(regime) + "|baseline",
                to_json(evaluate(task, sp, base, *target, config_.seeds.evaluation)), hash_, true);
        for (const std::string kind : {"demo", "instruction"}) {
          auto j = fvs.get(task.task_id + "|" + kind);
          if (!j) continue;
          EvalSetting s = base;
          s.baseline_only = false;
          s.label = "steer_" + kind + "_fv";
          auto r = steer_cross_model(function_vector_from_json(*j), sp_src, layer, s, task, sp, *target,
                                     config_.seeds.evaluation);
          out.put(task.task_id + "|" + to_string(regime) + "|" + s.label, to_json(r), hash_, true);
        }
      }
    }
    console_.info("steering records written to " + (root_ / "steer.jsonl").string());
  }

  // ---- analyze -------------------------------------------------------------------
  fs::path analyze() {
    std::vector<fs::path> dirs;
    for (const auto& m : config_.models) dirs.push_back(model_dir(m));
    auto loaded = load_analysis_inputs(dirs, root_ / "steer.jsonl", hash_, force_);
    const fs::path dir = root_ / "analysis" / hash_.substr(0, 12);
    emit_tables_and_plots(loaded.inputs, dir, loaded.n_layers);
    console_.info("analysis written to " + (dir / "index.html").string());
    return dir;
  }

 private:
  InstructionSet generate_instructions_for(const TaskDataset& task, const SplitSpec& sp, InstructionGenerator& gen,
                                           const GenerationOptions& opts, const ModelGateway& gw,
                                           std::vector<std::string>& warnings) {
    return fvlab::generate_instructions(task, sp, gen, opts,
                                        [&](const std::string& s) { return gw.token_length(s); }, &warnings);
  }

  static std::optional<ActivationSummary> average_summaries(const std::optional<ActivationSummary>& a,
                                                            const std::optional<ActivationSummary>& b) {
    if (a && b) {
      ActivationSummary s = *a;
      for (auto& [h, v] : s.means) v = 0.5 * (v + b->means.at(h));
      s.prompt_count = a->prompt_count + b->prompt_count;
      s.prompt_hash = git_blob_hash(a->prompt_hash + b->prompt_hash);
      return s;
    }
    return a ? a : b;
  }

  // Successful clean K-shot prompts from the train split, contexts resampled per query.
  void train_demo(const TaskDataset& task, const ModelGateway& gw, ReportStore& acts, ReportStore& cies) {
    const std::string akey = task.task_id + "|demo";
    const std::string ckey = task.task_id + "|demo|shuffled_demo";
    if (acts.contains(akey) && cies.contains(ckey)) return;
    const auto sp = split(task, config_.seeds.split);
    const int budget = config_.budgets.activation_prompts;
    const std::uint64_t seed = derive_seed(config_.seeds.prompts, task.task_id + "|demo");
    Rng rng(seed);
    std::vector<PromptInstance> ok;
    int attempts = 0, hits = 0;
    const int max_attempts = 20 * budget;
    while (static_cast<int>(ok.size()) < budget && attempts < max_attempts) {
      const std::size_t q = sp.train[rng.below(sp.train.size())];
      auto ctx = sample_context(sp.train, q, config_.budgets.shots, rng);
      auto p = render_demo_prompt(task, ctx, q, false, 0);
      ++attempts;
      if (gw.predicts_target(p)) {
        ++hits;
        ok.push_back(std::move(p));
      }
    }
    const double acc = static_cast<double>(hits) / attempts;
    const bool eligible = acc > chance_level(task, config_.open_generation_chance) &&
                          static_cast<int>(ok.size()) == budget;
    ActivationSummary summary;
    summary.task_id = task.task_id;
    summary.model_id = gw.profile().model_id;
    summary.form = ActivationForm::demo;
    if (!ok.empty()) summary = compute_mean_activations(ok, gw, task.task_id, ActivationForm::demo);
    summary.eligible = eligible;
    summary.seed = seed;
    auto sj = to_json(summary);
    sj["informative_accuracy"] = acc;
    acts.put(akey, sj, hash_, true);
    if (!eligible) {
      console_.warn(task.task_id + " demo: accuracy " + detail::fmt(acc) + " with " + std::to_string(ok.size()) +
                    " successful prompts; flagged ineligible");
      if (ok.empty()) return;
    }

    std::vector<PromptInstance> shuffled;
    Rng crng(derive_seed(seed, "cie"));
    for (int i = 0; i < config_.budgets.cie_prompts; ++i) {
      const std::size_t q = sp.train[crng.below(sp.train.size())];
      auto ctx = sample_context(sp.train, q, config_.budgets.shots, crng);
      shuffled.push_back(render_demo_prompt(task, ctx, q, true, crng.next_u64()));
    }
    CieTensor t = compute_cie_tensor(shuffled, summary, gw, CieCondition::shuffled_demo);
    t.eligible = eligible;
    t.seed = seed;
    cies.put(ckey, to_json(t), hash_, true);
  }

  void train_instruction(const TaskDataset& task, const InstructionSet& set, const ModelGateway& gw,
                         ReportStore& acts, ReportStore& cies, ReportStore& tops, ReportStore& bases,
                         const CorpusCache* cache, const std::vector<ScoredInstruction>& pool) {
    const ActivationForm form =
        set.regime == LengthRegime::short_form ? ActivationForm::instruction_short : ActivationForm::instruction_long;
    const std::string akey = task.task_id + "|" + to_string(form);
    bool done = acts.contains(akey);
    for (auto m : config_.baselines) done = done && cies.contains(akey + "|" + to_string(m));
    if (done) return;

    const auto sp = split(task, config_.seeds.split);
    const int J = config_.budgets.top_instructions;
    const std::uint64_t seed = derive_seed(config_.seeds.prompts, akey);
    ActivationSummary summary;
    summary.task_id = task.task_id;
    summary.model_id = gw.profile().model_id;
    summary.form = form;
    summary.seed = seed;
    TopInstructions top;
    try {
      top = select_top_instructions(task, sp, set, gw, J, config_.budgets.min_successes);
    } catch (const TaskIneligibleError& e) {
      summary.eligible = false;
      acts.put(akey, to_json(summary), hash_, true);
      throw;
    }
    tops.put(akey, to_json(top), hash_, true);
    const double best = top.ranked.front().train_accuracy;

    const int per_instruction = config_.budgets.activation_prompts / J;
    std::vector<PromptInstance> ok;
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& ins : top.ranked) {
      std::vector<std::size_t> order = sp.train;
      Rng rng(derive_seed(seed, ins.spec_id));
      rng.shuffle(order);
      int taken = 0;
      for (std::size_t q : order) {
        if (taken == per_instruction) break;
        auto p = render_instruction_prompt(ins.text, task.pairs[q].first, task.pairs[q].second, ins.spec_id);
        if (gw.predicts_target(p)) {
          ok.push_back(std::move(p));
          ++taken;
        }
      }
      counts[ins.spec_id] = taken;
      if (taken < per_instruction)
        throw TaskIneligibleError(task.task_id + ": instruction " + ins.spec_id + " has only " +
                                  std::to_string(taken) + " successful prompts");
    }
    summary = compute_mean_activations(ok, gw, task.task_id, form);
    summary.seed = seed;
    summary.eligible = best > chance_level(task, config_.open_generation_chance);
    auto sj = to_json(summary);
    sj["informative_accuracy"] = best;
    sj["prompts_per_instruction"] = counts;
    acts.put(akey, sj, hash_, true);

    const int per_cie = config_.budgets.cie_prompts / J;
    for (auto method : config_.baselines) {
      const std::string ckey = akey + "|" + to_string(method);
      if (cies.contains(ckey)) continue;
      if (method == BaselineMethod::real_text && !cache) {
        console_.warn(task.task_id + ": no corpus cache, real_text condition skipped");
        continue;
      }
      std::vector<PromptInstance> prompts;
      nlohmann::json used = nlohmann::json::array();
      for (const auto& ins : top.ranked) {
        std::vector<BaselineSpec> specs;
        const auto bseed = derive_seed(config_.seeds.baselines, ins.spec_id);
        switch (method) {
          case BaselineMethod::equiprobable:
            for (int i = 0; i < per_cie; ++i)
              specs.push_back(sample_equiprobable(ins.text, ins.spec_id, gw, derive_seed(bseed, "sample", i),
                                                  config_.equiprobable));
            break;
          case BaselineMethod::real_text:
            specs = sample_real_text(ins.text, ins.spec_id, gw, *cache, static_cast<std::size_t>(per_cie),
                                     static_cast<std::size_t>(config_.budgets.candidate_pool));
            break;
          case BaselineMethod::other_task:
            specs = sample_other_task(ins.text, ins.spec_id, task.task_id, pool, gw, static_cast<std::size_t>(per_cie),
                                      static_cast<std::size_t>(config_.budgets.candidate_pool));
            break;
        }
        Rng qrng(derive_seed(bseed, std::string("queries-") + to_string(method)));
        for (const auto& b : specs) {
          const std::size_t q = sp.train[qrng.below(sp.train.size())];
          prompts.push_back(render_baseline_prompt(b, task.pairs[q].first, task.pairs[q].second, ins.spec_id));
          used.push_back(to_json(b));
        }
      }
      CieTensor t = compute_cie_tensor(prompts, summary, gw,
                                       method == BaselineMethod::equiprobable ? CieCondition::equiprobable
                                       : method == BaselineMethod::real_text  ? CieCondition::real_text
                                                                              : CieCondition::other_task);
      t.eligible = summary.eligible;
      t.seed = seed;
      bases.put(ckey, used, hash_, true);
      cies.put(ckey, to_json(t), hash_, true);
    }
  }

  RunConfig config_;
  bool force_ = false;
  Console console_;
  std::string hash_;
  fs::path root_;
};

}  // namespace fvlab
