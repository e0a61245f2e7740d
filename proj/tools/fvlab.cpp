// fvlab: command-line front end for the function-vector workbench.
//
// Exit codes: 0 success, 1 usage / data / config error, 2 generator transport
// failure, 3 model compatibility failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>

#include "fvlab/toy.hpp"
#include "fvlab/workbench.hpp"

using namespace fvlab;

namespace {

struct Overrides {
  std::string config_path;
  bool force = false;
  std::vector<std::string> models;
  std::vector<std::string> tasks;
  std::string output_root;
  std::optional<int> layer;
  bool sweep = false;
  std::string precision;
  std::string generator_fixture;
  std::string generator_url;
  std::string generator_model;
  std::string corpus;
  std::optional<std::uint64_t> seed;
  Budgets budgets;
  std::string steer_source, steer_target;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "Run configuration (JSON)");
  cmd->add_flag("--force", o.force, "Accept stored records produced under a different config");
  cmd->add_option("-m,--model", o.models, "Model id: 'miniature', 'miniature:<seed>' or a checkpoint path");
  cmd->add_option("-t,--task", o.tasks, "Task file (JSON)");
  cmd->add_option("-o,--output-root", o.output_root, "Directory for all outputs");
  cmd->add_option("--precision", o.precision, "Numeric precision of the subject model")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--seed", o.seed, "Base seed; derives the split, prompt, generation, baseline and evaluation seeds");
  cmd->add_option("--activation-prompts", o.budgets.activation_prompts, "Successful prompts averaged per activation mean")
      ->capture_default_str()->group("Budgets");
  cmd->add_option("--cie-prompts", o.budgets.cie_prompts, "Uninformative prompts per CIE cell")->capture_default_str()->group("Budgets");
  cmd->add_option("--top-instructions", o.budgets.top_instructions, "Instructions kept per task and length")
      ->capture_default_str()->group("Budgets");
  cmd->add_option("--min-successes", o.budgets.min_successes, "Successful prompts an instruction needs to be kept")
      ->capture_default_str()->group("Budgets");
  cmd->add_option("--heads", o.budgets.head_set_size, "Heads per function vector")->capture_default_str()->group("Budgets");
  cmd->add_option("--shots", o.budgets.shots, "Demonstrations per prompt")->capture_default_str()->group("Budgets");
  cmd->add_option("--rounds", o.budgets.generation_rounds, "Generator rounds per task and length")->capture_default_str()->group("Budgets");
  cmd->add_option("--short-max-tokens", o.budgets.short_max_tokens, "Longest short instruction, in subject tokens")
      ->capture_default_str()->group("Budgets");
  cmd->add_option("--candidate-pool", o.budgets.candidate_pool, "Candidates required by the matched baselines")
      ->capture_default_str()->group("Budgets");
  cmd->add_option("--cache-target", o.budgets.cache_target, "Corpus prefixes to cache")->capture_default_str()->group("Budgets");
  cmd->add_option("--cache-max-tokens", o.budgets.cache_max_tokens, "Longest cached prefix, in tokens")
      ->capture_default_str()->group("Budgets");
}

RunConfig resolve_config(const Overrides& o, CLI::App* cmd) {
  RunConfig c;
  if (!o.config_path.empty()) c = load_run_config(o.config_path);
  if (!o.models.empty()) c.models = o.models;
  if (!o.tasks.empty()) c.tasks = o.tasks;
  if (!o.output_root.empty()) c.output_root = o.output_root;
  if (o.layer) c.layer = o.layer;
  if (o.sweep) c.sweep = true;
  if (!o.precision.empty()) c.precision = o.precision;
  if (!o.generator_fixture.empty()) {
    c.generator.kind = "fixture";
    c.generator.path = o.generator_fixture;
  }
  if (!o.generator_url.empty()) {
    c.generator.kind = "http";
    c.generator.base_url = o.generator_url;
  }
  if (!o.generator_model.empty()) c.generator.model = o.generator_model;
  if (!o.corpus.empty()) c.corpus = o.corpus;
  if (o.seed) {
    c.seeds.split = derive_seed(*o.seed, "split");
    c.seeds.prompts = derive_seed(*o.seed, "prompts");
    c.seeds.generation = derive_seed(*o.seed, "generation");
    c.seeds.baselines = derive_seed(*o.seed, "baselines");
    c.seeds.evaluation = derive_seed(*o.seed, "evaluation");
  }
  // Budget flags override only when given explicitly.
  auto pick = [&](const char* flag, int value, int& field) {
    if (cmd->count(flag) > 0) field = value;
  };
  pick("--activation-prompts", o.budgets.activation_prompts, c.budgets.activation_prompts);
  pick("--cie-prompts", o.budgets.cie_prompts, c.budgets.cie_prompts);
  pick("--top-instructions", o.budgets.top_instructions, c.budgets.top_instructions);
  pick("--min-successes", o.budgets.min_successes, c.budgets.min_successes);
  pick("--heads", o.budgets.head_set_size, c.budgets.head_set_size);
  pick("--shots", o.budgets.shots, c.budgets.shots);
  pick("--rounds", o.budgets.generation_rounds, c.budgets.generation_rounds);
  pick("--short-max-tokens", o.budgets.short_max_tokens, c.budgets.short_max_tokens);
  pick("--candidate-pool", o.budgets.candidate_pool, c.budgets.candidate_pool);
  pick("--cache-target", o.budgets.cache_target, c.budgets.cache_target);
  pick("--cache-max-tokens", o.budgets.cache_max_tokens, c.budgets.cache_max_tokens);
  if (!o.steer_source.empty() || !o.steer_target.empty())
    c.steer = SteerConfig{o.steer_source, o.steer_target};
  return c;
}

std::unique_ptr<InstructionGenerator> make_generator(const RunConfig& c) {
  if (c.generator.kind == "http") {
    HttpGenerator::Options opts;
    opts.base_url = c.generator.base_url;
    opts.path = c.generator.api_path;
    if (!c.generator.model.empty()) opts.model = c.generator.model;
    if (const char* key = std::getenv("FVLAB_GENERATOR_API_KEY")) opts.api_key = key;
    if (opts.base_url.empty()) throw ConfigError("http generator needs a base_url");
    return std::make_unique<HttpGenerator>(opts);
  }
  if (c.generator.path.empty()) throw ConfigError("fixture generator needs a path");
  return std::make_unique<FixtureGenerator>(c.generator.path);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Writes the synthetic tasks, corpus, generator fixture, trained checkpoints
// and a run config pointing at them.
void make_toy(const fs::path& dir, const ToyOptions& o) {
  fs::create_directories(dir / "tasks");
  auto bundle = make_toy_bundle(o);
  nlohmann::json config;
  config["tasks"] = nlohmann::json::array();
  for (const auto& t : bundle.tasks) {
    write_json(dir / "tasks" / (t.task_id + ".json"), task_to_json(t));
    config["tasks"].push_back("tasks/" + t.task_id + ".json");
  }
  {
    std::ofstream out(dir / "corpus.txt");
    for (const auto& s : bundle.corpus) out << s << '\n';
  }
  write_json(dir / "fixture.json", bundle.fixture);
  std::cout << "training toy models (" << o.base_steps << " + " << o.post_steps << " steps)\n";
  auto models = train_toy_models(bundle, o, [](const std::string& stage, int step, int total, double loss) {
    if (step % 100 == 0 || step == total)
      std::cout << "  " << stage << " " << step << "/" << total << " loss " << detail::fmt(loss) << '\n' << std::flush;
  });
  save_checkpoint(models.base, (dir / "toy-base.ckpt").string());
  save_checkpoint(models.post, (dir / "toy-post.ckpt").string());
  config["models"] = {"toy-post.ckpt", "toy-base.ckpt"};
  config["output_root"] = "out";
  config["generator"] = {{"kind", "fixture"}, {"path", "fixture.json"}};
  config["corpus"] = "corpus.txt";
  config["steer"] = {{"source", "toy-post.ckpt"}, {"target", "toy-base.ckpt"}};
  write_json(dir / "config.json", config);
  std::cout << "wrote " << (dir / "config.json").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fvlab: extract, evaluate and compare function vectors from demonstrations and instructions"};
  app.require_subcommand(1);
  Overrides o;

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"generate-instructions", "Generate short and long instruction sets for every task"},
      {"build-cache", "Cache corpus prefixes and their log-probabilities for real-text baselines"},
      {"train", "Collect mean head activations and causal indirect effects"},
      {"select-heads", "Aggregate indirect effects, choose head sets and assemble function vectors"},
      {"evaluate", "Evaluate baselines and function-vector interventions on held-out queries"},
      {"steer", "Apply function vectors from one model to another of the same shape"},
      {"analyze", "Write tables, figures and an HTML index"},
      {"run", "All steps in order: generate-instructions through analyze"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    subs[c.name] = sub;
  }
  for (const char* name : {"generate-instructions", "run"}) {
    subs[name]->add_option("--generator-fixture", o.generator_fixture, "Replay recorded generator exchanges");
    subs[name]->add_option("--generator-url", o.generator_url,
                           "Completions endpoint base URL (API key from FVLAB_GENERATOR_API_KEY)");
    subs[name]->add_option("--generator-model", o.generator_model, "Generator model name");
  }
  for (const char* name : {"build-cache", "run"}) subs[name]->add_option("--corpus", o.corpus, "Corpus, one entry per line");
  for (const char* name : {"evaluate", "steer", "run"}) {
    subs[name]->add_option("--layer", o.layer, "Intervention layer (default: round(L/3))");
  }
  for (const char* name : {"evaluate", "run"})
    subs[name]->add_flag("--sweep", o.sweep, "Also sweep the intervention over layers");
  subs["steer"]->add_option("--source", o.steer_source, "Model whose function vectors are applied");
  subs["steer"]->add_option("--target", o.steer_target, "Model being steered");

  ToyOptions toy;
  std::string toy_dir = "toy";
  auto* mk = app.add_subcommand("make-toy", "Build the synthetic demo: tasks, corpus, fixture and two trained models");
  mk->add_option("dir", toy_dir, "Output directory")->capture_default_str();
  mk->add_option("--base-steps", toy.base_steps, "Training steps on demonstrations")->capture_default_str();
  mk->add_option("--post-steps", toy.post_steps, "Further steps mixing in instructions")->capture_default_str();
  mk->add_option("--toy-seed", toy.seed, "Seed for words, tasks and training")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (mk->parsed()) {
      make_toy(toy_dir, toy);
      return 0;
    }
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    Workbench wb(resolve_config(o, cmd), o.force);
    std::cout << "config " << wb.hash().substr(0, 12) << ", output " << wb.root().string() << '\n';
    int problems = 0;
    const bool all = name == "run";
    if (name == "generate-instructions" || all) {
      auto gen = make_generator(wb.config());
      problems += wb.generate_instructions(*gen);
    }
    if (name == "build-cache" || (all && !wb.config().corpus.empty())) wb.build_cache();
    if (name == "train" || all) problems += wb.train();
    if (name == "select-heads" || all) wb.select_heads_and_build();
    if (name == "evaluate" || all) wb.evaluate_all();
    if (name == "steer" || (all && wb.config().steer)) wb.steer();
    if (name == "analyze" || all) wb.analyze();
    if (problems > 0) std::cerr << problems << " task cell(s) skipped; see warnings above\n";
    return 0;
  } catch (const TransportError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const CompatibilityError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
