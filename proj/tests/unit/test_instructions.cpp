#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "fvlab/instructions.hpp"
#include "fvlab/miniature.hpp"

using namespace fvlab;

namespace {

TaskDataset task() {
  const auto& w = miniature_words();
  TaskDataset t;
  t.task_id = "shift";
  for (std::size_t i = 0; i < 30; ++i) t.pairs.emplace_back(w[i], w[i + 1]);
  return t;
}

class ScriptedGenerator final : public InstructionGenerator {
 public:
  explicit ScriptedGenerator(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string model_id() const override { return "scripted"; }
  std::string endpoint() const override { return "scripted"; }
  std::string complete(const GenerationRequest& r) override {
    requests.push_back(r);
    return replies_[static_cast<std::size_t>(r.round) % replies_.size()];
  }
  std::vector<GenerationRequest> requests;

 private:
  std::vector<std::string> replies_;
};

std::size_t word_count(const std::string& s) {
  std::size_t n = 0;
  bool in = false;
  for (char c : s) {
    if (c == ' ') in = false;
    else if (!in) { in = true; ++n; }
  }
  return n;
}

}  // namespace

TEST(InstructionList, ParsesNumberedItems) {
  auto items = parse_instruction_list(" Give the next word.\n2. Say what follows\n3) \"Quoted one\"\n\nnot numbered\n4.   ");
  EXPECT_EQ(items, (std::vector<std::string>{"Give the next word.", "Say what follows", "Quoted one"}));
  EXPECT_TRUE(parse_instruction_list("").empty());
  EXPECT_TRUE(parse_instruction_list("\n\n").empty());
}

TEST(InstructionList, GenerationPromptEndsWithListCue) {
  auto p = build_generation_prompt("Q: a\nA: b\n\n", LengthRegime::short_form);
  EXPECT_TRUE(p.ends_with("\n\n1."));
  EXPECT_NE(p.find("Q: a\nA: b"), std::string::npos);
  EXPECT_NE(build_generation_prompt("", LengthRegime::short_form), build_generation_prompt("", LengthRegime::long_form));
}

TEST(Generation, DedupesFiltersAndCounts) {
  auto t = task();
  auto sp = split(t, 1);
  ScriptedGenerator gen({" Say the next word\n2. Say the next word\n3. one two three four five six seven eight",
                         "garbage without numbers\n", " Give the following word"});
  GenerationOptions o;
  o.rounds = 4;
  o.short_max_tokens = 6;
  std::vector<std::string> warnings;
  auto set = generate_instructions(t, sp, gen, o, word_count, &warnings);
  ASSERT_EQ(gen.requests.size(), 4u);
  for (const auto& r : gen.requests) EXPECT_EQ(r.task_id, "shift");
  // Round 1's lone line is taken as item 1; rounds 0 and 3 repeat round 0.
  EXPECT_EQ(set.instructions.size(), 3u);
  EXPECT_EQ(set.instructions[0].text, "Say the next word");
  EXPECT_EQ(set.instructions[1].text, "garbage without numbers");
  EXPECT_EQ(set.instructions[2].text, "Give the following word");
  EXPECT_EQ(set.filtered_too_long, 1);
  EXPECT_EQ(set.instructions[0].id, "shift/short/000");
  EXPECT_FALSE(warnings.empty());
  // Demonstrations come from the train split only.
  for (const auto& r : gen.requests)
    for (std::size_t q : sp.test) EXPECT_EQ(r.prompt.find("Q: " + t.pairs[q].first + "\n"), std::string::npos);
}

TEST(Generation, LongRegimeKeepsLongItems) {
  auto t = task();
  ScriptedGenerator gen({" one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen "
                         "sixteen seventeen"});
  GenerationOptions o;
  o.rounds = 1;
  o.regime = LengthRegime::long_form;
  auto set = generate_instructions(t, split(t, 1), gen, o, word_count);
  EXPECT_EQ(set.instructions.size(), 1u);
  EXPECT_EQ(set.filtered_too_long, 0);
}

TEST(Generation, FixtureReplayAndMissingExchange) {
  auto path = (std::filesystem::temp_directory_path() / "fvlab_fixture_test.json").string();
  {
    std::ofstream out(path);
    out << R"({"generator_model": "rec", "exchanges": [
      {"task_id": "shift", "regime": "short", "round": 0, "response": " Next word\n2. Following word"}]})";
  }
  FixtureGenerator gen(path);
  EXPECT_EQ(gen.model_id(), "rec");
  GenerationOptions o;
  o.rounds = 1;
  auto t = task();
  auto set = generate_instructions(t, split(t, 1), gen, o, word_count);
  EXPECT_EQ(set.instructions.size(), 2u);
  EXPECT_EQ(set.generator_model, "rec");
  o.rounds = 2;
  EXPECT_THROW(generate_instructions(t, split(t, 1), gen, o, word_count), TransportError);
  EXPECT_THROW(FixtureGenerator("/nonexistent/fixture.json"), TransportError);
  std::filesystem::remove(path);
}

TEST(Generation, HttpGeneratorAgainstLocalServer) {
  httplib::Server server;
  std::string seen_auth;
  nlohmann::json seen_body;
  server.Post("/v1/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    seen_body = nlohmann::json::parse(req.body);
    res.set_content(R"({"choices": [{"text": " Say the next word\n2. Give what follows"}]})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpGenerator::Options o;
  o.base_url = "http://127.0.0.1:" + std::to_string(port);
  o.api_key = "secret";
  o.model = "gen-model";
  HttpGenerator gen(o);
  GenerationOptions go;
  go.rounds = 1;
  auto t = task();
  auto set = generate_instructions(t, split(t, 1), gen, go, word_count);
  server.stop();
  th.join();
  EXPECT_EQ(set.instructions.size(), 2u);
  EXPECT_EQ(seen_auth, "Bearer secret");
  EXPECT_EQ(seen_body.at("model"), "gen-model");
  EXPECT_TRUE(seen_body.at("prompt").get<std::string>().ends_with("1."));
}

TEST(Generation, HttpTransportFailureIsTyped) {
  httplib::Server server;
  const int port = server.bind_to_any_port("127.0.0.1");  // bound, never listening
  HttpGenerator::Options o;
  o.base_url = "http://127.0.0.1:" + std::to_string(port);
  o.retries = 1;
  o.timeout_seconds = 1;
  HttpGenerator gen(o);
  try {
    gen.complete({"shift", LengthRegime::short_form, 0, "prompt"});
    FAIL() << "expected TransportError";
  } catch (const TransportError& e) {
    EXPECT_EQ(e.endpoint(), o.base_url + "/v1/completions");
  }
}

TEST(Generation, HttpClientErrorIsNotRetried) {
  httplib::Server server;
  int calls = 0;
  server.Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 401;
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  HttpGenerator::Options o;
  o.base_url = "http://127.0.0.1:" + std::to_string(port);
  o.retries = 3;
  HttpGenerator gen(o);
  EXPECT_THROW(gen.complete({"shift", LengthRegime::short_form, 0, "p"}), TransportError);
  server.stop();
  th.join();
  EXPECT_EQ(calls, 1);
}

TEST(TopInstructions, RanksByTrainAccuracyAndEnforcesMinimum) {
  auto g = open_model("miniature");
  auto t = task();
  auto sp = split(t, 1);
  // Relabel targets with the model's own zero-shot answer under instruction
  // "a": that instruction is then right on every train query.
  InstructionSet set;
  set.task_id = "shift";
  const auto& w = miniature_words();
  for (int i = 0; i < 6; ++i) set.instructions.push_back({"shift/short/00" + std::to_string(i), w[40 + i] + " " + w[50 + i]});
  TaskDataset own = t;
  for (std::size_t q : sp.train) {
    auto p = render_instruction_prompt(set.instructions[0].text, t.pairs[q].first);
    std::vector<TokenId> top{ModelGateway::argmax(g->run_with_interventions(p, {}))};
    own.pairs[q].second = g->decode(top);
  }
  auto top = select_top_instructions(own, sp, set, *g, 1, 1);
  ASSERT_EQ(top.ranked.size(), 1u);
  EXPECT_DOUBLE_EQ(top.ranked[0].train_accuracy, 1.0);
  EXPECT_EQ(top.ranked[0].successes, static_cast<int>(sp.train.size()));
  EXPECT_THROW(select_top_instructions(t, sp, set, *g, 7, 1), TaskIneligibleError);
  auto back = top_instructions_from_json(nlohmann::json::parse(to_json(top).dump()));
  EXPECT_EQ(back.ranked[0].spec_id, top.ranked[0].spec_id);
}

TEST(InstructionSetJson, RoundTrips) {
  InstructionSet s;
  s.task_id = "t";
  s.regime = LengthRegime::long_form;
  s.instructions = {{"t/long/000", "Do the thing."}};
  s.generator_model = "g";
  s.rounds = 3;
  s.filtered_too_long = 1;
  auto back = instruction_set_from_json(to_json(s));
  EXPECT_EQ(back.regime, LengthRegime::long_form);
  EXPECT_EQ(back.instructions[0].text, "Do the thing.");
  EXPECT_EQ(back.rounds, 3);
}
