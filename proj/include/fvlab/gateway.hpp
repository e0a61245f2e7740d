#pragma once

// Uniform access to a causal LM: sequence scoring, final-token head capture,
// head patching and residual injection. All results are returned in 64-bit
// regardless of the backend's precision.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/heads.hpp"
#include "fvlab/tasks.hpp"
#include "fvlab/tokenizer.hpp"
#include "fvlab/transformer.hpp"

namespace fvlab {

using Vector = Eigen::VectorXd;

struct ModelProfile {
  std::string model_id;
  int n_layers = 0;
  int n_heads_per_layer = 0;
  int d_model = 0;
  int vocab_size = 0;
  int max_context = 0;
  std::set<TokenId> added_vocabulary_ids;

  int total_heads() const { return n_layers * n_heads_per_layer; }

  std::vector<HeadId> all_heads() const {
    std::vector<HeadId> heads;
    for (int l = 0; l < n_layers; ++l)
      for (int h = 0; h < n_heads_per_layer; ++h) heads.push_back({l, h});
    return heads;
  }
};

struct InterventionPlan {
  struct Addition {
    int layer;
    Vector vector;
  };
  struct Patch {
    HeadId head;
    Vector vector;
  };
  std::vector<Addition> additions;
  std::vector<Patch> head_patches;

  bool empty() const { return additions.empty() && head_patches.empty(); }

  void validate(const ModelProfile& p) const {
    std::set<HeadId> seen;
    for (const auto& a : additions) {
      if (a.layer < 0 || a.layer >= p.n_layers)
        throw PlanError("addition layer " + std::to_string(a.layer) + " outside [0, " + std::to_string(p.n_layers) +
                        ")");
      if (a.vector.size() != p.d_model) throw PlanError("addition vector length differs from d_model");
    }
    for (const auto& hp : head_patches) {
      if (hp.head.layer < 0 || hp.head.layer >= p.n_layers || hp.head.head < 0 ||
          hp.head.head >= p.n_heads_per_layer)
        throw PlanError("patch targets " + hp.head.str() + " outside the model");
      if (hp.vector.size() != p.d_model) throw PlanError("patch vector length differs from d_model");
      if (!seen.insert(hp.head).second) throw PlanError("more than one patch for " + hp.head.str());
    }
  }
};

struct HeadCapture {
  std::map<HeadId, Vector> heads;  // final-token output of each head, in residual space
  Vector distribution;             // unmodified next-token probabilities
};

class ModelGateway {
 public:
  virtual ~ModelGateway() = default;

  virtual const ModelProfile& profile() const = 0;

  // Token ids for `text`, with the sequence-start token prepended when asked.
  virtual std::vector<TokenId> encode(std::string_view text, bool add_bos = true) const = 0;
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
  virtual TokenId bos() const = 0;

  // tokens[0] must be the sequence start; entry i is log P(tokens[i+1] | tokens[..i]).
  virtual std::vector<double> score_sequence(std::span<const TokenId> tokens) const = 0;

  // log P(. | tokens) over the whole vocabulary.
  virtual Vector next_token_log_probs(std::span<const TokenId> tokens) const = 0;

  virtual HeadCapture capture_head_outputs(const PromptInstance& prompt) const = 0;
  virtual Vector run_with_interventions(const PromptInstance& prompt, const InterventionPlan& plan) const = 0;

  // Residual stream after `layer` at the final token, under `plan`. Test oracles only.
  virtual Vector probe_hidden_state(const PromptInstance& prompt, int layer, const InterventionPlan& plan) const = 0;
  virtual void set_debug_probes(bool enabled) = 0;

  // Model input for a prompt: BOS, then prefix_tokens if set, then the rest of the text.
  std::vector<TokenId> encode_prompt(const PromptInstance& prompt) const {
    if (prompt.prefix_tokens.empty()) return encode(prompt.text, true);
    if (prompt.prefix_length > prompt.text.size() ||
        decode(prompt.prefix_tokens) != std::string_view(prompt.text).substr(0, prompt.prefix_length))
      throw PreconditionError("prompt prefix tokens do not decode to the start of the prompt text");
    std::vector<TokenId> ids{bos()};
    ids.insert(ids.end(), prompt.prefix_tokens.begin(), prompt.prefix_tokens.end());
    auto rest = encode(std::string_view(prompt.text).substr(prompt.prefix_length), false);
    ids.insert(ids.end(), rest.begin(), rest.end());
    return ids;
  }

  // First token of `target` as it is tokenized in continuation after the prompt.
  TokenId first_token_of(const std::string& target, const PromptInstance& context) const {
    if (target.empty()) throw TokenizationError("target must be non-empty");
    const auto prompt_ids = encode(context.text, true);
    const auto full_ids = encode(context.text + target, true);
    std::size_t n = 0;
    while (n < prompt_ids.size() && n < full_ids.size() && prompt_ids[n] == full_ids[n]) ++n;
    if (n >= full_ids.size()) throw TokenizationError("target '" + target + "' tokenizes to nothing");
    return full_ids[n];
  }

  double sequence_log_prob(std::string_view text) const {
    auto ids = encode(text, true);
    double total = 0.0;
    for (double lp : score_sequence(ids)) total += lp;
    return total;
  }

  std::size_t token_length(std::string_view text) const { return encode(text, false).size(); }

  std::vector<std::vector<double>> score_batch(const std::vector<std::vector<TokenId>>& batch) const {
    std::vector<std::vector<double>> out;
    out.reserve(batch.size());
    for (const auto& seq : batch) out.push_back(score_sequence(seq));
    return out;
  }

  // argmax of the unmodified next-token distribution equals the target's first token.
  bool predicts_target(const PromptInstance& prompt) const {
    return argmax(run_with_interventions(prompt, {})) == first_token_of(prompt.target, prompt);
  }

  static TokenId argmax(const Vector& dist) {
    Eigen::Index best = 0;
    dist.maxCoeff(&best);
    return static_cast<TokenId>(best);
  }
};

template <typename Scalar>
class TransformerGateway final : public ModelGateway {
 public:
  using Model = Transformer<Scalar>;

  TransformerGateway(std::string model_id, ModelConfig config, Tokenizer tokenizer,
                     const TransformerWeights<double>& weights)
      : tokenizer_(std::move(tokenizer)),
        model_(config, weights.template cast<Scalar>()) {
    if (static_cast<int>(tokenizer_.size()) != config.vocab_size)
      throw CompatibilityError("tokenizer size " + std::to_string(tokenizer_.size()) +
                               " differs from model vocabulary " + std::to_string(config.vocab_size));
    profile_.model_id = std::move(model_id);
    profile_.n_layers = config.n_layers;
    profile_.n_heads_per_layer = config.n_heads;
    profile_.d_model = config.d_model;
    profile_.vocab_size = config.vocab_size;
    profile_.max_context = config.max_context;
    profile_.added_vocabulary_ids = tokenizer_.added_vocabulary();
  }

  explicit TransformerGateway(const Checkpoint& ck)
      : TransformerGateway(ck.model_id, ck.config, ck.tokenizer, ck.weights) {}

  const ModelProfile& profile() const override { return profile_; }
  const Model& model() const { return model_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }

  std::vector<TokenId> encode(std::string_view text, bool add_bos) const override {
    std::vector<TokenId> ids;
    if (add_bos) ids.push_back(tokenizer_.bos());
    auto body = tokenizer_.encode(text);
    ids.insert(ids.end(), body.begin(), body.end());
    return ids;
  }
  std::string decode(std::span<const TokenId> ids) const override { return tokenizer_.decode(ids); }
  TokenId bos() const override { return tokenizer_.bos(); }

  std::vector<double> score_sequence(std::span<const TokenId> tokens) const override {
    if (tokens.empty()) throw PreconditionError("cannot score an empty sequence");
    if (tokens[0] != tokenizer_.bos()) throw PreconditionError("sequence must begin with the sequence-start token");
    for (TokenId id : tokens) tokenizer_.check_id(id);
    auto logits = model_.forward(tokens);
    std::vector<double> out;
    out.reserve(tokens.size() - 1);
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      Vector lp = log_softmax(logits.row(static_cast<Eigen::Index>(i)));
      out.push_back(lp(tokens[i + 1]));
    }
    return out;
  }

  Vector next_token_log_probs(std::span<const TokenId> tokens) const override {
    for (TokenId id : tokens) tokenizer_.check_id(id);
    auto logits = model_.forward(tokens, nullptr, nullptr, nullptr, true);
    return log_softmax(logits.row(0));
  }

  HeadCapture capture_head_outputs(const PromptInstance& prompt) const override {
    auto ids = prompt_ids(prompt);
    typename Model::Trace trace;
    trace.heads = true;
    auto logits = model_.forward(ids, nullptr, &trace, nullptr, true);
    HeadCapture cap;
    const int H = profile_.n_heads_per_layer;
    for (int l = 0; l < profile_.n_layers; ++l)
      for (int h = 0; h < H; ++h)
        cap.heads.emplace(HeadId{l, h}, trace.head_outputs[static_cast<std::size_t>(l * H + h)].template cast<double>());
    cap.distribution = softmax(logits.row(0));
    return cap;
  }

  // Per-layer attention block output (heads + bias) at the final token.
  std::vector<Vector> attention_outputs(const PromptInstance& prompt) const {
    auto ids = prompt_ids(prompt);
    typename Model::Trace trace;
    trace.heads = true;
    model_.forward(ids, nullptr, &trace, nullptr, true);
    std::vector<Vector> out;
    for (const auto& v : trace.attention_outputs) out.push_back(v.template cast<double>());
    return out;
  }

  Vector run_with_interventions(const PromptInstance& prompt, const InterventionPlan& plan) const override {
    plan.validate(profile_);
    auto ids = prompt_ids(prompt);
    auto edits = to_edits(plan);
    auto logits = model_.forward(ids, edits.empty() ? nullptr : &edits, nullptr, nullptr, true);
    return softmax(logits.row(0));
  }

  Vector probe_hidden_state(const PromptInstance& prompt, int layer, const InterventionPlan& plan) const override {
    if (!debug_probes_) throw PreconditionError("hidden-state probes are disabled; enable debug probes first");
    if (layer < 0 || layer >= profile_.n_layers) throw PlanError("probe layer outside the model");
    plan.validate(profile_);
    auto ids = prompt_ids(prompt);
    auto edits = to_edits(plan);
    typename Model::Trace trace;
    trace.hidden = true;
    model_.forward(ids, &edits, &trace, nullptr, true);
    return trace.hidden_states[static_cast<std::size_t>(layer)].template cast<double>();
  }

  void set_debug_probes(bool enabled) override { debug_probes_ = enabled; }

 private:
  std::vector<TokenId> prompt_ids(const PromptInstance& prompt) const {
    auto ids = encode_prompt(prompt);
    if (static_cast<int>(ids.size()) > profile_.max_context)
      throw LengthError("prompt has " + std::to_string(ids.size()) + " tokens, context length is " +
                            std::to_string(profile_.max_context),
                        ids.size());
    return ids;
  }

  typename Model::Edits to_edits(const InterventionPlan& plan) const {
    typename Model::Edits e;
    for (const auto& p : plan.head_patches)
      e.patches.push_back({p.head.layer, p.head.head, p.vector.template cast<Scalar>()});
    for (const auto& a : plan.additions) e.additions.push_back({a.layer, a.vector.template cast<Scalar>()});
    return e;
  }

  template <typename Row>
  static Vector log_softmax(const Row& row) {
    Vector x = row.transpose().template cast<double>();
    const double mx = x.maxCoeff();
    const double lse = mx + std::log((x.array() - mx).exp().sum());
    return (x.array() - lse).matrix();
  }
  template <typename Row>
  static Vector softmax(const Row& row) {
    Vector x = row.transpose().template cast<double>();
    const double mx = x.maxCoeff();
    Vector p = (x.array() - mx).exp().matrix();
    return p / p.sum();
  }

  Tokenizer tokenizer_;
  Model model_;
  ModelProfile profile_;
  bool debug_probes_ = false;
};

enum class Precision { f32, f64 };

inline std::unique_ptr<ModelGateway> make_gateway(const Checkpoint& ck, Precision precision) {
  if (precision == Precision::f32) return std::make_unique<TransformerGateway<float>>(ck);
  return std::make_unique<TransformerGateway<double>>(ck);
}

}  // namespace fvlab
