#pragma once

// The bundled miniature model: 2 layers x 4 heads, d_model 32, seeded random
// weights over a small fixed word vocabulary. Used for exactness tests where
// only the arithmetic matters, not what the model has learned.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/gateway.hpp"
#include "fvlab/transformer.hpp"

namespace fvlab {

inline constexpr std::uint64_t kMiniatureSeed = 20250;

inline const std::vector<std::string>& miniature_words() {
  static const std::vector<std::string> words = {
      "Q",       "A",        "the",     "a",      "of",       "to",      "and",    "in",      "is",
      "for",     "word",     "words",   "each",   "give",     "write",   "return", "output",  "input",
      "its",     "it",       "this",    "that",   "with",     "as",      "from",   "into",    "opposite",
      "capital", "city",     "country", "past",   "tense",    "plural",  "form",   "French",  "English",
      "translate", "answer", "convert", "verb",   "noun",     "name",    "upper",  "case",    "letters",
      "positive", "negative", "review", "sentiment", "good",  "bad",     "hot",    "cold",    "big",
      "small",   "fast",     "slow",    "happy",  "sad",      "light",   "dark",   "up",      "down",
      "France",  "Paris",    "Japan",   "Tokyo",  "Italy",    "Rome",    "Spain",  "Madrid",  "Germany",
      "Berlin",  "cat",      "cats",    "dog",    "dogs",     "house",   "houses", "walk",    "walked",
      "jump",    "jumped",   "play",    "played", "chat",     "chien",   "maison", "bonjour", "hello",
      "one",     "two",      "three",   "four",   "five",     "time",    "day",    "night",   "water",
      "was",     "were",     "be",      "are",    "not",      "on",      "at",     "by",      "or",
      "an",      "we",       "you",     "they",   "what",     "which",   "when",   "there",   "said",
  };
  return words;
}

inline ModelConfig miniature_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 32;
  c.d_mlp = 128;
  c.max_context = 512;
  c.vocab_size = static_cast<int>(Tokenizer(miniature_words()).size());
  return c;
}

inline Checkpoint miniature_checkpoint(std::uint64_t seed = kMiniatureSeed) {
  Checkpoint ck;
  ck.tokenizer = Tokenizer(miniature_words());
  ck.config = miniature_config();
  ck.model_id = seed == kMiniatureSeed ? "miniature" : "miniature:" + std::to_string(seed);
  ck.weights = TransformerWeights<double>::random(ck.config, seed, 1.0);
  return ck;
}

// "miniature", "miniature:<seed>" or a checkpoint path.
inline Checkpoint resolve_checkpoint(const std::string& model_id) {
  if (model_id == "miniature") return miniature_checkpoint();
  if (model_id.rfind("miniature:", 0) == 0) {
    try {
      return miniature_checkpoint(std::stoull(model_id.substr(10)));
    } catch (const std::logic_error&) {
      throw ConfigError("bad miniature seed in model id '" + model_id + "'");
    }
  }
  return load_checkpoint(model_id);
}

inline std::unique_ptr<ModelGateway> open_model(const std::string& model_id, Precision precision = Precision::f64) {
  return make_gateway(resolve_checkpoint(model_id), precision);
}

}  // namespace fvlab
