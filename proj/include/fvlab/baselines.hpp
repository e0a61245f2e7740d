#pragma once

// Uninformative stand-ins for instructions, matched in length and model
// log-probability:
//   equiprobable  token-by-token resampling within a widening log-prob band
//   real_text     whitespace-terminated corpus prefixes from a scored cache
//   other_task    instructions generated for other tasks

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/gateway.hpp"
#include "fvlab/hash.hpp"
#include "fvlab/instructions.hpp"
#include "fvlab/random.hpp"

namespace fvlab {

enum class BaselineMethod { equiprobable, real_text, other_task };

inline const char* to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::equiprobable: return "equiprobable";
    case BaselineMethod::real_text: return "real_text";
    case BaselineMethod::other_task: return "other_task";
  }
  return "?";
}
inline BaselineMethod parse_baseline_method(const std::string& s) {
  if (s == "equiprobable") return BaselineMethod::equiprobable;
  if (s == "real_text") return BaselineMethod::real_text;
  if (s == "other_task") return BaselineMethod::other_task;
  throw FormatError("unknown baseline method '" + s + "'");
}

struct BaselineSpec {
  BaselineMethod method = BaselineMethod::equiprobable;
  std::string source_spec_id;
  std::string text;
  std::vector<TokenId> tokens;  // without the sequence-start token
  int length_tokens = 0;
  double log_probability = 0.0;
  std::vector<int> band_steps;  // equiprobable: k chosen at each position
  int widening = 0;             // real_text / other_task: final length window k
  std::size_t candidates = 0;   // real_text / other_task: size of the candidate set
};

inline nlohmann::json to_json(const BaselineSpec& b) {
  return {{"method", to_string(b.method)},   {"source_spec_id", b.source_spec_id},
          {"text", b.text},                  {"tokens", b.tokens},
          {"length_tokens", b.length_tokens}, {"log_probability", b.log_probability},
          {"band_steps", b.band_steps},      {"widening", b.widening},
          {"candidates", b.candidates}};
}

inline BaselineSpec baseline_from_json(const nlohmann::json& j) {
  BaselineSpec b;
  b.method = parse_baseline_method(j.at("method").get<std::string>());
  b.source_spec_id = j.at("source_spec_id").get<std::string>();
  b.text = j.at("text").get<std::string>();
  b.tokens = j.at("tokens").get<std::vector<TokenId>>();
  b.length_tokens = j.at("length_tokens").get<int>();
  b.log_probability = j.at("log_probability").get<double>();
  b.band_steps = j.value("band_steps", std::vector<int>{});
  b.widening = j.value("widening", 0);
  b.candidates = j.value("candidates", std::size_t{0});
  return b;
}

// Baseline prompt that feeds the model the stand-in's own token ids.
inline PromptInstance render_baseline_prompt(const BaselineSpec& b, const std::string& query_input, std::string target,
                                             std::string spec_id) {
  PromptInstance p = render_baseline_prompt(b.text, query_input, std::move(target), std::move(spec_id));
  p.prefix_tokens.assign(b.tokens.begin(), b.tokens.end());
  p.prefix_length = p.prefix_tokens.empty() ? 0 : b.text.size();
  return p;
}

// ---------------------------------------------------------------------------
// Equiprobable token sequences

struct EquiprobableOptions {
  double t0 = 0.1;
  double dt = 0.1;
  int max_attempts = 16;  // resamples when the draw reproduces the source text
};

// Smallest k >= 0 with min_gap <= t0 + k*dt.
inline int minimal_band_step(double min_gap, double t0, double dt) {
  if (min_gap <= t0) return 0;
  int k = static_cast<int>(std::ceil((min_gap - t0) / dt));
  while (k > 0 && min_gap <= t0 + (k - 1) * dt) --k;
  while (min_gap > t0 + k * dt) ++k;
  return k;
}

struct BandChoice {
  int k = 0;
  double band = 0.0;
  std::vector<TokenId> admissible;
};

// Tokens whose log-prob lies within the minimal band around `reference`.
inline BandChoice admissible_tokens(const Vector& log_probs, double reference, const std::set<TokenId>& masked,
                                    const EquiprobableOptions& o) {
  double min_gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < log_probs.size(); ++i) {
    if (masked.contains(static_cast<TokenId>(i))) continue;
    min_gap = std::min(min_gap, std::abs(reference - log_probs(i)));
  }
  BandChoice c;
  if (!std::isfinite(min_gap)) return c;
  c.k = minimal_band_step(min_gap, o.t0, o.dt);
  c.band = o.t0 + c.k * o.dt;
  for (Eigen::Index i = 0; i < log_probs.size(); ++i) {
    if (masked.contains(static_cast<TokenId>(i))) continue;
    if (std::abs(reference - log_probs(i)) <= c.band) c.admissible.push_back(static_cast<TokenId>(i));
  }
  return c;
}

inline BaselineSpec sample_equiprobable(const std::string& instruction, const std::string& source_spec_id,
                                        const ModelGateway& gateway, std::uint64_t seed,
                                        const EquiprobableOptions& options = {}) {
  const auto source = gateway.encode(instruction, true);
  if (source.size() < 2) throw PreconditionError("instruction must tokenize to at least one token");
  const auto source_lp = gateway.score_sequence(source);
  const auto& masked = gateway.profile().added_vocabulary_ids;

  for (int attempt = 0; attempt < options.max_attempts; ++attempt) {
    Rng rng(derive_seed(seed, "equiprobable", static_cast<std::uint64_t>(attempt)));
    std::vector<TokenId> seq{gateway.bos()};
    BaselineSpec out;
    out.method = BaselineMethod::equiprobable;
    out.source_spec_id = source_spec_id;
    for (std::size_t l = 0; l < source_lp.size(); ++l) {
      Vector lp = gateway.next_token_log_probs(seq);
      BandChoice choice = admissible_tokens(lp, source_lp[l], masked, options);
      if (choice.admissible.empty()) throw Error("no unmasked token available for equiprobable sampling");
      TokenId pick = choice.admissible[static_cast<std::size_t>(rng.below(choice.admissible.size()))];
      seq.push_back(pick);
      out.band_steps.push_back(choice.k);
      out.log_probability += lp(pick);
    }
    out.tokens.assign(seq.begin() + 1, seq.end());
    out.length_tokens = static_cast<int>(out.tokens.size());
    out.text = gateway.decode(out.tokens);
    if (out.text != instruction) return out;
  }
  throw Error("equiprobable sampling kept reproducing the source instruction '" + instruction + "'");
}

// ---------------------------------------------------------------------------
// Length-then-log-prob matching shared by real_text and other_task

inline constexpr std::size_t kCandidatePool = 100;

struct MatchCandidate {
  int length = 0;
  double log_probability = 0.0;
};

struct MatchResult {
  std::vector<std::size_t> chosen;  // indices into the candidate list, closest first
  int widening = 0;
  std::size_t candidate_count = 0;
};

// Candidate set: entries of exactly `length` tokens, widened to length +- k
// for the smallest k giving at least `min_candidates`. From that set the
// `count` entries nearest in log-prob are taken one at a time without
// replacement (ties go to the lower index). `eligible` filters entries out
// before counting.
template <typename Pred>
MatchResult match_length_then_log_prob(const std::vector<MatchCandidate>& pool, int length, double log_probability,
                                       std::size_t count, std::size_t min_candidates, Pred eligible) {
  std::size_t usable = 0;
  int max_gap = 0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!eligible(i)) continue;
    ++usable;
    max_gap = std::max(max_gap, std::abs(pool[i].length - length));
  }
  if (usable < min_candidates)
    throw InsufficientPoolError("only " + std::to_string(usable) + " eligible entries, need " +
                                std::to_string(min_candidates));
  MatchResult r;
  std::vector<std::size_t> candidates;
  for (int k = 0; k <= max_gap; ++k) {
    candidates.clear();
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (eligible(i) && std::abs(pool[i].length - length) <= k) candidates.push_back(i);
    if (candidates.size() >= min_candidates) {
      r.widening = k;
      break;
    }
  }
  r.candidate_count = candidates.size();
  for (std::size_t n = 0; n < count && !candidates.empty(); ++n) {
    auto best = candidates.begin();
    double best_gap = std::abs(pool[*best].log_probability - log_probability);
    for (auto it = candidates.begin() + 1; it != candidates.end(); ++it) {
      double gap = std::abs(pool[*it].log_probability - log_probability);
      if (gap < best_gap || (gap == best_gap && *it < *best)) {
        best = it;
        best_gap = gap;
      }
    }
    r.chosen.push_back(*best);
    candidates.erase(best);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Corpus cache

inline constexpr std::size_t kCorpusCacheTarget = 65536;
inline constexpr std::size_t kMaxCachedTokens = 64;

struct CacheEntry {
  std::string text;
  std::vector<TokenId> tokens;
  double log_probability = 0.0;
  int length() const { return static_cast<int>(tokens.size()); }
};

struct CorpusCache {
  std::string model_id;
  std::string source;
  std::string corpus_hash;
  std::vector<CacheEntry> entries;
};

// Prefixes of `entry` that end right before a whitespace run.
inline std::vector<std::string> whitespace_prefixes(const std::string& entry) {
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  std::vector<std::string> out;
  std::size_t begin = 0;
  while (begin < entry.size() && is_space(entry[begin])) ++begin;
  for (std::size_t i = begin + 1; i < entry.size(); ++i)
    if (is_space(entry[i]) && !is_space(entry[i - 1])) out.push_back(entry.substr(begin, i - begin));
  return out;
}

// Scores whitespace-terminated prefixes of corpus entries (in the given
// order) until the cache holds at least `target` sequences; the entry that
// crosses the target is kept whole.
inline CorpusCache build_corpus_cache(const ModelGateway& gateway, const std::vector<std::string>& corpus,
                                      std::size_t target = kCorpusCacheTarget,
                                      std::size_t max_tokens = kMaxCachedTokens, std::string source = "corpus") {
  if (corpus.empty()) throw Error("corpus is empty; cannot build a cache");
  CorpusCache cache;
  cache.model_id = gateway.profile().model_id;
  cache.source = std::move(source);
  std::string joined;
  for (const auto& e : corpus) joined += e + '\n';
  cache.corpus_hash = git_blob_hash(joined);

  for (const auto& entry : corpus) {
    if (cache.entries.size() >= target) break;
    const auto prefixes = whitespace_prefixes(entry);
    if (prefixes.empty()) continue;
    // Score the longest kept prefix once; shorter prefixes whose tokens are a
    // leading slice of it reuse its per-token scores.
    std::vector<std::vector<TokenId>> toks;
    std::size_t longest = 0;
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      toks.push_back(gateway.encode(prefixes[i], false));
      if (toks.back().size() <= max_tokens && !toks.back().empty()) longest = i + 1;
    }
    if (longest == 0) continue;
    std::vector<TokenId> ref{gateway.bos()};
    ref.insert(ref.end(), toks[longest - 1].begin(), toks[longest - 1].end());
    const auto ref_lp = gateway.score_sequence(ref);
    for (std::size_t i = 0; i < longest; ++i) {
      const auto& t = toks[i];
      if (t.empty() || t.size() > max_tokens) continue;
      double lp = 0.0;
      if (std::equal(t.begin(), t.end(), ref.begin() + 1)) {
        for (std::size_t n = 0; n < t.size(); ++n) lp += ref_lp[n];
      } else {
        std::vector<TokenId> seq{gateway.bos()};
        seq.insert(seq.end(), t.begin(), t.end());
        for (double v : gateway.score_sequence(seq)) lp += v;
      }
      cache.entries.push_back({prefixes[i], t, lp});
    }
  }
  if (cache.entries.empty()) throw Error("corpus produced no cacheable prefixes");
  return cache;
}

// JSON-lines: a header line, then one line per entry.
inline void save_corpus_cache(const CorpusCache& cache, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << nlohmann::json{{"format", "fvlab-corpus-cache"},
                        {"version", 1},
                        {"model_id", cache.model_id},
                        {"source", cache.source},
                        {"corpus_hash", cache.corpus_hash},
                        {"entries", cache.entries.size()}}
             .dump()
      << '\n';
  for (const auto& e : cache.entries)
    out << nlohmann::json{{"text", e.text}, {"tokens", e.tokens}, {"length", e.length()}, {"log_prob", e.log_probability}}
               .dump()
        << '\n';
}

inline CorpusCache load_corpus_cache(const std::string& path, const std::string& expected_model_id) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus cache " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty cache file");
  CorpusCache cache;
  try {
    auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "fvlab-corpus-cache") throw FormatError(path + " is not a corpus cache");
    cache.model_id = header.at("model_id").get<std::string>();
    cache.source = header.value("source", "");
    cache.corpus_hash = header.value("corpus_hash", "");
    if (cache.model_id != expected_model_id)
      throw CacheMismatchError("corpus cache " + path + " was built for model '" + cache.model_id + "', not '" +
                               expected_model_id + "'");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      cache.entries.push_back(
          {j.at("text").get<std::string>(), j.at("tokens").get<std::vector<TokenId>>(), j.at("log_prob").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return cache;
}

inline std::vector<BaselineSpec> sample_real_text(const std::string& instruction, const std::string& source_spec_id,
                                                  const ModelGateway& gateway, const CorpusCache& cache,
                                                  std::size_t count = 5, std::size_t min_candidates = kCandidatePool) {
  if (cache.model_id != gateway.profile().model_id)
    throw CacheMismatchError("corpus cache belongs to '" + cache.model_id + "'");
  if (cache.entries.size() < min_candidates)
    throw InsufficientPoolError("corpus cache holds " + std::to_string(cache.entries.size()) + " entries, need " +
                                std::to_string(min_candidates));
  const int length = static_cast<int>(gateway.token_length(instruction));
  const double lp = gateway.sequence_log_prob(instruction);
  std::vector<MatchCandidate> pool;
  pool.reserve(cache.entries.size());
  for (const auto& e : cache.entries) pool.push_back({e.length(), e.log_probability});
  auto r = match_length_then_log_prob(pool, length, lp, count, min_candidates,
                                      [&](std::size_t i) { return cache.entries[i].text != instruction; });
  std::vector<BaselineSpec> out;
  for (std::size_t i : r.chosen) {
    const auto& e = cache.entries[i];
    BaselineSpec b;
    b.method = BaselineMethod::real_text;
    b.source_spec_id = source_spec_id;
    b.text = e.text;
    b.tokens = e.tokens;
    b.length_tokens = e.length();
    b.log_probability = e.log_probability;
    b.widening = r.widening;
    b.candidates = r.candidate_count;
    out.push_back(std::move(b));
  }
  return out;
}

// Instructions from every task, scored once under the subject model.
struct ScoredInstruction {
  std::string task_id;
  std::string spec_id;
  std::string text;
  std::vector<TokenId> tokens;
  double log_probability = 0.0;
};

inline std::vector<ScoredInstruction> score_instruction_pool(const std::vector<InstructionSet>& all_sets,
                                                             const ModelGateway& gateway) {
  std::vector<ScoredInstruction> pool;
  for (const auto& set : all_sets)
    for (const auto& ins : set.instructions) {
      ScoredInstruction s{set.task_id, ins.id, ins.text, gateway.encode(ins.text, false), 0.0};
      s.log_probability = gateway.sequence_log_prob(ins.text);
      pool.push_back(std::move(s));
    }
  return pool;
}

inline std::vector<BaselineSpec> sample_other_task(const std::string& instruction, const std::string& source_spec_id,
                                                   const std::string& task_id,
                                                   const std::vector<ScoredInstruction>& pool,
                                                   const ModelGateway& gateway, std::size_t count = 5,
                                                   std::size_t min_candidates = kCandidatePool) {
  const int length = static_cast<int>(gateway.token_length(instruction));
  const double lp = gateway.sequence_log_prob(instruction);
  std::vector<MatchCandidate> candidates;
  candidates.reserve(pool.size());
  for (const auto& s : pool) candidates.push_back({static_cast<int>(s.tokens.size()), s.log_probability});
  MatchResult r;
  try {
    r = match_length_then_log_prob(candidates, length, lp, count, min_candidates, [&](std::size_t i) {
      return pool[i].task_id != task_id && pool[i].text != instruction;
    });
  } catch (const InsufficientPoolError& e) {
    throw InsufficientPoolError("other-task instructions for '" + task_id + "': " + e.what());
  }
  std::vector<BaselineSpec> out;
  for (std::size_t i : r.chosen) {
    const auto& s = pool[i];
    BaselineSpec b;
    b.method = BaselineMethod::other_task;
    b.source_spec_id = source_spec_id;
    b.text = s.text;
    b.tokens = s.tokens;
    b.length_tokens = static_cast<int>(s.tokens.size());
    b.log_probability = s.log_probability;
    b.widening = r.widening;
    b.candidates = r.candidate_count;
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<BaselineSpec> sample_other_task(const std::string& instruction, const std::string& source_spec_id,
                                                   const std::string& task_id,
                                                   const std::vector<InstructionSet>& all_sets,
                                                   const ModelGateway& gateway, std::size_t count = 5,
                                                   std::size_t min_candidates = kCandidatePool) {
  return sample_other_task(instruction, source_spec_id, task_id, score_instruction_pool(all_sets, gateway), gateway,
                           count, min_candidates);
}

}  // namespace fvlab
