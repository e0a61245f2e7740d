#pragma once

// Word-level tokenizer with byte fallback.
//
// Text is pre-split into chunks: ASCII alphanumeric runs (bytes >= 0x80 count
// as word characters so UTF-8 words stay whole), a "\n\n" pair, or any other
// single byte. A chunk present in the vocabulary becomes one token; anything
// else is spelled out with the 256 byte tokens, so encode/decode is lossless.
// Whitespace is never merged into a word, which keeps the answer cue "A: "
// stable under continuation.

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fvlab/error.hpp"

namespace fvlab {

using TokenId = std::int32_t;

class Tokenizer {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kPad = 2;
  static constexpr TokenId kFirstByte = 3;
  static constexpr TokenId kFirstWord = kFirstByte + 256;

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  explicit Tokenizer(const std::vector<std::string>& words) {
    pieces_ = {"<bos>", "<eos>", "<pad>"};
    for (int b = 0; b < 256; ++b) pieces_.emplace_back(1, static_cast<char>(b));
    add_piece("\n\n");
    for (const auto& w : words) add_piece(w);
  }

  // Vocabulary covering every chunk that appears in `texts`.
  static Tokenizer from_texts(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto chunk : split_chunks(t))
        if (chunk.size() > 1) words.emplace(chunk);
    return Tokenizer(std::vector<std::string>(words.begin(), words.end()));
  }

  std::size_t size() const { return pieces_.size(); }
  TokenId bos() const { return kBos; }
  const std::string& piece(TokenId id) const {
    check_id(id);
    return pieces_[static_cast<std::size_t>(id)];
  }
  bool is_added_vocabulary(TokenId id) const { return id >= 0 && id < kFirstByte; }
  std::set<TokenId> added_vocabulary() const { return {kBos, kEos, kPad}; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (auto chunk : split_chunks(text)) {
      if (auto it = lookup_.find(std::string(chunk)); it != lookup_.end()) {
        ids.push_back(it->second);
      } else {
        for (unsigned char c : chunk) ids.push_back(kFirstByte + c);
      }
    }
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      check_id(id);
      if (is_added_vocabulary(id)) continue;
      out += pieces_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  void check_id(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size())
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(pieces_.size()));
  }

  // Only the word pieces are stored; specials and bytes are implicit.
  nlohmann::json to_json() const {
    return std::vector<std::string>(pieces_.begin() + kFirstWord, pieces_.end());
  }
  static Tokenizer from_json(const nlohmann::json& j) {
    return Tokenizer(j.get<std::vector<std::string>>());
  }

  static std::vector<std::string_view> split_chunks(std::string_view text) {
    std::vector<std::string_view> chunks;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t j = i;
      if (is_word_byte(text[i])) {
        while (j < text.size() && is_word_byte(text[j])) ++j;
      } else if (text[i] == '\n' && i + 1 < text.size() && text[i + 1] == '\n') {
        j = i + 2;
      } else {
        j = i + 1;
      }
      chunks.push_back(text.substr(i, j - i));
      i = j;
    }
    return chunks;
  }

 private:
  static bool is_word_byte(char c) {
    auto u = static_cast<unsigned char>(c);
    return (u >= '0' && u <= '9') || (u >= 'a' && u <= 'z') || (u >= 'A' && u <= 'Z') || u >= 0x80;
  }

  void add_piece(const std::string& w) {
    if (w.size() < 2 || lookup_.contains(w)) return;
    lookup_.emplace(w, static_cast<TokenId>(pieces_.size()));
    pieces_.push_back(w);
  }

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> lookup_;
};

}  // namespace fvlab
