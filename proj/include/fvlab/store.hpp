#pragma once

// Append-only JSON-lines record store. Each line holds
//   {"key": ..., "config_hash": ..., "payload": {...}}
// and the last line for a key wins when the file is read back.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fvlab/error.hpp"

namespace fvlab {

class ReportStore {
 public:
  ReportStore() = default;

  explicit ReportStore(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    if (!in) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      if (!j.contains("key") || !j.contains("payload"))
        throw FormatError(path_.string() + ":" + std::to_string(lineno) + ": record lacks key or payload");
      set_record(j.at("key").get<std::string>(), j.value("config_hash", ""), j.at("payload"));
    }
  }

  ReportStore(ReportStore&& other) noexcept
      : path_(std::move(other.path_)), records_(std::move(other.records_)), index_(std::move(other.index_)) {}
  ReportStore& operator=(ReportStore&& other) noexcept {
    path_ = std::move(other.path_);
    records_ = std::move(other.records_);
    index_ = std::move(other.index_);
    return *this;
  }

  const std::filesystem::path& path() const { return path_; }

  bool contains(const std::string& key) const {
    std::lock_guard lock(mutex_);
    return index_.contains(key);
  }

  std::optional<nlohmann::json> get(const std::string& key) const {
    std::lock_guard lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return records_[it->second].payload;
  }

  // Stores `payload` under `key`. Re-storing an identical payload is a no-op;
  // a different payload raises CollisionError unless `replace` is set.
  void put(const std::string& key, const nlohmann::json& payload, const std::string& config_hash = {},
           bool replace = false) {
    // Strings that are not valid UTF-8 (decoded byte tokens) are stored with
    // U+FFFD in place of the bad bytes, in memory and on disk alike.
    const std::string line =
        nlohmann::json{{"key", key}, {"config_hash", config_hash}, {"payload", payload}}.dump(
            -1, ' ', false, nlohmann::json::error_handler_t::replace);
    const nlohmann::json stored = nlohmann::json::parse(line).at("payload");
    std::lock_guard lock(mutex_);
    if (auto it = index_.find(key); it != index_.end()) {
      const auto& existing = records_[it->second];
      if (existing.payload == stored && existing.config_hash == config_hash) return;
      if (!replace) throw CollisionError("store " + path_.string() + " already holds a different record for '" + key + "'");
    }
    set_record(key, config_hash, stored);
    if (!path_.empty()) {
      if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
      std::ofstream out(path_, std::ios::app);
      if (!out) throw Error("cannot append to " + path_.string());
      out << line << '\n';
    }
  }

  struct Record {
    std::string key;
    std::string config_hash;
    nlohmann::json payload;
  };

  // Current records in key order.
  std::vector<Record> records() const {
    std::lock_guard lock(mutex_);
    std::vector<Record> out;
    out.reserve(index_.size());
    for (const auto& [key, i] : index_) out.push_back(records_[i]);
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return index_.size();
  }

  // Refuses records produced under a different config unless forced.
  void check_config_hash(const std::string& expected, bool force) const {
    if (force) return;
    std::lock_guard lock(mutex_);
    for (const auto& [key, i] : index_) {
      const auto& h = records_[i].config_hash;
      if (!h.empty() && h != expected)
        throw ConfigError("store " + path_.string() + " record '" + key + "' was produced by config " + h +
                          ", current config is " + expected + " (use --force to mix)");
    }
  }

 private:
  void set_record(const std::string& key, const std::string& config_hash, const nlohmann::json& payload) {
    if (auto it = index_.find(key); it != index_.end()) {
      records_[it->second] = {key, config_hash, payload};
      return;
    }
    index_.emplace(key, records_.size());
    records_.push_back({key, config_hash, payload});
  }

  std::filesystem::path path_;
  std::vector<Record> records_;
  std::map<std::string, std::size_t> index_;
  mutable std::mutex mutex_;
};

}  // namespace fvlab
