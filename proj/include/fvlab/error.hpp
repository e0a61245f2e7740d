#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

namespace fvlab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error { using Error::Error; };
class PreconditionError : public Error { using Error::Error; };
class InsufficientDataError : public Error { using Error::Error; };
class OverlapError : public Error { using Error::Error; };
class VocabularyError : public Error { using Error::Error; };
class TokenizationError : public Error { using Error::Error; };
class PlanError : public Error { using Error::Error; };
class CompatibilityError : public Error { using Error::Error; };
class CompletenessError : public Error { using Error::Error; };
class BoundsError : public Error { using Error::Error; };
class InsufficientPoolError : public Error { using Error::Error; };
class AggregationError : public Error { using Error::Error; };
class CacheMismatchError : public Error { using Error::Error; };
class CollisionError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };

class LengthError : public Error {
 public:
  LengthError(const std::string& what, std::size_t token_count)
      : Error(what), token_count_(token_count) {}
  std::size_t token_count() const noexcept { return token_count_; }

 private:
  std::size_t token_count_;
};

// Endpoint failures. Callers may retry.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, std::string endpoint)
      : Error(what), endpoint_(std::move(endpoint)) {}
  const std::string& endpoint() const noexcept { return endpoint_; }

 private:
  std::string endpoint_;
};

// A task dropped from the pipeline; carries whatever counts justified it.
class TaskIneligibleError : public Error {
 public:
  TaskIneligibleError(const std::string& what, std::map<std::string, int> counts = {})
      : Error(what), counts_(std::move(counts)) {}
  const std::map<std::string, int>& counts() const noexcept { return counts_; }

 private:
  std::map<std::string, int> counts_;
};

}  // namespace fvlab
