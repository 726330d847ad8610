#pragma once

#include <stdexcept>
#include <string>

namespace pepdpo {

// Error categories map onto CLI exit codes (see cli.hpp).
enum class ErrorKind {
  InvalidInput,  // malformed tokens, out-of-range arguments
  Dimension,     // length / shape mismatch
  Config,        // bad or incompatible configuration
  Data,          // unreadable or invariant-violating files
  Numeric,       // non-finite loss or gradient
  State,         // operation invoked out of sequence (e.g. stale cache)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace pepdpo
