#pragma once

#include <stdexcept>
#include <string>

namespace crepair {

// Error categories map onto process exit codes: usage -> 1, data -> 2,
// numeric -> 3. Anything escaping uncategorized is treated as numeric.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crepair
