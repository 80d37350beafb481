#pragma once

#include <stdexcept>
#include <string>

namespace lazykv {

// Caller broke a documented precondition (shape mismatch, wrong call order).
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

// Bad user-supplied data: token ids, files, flags.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const char* what) {
  if (!cond) throw ContractViolation(what);
}

inline void require_input(bool cond, const std::string& what) {
  if (!cond) throw InputError(what);
}

}  // namespace lazykv
