#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bronchodepth {

/// Failure classes surfaced by the command line as distinct exit codes.
enum class ErrorCategory { config, data, numeric, io };

std::string_view to_string(ErrorCategory category);

/// Process exit code used by the CLI for each category (0 is success).
int exit_code(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

/// Precondition failure in a library call: the caller broke the contract.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace bronchodepth
