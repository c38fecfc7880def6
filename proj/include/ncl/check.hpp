#pragma once

#include <stdexcept>
#include <string>

namespace ncl {

// Contract failure on a public API boundary. Callers that violate a
// precondition get this rather than UB.
class ContractError : public std::invalid_argument {
 public:
  explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace ncl

#define NCL_CHECK(cond, msg) ::ncl::require((cond), (msg))
