#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vlab {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Base class for every error the library throws on purpose.
class VlabError : public std::runtime_error {
 public:
  explicit VlabError(const std::string& what) : std::runtime_error(what) {}
};

// Shape or dimension disagreement between operands.
class ShapeError : public VlabError {
 public:
  explicit ShapeError(const std::string& what) : VlabError(what) {}
};

// API contract violated (non-scalar loss, double backward, empty mask, ...).
class ContractError : public VlabError {
 public:
  explicit ContractError(const std::string& what) : VlabError(what) {}
};

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace vlab
