#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace acmn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimensions or operand ranks do not line up.
struct ShapeError : Error {
  using Error::Error;
};

// Malformed input text or binary container.
struct FormatError : Error {
  using Error::Error;
};

// A caller broke an API precondition (wrong mode, mismatched configs, ...).
struct ContractError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace acmn
