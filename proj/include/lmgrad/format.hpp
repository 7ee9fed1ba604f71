#pragma once

#include <charconv>
#include <string>

namespace lmgrad {

/// Shortest decimal text that round-trips to the same double.
inline std::string fmt_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace lmgrad
