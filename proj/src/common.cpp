#include "dpmpb/common.hpp"

#include <charconv>

namespace dpmpb {

std::string format_double(double value) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

}  // namespace dpmpb
