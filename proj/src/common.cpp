#include "unrn/common.hpp"

#include <charconv>
#include <cstdlib>

namespace unrn {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) return "nan";
  return std::string(buf, end);
}

int default_workers() {
  if (const char* env = std::getenv("UNRN_WORKERS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && n > 0 && n < 1024) return static_cast<int>(n);
  }
  return 1;
}

}  // namespace unrn
