#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unrn {

inline constexpr const char* kToolkitVersion = "0.3.0";

// Malformed input files, out-of-range indices, inconsistent shapes.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values where a finite result is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sentinel for undefined statistics (zero variance, zero norm, ...).
inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

inline bool is_defined(double v) { return !std::isnan(v); }

template <typename T>
struct BasicMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  BasicMatrix() = default;
  BasicMatrix(std::size_t r, std::size_t c, T fill = T{})
      : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  bool empty() const { return data.empty(); }
  bool operator==(const BasicMatrix&) const = default;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

// Shortest round-trip decimal representation; "nan"/"inf"/"-inf" otherwise.
std::string format_number(double v);

// Runs fn(i) for i in [0, n) over `workers` threads with static contiguous
// chunks. The assignment of indices to threads depends only on n and workers.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn);

// Default worker count: UNRN_WORKERS if set and positive, else 1.
int default_workers();

}  // namespace unrn

#include "unrn/detail/parallel.hpp"
