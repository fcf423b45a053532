#pragma once

#include <cstdarg>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace tweo {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s);

// printf-style formatting into std::string (the toolchain has no std::format).
std::string strf(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

// ----------------------------- errors -----------------------------
// Contract violations map to CLI exit code 1; a training collapse maps to 2.

struct TweoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// shape/rank mismatches; message carries both shapes
struct DimError : TweoError {
  using TweoError::TweoError;
};

// invalid configuration or argument values
struct ContractError : TweoError {
  using TweoError::TweoError;
};

struct IoError : TweoError {
  using TweoError::TweoError;
};

// numeric failures (non-finite loss, SVD non-convergence)
struct NumericError : TweoError {
  using TweoError::TweoError;
};

// raised when a strict-mode FP8 overflow terminates a run
struct CollapseSignal {
  size_t step = 0;
  std::string site;
  double amax = 0.0;
  std::string what() const;
};

// ----------------------------- hashing -----------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

uint64_t file_fnv1a64(const std::string& path);  // IoError if unreadable

}  // namespace tweo
