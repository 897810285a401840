#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace gdl {

using NodeId = std::uint32_t;
using TokenId = std::uint32_t;

// Error taxonomy maps onto CLI exit codes: config/usage -> 1,
// data/runtime -> 2, numerical failure -> 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64 finalizer; used both as a bit mixer and a seed expander.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Order-sensitive combiner for deriving independent rng streams from
// (seed, index...) tuples.
inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b + 0x9E3779B97F4A7C15ull));
}
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a) {
  return hash_combine(seed, a);
}
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return hash_combine(hash_combine(seed, a), b);
}

// FNV-1a over raw bytes; stable across platforms for checksum contracts.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64_str(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::uint64_t checksum_doubles(const std::vector<double>& v) {
  return v.empty() ? fnv1a64(nullptr, 0) : fnv1a64(v.data(), v.size() * sizeof(double));
}

}  // namespace gdl
