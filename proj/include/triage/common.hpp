#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace triage {

using Clock = std::chrono::system_clock;
using Timestamp = std::chrono::time_point<Clock, std::chrono::milliseconds>;

/// Unreadable input source or unrecoverable input format problem.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or unreadable configuration (config file, manifest, campaign).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a precondition (dimension mismatch, out-of-range value).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Per-item processing failure. The pipeline routes these to dead-letter.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a statistic is requested over an empty population.
class UndefinedInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// ISO-8601 in UTC: "YYYY-MM-DDTHH:MM:SS[.fff](Z|+HH:MM|-HH:MM)".
// Throws InputError when the text does not parse.
Timestamp parse_iso8601(std::string_view text);
std::string format_iso8601(Timestamp ts);

inline Timestamp now_ms() {
  return std::chrono::time_point_cast<std::chrono::milliseconds>(Clock::now());
}

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view s,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic hash of (seed, stream, key), independent of call order.
constexpr std::uint64_t keyed_hash(std::uint64_t seed, std::string_view stream,
                                   std::string_view key) {
  std::uint64_t h = splitmix64(seed);
  h = fnv1a64(stream, h);
  h = fnv1a64("\x1f", h);
  h = fnv1a64(key, h);
  return splitmix64(h);
}

/// Maps a keyed hash to a uniform double in [0, 1).
constexpr double keyed_uniform(std::uint64_t seed, std::string_view stream,
                               std::string_view key) {
  return static_cast<double>(keyed_hash(seed, stream, key) >> 11) * 0x1.0p-53;
}

std::string to_lower_ascii(std::string_view s);

}  // namespace triage
