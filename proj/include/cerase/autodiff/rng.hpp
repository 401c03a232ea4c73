#pragma once

#include <cstdint>
#include <string_view>

namespace cerase {

/// Counter-based random stream. Draw i of a stream is a pure function of
/// (key, i), so streams can be split and replayed without shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  /// Derives an independent child stream; the parent is unaffected.
  Rng split(std::uint64_t tag) const { return Rng(Key{mix(key_ + 0x9e3779b97f4a7c15ULL * (tag + 1))}); }
  Rng split(std::string_view tag) const;

  std::uint64_t next_u64() { return mix(key_ ^ mix(counter_++ + 0xbf58476d1ce4e5b9ULL)); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  struct Key {
    std::uint64_t value;
  };
  explicit Rng(Key k) : key_(k.value) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cerase
