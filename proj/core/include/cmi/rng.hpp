#pragma once

#include <cstdint>
#include <random>

namespace cmi {

/// Mixes a key into a seed (splitmix64 finalizer). Chaining derive_seed calls
/// builds keyed substreams: results depend only on (seed, keys), never on
/// execution order, so parallel workers drawing from their own substreams
/// reproduce the serial results bit for bit.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key);

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k1, std::uint64_t k2) {
  return derive_seed(derive_seed(seed, k1), k2);
}

/// Deterministic random stream. Normal variates use the AS 241 inverse CDF
/// rather than std::normal_distribution, whose algorithm is
/// implementation-defined.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  /// Uniform draw on the open interval (0,1).
  double uniform() {
    const std::uint64_t bits = engine_() >> 11;  // 53 random bits
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal draw.
  double normal();

  /// Uniform integer in [0, n), unbiased.
  int uniform_int(int n);

  /// Bernoulli draw with success probability p.
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cmi
