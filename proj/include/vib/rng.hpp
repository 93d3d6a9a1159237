#pragma once

#include <cstdint>
#include <random>

namespace vib {

// Seeded random source used by every stochastic operation.
//
// The bit stream comes from std::mt19937_64, whose output sequence is fixed by
// the C++ standard. The standard distributions are implementation-defined, so
// uniform and normal variates are derived here directly from the raw 64-bit
// draws; results are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via the Marsaglia polar method. The spare variate is cached.
  double normal();

  // Independent child stream. Consumes one draw from this generator.
  Rng fork() { return Rng(mix(engine_())); }

  // splitmix64 finalizer, used to decorrelate derived seeds.
  static std::uint64_t mix(std::uint64_t x);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vib
