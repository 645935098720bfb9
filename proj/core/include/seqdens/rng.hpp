#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace seqdens {

// xoshiro256** with splitmix64 seeding. Self-contained so that seeded
// streams are identical across platforms and standard-library versions;
// std::* distributions are implementation-defined and would break
// byte-identical dataset generation.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0);

  uint64_t next_u64();

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform01();

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n);

  // Standard normal via Box-Muller (no cached second value, so the
  // serialized state is exactly the four state words).
  double normal();

  // Derive an independent stream; advances this generator.
  Rng split();

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

 private:
  std::array<uint64_t, 4> state_;
};

// Fisher-Yates shuffle driven by Rng (deterministic across platforms).
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_int(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace seqdens
