#ifndef ADAPTSENSE_RNG_H_
#define ADAPTSENSE_RNG_H_

#include <cstdint>
#include <random>

namespace adaptsense {

// Seeded random stream. The engine is std::mt19937_64, whose output sequence
// is fixed by the standard; the distribution transforms below are written out
// so that draws are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t NextU64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform on the open interval (0, 1).
  double UniformOpen() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double Normal();

  // Standard Gumbel: -log(-log U), U ~ Unif(0,1).
  double Gumbel();

  // Uniform integer in [0, n).
  int UniformInt(int n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Combines two values into a well-mixed 64-bit seed (splitmix64 finalizer).
uint64_t MixSeed(uint64_t a, uint64_t b);

}  // namespace adaptsense

#endif  // ADAPTSENSE_RNG_H_
