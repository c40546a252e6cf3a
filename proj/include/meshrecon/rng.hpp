#pragma once

#include <cmath>
#include <cstdint>

namespace meshrecon {

// Counter-based random stream.  Every draw is a pure hash of the seed and up
// to four caller-chosen key words, so a draw can be reproduced without
// replaying the draws before it.  That is what makes interrupted training
// runs resume bit-for-bit and keeps batch samples order-independent: the
// "state" of the stream is just the keys the caller derives from (epoch,
// step, sample, ...).
class CounterRng {
public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t bits(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                     std::uint64_t d = 0) const {
    std::uint64_t h = seed_ ^ 0x9e3779b97f4a7c15ull;
    h = mix(h ^ mix(a));
    h = mix(h ^ mix(b ^ 0x7f4a7c159e3779b9ull));
    h = mix(h ^ mix(c ^ 0x94d049bb133111ebull));
    h = mix(h ^ mix(d ^ 0xbf58476d1ce4e5b9ull));
    return h;
  }

  // uniform in [0, 1)
  double uniform(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                 std::uint64_t d = 0) const {
    return static_cast<double>(bits(a, b, c, d) >> 11) * 0x1.0p-53;
  }

  double uniform_in(double lo, double hi, std::uint64_t a, std::uint64_t b = 0,
                    std::uint64_t c = 0, std::uint64_t d = 0) const {
    return lo + (hi - lo) * uniform(a, b, c, d);
  }

  // standard normal via Box-Muller; consumes keys (a,b,c,d) and (a,b,c,d+1)
  double normal(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                std::uint64_t d = 0) const {
    double u1 = 1.0 - uniform(a, b, c, d);  // (0, 1], keeps log finite
    double u2 = uniform(a, b, c, d + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
};

// Key-word namespaces so different consumers of one seed never collide.
namespace rngkey {
constexpr std::uint64_t kInit = 1;      // parameter initialization
constexpr std::uint64_t kDropout = 2;   // dropout masks
constexpr std::uint64_t kAugment = 3;   // symmetry-augmentation coin flips
constexpr std::uint64_t kDataset = 4;   // synthetic dataset generation
constexpr std::uint64_t kShuffle = 5;   // epoch shuffling
}  // namespace rngkey

}  // namespace meshrecon
