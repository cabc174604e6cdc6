#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mlens {

// Deterministic PRNG with named substreams. All randomness in the project
// flows from a single root seed fanned out via stream tags, so dataset
// generation, init, and shuffling each get an independent stream that does
// not depend on std::random distribution internals (which vary across
// standard libraries).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {
    // warm up so nearby seeds decorrelate
    next_u64();
    next_u64();
  }

  // Derive an independent stream from a tag (FNV-1a over the tag mixed in).
  Rng stream(std::string_view tag) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return Rng(splitmix(state_ ^ h));
  }

  Rng stream(uint64_t index) const { return Rng(splitmix(state_ + 0x632be59bd9b4e019ULL * (index + 1))); }

  uint64_t next_u64() {
    state_ = splitmix_step(state_);
    return mix(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Simple rejection-free multiply-shift; the
  // tiny modulo bias at desk-scale n is irrelevant and the method is
  // platform-stable.
  int uniform_int(int n) { return static_cast<int>((static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64); }

  // Standard normal via Box-Muller (one value per call; cached pair unused
  // to keep the stream position independent of call parity bugs).
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t splitmix_step(uint64_t x) { return x + 0x9e3779b97f4a7c15ULL; }

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static uint64_t splitmix(uint64_t x) { return mix(splitmix_step(x)); }

  uint64_t state_;
};

}  // namespace mlens
