#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

// Deterministic randomness for the whole library.
//
// Every stochastic decision (corpus parameters, crops, masks, weight init,
// noise draws) flows through Stream, a small splitmix64-based generator that
// is fully specified here rather than delegated to implementation-defined
// parts of <random>. The same seed therefore produces bit-identical results
// on any platform this code compiles for.
//
// Streams are cheap; the convention throughout the library is to derive a
// fresh stream per (seed, purpose, indices...) instead of threading one
// generator through call sites, which keeps results independent of
// evaluation order and worker count.
namespace mdc::rng {

// One splitmix64 step: advances state and returns the mixed output.
std::uint64_t splitmix64(std::uint64_t& state);

// Stateless finalizer over an arbitrary 64-bit value (one splitmix64 round).
std::uint64_t mix(std::uint64_t x);

// Order-dependent combination of two 64-bit values.
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b);

// FNV-1a over raw bytes; used for content digests in manifests and logs.
// The basis parameter chains digests: fnv1a(a + b) == fnv1a(b, fnv1a(a)).
inline constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ull;
std::uint64_t fnv1a(const void* data, std::size_t n,
                    std::uint64_t basis = kFnvBasis);
std::uint64_t fnv1a(std::string_view s, std::uint64_t basis = kFnvBasis);

// 16-hex-digit lowercase rendering, zero padded.
std::string hex64(std::uint64_t v);

// Derives a child seed from a root seed, a purpose label and up to two
// indices. Distinct purposes give statistically independent streams.
std::uint64_t derive(std::uint64_t seed, std::string_view purpose,
                     std::uint64_t a = 0, std::uint64_t b = 0);

class Stream {
 public:
  explicit Stream(std::uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0,1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [lo, hi], inclusive, rejection-sampled so every value
  // is exactly equally likely.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Standard normal via Box–Muller; the pair's second value is cached.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // True with probability p.
  bool bernoulli(double p) { return next_double() < p; }

  // Fisher–Yates shuffle of the whole vector.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(
          uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Partial Fisher–Yates: after the call, v[0..k) is a uniformly random
  // k-subset of v in uniformly random order.
  template <typename T>
  void partial_shuffle(std::vector<T>& v, std::size_t k) {
    if (k > v.size()) k = v.size();
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = static_cast<std::size_t>(
          uniform_int(static_cast<std::int64_t>(i),
                      static_cast<std::int64_t>(v.size()) - 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mdc::rng
