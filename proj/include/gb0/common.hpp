#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gb0 {

// ---------------------------------------------------------------------------
// Errors. Each failure mode named in the module contracts gets its own type
// so tests can catch them precisely.
// ---------------------------------------------------------------------------
struct Gb0Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define GB0_DEFINE_ERROR(NAME)                      \
  struct NAME : Gb0Error {                          \
    explicit NAME(const std::string& m = #NAME)     \
        : Gb0Error(std::string(#NAME) + ": " + m) {} \
  }

GB0_DEFINE_ERROR(NonPositiveDepth);
GB0_DEFINE_ERROR(UnknownTask);
GB0_DEFINE_ERROR(ShapeMismatch);
GB0_DEFINE_ERROR(SequenceTooLong);
GB0_DEFINE_ERROR(UnknownWord);
GB0_DEFINE_ERROR(NotNormalized);
GB0_DEFINE_ERROR(EmptyCorpus);
GB0_DEFINE_ERROR(MissingSceneSpec);
GB0_DEFINE_ERROR(InsufficientDepth);
GB0_DEFINE_ERROR(IKUnreachable);
GB0_DEFINE_ERROR(CorpusTooSmall);
GB0_DEFINE_ERROR(EmptyGeneratedCorpus);
GB0_DEFINE_ERROR(NonFiniteLoss);
GB0_DEFINE_ERROR(DecodeOverflow);
GB0_DEFINE_ERROR(CheckpointMismatch);
GB0_DEFINE_ERROR(FormatError);
GB0_DEFINE_ERROR(DigestMismatch);
GB0_DEFINE_ERROR(UsageError);

#undef GB0_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with explicit uniform/normal algorithms
// so streams are identical across standard libraries and platforms.
// ---------------------------------------------------------------------------
inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {
    // avoid the all-zero-ish start
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform double in [0, 1)
  double uniform() {
    return double(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw Gb0Error("uniform_int(0)");
    // rejection sampling keeps the draw unbiased and platform-stable
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // standard normal via Box-Muller
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Rng fork(uint64_t stream) { return Rng(mix_seed(state_, stream)); }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Environment knobs. GB0_THREADS caps worker parallelism and
// GB0_DETERMINISTIC=1 forces deterministic mode everywhere.
// ---------------------------------------------------------------------------
inline int max_threads() {
  if (const char* v = std::getenv("GB0_THREADS")) {
    int n = std::atoi(v);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

inline bool deterministic_mode() {
  if (const char* v = std::getenv("GB0_DETERMINISTIC")) {
    return v[0] == '1';
  }
  return false;
}

// Runs fn(i) for i in [0, n). Work is split into fixed contiguous stripes so
// results that are accumulated per stripe do not depend on the thread count.
inline void parallel_for(int n, const std::function<void(int)>& fn,
                         int threads = -1) {
  if (threads <= 0) threads = max_threads();
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(size_t(threads));
  std::atomic<int> next{0};
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

// 64-bit FNV-1a, used for corpus digests and content addressing.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[size_t(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace gb0
