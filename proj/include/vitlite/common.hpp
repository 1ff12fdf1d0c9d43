#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vitlite {

// ----------------------------- errors -----------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or index violation in a tensor operation.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid configuration (divisibility, ranges, missing fields).
struct ConfigError : Error {
  using Error::Error;
};

// Violated operation precondition at runtime (consumed graph, non-scalar
// loss, mismatched token counts, ...).
struct ContractError : Error {
  using Error::Error;
};

// Input without enough variation for the requested statistic.
struct DegenerateInputError : Error {
  using Error::Error;
};

// ----------------------------- rng -----------------------------

using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent seed for a named stream of a base seed.
inline uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index = 0) {
  return splitmix64(splitmix64(base ^ 0x6a09e667f3bcc908ull) + splitmix64(stream) + index * 0x9e3779b97f4a7c15ull);
}

// Uniform draw in [0, n) by rejection; stable across standard libraries.
inline uint64_t bounded(Rng& rng, uint64_t n) {
  if (n == 0) throw ContractError("bounded: n must be positive");
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t r = rng();
  while (r >= limit) r = rng();
  return r % n;
}

// Fisher-Yates with pinned draw order.
template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(bounded(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

// ----------------------------- workers -----------------------------

// Worker cap: VITLITE_THREADS if set, otherwise hardware concurrency.
inline int worker_count() {
  if (const char* env = std::getenv("VITLITE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Results must be written to per-index slots;
// the partition is static so output placement never depends on scheduling.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace vitlite
