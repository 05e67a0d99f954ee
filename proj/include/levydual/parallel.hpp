#pragma once

// Deterministic data-parallel helpers.
//
// Work is split into fixed-size chunks whose boundaries depend only on the
// problem size, never on the thread count; per-chunk partial results are
// combined in chunk order by pairwise summation. Results are therefore
// bit-identical for any number of threads.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

namespace levydual {

inline constexpr std::size_t kChunkSize = 2048;

inline std::size_t worker_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Calls fn(chunk_index, begin, end) for every chunk of [0, n). Exceptions propagate
/// (the one from the lowest chunk index wins).
template <typename Fn>
void for_each_chunk(std::size_t n, Fn&& fn, std::size_t chunk = kChunkSize) {
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  const std::size_t n_workers = std::min(worker_count(), n_chunks);
  if (n_workers <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::size_t error_chunk = n_chunks;
  std::exception_ptr error;
  auto work = [&] {
    for (std::size_t c = next++; c < n_chunks; c = next++) {
      try {
        fn(c, c * chunk, std::min(n, (c + 1) * chunk));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (c < error_chunk) {
          error_chunk = c;
          error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(n_workers - 1);
  for (std::size_t w = 1; w < n_workers; ++w) threads.emplace_back(work);
  work();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::size_t chunk_count(std::size_t n, std::size_t chunk = kChunkSize) {
  return (n + chunk - 1) / chunk;
}

/// Pairwise (cascade) summation.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

/// Sample mean and its standard error.
struct MeanEstimate {
  double mean = 0.0;
  double se = 0.0;
  std::size_t count = 0;
};

inline MeanEstimate mean_estimate(std::span<const double> xs) {
  MeanEstimate out;
  out.count = xs.size();
  if (xs.empty()) return out;
  out.mean = pairwise_sum(xs) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    std::vector<double> sq(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - out.mean) * (xs[i] - out.mean);
    const double var = pairwise_sum(sq) / static_cast<double>(xs.size() - 1);
    out.se = std::sqrt(var / static_cast<double>(xs.size()));
  }
  return out;
}

}  // namespace levydual
