#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace csf {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, count).  Work items must be independent; results
// keyed by i so that reductions can be replayed in index order, keeping
// outputs identical for any thread count.
inline void parallel_for(int threads, int count, const std::function<void(int)>& fn) {
  threads = resolve_threads(threads);
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  if (threads > count) threads = count;
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= count) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

// Static range partition: fn(begin, end) per chunk, one chunk per worker.
// Lets callers keep per-chunk scratch buffers alive across iterations.
inline void parallel_chunks(int threads, int count, const std::function<void(int, int)>& fn) {
  threads = resolve_threads(threads);
  if (threads <= 1 || count <= 1) {
    if (count > 0) fn(0, count);
    return;
  }
  if (threads > count) threads = count;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    const int begin = static_cast<int>(static_cast<long long>(count) * t / threads);
    const int end = static_cast<int>(static_cast<long long>(count) * (t + 1) / threads);
    pool.emplace_back([&fn, begin, end]() {
      if (begin < end) fn(begin, end);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace csf
