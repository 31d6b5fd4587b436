#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace deoe {

namespace threads_detail {
inline std::atomic<int>& process_cap() {
  static std::atomic<int> cap{0};  // 0 = no programmatic cap
  return cap;
}
}  // namespace threads_detail

// Worker-thread cap: min(hardware, DEOE_THREADS, programmatic cap).
// DEOE_THREADS=1 forces serial execution everywhere.
inline int max_threads() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  if (const char* env = std::getenv("DEOE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  const int cap = threads_detail::process_cap().load();
  if (cap >= 1) n = std::min(n, cap);
  return n;
}

// Scoped programmatic thread cap, e.g. for single-threaded benchmarks.
class ThreadCapGuard {
 public:
  explicit ThreadCapGuard(int cap)
      : prev_(threads_detail::process_cap().exchange(cap)) {}
  ~ThreadCapGuard() { threads_detail::process_cap().store(prev_); }
  ThreadCapGuard(const ThreadCapGuard&) = delete;
  ThreadCapGuard& operator=(const ThreadCapGuard&) = delete;

 private:
  int prev_;
};

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks so that
// any deterministic per-index computation stays deterministic regardless of
// the thread count. fn must not touch shared mutable state across indices.
inline void parallel_for(int n, const std::function<void(int)>& fn,
                         int threads = 0) {
  if (threads <= 0) threads = max_threads();
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int lo = t * chunk;
    const int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace deoe
