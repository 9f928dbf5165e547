#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace iclprobe {

// Worker count from ICLPROBE_THREADS (default 1).
inline int worker_count() {
  if (const char* env = std::getenv("ICLPROBE_THREADS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (...) {
      return 1;
    }
  }
  return 1;
}

// Evaluates fn(i) for i in [0, n) over contiguous shards and sums the results.
// The reduction is an integer sum, so the result does not depend on the worker count.
template <typename Fn>
long long parallel_count(int n, int workers, Fn&& fn) {
  workers = std::clamp(workers, 1, std::max(1, n));
  if (workers == 1) {
    long long total = 0;
    for (int i = 0; i < n; ++i) total += fn(i);
    return total;
  }
  std::vector<long long> partial(static_cast<std::size_t>(workers), 0);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const int lo = static_cast<int>(static_cast<long long>(n) * w / workers);
      const int hi = static_cast<int>(static_cast<long long>(n) * (w + 1) / workers);
      try {
        for (int i = lo; i < hi; ++i) partial[static_cast<std::size_t>(w)] += fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  long long total = 0;
  for (auto p : partial) total += p;
  return total;
}

// Runs fn(i) for i in [0, n) across workers; fn must write only to slot i of its output.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  parallel_count(n, workers, [&](int i) {
    fn(i);
    return 0;
  });
}

}  // namespace iclprobe
