#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace hsicomp {

// Worker cap for coarse-grained parallel loops (sensitivity probes, batch
// evaluation). HSICOMP_THREADS overrides hardware_concurrency; numeric
// kernels stay single-threaded so results are independent of the cap.
inline int max_threads() {
  if (const char* env = std::getenv("HSICOMP_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Work is dealt statically; any exception is
// rethrown on the calling thread after all workers join.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errs[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace hsicomp
