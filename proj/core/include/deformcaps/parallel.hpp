#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace dcaps {

/// Runs fn(i) for i in [0, n). Work items must write disjoint state; under
/// that contract results are identical to the serial loop regardless of
/// scheduling. Exceptions from workers are rethrown on the calling thread.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn, int max_threads = 0) {
  if (n <= 0) return;
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int workers = max_threads > 0 ? std::min(max_threads, hw) : hw;
  workers = static_cast<int>(std::min<int64_t>(workers, n));
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int64_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace dcaps
