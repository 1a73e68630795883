#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace saak {

namespace detail {
inline std::atomic<unsigned>& thread_limit() {
  static std::atomic<unsigned> limit{0};
  return limit;
}
}  // namespace detail

/// Caps module-internal parallelism. 0 means "hardware concurrency".
inline void set_thread_count(unsigned n) { detail::thread_limit().store(n); }

inline unsigned thread_count() {
  const unsigned limit = detail::thread_limit().load();
  if (limit != 0) return limit;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for every i in [0, n). Work is split into contiguous ranges;
/// fn must only write state owned by index i so results do not depend on the
/// worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    try {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = n;
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace saak
