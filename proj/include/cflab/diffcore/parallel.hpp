#ifndef CFLAB_DIFFCORE_PARALLEL_HPP
#define CFLAB_DIFFCORE_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace cflab::diffcore {

/// Run `fn(chunk_index)` for chunks 0..n-1 on up to `jobs` threads. The first
/// exception is rethrown after all threads finish.
template <typename F>
void parallel_chunks(std::size_t n, unsigned jobs, F fn) {
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(n)));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex m;
  std::vector<std::thread> pool;
  for (unsigned j = 0; j < jobs; ++j)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace cflab::diffcore

#endif  // CFLAB_DIFFCORE_PARALLEL_HPP
