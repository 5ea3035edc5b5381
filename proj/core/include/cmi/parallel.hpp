#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace cmi {

/// Runs body(i) for i in [0, n) on up to `jobs` threads. Work is split into
/// contiguous blocks so the assignment is deterministic; results must be
/// written to preallocated slots indexed by i. If any invocation throws, the
/// exception thrown by the lowest index is rethrown after all threads join.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& body) {
  if (n <= 0) return;
  if (jobs > n) jobs = n;
  if (jobs <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(jobs));
  for (int w = 0; w < jobs; ++w) {
    const int lo = static_cast<int>(static_cast<long long>(n) * w / jobs);
    const int hi = static_cast<int>(static_cast<long long>(n) * (w + 1) / jobs);
    workers.emplace_back([lo, hi, &body, &errors] {
      for (int i = lo; i < hi; ++i) {
        try {
          body(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace cmi
