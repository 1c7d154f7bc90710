#pragma once

#include <cstdint>
#include <exception>
#include <mutex>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace lrel::par {

// Worker count for data-parallel loops. 1 selects the serial reference path;
// anything above 1 uses OpenMP when compiled in. Initialized from the
// LREL_WORKERS environment variable, falling back to the OpenMP default.
int workers();
void set_workers(int n);
bool openmp_compiled();

// Runs f(i) for i in [0, n). Loop bodies must write disjoint output slots;
// reductions happen after the loop in index order, so results are identical
// for every worker count. Nested calls degrade to serial. If bodies throw,
// the exception of the smallest failing index is rethrown, matching what the
// serial path would raise first.
template <class F>
void for_n(std::int64_t n, F&& f) {
#ifdef _OPENMP
  const int w = workers();
  if (w > 1 && n > 1 && !omp_in_parallel()) {
    std::exception_ptr eptr = nullptr;
    std::int64_t eidx = n;
    std::mutex mu;
#pragma omp parallel for schedule(static) num_threads(w)
    for (std::int64_t i = 0; i < n; ++i) {
      try {
        f(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(mu);
        if (i < eidx) {
          eidx = i;
          eptr = std::current_exception();
        }
      }
    }
    if (eptr) std::rethrow_exception(eptr);
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) f(i);
}

}  // namespace lrel::par
