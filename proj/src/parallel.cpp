#include "lrel/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace lrel::par {

namespace {

int initial_workers() {
  if (const char* env = std::getenv("LREL_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

std::atomic<int>& worker_count() {
  static std::atomic<int> count{initial_workers()};
  return count;
}

}  // namespace

int workers() { return worker_count().load(std::memory_order_relaxed); }

void set_workers(int n) { worker_count().store(n < 1 ? 1 : n, std::memory_order_relaxed); }

bool openmp_compiled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

}  // namespace lrel::par
