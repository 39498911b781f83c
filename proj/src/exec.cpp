#include "morseflow/exec.hpp"

#include <algorithm>

#ifdef MORSEFLOW_HAVE_OPENMP
#include <omp.h>
#endif

namespace morseflow {

namespace {
ExecMode g_mode = ExecMode::Parallel;
}

ExecMode exec_mode() { return g_mode; }

void set_exec_mode(ExecMode mode) { g_mode = mode; }

int exec_threads() {
#ifdef MORSEFLOW_HAVE_OPENMP
  return g_mode == ExecMode::Parallel ? omp_get_max_threads() : 1;
#else
  return 1;
#endif
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
#ifdef MORSEFLOW_HAVE_OPENMP
  if (g_mode == ExecMode::Parallel && n > 1) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

double block_sum(std::int64_t n, const std::function<double(std::int64_t)>& term) {
  if (n <= 0) return 0.0;
  const std::int64_t nblocks = (n + kReduceBlock - 1) / kReduceBlock;
  std::vector<double> partial(static_cast<std::size_t>(nblocks), 0.0);
  parallel_for(nblocks, [&](std::int64_t b) {
    const std::int64_t lo = b * kReduceBlock;
    const std::int64_t hi = std::min(n, lo + kReduceBlock);
    double acc = 0.0;
    for (std::int64_t i = lo; i < hi; ++i) acc += term(i);
    partial[static_cast<std::size_t>(b)] = acc;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace morseflow
