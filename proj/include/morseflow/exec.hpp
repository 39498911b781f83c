#pragma once

#include <cstdint>
#include <functional>
#include <vector>

namespace morseflow {

// Execution policy for the grid kernels.  Parallel runs the OpenMP path,
// Serial the plain reference loops.  Both paths are kept bit-identical:
// parallel loops only ever write disjoint slots, and reductions accumulate
// fixed-size blocks in index order, so results do not depend on the thread
// count.  The unit tests compare the two paths on every kernel.
enum class ExecMode { Serial, Parallel };

ExecMode exec_mode();
void set_exec_mode(ExecMode mode);
int exec_threads();

// Runs fn(i) for i in [0, n).  fn must write only its own slot.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

// Deterministic sum of term(i) over [0, n): per-block partial sums (blocks
// of fixed width, serial inside a block) combined in block order.
double block_sum(std::int64_t n, const std::function<double(std::int64_t)>& term);

inline constexpr std::int64_t kReduceBlock = 256;

}  // namespace morseflow
