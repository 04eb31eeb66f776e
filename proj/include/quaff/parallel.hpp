// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace quaff {

// Worker count for intra-op parallelism. Reads QUAFF_THREADS once; falls back to
// the hardware concurrency.
std::size_t thread_count();

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each. Runs inline
// when `work` (a rough flop estimate) is too small to amortize thread start-up.
// Chunks never share a row, so per-row accumulation order is unaffected.
void parallel_for(std::size_t n, std::size_t work, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace quaff
