#pragma once

#include <cstdint>
#include <functional>

namespace gcrl {

// Worker cap for internal data parallelism (matmul row partitioning).
// Defaults to the GCRL_THREADS environment variable, or 1 when unset.
// Work is split into contiguous disjoint ranges with a fixed per-element
// accumulation order, so results are bit-identical for every thread count.
int max_threads();
void set_max_threads(int n);

// Runs fn(lo, hi) over a partition of [0, n). Ranges are contiguous and
// disjoint; fn must not touch state outside its range.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

} // namespace gcrl
