#pragma once

#include <cstdint>
#include <functional>

namespace mokt {

// Worker count: MOKT_THREADS env var, where 0 or unset means one thread per
// hardware core. Read once and cached.
int thread_count();

// Splits [0, n) into contiguous chunks and runs body(begin, end) on worker
// threads. Only use when chunks write disjoint outputs and no cross-chunk
// reduction order exists; under that contract results are bit-identical for
// any thread count. Runs inline when n < min_grain * 2 or one thread is
// configured.
void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& body,
                  std::int64_t min_grain = 1);

}  // namespace mokt
