#pragma once

#include <cstdint>
#include <functional>

namespace uad {

// Worker cap: min(hardware_concurrency, UAD_THREADS). UAD_THREADS=1 forces
// serial execution.
int max_threads();

// Static-partition parallel loop over [0, n). Each index must write only to
// its own output slot, so results are independent of scheduling. The first
// exception thrown by a worker is rethrown on the calling thread.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn,
                  int threads = 0);

}  // namespace uad
