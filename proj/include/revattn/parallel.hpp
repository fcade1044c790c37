#pragma once

#include <cstddef>
#include <functional>

namespace revattn {

// Worker count: REVATTN_THREADS when set to a positive integer, otherwise the
// hardware concurrency (at least 1).
int thread_count();

// Runs fn(i) for i in [0, n). Each index is processed exactly once; results
// must be written to per-index slots so output order does not depend on
// scheduling. The first exception thrown by any call is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace revattn
