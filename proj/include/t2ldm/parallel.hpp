#pragma once

#include <cstddef>
#include <functional>

namespace t2ldm {

/// Worker count: T2LDM_THREADS when set to a positive integer, else the hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n) over worker_count() threads. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace t2ldm
