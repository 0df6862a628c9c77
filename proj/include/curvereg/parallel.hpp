#pragma once

#include <cstddef>
#include <exception>
#include <functional>

namespace curvereg {

// Worker count from CURVEREG_THREADS, defaulting to the hardware concurrency.
int worker_count();

// Runs body(i) for i in [0, n) split into contiguous blocks over worker_count() threads.
// Each index is processed exactly once; the first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &body);

} // namespace curvereg
