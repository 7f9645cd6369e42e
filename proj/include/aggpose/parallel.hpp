#pragma once

#include <cstddef>
#include <functional>

namespace aggpose {

/// Process-wide cap on worker threads used by data preparation. Defaults to 1.
void set_thread_count(int n);
int thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() threads, each thread
/// taking a contiguous index range. The first exception thrown is rethrown
/// after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace aggpose
