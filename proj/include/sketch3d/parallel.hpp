#pragma once

#include <cstddef>
#include <functional>

namespace sketch3d {

inline constexpr const char* kThreadsEnv = "SKETCH3D_THREADS";

// Worker count from SKETCH3D_THREADS, else the hardware concurrency; at least 1.
std::size_t worker_count();

// Calls fn(i) for every i in [0, n) on up to worker_count() threads, each
// inheriting the caller's grad mode. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace sketch3d
