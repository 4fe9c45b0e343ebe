#pragma once

#include <cstddef>
#include <functional>

namespace metalqr {

/// Worker count from METALQR_WORKERS, else hardware concurrency.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n). Each index writes only its own output slot,
/// so results never depend on the schedule. The first exception thrown by
/// any worker is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace metalqr
