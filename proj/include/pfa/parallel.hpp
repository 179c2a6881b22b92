#pragma once

#include <cstddef>
#include <functional>

namespace pfa {

// Worker count for internal parallelism: min(requested, PFA_THREADS env,
// hardware cores), at least 1. requested=0 means "no preference".
int thread_budget(int requested = 0);

// Runs fn(0..n-1) on up to `threads` workers. Callers must write results to
// disjoint slots so the outcome is schedule-independent. The first exception
// thrown by any worker is rethrown after the join.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace pfa
