#pragma once

#include <cstdint>
#include <functional>

namespace ff {

// Worker count: FF_THREADS when set to a positive integer, otherwise the
// machine's hardware concurrency.
int thread_count();
void set_thread_count(int n);  // 0 restores the environment default

// Runs body(i) for i in [0, n). Iterations must be independent; results are
// identical for any thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& body);

}  // namespace ff
