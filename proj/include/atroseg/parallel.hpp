#pragma once

#include <cstdint>
#include <functional>

namespace atroseg {

// Number of worker threads. Defaults to hardware concurrency, capped by the
// ATROSEG_THREADS environment variable (read once).
int thread_count();

// Runs fn(begin, end) over a partition of [0, n). Every index is processed by
// exactly one invocation, so results are independent of the thread count as
// long as fn writes only to locations owned by its indices. Loops smaller
// than `grain` run inline on the calling thread.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace atroseg
