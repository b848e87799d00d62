#pragma once

#include <cstddef>
#include <functional>

namespace twinbeam {

// Worker count: TWINBEAM_WORKERS if set and positive, else hardware concurrency.
int worker_count();

// Calls fn(i) for i in [0, n) across worker threads; fn must not share
// mutable state between indices.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace twinbeam
