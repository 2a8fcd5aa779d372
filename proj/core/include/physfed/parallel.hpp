#pragma once

#include <cstddef>
#include <functional>

namespace physfed {

/// Process-wide cap on worker threads. 1 means everything runs inline on the
/// calling thread.
void set_max_threads(unsigned n);
unsigned max_threads();

/// Runs body(i) for i in [0, n). Iterations must be independent; results are
/// identical for any thread count as long as body writes only to slot i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace physfed
