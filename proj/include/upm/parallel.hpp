#pragma once

#include <cstddef>
#include <functional>

namespace upm {

/// Caps the worker count used by parallel_for (0 = hardware concurrency).
void set_max_threads(std::size_t n);
std::size_t max_threads();

/// Runs fn(i) for i in [0, n). Work is split into contiguous blocks, so any
/// fn that writes only to slot i gives results independent of the thread count.
/// The exception from the lowest failing index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace upm
