#pragma once

#include <functional>

namespace esfm {

/// Data-parallel width: ESFM_THREADS when set and positive, otherwise the
/// hardware concurrency.
int thread_width();

/// Runs fn(begin, end) over a partition of [0, n) on up to thread_width()
/// threads. Chunks are contiguous, so writes to disjoint per-index slots are
/// race-free and results deterministic.
void parallel_chunks(int n, const std::function<void(int, int)>& fn);

}  // namespace esfm
