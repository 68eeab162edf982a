#pragma once

#include <cstddef>
#include <functional>

namespace worldkit {

/// Worker count used by the parallel kernels: 1 in deterministic mode,
/// otherwise WORLDKIT_THREADS when set, else the hardware concurrency.
int worker_count();

/// Deterministic mode pins every reduction to a single worker so artifacts are
/// byte-identical across runs and machines.
void set_deterministic(bool on);
bool deterministic();

/// Runs task(i) for i in [0, n). Tasks are claimed dynamically, so callers
/// must write results into per-task slots and merge them in index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &task, int workers = 0);

} // namespace worldkit
