#pragma once

#include <cstdint>
#include <functional>

namespace uformer {

/// Number of worker threads used by the heavy kernels. Initialized from the
/// UFORMER_THREADS environment variable (unset or 0 means single-threaded).
int thread_count();
void set_thread_count(int n);

/// Deterministic mode pins execution to a single thread. Kernels never split a
/// reduction across threads, so results are bitwise identical either way; the
/// flag exists so a run can prove it.
bool deterministic_mode();
void set_deterministic_mode(bool on);

/// Splits [0, n) into contiguous chunks. Each index is visited exactly once and
/// by a single thread, so per-index outputs never race.
void parallel_for(std::int64_t n, std::int64_t work_per_item,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace uformer
