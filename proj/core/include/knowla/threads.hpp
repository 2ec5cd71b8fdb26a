#pragma once

#include <cstdint>
#include <functional>

namespace knowla {

// Worker cap: hardware concurrency clamped by the KNOWLA_THREADS env var.
int worker_count();

// Static chunked fan-out of [0, n). `fn` must be safe to call concurrently;
// results written to per-index slots stay deterministic regardless of the
// worker count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace knowla
