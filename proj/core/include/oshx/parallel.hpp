#pragma once

#include <cstdint>
#include <functional>

namespace oshx {

/// Worker count for data-parallel regions. Defaults to OSHX_WORKERS when the
/// environment variable is set, otherwise to the hardware thread count
/// (clamped to 8). Every parallel region partitions disjoint output ranges,
/// so results are bitwise identical for any worker count.
int worker_count();
void set_worker_count(int n);

/// Runs fn(i) for i in [begin, end), statically partitioned over workers.
/// fn must write only to locations owned by index i.
void parallel_for(int64_t begin, int64_t end,
                  const std::function<void(int64_t)>& fn);

} // namespace oshx
