// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>

namespace mujica {

/// Worker count: hardware concurrency capped by the MUJICA_THREADS env var.
int worker_count();

/// Splits [0, n) into contiguous chunks, one per worker. Chunk boundaries
/// depend only on (n, worker_count), so results are reproducible for a fixed
/// thread configuration. Callers must write disjoint output regions.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

} // namespace mujica
