#pragma once

#include <cstdint>

namespace ginv::par {

// Global switch between the OpenMP kernels and the serial reference kernels.
// Both paths compute bit-identical results; the switch exists so tests can
// compare them and the benchmark can time them.
void set_enabled(bool on);
bool enabled();

int max_threads();

// Minimum element count before a kernel bothers spawning a parallel region.
inline constexpr std::int64_t kGrain = 2048;

} // namespace ginv::par
