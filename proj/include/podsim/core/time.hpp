// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>

namespace podsim {

// Simulated time is kept as integral nanoseconds so that long runs never
// accumulate floating-point drift. Public APIs speak microseconds/ms.
using SimTime = std::chrono::nanoseconds;

inline SimTime from_us(double us) {
  return SimTime{static_cast<std::int64_t>(std::llround(us * 1e3))};
}

inline SimTime from_ms(double ms) {
  return SimTime{static_cast<std::int64_t>(std::llround(ms * 1e6))};
}

inline double to_us(SimTime t) { return static_cast<double>(t.count()) / 1e3; }
inline double to_ms(SimTime t) { return static_cast<double>(t.count()) / 1e6; }

// First tick of a grid anchored at `start` with spacing `interval` that is not
// earlier than `t`. Used by every busy-poll loop.
inline SimTime next_tick(SimTime start, SimTime interval, SimTime t) {
  if (t <= start || interval.count() <= 0) return t <= start ? start : t;
  const auto elapsed = (t - start).count();
  const auto step = interval.count();
  const auto ticks = (elapsed + step - 1) / step;
  return start + SimTime{ticks * step};
}

}  // namespace podsim
