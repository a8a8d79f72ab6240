// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>

#include "podsim/core/time.hpp"

namespace podsim::fabric {

/// Cost functions for the two copy semantics of the fabric.
///
/// Memory semantics (core transfer units):
///   latency = mem_startup + bytes / (bandwidth * min(cores, cores_max)^eff)
/// DMA semantics:
///   latency = dma_startup + bytes / dma_bandwidth, no core time after issue.
///
/// Bandwidths are in GB/s, which is numerically bytes per nanosecond.
struct LatencyModel {
  // Memory-path constants are the least-squares fit of data/sendrecv_anchors.csv
  // (see calibrate()); rerun `podsim calibrate` to re-derive them.
  double mem_startup_us = 1.126875;
  double dma_startup_us = 4.0;
  double bandwidth_gbps = 69.463771;  // per-core base rate of the mtu path
  double core_efficiency = 0.378335;  // exponent on the core count
  int cores_max = 48;
  double dma_bandwidth_gbps = 400.0;
  double local_copy_factor = 4.0;     // on-die copies run this much faster
  double poll_interval_us = 0.1;

  // Optional multiplicative log-normal jitter, off by default.
  bool jitter_enabled = false;
  double jitter_sigma = 0.0;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;

  double mem_rate(int cores) const;  // bytes per ns
  SimTime mem_latency(std::uint64_t bytes, int cores) const;
  SimTime local_copy_latency(std::uint64_t bytes, int cores) const;
  SimTime dma_latency(std::uint64_t bytes) const;
  SimTime mem_startup() const { return from_us(mem_startup_us); }
  SimTime dma_startup() const { return from_us(dma_startup_us); }
  SimTime poll_interval() const { return from_us(poll_interval_us); }

  /// Bytes streamed in `t` after startup at the memory-semantic rate.
  SimTime mem_stream_time(std::uint64_t bytes, int cores) const;
  SimTime dma_stream_time(std::uint64_t bytes) const;

  /// Applies jitter when enabled; identity otherwise.
  SimTime perturb(SimTime t, std::mt19937_64& rng) const;
};

/// Smallest payload for which a DMA copy finishes no later than a memory-
/// semantic copy with `cores` cores. Empty when DMA never wins.
std::optional<std::uint64_t> dma_crossover_bytes(const LatencyModel& m, int cores);

/// Number of transfer chunks needed when each chunk is bounded by
/// `chunk_limit` bytes. A zero-byte transfer still takes one (empty) chunk.
std::uint64_t chunk_count(std::uint64_t bytes, std::uint64_t chunk_limit);

}  // namespace podsim::fabric
