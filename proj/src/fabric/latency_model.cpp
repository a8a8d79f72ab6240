// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/fabric/latency_model.hpp"

#include <algorithm>
#include <cmath>

#include "podsim/core/error.hpp"

namespace podsim::fabric {

void LatencyModel::validate() const {
  if (!(mem_startup_us >= 0)) throw ConfigError("latency.mem_startup_us must be >= 0");
  if (!(dma_startup_us > mem_startup_us)) {
    throw ConfigError("latency.dma_startup_us must exceed latency.mem_startup_us");
  }
  if (!(bandwidth_gbps > 0)) throw ConfigError("latency.bandwidth_gbps must be > 0");
  if (!(dma_bandwidth_gbps > 0)) throw ConfigError("latency.dma_bandwidth_gbps must be > 0");
  if (!(core_efficiency > 0 && core_efficiency <= 1)) {
    throw ConfigError("latency.core_efficiency must lie in (0, 1]");
  }
  if (cores_max < 1) throw ConfigError("latency.cores_max must be >= 1");
  if (!(local_copy_factor > 0)) throw ConfigError("latency.local_copy_factor must be > 0");
  if (!(poll_interval_us > 0)) throw ConfigError("latency.poll_interval_us must be > 0");
  if (jitter_sigma < 0) throw ConfigError("latency.jitter_sigma must be >= 0");
}

double LatencyModel::mem_rate(int cores) const {
  const int c = std::clamp(cores, 1, cores_max);
  return bandwidth_gbps * std::pow(static_cast<double>(c), core_efficiency);
}

SimTime LatencyModel::mem_stream_time(std::uint64_t bytes, int cores) const {
  return SimTime{static_cast<std::int64_t>(
      std::llround(static_cast<double>(bytes) / mem_rate(cores)))};
}

SimTime LatencyModel::mem_latency(std::uint64_t bytes, int cores) const {
  return mem_startup() + mem_stream_time(bytes, cores);
}

SimTime LatencyModel::local_copy_latency(std::uint64_t bytes, int cores) const {
  return SimTime{static_cast<std::int64_t>(std::llround(
      static_cast<double>(bytes) / (mem_rate(cores) * local_copy_factor)))};
}

SimTime LatencyModel::dma_stream_time(std::uint64_t bytes) const {
  return SimTime{static_cast<std::int64_t>(
      std::llround(static_cast<double>(bytes) / dma_bandwidth_gbps))};
}

SimTime LatencyModel::dma_latency(std::uint64_t bytes) const {
  return dma_startup() + dma_stream_time(bytes);
}

SimTime LatencyModel::perturb(SimTime t, std::mt19937_64& rng) const {
  if (!jitter_enabled || jitter_sigma <= 0) return t;
  std::lognormal_distribution<double> dist(0.0, jitter_sigma);
  return SimTime{static_cast<std::int64_t>(
      std::llround(static_cast<double>(t.count()) * dist(rng)))};
}

std::optional<std::uint64_t> dma_crossover_bytes(const LatencyModel& m, int cores) {
  // mem:  s_m + x / r_m     dma:  s_d + x / r_d     (ns, bytes/ns)
  const double s_m = m.mem_startup_us * 1e3;
  const double s_d = m.dma_startup_us * 1e3;
  const double inv_m = 1.0 / m.mem_rate(cores);
  const double inv_d = 1.0 / m.dma_bandwidth_gbps;
  if (s_d <= s_m) return 0;
  if (inv_d >= inv_m) return std::nullopt;
  return static_cast<std::uint64_t>(std::ceil((s_d - s_m) / (inv_m - inv_d)));
}

std::uint64_t chunk_count(std::uint64_t bytes, std::uint64_t chunk_limit) {
  if (chunk_limit == 0) throw ConfigError("chunk limit must be > 0");
  if (bytes == 0) return 1;
  return (bytes + chunk_limit - 1) / chunk_limit;
}

}  // namespace podsim::fabric
