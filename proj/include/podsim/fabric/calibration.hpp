// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <istream>
#include <string>
#include <vector>

#include "podsim/fabric/latency_model.hpp"
#include "podsim/fabric/memory.hpp"

namespace podsim::fabric {

struct LatencySample {
  std::uint64_t bytes = 0;
  int cores = 1;
  double latency_us = 0;
};

struct CalibrationResult {
  LatencyModel model;
  double rmse_us = 0;
  double max_abs_err_us = 0;
};

/// Closed-form end-to-end latency of one synchronous send/receive pair under
/// memory semantics: three startups (write, publish, ack), the streamed
/// payload, the first staging copy and last receive copy, and on average half
/// a poll interval on each side.
double predict_send_latency_us(const LatencyModel& m, const FabricOptions& opts,
                               std::uint64_t bytes, int cores);

/// Reads `bytes,cores,latency_us` rows (header required).
std::vector<LatencySample> read_latency_samples(std::istream& in);
std::vector<LatencySample> read_latency_samples(const std::string& path);

/// Fits mem_startup_us and bandwidth_gbps by linear least squares for each
/// candidate core_efficiency and picks the exponent with the least squared
/// error (golden-section search on [0.05, 1]). Fields not fitted are copied
/// from `base`.
CalibrationResult calibrate(const std::vector<LatencySample>& samples, const LatencyModel& base,
                            const FabricOptions& opts = {});

}  // namespace podsim::fabric
