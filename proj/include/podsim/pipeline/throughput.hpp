// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "podsim/pipeline/ma_pipeline.hpp"
#include "podsim/pipeline/mtp.hpp"
#include "podsim/xccl/collectives.hpp"

namespace podsim::pipeline {

struct KernelStats {
  std::string name;
  double avg_us = 0;
  double min_us = 0;
  double max_us = 0;
  std::uint64_t samples = 0;

  static KernelStats of(std::string name, const std::vector<double>& us);
  bool operator==(const KernelStats&) const = default;
};

/// Colocated decode deployment (attention and experts on the same dies).
struct DecodeDeployment {
  int dies = 288;
  int dies_per_chip = 2;
  int batch_per_die = 60;
  double forward_ms = 93.0;
  double gap_ms = 2.0;
  MtpConfig mtp;
  int iterations = 16;
  /// Layers whose dispatch/combine are simulated on the fabric for the
  /// kernel breakdown; 0 skips the breakdown.
  int sampled_layers = 2;
  int top_k = 8;
  int hidden = 7168;
  double mla_jitter_us = 0;  // stdev of per-die MLA finish time before dispatch
  std::uint64_t seed = 0;

  void validate() const;
};

struct ThroughputReport {
  double tokens_per_step = 0;
  double tpot_ms = 0;
  double forward_ms = 0;
  double tokens_per_s_per_chip = 0;
  double total_tokens_per_s = 0;
  std::int64_t global_batch = 0;
  std::vector<KernelStats> breakdown;

  nlohmann::json to_json() const;
  static ThroughputReport from_json(const nlohmann::json& j);
  bool operator==(const ThroughputReport&) const = default;
};

/// tokens/s/chip = dies_per_chip * batch_per_die * 1000 / tpot_ms.
double tokens_per_s_per_chip(int dies_per_chip, int batch_per_die, double tpot_ms);

ThroughputReport simulate_decode(const DecodeDeployment& d);

/// Dispatch and combine latency per rank across `layers` sampled layers,
/// with each rank's start delayed by |N(0, jitter)|.
std::vector<KernelStats> ep_kernel_breakdown(int ranks, int batch_per_rank, int top_k, int hidden,
                                             int layers, double jitter_us, std::uint64_t seed);

struct MaReport {
  IterationTimeline timeline;
  ThroughputReport throughput;
};

/// Disaggregated MoE-attention: timeline plus TPOT = forward / tokens per step.
/// Chips count attention and expert dies together.
MaReport simulate_ma(const MaConfig& cfg, const MtpConfig& mtp, int dies_per_chip = 2);

}  // namespace podsim::pipeline
