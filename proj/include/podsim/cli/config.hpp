// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "podsim/fabric/latency_model.hpp"
#include "podsim/pipeline/ma_pipeline.hpp"
#include "podsim/pipeline/mtp.hpp"
#include "podsim/pipeline/pd.hpp"
#include "podsim/pipeline/throughput.hpp"
#include "podsim/reliability/reliability.hpp"
#include "podsim/scheduler/scheduler.hpp"

namespace podsim::cli {

enum class Deployment { colocated_pd, disagg_pd, disagg_ma };
const char* deployment_name(Deployment d);

struct TopologySpec {
  int chips = 384;
  int dies_per_chip = 2;
  int cores_per_die = 48;
  int dies() const { return chips * dies_per_chip; }
};

struct EplbSpec {
  std::string trace;  // resolved path of the routing trace CSV
  double slice_ms = 1.0;
  int layers = 0;     // 0: inferred from the trace
  int experts = 0;
  int nodes = 8;
  int redundant_per_node = 1;
  int budget = 8;
};

struct ReliabilitySpec {
  reliability::HeartbeatConfig heartbeat;
  // Every fault enters the ladder at the finest stage by default.
  reliability::RecoveryPolicy policy{reliability::RecoveryStage::fine_grained};
  reliability::RecoveryCosts costs;
  // Decode cluster the recovery actions act on.
  int experts = 288;
  int decode_nodes = 160;
  int slots_per_node = 2;
  int redundant = 32;
  // Token-recompute run used for net_transient and mem_fault events.
  reliability::DecodeRunConfig decode_run;
};

/// Fully resolved run configuration. File references are resolved relative
/// to the file that names them.
struct RunConfig {
  std::string source;
  std::string name;
  Deployment deployment = Deployment::disagg_pd;
  std::uint64_t seed = 0;
  TopologySpec topology;
  fabric::LatencyModel latency;
  pipeline::MtpConfig mtp;
  scheduler::CostModel scheduler;
  std::optional<pipeline::DecodeDeployment> decode;
  std::optional<pipeline::MaConfig> ma;
  std::optional<pipeline::PdConfig> pd;
  pipeline::WorkloadSpec workload;
  std::optional<EplbSpec> eplb;
  ReliabilitySpec reliability;
  std::string faults;  // fault schedule path, empty when none

  /// Cross-section checks (deployment fits the topology, required sections).
  void validate() const;
};

/// Errors are ConfigError with a "file:line:column: message" prefix.
RunConfig load_config(const std::string& path);
RunConfig parse_config(std::string_view text, const std::string& source);

}  // namespace podsim::cli
