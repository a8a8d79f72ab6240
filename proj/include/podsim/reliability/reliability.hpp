// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "podsim/core/time.hpp"
#include "podsim/pipeline/mtp.hpp"

namespace podsim::reliability {

enum class FaultKind { crash, stuck_loop, kv_stall, net_transient, mem_fault };
const char* fault_name(FaultKind k);
FaultKind parse_fault_kind(const std::string& s);

/// Actor ids: "te:<i>", "dp:<i>" for heartbeats; "prefill:<i>", "decode:<i>"
/// for recovery; "link:<a>-<b>" for channels.
struct FaultEvent {
  FaultKind kind = FaultKind::crash;
  std::string location;
  double inject_ms = 0;
  // mem_fault only: faulty KV block range [begin, end) on the located group.
  std::uint64_t block_begin = 0;
  std::uint64_t block_end = 0;

  nlohmann::json to_json() const;
  static FaultEvent from_json(const nlohmann::json& j);
};

/// Parses a JSON list of fault events. Errors carry line and column.
std::vector<FaultEvent> read_fault_schedule(std::istream& in);
std::vector<FaultEvent> read_fault_schedule_file(const std::string& path);

struct ActorRef {
  std::string type;
  int index = 0;
  int peer = -1;  // links only
};
ActorRef parse_actor(const std::string& id);

// ---- detection ----

struct HeartbeatConfig {
  double control_to_te_ms = 1000.0;
  double te_to_dp_ms = 200.0;
  int miss_threshold = 3;
  void validate() const;
};

struct HeartbeatTopology {
  int tes = 1;
  int dps_per_te = 4;
};

struct Detection {
  SimTime at{0};
  std::string tier;  // "control" (control plane to TE) or "te" (TE to DP)
  std::string actor;
  int misses = 0;
};

/// Control plane probes every TE and each TE probes its DP masters. An actor
/// answers only while its event loop runs, so crashes and hangs look the
/// same. `miss_threshold` consecutive misses raise one detection per actor.
std::vector<Detection> heartbeat_monitor(const HeartbeatConfig& cfg, const HeartbeatTopology& topo,
                                         const std::vector<FaultEvent>& faults, SimTime horizon);

enum class LinkHealth { healthy, decode_saturation, link_fault };
const char* health_name(LinkHealth h);

struct ProbeConfig {
  double slow_threshold_us = 100.0;
  double timeout_us = 2000.0;
  std::uint64_t dummy_bytes = 4096;
  void validate() const;
};

/// One channel at probe time. `receiver_delay_us` is how long the decode side
/// takes to service the probe; `cut_at_us` cuts the link at that time
/// relative to the probe start (negative: already cut).
struct LinkScenario {
  bool kv_stalled = true;
  double receiver_delay_us = 0;
  std::optional<double> cut_at_us;
  int cores = 1;
};

struct ProbeResult {
  LinkHealth health = LinkHealth::healthy;
  bool delivered = false;
  double latency_us = 0;
};

/// Sends a dummy payload over the real send/recv protocol and classifies:
/// never delivered is a link fault, delivered late is decode saturation.
ProbeResult link_probe(const LinkScenario& s, const ProbeConfig& cfg);

struct LabeledScenario {
  LinkScenario scenario;
  LinkHealth truth = LinkHealth::healthy;
};
std::vector<LabeledScenario> generate_link_scenarios(int n, std::uint64_t seed,
                                                     const ProbeConfig& cfg);

// ---- recovery ----

enum class RecoveryStage { fine_grained, pd_failover, restart_world };
const char* stage_name(RecoveryStage s);

struct RecoveryPolicy {
  RecoveryStage stage = RecoveryStage::pd_failover;
  bool kill_p_to_preserve_d = false;
  int min_replicas_per_expert = 1;
  void validate() const;
};

struct RecoveryCosts {
  double te_restart_ms = 30000.0;
  double expert_reload_ms = 2000.0;
  double rollback_signal_ms = 1.0;
  double mask_ms = 50.0;
};

/// slots[node][slot] holds an expert id or -1.
struct ExpertLayout {
  int experts = 0;
  std::vector<std::vector<int>> slots;

  /// Primaries spread round-robin, then `redundant` extra replicas of the
  /// lowest ids; unused slots stay empty.
  static ExpertLayout build(int experts, int nodes, int slots_per_node, int redundant);
  std::vector<int> replicas(const std::vector<bool>& dead) const;
  int min_replicas(const std::vector<bool>& dead) const;
};

struct Cluster {
  int prefill_tes = 4;
  int decode_dp_groups = 160;
  int ep_ranks = 160;
  ExpertLayout layout;
  std::vector<bool> dead;  // per decode node

  /// 288 experts (256 routed + 32 shared) on 160 decode dies with 2 slots.
  static Cluster decode_default();
};

struct RecoveryRecord {
  SimTime time{0};
  std::string event;
  std::string action;
  RecoveryStage stage = RecoveryStage::fine_grained;
  std::vector<std::string> affected;

  std::string to_json_line() const;
};

struct RecoveryOutcome {
  std::vector<RecoveryRecord> trace;
  RecoveryStage final_stage = RecoveryStage::fine_grained;
  bool escalated = false;
  std::optional<SimTime> decode_ready;
  std::optional<SimTime> prefill_ready;
};

/// Handles one detected fault starting at the policy's stage; a stage that
/// cannot handle it escalates to the next coarser one. Mutates `cluster`.
RecoveryOutcome recover(const FaultEvent& ev, const RecoveryPolicy& policy, Cluster& cluster,
                        const RecoveryCosts& costs = {});

/// Vertical scaling: drops `node` and re-homes experts that fell below
/// `min_replicas` onto free slots, then onto slots of experts with spare
/// replicas. Returns false (and leaves `c` untouched) when that is impossible.
bool vertical_scale(Cluster& c, int node, int min_replicas);

// ---- token recomputation and memory-fault masking ----

struct DecodeRunConfig {
  int groups = 4;
  int requests_per_group = 15;
  int iterations = 20;
  double iteration_ms = 50.0;
  int blocks_per_request = 4;
  int vocab = 32000;
  pipeline::MtpConfig mtp;
  std::uint64_t seed = 0;
  double detect_ms = 2.0;
  RecoveryCosts costs;
  void validate() const;
};

struct DecodeRun {
  std::vector<std::vector<int>> streams;  // per request, tokens in emit order
  std::vector<double> finish_ms;          // per request; NAN when failed
  std::vector<int> failed;
  int reexecuted_iterations = 0;
  double makespan_ms = 0;
  std::vector<RecoveryRecord> trace;
};

/// Runs `iterations` synchronized decode iterations. A net_transient during
/// an iteration rolls every group back to the iteration's snapshot and
/// re-executes it; a mem_fault masks the block range and fails the requests
/// whose KV blocks it touches.
DecodeRun run_decode(const DecodeRunConfig& cfg, const std::vector<FaultEvent>& faults);

}  // namespace podsim::reliability
