// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "podsim/core/time.hpp"
#include "podsim/fabric/latency_model.hpp"
#include "podsim/scheduler/scheduler.hpp"

namespace podsim::pipeline {

enum class RequestState { queued, prefilling, transferring, decoding, done, failed };
const char* state_name(RequestState s);

/// Prefill cost profile. Scale-out profiles reach decode over the scale-out
/// latency model instead of the scale-up fabric.
struct PrefillProfile {
  std::string name = "supernode";
  double fixed_ms = 5.0;
  double per_token_ms = 0.01;
  bool scale_out = false;
};

struct PrefillTeSpec {
  int dp_groups = 4;
  int batch_limit = 4;
  std::uint64_t kv_blocks = 512;  // per DP group
  PrefillProfile profile;
};

struct DecodeTeSpec {
  int dp_groups = 4;
  int batch_limit = 16;
  std::uint64_t kv_blocks = 512;  // per DP group
};

struct PdConfig {
  /// Colocated: every prefill DP group also decodes, with decode[0] sizing
  /// its decode pool; KV changes hands on the die instead of over P2P.
  bool colocated = false;
  std::vector<PrefillTeSpec> prefill{PrefillTeSpec{}};
  std::vector<DecodeTeSpec> decode{DecodeTeSpec{}};
  int block_tokens = 128;
  std::uint64_t kv_block_bytes = 16 * 1024;
  int transfer_cores = 8;
  double decode_step_ms = 50.0;
  double tokens_per_step = 1.9;
  /// A deferred RECV fails the request once it has waited this long.
  double backpressure_deadline_ms = 5000.0;
  double transfer_timeout_ms = 10.0;
  double completion_poll_us = 5.0;
  /// Scale-out path: startup and per-core bandwidth of the RDMA-like link.
  double scale_out_startup_us = 10.0;
  double scale_out_bandwidth_gbps = 12.5;
  scheduler::CostModel cost;
  fabric::LatencyModel latency;  // scale-up fabric

  void validate() const;
  int prefill_dies() const;
  int decode_dies() const;
};

struct WorkloadRequest {
  int id = 0;
  double arrival_ms = 0;
  int prompt_len = 1;
  int max_output = 1;
  std::uint64_t prefix_hash = 0;
};

struct WorkloadSpec {
  enum class Arrival { poisson, fixed };
  int count = 0;
  Arrival arrival = Arrival::fixed;
  double rate_per_s = 100.0;
  int prompt_min = 128;
  int prompt_max = 4096;
  int output_min = 16;
  int output_max = 512;
  int prefix_groups = 8;
  /// Explicit requests; when present the generator fields are ignored.
  std::vector<WorkloadRequest> requests;
};

std::vector<WorkloadRequest> generate_workload(const WorkloadSpec& spec, std::uint64_t seed);

struct StepRecord {
  int step = 0;  // 1..8
  SimTime at{0};
  std::string detail;
};

struct RequestTrace {
  int id = 0;
  RequestState state = RequestState::queued;
  std::string cause;  // failure cause; empty otherwise
  int prefill_te = -1;
  int prefill_dp = -1;
  int decode_te = -1;
  int decode_dp = -1;
  SimTime arrival{0};
  SimTime prefill_done{0};
  SimTime finished{0};
  int deferrals = 0;
  std::vector<StepRecord> steps;

  double ttft_ms() const { return to_ms(prefill_done - arrival); }
};

enum class KvOp { prefill_alloc, prefill_release, prefill_reclaim, decode_alloc, decode_free };
const char* kv_op_name(KvOp op);

struct KvLedgerEntry {
  SimTime at{0};
  bool prefill = true;
  int pool = 0;  // global DP index within its side
  std::uint64_t block = 0;
  int request = 0;
  KvOp op = KvOp::prefill_alloc;
};

struct KvAudit {
  std::uint64_t prefill_allocated = 0;
  std::uint64_t prefill_released = 0;
  std::uint64_t prefill_reclaimed = 0;
  std::uint64_t decode_allocated = 0;
  std::uint64_t decode_freed = 0;
  std::uint64_t leaked = 0;            // still held at the end
  std::uint64_t released_and_reclaimed = 0;
  std::uint64_t invalid_ops = 0;       // free of a block not held by that request
  bool balanced() const {
    return leaked == 0 && released_and_reclaimed == 0 && invalid_ops == 0 &&
           prefill_allocated == prefill_released + prefill_reclaimed &&
           decode_allocated == decode_freed;
  }
  nlohmann::json to_json() const;
};

/// Replays a ledger and checks block conservation.
KvAudit audit_ledger(const std::vector<KvLedgerEntry>& ledger);

struct PdResult {
  std::vector<RequestTrace> requests;
  std::vector<KvLedgerEntry> ledger;
  KvAudit audit;
  std::uint64_t backpressure_events = 0;
  std::uint64_t accepted_without_reservation = 0;
  std::uint64_t transfers = 0;          // KV block transfers that completed
  std::uint64_t bytes_verified = 0;
  std::uint64_t content_mismatches = 0;
  bool deadlock = false;
  double makespan_ms = 0;
  double tpot_ms = 0;
  double mean_ttft_ms = 0;
  int completed = 0;
  int failed = 0;

  nlohmann::json to_json(bool with_ledger = false) const;
};

/// Runs the disaggregated prefill/decode workflow over the given requests:
/// route to a prefill TE, DP scheduling, metadata-only transfer task, decode
/// TE and DP selection, capacity check with backpressure, block-wise P2P KV
/// transfer, completion polling on both sides, then decode.
PdResult pd_workflow(const PdConfig& cfg, const std::vector<WorkloadRequest>& requests,
                     std::uint64_t seed = 0);

}  // namespace podsim::pipeline
