// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "podsim/core/time.hpp"

namespace podsim::scheduler {

struct DpGroupState {
  int id = 0;
  int pending_requests = 0;
  int active_batch = 0;
  int batch_limit = 1;
  std::uint64_t kv_used_blocks = 0;
  std::uint64_t kv_total_blocks = 1;
  std::uint64_t queued_tokens = 0;  // prompt tokens waiting for prefill
  std::set<std::uint64_t> prefix_cache;

  double kv_usage() const {
    return static_cast<double>(kv_used_blocks) / static_cast<double>(kv_total_blocks);
  }
  bool full() const { return active_batch + pending_requests >= batch_limit; }
};

struct CostModel {
  double weight_prefix_hit = 1.0;
  double weight_length = 1.0;
  double weight_load = 1.0;
  void validate() const;
};

struct PendingRequest {
  int id = 0;
  int prompt_len = 0;
  int max_output_len = 0;
  std::uint64_t prefix_hash = 0;
};

/// JSON-lines record of every scheduling decision.
class AuditLog {
 public:
  void record(SimTime time, int request, const std::vector<int>& candidates,
              const std::vector<double>& scores, std::optional<int> chosen);
  const std::vector<std::string>& lines() const { return lines_; }
  void clear() { lines_.clear(); }

 private:
  std::vector<std::string> lines_;
};

struct Assignment {
  int request = 0;
  int group = 0;
};

struct PrefillDecision {
  std::vector<Assignment> assigned;
  std::vector<int> deferred;
};

/// Single-level scheduling over a snapshot: longest prompts first, each to
/// the group with minimal cost
///   w_prefix * (1 - hit) + w_length * (queued + len) / total_len + w_load * (active + pending) / limit
/// among groups with batch room and KV room for the prompt. `view` is
/// updated with the assignments. `block_tokens` sizes the KV check.
PrefillDecision prefill_schedule_step(std::vector<DpGroupState>& view,
                                      const std::vector<PendingRequest>& queue,
                                      const CostModel& cost, int block_tokens = 128,
                                      AuditLog* audit = nullptr, SimTime now = SimTime{0});

/// Baseline: arrival order, round-robin over groups, no cost model.
PrefillDecision prefill_round_robin(std::vector<DpGroupState>& view,
                                    const std::vector<PendingRequest>& queue);

/// Each group prefills everything assigned to it as one batch costing
/// fixed_ms + per_token_ms * tokens; returns the time the last group finishes.
double prefill_makespan_ms(const PrefillDecision& d, const std::vector<PendingRequest>& queue,
                           int groups, double fixed_ms = 5.0, double per_token_ms = 0.01);

std::uint64_t reserve_blocks(int max_output_len, int block_tokens);

struct DecodeRoute {
  std::optional<int> group;  // empty means backpressure
  std::vector<int> candidates;
  std::vector<double> scores;
};

/// Lowest (kv_used + reserve) / kv_total among groups below their batch
/// limit with room for the reservation; ties to the lowest id.
DecodeRoute route_decode(int request, const std::vector<DpGroupState>& groups,
                         std::uint64_t reserve, AuditLog* audit = nullptr,
                         SimTime now = SimTime{0});

struct DomainSpec {
  SimTime window{0};     // A2E + MoE + E2A while holding the token
  SimTime attention{0};  // attention work between two turns
};

struct TokenHold {
  int domain = 0;
  SimTime start{0};
  SimTime end{0};
};

struct RotationResult {
  std::vector<TokenHold> holds;
  SimTime makespan{0};
  double moe_busy_fraction = 0;
  std::vector<double> hold_fraction;  // per domain
};

/// Round-robin token passing; a domain takes the token when it is both
/// released and the domain's attention work is done.
RotationResult domain_rotate(const std::vector<DomainSpec>& domains, int rounds);
/// True when no two holds overlap in time.
bool exclusive(const std::vector<TokenHold>& holds);

struct JitterConfig {
  bool core_pinning = false;
  bool graph_caching = false;
  int gc_every = 0;  // 0 leaves garbage collection automatic
};

struct JitterParams {
  double noise_mean_ms = 0.3;       // scheduling noise without pinning
  double preempt_prob = 0.002;      // rare OS preemption without pinning
  double preempt_ms = 8.0;
  double pinned_noise_ms = 0.02;
  double guard_ms = 1.5;            // per-pass launch guard without graph caching
  double gc_prob = 0.004;           // automatic GC pause probability per pass
  double gc_min_ms = 20.0;
  double gc_max_ms = 150.0;
  double gc_per_pass_ms = 0.2;      // forced GC cost grows with the interval
};

/// Per-pass host overhead on each DP group; deterministic for a seed.
class JitterModel {
 public:
  JitterModel(JitterConfig cfg, JitterParams params, std::uint64_t seed);

  double overhead_ms(int group, int pass) const;
  /// Slowest minus fastest group: the wait at the first dispatch barrier.
  double first_dispatch_delay_ms(int groups, int pass) const;

 private:
  JitterConfig cfg_;
  JitterParams p_;
  std::uint64_t seed_;
};

}  // namespace podsim::scheduler
