// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "podsim/fabric/fabric.hpp"
#include "podsim/xccl/p2p.hpp"

namespace podsim::xccl {

enum class Precision { fp16, int8 };

struct TokenPayload {
  int token_index = 0;
  int source = 0;  // rank (dispatch) or attention-node index (a2e) holding the token
  std::vector<double> hidden;
};

/// Top-k routing per token, aligned with the token list passed alongside.
struct GatingOutput {
  std::vector<std::vector<int>> experts;
  std::vector<std::vector<double>> scores;

  int k() const { return experts.empty() ? 0 : static_cast<int>(experts.front().size()); }
  /// Throws ConfigError on ragged rows, k < 1, bad ids or non-finite scores.
  void validate(std::size_t tokens, int num_experts) const;
};

struct EpConfig {
  int num_ranks = 1;
  int experts_per_rank = 1;
  std::vector<int> rank_of_expert;  // physical expert slot -> rank

  static EpConfig uniform(int num_ranks, int experts_per_rank);
  int num_experts() const { return static_cast<int>(rank_of_expert.size()); }
  void validate() const;
};

/// One (token, expert) pair as carried through a collective. Values travel at
/// full precision; the precision tag only affects modeled wire bytes.
struct Delivery {
  int token_index = 0;
  int source = 0;
  int expert = -1;  // -1 for partial sums produced by a trampoline
  int kslot = -1;
  double score = 0;
  std::vector<double> hidden;
};

struct CollectiveSummary {
  std::string collective;
  int participants = 0;
  std::uint64_t bytes = 0;            // modeled payload bytes on the wire
  std::uint64_t metadata_updates = 0;
  SimTime t_start{0};
  SimTime t_end{0};
  std::optional<int> straggler_node;  // die whose metadata arrived last or never
  bool complete = true;
  std::vector<int> stalled;           // receiver dies that timed out
  std::vector<double> latency_us;     // per receiver, from its own start to done

  std::string to_json_line() const;
};

struct CollectiveOptions {
  int cores = 48;
  int wire_dim = 0;  // modeled hidden size; 0 uses the payload's own dimension
  double quant_fixed_us = 0;      // per-kernel quantization setup
  double quant_per_token_us = 0;  // per-token conversion
  double meta_issue_us = 0;       // scalar cost per metadata field written
  SimTime timeout = from_ms(10);
  Addr inbox_addr = 512ULL << 20;  // app-area offset receiving pulled entries
  std::map<int, SimTime> start_delay;  // die -> late start (straggler injection)
  std::set<int> failed;                // dies that never participate
};

/// Generic pull-based exchange used by every collective: senders lay out
/// entries per destination in their managed area, publish a count per
/// destination, receivers poll until all expected senders have published,
/// then pull.
struct ExchangePlan {
  std::string label;
  std::vector<NodeId> senders;
  std::vector<NodeId> receivers;
  std::vector<std::vector<std::vector<Delivery>>> outbox;  // [sender][receiver]
  std::vector<std::vector<int>> publish_to;   // receivers each sender updates
  std::vector<SimTime> sender_ready;
  std::vector<SimTime> receiver_ready;
  std::vector<std::uint64_t> staged_bytes;    // per sender, read from the app area
  std::vector<int> quant_tokens;              // per sender, 0 disables quantization
  std::vector<bool> silent;                   // per sender, never publishes (upstream failure)
  double wire_bytes_per_value = 2.0;
  Semantics semantics = Semantics::memory;
};

struct ExchangeOutcome {
  std::vector<std::vector<Delivery>> inbox;  // [receiver]
  std::vector<SimTime> done;                 // [receiver]
  std::vector<bool> ok;                      // [receiver]
  CollectiveSummary summary;
};

struct DispatchResult {
  std::vector<std::vector<Delivery>> per_rank;
  CollectiveSummary summary;
};

struct CombineResult {
  std::map<int, std::vector<double>> output;  // token_index -> aggregated vector
  std::vector<int> incomplete;                // tokens missing an expert output
  CollectiveSummary summary;
};

struct TrampolineMap {
  std::vector<NodeId> attention_nodes;
  std::vector<NodeId> expert_nodes;
  std::vector<int> trampolines;               // indices into expert_nodes
  std::vector<std::vector<int>> second_stage; // per trampoline, expert-node indices
  std::vector<int> group_of;                  // expert-node index -> trampoline position

  /// First |attention| experts are trampolines; the rest are split into
  /// contiguous blocks of ceil((E - A) / A).
  static TrampolineMap build(std::vector<NodeId> attention, std::vector<NodeId> experts);
};

struct A2eResult {
  std::vector<std::vector<Delivery>> per_expert_node;
  std::vector<CollectiveSummary> stages;
};

struct E2aResult {
  std::map<int, std::vector<double>> output;
  std::vector<int> incomplete;
  std::vector<CollectiveSummary> stages;
};

class Collectives {
 public:
  Collectives(fabric::Fabric& fab, CollectiveOptions opts = {});

  CollectiveOptions& options() { return opts_; }

  /// Runs one exchange to quiescence on the fabric's engine.
  ExchangeOutcome exchange(const ExchangePlan& plan);

  DispatchResult dispatch(const std::vector<TokenPayload>& tokens, const GatingOutput& gating,
                          const EpConfig& cfg, bool quantize,
                          const std::vector<NodeId>& rank_nodes);
  /// expert_outputs[rank] carry the expert's output in `hidden`.
  CombineResult combine(const std::vector<std::vector<Delivery>>& expert_outputs,
                        const GatingOutput& gating, const std::vector<TokenPayload>& tokens,
                        const EpConfig& cfg, const std::vector<NodeId>& rank_nodes);

  /// `cfg` maps physical experts onto expert-node indices.
  A2eResult a2e(const std::vector<TokenPayload>& tokens, const GatingOutput& gating,
                const EpConfig& cfg, const TrampolineMap& tmap, bool quantize);
  E2aResult e2a(const std::vector<std::vector<Delivery>>& expert_outputs,
                const GatingOutput& gating, const std::vector<TokenPayload>& tokens,
                const TrampolineMap& tmap);

  const std::vector<CollectiveSummary>& history() const { return history_; }

 private:
  SimTime prep_time(const ExchangePlan& plan, std::size_t s) const;
  SimTime pull_time(const ExchangePlan& plan, std::uint64_t wire_bytes) const;
  int wire_dim(std::size_t payload_dim) const;

  fabric::Fabric& fab_;
  CollectiveOptions opts_;
  std::uint64_t next_event_ = 1;
  std::vector<CollectiveSummary> history_;
};

/// Dense reference: every (token, expert) pair routed straight to the rank
/// hosting the expert, as sorted (token, expert) lists per rank.
std::vector<std::vector<std::pair<int, int>>> dense_routing(const std::vector<TokenPayload>& tokens,
                                                            const GatingOutput& gating,
                                                            const EpConfig& cfg);

/// Closed-form latency of one uniform dispatch or combine on a rank, in us.
/// Every rank holds `tokens` tokens and sends/receives tokens * k entries.
struct CollectiveCostModel {
  fabric::LatencyModel latency;
  CollectiveOptions opts;
  int ranks = 128;
  int k = 8;
  int hidden = 7168;

  double dispatch_us(int tokens, bool quantize = true) const;
  double combine_us(int tokens) const;
  /// Smallest per-die batch at which quantized dispatch beats combine.
  std::optional<int> dispatch_crossover(int max_tokens = 1024) const;
};

/// Calibrated defaults: the quantization setup cost puts the dispatch/combine
/// crossover at 32 tokens per die (EP128, k=8, hidden 7168); the per-field
/// metadata cost makes a 160x288 A2E at batch 96 take about 172 us.
CollectiveOptions default_ep_options();

struct MaCollectiveTimes {
  double a2e_us = 0;  // both stages, first publish to last expert-node delivery
  double e2a_us = 0;
  std::uint64_t stage1_metadata_updates = 0;
};

/// Runs one A2E and one E2A on a full-size pod with zero-length payloads
/// carrying `hidden` modeled values per token and a fixed striped routing.
MaCollectiveTimes measure_ma_collectives(int attention, int experts, int batch, int k,
                                         int hidden, const CollectiveOptions& opts);

}  // namespace podsim::xccl
