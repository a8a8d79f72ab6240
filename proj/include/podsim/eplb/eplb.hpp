// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "podsim/core/engine.hpp"
#include "podsim/core/error.hpp"

namespace podsim::eplb {

/// Token counts per [layer][expert][slice].
class LoadTable {
 public:
  LoadTable() = default;
  LoadTable(int layers, int experts, int slices);

  int layers() const { return layers_; }
  int experts() const { return experts_; }
  int slices() const { return slices_; }

  std::uint64_t& at(int layer, int expert, int slice);
  std::uint64_t at(int layer, int expert, int slice) const;
  std::uint64_t total() const;
  std::uint64_t expert_total(int layer, int expert) const;

  nlohmann::json to_json() const;
  static LoadTable from_json(const nlohmann::json& j);

  bool operator==(const LoadTable&) const = default;

 private:
  std::size_t index(int layer, int expert, int slice) const;

  int layers_ = 0;
  int experts_ = 0;
  int slices_ = 0;
  std::vector<std::uint64_t> counts_;
};

/// One token routed to one expert in one layer.
struct RoutingRecord {
  SimTime time{0};
  int layer = 0;
  int token = 0;
  int expert = 0;
};

/// CSV with header `time_ns,layer,token,expert`.
std::vector<RoutingRecord> read_routing_trace(std::istream& in);
std::vector<RoutingRecord> read_routing_trace(const std::string& path);
void write_routing_trace(std::ostream& out, const std::vector<RoutingRecord>& trace);

/// Throws ConfigError when timestamps go backwards or ids are out of range.
/// The slice count is the smallest that covers the trace (at least 1).
LoadTable collect_load(const std::vector<RoutingRecord>& trace, SimTime slice_width,
                       int layers, int experts);

int hottest_expert(const LoadTable& load, int layer, int slice);

/// Per-replica load once each expert's tokens are split over `replicas[e]`
/// copies; the first (count % m) replicas take one extra token.
std::uint64_t split_load(std::uint64_t count, int replicas);

/// Sum over slices of the hottest per-replica count. Empty `replicas` means
/// one copy per expert.
std::uint64_t layer_load(const LoadTable& load, int layer, const std::vector<int>& replicas = {});

struct GreedyResult {
  std::vector<int> selected;           // in selection order, repeats allowed
  std::vector<int> replicas;           // per expert, including the primary
  std::vector<std::uint64_t> history;  // L after 0..R iterations
};

GreedyResult select_redundant(const LoadTable& load, int layer, int budget);

/// Brute-force best allocation of `budget` extra replicas (small instances).
GreedyResult optimal_redundant(const LoadTable& load, int layer, int budget);

struct ReplicaRequest {
  int expert = 0;
  double load = 0;
};

struct Placement {
  int expert = 0;
  int node = 0;
};

class PlacementError : public ConfigError {
 public:
  PlacementError(const std::string& what, std::vector<int> unplaced)
      : ConfigError(what), unplaced_(std::move(unplaced)) {}
  const std::vector<int>& unplaced() const { return unplaced_; }

 private:
  std::vector<int> unplaced_;
};

/// Heaviest replica first, each onto the least-loaded node with a free slot.
/// `node_loads` and `free_slots` are updated in place.
std::vector<Placement> place_replicas(std::vector<ReplicaRequest> replicas,
                                      std::vector<double>& node_loads,
                                      std::vector<int>& free_slots);
/// Baseline: replicas in the given order, nodes taken round-robin.
std::vector<Placement> place_round_robin(const std::vector<ReplicaRequest>& replicas,
                                         std::vector<double>& node_loads,
                                         std::vector<int>& free_slots);

/// Slot layout: node n owns slots [n*S, (n+1)*S); the first P are primaries.
struct ReplicaAssignment {
  int num_nodes = 1;
  int primary_per_node = 1;
  int redundant_per_node = 0;
  int budget = 0;
  std::vector<std::vector<std::vector<int>>> slots;  // [layer][expert] -> slots, primary first

  static ReplicaAssignment native(int layers, int experts, int num_nodes, int redundant_per_node,
                                  int budget);
  int slots_per_node() const { return primary_per_node + redundant_per_node; }
  int node_of_slot(int slot) const { return slot / slots_per_node(); }
  int experts() const { return slots.empty() ? 0 : static_cast<int>(slots.front().size()); }
  /// Throws ConfigError on a violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static ReplicaAssignment from_json(const nlohmann::json& j);
  bool operator==(const ReplicaAssignment&) const = default;
};

struct LayerPlan {
  GreedyResult greedy;
  std::vector<Placement> placements;
  double native_max_slot_load = 0;
  double balanced_max_slot_load = 0;
  double native_max_node_load = 0;
  double balanced_max_node_load = 0;
};

/// Selects, places and records redundant replicas for one layer of
/// `assignment` (which must hold only primaries for that layer).
LayerPlan plan_layer(const LoadTable& load, int layer, ReplicaAssignment& assignment);

/// Rows are token positions, columns logical experts.
class MappingTable {
 public:
  MappingTable() = default;
  MappingTable(int batch, const std::vector<std::vector<int>>& slots);

  int batch() const { return batch_; }
  int experts() const { return experts_; }
  int at(int row, int expert) const { return table_[static_cast<std::size_t>(row) * experts_ + expert]; }
  nlohmann::json to_json() const;

 private:
  int batch_ = 0;
  int experts_ = 0;
  std::vector<int> table_;
};

MappingTable build_mapping(const ReplicaAssignment& a, int layer, int batch);
int route_token(int token_pos, int logical_expert, const MappingTable& table);

enum class ReconfigPhase { idle, prefetch, disable, load, restore, done };
const char* phase_name(ReconfigPhase p);

struct PhaseDurations {
  SimTime prefetch = from_ms(50);
  SimTime disable = from_us(100);
  SimTime load = from_ms(20);
  SimTime restore = from_us(100);
};

struct PhaseRecord {
  ReconfigPhase phase;
  SimTime start{0};
  SimTime end{0};
};

/// Live switch from `current` to `next`; primaries must stay put. Routing
/// stays valid at every instant: during disable/load only primaries serve.
class Reconfiguration {
 public:
  Reconfiguration(Engine& engine, ReplicaAssignment current, ReplicaAssignment next,
                  PhaseDurations durations = {});

  void start();
  ReconfigPhase phase() const { return phase_; }
  const std::vector<PhaseRecord>& records() const { return records_; }
  /// Slots that may receive tokens right now, per [layer][expert].
  const std::vector<std::vector<std::vector<int>>>& active_slots() const { return *active_; }
  int route(int layer, int token_pos, int expert) const;
  bool slot_enabled(int layer, int slot) const;

 private:
  void enter(ReconfigPhase p, SimTime len);

  Engine& engine_;
  ReplicaAssignment current_;
  ReplicaAssignment next_;
  std::vector<std::vector<std::vector<int>>> primaries_;
  const std::vector<std::vector<std::vector<int>>>* active_;
  PhaseDurations durations_;
  ReconfigPhase phase_ = ReconfigPhase::idle;
  std::vector<PhaseRecord> records_;
};

/// Hottest expert sees `skew` times the mean; the rest are spread by a
/// seeded Zipf-like draw around the mean.
LoadTable make_skewed_load(int experts, int slices, double skew, std::uint64_t tokens_per_slice,
                           std::uint64_t seed);

/// Full selection/placement report for every layer, as emitted by the CLI.
nlohmann::json analyze(const LoadTable& load, int num_nodes, int redundant_per_node, int budget);

}  // namespace podsim::eplb
