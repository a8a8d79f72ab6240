// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "podsim/core/engine.hpp"
#include "podsim/core/trace.hpp"
#include "podsim/fabric/latency_model.hpp"
#include "podsim/fabric/memory.hpp"
#include "podsim/fabric/topology.hpp"

namespace podsim::fabric {

enum class TransferStatus { ok, fault };

struct Completion {
  SimTime issued{0};
  SimTime done{0};
  std::uint64_t chunks = 0;
  TransferStatus status = TransferStatus::ok;
};

struct FaultRecord {
  SimTime time{0};
  int node = -1;
  int peer = -1;
  std::string kind;  // out_of_bounds, link_drop, protocol, timeout
  std::string detail;
};

struct PollResult {
  bool satisfied = false;
  SimTime at{0};
};

using PollId = std::uint64_t;
using PollPredicate = std::function<bool(std::span<const std::byte>)>;
using PollCallback = std::function<void(const PollResult&)>;

/// Global shared-memory fabric of the pod.
///
/// Every die owns a sparse address space laid out by MemoryLayout. Writes
/// become visible at their modeled completion time through engine events, so
/// readers only ever observe bytes that have landed. Busy polling is modeled
/// on a fixed tick grid but evaluated on write notifications.
class Fabric {
 public:
  Fabric(Engine& engine, Topology topo, LatencyModel model, FabricOptions opts = {});

  Engine& engine() { return engine_; }
  const Topology& topology() const { return topo_; }
  const FabricOptions& options() const { return opts_; }
  const MemoryLayout& layout() const { return layout_; }
  Trace& trace() { return trace_; }
  const Trace& trace() const { return trace_; }

  /// Dies placed in different domains talk over the scale-out model.
  void set_scale_out_model(LatencyModel m);
  void set_node_domain(NodeId node, int domain);
  const LatencyModel& model() const { return model_; }
  const LatencyModel& model(NodeId a, NodeId b) const;

  SparseMemory& memory(NodeId node);
  const SparseMemory& memory(NodeId node) const;
  /// Inbound ring on `owner` that carries data from `peer`.
  RingBuffer& ring(NodeId owner, NodeId peer);

  /// Memory-semantic write of `payload` issued now from `src` into `dst`.
  /// Chunked by the per-core staging size; each chunk lands in offset order
  /// at its modeled time. Out-of-bounds targets produce a fault record.
  Completion mem_write(NodeId src, NodeId dst, Addr dst_addr,
                       std::span<const std::byte> payload, int cores);

  /// DMA bulk copy issued now. Source bytes are captured at issue.
  /// Throws std::invalid_argument for overlapping same-die ranges and
  /// ConfigError for lengths beyond the DMA limit.
  Completion dma_copy(NodeId src, Addr src_addr, NodeId dst, Addr dst_addr,
                      std::uint64_t len);

  /// Busy-polls [addr, addr+len) on `node` until `pred` holds or `timeout`
  /// elapses. Occupies `cores` cores for the whole wait.
  PollId poll(NodeId node, Addr addr, std::uint64_t len, PollPredicate pred,
              SimTime timeout, int cores, PollCallback done,
              std::optional<SimTime> interval = std::nullopt);
  void cancel_poll(PollId id);

  /// Schedules `blob` to land at `when`. Drops it (and records a fault) when
  /// the link is down at delivery time or the target is out of bounds.
  void deliver_at(SimTime when, NodeId src, NodeId dst, Addr addr, SparseBlob blob,
                  std::function<void()> on_landed = {});
  void write_metadata_at(SimTime when, NodeId src, NodeId dst, std::uint64_t field,
                         const MetadataField& value, std::function<void()> on_landed = {});
  MetadataField read_metadata(NodeId node, std::uint64_t field) const;

  void set_link(NodeId a, NodeId b, bool up);
  bool link_up(NodeId a, NodeId b) const;

  void charge_cores(NodeId node, int cores, SimTime from, SimTime to);
  double core_busy_us(NodeId node) const;

  void report_fault(FaultRecord f);
  const std::vector<FaultRecord>& faults() const { return faults_; }
  void set_fault_sink(std::function<void(const FaultRecord&)> sink) { sink_ = std::move(sink); }

  std::uint64_t ring_violations() const;
  std::mt19937_64& rng() { return rng_; }
  void seed(std::uint64_t s) { rng_.seed(s); }

 private:
  struct Watcher {
    PollId id;
    Addr addr;
    std::uint64_t len;
    PollPredicate pred;
    SimTime start;
    SimTime interval;
    int cores;
    PollCallback done;
    EventId timeout_event;
  };
  struct Die {
    SparseMemory mem;
    std::map<int, RingBuffer> rings;
    std::vector<Watcher> watchers;
    std::int64_t core_busy_ns = 0;
  };

  void check_node(NodeId n) const;
  void notify(NodeId node, Addr addr, std::uint64_t len);
  void finish_poll(NodeId node, PollId id, bool satisfied);

  Engine& engine_;
  Topology topo_;
  LatencyModel model_;
  std::optional<LatencyModel> scale_out_;
  FabricOptions opts_;
  MemoryLayout layout_;
  std::vector<std::unique_ptr<Die>> dies_;
  std::unordered_map<int, int> domain_;
  std::set<std::pair<int, int>> down_links_;
  std::unordered_map<PollId, int> poll_owner_;
  PollId next_poll_ = 0;
  Trace trace_;
  std::vector<FaultRecord> faults_;
  std::function<void(const FaultRecord&)> sink_;
  std::mt19937_64 rng_{0};
};

}  // namespace podsim::fabric
