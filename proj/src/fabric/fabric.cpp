// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/fabric/fabric.hpp"

#include <algorithm>
#include <stdexcept>

#include "podsim/core/error.hpp"

namespace podsim::fabric {

Fabric::Fabric(Engine& engine, Topology topo, LatencyModel model, FabricOptions opts)
    : engine_(engine),
      topo_(topo),
      model_(model),
      opts_(opts),
      layout_(topo, opts),
      dies_(static_cast<std::size_t>(topo.total_dies())) {
  model_.validate();
  if (model_.cores_max > topo_.cores_per_die) model_.cores_max = topo_.cores_per_die;
}

void Fabric::set_scale_out_model(LatencyModel m) {
  m.validate();
  scale_out_ = m;
}

void Fabric::set_node_domain(NodeId node, int domain) {
  check_node(node);
  domain_[node.die] = domain;
}

const LatencyModel& Fabric::model(NodeId a, NodeId b) const {
  if (!scale_out_) return model_;
  auto dom = [&](NodeId n) {
    auto it = domain_.find(n.die);
    return it == domain_.end() ? 0 : it->second;
  };
  return dom(a) == dom(b) ? model_ : *scale_out_;
}

void Fabric::check_node(NodeId n) const {
  if (!topo_.contains(n)) {
    throw UsageError("node " + std::to_string(n.die) + " outside topology");
  }
}

SparseMemory& Fabric::memory(NodeId node) {
  check_node(node);
  auto& d = dies_[static_cast<std::size_t>(node.die)];
  if (!d) d = std::make_unique<Die>();
  return d->mem;
}

const SparseMemory& Fabric::memory(NodeId node) const {
  check_node(node);
  static const SparseMemory kEmpty;
  const auto& d = dies_[static_cast<std::size_t>(node.die)];
  return d ? d->mem : kEmpty;
}

RingBuffer& Fabric::ring(NodeId owner, NodeId peer) {
  memory(owner);
  check_node(peer);
  auto& rings = dies_[static_cast<std::size_t>(owner.die)]->rings;
  auto it = rings.find(peer.die);
  if (it == rings.end()) {
    it = rings
             .emplace(peer.die, RingBuffer(layout_.ring_base(peer), opts_.ring_slots,
                                           opts_.ring_slot_bytes))
             .first;
  }
  return it->second;
}

std::uint64_t Fabric::ring_violations() const {
  std::uint64_t total = 0;
  for (const auto& d : dies_) {
    if (!d) continue;
    for (const auto& [peer, r] : d->rings) total += r.violations();
  }
  return total;
}

void Fabric::report_fault(FaultRecord f) {
  trace_.record(f.time, f.node, "fault", f.peer, 0, f.kind + ":" + f.detail);
  faults_.push_back(f);
  if (sink_) sink_(faults_.back());
}

void Fabric::set_link(NodeId a, NodeId b, bool up) {
  auto key = std::minmax(a.die, b.die);
  if (up) {
    down_links_.erase(key);
  } else {
    down_links_.insert(key);
  }
}

bool Fabric::link_up(NodeId a, NodeId b) const {
  if (a == b) return true;
  return !down_links_.contains(std::minmax(a.die, b.die));
}

void Fabric::charge_cores(NodeId node, int cores, SimTime from, SimTime to) {
  memory(node);
  if (to <= from || cores <= 0) return;
  dies_[static_cast<std::size_t>(node.die)]->core_busy_ns += (to - from).count() * cores;
}

double Fabric::core_busy_us(NodeId node) const {
  check_node(node);
  const auto& d = dies_[static_cast<std::size_t>(node.die)];
  return d ? static_cast<double>(d->core_busy_ns) / 1e3 : 0.0;
}

void Fabric::deliver_at(SimTime when, NodeId src, NodeId dst, Addr addr, SparseBlob blob,
                        std::function<void()> on_landed) {
  check_node(src);
  check_node(dst);
  if (!layout_.region_of(addr, blob.length)) {
    report_fault({engine_.now(), dst.die, src.die, "out_of_bounds",
                  "write of " + std::to_string(blob.length) + " bytes at " + std::to_string(addr)});
    return;
  }
  engine_.schedule_at(when, [this, src, dst, addr, blob = std::move(blob),
                             on_landed = std::move(on_landed)]() {
    if (!link_up(src, dst)) {
      report_fault({engine_.now(), dst.die, src.die, "link_drop",
                    std::to_string(blob.length) + " bytes"});
      return;
    }
    memory(dst).apply(addr, blob);
    if (on_landed) on_landed();
    notify(dst, addr, blob.length);
  });
}

void Fabric::write_metadata_at(SimTime when, NodeId src, NodeId dst, std::uint64_t field,
                               const MetadataField& value, std::function<void()> on_landed) {
  const auto bytes = value.encode();
  deliver_at(when, src, dst, layout_.field_addr(field),
             SparseBlob::from_bytes({bytes.begin(), bytes.end()}), std::move(on_landed));
}

MetadataField Fabric::read_metadata(NodeId node, std::uint64_t field) const {
  return MetadataField::decode(memory(node).read(layout_.field_addr(field), MetadataField::kBytes));
}

Completion Fabric::mem_write(NodeId src, NodeId dst, Addr dst_addr,
                             std::span<const std::byte> payload, int cores) {
  check_node(src);
  check_node(dst);
  if (cores < 1 || cores > topo_.cores_per_die) {
    throw ConfigError("cores must lie in [1, " + std::to_string(topo_.cores_per_die) + "]");
  }
  const SimTime t0 = engine_.now();
  Completion c{t0, t0, chunk_count(payload.size(), opts_.staging_bytes), TransferStatus::ok};
  if (!layout_.region_of(dst_addr, payload.size())) {
    report_fault({t0, dst.die, src.die, "out_of_bounds",
                  "mem_write of " + std::to_string(payload.size()) + " bytes at " +
                      std::to_string(dst_addr)});
    c.status = TransferStatus::fault;
    return c;
  }
  const LatencyModel& m = model(src, dst);
  const SimTime start = t0 + m.perturb(m.mem_startup(), rng_);
  c.done = start;
  std::uint64_t off = 0;
  for (std::uint64_t i = 0; i < c.chunks; ++i) {
    const std::uint64_t n = std::min<std::uint64_t>(opts_.staging_bytes, payload.size() - off);
    const SimTime land = start + m.mem_stream_time(off + n, cores);
    auto piece = payload.subspan(off, n);
    deliver_at(land, src, dst, dst_addr + off,
               SparseBlob::from_bytes({piece.begin(), piece.end()}));
    c.done = land;
    off += n;
  }
  charge_cores(src, cores, t0, c.done);
  trace_.record(t0, src.die, "mem_write", dst.die, payload.size(),
                "chunks=" + std::to_string(c.chunks) + " cores=" + std::to_string(cores));
  return c;
}

Completion Fabric::dma_copy(NodeId src, Addr src_addr, NodeId dst, Addr dst_addr,
                            std::uint64_t len) {
  check_node(src);
  check_node(dst);
  if (len > opts_.dma_max_bytes) {
    throw ConfigError("dma_copy of " + std::to_string(len) + " bytes exceeds the DMA limit");
  }
  if (src == dst && src_addr < dst_addr + len && dst_addr < src_addr + len && len > 0) {
    throw std::invalid_argument("dma_copy source and destination overlap on the same die");
  }
  const SimTime t0 = engine_.now();
  Completion c{t0, t0, 1, TransferStatus::ok};
  if (!layout_.region_of(src_addr, len) || !layout_.region_of(dst_addr, len)) {
    report_fault({t0, dst.die, src.die, "out_of_bounds",
                  "dma_copy of " + std::to_string(len) + " bytes"});
    c.status = TransferStatus::fault;
    return c;
  }
  const LatencyModel& m = model(src, dst);
  c.done = t0 + m.perturb(m.dma_latency(len), rng_);
  deliver_at(c.done, src, dst, dst_addr, memory(src).extract(src_addr, len));
  trace_.record(t0, src.die, "dma_copy", dst.die, len, "");
  return c;
}

PollId Fabric::poll(NodeId node, Addr addr, std::uint64_t len, PollPredicate pred,
                    SimTime timeout, int cores, PollCallback done,
                    std::optional<SimTime> interval) {
  memory(node);
  const PollId id = ++next_poll_;
  const SimTime now = engine_.now();
  const SimTime step = interval.value_or(model_.poll_interval());
  if (pred(memory(node).read(addr, len))) {
    charge_cores(node, cores, now, now);
    engine_.schedule_at(now, [done = std::move(done), now]() { done({true, now}); });
    return id;
  }
  Watcher w{id, addr, len, std::move(pred), now, step, cores, std::move(done), 0};
  w.timeout_event = engine_.schedule_at(now + timeout, [this, node, id]() {
    finish_poll(node, id, false);
  });
  dies_[static_cast<std::size_t>(node.die)]->watchers.push_back(std::move(w));
  poll_owner_[id] = node.die;
  return id;
}

void Fabric::cancel_poll(PollId id) {
  auto it = poll_owner_.find(id);
  if (it == poll_owner_.end()) return;
  auto& ws = dies_[static_cast<std::size_t>(it->second)]->watchers;
  auto w = std::find_if(ws.begin(), ws.end(), [&](const Watcher& x) { return x.id == id; });
  if (w != ws.end()) {
    engine_.cancel(w->timeout_event);
    charge_cores(NodeId{it->second}, w->cores, w->start, engine_.now());
    ws.erase(w);
  }
  poll_owner_.erase(it);
}

void Fabric::finish_poll(NodeId node, PollId id, bool satisfied) {
  auto& ws = dies_[static_cast<std::size_t>(node.die)]->watchers;
  auto it = std::find_if(ws.begin(), ws.end(), [&](const Watcher& x) { return x.id == id; });
  if (it == ws.end()) return;
  Watcher w = std::move(*it);
  ws.erase(it);
  poll_owner_.erase(id);
  const SimTime now = engine_.now();
  charge_cores(node, w.cores, w.start, now);
  w.done({satisfied, now});
}

void Fabric::notify(NodeId node, Addr addr, std::uint64_t len) {
  auto& ws = dies_[static_cast<std::size_t>(node.die)]->watchers;
  if (ws.empty()) return;
  std::vector<PollId> hits;
  for (auto& w : ws) {
    const bool overlap = addr < w.addr + w.len && w.addr < addr + len;
    if (!overlap) continue;
    if (!w.pred(memory(node).read(w.addr, w.len))) continue;
    hits.push_back(w.id);
  }
  for (PollId id : hits) {
    auto it = std::find_if(ws.begin(), ws.end(), [&](const Watcher& x) { return x.id == id; });
    engine_.cancel(it->timeout_event);
    const SimTime at = next_tick(it->start, it->interval, engine_.now());
    // Keep the watcher registered until the tick so cancel_poll still works;
    // a second notification before the tick must not reschedule it.
    it->timeout_event = engine_.schedule_at(at, [this, node, id]() { finish_poll(node, id, true); });
    it->pred = [](std::span<const std::byte>) { return false; };
  }
}

}  // namespace podsim::fabric
