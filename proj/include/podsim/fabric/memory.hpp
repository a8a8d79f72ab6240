// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "podsim/fabric/topology.hpp"

namespace podsim::fabric {

using Addr = std::uint64_t;

/// A byte range captured from sparse memory: only allocated pages carry data,
/// everything else reads back as zero.
struct SparseBlob {
  std::uint64_t length = 0;
  std::vector<std::pair<std::uint64_t, std::vector<std::byte>>> segments;

  static SparseBlob from_bytes(std::vector<std::byte> bytes);
  std::vector<std::byte> to_bytes() const;
};

/// Lazily allocated byte-addressable memory. Pages are materialized on first
/// non-zero write, so multi-GB address spaces cost nothing until touched.
class SparseMemory {
 public:
  static constexpr std::uint64_t kPageBytes = 64 * 1024;

  void write(Addr addr, std::span<const std::byte> data);
  void read(Addr addr, std::span<std::byte> out) const;
  std::vector<std::byte> read(Addr addr, std::uint64_t len) const;
  void zero(Addr addr, std::uint64_t len);

  SparseBlob extract(Addr addr, std::uint64_t len) const;
  void apply(Addr addr, const SparseBlob& blob);

  std::size_t allocated_pages() const { return pages_.size(); }

 private:
  using Page = std::vector<std::byte>;
  Page& page_for_write(std::uint64_t index);
  const Page* page(std::uint64_t index) const;

  std::unordered_map<std::uint64_t, std::unique_ptr<Page>> pages_;
};

/// 32-byte control record living in a die's metadata area. For the
/// point-to-point protocol the reserved word carries the total payload length
/// on data fields and the completion flag on acknowledgment fields.
struct MetadataField {
  std::uint64_t event_id = 0;
  std::uint64_t chunk_id = 0;
  std::uint64_t tail_ptr = 0;
  std::uint64_t reserved = 0;

  static constexpr std::size_t kBytes = 32;
  std::array<std::byte, kBytes> encode() const;
  static MetadataField decode(std::span<const std::byte> bytes);
  bool operator==(const MetadataField&) const = default;
};
static_assert(sizeof(MetadataField) == MetadataField::kBytes);

/// Slot-granular ring buffer bookkeeping for one ordered peer pair. Byte
/// storage lives in the owning die's managed area; this tracks which slots
/// hold unconsumed data so that premature reuse is detected.
class RingBuffer {
 public:
  RingBuffer(Addr base, std::uint64_t slots, std::uint64_t slot_bytes);

  Addr base() const { return base_; }
  std::uint64_t capacity_bytes() const { return slots_ * slot_bytes_; }
  std::uint64_t slot_bytes() const { return slot_bytes_; }
  std::uint64_t slots() const { return slots_; }
  Addr slot_addr(std::uint64_t seq) const { return base_ + (seq % slots_) * slot_bytes_; }

  std::uint64_t head() const { return (consumed_ % slots_) * slot_bytes_; }
  std::uint64_t tail() const { return (produced_ % slots_) * slot_bytes_; }
  std::uint64_t occupied_bytes() const { return (produced_ - consumed_) * slot_bytes_; }

  /// Producer filled slot `seq`. Returns false (and counts a violation) when
  /// the slot still holds data the consumer has not acknowledged.
  bool on_fill(std::uint64_t seq);
  /// Consumer drained slot `seq`; slots must be drained in order.
  void on_drain(std::uint64_t seq);

  std::uint64_t violations() const { return violations_; }
  /// Drops every unconsumed slot, e.g. after an aborted transfer.
  void reset();

 private:
  Addr base_;
  std::uint64_t slots_;
  std::uint64_t slot_bytes_;
  std::uint64_t produced_ = 0;
  std::uint64_t consumed_ = 0;
  std::vector<bool> occupied_;
  std::uint64_t violations_ = 0;
};

enum class Region { app, metadata, managed };

struct FabricOptions {
  std::uint64_t staging_bytes = 192 * 1024;  // per-core data buffer
  std::uint64_t ring_slots = 64;
  std::uint64_t ring_slot_bytes = 32 * 1024;
  std::uint64_t app_bytes = 1ULL << 30;
  std::uint64_t collective_bytes = 256ULL << 20;
  std::uint64_t dma_max_bytes = 8ULL << 30;
};

/// Address map shared by every die: [app | metadata | managed], where the
/// managed area holds one inbound ring per peer followed by the collective
/// exchange region.
class MemoryLayout {
 public:
  MemoryLayout(const Topology& topo, const FabricOptions& opts);

  Addr app_base() const { return 0; }
  std::uint64_t app_bytes() const { return app_bytes_; }
  Addr metadata_base() const { return meta_base_; }
  std::uint64_t metadata_bytes() const { return meta_bytes_; }
  Addr managed_base() const { return managed_base_; }
  std::uint64_t managed_bytes() const { return managed_bytes_; }
  std::uint64_t total_bytes() const { return managed_base_ + managed_bytes_; }

  std::uint64_t field_count() const { return field_count_; }
  std::uint64_t p2p_field_index(NodeId peer, int core, int direction) const;
  std::uint64_t collective_field_index(int rank) const;
  Addr field_addr(std::uint64_t index) const;

  Addr ring_base(NodeId peer) const;
  std::uint64_t ring_capacity() const { return ring_capacity_; }
  Addr collective_base() const { return collective_base_; }
  std::uint64_t collective_bytes() const { return collective_bytes_; }

  /// Region that fully contains [addr, addr+len), if any.
  std::optional<Region> region_of(Addr addr, std::uint64_t len) const;

 private:
  int cores_per_die_;
  int total_dies_;
  std::uint64_t app_bytes_;
  Addr meta_base_;
  std::uint64_t meta_bytes_;
  std::uint64_t field_count_;
  Addr managed_base_;
  std::uint64_t managed_bytes_;
  std::uint64_t ring_capacity_;
  Addr collective_base_;
  std::uint64_t collective_bytes_;
};

}  // namespace podsim::fabric
