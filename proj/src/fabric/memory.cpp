// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/fabric/memory.hpp"

#include <algorithm>
#include <cstring>

#include "podsim/core/error.hpp"

namespace podsim::fabric {

namespace {

constexpr std::uint64_t kPage = SparseMemory::kPageBytes;

void put_u64(std::byte* dst, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) dst[i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
}

std::uint64_t get_u64(const std::byte* src) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(src[i]) << (8 * i);
  return v;
}

bool all_zero(std::span<const std::byte> s) {
  return std::all_of(s.begin(), s.end(), [](std::byte b) { return b == std::byte{0}; });
}

}  // namespace

SparseBlob SparseBlob::from_bytes(std::vector<std::byte> bytes) {
  SparseBlob blob;
  blob.length = bytes.size();
  if (!bytes.empty()) blob.segments.emplace_back(0, std::move(bytes));
  return blob;
}

std::vector<std::byte> SparseBlob::to_bytes() const {
  std::vector<std::byte> out(length, std::byte{0});
  for (const auto& [off, data] : segments) {
    std::copy(data.begin(), data.end(), out.begin() + static_cast<std::ptrdiff_t>(off));
  }
  return out;
}

SparseMemory::Page& SparseMemory::page_for_write(std::uint64_t index) {
  auto& slot = pages_[index];
  if (!slot) slot = std::make_unique<Page>(kPage, std::byte{0});
  return *slot;
}

const SparseMemory::Page* SparseMemory::page(std::uint64_t index) const {
  auto it = pages_.find(index);
  return it == pages_.end() ? nullptr : it->second.get();
}

void SparseMemory::write(Addr addr, std::span<const std::byte> data) {
  std::uint64_t done = 0;
  while (done < data.size()) {
    const Addr a = addr + done;
    const std::uint64_t index = a / kPage;
    const std::uint64_t off = a % kPage;
    const std::uint64_t n = std::min<std::uint64_t>(kPage - off, data.size() - done);
    auto piece = data.subspan(done, n);
    if (page(index) != nullptr || !all_zero(piece)) {
      auto& p = page_for_write(index);
      std::memcpy(p.data() + off, piece.data(), n);
    }
    done += n;
  }
}

void SparseMemory::read(Addr addr, std::span<std::byte> out) const {
  std::uint64_t done = 0;
  while (done < out.size()) {
    const Addr a = addr + done;
    const std::uint64_t index = a / kPage;
    const std::uint64_t off = a % kPage;
    const std::uint64_t n = std::min<std::uint64_t>(kPage - off, out.size() - done);
    if (const Page* p = page(index)) {
      std::memcpy(out.data() + done, p->data() + off, n);
    } else {
      std::memset(out.data() + done, 0, n);
    }
    done += n;
  }
}

std::vector<std::byte> SparseMemory::read(Addr addr, std::uint64_t len) const {
  std::vector<std::byte> out(len);
  read(addr, out);
  return out;
}

void SparseMemory::zero(Addr addr, std::uint64_t len) {
  std::uint64_t done = 0;
  while (done < len) {
    const Addr a = addr + done;
    const std::uint64_t index = a / kPage;
    const std::uint64_t off = a % kPage;
    const std::uint64_t n = std::min<std::uint64_t>(kPage - off, len - done);
    auto it = pages_.find(index);
    if (it != pages_.end()) {
      if (n == kPage) {
        pages_.erase(it);
      } else {
        std::memset(it->second->data() + off, 0, n);
      }
    }
    done += n;
  }
}

SparseBlob SparseMemory::extract(Addr addr, std::uint64_t len) const {
  SparseBlob blob;
  blob.length = len;
  std::uint64_t done = 0;
  while (done < len) {
    const Addr a = addr + done;
    const std::uint64_t index = a / kPage;
    const std::uint64_t off = a % kPage;
    const std::uint64_t n = std::min<std::uint64_t>(kPage - off, len - done);
    if (const Page* p = page(index)) {
      const auto* begin = p->data() + off;
      if (!blob.segments.empty() &&
          blob.segments.back().first + blob.segments.back().second.size() == done) {
        blob.segments.back().second.insert(blob.segments.back().second.end(), begin, begin + n);
      } else {
        blob.segments.emplace_back(done, std::vector<std::byte>(begin, begin + n));
      }
    }
    done += n;
  }
  return blob;
}

void SparseMemory::apply(Addr addr, const SparseBlob& blob) {
  zero(addr, blob.length);
  for (const auto& [off, data] : blob.segments) write(addr + off, data);
}

std::array<std::byte, MetadataField::kBytes> MetadataField::encode() const {
  std::array<std::byte, kBytes> out{};
  put_u64(out.data() + 0, event_id);
  put_u64(out.data() + 8, chunk_id);
  put_u64(out.data() + 16, tail_ptr);
  put_u64(out.data() + 24, reserved);
  return out;
}

MetadataField MetadataField::decode(std::span<const std::byte> bytes) {
  if (bytes.size() < kBytes) throw UsageError("metadata field needs 32 bytes");
  return MetadataField{get_u64(bytes.data()), get_u64(bytes.data() + 8),
                       get_u64(bytes.data() + 16), get_u64(bytes.data() + 24)};
}

RingBuffer::RingBuffer(Addr base, std::uint64_t slots, std::uint64_t slot_bytes)
    : base_(base), slots_(slots), slot_bytes_(slot_bytes), occupied_(slots, false) {
  if (slots == 0 || slot_bytes == 0) throw ConfigError("ring buffer needs slots and slot size");
}

bool RingBuffer::on_fill(std::uint64_t seq) {
  const auto idx = seq % slots_;
  if (occupied_[idx]) {
    ++violations_;
    return false;
  }
  occupied_[idx] = true;
  produced_ = std::max(produced_, seq + 1);
  return true;
}

void RingBuffer::on_drain(std::uint64_t seq) {
  if (seq != consumed_) throw UsageError("ring slots must be drained in order");
  occupied_[seq % slots_] = false;
  ++consumed_;
}

void RingBuffer::reset() {
  std::fill(occupied_.begin(), occupied_.end(), false);
  consumed_ = produced_;
}

MemoryLayout::MemoryLayout(const Topology& topo, const FabricOptions& opts)
    : cores_per_die_(topo.cores_per_die),
      total_dies_(topo.total_dies()),
      app_bytes_(opts.app_bytes),
      meta_base_(opts.app_bytes),
      meta_bytes_(topo.metadata_reserved_bytes()),
      field_count_(topo.metadata_field_count()),
      managed_base_(opts.app_bytes + topo.metadata_reserved_bytes()),
      ring_capacity_(opts.ring_slots * opts.ring_slot_bytes),
      collective_bytes_(opts.collective_bytes) {
  if (opts.ring_slots == 0 || opts.ring_slot_bytes == 0) {
    throw ConfigError("ring slots and slot size must be > 0");
  }
  if (opts.staging_bytes == 0) throw ConfigError("staging buffer size must be > 0");
  collective_base_ = managed_base_ + ring_capacity_ * static_cast<std::uint64_t>(total_dies_);
  managed_bytes_ = ring_capacity_ * static_cast<std::uint64_t>(total_dies_) + collective_bytes_;
}

std::uint64_t MemoryLayout::p2p_field_index(NodeId peer, int core, int direction) const {
  if (peer.die < 0 || peer.die >= total_dies_ || core < 0 || core >= cores_per_die_ ||
      direction < 0 || direction > 1) {
    throw UsageError("metadata field index out of range");
  }
  return ((static_cast<std::uint64_t>(peer.die) * cores_per_die_) + core) * 2 + direction;
}

std::uint64_t MemoryLayout::collective_field_index(int rank) const {
  const std::uint64_t index = field_count_ + static_cast<std::uint64_t>(rank);
  if (rank < 0 || (index + 1) * MetadataField::kBytes > meta_bytes_) {
    throw UsageError("collective metadata field out of range");
  }
  return index;
}

Addr MemoryLayout::field_addr(std::uint64_t index) const {
  return meta_base_ + index * MetadataField::kBytes;
}

Addr MemoryLayout::ring_base(NodeId peer) const {
  return managed_base_ + static_cast<std::uint64_t>(peer.die) * ring_capacity_;
}

std::optional<Region> MemoryLayout::region_of(Addr addr, std::uint64_t len) const {
  auto inside = [&](Addr base, std::uint64_t size) {
    return addr >= base && addr - base <= size && len <= size - (addr - base);
  };
  if (inside(0, app_bytes_)) return Region::app;
  if (inside(meta_base_, meta_bytes_)) return Region::metadata;
  if (inside(managed_base_, managed_bytes_)) return Region::managed;
  return std::nullopt;
}

}  // namespace podsim::fabric
