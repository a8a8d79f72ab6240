// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstdint>

namespace podsim::fabric {

/// A compute die, the unit every transfer is addressed to.
struct NodeId {
  int die = 0;
  auto operator<=>(const NodeId&) const = default;
};

struct Topology {
  int chips = 1;
  int dies_per_chip = 2;
  int cores_per_die = 48;
  int chips_per_server = 8;

  int total_dies() const { return chips * dies_per_chip; }
  int dies_per_server() const { return chips_per_server * dies_per_chip; }
  int server_of(NodeId n) const { return n.die / dies_per_server(); }
  int chip_of(NodeId n) const { return n.die / dies_per_chip; }
  bool contains(NodeId n) const { return n.die >= 0 && n.die < total_dies(); }

  /// One 32-byte metadata field per (die, core) pair and direction.
  std::uint64_t metadata_field_count() const {
    return static_cast<std::uint64_t>(chips) * dies_per_chip * cores_per_die * 2;
  }
  std::uint64_t metadata_bytes() const { return metadata_field_count() * 32; }
  /// Metadata area as reserved on each die: the field table rounded up to the
  /// next power of two. The slack hosts the collective fields.
  std::uint64_t metadata_reserved_bytes() const;
};

/// Throws ConfigError if any count is < 1.
Topology build_topology(int chips, int dies_per_chip, int cores_per_die,
                        int chips_per_server = 8);

}  // namespace podsim::fabric
