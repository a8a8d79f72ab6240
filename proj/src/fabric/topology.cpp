// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/fabric/topology.hpp"

#include <bit>
#include <string>

#include "podsim/core/error.hpp"

namespace podsim::fabric {

std::uint64_t Topology::metadata_reserved_bytes() const {
  return std::bit_ceil(metadata_bytes());
}

Topology build_topology(int chips, int dies_per_chip, int cores_per_die,
                        int chips_per_server) {
  auto check = [](int v, const char* name) {
    if (v < 1) {
      throw ConfigError(std::string("topology.") + name + " must be >= 1, got " +
                        std::to_string(v));
    }
  };
  check(chips, "chips");
  check(dies_per_chip, "dies_per_chip");
  check(cores_per_die, "cores_per_die");
  check(chips_per_server, "chips_per_server");
  return Topology{chips, dies_per_chip, cores_per_die, chips_per_server};
}

}  // namespace podsim::fabric
