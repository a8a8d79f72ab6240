// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <random>
#include <vector>

#include "podsim/core/engine.hpp"
#include "podsim/xccl/p2p.hpp"

namespace podsim::testing {

struct P2pFuzzReport {
  std::uint64_t transfers = 0;
  std::uint64_t exact = 0;
  std::uint64_t fifo_violations = 0;
  std::uint64_t ack_order_violations = 0;
  std::uint64_t ring_violations = 0;
  std::uint64_t incomplete = 0;
  std::uint64_t bytes = 0;
};

// FNV-1a over 8-byte words, tail bytes one at a time.
inline std::uint64_t fnv1a(const std::vector<std::byte>& v) {
  std::uint64_t h = 1469598103934665603ULL;
  const std::size_t words = v.size() / 8;
  for (std::size_t i = 0; i < words; ++i) {
    std::uint64_t w;
    std::memcpy(&w, v.data() + 8 * i, 8);
    h ^= w;
    h *= 1099511628211ULL;
  }
  for (std::size_t i = words * 8; i < v.size(); ++i) {
    h ^= static_cast<std::uint64_t>(v[i]);
    h *= 1099511628211ULL;
  }
  return h ^ v.size();
}

inline void fill_random(std::vector<std::byte>& v, std::mt19937_64& rng) {
  std::size_t i = 0;
  for (; i + 8 <= v.size(); i += 8) {
    const std::uint64_t w = rng();
    std::memcpy(v.data() + i, &w, 8);
  }
  for (; i < v.size(); ++i) v[i] = static_cast<std::byte>(rng() & 0xff);
}

/// Random transfers between 8 dies in rounds of `round` transfers. Payloads
/// are drawn log-uniform in [1 B, 9 MB]; cores uniform in [1, 48]. Each
/// received buffer is compared to the sent one by digest and length.
inline P2pFuzzReport run_p2p_fuzz(std::uint64_t seed, std::uint64_t count, int round = 16) {
  using namespace podsim::xccl;
  using fabric::NodeId;
  P2pFuzzReport rep;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> logsize(0.0, std::log(9.0e6));
  std::uniform_int_distribution<int> die(0, 7), cores(1, 48), mode(0, 1);

  Engine engine;
  fabric::Fabric fab(engine, fabric::build_topology(4, 2, 48), fabric::LatencyModel{});
  fab.trace().set_enabled(false);
  P2p p2p(fab);
  // Each ordered pair keeps one mode for its lifetime.
  std::map<std::pair<int, int>, Mode> modes;

  std::uint64_t event = 0;
  while (rep.transfers < count) {
    struct Posted {
      Handle s, r;
      std::uint64_t digest, len;
      int src, dst;
      NodeId rnode;
      Addr raddr;
    };
    std::vector<Posted> posted;
    std::map<int, Addr> next_src, next_dst;
    const std::uint64_t n = std::min<std::uint64_t>(round, count - rep.transfers);
    for (std::uint64_t i = 0; i < n; ++i) {
      int a = die(rng), b = die(rng);
      while (b == a) b = die(rng);
      const auto len = static_cast<std::uint64_t>(std::exp(logsize(rng)));
      std::vector<std::byte> payload(len);
      fill_random(payload, rng);
      const Addr sa = next_src[a];
      const Addr da = next_dst[b] + (256ULL << 20);
      next_src[a] += len + 64;
      next_dst[b] += len + 64;
      fab.memory(NodeId{a}).write(sa, payload);
      auto& chan = p2p.channel(NodeId{a}, NodeId{b});
      auto [it, fresh] = modes.emplace(std::make_pair(a, b), mode(rng) ? Mode::sync : Mode::async);
      TransferRequest req{++event, len, cores(rng), it->second};
      Handle s = it->second == Mode::sync ? p2p.send(chan, req, sa) : p2p.send_async(chan, req, sa);
      Handle r = it->second == Mode::sync ? p2p.receive(chan, req, da)
                                          : p2p.receive_async(chan, req, da);
      posted.push_back({s, r, fnv1a(payload), len, a, b, NodeId{b}, da});
      rep.bytes += len;
    }
    engine.run();
    std::map<std::pair<int, int>, SimTime> last_done;
    for (const auto& p : posted) {
      ++rep.transfers;
      const auto& si = p2p.info(p.s);
      const auto& ri = p2p.info(p.r);
      if (si.status != Status::complete || ri.status != Status::complete) {
        ++rep.incomplete;
        continue;
      }
      if (fnv1a(fab.memory(p.rnode).read(p.raddr, p.len)) == p.digest) ++rep.exact;
      if (si.completed < ri.final_ack) ++rep.ack_order_violations;
      auto key = std::make_pair(p.src, p.dst);
      auto it = last_done.find(key);
      if (it != last_done.end() && ri.completed < it->second) ++rep.fifo_violations;
      last_done[key] = ri.completed;
    }
    // Fresh buffers for the next round.
    for (int d = 0; d < 8; ++d) {
      fab.memory(NodeId{d}).zero(0, 512ULL << 20);
    }
  }
  rep.ring_violations = fab.ring_violations();
  return rep;
}

}  // namespace podsim::testing
