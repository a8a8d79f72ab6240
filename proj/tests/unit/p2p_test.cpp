// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "p2p_fuzz.hpp"
#include "podsim/core/error.hpp"
#include "podsim/fabric/calibration.hpp"
#include "podsim/xccl/p2p.hpp"

namespace podsim::xccl {
namespace {

using fabric::NodeId;

std::vector<std::byte> ramp(std::size_t n) {
  std::vector<std::byte> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::byte>(i % 256);
  return v;
}

struct P2pFixture : ::testing::Test {
  Engine engine;
  fabric::Fabric fab{engine, fabric::build_topology(4, 2, 48), fabric::LatencyModel{}};
  P2p p2p{fab};
  const Addr dst_addr = 64ULL << 20;

  std::pair<Handle, Handle> roundtrip(NodeId a, NodeId b, std::uint64_t len, int cores,
                                      std::uint64_t event = 1) {
    fab.memory(a).write(0, ramp(len));
    auto& ch = p2p.channel(a, b);
    TransferRequest req{event, len, cores};
    auto s = p2p.send(ch, req, 0);
    auto r = p2p.receive(ch, req, dst_addr);
    return {s, r};
  }
};

TEST_F(P2pFixture, EchoIdentity64K) {
  auto [s, r] = roundtrip(NodeId{0}, NodeId{5}, 64 * 1024, 4);
  engine.run();
  EXPECT_EQ(p2p.info(s).status, Status::complete);
  EXPECT_EQ(p2p.info(r).status, Status::complete);
  EXPECT_EQ(fab.memory(NodeId{5}).read(dst_addr, 64 * 1024), ramp(64 * 1024));
  EXPECT_EQ(fab.ring_violations(), 0u);
}

TEST_F(P2pFixture, OneMegabyteTwoCoresUnder20us) {
  auto [s, r] = roundtrip(NodeId{0}, NodeId{1}, 1 << 20, 2);
  engine.run();
  const double us = to_us(p2p.info(s).completed - p2p.info(s).started);
  EXPECT_LT(us, 20.0);
  // The closed-form predictor used for calibration tracks the simulation to
  // within the two poll-grid roundings.
  const double pred = fabric::predict_send_latency_us(fab.model(), fab.options(), 1 << 20, 2);
  EXPECT_NEAR(us, pred, 2 * fab.model().poll_interval_us);
}

TEST_F(P2pFixture, PredictorTracksSimulationAcrossSizes) {
  std::uint64_t ev = 0;
  for (std::uint64_t len : {1ULL, 4096ULL, 65536ULL, 1ULL << 20, 9ULL << 20}) {
    for (int c : {1, 2, 8, 48}) {
      Engine e;
      fabric::Fabric f(e, fabric::build_topology(1, 2, 48), fabric::LatencyModel{});
      P2p p(f);
      auto& ch = p.channel(NodeId{0}, NodeId{1});
      TransferRequest req{++ev, len, c};
      auto s = p.send(ch, req, 0);
      p.receive(ch, req, dst_addr);
      e.run();
      const double us = to_us(p.info(s).completed - p.info(s).started);
      const double pred = fabric::predict_send_latency_us(f.model(), f.options(), len, c);
      // The predictor ignores window stalls, which only ever add time.
      if (p.info(s).stall.count() == 0) {
        EXPECT_NEAR(us, pred, 2 * f.model().poll_interval_us) << len << " bytes, " << c << " cores";
      } else {
        EXPECT_GT(us, pred - f.model().poll_interval_us) << len << " bytes, " << c << " cores";
      }
    }
  }
}

TEST_F(P2pFixture, NineMegabyteCoreScaling) {
  auto t = [&](int cores) {
    Engine e;
    fabric::Fabric f(e, fabric::build_topology(1, 2, 48), fabric::LatencyModel{});
    P2p p(f);
    auto& ch = p.channel(NodeId{0}, NodeId{1});
    TransferRequest req{7, 9ULL << 20, cores};
    auto s = p.send(ch, req, 0);
    p.receive(ch, req, dst_addr);
    e.run();
    return to_us(p.info(s).completed - p.info(s).started);
  };
  EXPECT_GE(t(2) / t(48), 2.5);
}

TEST_F(P2pFixture, ReceivePostedFirst) {
  fab.memory(NodeId{0}).write(0, ramp(5000));
  auto& ch = p2p.channel(NodeId{0}, NodeId{1});
  TransferRequest req{3, 5000, 2};
  auto r = p2p.receive(ch, req, dst_addr);
  engine.run_until(from_us(50));
  EXPECT_EQ(p2p.info(r).status, Status::pending);
  auto s = p2p.send(ch, req, 0);
  engine.run();
  EXPECT_EQ(p2p.info(r).status, Status::complete);
  EXPECT_GT(p2p.info(r).data_visible, p2p.info(s).started + fab.model().mem_startup());
  EXPECT_EQ(fab.memory(NodeId{1}).read(dst_addr, 5000), ramp(5000));
}

TEST_F(P2pFixture, EventMismatchFaultsAndStallsSender) {
  fab.memory(NodeId{0}).write(0, ramp(4096));
  auto& ch = p2p.channel(NodeId{0}, NodeId{1});
  auto s = p2p.send(ch, TransferRequest{10, 4096, 2}, 0);
  auto r = p2p.receive(ch, TransferRequest{11, 4096, 2}, dst_addr);
  engine.run();
  EXPECT_EQ(p2p.info(r).status, Status::fault);
  EXPECT_EQ(p2p.info(s).status, Status::fault);
  EXPECT_GE(p2p.info(s).completed - p2p.info(s).started, from_ms(10));
  EXPECT_EQ(fab.memory(NodeId{1}).read(dst_addr, 4096), std::vector<std::byte>(4096));
  bool protocol = false;
  for (const auto& f : fab.faults()) protocol |= f.kind == "protocol";
  EXPECT_TRUE(protocol);
}

TEST_F(P2pFixture, ChunkIdsStrictlyIncreasing) {
  const std::uint64_t len = 9ULL << 20;
  auto [s, r] = roundtrip(NodeId{2}, NodeId{3}, len, 8);
  engine.run();
  const auto n = fabric::chunk_count(len, p2p.chunk_bytes());
  EXPECT_EQ(n, 288u);
  const auto& ids = p2p.info(r).chunk_ids;
  ASSERT_EQ(ids.size(), n);
  for (std::uint64_t i = 0; i < n; ++i) EXPECT_EQ(ids[i], i + 1);
  EXPECT_EQ(fab.trace().count("recv_copy"), n);
  EXPECT_EQ(fab.trace().count("recv_ack"), n);
  EXPECT_EQ(fab.trace().count("send_publish"), n);
  EXPECT_EQ(fab.trace().count("send_stage"), n);
  EXPECT_EQ(fab.ring_violations(), 0u);
}

TEST_F(P2pFixture, AckBeforeSenderCompletion) {
  auto [s, r] = roundtrip(NodeId{0}, NodeId{1}, 300000, 3);
  engine.run();
  EXPECT_GE(p2p.info(s).completed, p2p.info(r).final_ack + fab.model().mem_startup());
}

TEST_F(P2pFixture, AsyncMatchesSyncPayloadAndVisibility) {
  auto [s, r] = roundtrip(NodeId{0}, NodeId{1}, 700000, 4);
  engine.run();
  Engine e2;
  fabric::Fabric f2(e2, fabric::build_topology(4, 2, 48), fabric::LatencyModel{});
  P2p p2(f2);
  f2.memory(NodeId{0}).write(0, ramp(700000));
  auto& ch = p2.channel(NodeId{0}, NodeId{1});
  TransferRequest req{1, 700000, 4};
  auto as = p2.send_async(ch, req, 0);
  auto ar = p2.receive_async(ch, req, dst_addr);
  EXPECT_EQ(p2.poll_completion(as), Status::pending);
  EXPECT_EQ(p2.poll_completion(ar), Status::pending);
  e2.run();
  EXPECT_EQ(p2.poll_completion(as), Status::complete);
  EXPECT_EQ(p2.poll_completion(ar), Status::complete);
  EXPECT_THROW(p2.poll_completion(as), UsageError);
  EXPECT_EQ(p2.info(ar).data_visible, p2p.info(r).data_visible);
  EXPECT_EQ(f2.memory(NodeId{1}).read(dst_addr, 700000),
            fab.memory(NodeId{1}).read(dst_addr, 700000));
  EXPECT_LT(f2.core_busy_us(NodeId{0}), fab.core_busy_us(NodeId{0}));
}

TEST_F(P2pFixture, AsyncOverlapsTransfersToTwoPeers) {
  auto total = [&](Mode mode) {
    Engine e;
    fabric::Fabric f(e, fabric::build_topology(4, 2, 48), fabric::LatencyModel{});
    P2p p(f);
    f.memory(NodeId{0}).write(0, ramp(1 << 20));
    std::vector<Handle> sends;
    for (int peer : {1, 2}) {
      auto& ch = p.channel(NodeId{0}, NodeId{peer});
      TransferRequest req{static_cast<std::uint64_t>(peer), 1 << 20, 2, mode};
      sends.push_back(mode == Mode::sync ? p.send(ch, req, 0) : p.send_async(ch, req, 0));
      mode == Mode::sync ? p.receive(ch, req, dst_addr) : p.receive_async(ch, req, dst_addr);
    }
    e.run();
    return p.info(sends[1]).completed;
  };
  const SimTime serial = total(Mode::sync);
  const SimTime overlapped = total(Mode::async);
  EXPECT_LT(overlapped, serial);
  EXPECT_LT(to_us(overlapped), 0.6 * to_us(serial));
}

TEST_F(P2pFixture, MixingModesOnChannelIsRejected) {
  auto& ch = p2p.channel(NodeId{0}, NodeId{1});
  p2p.send(ch, TransferRequest{1, 16, 1}, 0);
  EXPECT_THROW(p2p.send_async(ch, TransferRequest{2, 16, 1}, 0), UsageError);
}

TEST_F(P2pFixture, ZeroCopyHasSameBytesAndIsFaster) {
  fab.memory(NodeId{0}).write(0, ramp(1 << 20));
  auto& ch = p2p.channel(NodeId{0}, NodeId{1});
  TransferRequest req{1, 1 << 20, 2};
  req.zero_copy = true;
  auto s = p2p.send(ch, req, 0);
  auto r = p2p.receive(ch, req, dst_addr);
  engine.run();
  ASSERT_EQ(p2p.info(r).status, Status::complete);
  EXPECT_EQ(fab.memory(NodeId{1}).read(dst_addr, 1 << 20), ramp(1 << 20));
  const double zc = to_us(p2p.info(s).completed - p2p.info(s).started);
  EXPECT_LT(zc, fabric::predict_send_latency_us(fab.model(), fab.options(), 1 << 20, 2));
  EXPECT_EQ(fab.trace().count("recv_copy"), 0u);
}

TEST_F(P2pFixture, DmaSemanticsDelivers) {
  fab.memory(NodeId{0}).write(0, ramp(2 << 20));
  auto& ch = p2p.channel(NodeId{0}, NodeId{1});
  TransferRequest req{1, 2 << 20, 1};
  req.semantics = Semantics::dma;
  auto s = p2p.send(ch, req, 0);
  p2p.receive(ch, req, dst_addr);
  engine.run();
  EXPECT_EQ(p2p.info(s).status, Status::complete);
  EXPECT_EQ(fab.memory(NodeId{1}).read(dst_addr, 2 << 20), ramp(2 << 20));
}

TEST_F(P2pFixture, SmallWindowStallsButStaysSafe) {
  Engine e;
  fabric::FabricOptions o;
  o.ring_slots = 4;
  fabric::Fabric f(e, fabric::build_topology(1, 2, 48), fabric::LatencyModel{}, o);
  P2p p(f);
  f.memory(NodeId{0}).write(0, ramp(1 << 20));
  auto& ch = p.channel(NodeId{0}, NodeId{1});
  TransferRequest req{1, 1 << 20, 48};
  auto s = p.send(ch, req, 0);
  p.receive(ch, req, dst_addr);
  e.run();
  EXPECT_EQ(f.memory(NodeId{1}).read(dst_addr, 1 << 20), ramp(1 << 20));
  EXPECT_GT(p.info(s).stall.count(), 0);
  EXPECT_EQ(f.ring_violations(), 0u);
}

TEST_F(P2pFixture, ReceiveTimesOutWithoutSender) {
  auto& ch = p2p.channel(NodeId{0}, NodeId{1});
  auto r = p2p.receive(ch, TransferRequest{1, 16, 1}, dst_addr);
  engine.run();
  EXPECT_EQ(p2p.info(r).status, Status::fault);
  EXPECT_EQ(p2p.info(r).completed, from_ms(10));
}

TEST(P2pFuzz, SmallCampaignIsExact) {
  const auto rep = podsim::testing::run_p2p_fuzz(42, 200);
  EXPECT_EQ(rep.transfers, 200u);
  EXPECT_EQ(rep.exact, 200u);
  EXPECT_EQ(rep.incomplete, 0u);
  EXPECT_EQ(rep.fifo_violations, 0u);
  EXPECT_EQ(rep.ack_order_violations, 0u);
  EXPECT_EQ(rep.ring_violations, 0u);
}

}  // namespace
}  // namespace podsim::xccl
