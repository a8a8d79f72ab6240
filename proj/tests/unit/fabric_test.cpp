// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <numeric>
#include <sstream>

#include "podsim/core/engine.hpp"
#include "podsim/core/error.hpp"
#include "podsim/fabric/calibration.hpp"
#include "podsim/fabric/fabric.hpp"

namespace podsim::fabric {
namespace {

std::vector<std::byte> pattern(std::size_t n, unsigned seed = 0) {
  std::vector<std::byte> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::byte>((i + seed) & 0xff);
  return v;
}

TEST(Topology, PodScaleFieldCount) {
  const auto t = build_topology(384, 2, 48);
  EXPECT_EQ(t.total_dies(), 768);
  EXPECT_EQ(t.metadata_field_count(), 73728u);
  EXPECT_EQ(t.metadata_reserved_bytes(), 4u << 20);
}

TEST(Topology, MinimalAndSmall) {
  const auto a = build_topology(1, 1, 1);
  EXPECT_EQ(a.metadata_field_count(), 2u);
  EXPECT_EQ(a.total_dies(), 1);
  const auto b = build_topology(8, 2, 4);
  EXPECT_EQ(b.metadata_field_count(), 128u);
  EXPECT_EQ(b.total_dies(), 16);
}

TEST(Topology, RejectsNonPositiveCounts) {
  EXPECT_THROW(build_topology(0, 2, 48), ConfigError);
  EXPECT_THROW(build_topology(4, -1, 48), ConfigError);
  EXPECT_THROW(build_topology(4, 2, 0), ConfigError);
}

TEST(Metadata, FieldRoundTrip) {
  const MetadataField f{0x0102030405060708ULL, 7, 4096, 1};
  const auto bytes = f.encode();
  EXPECT_EQ(bytes.size(), 32u);
  EXPECT_EQ(bytes[0], std::byte{0x08});
  EXPECT_EQ(MetadataField::decode(bytes), f);
}

TEST(Layout, AreasAreDisjoint) {
  const auto t = build_topology(4, 2, 8);
  const MemoryLayout l(t, FabricOptions{});
  EXPECT_EQ(l.metadata_base(), l.app_bytes());
  EXPECT_EQ(l.managed_base(), l.metadata_base() + l.metadata_bytes());
  EXPECT_EQ(l.region_of(0, l.app_bytes()), Region::app);
  EXPECT_FALSE(l.region_of(l.app_bytes() - 1, 2).has_value());
  EXPECT_EQ(l.region_of(l.field_addr(l.field_count() - 1), 32), Region::metadata);
  EXPECT_EQ(l.region_of(l.ring_base(NodeId{7}), l.ring_capacity()), Region::managed);
  EXPECT_FALSE(l.region_of(l.total_bytes(), 1).has_value());
  for (int p = 0; p + 1 < t.total_dies(); ++p) {
    EXPECT_EQ(l.ring_base(NodeId{p}) + l.ring_capacity(), l.ring_base(NodeId{p + 1}));
  }
}

TEST(SparseMemory, LargeWritesStayCheap) {
  SparseMemory m;
  m.write(3ULL << 30, pattern(100));
  EXPECT_EQ(m.allocated_pages(), 1u);
  auto back = m.read(3ULL << 30, 100);
  EXPECT_EQ(back, pattern(100));
  EXPECT_EQ(m.read(0, 4)[0], std::byte{0});
  m.write(0, std::vector<std::byte>(1 << 20));
  EXPECT_EQ(m.allocated_pages(), 1u);
}

TEST(SparseMemory, ExtractApplyRoundTrip) {
  SparseMemory a, b;
  const auto p = pattern(200000, 3);
  a.write(70000, p);
  b.write(10, pattern(500000, 9));
  b.apply(10, a.extract(0, 400000));
  auto got = b.read(10 + 70000, p.size());
  EXPECT_EQ(got, p);
  EXPECT_EQ(b.read(10, 4), std::vector<std::byte>(4));
  EXPECT_EQ(b.read(400010, 1)[0], pattern(500000, 9)[400000]);
}

TEST(RingBuffer, DetectsPrematureReuse) {
  RingBuffer r(0, 4, 32);
  EXPECT_EQ(r.capacity_bytes() % r.slot_bytes(), 0u);
  for (std::uint64_t s = 0; s < 4; ++s) EXPECT_TRUE(r.on_fill(s));
  EXPECT_EQ(r.occupied_bytes(), 128u);
  EXPECT_FALSE(r.on_fill(4));
  EXPECT_EQ(r.violations(), 1u);
  r.on_drain(0);
  EXPECT_TRUE(r.on_fill(4));
  EXPECT_THROW(r.on_drain(2), UsageError);
}

struct FabricFixture : ::testing::Test {
  Engine engine;
  Topology topo = build_topology(2, 2, 48);
  Fabric fab{engine, topo, LatencyModel{}};
};

TEST_F(FabricFixture, EmptyWriteCompletesAfterStartup) {
  engine.run_until(from_us(3));
  auto c = fab.mem_write(NodeId{0}, NodeId{1}, 4096, {}, 4);
  EXPECT_EQ(c.done, from_us(3) + fab.model().mem_startup());
  EXPECT_EQ(c.chunks, 1u);
  engine.run();
  EXPECT_EQ(fab.memory(NodeId{1}).allocated_pages(), 0u);
}

TEST_F(FabricFixture, WriteLandsAtCompletion) {
  const auto p = pattern(1 << 20);
  auto c = fab.mem_write(NodeId{0}, NodeId{3}, 1000, p, 2);
  EXPECT_EQ(c.chunks, 6u);  // 1 MiB / 192 KiB
  engine.run_until(c.done - SimTime{1});
  EXPECT_NE(fab.memory(NodeId{3}).read(1000, p.size()), p);
  engine.run();
  EXPECT_EQ(fab.memory(NodeId{3}).read(1000, p.size()), p);
  EXPECT_GT(fab.core_busy_us(NodeId{0}), 0.0);
}

TEST_F(FabricFixture, CoresOutOfRangeIsConfigError) {
  const auto p = pattern(16);
  EXPECT_THROW(fab.mem_write(NodeId{0}, NodeId{1}, 0, p, 0), ConfigError);
  EXPECT_THROW(fab.mem_write(NodeId{0}, NodeId{1}, 0, p, 49), ConfigError);
}

TEST_F(FabricFixture, OutOfBoundsWriteFaults) {
  const auto p = pattern(64);
  auto c = fab.mem_write(NodeId{0}, NodeId{1}, fab.layout().total_bytes() - 8, p, 1);
  EXPECT_EQ(c.status, TransferStatus::fault);
  ASSERT_EQ(fab.faults().size(), 1u);
  EXPECT_EQ(fab.faults()[0].kind, "out_of_bounds");
}

TEST_F(FabricFixture, DmaTiming) {
  auto c0 = fab.dma_copy(NodeId{0}, 0, NodeId{1}, 0, 0);
  EXPECT_EQ(c0.done, fab.model().dma_startup());
  const std::uint64_t four_gb = 4ULL << 30;
  FabricOptions big;
  big.app_bytes = 8ULL << 30;
  Engine e2;
  Fabric f2(e2, topo, LatencyModel{}, big);
  auto c = f2.dma_copy(NodeId{0}, 0, NodeId{2}, 0, four_gb);
  EXPECT_EQ(c.chunks, 1u);
  EXPECT_EQ(chunk_count(four_gb, 64 * 1024), 65536u);
  EXPECT_EQ(c.done, from_us(4.0) + SimTime{static_cast<std::int64_t>(
                                       std::llround(four_gb / 400.0))});
  e2.run();
}

TEST_F(FabricFixture, DmaRejectsOverlapAndOversize) {
  EXPECT_THROW(fab.dma_copy(NodeId{0}, 0, NodeId{0}, 100, 200), std::invalid_argument);
  EXPECT_NO_THROW(fab.dma_copy(NodeId{0}, 0, NodeId{0}, 200, 200));
  EXPECT_THROW(fab.dma_copy(NodeId{0}, 0, NodeId{1}, 0, (8ULL << 30) + 1), ConfigError);
}

TEST_F(FabricFixture, DmaCapturesSourceAtIssue) {
  fab.memory(NodeId{0}).write(0, pattern(100, 1));
  fab.dma_copy(NodeId{0}, 0, NodeId{1}, 0, 100);
  fab.memory(NodeId{0}).write(0, pattern(100, 2));
  engine.run();
  EXPECT_EQ(fab.memory(NodeId{1}).read(0, 100), pattern(100, 1));
}

TEST_F(FabricFixture, CrossoverSolvesEquality) {
  const auto& m = fab.model();
  auto x = dma_crossover_bytes(m, 48);
  ASSERT_TRUE(x.has_value());
  EXPECT_LE(m.dma_latency(*x), m.mem_latency(*x, 48));
  EXPECT_GT(m.dma_latency(*x - 1000), m.mem_latency(*x - 1000, 48));
  // 1 MB: DMA pays more startup but wins on rate against 48 cores only past x.
  EXPECT_GT(m.dma_startup(), m.mem_startup());
}

TEST_F(FabricFixture, PollAlreadyTrue) {
  engine.run_until(from_us(2));
  PollResult got;
  fab.poll(NodeId{0}, fab.layout().field_addr(0), 32,
           [](std::span<const std::byte>) { return true; }, from_us(5), 1,
           [&](const PollResult& r) { got = r; });
  engine.run();
  EXPECT_TRUE(got.satisfied);
  EXPECT_EQ(got.at, from_us(2));
}

TEST_F(FabricFixture, PollSeesWriterWithinOneInterval) {
  const Addr field = fab.layout().field_addr(5);
  MetadataField v{1, 1, 0, 0};
  fab.write_metadata_at(from_us(10), NodeId{1}, NodeId{0}, 5, v);
  PollResult got;
  fab.poll(NodeId{0}, field, 32,
           [](std::span<const std::byte> b) { return MetadataField::decode(b).chunk_id == 1; },
           from_us(100), 1, [&](const PollResult& r) { got = r; }, from_us(1));
  engine.run();
  EXPECT_TRUE(got.satisfied);
  EXPECT_GE(got.at, from_us(10));
  EXPECT_LE(got.at, from_us(11));
  EXPECT_NEAR(fab.core_busy_us(NodeId{0}), to_us(got.at), 1e-9);
}

TEST_F(FabricFixture, PollTimesOut) {
  fab.write_metadata_at(from_us(10), NodeId{1}, NodeId{0}, 5, MetadataField{1, 1, 0, 0});
  PollResult got{true, SimTime{0}};
  fab.poll(NodeId{0}, fab.layout().field_addr(5), 32,
           [](std::span<const std::byte> b) { return MetadataField::decode(b).chunk_id == 1; },
           from_us(5), 1, [&](const PollResult& r) { got = r; }, from_us(1));
  engine.run();
  EXPECT_FALSE(got.satisfied);
  EXPECT_EQ(got.at, from_us(5));
}

TEST_F(FabricFixture, LinkDownDropsDelivery) {
  fab.set_link(NodeId{0}, NodeId{1}, false);
  fab.mem_write(NodeId{0}, NodeId{1}, 0, pattern(64, 1), 1);
  engine.run();
  EXPECT_EQ(fab.memory(NodeId{1}).read(0, 64), std::vector<std::byte>(64));
  ASSERT_FALSE(fab.faults().empty());
  EXPECT_EQ(fab.faults().back().kind, "link_drop");
}

TEST_F(FabricFixture, WritesOnOnePairLeaveOtherRingsAlone) {
  auto& r01 = fab.ring(NodeId{1}, NodeId{0});
  auto& r21 = fab.ring(NodeId{1}, NodeId{2});
  fab.memory(NodeId{1}).write(r21.slot_addr(0), pattern(128, 5));
  fab.mem_write(NodeId{0}, NodeId{1}, r01.slot_addr(0), pattern(32768, 7), 4);
  engine.run();
  EXPECT_EQ(fab.memory(NodeId{1}).read(r21.slot_addr(0), 128), pattern(128, 5));
}

TEST(LatencyModel, Monotonicity) {
  const LatencyModel m;
  std::uint64_t prev_size = 0;
  for (std::uint64_t s = 1; s < (64ULL << 20); s = s * 3 + 7) {
    for (int c = 1; c <= 48; ++c) {
      EXPECT_LE(m.mem_latency(prev_size, c), m.mem_latency(s, c));
      if (c > 1) EXPECT_LE(m.mem_latency(s, c), m.mem_latency(s, c - 1));
    }
    EXPECT_LE(m.dma_latency(prev_size), m.dma_latency(s));
    prev_size = s;
  }
}

TEST(LatencyModel, ValidationRejectsBadParameters) {
  LatencyModel m;
  m.dma_startup_us = m.mem_startup_us;
  EXPECT_THROW(m.validate(), ConfigError);
  LatencyModel e;
  e.core_efficiency = 1.5;
  EXPECT_THROW(e.validate(), ConfigError);
}

TEST(LatencyModel, JitterIsSeededAndOffByDefault) {
  LatencyModel m;
  std::mt19937_64 a(1), b(1);
  EXPECT_EQ(m.perturb(from_us(5), a), from_us(5));
  m.jitter_enabled = true;
  m.jitter_sigma = 0.3;
  EXPECT_EQ(m.perturb(from_us(5), a), m.perturb(from_us(5), b));
}

TEST(Calibration, ShippedDefaultsMatchFit) {
  const auto samples =
      read_latency_samples(std::string(PODSIM_SOURCE_DIR) + "/data/sendrecv_anchors.csv");
  ASSERT_EQ(samples.size(), 9u);
  const LatencyModel defaults;
  const auto fit = calibrate(samples, defaults);
  EXPECT_NEAR(fit.model.mem_startup_us, defaults.mem_startup_us, 1e-4);
  EXPECT_NEAR(fit.model.bandwidth_gbps, defaults.bandwidth_gbps, 1e-3);
  EXPECT_NEAR(fit.model.core_efficiency, defaults.core_efficiency, 1e-4);
  EXPECT_LT(fit.rmse_us, 2.0);
}

TEST(Calibration, RecoversKnownParameters) {
  LatencyModel truth;
  truth.mem_startup_us = 0.9;
  truth.bandwidth_gbps = 55.0;
  truth.core_efficiency = 0.5;
  std::vector<LatencySample> s;
  for (std::uint64_t b : {1ULL << 16, 1ULL << 20, 9ULL << 20}) {
    for (int c : {1, 2, 8, 48}) s.push_back({b, c, predict_send_latency_us(truth, {}, b, c)});
  }
  const auto fit = calibrate(s, LatencyModel{});
  EXPECT_NEAR(fit.model.mem_startup_us, 0.9, 1e-3);
  EXPECT_NEAR(fit.model.bandwidth_gbps, 55.0, 0.05);
  EXPECT_NEAR(fit.model.core_efficiency, 0.5, 1e-3);
}

TEST(Calibration, MalformedRowReportsLine) {
  std::istringstream in("bytes,cores,latency_us\n65536,2,4.1\nbogus\n");
  try {
    read_latency_samples(in);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 3);
  }
}

TEST(Trace, CsvQuotesAndOrdersByTime) {
  Trace t;
  t.record(SimTime{20}, 1, "b", 2, 8, "x,y");
  t.record(SimTime{10}, 0, "a");
  std::ostringstream out;
  t.write_csv(out);
  EXPECT_EQ(out.str(), "time_ns,node,op,peer,size,detail\n10,0,a,-1,0,\n20,1,b,2,8,\"x,y\"\n");
}

TEST(Engine, OrdersByTimeThenInsertion) {
  Engine e;
  std::vector<int> order;
  e.schedule_at(SimTime{5}, [&] { order.push_back(2); });
  e.schedule_at(SimTime{1}, [&] { order.push_back(1); });
  auto id = e.schedule_at(SimTime{5}, [&] { order.push_back(99); });
  e.schedule_at(SimTime{5}, [&] { order.push_back(3); });
  EXPECT_TRUE(e.cancel(id));
  e.run();
  EXPECT_EQ(order, (std::vector<int>{1, 2, 3}));
  EXPECT_THROW(e.schedule_at(SimTime{1}, [] {}), std::logic_error);
}

}  // namespace
}  // namespace podsim::fabric
