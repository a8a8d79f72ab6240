// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "podsim/core/error.hpp"
#include "podsim/scheduler/scheduler.hpp"

namespace podsim::scheduler {
namespace {

std::vector<DpGroupState> groups(int n, int limit = 8, std::uint64_t kv = 1000) {
  std::vector<DpGroupState> v;
  for (int i = 0; i < n; ++i) {
    DpGroupState g;
    g.id = i;
    g.batch_limit = limit;
    g.kv_total_blocks = kv;
    v.push_back(g);
  }
  return v;
}

TEST(Prefill, SingleRequestSingleGroup) {
  auto v = groups(1);
  const auto d = prefill_schedule_step(v, {{7, 100, 10, 1}}, CostModel{});
  ASSERT_EQ(d.assigned.size(), 1u);
  EXPECT_EQ(d.assigned[0].group, 0);
  EXPECT_EQ(v[0].pending_requests, 1);
}

TEST(Prefill, PrefixHitWins) {
  auto v = groups(3);
  v[2].prefix_cache.insert(42);
  const auto d = prefill_schedule_step(v, {{1, 100, 10, 42}}, CostModel{});
  EXPECT_EQ(d.assigned.at(0).group, 2);
}

TEST(Prefill, EmptyQueueDoesNothing) {
  auto v = groups(2);
  const auto d = prefill_schedule_step(v, {}, CostModel{});
  EXPECT_TRUE(d.assigned.empty());
  EXPECT_EQ(v[0].pending_requests, 0);
}

TEST(Prefill, LongRequestIsolatedAndMakespanBeatsRoundRobin) {
  std::vector<PendingRequest> q{{0, 8000, 10, 0}};
  for (int i = 1; i <= 7; ++i) q.push_back({i, 500, 10, 0});
  auto v = groups(2, 16, 1000);
  const CostModel cost{0.0, 10.0, 1.0};
  const auto d = prefill_schedule_step(v, q, cost);
  int long_group = -1;
  for (const auto& a : d.assigned) {
    if (a.request == 0) long_group = a.group;
  }
  for (const auto& a : d.assigned) {
    if (a.request != 0) EXPECT_NE(a.group, long_group);
  }
  auto w = groups(2, 16, 1000);
  const auto naive = prefill_round_robin(w, q);
  EXPECT_LT(prefill_makespan_ms(d, q, 2), prefill_makespan_ms(naive, q, 2));
}

TEST(Prefill, NeverOverfillsAndDefers) {
  std::mt19937_64 rng(1);
  for (int round = 0; round < 100; ++round) {
    auto v = groups(1 + static_cast<int>(rng() % 4), 1 + static_cast<int>(rng() % 4), 40);
    for (auto& g : v) {
      g.active_batch = static_cast<int>(rng() % (g.batch_limit + 1));
      g.kv_used_blocks = rng() % 41;
    }
    std::vector<PendingRequest> q;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) q.push_back({i, 1 + static_cast<int>(rng() % 2000), 16, rng() % 3});
    const auto d = prefill_schedule_step(v, q, CostModel{1, 1, 1});
    EXPECT_EQ(d.assigned.size() + d.deferred.size(), q.size());
    for (const auto& g : v) {
      EXPECT_LE(g.active_batch + g.pending_requests, g.batch_limit);
      EXPECT_LE(g.kv_used_blocks, g.kv_total_blocks);
    }
  }
}

TEST(Prefill, NegativeWeightsRejected) {
  auto v = groups(1);
  EXPECT_THROW(prefill_schedule_step(v, {{0, 1, 1, 0}}, CostModel{-1, 1, 1}), ConfigError);
}

TEST(Decode, LowestUsageChosen) {
  auto v = groups(3, 8, 100);
  v[0].kv_used_blocks = 90;
  v[1].kv_used_blocks = 40;
  v[2].kv_used_blocks = 70;
  EXPECT_EQ(route_decode(0, v, 0).group, 1);
}

TEST(Decode, AllFullBackpressures) {
  auto v = groups(3, 2, 100);
  for (auto& g : v) g.active_batch = 2;
  EXPECT_FALSE(route_decode(0, v, 1).group.has_value());
}

TEST(Decode, FuzzMatchesArgmin) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    auto v = groups(1 + static_cast<int>(rng() % 6), 4, 64);
    for (auto& g : v) {
      g.active_batch = static_cast<int>(rng() % 5);
      g.kv_used_blocks = rng() % 65;
    }
    const std::uint64_t reserve = rng() % 8;
    int want = -1;
    double best = 1e9;
    for (const auto& g : v) {
      if (g.active_batch >= g.batch_limit || g.kv_used_blocks + reserve > g.kv_total_blocks) continue;
      const double s = (g.kv_used_blocks + reserve) / 64.0;
      if (s < best) {
        best = s;
        want = g.id;
      }
    }
    const auto got = route_decode(i, v, reserve);
    if (want < 0) {
      EXPECT_FALSE(got.group.has_value());
    } else {
      EXPECT_EQ(got.group, want);
    }
  }
}

TEST(Decode, ReserveBlocksRoundsUp) {
  EXPECT_EQ(reserve_blocks(4096, 128), 32u);
  EXPECT_EQ(reserve_blocks(4097, 128), 33u);
  EXPECT_EQ(reserve_blocks(0, 128), 0u);
}

TEST(Audit, JsonLinesCarryDecision) {
  AuditLog log;
  auto v = groups(2, 8, 10);
  v[0].kv_used_blocks = 5;
  route_decode(3, v, 1, &log, from_us(7));
  ASSERT_EQ(log.lines().size(), 1u);
  const auto j = nlohmann::json::parse(log.lines()[0]);
  EXPECT_EQ(j.at("time"), 7000);
  EXPECT_EQ(j.at("request"), 3);
  EXPECT_EQ(j.at("candidates"), (std::vector<int>{0, 1}));
  EXPECT_EQ(j.at("chosen"), 1);
  EXPECT_EQ(j.at("scores").size(), 2u);
}

TEST(Domains, SingleDomainAlwaysHolds) {
  const auto r = domain_rotate({{from_us(400), SimTime{0}}}, 10);
  for (const auto& h : r.holds) EXPECT_EQ(h.domain, 0);
  EXPECT_DOUBLE_EQ(r.hold_fraction[0], 1.0);
}

TEST(Domains, ThreeEqualDomainsShareAndSaturate) {
  const SimTime w = from_us(500);
  const auto r = domain_rotate({{w, 2 * w}, {w, 2 * w}, {w, 2 * w}}, 50);
  for (double f : r.hold_fraction) EXPECT_NEAR(f, 1.0 / 3.0, 1e-9);
  EXPECT_DOUBLE_EQ(r.moe_busy_fraction, 1.0);
  EXPECT_TRUE(exclusive(r.holds));
  const auto slow = domain_rotate({{w, 4 * w}, {w, 4 * w}, {w, 4 * w}}, 50);
  EXPECT_LT(slow.moe_busy_fraction, 1.0);
  EXPECT_TRUE(exclusive(slow.holds));
}

TEST(Domains, HandoffAtRelease) {
  const auto r = domain_rotate({{from_us(100), SimTime{0}}, {from_us(50), SimTime{0}}}, 2);
  ASSERT_EQ(r.holds.size(), 4u);
  for (std::size_t i = 1; i < r.holds.size(); ++i) EXPECT_EQ(r.holds[i].start, r.holds[i - 1].end);
}

TEST(Jitter, UnmitigatedTailExceeds100ms) {
  JitterModel m({}, {}, 3);
  double worst = 0;
  for (int pass = 0; pass < 200; ++pass) worst = std::max(worst, m.first_dispatch_delay_ms(288, pass));
  EXPECT_GT(worst, 100.0);
}

double spread(const JitterModel& m) {
  double sum = 0;
  double sq = 0;
  const int n = 200;
  for (int pass = 0; pass < n; ++pass) {
    const double d = m.first_dispatch_delay_ms(288, pass);
    sum += d;
    sq += d * d;
  }
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, sq / n - mean * mean));
}

TEST(Jitter, MitigationShrinksVariance) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    JitterModel off({}, {}, seed);
    JitterModel on({true, true, 10}, {}, seed);
    EXPECT_LT(spread(on), 0.1);
    EXPECT_LT(spread(on), spread(off));
  }
}

TEST(Jitter, GcEveryPassHasNoSpikes) {
  JitterModel m({true, true, 1}, {}, 4);
  double lo = 1e9;
  double hi = 0;
  for (int g = 0; g < 64; ++g) {
    for (int pass = 0; pass < 100; ++pass) {
      lo = std::min(lo, m.overhead_ms(g, pass));
      hi = std::max(hi, m.overhead_ms(g, pass));
    }
  }
  EXPECT_GE(lo, 0.2);
  EXPECT_LT(hi - lo, 0.5);
}

}  // namespace
}  // namespace podsim::scheduler
