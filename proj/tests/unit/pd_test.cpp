// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "podsim/core/error.hpp"
#include "podsim/pipeline/pd.hpp"

namespace podsim::pipeline {
namespace {

PdConfig small() {
  PdConfig c;
  c.prefill = {PrefillTeSpec{2, 2, 64, {}}};
  c.decode = {DecodeTeSpec{2, 4, 64}};
  c.kv_block_bytes = 4096;
  c.decode_step_ms = 10;
  return c;
}

std::vector<int> step_ids(const RequestTrace& t) {
  std::vector<int> v;
  for (const auto& s : t.steps) v.push_back(s.step);
  return v;
}

TEST(PdWorkflow, SingleRequestVisitsEveryStepOnce) {
  const auto r = pd_workflow(small(), {{0, 0.0, 300, 20, 1}});
  ASSERT_EQ(r.requests.size(), 1u);
  const auto& t = r.requests[0];
  EXPECT_EQ(t.state, RequestState::done);
  EXPECT_EQ(step_ids(t), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8}));
  for (std::size_t i = 1; i < t.steps.size(); ++i) EXPECT_LE(t.steps[i - 1].at, t.steps[i].at);
  EXPECT_TRUE(r.audit.balanced());
  EXPECT_EQ(r.transfers, 3u);  // ceil(300 / 128)
  EXPECT_EQ(r.bytes_verified, 3u * 4096);
  EXPECT_EQ(r.content_mismatches, 0u);
  // 5 ms + 3 ms prefill
  EXPECT_NEAR(t.ttft_ms(), 8.0, 1e-9);
  EXPECT_EQ(r.completed, 1);
  EXPECT_FALSE(r.deadlock);
}

TEST(PdWorkflow, TransferTaskIsMetadataOnlyUntilDecodeAccepts) {
  const auto r = pd_workflow(small(), {{0, 0.0, 300, 20, 1}});
  const auto& s = r.requests[0].steps;
  // Registration happens at prefill completion; the P2P transfer only after
  // the reservation at step 6.
  EXPECT_EQ(s[2].detail, "transfer_task blocks=3");
  EXPECT_LE(s[5].at, s[6].at);
  for (const auto& e : r.ledger) {
    if (e.op == KvOp::decode_alloc) EXPECT_GE(e.at, s[5].at);
    if (e.op == KvOp::prefill_release) EXPECT_GE(e.at, s[7].at);
  }
}

TEST(PdWorkflow, BackpressureDefersUntilSlotFrees) {
  auto c = small();
  c.decode = {DecodeTeSpec{1, 1, 64}};  // one decode slot
  const auto r = pd_workflow(c, {{0, 0.0, 128, 100, 1}, {1, 0.0, 128, 100, 2}});
  ASSERT_EQ(r.completed, 2);
  EXPECT_GE(r.backpressure_events, 1u);
  const auto& a = r.requests[0];
  const auto& b = r.requests[1];
  const auto& late = a.deferrals > 0 ? a : b;
  const auto& early = a.deferrals > 0 ? b : a;
  // The deferred request's transfer starts only after the other finishes decode.
  SimTime transfer_start{0};
  for (const auto& s : late.steps) {
    if (s.step == 7) transfer_start = s.at;
  }
  EXPECT_GE(transfer_start, early.finished);
  // Prefill blocks stay held while deferred.
  SimTime released{0};
  for (const auto& e : r.ledger) {
    if (e.request == late.id && e.op == KvOp::prefill_release) released = e.at;
  }
  EXPECT_GE(released, early.finished);
  EXPECT_EQ(r.accepted_without_reservation, 0u);
  EXPECT_TRUE(r.audit.balanced());
}

TEST(PdWorkflow, DeadlineFailsWithCauseAndReclaims) {
  auto c = small();
  c.decode = {DecodeTeSpec{1, 1, 64}};
  c.backpressure_deadline_ms = 50;
  c.decode_step_ms = 100;
  const auto r = pd_workflow(c, {{0, 0.0, 128, 100, 1}, {1, 0.0, 128, 100, 2}});
  EXPECT_EQ(r.completed, 1);
  EXPECT_EQ(r.failed, 1);
  const auto& f = r.requests[0].state == RequestState::failed ? r.requests[0] : r.requests[1];
  EXPECT_EQ(f.cause, "decode_capacity_deadline");
  EXPECT_EQ(r.audit.prefill_reclaimed, 1u);
  EXPECT_TRUE(r.audit.balanced());
}

TEST(PdWorkflow, OversizedRequestsFailWithCause) {
  auto c = small();
  const auto r = pd_workflow(c, {{0, 0.0, 128 * 100, 1, 1}, {1, 0.0, 128, 128 * 100, 1}});
  EXPECT_EQ(r.requests[0].cause, "prompt_exceeds_prefill_capacity");
  EXPECT_EQ(r.requests[1].cause, "exceeds_decode_capacity");
  EXPECT_TRUE(r.audit.balanced());
}

PdConfig pressure() {
  PdConfig c;
  c.prefill.assign(4, PrefillTeSpec{2, 4, 96, {}});
  c.prefill[2].profile = {"scale_out", 8.0, 0.02, true};
  c.prefill[3].profile = {"scale_out", 8.0, 0.02, true};
  c.decode = {DecodeTeSpec{4, 8, 160}};
  c.kv_block_bytes = 8192;
  c.decode_step_ms = 20;
  return c;
}

TEST(PdWorkflow, HundredRequestsConserveBlocks) {
  WorkloadSpec w;
  w.count = 100;
  w.arrival = WorkloadSpec::Arrival::poisson;
  w.rate_per_s = 400;
  const auto reqs = generate_workload(w, 7);
  const auto r = pd_workflow(pressure(), reqs, 7);
  EXPECT_EQ(r.completed + r.failed, 100);
  EXPECT_FALSE(r.deadlock);
  EXPECT_TRUE(r.audit.balanced()) << r.audit.to_json().dump();
  EXPECT_GT(r.backpressure_events, 0u);
  EXPECT_EQ(r.accepted_without_reservation, 0u);
  EXPECT_EQ(r.content_mismatches, 0u);
  for (const auto& t : r.requests) {
    if (t.state == RequestState::failed) EXPECT_FALSE(t.cause.empty());
  }
  std::set<int> te;
  for (const auto& t : r.requests) te.insert(t.prefill_te);
  EXPECT_EQ(te.size(), 4u);
}

TEST(PdWorkflow, ScaleOutProfileIsSlower) {
  PdConfig c = small();
  c.prefill = {PrefillTeSpec{1, 1, 64, {}}};
  const auto fast = pd_workflow(c, {{0, 0.0, 1024, 4, 1}});
  c.prefill[0].profile = {"scale_out", 5.0, 0.01, true};
  const auto slow = pd_workflow(c, {{0, 0.0, 1024, 4, 1}});
  auto span = [](const RequestTrace& t) { return t.steps[7].at - t.steps[6].at; };
  EXPECT_GT(span(slow.requests[0]), span(fast.requests[0]));
}

TEST(PdWorkflow, Deterministic) {
  WorkloadSpec w;
  w.count = 40;
  w.arrival = WorkloadSpec::Arrival::poisson;
  const auto reqs = generate_workload(w, 3);
  EXPECT_EQ(pd_workflow(pressure(), reqs, 3).to_json(true).dump(),
            pd_workflow(pressure(), reqs, 3).to_json(true).dump());
}

TEST(PdWorkflow, ColocatedDecodesWhereItPrefilled) {
  auto c = small();
  c.colocated = true;
  c.decode = {DecodeTeSpec{1, 2, 32}};
  WorkloadSpec w;
  w.count = 20;
  w.prompt_max = 1024;
  w.output_max = 256;
  const auto r = pd_workflow(c, generate_workload(w, 2));
  EXPECT_EQ(r.completed + r.failed, 20);
  EXPECT_GT(r.completed, 0);
  EXPECT_TRUE(r.audit.balanced());
  EXPECT_EQ(r.content_mismatches, 0u);
  for (const auto& t : r.requests) {
    if (t.state != RequestState::done) continue;
    EXPECT_EQ(t.decode_dp, t.prefill_dp);
    const auto s7 = std::find_if(t.steps.begin(), t.steps.end(), [](const StepRecord& s) { return s.step == 7; });
    ASSERT_NE(s7, t.steps.end());
    EXPECT_EQ(s7->detail.rfind("local", 0), 0u);
  }
}

TEST(PdWorkflow, AuditCatchesLeaksAndDoubleEnds) {
  std::vector<KvLedgerEntry> l = {{SimTime{0}, true, 0, 1, 5, KvOp::prefill_alloc}};
  EXPECT_FALSE(audit_ledger(l).balanced());
  EXPECT_EQ(audit_ledger(l).leaked, 1u);
  l.push_back({SimTime{1}, true, 0, 1, 5, KvOp::prefill_release});
  EXPECT_TRUE(audit_ledger(l).balanced());
  l.push_back({SimTime{2}, true, 0, 1, 5, KvOp::prefill_reclaim});
  EXPECT_FALSE(audit_ledger(l).balanced());
  EXPECT_EQ(audit_ledger(l).invalid_ops, 1u);
}

TEST(PdWorkflow, Validation) {
  PdConfig c;
  c.decode.clear();
  EXPECT_THROW(pd_workflow(c, {}), ConfigError);
  EXPECT_THROW(pd_workflow(PdConfig{}, {{0, 0.0, 0, 1, 0}}), ConfigError);
  const auto empty = pd_workflow(PdConfig{}, {});
  EXPECT_EQ(empty.completed, 0);
  EXPECT_TRUE(empty.audit.balanced());
}

}  // namespace
}  // namespace podsim::pipeline
