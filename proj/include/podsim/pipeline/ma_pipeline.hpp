// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "podsim/core/time.hpp"

namespace podsim::pipeline {

enum class SegmentKind { gap, attention, a2e, moe, e2a, mtp, host_dispatch };
const char* segment_name(SegmentKind k);

struct Segment {
  int domain = 0;
  int layer = -1;       // -1 for per-iteration segments (gap, mtp)
  int microbatch = -1;
  SegmentKind kind = SegmentKind::attention;
  SimTime start{0};
  SimTime end{0};
};

/// Per-layer, per-microbatch costs in milliseconds. `attention_ms` covers
/// MLAProlog, MLA, Gating and the attention-side half of A2E.
struct MaLatencies {
  double attention_ms = 0.7;
  double a2e_ms = 0.17;
  double moe_ms = 0.12;
  double e2a_ms = 0.19;
  double gap_ms = 2.0;
  double mtp_ms = 5.0;
  double host_launch_ms = 0.05;  // per kernel launch when kernels are not persistent
};

struct MaConfig {
  int domains = 1;
  int microbatches = 2;
  int layers = 61;
  int batch_per_die = 96;
  int attention_dies_per_domain = 160;
  int expert_dies = 288;
  bool persistent_kernels = true;
  /// Start of each domain's iteration; empty staggers domains evenly over
  /// one layer of attention work.
  std::vector<double> domain_offset_ms;
  MaLatencies lat;

  void validate() const;
  int global_batch() const { return batch_per_die * domains * attention_dies_per_domain; }
};

struct IterationTimeline {
  std::vector<Segment> segments;
  std::vector<double> domain_forward_ms;  // own start to own MTP end
  double total_forward_ms = 0;            // max over domains
  double moe_busy_ms = 0;
  double span_ms = 0;

  double moe_utilization() const { return span_ms > 0 ? moe_busy_ms / span_ms : 0; }
  std::vector<Segment> of_kind(SegmentKind k) const;
  nlohmann::json to_json() const;
};

/// Builds the overlapped timeline of one decode iteration. Expert nodes run
/// three streams (A2E receive, MoE compute, E2A send); each stream serves one
/// domain at a time in request order.
IterationTimeline ma_pipeline(const MaConfig& cfg);

/// Closed form: gap + mtp + attention * microbatches * layers + a2e + moe + e2a.
double ma_forward_formula_ms(const MaConfig& cfg);

/// Expert-node view of the timeline: the three stream segments plus any
/// host launches, ordered by start time.
std::vector<Segment> persistent_moe_worker(const IterationTimeline& t);

/// True when no two segments of the same stream kind overlap.
bool streams_exclusive(const IterationTimeline& t);

}  // namespace podsim::pipeline
