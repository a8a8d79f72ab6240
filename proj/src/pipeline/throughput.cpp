// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/pipeline/throughput.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "podsim/core/error.hpp"

namespace podsim::pipeline {

KernelStats KernelStats::of(std::string name, const std::vector<double>& us) {
  KernelStats k;
  k.name = std::move(name);
  k.samples = us.size();
  if (us.empty()) return k;
  k.avg_us = std::accumulate(us.begin(), us.end(), 0.0) / static_cast<double>(us.size());
  k.min_us = *std::min_element(us.begin(), us.end());
  k.max_us = *std::max_element(us.begin(), us.end());
  return k;
}

void DecodeDeployment::validate() const {
  if (dies < 1 || dies_per_chip < 1 || batch_per_die < 0) throw ConfigError("invalid decode deployment");
  if (forward_ms <= 0 || gap_ms < 0) throw ConfigError("forward must be > 0 and gap >= 0");
  if (iterations < 1 || sampled_layers < 0) throw ConfigError("iterations must be >= 1");
  if (top_k < 1 || top_k > dies || hidden < 1) throw ConfigError("invalid top-k or hidden size");
  if (mla_jitter_us < 0) throw ConfigError("MLA jitter must be >= 0");
  mtp.validate();
}

namespace {

nlohmann::json null_if_nan(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double num_or_nan(const nlohmann::json& j) { return j.is_null() ? NAN : j.get<double>(); }

}  // namespace

nlohmann::json ThroughputReport::to_json() const {
  nlohmann::json b = nlohmann::json::array();
  for (const auto& k : breakdown) {
    b.push_back({{"kernel", k.name},
                 {"avg_us", k.avg_us},
                 {"min_us", k.min_us},
                 {"max_us", k.max_us},
                 {"samples", k.samples}});
  }
  return {{"tokens_per_step", null_if_nan(tokens_per_step)},
          {"tpot_ms", null_if_nan(tpot_ms)},
          {"forward_ms", null_if_nan(forward_ms)},
          {"tokens_per_s_per_chip", null_if_nan(tokens_per_s_per_chip)},
          {"total_tokens_per_s", null_if_nan(total_tokens_per_s)},
          {"global_batch", global_batch},
          {"breakdown", b}};
}

ThroughputReport ThroughputReport::from_json(const nlohmann::json& j) {
  ThroughputReport r;
  r.tokens_per_step = num_or_nan(j.at("tokens_per_step"));
  r.tpot_ms = num_or_nan(j.at("tpot_ms"));
  r.forward_ms = num_or_nan(j.at("forward_ms"));
  r.tokens_per_s_per_chip = num_or_nan(j.at("tokens_per_s_per_chip"));
  r.total_tokens_per_s = num_or_nan(j.at("total_tokens_per_s"));
  r.global_batch = j.at("global_batch").get<std::int64_t>();
  for (const auto& k : j.at("breakdown")) {
    r.breakdown.push_back({k.at("kernel").get<std::string>(), k.at("avg_us").get<double>(),
                           k.at("min_us").get<double>(), k.at("max_us").get<double>(),
                           k.at("samples").get<std::uint64_t>()});
  }
  return r;
}

double tokens_per_s_per_chip(int dies_per_chip, int batch_per_die, double tpot) {
  return dies_per_chip * batch_per_die * 1000.0 / tpot;
}

std::vector<KernelStats> ep_kernel_breakdown(int ranks, int batch_per_rank, int top_k, int hidden,
                                             int layers, double jitter_us, std::uint64_t seed) {
  Engine engine;
  fabric::Fabric fab(engine, fabric::build_topology((ranks + 1) / 2, 2, 48),
                     fabric::LatencyModel{});
  fab.trace().set_enabled(false);
  auto opts = xccl::default_ep_options();
  opts.wire_dim = hidden;
  xccl::Collectives coll(fab, opts);
  std::vector<fabric::NodeId> nodes;
  for (int r = 0; r < ranks; ++r) nodes.push_back(fabric::NodeId{r});
  const auto cfg = xccl::EpConfig::uniform(ranks, 1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, jitter_us);

  std::vector<double> dispatch_us;
  std::vector<double> combine_us;
  std::vector<int> ids(ranks);
  for (int layer = 0; layer < layers; ++layer) {
    std::vector<xccl::TokenPayload> tokens;
    xccl::GatingOutput gating;
    for (int r = 0; r < ranks; ++r) {
      for (int b = 0; b < batch_per_rank; ++b) {
        tokens.push_back({r * batch_per_rank + b, r, {}});
        std::iota(ids.begin(), ids.end(), 0);
        for (int j = 0; j < top_k; ++j) {
          std::swap(ids[j], ids[j + rng() % static_cast<std::uint64_t>(ranks - j)]);
        }
        gating.experts.emplace_back(ids.begin(), ids.begin() + top_k);
        gating.scores.emplace_back(top_k, 1.0 / top_k);
      }
    }
    coll.options().start_delay.clear();
    if (jitter_us > 0) {
      for (int r = 0; r < ranks; ++r) coll.options().start_delay[r] = from_us(std::abs(jitter(rng)));
    }
    auto d = coll.dispatch(tokens, gating, cfg, true, nodes);
    dispatch_us.insert(dispatch_us.end(), d.summary.latency_us.begin(), d.summary.latency_us.end());
    coll.options().start_delay.clear();
    auto c = coll.combine(d.per_rank, gating, tokens, cfg, nodes);
    combine_us.insert(combine_us.end(), c.summary.latency_us.begin(), c.summary.latency_us.end());
  }
  return {KernelStats::of("Dispatch", dispatch_us), KernelStats::of("Combine", combine_us)};
}

ThroughputReport simulate_decode(const DecodeDeployment& d) {
  d.validate();
  MtpConfig mtp = d.mtp;
  mtp.seed = d.seed;
  ThroughputReport r;
  r.forward_ms = d.forward_ms;
  r.global_batch = static_cast<std::int64_t>(d.dies) * d.batch_per_die;
  if (d.batch_per_die == 0) {
    r.tokens_per_step = r.tpot_ms = r.tokens_per_s_per_chip = r.total_tokens_per_s = NAN;
    return r;
  }
  r.tokens_per_step = measured_tokens_per_step(mtp, d.batch_per_die, d.iterations);
  r.tpot_ms = tpot_ms(d.forward_ms, d.gap_ms, r.tokens_per_step);
  r.tokens_per_s_per_chip = tokens_per_s_per_chip(d.dies_per_chip, d.batch_per_die, r.tpot_ms);
  r.total_tokens_per_s = r.tokens_per_s_per_chip * d.dies / d.dies_per_chip;
  if (d.sampled_layers > 0) {
    r.breakdown = ep_kernel_breakdown(d.dies, d.batch_per_die, d.top_k, d.hidden, d.sampled_layers,
                                      d.mla_jitter_us, d.seed);
  }
  return r;
}

MaReport simulate_ma(const MaConfig& cfg, const MtpConfig& mtp, int dies_per_chip) {
  MaReport out;
  out.timeline = ma_pipeline(cfg);
  auto& r = out.throughput;
  r.forward_ms = out.timeline.total_forward_ms;
  r.global_batch = cfg.global_batch();
  r.tokens_per_step = expected_tokens_per_step(mtp);
  r.tpot_ms = tpot_ms(r.forward_ms, 0.0, r.tokens_per_step);
  const double chips =
      static_cast<double>(cfg.domains * cfg.attention_dies_per_domain + cfg.expert_dies) /
      dies_per_chip;
  r.total_tokens_per_s = static_cast<double>(r.global_batch) * 1000.0 / r.tpot_ms;
  r.tokens_per_s_per_chip = r.total_tokens_per_s / chips;
  const auto segs = [&](SegmentKind k) {
    std::vector<double> us;
    for (const auto& s : out.timeline.of_kind(k)) us.push_back(to_us(s.end - s.start));
    return us;
  };
  r.breakdown = {KernelStats::of("Attention", segs(SegmentKind::attention)),
                 KernelStats::of("A2E", segs(SegmentKind::a2e)),
                 KernelStats::of("MoE", segs(SegmentKind::moe)),
                 KernelStats::of("E2A", segs(SegmentKind::e2a))};
  return out;
}

}  // namespace podsim::pipeline
