// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/scheduler/scheduler.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "podsim/core/error.hpp"

namespace podsim::scheduler {

void CostModel::validate() const {
  if (weight_prefix_hit < 0 || weight_length < 0 || weight_load < 0) {
    throw ConfigError("scheduler cost weights must be >= 0");
  }
}

void AuditLog::record(SimTime time, int request, const std::vector<int>& candidates,
                      const std::vector<double>& scores, std::optional<int> chosen) {
  nlohmann::json j{{"time", time.count()},
                   {"request", request},
                   {"candidates", candidates},
                   {"scores", scores},
                   {"chosen", chosen ? nlohmann::json(*chosen) : nlohmann::json(nullptr)}};
  lines_.push_back(j.dump());
}

std::uint64_t reserve_blocks(int max_output_len, int block_tokens) {
  if (block_tokens < 1) throw ConfigError("block size must be >= 1");
  if (max_output_len <= 0) return 0;
  return (static_cast<std::uint64_t>(max_output_len) + block_tokens - 1) / block_tokens;
}

PrefillDecision prefill_schedule_step(std::vector<DpGroupState>& view,
                                      const std::vector<PendingRequest>& queue,
                                      const CostModel& cost, int block_tokens, AuditLog* audit,
                                      SimTime now) {
  cost.validate();
  PrefillDecision d;
  if (queue.empty()) return d;
  std::vector<std::size_t> order(queue.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return queue[a].prompt_len > queue[b].prompt_len;
  });
  double total_len = 0;
  for (const auto& g : view) total_len += static_cast<double>(g.queued_tokens);
  for (const auto& r : queue) total_len += r.prompt_len;
  total_len = std::max(total_len, 1.0);

  for (std::size_t i : order) {
    const auto& r = queue[i];
    const std::uint64_t blocks = reserve_blocks(r.prompt_len, block_tokens);
    std::vector<int> cands;
    std::vector<double> scores;
    int best = -1;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t gi = 0; gi < view.size(); ++gi) {
      const auto& g = view[gi];
      if (g.full() || g.kv_used_blocks + blocks > g.kv_total_blocks) continue;
      const double hit = g.prefix_cache.contains(r.prefix_hash) ? 1.0 : 0.0;
      const double len = (static_cast<double>(g.queued_tokens) + r.prompt_len) / total_len;
      const double load =
          static_cast<double>(g.active_batch + g.pending_requests) / std::max(g.batch_limit, 1);
      const double c = cost.weight_prefix_hit * (1.0 - hit) + cost.weight_length * len +
                       cost.weight_load * load;
      cands.push_back(g.id);
      scores.push_back(c);
      if (c < best_cost) {
        best_cost = c;
        best = static_cast<int>(gi);
      }
    }
    if (audit) {
      audit->record(now, r.id, cands, scores,
                    best < 0 ? std::nullopt : std::optional<int>(view[best].id));
    }
    if (best < 0) {
      d.deferred.push_back(r.id);
      continue;
    }
    auto& g = view[best];
    ++g.pending_requests;
    g.queued_tokens += static_cast<std::uint64_t>(r.prompt_len);
    g.kv_used_blocks += blocks;
    d.assigned.push_back({r.id, g.id});
  }
  return d;
}

PrefillDecision prefill_round_robin(std::vector<DpGroupState>& view,
                                    const std::vector<PendingRequest>& queue) {
  PrefillDecision d;
  std::size_t next = 0;
  for (const auto& r : queue) {
    std::size_t tries = 0;
    while (tries < view.size() && view[next].full()) {
      next = (next + 1) % view.size();
      ++tries;
    }
    if (tries == view.size()) {
      d.deferred.push_back(r.id);
      continue;
    }
    ++view[next].pending_requests;
    view[next].queued_tokens += static_cast<std::uint64_t>(r.prompt_len);
    d.assigned.push_back({r.id, view[next].id});
    next = (next + 1) % view.size();
  }
  return d;
}

double prefill_makespan_ms(const PrefillDecision& d, const std::vector<PendingRequest>& queue,
                           int groups, double fixed_ms, double per_token_ms) {
  std::vector<double> tokens(groups, 0.0);
  std::vector<bool> used(groups, false);
  for (const auto& a : d.assigned) {
    auto it = std::find_if(queue.begin(), queue.end(),
                           [&](const PendingRequest& r) { return r.id == a.request; });
    if (it == queue.end() || a.group < 0 || a.group >= groups) {
      throw ConfigError("assignment names an unknown request or group");
    }
    tokens[a.group] += it->prompt_len;
    used[a.group] = true;
  }
  double span = 0;
  for (int g = 0; g < groups; ++g) {
    if (used[g]) span = std::max(span, fixed_ms + per_token_ms * tokens[g]);
  }
  return span;
}

DecodeRoute route_decode(int request, const std::vector<DpGroupState>& groups,
                         std::uint64_t reserve, AuditLog* audit, SimTime now) {
  DecodeRoute out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& g : groups) {
    if (g.active_batch >= g.batch_limit) continue;
    if (g.kv_used_blocks + reserve > g.kv_total_blocks) continue;
    const double s = static_cast<double>(g.kv_used_blocks + reserve) /
                     static_cast<double>(g.kv_total_blocks);
    out.candidates.push_back(g.id);
    out.scores.push_back(s);
    if (s < best || (s == best && out.group && g.id < *out.group)) {
      best = s;
      out.group = g.id;
    }
  }
  if (audit) audit->record(now, request, out.candidates, out.scores, out.group);
  return out;
}

RotationResult domain_rotate(const std::vector<DomainSpec>& domains, int rounds) {
  if (domains.empty()) throw ConfigError("domain rotation needs at least one domain");
  if (rounds < 0) throw ConfigError("rounds must be >= 0");
  RotationResult r;
  const std::size_t n = domains.size();
  std::vector<SimTime> ready(n, SimTime{0});
  std::vector<SimTime> held(n, SimTime{0});
  SimTime released{0};
  SimTime busy{0};
  for (int k = 0; k < rounds; ++k) {
    for (std::size_t d = 0; d < n; ++d) {
      const SimTime start = std::max(released, ready[d]);
      const SimTime end = start + domains[d].window;
      r.holds.push_back({static_cast<int>(d), start, end});
      busy += domains[d].window;
      held[d] += domains[d].window;
      released = end;
      ready[d] = end + domains[d].attention;
    }
  }
  r.makespan = released;
  r.moe_busy_fraction =
      r.makespan > SimTime{0} ? static_cast<double>(busy.count()) / r.makespan.count() : 1.0;
  for (std::size_t d = 0; d < n; ++d) {
    r.hold_fraction.push_back(r.makespan > SimTime{0}
                                  ? static_cast<double>(held[d].count()) / r.makespan.count()
                                  : (n == 1 ? 1.0 : 0.0));
  }
  return r;
}

bool exclusive(const std::vector<TokenHold>& holds) {
  auto sorted = holds;
  std::sort(sorted.begin(), sorted.end(),
            [](const TokenHold& a, const TokenHold& b) { return a.start < b.start; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].start < sorted[i - 1].end) return false;
  }
  return true;
}

JitterModel::JitterModel(JitterConfig cfg, JitterParams params, std::uint64_t seed)
    : cfg_(cfg), p_(params), seed_(seed) {
  if (cfg_.gc_every < 0) throw ConfigError("gc_every must be >= 0");
}

double JitterModel::overhead_ms(int group, int pass) const {
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(group), static_cast<std::uint32_t>(pass)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double t = 0;
  if (cfg_.core_pinning) {
    t += std::exponential_distribution<double>(1.0 / p_.pinned_noise_ms)(rng);
  } else {
    t += std::exponential_distribution<double>(1.0 / p_.noise_mean_ms)(rng);
    if (u(rng) < p_.preempt_prob) t += p_.preempt_ms;
  }
  if (!cfg_.graph_caching) t += p_.guard_ms;
  if (cfg_.gc_every == 0) {
    if (u(rng) < p_.gc_prob) t += p_.gc_min_ms + (p_.gc_max_ms - p_.gc_min_ms) * u(rng);
  } else if (pass % cfg_.gc_every == cfg_.gc_every - 1) {
    t += p_.gc_per_pass_ms * cfg_.gc_every;
  }
  return t;
}

double JitterModel::first_dispatch_delay_ms(int groups, int pass) const {
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0;
  for (int g = 0; g < groups; ++g) {
    const double o = overhead_ms(g, pass);
    lo = std::min(lo, o);
    hi = std::max(hi, o);
  }
  return groups > 0 ? hi - lo : 0.0;
}

}  // namespace podsim::scheduler
