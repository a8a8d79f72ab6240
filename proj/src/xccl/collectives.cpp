// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/xccl/collectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include <nlohmann/json.hpp>

#include "podsim/core/error.hpp"

namespace podsim::xccl {

namespace {

using fabric::MetadataField;

constexpr std::size_t kHeader = 32;

std::size_t encoded_size(const Delivery& d) { return kHeader + d.hidden.size() * sizeof(double); }

void put32(std::vector<std::byte>& out, std::int32_t v) {
  const auto u = static_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((u >> (8 * i)) & 0xff));
}

void put64(std::vector<std::byte>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
}

std::uint64_t get(const std::byte* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::vector<std::byte> encode(const std::vector<Delivery>& entries) {
  std::vector<std::byte> out;
  for (const auto& d : entries) {
    put32(out, d.token_index);
    put32(out, d.source);
    put32(out, d.expert);
    put32(out, d.kslot);
    put64(out, std::bit_cast<std::uint64_t>(d.score));
    put64(out, d.hidden.size());
    for (double h : d.hidden) put64(out, std::bit_cast<std::uint64_t>(h));
  }
  return out;
}

std::vector<Delivery> decode(const std::vector<std::byte>& bytes) {
  std::vector<Delivery> out;
  std::size_t at = 0;
  while (at + kHeader <= bytes.size()) {
    const std::byte* p = bytes.data() + at;
    Delivery d;
    d.token_index = static_cast<std::int32_t>(get(p, 4));
    d.source = static_cast<std::int32_t>(get(p + 4, 4));
    d.expert = static_cast<std::int32_t>(get(p + 8, 4));
    d.kslot = static_cast<std::int32_t>(get(p + 12, 4));
    d.score = std::bit_cast<double>(get(p + 16, 8));
    const std::uint64_t dim = get(p + 24, 8);
    at += kHeader;
    if (at + dim * sizeof(double) > bytes.size()) break;
    d.hidden.resize(dim);
    for (std::uint64_t i = 0; i < dim; ++i) {
      d.hidden[i] = std::bit_cast<double>(get(bytes.data() + at + i * 8, 8));
    }
    at += dim * sizeof(double);
    out.push_back(std::move(d));
  }
  return out;
}

std::size_t payload_dim(const std::vector<TokenPayload>& tokens) {
  return tokens.empty() ? 0 : tokens.front().hidden.size();
}

}  // namespace

void GatingOutput::validate(std::size_t tokens, int num_experts) const {
  if (experts.size() != tokens || scores.size() != tokens) {
    throw ConfigError("gating must cover every token");
  }
  const std::size_t kk = experts.empty() ? 1 : experts.front().size();
  if (kk < 1) throw ConfigError("gating top-k must be >= 1");
  for (std::size_t t = 0; t < tokens; ++t) {
    if (experts[t].size() != kk || scores[t].size() != kk) {
      throw ConfigError("gating rows must all have k entries");
    }
    for (std::size_t j = 0; j < kk; ++j) {
      if (experts[t][j] < 0 || experts[t][j] >= num_experts) {
        throw ConfigError("gating expert id out of range");
      }
      if (!std::isfinite(scores[t][j])) throw ConfigError("gating score is not finite");
    }
  }
}

EpConfig EpConfig::uniform(int num_ranks, int experts_per_rank) {
  EpConfig c{num_ranks, experts_per_rank, {}};
  for (int r = 0; r < num_ranks; ++r) {
    for (int e = 0; e < experts_per_rank; ++e) c.rank_of_expert.push_back(r);
  }
  return c;
}

void EpConfig::validate() const {
  if (num_ranks < 1 || experts_per_rank < 1) throw ConfigError("EP config needs ranks and experts");
  if (rank_of_expert.size() != static_cast<std::size_t>(num_ranks) * experts_per_rank) {
    throw ConfigError("EP mapping must cover every physical expert slot");
  }
  std::vector<int> per_rank(num_ranks, 0);
  for (int r : rank_of_expert) {
    if (r < 0 || r >= num_ranks) throw ConfigError("EP mapping names an unknown rank");
    ++per_rank[r];
  }
  for (int n : per_rank) {
    if (n != experts_per_rank) throw ConfigError("EP mapping must give each rank its slots exactly once");
  }
}

std::string CollectiveSummary::to_json_line() const {
  nlohmann::json j{{"collective", collective},
                   {"participants", participants},
                   {"bytes", bytes},
                   {"t_start", t_start.count()},
                   {"t_end", t_end.count()},
                   {"straggler_node", straggler_node ? nlohmann::json(*straggler_node)
                                                     : nlohmann::json(nullptr)}};
  return j.dump();
}

TrampolineMap TrampolineMap::build(std::vector<NodeId> attention, std::vector<NodeId> experts) {
  const int a = static_cast<int>(attention.size());
  const int e = static_cast<int>(experts.size());
  if (a < 1) throw ConfigError("trampoline map needs at least one attention node");
  if (a > e) throw ConfigError("attention nodes must not outnumber expert nodes");
  TrampolineMap m;
  m.attention_nodes = std::move(attention);
  m.expert_nodes = std::move(experts);
  m.group_of.assign(e, -1);
  m.second_stage.resize(a);
  const int block = (e - a + a - 1) / a;
  for (int p = 0; p < a; ++p) {
    m.trampolines.push_back(p);
    m.group_of[p] = p;
  }
  for (int i = a; i < e; ++i) {
    const int p = (i - a) / block;
    m.second_stage[p].push_back(i);
    m.group_of[i] = p;
  }
  return m;
}

Collectives::Collectives(fabric::Fabric& fab, CollectiveOptions opts) : fab_(fab), opts_(opts) {}

int Collectives::wire_dim(std::size_t payload_dim) const {
  return opts_.wire_dim > 0 ? opts_.wire_dim : static_cast<int>(payload_dim);
}

SimTime Collectives::prep_time(const ExchangePlan& plan, std::size_t s) const {
  const auto& m = fab_.model();
  std::uint64_t out_entries = 0;
  std::size_t dim = 0;
  for (const auto& part : plan.outbox[s]) {
    out_entries += part.size();
    if (!part.empty()) dim = part.front().hidden.size();
  }
  const auto out_wire = static_cast<std::uint64_t>(
      static_cast<double>(out_entries) * wire_dim(dim) * plan.wire_bytes_per_value);
  SimTime t = m.local_copy_latency(plan.staged_bytes.empty() ? 0 : plan.staged_bytes[s],
                                   opts_.cores);
  if (!plan.quant_tokens.empty() && plan.quant_tokens[s] > 0) {
    t += from_us(opts_.quant_fixed_us + opts_.quant_per_token_us * plan.quant_tokens[s]);
  }
  return t + m.local_copy_latency(out_wire, opts_.cores);
}

SimTime Collectives::pull_time(const ExchangePlan& plan, std::uint64_t wire_bytes) const {
  const auto& m = fab_.model();
  if (wire_bytes == 0) return SimTime{0};
  if (plan.semantics == Semantics::dma) return m.dma_latency(wire_bytes);
  return m.mem_latency(wire_bytes, opts_.cores);
}

ExchangeOutcome Collectives::exchange(const ExchangePlan& plan) {
  const std::size_t ns = plan.senders.size();
  const std::size_t nr = plan.receivers.size();
  if (plan.outbox.size() != ns || plan.publish_to.size() != ns) {
    throw UsageError("exchange plan is inconsistent");
  }
  Engine& engine = fab_.engine();
  const auto& layout = fab_.layout();
  const std::uint64_t ev = next_event_++;
  const SimTime t0 = engine.now();

  ExchangeOutcome out;
  out.inbox.resize(nr);
  out.done.assign(nr, t0);
  out.ok.assign(nr, true);
  auto& sum = out.summary;
  sum.collective = plan.label;
  sum.t_start = t0;
  {
    std::set<int> dies;
    for (auto n : plan.senders) dies.insert(n.die);
    for (auto n : plan.receivers) dies.insert(n.die);
    sum.participants = static_cast<int>(dies.size());
  }

  std::vector<std::vector<int>> expect(nr);
  for (std::size_t s = 0; s < ns; ++s) {
    for (int r : plan.publish_to[s]) expect[r].push_back(static_cast<int>(s));
  }
  auto delay = [&](NodeId n) {
    auto it = opts_.start_delay.find(n.die);
    return it == opts_.start_delay.end() ? SimTime{0} : it->second;
  };
  auto ready = [&](const std::vector<SimTime>& v, std::size_t i) {
    return std::max(t0, v.empty() ? t0 : v[i]);
  };

  auto sender_down = [&](std::size_t s) {
    return opts_.failed.contains(plan.senders[s].die) || (!plan.silent.empty() && plan.silent[s]);
  };
  std::vector<SimTime> last_land(ns, SimTime::min());
  for (std::size_t s = 0; s < ns; ++s) {
    const NodeId node = plan.senders[s];
    if (sender_down(s)) continue;
    std::uint64_t packed = 0;
    for (std::size_t r = 0; r < nr; ++r) {
      for (const auto& d : plan.outbox[s][r]) {
        packed += encoded_size(d);
        sum.bytes += static_cast<std::uint64_t>(wire_dim(d.hidden.size()) *
                                                plan.wire_bytes_per_value);
      }
    }
    if (packed > layout.collective_bytes()) {
      throw ConfigError("collective outbox overflows the managed area");
    }
    sum.metadata_updates += plan.publish_to[s].size();
    const SimTime t_prep = ready(plan.sender_ready, s) + delay(node) + prep_time(plan, s);
    const auto& m = fab_.model();
    SimTime land = t_prep;
    for (std::size_t j = 0; j < plan.publish_to[s].size(); ++j) {
      land = t_prep + from_us(opts_.meta_issue_us * static_cast<double>(j)) + m.mem_startup();
    }
    last_land[s] = land;
    engine.schedule_at(t_prep, [this, &plan, s, node, ev, t_prep, &layout]() {
      const auto& m = fab_.model();
      Addr off = 0;
      for (std::size_t j = 0; j < plan.publish_to[s].size(); ++j) {
        const int r = plan.publish_to[s][j];
        const auto blob = encode(plan.outbox[s][r]);
        fab_.memory(node).write(layout.collective_base() + off, blob);
        const SimTime land =
            t_prep + from_us(opts_.meta_issue_us * static_cast<double>(j)) + m.mem_startup();
        const MetadataField f{ev, 0, off, plan.outbox[s][r].size()};
        fab_.write_metadata_at(land, node, plan.receivers[r],
                               layout.collective_field_index(static_cast<int>(s)), f);
        fab_.trace().record(land, node.die, "coll_publish", plan.receivers[r].die,
                            plan.outbox[s][r].size(), plan.label);
        off += blob.size();
      }
    });
  }

  for (std::size_t r = 0; r < nr; ++r) {
    const NodeId node = plan.receivers[r];
    if (opts_.failed.contains(node.die)) {
      out.ok[r] = false;
      continue;
    }
    const SimTime start = ready(plan.receiver_ready, r) + delay(node);
    engine.schedule_at(start, [this, &plan, &out, &expect, r, node, ev, start, &layout]() {
      const auto& exp = expect[r];
      auto on_ready = [this, &plan, &out, &exp, r, node, ev, start, &layout](
                          const fabric::PollResult& res) {
        if (!res.satisfied) {
          out.ok[r] = false;
          out.done[r] = res.at;
          std::string missing;
          int first_missing = -1;
          for (int s : exp) {
            if (fab_.read_metadata(node, layout.collective_field_index(s)).event_id == ev) continue;
            if (first_missing < 0) first_missing = plan.senders[s].die;
            missing += " " + std::to_string(plan.senders[s].die);
          }
          fab_.report_fault({res.at, node.die, first_missing, "straggler",
                             plan.label + " missing metadata from" + missing});
          return;
        }
        fab_.trace().record(res.at, node.die, "coll_pull", -1, 0, plan.label);
        std::uint64_t wire = 0;
        struct Pull {
          NodeId from;
          Addr addr;
          std::uint64_t len;
        };
        std::vector<Pull> pulls;
        for (int s : exp) {
          const auto f = fab_.read_metadata(node, layout.collective_field_index(s));
          if (f.reserved == 0) continue;
          std::uint64_t len = 0;
          for (const auto& d : plan.outbox[s][r]) {
            len += encoded_size(d);
            wire += static_cast<std::uint64_t>(wire_dim(d.hidden.size()) *
                                               plan.wire_bytes_per_value);
          }
          pulls.push_back({plan.senders[s], layout.collective_base() + f.tail_ptr, len});
        }
        const SimTime done = res.at + pull_time(plan, wire);
        Addr cursor = opts_.inbox_addr;
        for (const auto& p : pulls) {
          fab_.deliver_at(done, p.from, node, cursor, fab_.memory(p.from).extract(p.addr, p.len));
          cursor += p.len;
        }
        const std::uint64_t total = cursor - opts_.inbox_addr;
        fab_.engine().schedule_at(done, [this, &out, r, node, done, total, start]() {
          out.inbox[r] = decode(fab_.memory(node).read(opts_.inbox_addr, total));
          out.done[r] = done;
          out.summary.latency_us.push_back(to_us(done - start));
        });
      };
      if (exp.empty()) {
        out.done[r] = start;
        out.summary.latency_us.push_back(0.0);
        return;
      }
      const auto first = layout.collective_field_index(0);
      const std::uint64_t len = plan.senders.size() * MetadataField::kBytes;
      const std::vector<int> want = exp;
      fab_.poll(
          node, layout.field_addr(first), len,
          [want, ev](std::span<const std::byte> b) {
            for (int s : want) {
              const auto f = MetadataField::decode(b.subspan(s * MetadataField::kBytes));
              if (f.event_id != ev) return false;
            }
            return true;
          },
          opts_.timeout, opts_.cores, on_ready);
    });
  }

  engine.run();

  sum.t_end = t0;
  for (std::size_t r = 0; r < nr; ++r) {
    sum.t_end = std::max(sum.t_end, out.done[r]);
    if (!out.ok[r] && !opts_.failed.contains(plan.receivers[r].die)) {
      sum.stalled.push_back(plan.receivers[r].die);
    }
    if (!out.ok[r]) sum.complete = false;
  }
  for (std::size_t s = 0; s < ns; ++s) {
    if (sender_down(s) && !plan.publish_to[s].empty()) {
      sum.straggler_node = plan.senders[s].die;
      break;
    }
  }
  if (!sum.straggler_node) {
    SimTime worst = SimTime::min();
    for (std::size_t s = 0; s < ns; ++s) {
      if (!plan.publish_to[s].empty() && last_land[s] > worst) {
        worst = last_land[s];
        sum.straggler_node = plan.senders[s].die;
      }
    }
  }
  history_.push_back(sum);
  return out;
}

DispatchResult Collectives::dispatch(const std::vector<TokenPayload>& tokens,
                                     const GatingOutput& gating, const EpConfig& cfg,
                                     bool quantize, const std::vector<NodeId>& rank_nodes) {
  cfg.validate();
  gating.validate(tokens.size(), cfg.num_experts());
  if (rank_nodes.size() != static_cast<std::size_t>(cfg.num_ranks)) {
    throw ConfigError("dispatch needs one node per rank");
  }
  const std::size_t n = rank_nodes.size();
  ExchangePlan plan;
  plan.label = "dispatch";
  plan.senders = rank_nodes;
  plan.receivers = rank_nodes;
  plan.outbox.assign(n, std::vector<std::vector<Delivery>>(n));
  plan.publish_to.assign(n, {});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t r = 0; r < n; ++r) plan.publish_to[s].push_back(static_cast<int>(r));
  }
  plan.staged_bytes.assign(n, 0);
  plan.quant_tokens.assign(n, 0);
  plan.wire_bytes_per_value = quantize ? 1.0 : 2.0;
  const int dim = wire_dim(payload_dim(tokens));
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto& tok = tokens[t];
    if (tok.source < 0 || tok.source >= static_cast<int>(n)) {
      throw ConfigError("token source rank out of range");
    }
    plan.staged_bytes[tok.source] += static_cast<std::uint64_t>(dim) * 2;
    if (quantize) ++plan.quant_tokens[tok.source];
    for (int j = 0; j < gating.k(); ++j) {
      const int e = gating.experts[t][j];
      plan.outbox[tok.source][cfg.rank_of_expert[e]].push_back(
          Delivery{tok.token_index, tok.source, e, j, gating.scores[t][j], tok.hidden});
    }
  }
  auto res = exchange(plan);
  return DispatchResult{std::move(res.inbox), std::move(res.summary)};
}

CombineResult Collectives::combine(const std::vector<std::vector<Delivery>>& expert_outputs,
                                   const GatingOutput& gating,
                                   const std::vector<TokenPayload>& tokens, const EpConfig& cfg,
                                   const std::vector<NodeId>& rank_nodes) {
  cfg.validate();
  gating.validate(tokens.size(), cfg.num_experts());
  const std::size_t n = rank_nodes.size();
  if (expert_outputs.size() != n) throw ConfigError("combine needs outputs for every rank");
  ExchangePlan plan;
  plan.label = "combine";
  plan.senders = rank_nodes;
  plan.receivers = rank_nodes;
  plan.outbox.assign(n, std::vector<std::vector<Delivery>>(n));
  plan.publish_to.assign(n, {});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t r = 0; r < n; ++r) plan.publish_to[s].push_back(static_cast<int>(r));
  }
  plan.staged_bytes.assign(n, 0);
  plan.wire_bytes_per_value = 2.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (const auto& d : expert_outputs[s]) {
      if (d.source < 0 || d.source >= static_cast<int>(n)) {
        throw ConfigError("expert output names an unknown source rank");
      }
      plan.staged_bytes[s] += static_cast<std::uint64_t>(wire_dim(d.hidden.size())) * 2;
      plan.outbox[s][d.source].push_back(d);
    }
  }
  auto res = exchange(plan);

  std::map<int, std::size_t> pos;
  for (std::size_t t = 0; t < tokens.size(); ++t) pos[tokens[t].token_index] = t;
  CombineResult out;
  std::map<int, std::set<int>> seen;
  for (const auto& inbox : res.inbox) {
    for (const auto& d : inbox) {
      auto it = pos.find(d.token_index);
      if (it == pos.end() || d.kslot < 0 || d.kslot >= gating.k()) continue;
      const double w = gating.scores[it->second][d.kslot];
      auto& acc = out.output[d.token_index];
      if (acc.size() < d.hidden.size()) acc.resize(d.hidden.size(), 0.0);
      for (std::size_t i = 0; i < d.hidden.size(); ++i) acc[i] += w * d.hidden[i];
      seen[d.token_index].insert(d.kslot);
    }
  }
  for (const auto& tok : tokens) {
    if (seen[tok.token_index].size() != static_cast<std::size_t>(gating.k())) {
      out.incomplete.push_back(tok.token_index);
      out.output.erase(tok.token_index);
    }
  }
  if (!out.incomplete.empty()) {
    fab_.report_fault({fab_.engine().now(), -1, -1, "incomplete_combine",
                       std::to_string(out.incomplete.size()) + " tokens"});
  }
  out.summary = std::move(res.summary);
  return out;
}

A2eResult Collectives::a2e(const std::vector<TokenPayload>& tokens, const GatingOutput& gating,
                           const EpConfig& cfg, const TrampolineMap& tmap, bool quantize) {
  cfg.validate();
  gating.validate(tokens.size(), cfg.num_experts());
  const std::size_t na = tmap.attention_nodes.size();
  const std::size_t ne = tmap.expert_nodes.size();
  if (static_cast<std::size_t>(cfg.num_ranks) != ne) {
    throw ConfigError("a2e needs one EP rank per expert node");
  }
  const SimTime t0 = fab_.engine().now();
  const int dim = wire_dim(payload_dim(tokens));

  ExchangePlan s1;
  s1.label = "A2E";
  s1.senders = tmap.attention_nodes;
  for (int p : tmap.trampolines) s1.receivers.push_back(tmap.expert_nodes[p]);
  s1.outbox.assign(na, std::vector<std::vector<Delivery>>(na));
  s1.publish_to.assign(na, {});
  for (std::size_t a = 0; a < na; ++a) {
    for (std::size_t p = 0; p < na; ++p) s1.publish_to[a].push_back(static_cast<int>(p));
  }
  s1.staged_bytes.assign(na, 0);
  s1.quant_tokens.assign(na, 0);
  s1.wire_bytes_per_value = quantize ? 1.0 : 2.0;
  s1.semantics = Semantics::dma;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto& tok = tokens[t];
    if (tok.source < 0 || tok.source >= static_cast<int>(na)) {
      throw ConfigError("token source attention node out of range");
    }
    s1.staged_bytes[tok.source] += static_cast<std::uint64_t>(dim) * 2;
    if (quantize) ++s1.quant_tokens[tok.source];
    for (int j = 0; j < gating.k(); ++j) {
      const int e = gating.experts[t][j];
      const int node = cfg.rank_of_expert[e];
      s1.outbox[tok.source][tmap.group_of[node]].push_back(
          Delivery{tok.token_index, tok.source, e, j, gating.scores[t][j], tok.hidden});
    }
  }
  auto r1 = exchange(s1);

  A2eResult out;
  out.per_expert_node.resize(ne);
  out.stages.push_back(r1.summary);

  std::vector<int> rest;  // non-trampoline expert nodes, by index
  std::vector<int> rest_pos(ne, -1);
  for (std::size_t i = na; i < ne; ++i) {
    rest_pos[i] = static_cast<int>(rest.size());
    rest.push_back(static_cast<int>(i));
  }
  ExchangePlan s2;
  s2.label = "A2E'";
  for (int p : tmap.trampolines) s2.senders.push_back(tmap.expert_nodes[p]);
  for (int i : rest) s2.receivers.push_back(tmap.expert_nodes[i]);
  s2.outbox.assign(na, std::vector<std::vector<Delivery>>(rest.size()));
  s2.publish_to.assign(na, {});
  s2.sender_ready.assign(na, t0);
  s2.receiver_ready.assign(rest.size(), t0);
  s2.staged_bytes.assign(na, 0);
  s2.wire_bytes_per_value = s1.wire_bytes_per_value;
  s2.semantics = Semantics::dma;
  for (std::size_t p = 0; p < na; ++p) {
    const int self = tmap.trampolines[p];
    for (int i : tmap.second_stage[p]) s2.publish_to[p].push_back(rest_pos[i]);
    s2.sender_ready[p] = r1.done[p];
    for (auto& d : r1.inbox[p]) {
      const int node = cfg.rank_of_expert[d.expert];
      if (node == self) {
        out.per_expert_node[node].push_back(d);
      } else {
        s2.staged_bytes[p] += static_cast<std::uint64_t>(dim * s2.wire_bytes_per_value);
        s2.outbox[p][rest_pos[node]].push_back(d);
      }
    }
    s2.silent.push_back(!r1.ok[p]);
  }
  if (!rest.empty()) {
    auto r2 = exchange(s2);
    for (std::size_t j = 0; j < rest.size(); ++j) {
      out.per_expert_node[rest[j]] = std::move(r2.inbox[j]);
    }
    out.stages.push_back(r2.summary);
  }
  return out;
}

E2aResult Collectives::e2a(const std::vector<std::vector<Delivery>>& expert_outputs,
                           const GatingOutput& gating, const std::vector<TokenPayload>& tokens,
                           const TrampolineMap& tmap) {
  const std::size_t na = tmap.attention_nodes.size();
  const std::size_t ne = tmap.expert_nodes.size();
  if (expert_outputs.size() != ne) throw ConfigError("e2a needs outputs for every expert node");
  const SimTime t0 = fab_.engine().now();
  std::map<int, std::size_t> pos;
  for (std::size_t t = 0; t < tokens.size(); ++t) pos[tokens[t].token_index] = t;

  E2aResult out;
  // Stage 1: non-trampoline expert nodes gather their outputs to their trampoline.
  ExchangePlan s1;
  s1.label = "E2A";
  std::vector<int> rest;
  for (std::size_t i = na; i < ne; ++i) rest.push_back(static_cast<int>(i));
  for (int i : rest) s1.senders.push_back(tmap.expert_nodes[i]);
  for (int p : tmap.trampolines) s1.receivers.push_back(tmap.expert_nodes[p]);
  s1.outbox.assign(rest.size(), std::vector<std::vector<Delivery>>(na));
  s1.publish_to.assign(rest.size(), {});
  s1.staged_bytes.assign(rest.size(), 0);
  s1.wire_bytes_per_value = 2.0;
  s1.semantics = Semantics::dma;
  for (std::size_t j = 0; j < rest.size(); ++j) {
    const int p = tmap.group_of[rest[j]];
    s1.publish_to[j].push_back(p);
    for (const auto& d : expert_outputs[rest[j]]) {
      s1.staged_bytes[j] += static_cast<std::uint64_t>(wire_dim(d.hidden.size())) * 2;
      s1.outbox[j][p].push_back(d);
    }
  }
  std::vector<SimTime> tramp_ready(na, t0);
  std::vector<std::vector<Delivery>> gathered(na);
  std::vector<bool> tramp_ok(na, true);
  if (!rest.empty()) {
    auto r1 = exchange(s1);
    out.stages.push_back(r1.summary);
    for (std::size_t p = 0; p < na; ++p) {
      tramp_ready[p] = r1.done[p];
      tramp_ok[p] = r1.ok[p];
      gathered[p] = std::move(r1.inbox[p]);
    }
  }

  // Trampolines reduce what they hold; kslot of a partial counts its terms.
  ExchangePlan s2;
  s2.label = "E2A'";
  for (int p : tmap.trampolines) s2.senders.push_back(tmap.expert_nodes[p]);
  s2.receivers = tmap.attention_nodes;
  s2.outbox.assign(na, std::vector<std::vector<Delivery>>(na));
  s2.publish_to.assign(na, {});
  s2.sender_ready = tramp_ready;
  s2.staged_bytes.assign(na, 0);
  s2.wire_bytes_per_value = 2.0;
  s2.semantics = Semantics::dma;
  for (std::size_t p = 0; p < na; ++p) {
    for (std::size_t a = 0; a < na; ++a) s2.publish_to[p].push_back(static_cast<int>(a));
    s2.silent.push_back(!tramp_ok[p]);
    if (!tramp_ok[p]) continue;
    std::map<std::pair<int, int>, Delivery> partial;
    auto fold = [&](const Delivery& d) {
      auto it = pos.find(d.token_index);
      if (it == pos.end() || d.kslot < 0 || d.kslot >= gating.k()) return;
      const double w = gating.scores[it->second][d.kslot];
      auto& acc = partial[{d.token_index, d.source}];
      acc.token_index = d.token_index;
      acc.source = d.source;
      acc.expert = -1;
      acc.score = 1.0;
      acc.kslot = acc.hidden.empty() && acc.kslot < 0 ? 0 : acc.kslot;
      if (acc.hidden.size() < d.hidden.size()) acc.hidden.resize(d.hidden.size(), 0.0);
      for (std::size_t i = 0; i < d.hidden.size(); ++i) acc.hidden[i] += w * d.hidden[i];
      acc.kslot = std::max(acc.kslot, 0) + 1;
    };
    for (const auto& d : expert_outputs[tmap.trampolines[p]]) fold(d);
    for (const auto& d : gathered[p]) fold(d);
    for (auto& [key, d] : partial) {
      if (d.source < 0 || d.source >= static_cast<int>(na)) continue;
      s2.staged_bytes[p] += static_cast<std::uint64_t>(wire_dim(d.hidden.size())) * 2;
      s2.outbox[p][d.source].push_back(std::move(d));
    }
  }
  auto r2 = exchange(s2);
  out.stages.push_back(r2.summary);

  std::map<int, int> terms;
  for (const auto& inbox : r2.inbox) {
    for (const auto& d : inbox) {
      auto& acc = out.output[d.token_index];
      if (acc.size() < d.hidden.size()) acc.resize(d.hidden.size(), 0.0);
      for (std::size_t i = 0; i < d.hidden.size(); ++i) acc[i] += d.hidden[i];
      terms[d.token_index] += d.kslot;
    }
  }
  for (const auto& tok : tokens) {
    if (terms[tok.token_index] != gating.k()) {
      out.incomplete.push_back(tok.token_index);
      out.output.erase(tok.token_index);
    }
  }
  return out;
}

std::vector<std::vector<std::pair<int, int>>> dense_routing(const std::vector<TokenPayload>& tokens,
                                                            const GatingOutput& gating,
                                                            const EpConfig& cfg) {
  std::vector<std::vector<std::pair<int, int>>> out(cfg.num_ranks);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    for (int e : gating.experts[t]) {
      out[cfg.rank_of_expert[e]].emplace_back(tokens[t].token_index, e);
    }
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

namespace {

double local_us(const fabric::LatencyModel& m, double bytes, int cores) {
  return bytes / (m.mem_rate(cores) * m.local_copy_factor) / 1e3;
}

}  // namespace

double CollectiveCostModel::dispatch_us(int tokens, bool quantize) const {
  const double w = quantize ? 1.0 : 2.0;
  const double entries = static_cast<double>(tokens) * k;
  const double staged = static_cast<double>(tokens) * hidden * 2.0;
  const double wire = entries * hidden * w;
  double t = local_us(latency, staged, opts.cores);
  if (quantize) t += opts.quant_fixed_us + opts.quant_per_token_us * tokens;
  t += local_us(latency, wire, opts.cores);
  t += opts.meta_issue_us * (ranks - 1) + latency.mem_startup_us;
  t += latency.poll_interval_us / 2.0;
  t += latency.mem_startup_us + wire / latency.mem_rate(opts.cores) / 1e3;
  return t;
}

double CollectiveCostModel::combine_us(int tokens) const {
  const double entries = static_cast<double>(tokens) * k;
  const double wire = entries * hidden * 2.0;
  double t = local_us(latency, wire, opts.cores);
  t += local_us(latency, wire, opts.cores);
  t += opts.meta_issue_us * (ranks - 1) + latency.mem_startup_us;
  t += latency.poll_interval_us / 2.0;
  t += latency.mem_startup_us + wire / latency.mem_rate(opts.cores) / 1e3;
  return t;
}

std::optional<int> CollectiveCostModel::dispatch_crossover(int max_tokens) const {
  for (int n = 1; n <= max_tokens; ++n) {
    if (dispatch_us(n, true) < combine_us(n)) return n;
  }
  return std::nullopt;
}

CollectiveOptions default_ep_options() {
  CollectiveOptions o;
  o.cores = 48;
  o.quant_fixed_us = 10.466;
  o.quant_per_token_us = 0;
  o.meta_issue_us = 0.787;
  return o;
}

MaCollectiveTimes measure_ma_collectives(int attention, int experts, int batch, int k,
                                         int hidden, const CollectiveOptions& opts) {
  if (attention < 1 || experts < attention || batch < 0 || k < 1 || k > experts) {
    throw ConfigError("invalid attention/expert layout");
  }
  const int dies = attention + experts;
  Engine engine;
  fabric::Fabric fab(engine, fabric::build_topology((dies + 1) / 2, 2, 48),
                     fabric::LatencyModel{});
  fab.trace().set_enabled(false);
  CollectiveOptions o = opts;
  o.wire_dim = hidden;
  Collectives coll(fab, o);

  std::vector<NodeId> att;
  std::vector<NodeId> exp;
  for (int i = 0; i < attention; ++i) att.push_back(NodeId{i});
  for (int i = 0; i < experts; ++i) exp.push_back(NodeId{attention + i});
  const auto tmap = TrampolineMap::build(att, exp);
  const EpConfig cfg = EpConfig::uniform(experts, 1);

  std::vector<TokenPayload> tokens;
  GatingOutput gating;
  const int stride = std::max(1, experts / k);
  for (int a = 0; a < attention; ++a) {
    for (int b = 0; b < batch; ++b) {
      const int t = a * batch + b;
      tokens.push_back(TokenPayload{t, a, {}});
      std::vector<int> ids;
      for (int j = 0; j < k; ++j) ids.push_back((t + j * stride) % experts);
      gating.experts.push_back(ids);
      gating.scores.push_back(std::vector<double>(k, 1.0 / k));
    }
  }

  MaCollectiveTimes out;
  const SimTime t0 = engine.now();
  auto sent = coll.a2e(tokens, gating, cfg, tmap, true);
  SimTime t1 = t0;
  for (const auto& st : sent.stages) t1 = std::max(t1, st.t_end);
  out.a2e_us = to_us(t1 - t0);
  out.stage1_metadata_updates = sent.stages.front().metadata_updates;

  engine.run_until(t1);
  auto back = coll.e2a(sent.per_expert_node, gating, tokens, tmap);
  SimTime t2 = t1;
  for (const auto& st : back.stages) t2 = std::max(t2, st.t_end);
  out.e2a_us = to_us(t2 - t1);
  return out;
}

}  // namespace podsim::xccl
