// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/reliability/reliability.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "podsim/core/engine.hpp"
#include "podsim/core/error.hpp"
#include "podsim/fabric/fabric.hpp"
#include "podsim/xccl/p2p.hpp"

namespace podsim::reliability {

const char* fault_name(FaultKind k) {
  switch (k) {
    case FaultKind::crash: return "crash";
    case FaultKind::stuck_loop: return "stuck_loop";
    case FaultKind::kv_stall: return "kv_stall";
    case FaultKind::net_transient: return "net_transient";
    case FaultKind::mem_fault: return "mem_fault";
  }
  return "?";
}

FaultKind parse_fault_kind(const std::string& s) {
  for (auto k : {FaultKind::crash, FaultKind::stuck_loop, FaultKind::kv_stall,
                 FaultKind::net_transient, FaultKind::mem_fault}) {
    if (s == fault_name(k)) return k;
  }
  throw ConfigError("unknown fault kind '" + s + "'");
}

nlohmann::json FaultEvent::to_json() const {
  nlohmann::json j = {{"kind", fault_name(kind)}, {"location", location}, {"inject_ms", inject_ms}};
  if (kind == FaultKind::mem_fault) j["blocks"] = {block_begin, block_end};
  return j;
}

FaultEvent FaultEvent::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("fault event must be an object");
  FaultEvent e;
  try {
    e.kind = parse_fault_kind(j.at("kind").get<std::string>());
    e.location = j.at("location").get<std::string>();
    e.inject_ms = j.at("inject_ms").get<double>();
    if (j.contains("blocks")) {
      const auto& b = j.at("blocks");
      if (!b.is_array() || b.size() != 2) throw ConfigError("blocks must be [begin, end]");
      e.block_begin = b[0].get<std::uint64_t>();
      e.block_end = b[1].get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("fault event: ") + ex.what());
  }
  if (e.inject_ms < 0) throw ConfigError("fault inject_ms must be >= 0");
  if (e.kind == FaultKind::mem_fault && e.block_end <= e.block_begin) {
    throw ConfigError("mem_fault needs a non-empty block range");
  }
  parse_actor(e.location);
  return e;
}

std::vector<FaultEvent> read_fault_schedule(std::istream& in) {
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& ex) {
    std::size_t line = 1;
    std::size_t col = 1;
    for (std::size_t i = 0; i + 1 < ex.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("fault schedule line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": invalid JSON");
  }
  if (!j.is_array()) throw ConfigError("fault schedule must be a JSON list");
  std::vector<FaultEvent> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      out.push_back(FaultEvent::from_json(j[i]));
    } catch (const ConfigError& ex) {
      throw ConfigError("fault " + std::to_string(i) + ": " + ex.what());
    }
  }
  return out;
}

std::vector<FaultEvent> read_fault_schedule_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open fault schedule " + path);
  return read_fault_schedule(in);
}

ActorRef parse_actor(const std::string& id) {
  const auto colon = id.find(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("bad actor id '" + id + "'");
  ActorRef a;
  a.type = id.substr(0, colon);
  const std::string rest = id.substr(colon + 1);
  try {
    std::size_t used = 0;
    a.index = std::stoi(rest, &used);
    if (a.type == "link") {
      if (used >= rest.size() || rest[used] != '-') throw ConfigError("link id needs a-b");
      std::size_t used2 = 0;
      a.peer = std::stoi(rest.substr(used + 1), &used2);
      used += 1 + used2;
    }
    if (used != rest.size() || a.index < 0) throw ConfigError("bad actor id '" + id + "'");
  } catch (const std::logic_error&) {
    throw ConfigError("bad actor id '" + id + "'");
  }
  return a;
}

// ---- heartbeats ----

void HeartbeatConfig::validate() const {
  if (!(control_to_te_ms > 0) || !(te_to_dp_ms > 0)) throw ConfigError("heartbeat intervals must be > 0");
  if (miss_threshold < 1) throw ConfigError("miss threshold must be >= 1");
}

namespace {

// Earliest time the actor stops answering; nullopt while it stays healthy.
std::optional<SimTime> down_at(const std::vector<FaultEvent>& faults, const std::string& actor) {
  std::optional<SimTime> t;
  for (const auto& f : faults) {
    if (f.location != actor) continue;
    if (f.kind != FaultKind::crash && f.kind != FaultKind::stuck_loop) continue;
    const SimTime at = from_ms(f.inject_ms);
    if (!t || at < *t) t = at;
  }
  return t;
}

class HeartbeatSim {
 public:
  HeartbeatSim(const HeartbeatConfig& cfg, const HeartbeatTopology& topo,
               const std::vector<FaultEvent>& faults, SimTime horizon)
      : cfg_(cfg), topo_(topo), horizon_(horizon) {
    for (int t = 0; t < topo.tes; ++t) te_down_.push_back(down_at(faults, "te:" + std::to_string(t)));
    for (int d = 0; d < topo.tes * topo.dps_per_te; ++d) {
      dp_down_.push_back(down_at(faults, "dp:" + std::to_string(d)));
    }
    te_miss_.assign(topo.tes, 0);
    dp_miss_.assign(dp_down_.size(), 0);
  }

  std::vector<Detection> run() {
    for (int t = 0; t < topo_.tes; ++t) schedule_te(t, from_ms(cfg_.control_to_te_ms));
    for (int d = 0; d < static_cast<int>(dp_down_.size()); ++d) schedule_dp(d, from_ms(cfg_.te_to_dp_ms));
    engine_.run();
    std::stable_sort(out_.begin(), out_.end(),
                     [](const Detection& a, const Detection& b) { return a.at < b.at; });
    return out_;
  }

 private:
  static bool alive(const std::optional<SimTime>& down, SimTime now) { return !down || now < *down; }

  void schedule_te(int t, SimTime at) {
    if (at > horizon_) return;
    engine_.schedule_at(at, [this, t] {
      if (alive(te_down_[t], engine_.now())) {
        te_miss_[t] = 0;
      } else if (++te_miss_[t] == cfg_.miss_threshold) {
        out_.push_back({engine_.now(), "control", "te:" + std::to_string(t), te_miss_[t]});
        return;
      }
      schedule_te(t, engine_.now() + from_ms(cfg_.control_to_te_ms));
    });
  }

  void schedule_dp(int d, SimTime at) {
    if (at > horizon_) return;
    engine_.schedule_at(at, [this, d] {
      const int te = d / topo_.dps_per_te;
      // A dead TE stops probing; the control tier reports it instead.
      if (!alive(te_down_[te], engine_.now())) return;
      if (alive(dp_down_[d], engine_.now())) {
        dp_miss_[d] = 0;
      } else if (++dp_miss_[d] == cfg_.miss_threshold) {
        out_.push_back({engine_.now(), "te", "dp:" + std::to_string(d), dp_miss_[d]});
        return;
      }
      schedule_dp(d, engine_.now() + from_ms(cfg_.te_to_dp_ms));
    });
  }

  const HeartbeatConfig& cfg_;
  const HeartbeatTopology& topo_;
  SimTime horizon_;
  Engine engine_;
  std::vector<std::optional<SimTime>> te_down_;
  std::vector<std::optional<SimTime>> dp_down_;
  std::vector<int> te_miss_;
  std::vector<int> dp_miss_;
  std::vector<Detection> out_;
};

}  // namespace

std::vector<Detection> heartbeat_monitor(const HeartbeatConfig& cfg, const HeartbeatTopology& topo,
                                         const std::vector<FaultEvent>& faults, SimTime horizon) {
  cfg.validate();
  if (topo.tes < 1 || topo.dps_per_te < 1) throw ConfigError("heartbeat topology needs actors");
  return HeartbeatSim(cfg, topo, faults, horizon).run();
}

// ---- link probing ----

const char* health_name(LinkHealth h) {
  switch (h) {
    case LinkHealth::healthy: return "healthy";
    case LinkHealth::decode_saturation: return "decode_saturation";
    case LinkHealth::link_fault: return "link_fault";
  }
  return "?";
}

void ProbeConfig::validate() const {
  if (!(slow_threshold_us > 0) || !(timeout_us > slow_threshold_us)) {
    throw ConfigError("probe needs 0 < slow threshold < timeout");
  }
  if (dummy_bytes < 1) throw ConfigError("dummy payload must be non-empty");
}

ProbeResult link_probe(const LinkScenario& s, const ProbeConfig& cfg) {
  cfg.validate();
  if (s.cores < 1 || s.cores > 48 || s.receiver_delay_us < 0) throw ConfigError("invalid link scenario");
  Engine engine;
  fabric::Fabric fab(engine, fabric::build_topology(1, 2, 48), fabric::LatencyModel{});
  fab.trace().set_enabled(false);
  xccl::P2p p2p(fab, xccl::P2pOptions{from_us(cfg.timeout_us), 0});
  const fabric::NodeId prefill{0};
  const fabric::NodeId decode{1};
  auto& chan = p2p.channel(prefill, decode);
  if (s.cut_at_us) {
    if (*s.cut_at_us <= 0) {
      fab.set_link(prefill, decode, false);
    } else {
      engine.schedule_at(from_us(*s.cut_at_us), [&fab, prefill, decode] { fab.set_link(prefill, decode, false); });
    }
  }
  std::vector<std::byte> dummy(cfg.dummy_bytes, std::byte{0x5A});
  fab.memory(prefill).write(0, dummy);
  xccl::TransferRequest req;
  req.event_id = 1;
  req.payload_len = cfg.dummy_bytes;
  req.cores = s.cores;
  req.mode = xccl::Mode::async;
  const auto send = p2p.send_async(chan, req, 0);
  std::optional<xccl::Handle> recv;
  engine.schedule_at(from_us(s.receiver_delay_us), [&] { recv = p2p.receive_async(chan, req, 0); });
  engine.run();

  ProbeResult r;
  const auto st = p2p.poll_completion(send);
  r.delivered = st == xccl::Status::complete &&
                fab.memory(decode).read(0, cfg.dummy_bytes) == dummy;
  if (!r.delivered) {
    r.health = LinkHealth::link_fault;
    return r;
  }
  r.latency_us = to_us(p2p.info(send).completed);
  r.health = r.latency_us > cfg.slow_threshold_us ? LinkHealth::decode_saturation : LinkHealth::healthy;
  return r;
}

std::vector<LabeledScenario> generate_link_scenarios(int n, std::uint64_t seed, const ProbeConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> kind(0, 3);
  std::uniform_int_distribution<int> cores(1, 48);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double thr = cfg.slow_threshold_us;
  const double tmo = cfg.timeout_us;
  std::vector<LabeledScenario> out;
  for (int i = 0; i < n; ++i) {
    LabeledScenario l;
    l.scenario.cores = cores(rng);
    switch (kind(rng)) {
      case 0:  // healthy: decode answers promptly
        l.scenario.kv_stalled = u(rng) < 0.5;
        l.scenario.receiver_delay_us = u(rng) * 0.3 * thr;
        l.truth = LinkHealth::healthy;
        break;
      case 1:  // decode saturated: the probe waits behind full KV
        l.scenario.receiver_delay_us = 2 * thr + u(rng) * (0.6 * tmo - 2 * thr);
        l.truth = LinkHealth::decode_saturation;
        break;
      case 2:  // link already cut
        l.scenario.receiver_delay_us = u(rng) * 0.6 * tmo;
        l.scenario.cut_at_us = -u(rng) * 50.0;
        l.truth = LinkHealth::link_fault;
        break;
      default:  // cut long after the probe finished
        l.scenario.receiver_delay_us = u(rng) * 0.3 * thr;
        l.scenario.cut_at_us = 2 * tmo + u(rng) * tmo;
        l.truth = LinkHealth::healthy;
        break;
    }
    out.push_back(l);
  }
  return out;
}

// ---- recovery ----

const char* stage_name(RecoveryStage s) {
  switch (s) {
    case RecoveryStage::fine_grained: return "fine_grained";
    case RecoveryStage::pd_failover: return "pd_failover";
    case RecoveryStage::restart_world: return "restart_world";
  }
  return "?";
}

void RecoveryPolicy::validate() const {
  if (min_replicas_per_expert < 1) throw ConfigError("min replicas per expert must be >= 1");
}

ExpertLayout ExpertLayout::build(int experts, int nodes, int slots_per_node, int redundant) {
  if (experts < 1 || nodes < 1 || slots_per_node < 1 || redundant < 0) {
    throw ConfigError("invalid expert layout");
  }
  if (experts + redundant > nodes * slots_per_node) throw ConfigError("expert layout needs more slots");
  ExpertLayout l;
  l.experts = experts;
  l.slots.assign(nodes, std::vector<int>(slots_per_node, -1));
  auto place = [&](int e, int start, int avoid) {
    for (int k = 0; k < nodes; ++k) {
      const int n = (start + k) % nodes;
      if (n == avoid) continue;
      for (auto& s : l.slots[n]) {
        if (s < 0) {
          s = e;
          return;
        }
      }
    }
    throw ConfigError("expert layout needs more slots");
  };
  for (int e = 0; e < experts; ++e) place(e, e % nodes, -1);
  for (int r = 0; r < redundant; ++r) {
    const int e = r % experts;
    place(e, (e % nodes + nodes / 2) % nodes, nodes > 1 ? e % nodes : -1);
  }
  return l;
}

std::vector<int> ExpertLayout::replicas(const std::vector<bool>& dead) const {
  std::vector<int> c(experts, 0);
  for (std::size_t n = 0; n < slots.size(); ++n) {
    if (n < dead.size() && dead[n]) continue;
    for (int e : slots[n]) {
      if (e >= 0) ++c[e];
    }
  }
  return c;
}

int ExpertLayout::min_replicas(const std::vector<bool>& dead) const {
  const auto c = replicas(dead);
  return c.empty() ? 0 : *std::min_element(c.begin(), c.end());
}

Cluster Cluster::decode_default() {
  Cluster c;
  c.layout = ExpertLayout::build(288, 160, 2, 32);
  c.dead.assign(160, false);
  return c;
}

std::string RecoveryRecord::to_json_line() const {
  return nlohmann::json{{"time", to_ms(time)},
                        {"event", event},
                        {"action", action},
                        {"stage", stage_name(stage)},
                        {"affected", affected}}
      .dump();
}

bool vertical_scale(Cluster& c, int node, int min_replicas) {
  if (node < 0 || node >= static_cast<int>(c.layout.slots.size())) {
    throw ConfigError("decode node " + std::to_string(node) + " out of range");
  }
  Cluster next = c;
  next.dead.resize(next.layout.slots.size(), false);
  next.dead[node] = true;
  std::fill(next.layout.slots[node].begin(), next.layout.slots[node].end(), -1);
  auto counts = next.layout.replicas(next.dead);
  for (int e = 0; e < next.layout.experts; ++e) {
    while (counts[e] < min_replicas) {
      int* target = nullptr;
      for (std::size_t n = 0; n < next.layout.slots.size() && !target; ++n) {
        if (next.dead[n]) continue;
        for (auto& s : next.layout.slots[n]) {
          if (s < 0) {
            target = &s;
            break;
          }
        }
      }
      if (!target) {
        int donor = -1;
        for (int d = 0; d < next.layout.experts; ++d) {
          if (counts[d] > min_replicas && (donor < 0 || counts[d] > counts[donor])) donor = d;
        }
        if (donor < 0) return false;
        for (std::size_t n = next.layout.slots.size(); n-- > 0 && !target;) {
          if (next.dead[n]) continue;
          for (auto& s : next.layout.slots[n]) {
            if (s == donor) {
              target = &s;
              break;
            }
          }
        }
        --counts[donor];
      }
      *target = e;
      ++counts[e];
    }
  }
  next.decode_dp_groups -= 1;
  next.ep_ranks -= 1;
  c = std::move(next);
  return true;
}

namespace {

class Recovery {
 public:
  Recovery(const FaultEvent& ev, const RecoveryPolicy& p, Cluster& c, const RecoveryCosts& costs)
      : ev_(ev), policy_(p), c_(c), costs_(costs), at_(from_ms(ev.inject_ms)),
        name_(std::string(fault_name(ev.kind)) + "@" + ev.location) {}

  RecoveryOutcome run() {
    RecoveryStage s = policy_.stage;
    for (;;) {
      bool ok = false;
      switch (s) {
        case RecoveryStage::fine_grained: ok = fine_grained(); break;
        case RecoveryStage::pd_failover: ok = pd_failover(); break;
        case RecoveryStage::restart_world: ok = restart_world(); break;
      }
      if (ok) break;
      const auto next = static_cast<RecoveryStage>(static_cast<int>(s) + 1);
      add(s, "escalate", {stage_name(next)});
      out_.escalated = true;
      s = next;
    }
    out_.final_stage = s;
    return out_;
  }

 private:
  void add(RecoveryStage s, std::string action, std::vector<std::string> affected, SimTime dt = SimTime{0}) {
    out_.trace.push_back({at_ + dt, name_, std::move(action), s, std::move(affected)});
  }

  bool fine_grained() {
    const auto st = RecoveryStage::fine_grained;
    if (ev_.kind == FaultKind::net_transient) {
      add(st, "broadcast_rollback", {"dp:*"});
      add(st, "reexecute_iteration", {"dp:*"}, from_ms(costs_.rollback_signal_ms));
      return true;
    }
    if (ev_.kind == FaultKind::mem_fault) {
      add(st, "mask_region",
          {ev_.location, "blocks:" + std::to_string(ev_.block_begin) + "-" + std::to_string(ev_.block_end)});
      add(st, "fail_affected_requests", {ev_.location}, from_ms(costs_.mask_ms));
      return true;
    }
    return false;
  }

  bool pd_failover() {
    const auto st = RecoveryStage::pd_failover;
    const auto actor = parse_actor(ev_.location);
    if (actor.type == "prefill") {
      add(st, "restart_prefill_te", {ev_.location});
      add(st, "prefill_ready", {ev_.location}, from_ms(costs_.te_restart_ms));
      out_.prefill_ready = at_ + from_ms(costs_.te_restart_ms);
      return true;
    }
    if (actor.type != "decode") return false;
    if (actor.index >= static_cast<int>(c_.layout.slots.size())) {
      throw ConfigError("decode node " + std::to_string(actor.index) + " out of range");
    }
    if (policy_.kill_p_to_preserve_d && c_.prefill_tes >= 2) {
      --c_.prefill_tes;
      const std::string victim = "prefill:" + std::to_string(c_.prefill_tes);
      add(st, "kill_prefill_te", {victim});
      add(st, "reassign_die", {victim, ev_.location});
      add(st, "reload_experts", {ev_.location}, from_ms(costs_.expert_reload_ms));
      out_.decode_ready = at_ + from_ms(costs_.expert_reload_ms);
      return true;
    }
    const auto before = c_.layout.slots[actor.index];
    if (!vertical_scale(c_, actor.index, policy_.min_replicas_per_expert)) return false;
    std::vector<std::string> moved;
    for (int e : before) {
      if (e >= 0) moved.push_back("expert:" + std::to_string(e));
    }
    add(st, "vertical_scale", {ev_.location, "dp_groups:" + std::to_string(c_.decode_dp_groups),
                               "ep_ranks:" + std::to_string(c_.ep_ranks)});
    add(st, "reload_experts", moved, from_ms(costs_.expert_reload_ms));
    out_.decode_ready = at_ + from_ms(costs_.expert_reload_ms);
    return true;
  }

  bool restart_world() {
    const auto st = RecoveryStage::restart_world;
    add(st, "stop_all", {"*"});
    const SimTime d = from_ms(costs_.te_restart_ms);
    add(st, "restart_decode", {"decode:*"});
    add(st, "decode_ready", {"decode:*"}, d);
    add(st, "restart_prefill", {"prefill:*"}, d);
    add(st, "prefill_ready", {"prefill:*"}, d + d);
    out_.decode_ready = at_ + d;
    out_.prefill_ready = at_ + d + d;
    std::fill(c_.dead.begin(), c_.dead.end(), false);
    return true;
  }

  const FaultEvent& ev_;
  const RecoveryPolicy& policy_;
  Cluster& c_;
  const RecoveryCosts& costs_;
  SimTime at_;
  std::string name_;
  RecoveryOutcome out_;
};

}  // namespace

RecoveryOutcome recover(const FaultEvent& ev, const RecoveryPolicy& policy, Cluster& cluster,
                        const RecoveryCosts& costs) {
  policy.validate();
  parse_actor(ev.location);
  return Recovery(ev, policy, cluster, costs).run();
}

// ---- token recomputation ----

void DecodeRunConfig::validate() const {
  if (groups < 1 || requests_per_group < 1 || iterations < 0) throw ConfigError("invalid decode run size");
  if (!(iteration_ms > 0) || blocks_per_request < 1 || vocab < 2) throw ConfigError("invalid decode run model");
  if (detect_ms < 0 || costs.rollback_signal_ms < 0 || costs.mask_ms < 0) {
    throw ConfigError("recovery latencies must be >= 0");
  }
  mtp.validate();
}

namespace {

struct ReqState {
  std::mt19937_64 rng;
  std::vector<int> tokens;
  bool alive = true;
};

void emit(ReqState& r, const pipeline::MtpConfig& mtp, int vocab) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  int n = 1;
  for (int i = 0; i < mtp.num_mtp_layers; ++i) {
    if (u(r.rng) >= mtp.rate(i)) break;
    ++n;
  }
  for (int i = 0; i < n; ++i) r.tokens.push_back(tok(r.rng));
}

}  // namespace

DecodeRun run_decode(const DecodeRunConfig& cfg, const std::vector<FaultEvent>& faults) {
  cfg.validate();
  const int per = cfg.requests_per_group;
  const int total = cfg.groups * per;
  std::vector<ReqState> st(total);
  for (int i = 0; i < total; ++i) st[i].rng.seed(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(i));

  std::vector<FaultEvent> pending;
  for (const auto& f : faults) {
    if (f.kind != FaultKind::net_transient && f.kind != FaultKind::mem_fault) {
      throw ConfigError(std::string("decode run handles net_transient and mem_fault, got ") + fault_name(f.kind));
    }
    if (f.kind == FaultKind::mem_fault) {
      const auto a = parse_actor(f.location);
      if (a.type != "decode" || a.index >= cfg.groups) throw ConfigError("mem_fault must target decode:<group>");
    }
    pending.push_back(f);
  }
  std::stable_sort(pending.begin(), pending.end(),
                   [](const FaultEvent& a, const FaultEvent& b) { return a.inject_ms < b.inject_ms; });
  std::size_t next_fault = 0;

  DecodeRun out;
  out.finish_ms.assign(total, NAN);
  const double step = cfg.iteration_ms / per;
  double t = 0;
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto snapshot = st;
    double start = t;
    for (;;) {
      double shift = 0;
      bool rolled_back = false;
      for (int j = 0; j < per && !rolled_back; ++j) {
        const double done = start + (j + 1) * step;
        // Faults landing before this slot completes act first.
        while (next_fault < pending.size() && pending[next_fault].inject_ms < done + shift) {
          const auto& f = pending[next_fault++];
          RecoveryRecord rec;
          rec.time = from_ms(f.inject_ms);
          rec.event = std::string(fault_name(f.kind)) + "@" + f.location;
          rec.stage = RecoveryStage::fine_grained;
          if (f.kind == FaultKind::net_transient) {
            st = snapshot;
            for (int id : out.failed) st[id].alive = false;
            rec.action = "broadcast_rollback";
            rec.affected = {"iteration:" + std::to_string(it)};
            out.trace.push_back(rec);
            start = f.inject_ms + cfg.detect_ms + cfg.costs.rollback_signal_ms;
            rec.time = from_ms(start);
            rec.action = "reexecute_iteration";
            out.trace.push_back(rec);
            ++out.reexecuted_iterations;
            rolled_back = true;
            break;
          }
          const int g = parse_actor(f.location).index;
          rec.action = "mask_region";
          for (int k = 0; k < per; ++k) {
            const auto lo = static_cast<std::uint64_t>(k) * cfg.blocks_per_request;
            const auto hi = lo + cfg.blocks_per_request;
            const int id = g * per + k;
            if (lo < f.block_end && f.block_begin < hi && st[id].alive) {
              st[id].alive = false;
              out.failed.push_back(id);
              rec.affected.push_back("request:" + std::to_string(id));
            }
          }
          out.trace.push_back(rec);
          shift += cfg.costs.mask_ms;
        }
        if (rolled_back) break;
        for (int g = 0; g < cfg.groups; ++g) {
          auto& r = st[g * per + j];
          if (!r.alive) continue;
          emit(r, cfg.mtp, cfg.vocab);
          if (it == cfg.iterations - 1) out.finish_ms[g * per + j] = done + shift;
        }
      }
      if (!rolled_back) {
        t = start + cfg.iteration_ms + shift;
        break;
      }
    }
  }
  for (int id : out.failed) out.finish_ms[id] = NAN;
  std::sort(out.failed.begin(), out.failed.end());
  out.makespan_ms = t;
  for (auto& r : st) out.streams.push_back(std::move(r.tokens));
  return out;
}

}  // namespace podsim::reliability
