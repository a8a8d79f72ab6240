// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/pipeline/pd.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <random>
#include <set>

#include "podsim/core/engine.hpp"
#include "podsim/core/error.hpp"
#include "podsim/fabric/fabric.hpp"
#include "podsim/xccl/p2p.hpp"

namespace podsim::pipeline {

const char* state_name(RequestState s) {
  switch (s) {
    case RequestState::queued: return "queued";
    case RequestState::prefilling: return "prefilling";
    case RequestState::transferring: return "transferring";
    case RequestState::decoding: return "decoding";
    case RequestState::done: return "done";
    case RequestState::failed: return "failed";
  }
  return "?";
}

const char* kv_op_name(KvOp op) {
  switch (op) {
    case KvOp::prefill_alloc: return "prefill_alloc";
    case KvOp::prefill_release: return "prefill_release";
    case KvOp::prefill_reclaim: return "prefill_reclaim";
    case KvOp::decode_alloc: return "decode_alloc";
    case KvOp::decode_free: return "decode_free";
  }
  return "?";
}

void PdConfig::validate() const {
  if (prefill.empty() || decode.empty()) {
    throw ConfigError("need at least one prefill and one decode TE");
  }
  latency.validate();
  const std::uint64_t app_limit = 1ULL << 30;
  for (const auto& p : prefill) {
    if (p.dp_groups < 1 || p.batch_limit < 1 || p.kv_blocks < 1) throw ConfigError("invalid prefill TE");
    if (p.profile.fixed_ms < 0 || p.profile.per_token_ms < 0) throw ConfigError("invalid prefill profile");
    if (p.kv_blocks * kv_block_bytes > app_limit) throw ConfigError("prefill KV pool exceeds die memory");
  }
  for (const auto& d : decode) {
    if (d.dp_groups < 1 || d.batch_limit < 1 || d.kv_blocks < 1) throw ConfigError("invalid decode TE");
    if (d.kv_blocks * kv_block_bytes > app_limit) throw ConfigError("decode KV pool exceeds die memory");
  }
  if (colocated) {
    for (const auto& p : prefill) {
      if ((p.kv_blocks + decode[0].kv_blocks) * kv_block_bytes > app_limit) {
        throw ConfigError("colocated KV pools exceed die memory");
      }
    }
  }
  if (block_tokens < 1 || kv_block_bytes < 1) throw ConfigError("invalid KV block geometry");
  if (transfer_cores < 1 || transfer_cores > 48) throw ConfigError("transfer cores must lie in [1, 48]");
  if (decode_step_ms <= 0 || tokens_per_step < 1) throw ConfigError("invalid decode step model");
  if (backpressure_deadline_ms <= 0 || transfer_timeout_ms <= 0 || completion_poll_us <= 0) {
    throw ConfigError("deadlines and poll interval must be > 0");
  }
  if (scale_out_startup_us < 0 || scale_out_bandwidth_gbps <= 0) throw ConfigError("invalid scale-out link");
  cost.validate();
}

int PdConfig::prefill_dies() const {
  int n = 0;
  for (const auto& p : prefill) n += p.dp_groups;
  return n;
}

int PdConfig::decode_dies() const {
  if (colocated) return 0;
  int n = 0;
  for (const auto& d : decode) n += d.dp_groups;
  return n;
}

std::vector<WorkloadRequest> generate_workload(const WorkloadSpec& spec, std::uint64_t seed) {
  if (!spec.requests.empty()) {
    for (const auto& r : spec.requests) {
      if (r.prompt_len < 1 || r.max_output < 1 || r.arrival_ms < 0) {
        throw ConfigError("request " + std::to_string(r.id) + ": prompt and output must be >= 1");
      }
    }
    return spec.requests;
  }
  if (spec.count < 0) throw ConfigError("request count must be >= 0");
  if (spec.prompt_min < 1 || spec.prompt_max < spec.prompt_min || spec.output_min < 1 ||
      spec.output_max < spec.output_min || spec.rate_per_s <= 0 || spec.prefix_groups < 1) {
    throw ConfigError("invalid workload ranges");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> prompt(spec.prompt_min, spec.prompt_max);
  std::uniform_int_distribution<int> output(spec.output_min, spec.output_max);
  std::uniform_int_distribution<int> prefix(0, spec.prefix_groups - 1);
  std::exponential_distribution<double> gap(spec.rate_per_s / 1000.0);
  std::vector<WorkloadRequest> out;
  double t = 0;
  for (int i = 0; i < spec.count; ++i) {
    WorkloadRequest r;
    r.id = i;
    r.arrival_ms = t;
    r.prompt_len = prompt(rng);
    r.max_output = output(rng);
    r.prefix_hash = static_cast<std::uint64_t>(prefix(rng));
    out.push_back(r);
    t += spec.arrival == WorkloadSpec::Arrival::poisson ? gap(rng) : 1000.0 / spec.rate_per_s;
  }
  return out;
}

nlohmann::json KvAudit::to_json() const {
  return {{"prefill_allocated", prefill_allocated}, {"prefill_released", prefill_released},
          {"prefill_reclaimed", prefill_reclaimed}, {"decode_allocated", decode_allocated},
          {"decode_freed", decode_freed},           {"leaked", leaked},
          {"released_and_reclaimed", released_and_reclaimed},
          {"invalid_ops", invalid_ops},             {"balanced", balanced()}};
}

KvAudit audit_ledger(const std::vector<KvLedgerEntry>& ledger) {
  KvAudit a;
  // (side, pool, block) -> holding request
  std::map<std::tuple<bool, int, std::uint64_t>, int> held;
  // prefill (request, pool, block) -> how it ended: 1 released, 2 reclaimed
  std::map<std::tuple<int, int, std::uint64_t>, int> ended;
  for (const auto& e : ledger) {
    const auto key = std::make_tuple(e.prefill, e.pool, e.block);
    switch (e.op) {
      case KvOp::prefill_alloc:
      case KvOp::decode_alloc:
        (e.op == KvOp::prefill_alloc ? a.prefill_allocated : a.decode_allocated)++;
        if (held.contains(key)) ++a.invalid_ops;
        held[key] = e.request;
        break;
      case KvOp::prefill_release:
      case KvOp::prefill_reclaim:
      case KvOp::decode_free: {
        auto it = held.find(key);
        if (it == held.end() || it->second != e.request) {
          ++a.invalid_ops;
          break;
        }
        held.erase(it);
        if (e.op == KvOp::decode_free) {
          ++a.decode_freed;
          break;
        }
        (e.op == KvOp::prefill_release ? a.prefill_released : a.prefill_reclaimed)++;
        auto& how = ended[{e.request, e.pool, e.block}];
        const int now = e.op == KvOp::prefill_release ? 1 : 2;
        if (how != 0 && how != now) ++a.released_and_reclaimed;
        how = now;
        break;
      }
    }
  }
  a.leaked = held.size();
  return a;
}

nlohmann::json PdResult::to_json(bool with_ledger) const {
  nlohmann::json reqs = nlohmann::json::array();
  for (const auto& r : requests) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : r.steps) {
      steps.push_back({{"step", s.step}, {"at_ns", s.at.count()}, {"detail", s.detail}});
    }
    nlohmann::json j = {{"id", r.id},
                        {"state", state_name(r.state)},
                        {"prefill_te", r.prefill_te},
                        {"prefill_dp", r.prefill_dp},
                        {"decode_te", r.decode_te},
                        {"decode_dp", r.decode_dp},
                        {"deferrals", r.deferrals},
                        {"steps", steps}};
    if (!r.cause.empty()) j["cause"] = r.cause;
    if (r.prefill_done.count() > 0) j["ttft_ms"] = r.ttft_ms();
    reqs.push_back(j);
  }
  nlohmann::json j = {{"completed", completed},
                      {"failed", failed},
                      {"makespan_ms", makespan_ms},
                      {"tpot_ms", tpot_ms},
                      {"ttft_ms", mean_ttft_ms},
                      {"backpressure_events", backpressure_events},
                      {"accepted_without_reservation", accepted_without_reservation},
                      {"kv_transfers", transfers},
                      {"bytes_verified", bytes_verified},
                      {"content_mismatches", content_mismatches},
                      {"deadlock", deadlock},
                      {"kv_audit", audit.to_json()},
                      {"requests", reqs}};
  if (with_ledger) {
    nlohmann::json l = nlohmann::json::array();
    for (const auto& e : ledger) {
      l.push_back({{"at_ns", e.at.count()},
                   {"side", e.prefill ? "prefill" : "decode"},
                   {"pool", e.pool},
                   {"block", e.block},
                   {"request", e.request},
                   {"op", kv_op_name(e.op)}});
    }
    j["ledger"] = l;
  }
  return j;
}

namespace {

// Deterministic KV content for (request, block).
std::vector<std::byte> block_content(int request, std::uint64_t block, std::uint64_t bytes) {
  std::uint64_t s = (static_cast<std::uint64_t>(request) << 32) ^ (block * 0x9E3779B97F4A7C15ULL) ^ 0xD1B54A32D192ED03ULL;
  std::vector<std::byte> out(bytes);
  for (std::uint64_t i = 0; i < bytes; i += 8) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    for (std::uint64_t k = 0; k < 8 && i + k < bytes; ++k) {
      out[i + k] = static_cast<std::byte>((z >> (8 * k)) & 0xFF);
    }
  }
  return out;
}

class KvPool {
 public:
  explicit KvPool(std::uint64_t blocks) {
    for (std::uint64_t b = 0; b < blocks; ++b) free_.insert(b);
  }
  std::uint64_t free_blocks() const { return free_.size(); }
  std::vector<std::uint64_t> take(std::uint64_t n) {
    if (n > free_.size()) throw std::logic_error("KV pool over-allocated");
    std::vector<std::uint64_t> out;
    for (std::uint64_t i = 0; i < n; ++i) {
      out.push_back(*free_.begin());
      free_.erase(free_.begin());
    }
    return out;
  }
  void give(const std::vector<std::uint64_t>& blocks) {
    for (auto b : blocks) free_.insert(b);
  }

 private:
  std::set<std::uint64_t> free_;
};

struct TransferTask {
  std::vector<std::uint64_t> src_blocks;  // prefill-side addresses (block ids)
  std::vector<std::uint64_t> dst_blocks;
  std::vector<xccl::Handle> sends;
  std::vector<xccl::Handle> recvs;
  std::vector<xccl::Status> send_status;
  std::vector<xccl::Status> recv_status;
  enum class Status { registered, receiving, complete } status = Status::registered;
};

struct Req {
  WorkloadRequest in;
  RequestTrace trace;
  std::uint64_t prompt_blocks = 0;
  std::uint64_t decode_blocks = 0;  // prompt + output reservation
  std::vector<std::uint64_t> prefill_blocks;
  std::vector<std::uint64_t> decode_held;
  TransferTask task;
  std::optional<EventId> deadline;
  SimTime deferred_since{0};
};

class PdSim {
 public:
  PdSim(const PdConfig& cfg, const std::vector<WorkloadRequest>& reqs, std::uint64_t seed)
      : cfg_(cfg),
        fab_(engine_,
             fabric::build_topology((cfg.prefill_dies() + cfg.decode_dies() + 1) / 2, 2, 48),
             cfg.latency),
        p2p_(fab_, xccl::P2pOptions{from_ms(cfg.transfer_timeout_ms), 0}) {
    fab_.seed(seed);
    fab_.trace().set_enabled(false);
    fabric::LatencyModel out;
    out.mem_startup_us = cfg.scale_out_startup_us;
    out.bandwidth_gbps = cfg.scale_out_bandwidth_gbps;
    out.dma_startup_us = std::max(out.dma_startup_us, 2 * cfg.scale_out_startup_us);
    fab_.set_scale_out_model(out);

    int die = 0;
    for (std::size_t te = 0; te < cfg.prefill.size(); ++te) {
      const auto& spec = cfg.prefill[te];
      PrefillTe t;
      for (int g = 0; g < spec.dp_groups; ++g) {
        scheduler::DpGroupState s;
        s.id = static_cast<int>(pgroups_.size());
        s.batch_limit = spec.batch_limit;
        s.kv_total_blocks = spec.kv_blocks;
        t.groups.push_back(s.id);
        pgroups_.push_back({s, KvPool(spec.kv_blocks), fabric::NodeId{die}, static_cast<int>(te), {}, false});
        if (spec.profile.scale_out) fab_.set_node_domain(fabric::NodeId{die}, 1);
        ++die;
      }
      pte_.push_back(std::move(t));
    }
    if (cfg.colocated) {
      dbase_ = 0;
      for (const auto& p : cfg.prefill) dbase_ = std::max(dbase_, p.kv_blocks * cfg.kv_block_bytes);
      const auto& spec = cfg.decode.front();
      for (std::size_t te = 0; te < pte_.size(); ++te) {
        std::vector<int> ids;
        for (int pg : pte_[te].groups) {
          scheduler::DpGroupState s;
          s.id = static_cast<int>(dgroups_.size());
          s.batch_limit = spec.batch_limit;
          s.kv_total_blocks = spec.kv_blocks;
          ids.push_back(s.id);
          dgroups_.push_back({s, KvPool(spec.kv_blocks), pgroups_[pg].die, static_cast<int>(te)});
        }
        dte_.push_back(std::move(ids));
      }
    }
    for (std::size_t te = 0; te < cfg.decode.size() && !cfg.colocated; ++te) {
      const auto& spec = cfg.decode[te];
      std::vector<int> ids;
      for (int g = 0; g < spec.dp_groups; ++g) {
        scheduler::DpGroupState s;
        s.id = static_cast<int>(dgroups_.size());
        s.batch_limit = spec.batch_limit;
        s.kv_total_blocks = spec.kv_blocks;
        ids.push_back(s.id);
        dgroups_.push_back({s, KvPool(spec.kv_blocks), fabric::NodeId{die}, static_cast<int>(te)});
        ++die;
      }
      dte_.push_back(std::move(ids));
    }
    for (const auto& r : reqs) {
      if (reqs_.contains(r.id)) throw ConfigError("duplicate request id " + std::to_string(r.id));
      auto q = std::make_unique<Req>();
      q->in = r;
      q->trace.id = r.id;
      q->trace.arrival = from_ms(r.arrival_ms);
      q->prompt_blocks = scheduler::reserve_blocks(r.prompt_len, cfg.block_tokens);
      q->decode_blocks = q->prompt_blocks + scheduler::reserve_blocks(r.max_output, cfg.block_tokens);
      reqs_.emplace(r.id, std::move(q));
    }
  }

  PdResult run() {
    for (auto& [id, r] : reqs_) {
      const int rid = id;
      engine_.schedule_at(r->trace.arrival, [this, rid] { arrive(rid); });
    }
    engine_.run();

    PdResult res;
    for (auto& [id, r] : reqs_) {
      if (r->trace.state != RequestState::done && r->trace.state != RequestState::failed) {
        res.deadlock = true;
        r->trace.state = RequestState::failed;
        r->trace.cause = "deadlock";
      }
    }
    double ttft = 0;
    int with_ttft = 0;
    SimTime last{0};
    for (auto& [id, r] : reqs_) {
      if (r->trace.state == RequestState::done) ++res.completed;
      if (r->trace.state == RequestState::failed) ++res.failed;
      if (r->trace.prefill_done.count() > 0) {
        ttft += r->trace.ttft_ms();
        ++with_ttft;
      }
      last = std::max(last, r->trace.finished);
      res.requests.push_back(std::move(r->trace));
    }
    res.mean_ttft_ms = with_ttft ? ttft / with_ttft : 0;
    res.makespan_ms = to_ms(last);
    res.tpot_ms = cfg_.decode_step_ms / cfg_.tokens_per_step;
    res.ledger = std::move(ledger_);
    res.audit = audit_ledger(res.ledger);
    res.backpressure_events = backpressure_;
    res.accepted_without_reservation = unreserved_;
    res.transfers = transfers_;
    res.bytes_verified = verified_;
    res.content_mismatches = mismatches_;
    return res;
  }

 private:
  struct PGroup {
    scheduler::DpGroupState state;
    KvPool pool;
    fabric::NodeId die;
    int te;
    std::deque<int> fifo;  // assigned, waiting to run
    bool running;
  };
  struct DGroup {
    scheduler::DpGroupState state;
    KvPool pool;
    fabric::NodeId die;
    int te;
  };
  struct PrefillTe {
    std::vector<int> groups;
    std::vector<int> queue;  // requests routed here, not yet assigned
  };

  void step(Req& r, int s, std::string detail = {}) {
    r.trace.steps.push_back({s, engine_.now(), std::move(detail)});
  }

  void log(bool prefill, int pool, const std::vector<std::uint64_t>& blocks, int req, KvOp op) {
    for (auto b : blocks) ledger_.push_back({engine_.now(), prefill, pool, b, req, op});
  }

  void fail(Req& r, std::string cause) {
    r.trace.state = RequestState::failed;
    r.trace.cause = std::move(cause);
    r.trace.finished = engine_.now();
  }

  // Step 1: the job executor picks the least loaded prefill TE.
  void arrive(int id) {
    Req& r = *reqs_.at(id);
    std::uint64_t biggest = 0;
    for (const auto& g : pgroups_) biggest = std::max(biggest, g.state.kv_total_blocks);
    if (r.prompt_blocks > biggest) {
      fail(r, "prompt_exceeds_prefill_capacity");
      return;
    }
    int best = -1;
    double best_load = std::numeric_limits<double>::infinity();
    for (std::size_t te = 0; te < pte_.size(); ++te) {
      double busy = static_cast<double>(pte_[te].queue.size());
      double limit = 0;
      for (int g : pte_[te].groups) {
        busy += pgroups_[g].state.active_batch + pgroups_[g].state.pending_requests;
        limit += pgroups_[g].state.batch_limit;
      }
      const double load = busy / limit;
      if (load < best_load) {
        best_load = load;
        best = static_cast<int>(te);
      }
    }
    r.trace.prefill_te = best;
    step(r, 1, "prefill_te=" + std::to_string(best));
    pte_[best].queue.push_back(id);
    schedule_prefill(best);
  }

  // Step 2: DP-level scheduling within the TE.
  void schedule_prefill(int te) {
    auto& t = pte_[te];
    if (t.queue.empty()) return;
    std::vector<scheduler::DpGroupState> view;
    for (int g : t.groups) view.push_back(pgroups_[g].state);
    std::vector<scheduler::PendingRequest> pending;
    for (int id : t.queue) {
      const auto& in = reqs_.at(id)->in;
      pending.push_back({id, in.prompt_len, in.max_output, in.prefix_hash});
    }
    const auto d = scheduler::prefill_schedule_step(view, pending, cfg_.cost, cfg_.block_tokens);
    for (std::size_t i = 0; i < t.groups.size(); ++i) pgroups_[t.groups[i]].state = view[i];
    for (const auto& a : d.assigned) {
      Req& r = *reqs_.at(a.request);
      auto& g = pgroups_[a.group];
      r.prefill_blocks = g.pool.take(r.prompt_blocks);
      log(true, a.group, r.prefill_blocks, r.in.id, KvOp::prefill_alloc);
      r.trace.prefill_dp = a.group;
      step(r, 2, "prefill_dp=" + std::to_string(a.group));
      g.fifo.push_back(a.request);
      t.queue.erase(std::find(t.queue.begin(), t.queue.end(), a.request));
      run_prefill(a.group);
    }
  }

  void run_prefill(int gid) {
    auto& g = pgroups_[gid];
    if (g.running || g.fifo.empty()) return;
    const int id = g.fifo.front();
    g.fifo.pop_front();
    g.running = true;
    --g.state.pending_requests;
    ++g.state.active_batch;
    Req& r = *reqs_.at(id);
    r.trace.state = RequestState::prefilling;
    const auto& prof = cfg_.prefill[g.te].profile;
    const double ms = prof.fixed_ms + prof.per_token_ms * r.in.prompt_len;
    engine_.schedule_after(from_ms(ms), [this, gid, id] { prefill_done(gid, id); });
  }

  void prefill_done(int gid, int id) {
    auto& g = pgroups_[gid];
    Req& r = *reqs_.at(id);
    g.running = false;
    --g.state.active_batch;
    g.state.queued_tokens -= static_cast<std::uint64_t>(r.in.prompt_len);
    g.state.prefix_cache.insert(r.in.prefix_hash);
    for (std::size_t i = 0; i < r.prefill_blocks.size(); ++i) {
      const auto bytes = block_content(id, i, cfg_.kv_block_bytes);
      fab_.memory(g.die).write(r.prefill_blocks[i] * cfg_.kv_block_bytes, bytes);
    }
    r.trace.prefill_done = engine_.now();
    // Step 3: only metadata and block addresses are registered.
    r.task = TransferTask{};
    r.task.src_blocks = r.prefill_blocks;
    r.trace.state = RequestState::transferring;
    step(r, 3, "transfer_task blocks=" + std::to_string(r.task.src_blocks.size()));
    run_prefill(gid);
    schedule_prefill(g.te);
    try_decode(id, true);
  }

  // Steps 4 to 6. Returns true when accepted.
  bool try_decode(int id, bool first) {
    Req& r = *reqs_.at(id);
    std::uint64_t biggest = 0;
    for (const auto& g : dgroups_) biggest = std::max(biggest, g.state.kv_total_blocks);
    if (r.decode_blocks > biggest) {
      reclaim_prefill(r);
      fail(r, "exceeds_decode_capacity");
      return false;
    }
    int te = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < dte_.size() && !cfg_.colocated; ++i) {
      double used = 0;
      double total = 0;
      for (int g : dte_[i]) {
        used += static_cast<double>(dgroups_[g].state.kv_used_blocks);
        total += static_cast<double>(dgroups_[g].state.kv_total_blocks);
      }
      if (used / total < best) {
        best = used / total;
        te = static_cast<int>(i);
      }
    }
    r.trace.decode_te = te;
    step(r, 4, "decode_te=" + std::to_string(te));
    std::vector<scheduler::DpGroupState> view;
    if (cfg_.colocated) {
      // The request decodes where it prefilled.
      te = r.trace.prefill_te;
      r.trace.decode_te = te;
      const auto& pg = pte_[te].groups;
      const auto pos = std::find(pg.begin(), pg.end(), r.trace.prefill_dp) - pg.begin();
      view.push_back(dgroups_[dte_[te][static_cast<std::size_t>(pos)]].state);
    } else {
      for (int g : dte_[te]) view.push_back(dgroups_[g].state);
    }
    const auto route = scheduler::route_decode(id, view, r.decode_blocks);
    step(r, 5, route.group ? "decode_dp=" + std::to_string(*route.group) : "decode_dp=none");
    if (!route.group) {
      ++backpressure_;
      ++r.trace.deferrals;
      step(r, 6, "deferred");
      if (first) {
        r.deferred_since = engine_.now();
        deferred_.push_back(id);
        r.deadline = engine_.schedule_after(from_ms(cfg_.backpressure_deadline_ms), [this, id] {
          Req& q = *reqs_.at(id);
          q.deadline.reset();
          deferred_.erase(std::find(deferred_.begin(), deferred_.end(), id));
          reclaim_prefill(q);
          fail(q, "decode_capacity_deadline");
        });
      }
      return false;
    }
    const int gid = *route.group;
    auto& g = dgroups_[gid];
    r.decode_held = g.pool.take(r.decode_blocks);
    log(false, gid, r.decode_held, id, KvOp::decode_alloc);
    g.state.kv_used_blocks += r.decode_blocks;
    ++g.state.active_batch;
    r.trace.decode_dp = gid;
    step(r, 6, "reserved blocks=" + std::to_string(r.decode_blocks));
    if (r.deadline) {
      engine_.cancel(*r.deadline);
      r.deadline.reset();
    }
    start_transfer(id);
    return true;
  }

  // Step 7: block-wise P2P with the receive posted first.
  void start_transfer(int id) {
    Req& r = *reqs_.at(id);
    auto& pg = pgroups_[r.trace.prefill_dp];
    auto& dg = dgroups_[r.trace.decode_dp];
    if (r.decode_held.size() != r.decode_blocks) ++unreserved_;
    auto& t = r.task;
    t.status = TransferTask::Status::receiving;
    t.dst_blocks.assign(r.decode_held.begin(), r.decode_held.begin() + static_cast<std::ptrdiff_t>(t.src_blocks.size()));
    if (pg.die == dg.die) {
      auto& mem = fab_.memory(pg.die);
      for (std::size_t i = 0; i < t.src_blocks.size(); ++i) {
        mem.write(dbase_ + t.dst_blocks[i] * cfg_.kv_block_bytes,
                  mem.read(t.src_blocks[i] * cfg_.kv_block_bytes, cfg_.kv_block_bytes));
      }
      step(r, 7, "local blocks=" + std::to_string(t.src_blocks.size()));
      const SimTime copy = fab_.model().local_copy_latency(t.src_blocks.size() * cfg_.kv_block_bytes,
                                                           cfg_.transfer_cores);
      engine_.schedule_after(copy, [this, id] { poll_transfer(id); });
      return;
    }
    auto& chan = p2p_.channel(pg.die, dg.die);
    for (std::size_t i = 0; i < t.src_blocks.size(); ++i) {
      xccl::TransferRequest req;
      req.event_id = ++event_;
      req.payload_len = cfg_.kv_block_bytes;
      req.cores = cfg_.transfer_cores;
      req.mode = xccl::Mode::async;
      t.recvs.push_back(p2p_.receive_async(chan, req, dbase_ + t.dst_blocks[i] * cfg_.kv_block_bytes));
      t.sends.push_back(p2p_.send_async(chan, req, t.src_blocks[i] * cfg_.kv_block_bytes));
    }
    t.send_status.assign(t.sends.size(), xccl::Status::pending);
    t.recv_status.assign(t.recvs.size(), xccl::Status::pending);
    step(r, 7, "p2p blocks=" + std::to_string(t.src_blocks.size()));
    engine_.schedule_after(from_us(cfg_.completion_poll_us), [this, id] { poll_transfer(id); });
  }

  // Step 8: both sides poll their handles.
  void poll_transfer(int id) {
    Req& r = *reqs_.at(id);
    auto& t = r.task;
    bool pending = false;
    bool fault = false;
    std::string why;
    auto check = [&](std::vector<xccl::Handle>& hs, std::vector<xccl::Status>& st) {
      for (std::size_t i = 0; i < hs.size(); ++i) {
        if (st[i] == xccl::Status::pending) st[i] = p2p_.poll_completion(hs[i]);
        if (st[i] == xccl::Status::pending) pending = true;
        if (st[i] == xccl::Status::fault) {
          fault = true;
          if (why.empty()) why = p2p_.info(hs[i]).fault;
        }
      }
    };
    check(t.sends, t.send_status);
    check(t.recvs, t.recv_status);
    if (pending) {
      engine_.schedule_after(from_us(cfg_.completion_poll_us), [this, id] { poll_transfer(id); });
      return;
    }
    auto& pg = pgroups_[r.trace.prefill_dp];
    auto& dg = dgroups_[r.trace.decode_dp];
    if (fault) {
      reclaim_prefill(r);
      release_decode(r);
      fail(r, "transfer_timeout: " + why);
      retry_deferred();
      return;
    }
    transfers_ += t.src_blocks.size();
    for (std::size_t i = 0; i < t.dst_blocks.size(); ++i) {
      const auto want = block_content(id, i, cfg_.kv_block_bytes);
      const auto got = fab_.memory(dg.die).read(dbase_ + t.dst_blocks[i] * cfg_.kv_block_bytes, cfg_.kv_block_bytes);
      if (got != want) ++mismatches_;
      verified_ += cfg_.kv_block_bytes;
    }
    t.status = TransferTask::Status::complete;
    pg.pool.give(r.prefill_blocks);
    pg.state.kv_used_blocks -= r.prefill_blocks.size();
    log(true, r.trace.prefill_dp, r.prefill_blocks, id, KvOp::prefill_release);
    r.prefill_blocks.clear();
    r.trace.state = RequestState::decoding;
    step(r, 8, "complete");
    schedule_prefill(pg.te);
    const double steps = std::ceil(r.in.max_output / cfg_.tokens_per_step);
    engine_.schedule_after(from_ms(steps * cfg_.decode_step_ms), [this, id] {
      Req& q = *reqs_.at(id);
      release_decode(q);
      q.trace.state = RequestState::done;
      q.trace.finished = engine_.now();
      retry_deferred();
    });
  }

  void reclaim_prefill(Req& r) {
    if (r.prefill_blocks.empty()) return;
    auto& pg = pgroups_[r.trace.prefill_dp];
    pg.pool.give(r.prefill_blocks);
    pg.state.kv_used_blocks -= r.prefill_blocks.size();
    log(true, r.trace.prefill_dp, r.prefill_blocks, r.in.id, KvOp::prefill_reclaim);
    r.prefill_blocks.clear();
    schedule_prefill(pg.te);
  }

  void release_decode(Req& r) {
    if (r.decode_held.empty()) return;
    auto& dg = dgroups_[r.trace.decode_dp];
    dg.pool.give(r.decode_held);
    dg.state.kv_used_blocks -= r.decode_held.size();
    --dg.state.active_batch;
    log(false, r.trace.decode_dp, r.decode_held, r.in.id, KvOp::decode_free);
    r.decode_held.clear();
  }

  void retry_deferred() {
    const auto waiting = deferred_;
    for (int id : waiting) {
      if (try_decode(id, false)) deferred_.erase(std::find(deferred_.begin(), deferred_.end(), id));
    }
  }

  const PdConfig& cfg_;
  Engine engine_;
  fabric::Fabric fab_;
  xccl::P2p p2p_;
  std::vector<PGroup> pgroups_;
  std::vector<DGroup> dgroups_;
  std::vector<PrefillTe> pte_;
  std::vector<std::vector<int>> dte_;
  std::map<int, std::unique_ptr<Req>> reqs_;
  std::vector<int> deferred_;
  std::vector<KvLedgerEntry> ledger_;
  std::uint64_t dbase_ = 0;  // decode pool offset on shared dies
  std::uint64_t event_ = 0;
  std::uint64_t backpressure_ = 0;
  std::uint64_t unreserved_ = 0;
  std::uint64_t transfers_ = 0;
  std::uint64_t verified_ = 0;
  std::uint64_t mismatches_ = 0;
};

}  // namespace

PdResult pd_workflow(const PdConfig& cfg, const std::vector<WorkloadRequest>& requests,
                     std::uint64_t seed) {
  cfg.validate();
  for (const auto& r : requests) {
    if (r.prompt_len < 1 || r.max_output < 1) {
      throw ConfigError("request " + std::to_string(r.id) + ": prompt and output must be >= 1");
    }
  }
  return PdSim(cfg, requests, seed).run();
}

}  // namespace podsim::pipeline
