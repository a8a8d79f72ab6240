// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/xccl/p2p.hpp"

#include <algorithm>

#include "podsim/core/error.hpp"

namespace podsim::xccl {

using fabric::MetadataField;

struct P2p::Transfer {
  std::uint64_t id = 0;
  bool is_send = true;
  TransferRequest req;
  Addr addr = 0;
  std::pair<int, int> key;
  TransferInfo info;
  bool consumed = false;
  SimTime deadline{0};
  fabric::PollId poll = 0;

  // sender
  std::uint64_t next_chunk = 1;
  std::uint64_t acked = 0;
  std::uint64_t base_seq = 0;
  SimTime stage_free{0};
  SimTime stream_free{0};
  std::optional<SimTime> stall_since;
  Addr zero_copy_base = 0;

  // receiver
  std::uint64_t processed = 0;
  SimTime copy_free{0};
};

struct P2p::ChannelState {
  Channel chan;
  std::optional<Mode> mode;
  std::deque<std::uint64_t> sends;
  std::deque<std::uint64_t> recvs;
  std::uint64_t active_send = 0;
  std::uint64_t active_recv = 0;
  std::uint64_t next_seq = 0;  // ring sequence of the next chunk written
  std::uint64_t recv_seq = 0;  // ring sequence of the next chunk consumed
};

P2p::P2p(fabric::Fabric& fab, P2pOptions opts) : fab_(fab), opts_(opts) {}
P2p::~P2p() = default;

std::uint64_t P2p::window() const {
  return opts_.window > 0 ? opts_.window : std::max<std::uint64_t>(1, fab_.options().ring_slots / 2);
}

std::uint64_t P2p::chunk_bytes() const {
  return std::min(fab_.options().ring_slot_bytes, fab_.options().staging_bytes);
}

Channel& P2p::channel(NodeId src, NodeId dst) {
  if (src == dst) throw UsageError("a channel needs two distinct dies");
  auto key = std::make_pair(src.die, dst.die);
  auto it = channels_.find(key);
  if (it == channels_.end()) {
    auto cs = std::make_unique<ChannelState>();
    const auto& layout = fab_.layout();
    cs->chan = Channel{src, dst, layout.p2p_field_index(dst, 0, 1),
                       layout.p2p_field_index(src, 0, 0)};
    it = channels_.emplace(key, std::move(cs)).first;
  }
  return it->second->chan;
}

P2p::ChannelState& P2p::state_of(const Channel& chan) {
  auto it = channels_.find({chan.src.die, chan.dst.die});
  if (it == channels_.end()) throw UsageError("unknown channel");
  return *it->second;
}

Handle P2p::send(Channel& chan, const TransferRequest& req, Addr src_addr) {
  TransferRequest r = req;
  r.mode = Mode::sync;
  return post(chan, r, src_addr, true);
}

Handle P2p::receive(Channel& chan, const TransferRequest& req, Addr dst_addr) {
  TransferRequest r = req;
  r.mode = Mode::sync;
  return post(chan, r, dst_addr, false);
}

Handle P2p::send_async(Channel& chan, TransferRequest req, Addr src_addr) {
  req.mode = Mode::async;
  return post(chan, req, src_addr, true);
}

Handle P2p::receive_async(Channel& chan, TransferRequest req, Addr dst_addr) {
  req.mode = Mode::async;
  return post(chan, req, dst_addr, false);
}

Handle P2p::post(Channel& chan, const TransferRequest& req, Addr addr, bool is_send) {
  ChannelState& cs = state_of(chan);
  if (req.cores < 1 || req.cores > fab_.topology().cores_per_die) {
    throw ConfigError("transfer cores must lie in [1, " +
                      std::to_string(fab_.topology().cores_per_die) + "]");
  }
  if (cs.mode && *cs.mode != req.mode) {
    throw UsageError("sync and async transfers cannot share a channel");
  }
  if (!fab_.layout().region_of(addr, req.payload_len)) {
    throw UsageError("transfer buffer outside the die address space");
  }
  cs.mode = req.mode;
  auto t = std::make_unique<Transfer>();
  t->id = ++next_id_;
  t->is_send = is_send;
  t->req = req;
  t->addr = addr;
  t->key = {chan.src.die, chan.dst.die};
  t->info.event_id = req.event_id;
  t->info.payload_len = req.payload_len;
  t->info.posted = fab_.engine().now();
  (is_send ? cs.sends : cs.recvs).push_back(t->id);
  const Handle h{t->id};
  transfers_.emplace(t->id, std::move(t));
  pump();
  return h;
}

void P2p::pump() {
  if (pumping_) return;
  pumping_ = true;
  bool progress = true;
  while (progress) {
    progress = false;
    for (auto& [key, csp] : channels_) {
      ChannelState& cs = *csp;
      if (cs.active_recv == 0 && !cs.recvs.empty()) {
        cs.active_recv = cs.recvs.front();
        start_recv(cs, *transfers_.at(cs.active_recv));
        progress = true;
      }
      if (cs.active_send == 0 && !cs.sends.empty()) {
        Transfer& t = *transfers_.at(cs.sends.front());
        const int die = cs.chan.src.die;
        if (t.req.mode == Mode::sync && die_busy_.contains(die)) continue;
        if (t.req.zero_copy && cs.active_recv == 0) continue;
        cs.active_send = t.id;
        if (t.req.mode == Mode::sync) die_busy_[die] = t.id;
        start_send(cs, t);
        progress = true;
      }
    }
  }
  pumping_ = false;
}

void P2p::start_send(ChannelState& cs, Transfer& t) {
  const SimTime now = fab_.engine().now();
  t.info.started = now;
  t.deadline = now + opts_.timeout;
  t.info.chunks = fabric::chunk_count(t.req.payload_len, chunk_bytes());
  t.base_seq = cs.next_seq;
  cs.next_seq += t.info.chunks;
  t.stage_free = now;
  t.stream_free = now;
  if (t.req.zero_copy) t.zero_copy_base = transfers_.at(cs.active_recv)->addr;
  fab_.memory(cs.chan.src).zero(fab_.layout().field_addr(cs.chan.local_meta_index),
                                MetadataField::kBytes);
  issue_chunks(cs, t);
  sender_poll(cs, t);
}

void P2p::issue_chunks(ChannelState& cs, Transfer& t) {
  const SimTime now = fab_.engine().now();
  const auto& m = fab_.model(cs.chan.src, cs.chan.dst);
  const std::uint64_t chunk = chunk_bytes();
  const std::uint64_t n = t.info.chunks;
  auto& ring = fab_.ring(cs.chan.dst, cs.chan.src);

  while (t.next_chunk <= n && t.next_chunk - 1 - t.acked < window()) {
    const std::uint64_t k = t.next_chunk++;
    const std::uint64_t off = (k - 1) * chunk;
    const std::uint64_t b = std::min(chunk, t.req.payload_len - off);
    const std::uint64_t seq = t.base_seq + k - 1;

    SimTime land;
    if (t.req.semantics == Semantics::dma) {
      land = std::max(t.stream_free, now + m.dma_startup()) + m.dma_stream_time(b);
      fab_.trace().record(now, cs.chan.src.die, "send_stage", cs.chan.dst.die, b,
                          "chunk=" + std::to_string(k) + " dma");
    } else {
      const SimTime stage_done =
          std::max(t.stage_free, now) + m.local_copy_latency(b, t.req.cores);
      t.stage_free = stage_done;
      land = std::max(t.stream_free, stage_done + m.mem_startup()) +
             m.mem_stream_time(b, t.req.cores);
      fab_.trace().record(stage_done, cs.chan.src.die, "send_stage", cs.chan.dst.die, b,
                          "chunk=" + std::to_string(k));
    }
    t.stream_free = land;

    const Addr target = t.req.zero_copy ? t.zero_copy_base + off : ring.slot_addr(seq);
    auto blob = fab_.memory(cs.chan.src).extract(t.addr + off, b);
    std::function<void()> landed;
    if (!t.req.zero_copy) landed = [&ring, seq]() { ring.on_fill(seq); };
    fab_.deliver_at(land, cs.chan.src, cs.chan.dst, target, std::move(blob), std::move(landed));

    const MetadataField f{t.req.event_id, k, ((seq + 1) % ring.slots()) * ring.slot_bytes(),
                          t.req.payload_len};
    fab_.write_metadata_at(land + m.mem_startup(), cs.chan.src, cs.chan.dst,
                           cs.chan.remote_meta_index, f);
    fab_.trace().record(land, cs.chan.src.die, "send_publish", cs.chan.dst.die, b,
                        "event=" + std::to_string(t.req.event_id) + " chunk=" + std::to_string(k) +
                            " tail=" + std::to_string(f.tail_ptr));
  }
  if (t.next_chunk <= n && !t.stall_since) t.stall_since = now;
}

void P2p::sender_poll(ChannelState& cs, Transfer& t) {
  const SimTime now = fab_.engine().now();
  if (now >= t.deadline) {
    finish_send(cs, t, Status::fault, "timeout");
    return;
  }
  const std::uint64_t acked = t.acked;
  const int cores = t.req.mode == Mode::sync ? t.req.cores : 0;
  const std::uint64_t id = t.id;
  const auto key = t.key;
  t.poll = fab_.poll(
      cs.chan.src, fab_.layout().field_addr(cs.chan.local_meta_index), MetadataField::kBytes,
      [acked](std::span<const std::byte> b) { return MetadataField::decode(b).chunk_id > acked; },
      t.deadline - now, cores,
      [this, id, key](const fabric::PollResult& res) {
        Transfer& tt = *transfers_.at(id);
        ChannelState& c = *channels_.at(key);
        tt.poll = 0;
        if (!res.satisfied) {
          finish_send(c, tt, Status::fault, "timeout");
        } else {
          on_ack_seen(c, tt, res.at);
        }
      });
}

void P2p::on_ack_seen(ChannelState& cs, Transfer& t, SimTime at) {
  const MetadataField f = fab_.read_metadata(cs.chan.src, cs.chan.local_meta_index);
  t.acked = f.chunk_id;
  if (t.stall_since && t.next_chunk - 1 - t.acked < window()) {
    t.info.stall += at - *t.stall_since;
    t.stall_since.reset();
  }
  if (f.reserved == 1 && t.acked >= t.info.chunks) {
    finish_send(cs, t, Status::complete, "");
    return;
  }
  issue_chunks(cs, t);
  sender_poll(cs, t);
}

void P2p::start_recv(ChannelState& cs, Transfer& r) {
  const SimTime now = fab_.engine().now();
  r.info.started = now;
  r.deadline = now + opts_.timeout;
  r.copy_free = now;
  receiver_poll(cs, r);
}

void P2p::receiver_poll(ChannelState& cs, Transfer& r) {
  const SimTime now = fab_.engine().now();
  if (now >= r.deadline) {
    finish_recv(cs, r, Status::fault, "timeout");
    return;
  }
  const std::uint64_t processed = r.processed;
  const int cores = r.req.mode == Mode::sync ? r.req.cores : 0;
  const std::uint64_t id = r.id;
  const auto key = r.key;
  r.poll = fab_.poll(
      cs.chan.dst, fab_.layout().field_addr(cs.chan.remote_meta_index), MetadataField::kBytes,
      [processed](std::span<const std::byte> b) {
        return MetadataField::decode(b).chunk_id > processed;
      },
      r.deadline - now, cores,
      [this, id, key](const fabric::PollResult& res) {
        Transfer& rr = *transfers_.at(id);
        ChannelState& c = *channels_.at(key);
        rr.poll = 0;
        if (!res.satisfied) {
          finish_recv(c, rr, Status::fault, "timeout");
        } else {
          on_data_seen(c, rr, res.at);
        }
      });
}

void P2p::on_data_seen(ChannelState& cs, Transfer& r, SimTime at) {
  const MetadataField f = fab_.read_metadata(cs.chan.dst, cs.chan.remote_meta_index);
  const Transfer* sender = cs.active_send ? transfers_.at(cs.active_send).get() : nullptr;
  std::string why;
  if (f.event_id != r.req.event_id) {
    why = "event_id mismatch: expected " + std::to_string(r.req.event_id) + ", got " +
          std::to_string(f.event_id);
  } else if (f.reserved != r.req.payload_len) {
    why = "length mismatch: expected " + std::to_string(r.req.payload_len) + ", got " +
          std::to_string(f.reserved);
  } else if (sender && sender->req.zero_copy != r.req.zero_copy) {
    why = "zero-copy flag mismatch";
  }
  if (!why.empty()) {
    fab_.report_fault({at, cs.chan.dst.die, cs.chan.src.die, "protocol", why});
    finish_recv(cs, r, Status::fault, "protocol: " + why);
    return;
  }

  const std::uint64_t chunk = chunk_bytes();
  const std::uint64_t n = fabric::chunk_count(r.req.payload_len, chunk);
  r.info.chunks = n;
  const auto& m = fab_.model();
  auto& ring = fab_.ring(cs.chan.dst, cs.chan.src);
  const std::uint64_t last = std::min<std::uint64_t>(f.chunk_id, n);
  for (std::uint64_t k = r.processed + 1; k <= last; ++k) {
    const std::uint64_t off = (k - 1) * chunk;
    const std::uint64_t b = std::min(chunk, r.req.payload_len - off);
    const std::uint64_t seq = cs.recv_seq++;
    const SimTime copy_start = std::max(at, r.copy_free);
    const SimTime copy_done =
        r.req.zero_copy ? copy_start : copy_start + m.local_copy_latency(b, r.req.cores);
    r.copy_free = copy_done;
    const std::uint64_t id = r.id;
    const auto key = r.key;
    fab_.engine().schedule_at(copy_done, [this, id, key, k, n, off, b, seq, &ring, &m]() {
      Transfer& rr = *transfers_.at(id);
      ChannelState& c = *channels_.at(key);
      if (rr.info.status != Status::pending) return;
      const SimTime now = fab_.engine().now();
      if (!rr.req.zero_copy) {
        fab_.memory(c.chan.dst).apply(rr.addr + off,
                                      fab_.memory(c.chan.dst).extract(ring.slot_addr(seq), b));
        ring.on_drain(seq);
        fab_.trace().record(now, c.chan.dst.die, "recv_copy", c.chan.src.die, b,
                            "chunk=" + std::to_string(k));
      }
      rr.info.chunk_ids.push_back(k);
      const MetadataField ack{rr.req.event_id, k, ring.head(), k == n ? 1u : 0u};
      fab_.write_metadata_at(now + m.mem_startup(), c.chan.dst, c.chan.src,
                             c.chan.local_meta_index, ack);
      fab_.trace().record(now, c.chan.dst.die, "recv_ack", c.chan.src.die, 0,
                          "event=" + std::to_string(rr.req.event_id) + " chunk=" +
                              std::to_string(k) + (k == n ? " done" : ""));
      if (k == n) {
        rr.info.data_visible = now;
        rr.info.final_ack = now;
        finish_recv(c, rr, Status::complete, "");
      }
    });
  }
  r.processed = last;
  if (last >= n) {
    // Fully read: clear the field so the next transfer starts from chunk 0.
    fab_.memory(cs.chan.dst).zero(fab_.layout().field_addr(cs.chan.remote_meta_index),
                                  MetadataField::kBytes);
  } else {
    receiver_poll(cs, r);
  }
}

void P2p::finish_send(ChannelState& cs, Transfer& t, Status st, const std::string& why) {
  const SimTime now = fab_.engine().now();
  if (t.poll) {
    fab_.cancel_poll(t.poll);
    t.poll = 0;
  }
  t.info.status = st;
  t.info.completed = now;
  t.info.fault = why;
  if (t.stall_since) {
    t.info.stall += now - *t.stall_since;
    t.stall_since.reset();
  }
  if (t.req.mode == Mode::async && t.req.semantics == Semantics::memory) {
    fab_.charge_cores(cs.chan.src, t.req.cores, t.info.started, t.stream_free);
  }
  if (st == Status::fault) {
    fab_.report_fault({now, cs.chan.src.die, cs.chan.dst.die, "timeout",
                       "send event=" + std::to_string(t.req.event_id) + " " + why});
    // Abort: discard what the receiver never consumed.
    fab_.ring(cs.chan.dst, cs.chan.src).reset();
    cs.recv_seq = cs.next_seq;
    fab_.memory(cs.chan.dst).zero(fab_.layout().field_addr(cs.chan.remote_meta_index),
                                  MetadataField::kBytes);
  }
  if (die_busy_.contains(cs.chan.src.die) && die_busy_[cs.chan.src.die] == t.id) {
    die_busy_.erase(cs.chan.src.die);
  }
  cs.active_send = 0;
  cs.sends.pop_front();
  pump();
}

void P2p::finish_recv(ChannelState& cs, Transfer& r, Status st, const std::string& why) {
  const SimTime now = fab_.engine().now();
  if (r.poll) {
    fab_.cancel_poll(r.poll);
    r.poll = 0;
  }
  r.info.status = st;
  r.info.completed = now;
  r.info.fault = why;
  if (st == Status::fault && why == "timeout") {
    fab_.report_fault({now, cs.chan.dst.die, cs.chan.src.die, "timeout",
                       "receive event=" + std::to_string(r.req.event_id)});
  }
  if (r.req.mode == Mode::async && !r.req.zero_copy) {
    fab_.charge_cores(cs.chan.dst, r.req.cores, r.info.started, r.copy_free);
  }
  cs.active_recv = 0;
  cs.recvs.pop_front();
  pump();
}

Status P2p::poll_completion(Handle h) {
  auto it = transfers_.find(h.id);
  if (it == transfers_.end()) throw UsageError("unknown handle");
  Transfer& t = *it->second;
  if (t.consumed) throw UsageError("handle already consumed");
  if (t.info.status == Status::pending) return Status::pending;
  t.consumed = true;
  return t.info.status;
}

const TransferInfo& P2p::info(Handle h) const {
  auto it = transfers_.find(h.id);
  if (it == transfers_.end()) throw UsageError("unknown handle");
  return it->second->info;
}

}  // namespace podsim::xccl
