// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "podsim/fabric/fabric.hpp"

namespace podsim::xccl {

using fabric::Addr;
using fabric::NodeId;

enum class Mode { sync, async };
enum class Semantics { memory, dma };

struct TransferRequest {
  std::uint64_t event_id = 0;
  std::uint64_t payload_len = 0;
  int cores = 1;
  Mode mode = Mode::sync;
  Semantics semantics = Semantics::memory;
  // Sender writes straight into the receiver's app area; needs a posted receive.
  bool zero_copy = false;
};

/// One ordered (src, dst) pair. The data ring lives on dst; data metadata is
/// published into dst's field for src and acknowledgments into src's field
/// for dst.
struct Channel {
  NodeId src;
  NodeId dst;
  std::uint64_t local_meta_index = 0;   // ack field on src
  std::uint64_t remote_meta_index = 0;  // data field on dst
};

enum class Status { pending, complete, fault };

struct Handle {
  std::uint64_t id = 0;
  bool operator==(const Handle&) const = default;
};

/// Outcome of one posted send or receive. Times are absolute simulated time.
struct TransferInfo {
  Status status = Status::pending;
  std::uint64_t event_id = 0;
  std::uint64_t payload_len = 0;
  std::uint64_t chunks = 0;
  SimTime posted{0};
  SimTime started{0};
  SimTime completed{0};      // sender: Step 8 seen; receiver: final ack issued
  SimTime data_visible{0};   // receiver: last byte in the app area
  SimTime final_ack{0};      // receiver: when the done-flag ack was issued
  SimTime stall{0};          // sender time spent waiting on the window
  std::vector<std::uint64_t> chunk_ids;  // receiver: chunk ids in consume order
  std::string fault;
};

struct P2pOptions {
  SimTime timeout = from_ms(10);
  // Outstanding unacknowledged chunks per channel; 0 means ring slots / 2.
  std::uint64_t window = 0;
};

/// Send/receive over the shared-memory fabric.
///
/// Sender: stage chunk into core buffer, write into the peer's ring slot,
/// publish the tail in the peer's metadata, then busy-poll its own metadata
/// for acknowledgments. Receiver: poll for a tail advance, copy the slot into
/// the app area and acknowledge; the last ack carries the done flag.
class P2p {
 public:
  P2p(fabric::Fabric& fab, P2pOptions opts = {});
  ~P2p();
  P2p(const P2p&) = delete;
  P2p& operator=(const P2p&) = delete;

  Channel& channel(NodeId src, NodeId dst);

  Handle send(Channel& chan, const TransferRequest& req, Addr src_addr);
  Handle receive(Channel& chan, const TransferRequest& req, Addr dst_addr);
  Handle send_async(Channel& chan, TransferRequest req, Addr src_addr);
  Handle receive_async(Channel& chan, TransferRequest req, Addr dst_addr);

  /// Pending until the transfer completes at or before now. Reporting a
  /// final status consumes the handle; polling it again throws UsageError.
  Status poll_completion(Handle h);
  const TransferInfo& info(Handle h) const;

  fabric::Fabric& fabric() { return fab_; }
  std::uint64_t window() const;
  std::uint64_t chunk_bytes() const;

 private:
  struct Transfer;
  struct ChannelState;

  Handle post(Channel& chan, const TransferRequest& req, Addr addr, bool is_send);
  void pump();
  void start_send(ChannelState& cs, Transfer& t);
  void start_recv(ChannelState& cs, Transfer& r);
  void issue_chunks(ChannelState& cs, Transfer& t);
  void sender_poll(ChannelState& cs, Transfer& t);
  void on_ack_seen(ChannelState& cs, Transfer& t, SimTime at);
  void receiver_poll(ChannelState& cs, Transfer& r);
  void on_data_seen(ChannelState& cs, Transfer& r, SimTime at);
  void finish_send(ChannelState& cs, Transfer& t, Status st, const std::string& why);
  void finish_recv(ChannelState& cs, Transfer& r, Status st, const std::string& why);
  ChannelState& state_of(const Channel& chan);

  fabric::Fabric& fab_;
  P2pOptions opts_;
  std::map<std::pair<int, int>, std::unique_ptr<ChannelState>> channels_;
  std::map<std::uint64_t, std::unique_ptr<Transfer>> transfers_;
  std::map<int, std::uint64_t> die_busy_;  // die -> blocking sync send id
  std::uint64_t next_id_ = 0;
  bool pumping_ = false;
};

}  // namespace podsim::xccl
