// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <unordered_set>
#include <vector>

#include "podsim/core/time.hpp"

namespace podsim {

using EventId = std::uint64_t;

/// Single-threaded discrete-event engine.
///
/// Events fire in (time, insertion order) order, so identical schedules always
/// produce identical traces. Independent Engine instances share no state and
/// may run on different threads.
class Engine {
 public:
  using Action = std::function<void()>;

  SimTime now() const { return now_; }

  EventId schedule_at(SimTime at, Action action);
  EventId schedule_after(SimTime delay, Action action) {
    return schedule_at(now_ + delay, std::move(action));
  }
  /// Returns false if the event already fired or was never scheduled.
  bool cancel(EventId id);

  /// Fires the next event. Returns false when the queue is empty.
  bool step();
  /// Runs until no events remain. Returns the number of events fired.
  std::uint64_t run();
  /// Runs every event with time <= horizon, then advances the clock to horizon.
  std::uint64_t run_until(SimTime horizon);

  bool empty() const { return live_ == 0; }
  std::size_t pending() const { return live_; }
  std::uint64_t fired() const { return fired_; }

 private:
  struct Entry {
    SimTime at;
    std::uint64_t seq;
    EventId id;
    // Mutable so the action can be moved out of the priority queue top.
    mutable Action action;
  };
  struct Later {
    bool operator()(const Entry& a, const Entry& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.seq > b.seq;
    }
  };

  SimTime now_{0};
  std::uint64_t seq_ = 0;
  std::uint64_t fired_ = 0;
  std::size_t live_ = 0;
  std::priority_queue<Entry, std::vector<Entry>, Later> queue_;
  std::unordered_set<EventId> cancelled_;
  std::unordered_set<EventId> scheduled_;
};

}  // namespace podsim
