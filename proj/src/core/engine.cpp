// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/core/engine.hpp"

#include <stdexcept>

namespace podsim {

EventId Engine::schedule_at(SimTime at, Action action) {
  if (at < now_) {
    throw std::logic_error("event scheduled in the past");
  }
  const EventId id = ++seq_;
  queue_.push(Entry{at, id, id, std::move(action)});
  scheduled_.insert(id);
  ++live_;
  return id;
}

bool Engine::cancel(EventId id) {
  if (!scheduled_.contains(id)) return false;
  scheduled_.erase(id);
  cancelled_.insert(id);
  --live_;
  return true;
}

bool Engine::step() {
  while (!queue_.empty()) {
    const Entry& top = queue_.top();
    if (cancelled_.erase(top.id) > 0) {
      queue_.pop();
      continue;
    }
    Action action = std::move(top.action);
    now_ = top.at;
    scheduled_.erase(top.id);
    queue_.pop();
    --live_;
    ++fired_;
    action();
    return true;
  }
  return false;
}

std::uint64_t Engine::run() {
  std::uint64_t n = 0;
  while (step()) ++n;
  return n;
}

std::uint64_t Engine::run_until(SimTime horizon) {
  std::uint64_t n = 0;
  while (!queue_.empty()) {
    const Entry& top = queue_.top();
    if (cancelled_.erase(top.id) > 0) {
      queue_.pop();
      continue;
    }
    if (top.at > horizon) break;
    step();
    ++n;
  }
  if (now_ < horizon) now_ = horizon;
  return n;
}

}  // namespace podsim
