// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "podsim/core/time.hpp"

namespace podsim {

/// One row of the event trace. Exported as CSV with columns
/// `time_ns,node,op,peer,size,detail`; peer is -1 when not applicable.
struct TraceRecord {
  SimTime time{0};
  int node = -1;
  std::string op;
  int peer = -1;
  std::uint64_t size = 0;
  std::string detail;

  bool operator==(const TraceRecord&) const = default;
};

class Trace {
 public:
  void record(SimTime time, int node, std::string op, int peer = -1,
              std::uint64_t size = 0, std::string detail = {});

  const std::vector<TraceRecord>& records() const { return records_; }
  std::vector<TraceRecord> filter(std::string_view op) const;
  std::size_t count(std::string_view op) const;
  void clear() { records_.clear(); }
  void set_enabled(bool on) { enabled_ = on; }
  bool enabled() const { return enabled_; }

  void write_csv(std::ostream& out) const;

 private:
  bool enabled_ = true;
  std::vector<TraceRecord> records_;
};

}  // namespace podsim
