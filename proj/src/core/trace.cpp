// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/core/trace.hpp"

#include <algorithm>

namespace podsim {

namespace {

void write_field(std::ostream& out, std::string_view s) {
  const bool quote = s.find_first_of(",\"\n") != std::string_view::npos;
  if (!quote) {
    out << s;
    return;
  }
  out << '"';
  for (char c : s) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

}  // namespace

void Trace::record(SimTime time, int node, std::string op, int peer,
                   std::uint64_t size, std::string detail) {
  if (!enabled_) return;
  records_.push_back(
      TraceRecord{time, node, std::move(op), peer, size, std::move(detail)});
}

std::vector<TraceRecord> Trace::filter(std::string_view op) const {
  std::vector<TraceRecord> out;
  std::copy_if(records_.begin(), records_.end(), std::back_inserter(out),
               [&](const TraceRecord& r) { return r.op == op; });
  return out;
}

std::size_t Trace::count(std::string_view op) const {
  return static_cast<std::size_t>(
      std::count_if(records_.begin(), records_.end(),
                    [&](const TraceRecord& r) { return r.op == op; }));
}

void Trace::write_csv(std::ostream& out) const {
  // Some ops are recorded when issued with a future timestamp; export in time order.
  std::vector<const TraceRecord*> sorted;
  sorted.reserve(records_.size());
  for (const auto& r : records_) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const TraceRecord* a, const TraceRecord* b) { return a->time < b->time; });
  out << "time_ns,node,op,peer,size,detail\n";
  for (const TraceRecord* rp : sorted) {
    const TraceRecord& r = *rp;
    out << r.time.count() << ',' << r.node << ',';
    write_field(out, r.op);
    out << ',' << r.peer << ',' << r.size << ',';
    write_field(out, r.detail);
    out << '\n';
  }
}

}  // namespace podsim
