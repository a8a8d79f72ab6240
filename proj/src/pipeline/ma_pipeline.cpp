// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/pipeline/ma_pipeline.hpp"

#include <algorithm>
#include <deque>
#include <functional>

#include "podsim/core/engine.hpp"
#include "podsim/core/error.hpp"

namespace podsim::pipeline {

const char* segment_name(SegmentKind k) {
  switch (k) {
    case SegmentKind::gap: return "gap";
    case SegmentKind::attention: return "attention";
    case SegmentKind::a2e: return "A2E";
    case SegmentKind::moe: return "MoE";
    case SegmentKind::e2a: return "E2A";
    case SegmentKind::mtp: return "MTP";
    case SegmentKind::host_dispatch: return "host_dispatch";
  }
  return "?";
}

void MaConfig::validate() const {
  if (domains < 1) throw ConfigError("MA pipeline needs at least one domain");
  if (microbatches < 1 || layers < 1) throw ConfigError("microbatches and layers must be >= 1");
  if (batch_per_die < 0 || attention_dies_per_domain < 1 || expert_dies < 1) {
    throw ConfigError("invalid MA deployment sizes");
  }
  if (!domain_offset_ms.empty() && domain_offset_ms.size() != static_cast<std::size_t>(domains)) {
    throw ConfigError("domain offsets must list every domain");
  }
  for (double v : {lat.attention_ms, lat.a2e_ms, lat.moe_ms, lat.e2a_ms, lat.gap_ms, lat.mtp_ms,
                   lat.host_launch_ms}) {
    if (v < 0) throw ConfigError("MA latencies must be >= 0");
  }
}

std::vector<Segment> IterationTimeline::of_kind(SegmentKind k) const {
  std::vector<Segment> out;
  for (const auto& s : segments) {
    if (s.kind == k) out.push_back(s);
  }
  return out;
}

nlohmann::json IterationTimeline::to_json() const {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : segments) {
    segs.push_back({{"domain", s.domain},
                    {"layer", s.layer},
                    {"microbatch", s.microbatch},
                    {"kind", segment_name(s.kind)},
                    {"start_ns", s.start.count()},
                    {"end_ns", s.end.count()}});
  }
  return {{"total_forward_ms", total_forward_ms},
          {"domain_forward_ms", domain_forward_ms},
          {"moe_utilization", moe_utilization()},
          {"segments", segs}};
}

namespace {

struct Job {
  int domain;
  int layer;
  int mb;
};

class MaSim {
 public:
  explicit MaSim(const MaConfig& cfg) : cfg_(cfg) {
    const int total = cfg.layers * cfg.microbatches;
    doms_.resize(cfg.domains);
    for (auto& d : doms_) d.e2a_done.assign(total, false);
    const SegmentKind kinds[3] = {SegmentKind::a2e, SegmentKind::moe, SegmentKind::e2a};
    const double ms[3] = {cfg.lat.a2e_ms, cfg.lat.moe_ms, cfg.lat.e2a_ms};
    for (int i = 0; i < 3; ++i) {
      streams_[i].kind = kinds[i];
      streams_[i].ms = ms[i];
    }
  }

  IterationTimeline run() {
    for (int d = 0; d < cfg_.domains; ++d) {
      const double off = cfg_.domain_offset_ms.empty()
                             ? d * cfg_.lat.attention_ms * cfg_.microbatches / cfg_.domains
                             : cfg_.domain_offset_ms[d];
      if (off < 0) throw ConfigError("domain offsets must be >= 0");
      doms_[d].start = from_ms(off);
      engine_.schedule_at(doms_[d].start, [this, d] {
        const SimTime end = engine_.now() + from_ms(cfg_.lat.gap_ms);
        add(d, -1, -1, SegmentKind::gap, engine_.now(), end);
        doms_[d].attention_busy = true;
        engine_.schedule_at(end, [this, d] {
          doms_[d].attention_busy = false;
          try_attention(d);
        });
      });
    }
    engine_.run();

    IterationTimeline t;
    t.segments = std::move(segs_);
    std::stable_sort(t.segments.begin(), t.segments.end(),
                     [](const Segment& a, const Segment& b) { return a.start < b.start; });
    for (const auto& d : doms_) {
      if (!d.finished) throw std::logic_error("MA pipeline did not finish");
      t.domain_forward_ms.push_back(to_ms(d.end - d.start));
      t.total_forward_ms = std::max(t.total_forward_ms, t.domain_forward_ms.back());
    }
    SimTime lo = SimTime::max();
    SimTime hi{0};
    for (const auto& s : t.segments) {
      lo = std::min(lo, s.start);
      hi = std::max(hi, s.end);
      if (s.kind == SegmentKind::moe) t.moe_busy_ms += to_ms(s.end - s.start);
    }
    t.span_ms = t.segments.empty() ? 0 : to_ms(hi - lo);
    return t;
  }

 private:
  struct Dom {
    SimTime start{0};
    SimTime end{0};
    int next = 0;
    bool attention_busy = false;
    int last_layer_done = 0;
    bool finished = false;
    std::vector<bool> e2a_done;
  };
  struct Stream {
    SegmentKind kind = SegmentKind::a2e;
    double ms = 0;
    bool busy = false;
    std::deque<Job> queue;
  };

  void add(int d, int layer, int mb, SegmentKind k, SimTime s, SimTime e) {
    segs_.push_back({d, layer, mb, k, s, e});
  }

  void try_attention(int d) {
    auto& dom = doms_[d];
    const int total = cfg_.layers * cfg_.microbatches;
    if (dom.attention_busy || dom.next >= total) return;
    const int layer = dom.next / cfg_.microbatches;
    const int mb = dom.next % cfg_.microbatches;
    if (layer > 0 && !dom.e2a_done[(layer - 1) * cfg_.microbatches + mb]) return;
    dom.attention_busy = true;
    const SimTime end = engine_.now() + from_ms(cfg_.lat.attention_ms);
    add(d, layer, mb, SegmentKind::attention, engine_.now(), end);
    engine_.schedule_at(end, [this, d, layer, mb] {
      doms_[d].attention_busy = false;
      ++doms_[d].next;
      request(0, Job{d, layer, mb});
      try_attention(d);
    });
  }

  void request(int stream, Job j) {
    streams_[stream].queue.push_back(j);
    if (!streams_[stream].busy) start_next(stream);
  }

  void start_next(int stream) {
    auto& st = streams_[stream];
    if (st.queue.empty()) return;
    const Job j = st.queue.front();
    st.queue.pop_front();
    st.busy = true;
    SimTime t = engine_.now();
    if (!cfg_.persistent_kernels) {
      const SimTime h = t + from_ms(cfg_.lat.host_launch_ms);
      add(j.domain, j.layer, j.mb, SegmentKind::host_dispatch, t, h);
      t = h;
    }
    const SimTime end = t + from_ms(st.ms);
    add(j.domain, j.layer, j.mb, st.kind, t, end);
    engine_.schedule_at(end, [this, stream, j] {
      streams_[stream].busy = false;
      if (stream < 2) {
        request(stream + 1, j);
      } else {
        finish_layer(j);
      }
      start_next(stream);
    });
  }

  void finish_layer(const Job& j) {
    auto& dom = doms_[j.domain];
    dom.e2a_done[j.layer * cfg_.microbatches + j.mb] = true;
    if (j.layer == cfg_.layers - 1 && ++dom.last_layer_done == cfg_.microbatches) {
      const SimTime end = engine_.now() + from_ms(cfg_.lat.mtp_ms);
      add(j.domain, -1, -1, SegmentKind::mtp, engine_.now(), end);
      const int d = j.domain;
      engine_.schedule_at(end, [this, d] {
        doms_[d].end = engine_.now();
        doms_[d].finished = true;
      });
      return;
    }
    try_attention(j.domain);
  }

  const MaConfig& cfg_;
  Engine engine_;
  std::vector<Dom> doms_;
  Stream streams_[3];
  std::vector<Segment> segs_;
};

}  // namespace

IterationTimeline ma_pipeline(const MaConfig& cfg) {
  cfg.validate();
  return MaSim(cfg).run();
}

double ma_forward_formula_ms(const MaConfig& cfg) {
  const auto& l = cfg.lat;
  return l.gap_ms + l.mtp_ms + l.attention_ms * cfg.microbatches * cfg.layers + l.a2e_ms +
         l.moe_ms + l.e2a_ms;
}

std::vector<Segment> persistent_moe_worker(const IterationTimeline& t) {
  std::vector<Segment> out;
  for (const auto& s : t.segments) {
    if (s.kind == SegmentKind::a2e || s.kind == SegmentKind::moe || s.kind == SegmentKind::e2a ||
        s.kind == SegmentKind::host_dispatch) {
      out.push_back(s);
    }
  }
  return out;
}

bool streams_exclusive(const IterationTimeline& t) {
  for (auto k : {SegmentKind::a2e, SegmentKind::moe, SegmentKind::e2a}) {
    auto segs = t.of_kind(k);
    std::sort(segs.begin(), segs.end(),
              [](const Segment& a, const Segment& b) { return a.start < b.start; });
    for (std::size_t i = 1; i < segs.size(); ++i) {
      if (segs[i].start < segs[i - 1].end) return false;
    }
  }
  return true;
}

}  // namespace podsim::pipeline
