// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/eplb/eplb.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace podsim::eplb {

LoadTable::LoadTable(int layers, int experts, int slices)
    : layers_(layers), experts_(experts), slices_(slices) {
  if (layers < 1 || experts < 1 || slices < 1) {
    throw ConfigError("load table needs at least one layer, expert and slice");
  }
  counts_.assign(static_cast<std::size_t>(layers) * experts * slices, 0);
}

std::size_t LoadTable::index(int layer, int expert, int slice) const {
  if (layer < 0 || layer >= layers_ || expert < 0 || expert >= experts_ || slice < 0 ||
      slice >= slices_) {
    throw std::out_of_range("load table index");
  }
  return (static_cast<std::size_t>(layer) * experts_ + expert) * slices_ + slice;
}

std::uint64_t& LoadTable::at(int layer, int expert, int slice) {
  return counts_[index(layer, expert, slice)];
}

std::uint64_t LoadTable::at(int layer, int expert, int slice) const {
  return counts_[index(layer, expert, slice)];
}

std::uint64_t LoadTable::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t LoadTable::expert_total(int layer, int expert) const {
  std::uint64_t n = 0;
  for (int t = 0; t < slices_; ++t) n += at(layer, expert, t);
  return n;
}

nlohmann::json LoadTable::to_json() const {
  nlohmann::json counts = nlohmann::json::array();
  for (int l = 0; l < layers_; ++l) {
    nlohmann::json layer = nlohmann::json::array();
    for (int e = 0; e < experts_; ++e) {
      nlohmann::json row = nlohmann::json::array();
      for (int t = 0; t < slices_; ++t) row.push_back(at(l, e, t));
      layer.push_back(std::move(row));
    }
    counts.push_back(std::move(layer));
  }
  return {{"layers", layers_}, {"experts", experts_}, {"slices", slices_}, {"counts", counts}};
}

LoadTable LoadTable::from_json(const nlohmann::json& j) {
  try {
    LoadTable t(j.at("layers").get<int>(), j.at("experts").get<int>(), j.at("slices").get<int>());
    const auto& c = j.at("counts");
    if (c.size() != static_cast<std::size_t>(t.layers_)) throw ConfigError("counts: layer count");
    for (int l = 0; l < t.layers_; ++l) {
      if (c[l].size() != static_cast<std::size_t>(t.experts_)) {
        throw ConfigError("counts: expert count in layer " + std::to_string(l));
      }
      for (int e = 0; e < t.experts_; ++e) {
        if (c[l][e].size() != static_cast<std::size_t>(t.slices_)) {
          throw ConfigError("counts: slice count for expert " + std::to_string(e));
        }
        for (int s = 0; s < t.slices_; ++s) {
          const auto v = c[l][e][s].get<std::int64_t>();
          if (v < 0) throw ConfigError("counts must be non-negative");
          t.at(l, e, s) = static_cast<std::uint64_t>(v);
        }
      }
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("load table JSON: ") + e.what());
  }
}

std::vector<RoutingRecord> read_routing_trace(std::istream& in) {
  std::vector<RoutingRecord> out;
  std::string line;
  int lineno = 0;
  if (!std::getline(in, line)) return out;
  ++lineno;
  if (line.rfind("time_ns,layer,token,expert", 0) != 0) {
    throw ConfigError("routing trace header must be time_ns,layer,token,expert", 1);
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[4];
    for (auto& s : f) {
      if (!std::getline(ss, s, ',')) throw ConfigError("routing trace: short row", lineno);
    }
    try {
      std::size_t used = 0;
      RoutingRecord r;
      r.time = SimTime{std::stoll(f[0], &used)};
      r.layer = std::stoi(f[1]);
      r.token = std::stoi(f[2]);
      r.expert = std::stoi(f[3]);
      out.push_back(r);
    } catch (const std::exception&) {
      throw ConfigError("routing trace: malformed number", lineno);
    }
  }
  return out;
}

std::vector<RoutingRecord> read_routing_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open routing trace " + path);
  return read_routing_trace(in);
}

void write_routing_trace(std::ostream& out, const std::vector<RoutingRecord>& trace) {
  out << "time_ns,layer,token,expert\n";
  for (const auto& r : trace) {
    out << r.time.count() << ',' << r.layer << ',' << r.token << ',' << r.expert << '\n';
  }
}

LoadTable collect_load(const std::vector<RoutingRecord>& trace, SimTime slice_width, int layers,
                       int experts) {
  if (slice_width <= SimTime{0}) throw ConfigError("slice width must be positive");
  SimTime prev{0};
  std::int64_t last_slice = 0;
  for (const auto& r : trace) {
    if (r.time < prev) throw ConfigError("routing trace timestamps must be monotone");
    if (r.time < SimTime{0}) throw ConfigError("routing trace timestamps must be non-negative");
    if (r.layer < 0 || r.layer >= layers || r.expert < 0 || r.expert >= experts) {
      throw ConfigError("routing trace names an unknown layer or expert");
    }
    prev = r.time;
    last_slice = r.time / slice_width;
  }
  LoadTable t(layers, experts, static_cast<int>(last_slice) + 1);
  for (const auto& r : trace) ++t.at(r.layer, r.expert, static_cast<int>(r.time / slice_width));
  return t;
}

int hottest_expert(const LoadTable& load, int layer, int slice) {
  int best = 0;
  for (int e = 1; e < load.experts(); ++e) {
    if (load.at(layer, e, slice) > load.at(layer, best, slice)) best = e;
  }
  return best;
}

std::uint64_t split_load(std::uint64_t count, int replicas) {
  const auto m = static_cast<std::uint64_t>(std::max(replicas, 1));
  return (count + m - 1) / m;
}

namespace {

int replicas_of(const std::vector<int>& replicas, int e) {
  return replicas.empty() ? 1 : replicas[e];
}

int hottest_split(const LoadTable& load, int layer, int slice, const std::vector<int>& replicas) {
  int best = 0;
  std::uint64_t best_v = split_load(load.at(layer, 0, slice), replicas_of(replicas, 0));
  for (int e = 1; e < load.experts(); ++e) {
    const auto v = split_load(load.at(layer, e, slice), replicas_of(replicas, e));
    if (v > best_v) {
      best = e;
      best_v = v;
    }
  }
  return best;
}

}  // namespace

std::uint64_t layer_load(const LoadTable& load, int layer, const std::vector<int>& replicas) {
  std::uint64_t total = 0;
  for (int t = 0; t < load.slices(); ++t) {
    const int h = hottest_split(load, layer, t, replicas);
    total += split_load(load.at(layer, h, t), replicas_of(replicas, h));
  }
  return total;
}

GreedyResult select_redundant(const LoadTable& load, int layer, int budget) {
  if (budget < 0) throw ConfigError("redundancy budget must be >= 0");
  GreedyResult r;
  r.replicas.assign(load.experts(), 1);
  r.history.push_back(layer_load(load, layer, r.replicas));
  for (int i = 0; i < budget; ++i) {
    std::vector<bool> candidate(load.experts(), false);
    for (int t = 0; t < load.slices(); ++t) candidate[hottest_split(load, layer, t, r.replicas)] = true;
    int best = -1;
    std::uint64_t best_l = 0;
    for (int c = 0; c < load.experts(); ++c) {
      if (!candidate[c]) continue;
      ++r.replicas[c];
      const auto l = layer_load(load, layer, r.replicas);
      --r.replicas[c];
      if (best < 0 || l < best_l) {
        best = c;
        best_l = l;
      }
    }
    ++r.replicas[best];
    r.selected.push_back(best);
    r.history.push_back(best_l);
  }
  return r;
}

GreedyResult optimal_redundant(const LoadTable& load, int layer, int budget) {
  if (budget < 0) throw ConfigError("redundancy budget must be >= 0");
  const int n = load.experts();
  std::vector<int> cur(n, 1);
  std::vector<int> best = cur;
  std::uint64_t best_l = layer_load(load, layer, cur);
  const std::uint64_t native = best_l;
  std::function<void(int, int)> rec = [&](int e, int left) {
    if (e == n - 1) {
      cur[e] = 1 + left;
      const auto l = layer_load(load, layer, cur);
      if (l < best_l) {
        best_l = l;
        best = cur;
      }
      cur[e] = 1;
      return;
    }
    for (int k = 0; k <= left; ++k) {
      cur[e] = 1 + k;
      rec(e + 1, left - k);
    }
    cur[e] = 1;
  };
  rec(0, budget);
  GreedyResult r;
  r.replicas = best;
  r.history = {native, best_l};
  for (int e = 0; e < n; ++e) {
    for (int k = 1; k < best[e]; ++k) r.selected.push_back(e);
  }
  return r;
}

std::vector<Placement> place_replicas(std::vector<ReplicaRequest> replicas,
                                      std::vector<double>& node_loads,
                                      std::vector<int>& free_slots) {
  if (node_loads.size() != free_slots.size()) throw ConfigError("node loads and slots differ");
  std::stable_sort(replicas.begin(), replicas.end(),
                   [](const ReplicaRequest& a, const ReplicaRequest& b) { return a.load > b.load; });
  std::vector<Placement> out;
  std::vector<int> unplaced;
  for (const auto& r : replicas) {
    int best = -1;
    for (std::size_t n = 0; n < node_loads.size(); ++n) {
      if (free_slots[n] <= 0) continue;
      if (best < 0 || node_loads[n] < node_loads[best]) best = static_cast<int>(n);
    }
    if (best < 0) {
      unplaced.push_back(r.expert);
      continue;
    }
    node_loads[best] += r.load;
    --free_slots[best];
    out.push_back({r.expert, best});
  }
  if (!unplaced.empty()) {
    std::string list;
    for (int e : unplaced) list += " " + std::to_string(e);
    throw PlacementError("no free redundancy slot for experts" + list, unplaced);
  }
  return out;
}

std::vector<Placement> place_round_robin(const std::vector<ReplicaRequest>& replicas,
                                         std::vector<double>& node_loads,
                                         std::vector<int>& free_slots) {
  std::vector<Placement> out;
  const std::size_t n = node_loads.size();
  std::size_t next = 0;
  for (const auto& r : replicas) {
    std::size_t tries = 0;
    while (tries < n && free_slots[next] <= 0) {
      next = (next + 1) % n;
      ++tries;
    }
    if (tries == n) throw PlacementError("no free redundancy slot", {r.expert});
    node_loads[next] += r.load;
    --free_slots[next];
    out.push_back({r.expert, static_cast<int>(next)});
    next = (next + 1) % n;
  }
  return out;
}

ReplicaAssignment ReplicaAssignment::native(int layers, int experts, int num_nodes,
                                            int redundant_per_node, int budget) {
  if (layers < 1 || experts < 1 || num_nodes < 1 || redundant_per_node < 0 || budget < 0) {
    throw ConfigError("invalid EPLB layout");
  }
  ReplicaAssignment a;
  a.num_nodes = num_nodes;
  a.primary_per_node = (experts + num_nodes - 1) / num_nodes;
  a.redundant_per_node = redundant_per_node;
  a.budget = budget;
  a.slots.assign(layers, std::vector<std::vector<int>>(experts));
  for (int l = 0; l < layers; ++l) {
    for (int e = 0; e < experts; ++e) {
      a.slots[l][e] = {(e / a.primary_per_node) * a.slots_per_node() + e % a.primary_per_node};
    }
  }
  return a;
}

void ReplicaAssignment::validate() const {
  const int spn = slots_per_node();
  const int total_slots = num_nodes * spn;
  for (std::size_t l = 0; l < slots.size(); ++l) {
    std::vector<int> owner(total_slots, -1);
    int redundant = 0;
    for (std::size_t e = 0; e < slots[l].size(); ++e) {
      const auto& s = slots[l][e];
      if (s.empty()) throw ConfigError("expert " + std::to_string(e) + " has no slot");
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] < 0 || s[i] >= total_slots) throw ConfigError("slot id out of range");
        if (owner[s[i]] >= 0) throw ConfigError("slot " + std::to_string(s[i]) + " hosts two experts");
        owner[s[i]] = static_cast<int>(e);
        const bool primary_slot = s[i] % spn < primary_per_node;
        if ((i == 0) != primary_slot) throw ConfigError("primary/redundant slot kind mismatch");
        if (i > 0) ++redundant;
      }
    }
    if (redundant > budget) throw ConfigError("redundant replicas exceed the budget");
  }
}

nlohmann::json ReplicaAssignment::to_json() const {
  return {{"num_nodes", num_nodes},
          {"primary_per_node", primary_per_node},
          {"redundant_per_node", redundant_per_node},
          {"budget", budget},
          {"slots", slots}};
}

ReplicaAssignment ReplicaAssignment::from_json(const nlohmann::json& j) {
  ReplicaAssignment a;
  try {
    a.num_nodes = j.at("num_nodes").get<int>();
    a.primary_per_node = j.at("primary_per_node").get<int>();
    a.redundant_per_node = j.at("redundant_per_node").get<int>();
    a.budget = j.at("budget").get<int>();
    a.slots = j.at("slots").get<std::vector<std::vector<std::vector<int>>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("assignment JSON: ") + e.what());
  }
  a.validate();
  return a;
}

LayerPlan plan_layer(const LoadTable& load, int layer, ReplicaAssignment& a) {
  if (a.experts() != load.experts()) throw ConfigError("assignment and load disagree on experts");
  auto& layer_slots = a.slots.at(layer);
  for (const auto& s : layer_slots) {
    if (s.size() != 1) throw ConfigError("plan_layer expects primaries only");
  }
  const int capacity = a.num_nodes * a.redundant_per_node;
  LayerPlan p;
  p.greedy = select_redundant(load, layer, std::min(a.budget, capacity));

  const int n = load.experts();
  std::vector<double> native_node(a.num_nodes, 0.0);
  std::vector<double> node(a.num_nodes, 0.0);
  std::vector<ReplicaRequest> requests;
  for (int e = 0; e < n; ++e) {
    const double total = static_cast<double>(load.expert_total(layer, e));
    const int m = p.greedy.replicas[e];
    const int home = a.node_of_slot(layer_slots[e][0]);
    native_node[home] += total;
    node[home] += total / m;
    p.native_max_slot_load = std::max(p.native_max_slot_load, total);
    p.balanced_max_slot_load = std::max(p.balanced_max_slot_load, total / m);
    for (int k = 1; k < m; ++k) requests.push_back({e, total / m});
  }
  std::vector<int> free(a.num_nodes, a.redundant_per_node);
  p.placements = place_replicas(requests, node, free);

  std::vector<int> used(a.num_nodes, 0);
  for (const auto& pl : p.placements) {
    const int slot = pl.node * a.slots_per_node() + a.primary_per_node + used[pl.node]++;
    layer_slots[pl.expert].push_back(slot);
  }
  p.native_max_node_load = *std::max_element(native_node.begin(), native_node.end());
  p.balanced_max_node_load = *std::max_element(node.begin(), node.end());
  return p;
}

MappingTable::MappingTable(int batch, const std::vector<std::vector<int>>& slots)
    : batch_(batch), experts_(static_cast<int>(slots.size())) {
  if (batch < 1) throw ConfigError("mapping batch must be >= 1");
  table_.resize(static_cast<std::size_t>(batch) * experts_);
  for (int r = 0; r < batch; ++r) {
    for (int e = 0; e < experts_; ++e) {
      const auto& s = slots[e];
      if (s.empty()) throw ConfigError("expert without slots in mapping");
      table_[static_cast<std::size_t>(r) * experts_ + e] = s[r % s.size()];
    }
  }
}

nlohmann::json MappingTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < batch_; ++r) {
    rows.push_back(std::vector<int>(table_.begin() + static_cast<std::ptrdiff_t>(r) * experts_,
                                    table_.begin() + static_cast<std::ptrdiff_t>(r + 1) * experts_));
  }
  return {{"batch", batch_}, {"experts", experts_}, {"rows", rows}};
}

MappingTable build_mapping(const ReplicaAssignment& a, int layer, int batch) {
  return MappingTable(batch, a.slots.at(layer));
}

int route_token(int token_pos, int logical_expert, const MappingTable& table) {
  if (token_pos < 0 || logical_expert < 0 || logical_expert >= table.experts()) {
    throw std::out_of_range("route_token");
  }
  return table.at(token_pos % table.batch(), logical_expert);
}

const char* phase_name(ReconfigPhase p) {
  switch (p) {
    case ReconfigPhase::idle: return "idle";
    case ReconfigPhase::prefetch: return "prefetch";
    case ReconfigPhase::disable: return "disable";
    case ReconfigPhase::load: return "load";
    case ReconfigPhase::restore: return "restore";
    case ReconfigPhase::done: return "done";
  }
  return "?";
}

Reconfiguration::Reconfiguration(Engine& engine, ReplicaAssignment current,
                                 ReplicaAssignment next, PhaseDurations durations)
    : engine_(engine),
      current_(std::move(current)),
      next_(std::move(next)),
      durations_(durations) {
  current_.validate();
  next_.validate();
  if (current_.slots.size() != next_.slots.size()) throw ConfigError("layer count changed");
  primaries_ = current_.slots;
  for (std::size_t l = 0; l < primaries_.size(); ++l) {
    if (next_.slots[l].size() != primaries_[l].size()) throw ConfigError("expert count changed");
    for (std::size_t e = 0; e < primaries_[l].size(); ++e) {
      if (next_.slots[l][e].front() != primaries_[l][e].front()) {
        throw ConfigError("reconfiguration cannot move a primary expert");
      }
      primaries_[l][e].resize(1);
    }
  }
  active_ = &current_.slots;
}

void Reconfiguration::enter(ReconfigPhase p, SimTime len) {
  phase_ = p;
  const SimTime now = engine_.now();
  records_.push_back({p, now, now + len});
  switch (p) {
    case ReconfigPhase::prefetch: active_ = &current_.slots; break;
    case ReconfigPhase::disable:
    case ReconfigPhase::load: active_ = &primaries_; break;
    case ReconfigPhase::restore:
    case ReconfigPhase::done: active_ = &next_.slots; break;
    case ReconfigPhase::idle: break;
  }
  if (p == ReconfigPhase::done) return;
  const auto following = static_cast<ReconfigPhase>(static_cast<int>(p) + 1);
  SimTime next_len{0};
  switch (following) {
    case ReconfigPhase::disable: next_len = durations_.disable; break;
    case ReconfigPhase::load: next_len = durations_.load; break;
    case ReconfigPhase::restore: next_len = durations_.restore; break;
    default: break;
  }
  engine_.schedule_after(len, [this, following, next_len] { enter(following, next_len); });
}

void Reconfiguration::start() {
  if (phase_ != ReconfigPhase::idle) throw UsageError("reconfiguration already started");
  enter(ReconfigPhase::prefetch, durations_.prefetch);
}

int Reconfiguration::route(int layer, int token_pos, int expert) const {
  const auto& s = (*active_).at(layer).at(expert);
  return s[static_cast<std::size_t>(token_pos) % s.size()];
}

bool Reconfiguration::slot_enabled(int layer, int slot) const {
  for (const auto& s : (*active_).at(layer)) {
    if (std::find(s.begin(), s.end(), slot) != s.end()) return true;
  }
  return false;
}

LoadTable make_skewed_load(int experts, int slices, double skew, std::uint64_t tokens_per_slice,
                           std::uint64_t seed) {
  if (experts < 2 || skew < 1.0 || skew >= experts) throw ConfigError("invalid skew setup");
  LoadTable t(1, experts, slices);
  std::mt19937_64 rng(seed);
  const int hot = static_cast<int>(rng() % static_cast<std::uint64_t>(experts));
  const double mean = static_cast<double>(tokens_per_slice) / experts;
  std::vector<double> w(experts, 0.0);
  std::vector<int> order(experts);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  double wsum = 0;
  for (int i = 0; i < experts; ++i) {
    const int e = order[i];
    if (e == hot) continue;
    w[e] = 1.0 / std::sqrt(1.0 + i);
    wsum += w[e];
  }
  const double rest = static_cast<double>(tokens_per_slice) - skew * mean;
  std::uniform_real_distribution<double> noise(0.9, 1.1);
  for (int s = 0; s < slices; ++s) {
    for (int e = 0; e < experts; ++e) {
      const double v = e == hot ? skew * mean : rest * w[e] / wsum * noise(rng);
      t.at(0, e, s) = static_cast<std::uint64_t>(std::llround(v));
    }
  }
  return t;
}

nlohmann::json analyze(const LoadTable& load, int num_nodes, int redundant_per_node, int budget) {
  auto a = ReplicaAssignment::native(load.layers(), load.experts(), num_nodes, redundant_per_node,
                                     budget);
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < load.layers(); ++l) {
    const auto p = plan_layer(load, l, a);
    nlohmann::json placements = nlohmann::json::array();
    for (const auto& pl : p.placements) placements.push_back({{"expert", pl.expert}, {"node", pl.node}});
    layers.push_back({{"layer", l},
                      {"selected", p.greedy.selected},
                      {"simulated_load", p.greedy.history},
                      {"placements", placements},
                      {"native_max_slot_load", p.native_max_slot_load},
                      {"balanced_max_slot_load", p.balanced_max_slot_load},
                      {"native_max_node_load", p.native_max_node_load},
                      {"balanced_max_node_load", p.balanced_max_node_load}});
  }
  return {{"budget", budget},
          {"nodes", num_nodes},
          {"redundant_per_node", redundant_per_node},
          {"load", {{"layers", load.layers()}, {"experts", load.experts()}, {"slices", load.slices()},
                    {"tokens", load.total()}}},
          {"layers", layers},
          {"assignment", a.to_json()}};
}

}  // namespace podsim::eplb
