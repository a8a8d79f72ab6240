// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/cli/run.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "podsim/core/error.hpp"
#include "podsim/eplb/eplb.hpp"
#include "podsim/pipeline/pd.hpp"

namespace podsim::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::KernelStats;
using reliability::FaultEvent;
using reliability::FaultKind;

json num(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

// Last record of `step`, or nullptr.
const pipeline::StepRecord* last_step(const pipeline::RequestTrace& t, int step) {
  const pipeline::StepRecord* out = nullptr;
  for (const auto& s : t.steps) {
    if (s.step == step) out = &s;
  }
  return out;
}

std::vector<KernelStats> pd_breakdown(const pipeline::PdResult& r) {
  std::vector<double> prefill, wait, transfer, decode;
  for (const auto& t : r.requests) {
    if (t.state != pipeline::RequestState::done) continue;
    const auto* s3 = last_step(t, 3);
    const auto* s7 = last_step(t, 7);
    const auto* s8 = last_step(t, 8);
    if (!s3 || !s7 || !s8) continue;
    prefill.push_back(to_us(t.prefill_done - t.arrival));
    wait.push_back(to_us(s7->at - s3->at));
    transfer.push_back(to_us(s8->at - s7->at));
    decode.push_back(to_us(t.finished - s8->at));
  }
  if (prefill.empty()) return {};
  return {KernelStats::of("Prefill", prefill), KernelStats::of("KV wait", wait),
          KernelStats::of("KV transfer", transfer), KernelStats::of("Decode", decode)};
}

json breakdown_json(const std::vector<KernelStats>& b) {
  json out = json::array();
  for (const auto& k : b) {
    out.push_back({{"kernel", k.name}, {"avg_us", k.avg_us}, {"min_us", k.min_us},
                   {"max_us", k.max_us}, {"samples", k.samples}});
  }
  return out;
}

json empty_metrics() {
  return {{"tokens_per_step", nullptr}, {"tpot_ms", nullptr},   {"forward_ms", nullptr},
          {"tokens_per_s_per_chip", nullptr}, {"total_tokens_per_s", nullptr},
          {"global_batch", nullptr}, {"ttft_ms", nullptr}, {"requests", nullptr},
          {"completed", nullptr}, {"failed", nullptr}};
}

void take_throughput(const pipeline::ThroughputReport& t, json& m) {
  m["tokens_per_step"] = num(t.tokens_per_step);
  m["tpot_ms"] = num(t.tpot_ms);
  m["forward_ms"] = num(t.forward_ms);
  m["tokens_per_s_per_chip"] = num(t.tokens_per_s_per_chip);
  m["total_tokens_per_s"] = num(t.total_tokens_per_s);
  m["global_batch"] = t.global_batch;
}

void run_pd(const RunConfig& cfg, RunResult& out, json& m) {
  const auto reqs = pipeline::generate_workload(cfg.workload, cfg.seed);
  spdlog::info("pd workflow: {} requests", reqs.size());
  const auto r = pipeline::pd_workflow(*cfg.pd, reqs, cfg.seed);

  json full = r.to_json(true);
  std::string lines;
  for (const auto& q : full["requests"]) lines += q.dump() + "\n";
  out.files["requests.jsonl"] = lines;
  std::string ledger;
  for (const auto& e : full["ledger"]) ledger += e.dump() + "\n";
  out.files["kv_ledger.jsonl"] = ledger;
  out.files["kv_audit.json"] = r.audit.to_json().dump(2) + "\n";

  json summary = r.to_json(false);
  summary.erase("requests");
  summary["balanced"] = r.audit.balanced();
  out.results["pd"] = summary;

  m["requests"] = reqs.size();
  if (reqs.empty()) return;
  m["completed"] = r.completed;
  m["failed"] = r.failed;
  if (r.completed > 0) {
    m["ttft_ms"] = r.mean_ttft_ms;
    if (!cfg.decode) {
      double tokens = 0;
      for (std::size_t i = 0; i < reqs.size(); ++i) {
        if (r.requests[i].state == pipeline::RequestState::done) tokens += reqs[i].max_output;
      }
      const int dies = cfg.pd->prefill_dies() + cfg.pd->decode_dies();
      const int chips = (dies + cfg.topology.dies_per_chip - 1) / cfg.topology.dies_per_chip;
      m["tpot_ms"] = r.tpot_ms;
      m["tokens_per_step"] = cfg.pd->tokens_per_step;
      if (r.makespan_ms > 0) {
        m["total_tokens_per_s"] = tokens * 1000.0 / r.makespan_ms;
        m["tokens_per_s_per_chip"] = tokens * 1000.0 / r.makespan_ms / chips;
      }
    }
  }
  if (!cfg.decode) out.breakdown = pd_breakdown(r);

  if (r.deadlock) {
    out.deadlock = true;
    for (const auto& t : r.requests) {
      if (t.cause != "deadlock") continue;
      const auto& s = t.steps.empty() ? pipeline::StepRecord{} : t.steps.back();
      out.stuck_actors.push_back({{"request", t.id}, {"last_step", s.step}, {"last_step_ms", to_ms(s.at)},
                                  {"detail", s.detail}, {"prefill_te", t.prefill_te},
                                  {"prefill_dp", t.prefill_dp}, {"decode_te", t.decode_te},
                                  {"decode_dp", t.decode_dp}});
    }
  }
}

void run_eplb(const EplbSpec& e, RunResult& out) {
  const auto trace = eplb::read_routing_trace(e.trace);
  int layers = e.layers;
  int experts = e.experts;
  for (const auto& r : trace) {
    if (e.layers == 0) layers = std::max(layers, r.layer + 1);
    if (e.experts == 0) experts = std::max(experts, r.expert + 1);
  }
  if (layers == 0 || experts == 0) throw ConfigError("eplb trace " + e.trace + " has no records");
  const auto load = eplb::collect_load(trace, from_ms(e.slice_ms), layers, experts);
  const auto a = eplb::analyze(load, e.nodes, e.redundant_per_node, e.budget);
  out.files["eplb.json"] = a.dump(2) + "\n";
  json layers_summary = json::array();
  for (const auto& l : a["layers"]) {
    layers_summary.push_back({{"layer", l["layer"]},
                              {"native_max_slot_load", l["native_max_slot_load"]},
                              {"balanced_max_slot_load", l["balanced_max_slot_load"]}});
  }
  out.results["eplb"] = {{"budget", e.budget}, {"nodes", e.nodes}, {"load", a["load"]}, {"layers", layers_summary}};
}

// Heartbeat actor to the recovery actor it stands for: TEs are numbered
// prefill first, then decode.
std::string recovery_actor(const std::string& hb, int prefill_tes, int dps_per_te, int decode_nodes) {
  const auto a = reliability::parse_actor(hb);
  const int te = a.type == "te" ? a.index : a.index / dps_per_te;
  if (te < prefill_tes) return "prefill:" + std::to_string(te);
  const int node = a.type == "te" ? te - prefill_tes : a.index - prefill_tes * dps_per_te;
  return "decode:" + std::to_string(node % decode_nodes);
}

void run_faults(const RunConfig& cfg, const std::vector<FaultEvent>& faults, RunResult& out) {
  const auto& rs = cfg.reliability;
  const int prefill_tes = cfg.pd ? static_cast<int>(cfg.pd->prefill.size()) : 0;
  const int decode_tes = cfg.pd ? static_cast<int>(cfg.pd->decode.size()) : 1;
  int dps = rs.decode_run.groups;
  if (cfg.pd) {
    dps = 1;
    for (const auto& p : cfg.pd->prefill) dps = std::max(dps, p.dp_groups);
    for (const auto& d : cfg.pd->decode) dps = std::max(dps, d.dp_groups);
  }
  double last = 0;
  for (const auto& f : faults) last = std::max(last, f.inject_ms);
  const auto horizon = from_ms(last + (rs.heartbeat.miss_threshold + 2) * rs.heartbeat.control_to_te_ms);
  const auto detections =
      reliability::heartbeat_monitor(rs.heartbeat, {prefill_tes + decode_tes, dps}, faults, horizon);

  // Work list in time order: detected hangs plus faults already pinned to a
  // prefill/decode instance or a link.
  std::vector<FaultEvent> work;
  json det = json::array();
  for (const auto& d : detections) {
    det.push_back({{"at_ms", to_ms(d.at)}, {"tier", d.tier}, {"actor", d.actor}, {"misses", d.misses}});
    FaultKind kind = FaultKind::crash;
    for (const auto& f : faults) {
      if (f.location == d.actor) kind = f.kind;
    }
    work.push_back({kind, recovery_actor(d.actor, prefill_tes, dps, rs.decode_nodes), to_ms(d.at)});
  }
  std::vector<FaultEvent> recompute;
  for (const auto& f : faults) {
    const auto a = reliability::parse_actor(f.location);
    if (a.type == "prefill" || a.type == "decode" || a.type == "link") work.push_back(f);
    if (a.type == "decode" && a.index < rs.decode_run.groups &&
        (f.kind == FaultKind::net_transient || f.kind == FaultKind::mem_fault)) {
      recompute.push_back(f);
    }
  }
  std::stable_sort(work.begin(), work.end(),
                   [](const FaultEvent& a, const FaultEvent& b) { return a.inject_ms < b.inject_ms; });

  reliability::Cluster cluster;
  cluster.prefill_tes = std::max(prefill_tes, 1);
  cluster.decode_dp_groups = cluster.ep_ranks = rs.decode_nodes;
  cluster.layout = reliability::ExpertLayout::build(rs.experts, rs.decode_nodes, rs.slots_per_node, rs.redundant);
  cluster.dead.assign(rs.decode_nodes, false);

  std::string lines;
  json outcomes = json::array();
  for (const auto& ev : work) {
    const auto o = reliability::recover(ev, rs.policy, cluster, rs.costs);
    for (const auto& rec : o.trace) lines += rec.to_json_line() + "\n";
    json j = {{"event", std::string(reliability::fault_name(ev.kind)) + "@" + ev.location},
              {"at_ms", ev.inject_ms},
              {"final_stage", reliability::stage_name(o.final_stage)},
              {"escalated", o.escalated},
              {"decode_ready_ms", o.decode_ready ? json(to_ms(*o.decode_ready)) : json(nullptr)},
              {"prefill_ready_ms", o.prefill_ready ? json(to_ms(*o.prefill_ready)) : json(nullptr)}};
    outcomes.push_back(j);
  }
  json rel = {{"faults", faults.size()},
              {"detections", det},
              {"recoveries", outcomes},
              {"cluster", {{"prefill_tes", cluster.prefill_tes},
                           {"decode_dp_groups", cluster.decode_dp_groups},
                           {"ep_ranks", cluster.ep_ranks},
                           {"min_replicas", cluster.layout.min_replicas(cluster.dead)}}}};

  if (!recompute.empty()) {
    const auto clean = reliability::run_decode(rs.decode_run, {});
    const auto faulty = reliability::run_decode(rs.decode_run, recompute);
    for (const auto& rec : faulty.trace) lines += rec.to_json_line() + "\n";
    bool identical = true;
    for (std::size_t i = 0; i < clean.streams.size(); ++i) {
      if (std::find(faulty.failed.begin(), faulty.failed.end(), static_cast<int>(i)) != faulty.failed.end()) continue;
      identical = identical && faulty.streams[i] == clean.streams[i];
    }
    rel["token_recompute"] = {{"reexecuted_iterations", faulty.reexecuted_iterations},
                              {"failed_requests", faulty.failed},
                              {"surviving_streams_identical", identical},
                              {"clean_makespan_ms", clean.makespan_ms},
                              {"makespan_ms", faulty.makespan_ms}};
  }
  out.files["recovery.jsonl"] = lines;
  out.results["reliability"] = rel;
}

std::string fmt_num(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string cell(const json& v, int prec) {
  if (v.is_null()) return "null";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number()) return fmt_num(v.get<double>(), prec);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace

RunResult simulate(const RunConfig& cfg, const std::vector<FaultEvent>& faults) {
  RunResult out;
  out.results = {{"schema", "podsim.results/1"},
                 {"name", cfg.name},
                 {"deployment", deployment_name(cfg.deployment)},
                 {"seed", cfg.seed}};
  json m = empty_metrics();

  if (cfg.deployment == Deployment::disagg_ma) {
    spdlog::info("ma pipeline: {} domains", cfg.ma->domains);
    const auto r = pipeline::simulate_ma(*cfg.ma, cfg.mtp, cfg.topology.dies_per_chip);
    take_throughput(r.throughput, m);
    out.breakdown = r.throughput.breakdown;
    out.results["ma"] = {{"domain_forward_ms", r.timeline.domain_forward_ms},
                         {"moe_utilization", r.timeline.moe_utilization()},
                         {"span_ms", r.timeline.span_ms},
                         {"formula_forward_ms", pipeline::ma_forward_formula_ms(*cfg.ma)}};
    out.files["timeline.json"] = r.timeline.to_json().dump() + "\n";
  } else {
    if (cfg.decode) {
      spdlog::info("decode throughput: {} dies", cfg.decode->dies);
      const auto r = pipeline::simulate_decode(*cfg.decode);
      take_throughput(r, m);
      out.breakdown = r.breakdown;
    }
    if (cfg.pd) run_pd(cfg, out, m);
  }
  if (cfg.eplb) run_eplb(*cfg.eplb, out);
  if (!faults.empty()) run_faults(cfg, faults, out);

  out.results["metrics"] = m;
  out.results["breakdown"] = breakdown_json(out.breakdown);
  out.results["deadlock"] = out.deadlock;
  if (out.deadlock) out.results["stuck_actors"] = out.stuck_actors;
  return out;
}

void write_bundle(const RunResult& r, const std::string& dir) {
  fs::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream f(fs::path(dir) / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (fs::path(dir) / name).string());
    f << text;
  };
  put("results.json", r.results.dump(2) + "\n");
  put("breakdown.csv", render_report(r.results, ReportFormat::csv));
  put("breakdown.txt", render_report(r.results, ReportFormat::table));
  for (const auto& [name, text] : r.files) put(name, text);
  if (r.deadlock) put("stuck_actors.json", r.stuck_actors.dump(2) + "\n");
}

json read_bundle(const std::string& dir) {
  const auto p = fs::path(dir) / "results.json";
  std::ifstream in(p);
  if (!in) throw ConfigError("no result bundle at " + dir + " (missing results.json)");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

std::string render_report(const json& results, ReportFormat f) {
  if (f == ReportFormat::json) return results.dump(2) + "\n";
  const json& b = results.contains("breakdown") ? results["breakdown"] : json::array();
  const json& m = results.contains("metrics") ? results["metrics"] : json::object();
  std::ostringstream os;
  if (f == ReportFormat::csv) {
    os << "kind,name,avg_us,min_us,max_us,samples,value\n";
    for (const auto& k : b) {
      os << "op," << k["kernel"].get<std::string>() << "," << cell(k["avg_us"], 3) << ","
         << cell(k["min_us"], 3) << "," << cell(k["max_us"], 3) << "," << cell(k["samples"], 0) << ",\n";
    }
    for (const auto& [key, v] : m.items()) os << "metric," << key << ",,,,," << cell(v, 6) << "\n";
    return os.str();
  }
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %12s %12s %12s %9s\n", "op", "avg_us", "min_us", "max_us", "samples");
  os << line;
  for (const auto& k : b) {
    std::snprintf(line, sizeof line, "%-14s %12s %12s %12s %9s\n", k["kernel"].get<std::string>().c_str(),
                  cell(k["avg_us"], 2).c_str(), cell(k["min_us"], 2).c_str(), cell(k["max_us"], 2).c_str(),
                  cell(k["samples"], 0).c_str());
    os << line;
  }
  os << "\n";
  const std::pair<const char*, const char*> rows[] = {
      {"TPOT (ms)", "tpot_ms"},
      {"forward (ms)", "forward_ms"},
      {"tokens/step", "tokens_per_step"},
      {"tokens/s/chip", "tokens_per_s_per_chip"},
      {"total tokens/s", "total_tokens_per_s"},
      {"global batch", "global_batch"},
      {"TTFT (ms)", "ttft_ms"},
      {"requests", "requests"},
      {"completed", "completed"},
      {"failed", "failed"}};
  for (const auto& [label, key] : rows) {
    if (!m.contains(key)) continue;
    std::snprintf(line, sizeof line, "%-16s %s\n", label, cell(m[key], 3).c_str());
    os << line;
  }
  return os.str();
}

}  // namespace podsim::cli
