// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/cli/config.hpp"

#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "podsim/core/error.hpp"
#include "podsim/fabric/calibration.hpp"

namespace podsim::cli {

const char* deployment_name(Deployment d) {
  switch (d) {
    case Deployment::colocated_pd: return "colocated_pd";
    case Deployment::disagg_pd: return "disagg_pd";
    case Deployment::disagg_ma: return "disagg_ma";
  }
  return "?";
}

namespace {

namespace fs = std::filesystem;

std::string where(const std::string& file, const toml::source_region& r) {
  return file + ":" + std::to_string(r.begin.line) + ":" + std::to_string(r.begin.column) + ": ";
}

// Owns every parsed document so node references stay valid.
struct Docs {
  std::deque<toml::table> tables;

  const toml::table& parse(std::string_view text, const std::string& file) {
    try {
      tables.push_back(toml::parse(text, file));
    } catch (const toml::parse_error& e) {
      throw ConfigError(where(file, e.source()) + std::string(e.description()));
    }
    return tables.back();
  }

  const toml::table& load(const std::string& path, const std::string& from) {
    std::ifstream in(path);
    if (!in) throw ConfigError(from + "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }
};

// A TOML table plus the bookkeeping for diagnostics and unknown-key checks.
class Section {
 public:
  Section(const toml::table& t, std::string file, std::string name, Docs& docs)
      : t_(t), file_(std::move(file)), name_(std::move(name)), docs_(docs) {}

  const std::string& file() const { return file_; }
  std::string at() const { return where(file_, t_.source()); }
  std::string at(const toml::node& n) const { return where(file_, n.source()); }
  bool has(const char* key) const { return t_.contains(key); }

  [[noreturn]] void fail(const toml::node& n, const std::string& msg) const {
    throw ConfigError(at(n) + label() + msg);
  }
  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(at() + label() + msg); }
  std::string label() const { return name_.empty() ? "" : "[" + name_ + "] "; }

  const toml::node* node(const char* key) {
    seen_.insert(key);
    return t_.get(key);
  }

  void get(const char* key, int& out) {
    if (const auto* n = node(key)) {
      const auto v = n->value<std::int64_t>();
      if (!n->is_integer() || !v) fail(*n, std::string(key) + " must be an integer");
      if (*v < INT32_MIN || *v > INT32_MAX) fail(*n, std::string(key) + " out of range");
      out = static_cast<int>(*v);
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const auto* n = node(key)) {
      const auto v = n->value<std::int64_t>();
      if (!n->is_integer() || !v || *v < 0) fail(*n, std::string(key) + " must be a non-negative integer");
      out = static_cast<std::uint64_t>(*v);
    }
  }
  void get(const char* key, double& out) {
    if (const auto* n = node(key)) {
      const auto v = n->value<double>();
      if (!(n->is_integer() || n->is_floating_point()) || !v) fail(*n, std::string(key) + " must be a number");
      out = *v;
    }
  }
  void get(const char* key, bool& out) {
    if (const auto* n = node(key)) {
      if (!n->is_boolean()) fail(*n, std::string(key) + " must be true or false");
      out = *n->value<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const auto* n = node(key)) {
      if (!n->is_string()) fail(*n, std::string(key) + " must be a string");
      out = *n->value<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const auto* n = node(key)) {
      if (n->is_integer() || n->is_floating_point()) {
        out = {*n->value<double>()};
        return;
      }
      const auto* a = n->as_array();
      if (!a) fail(*n, std::string(key) + " must be a number or an array of numbers");
      out.clear();
      for (const auto& e : *a) {
        const auto v = e.value<double>();
        if (!v || !(e.is_integer() || e.is_floating_point())) fail(e, std::string(key) + " entries must be numbers");
        out.push_back(*v);
      }
    }
  }

  /// Path relative to this section's file, checked for existence.
  std::string path(const char* key) {
    std::string p;
    get(key, p);
    if (p.empty()) return p;
    const auto resolved = resolve(p);
    if (!fs::exists(resolved)) fail(*t_.get(key), std::string(key) + ": no such file " + resolved);
    return resolved;
  }

  std::string resolve(const std::string& p) const {
    if (fs::path(p).is_absolute()) return p;
    return (fs::path(file_).parent_path() / p).lexically_normal().string();
  }

  /// A sub-table given inline or as a string naming another TOML file.
  std::optional<Section> sub(const char* key) {
    const auto* n = node(key);
    if (!n) return std::nullopt;
    if (const auto* t = n->as_table()) return Section(*t, file_, name_.empty() ? key : name_ + "." + key, docs_);
    if (n->is_string()) {
      const auto p = resolve(*n->value<std::string>());
      if (!fs::exists(p)) fail(*n, std::string(key) + ": no such file " + p);
      return Section(docs_.load(p, at(*n)), p, key, docs_);
    }
    fail(*n, std::string(key) + " must be a table or a file path");
  }

  std::vector<Section> list(const char* key) {
    std::vector<Section> out;
    const auto* n = node(key);
    if (!n) return out;
    const auto* a = n->as_array();
    if (!a) fail(*n, std::string(key) + " must be an array of tables");
    int i = 0;
    for (const auto& e : *a) {
      const auto* t = e.as_table();
      if (!t) fail(e, std::string(key) + " entries must be tables");
      out.emplace_back(*t, file_, name_ + "." + key + "[" + std::to_string(i++) + "]", docs_);
    }
    return out;
  }

  /// Rejects keys nobody asked for, which catches typos.
  void finish() const {
    for (const auto& [k, v] : t_) {
      if (!seen_.count(std::string(k.str()))) fail(v, "unknown key '" + std::string(k.str()) + "'");
    }
  }

  /// Runs a validator and prefixes its error with this section's location.
  template <class F>
  void check(F&& f) const {
    try {
      f();
    } catch (const ConfigError& e) {
      fail(e.what());
    }
  }

 private:
  const toml::table& t_;
  std::string file_;
  std::string name_;
  Docs& docs_;
  std::set<std::string> seen_;
};

void read_latency(Section& s, fabric::LatencyModel& m) {
  s.get("mem_startup_us", m.mem_startup_us);
  s.get("dma_startup_us", m.dma_startup_us);
  s.get("bandwidth_gbps", m.bandwidth_gbps);
  s.get("core_efficiency", m.core_efficiency);
  s.get("cores_max", m.cores_max);
  s.get("dma_bandwidth_gbps", m.dma_bandwidth_gbps);
  s.get("local_copy_factor", m.local_copy_factor);
  s.get("poll_interval_us", m.poll_interval_us);
  s.get("jitter_sigma", m.jitter_sigma);
  m.jitter_enabled = m.jitter_sigma > 0;
  const auto samples = s.path("calibrate_from");
  s.finish();
  s.check([&] {
    if (!samples.empty()) m = fabric::calibrate(fabric::read_latency_samples(samples), m).model;
    m.validate();
  });
}

void read_mtp(Section& s, pipeline::MtpConfig& m) {
  s.get("num_mtp_layers", m.num_mtp_layers);
  s.get("acceptance", m.acceptance);
  std::string mode = "fixed";
  s.get("mode", mode);
  if (mode == "fixed") {
    m.mode = pipeline::AcceptanceMode::fixed;
  } else if (mode == "bernoulli") {
    m.mode = pipeline::AcceptanceMode::bernoulli;
  } else {
    s.fail(*s.node("mode"), "mode must be \"fixed\" or \"bernoulli\"");
  }
  s.finish();
  s.check([&] { m.validate(); });
}

void read_decode(Section& s, pipeline::DecodeDeployment& d) {
  s.get("dies", d.dies);
  s.get("dies_per_chip", d.dies_per_chip);
  s.get("batch_per_die", d.batch_per_die);
  s.get("forward_ms", d.forward_ms);
  s.get("gap_ms", d.gap_ms);
  s.get("iterations", d.iterations);
  s.get("sampled_layers", d.sampled_layers);
  s.get("top_k", d.top_k);
  s.get("hidden", d.hidden);
  s.get("mla_jitter_us", d.mla_jitter_us);
  s.finish();
  s.check([&] { d.validate(); });
}

void read_ma(Section& s, pipeline::MaConfig& m) {
  s.get("domains", m.domains);
  s.get("microbatches", m.microbatches);
  s.get("layers", m.layers);
  s.get("batch_per_die", m.batch_per_die);
  s.get("attention_dies_per_domain", m.attention_dies_per_domain);
  s.get("expert_dies", m.expert_dies);
  s.get("persistent_kernels", m.persistent_kernels);
  s.get("domain_offset_ms", m.domain_offset_ms);
  s.get("attention_ms", m.lat.attention_ms);
  s.get("a2e_ms", m.lat.a2e_ms);
  s.get("moe_ms", m.lat.moe_ms);
  s.get("e2a_ms", m.lat.e2a_ms);
  s.get("gap_ms", m.lat.gap_ms);
  s.get("mtp_ms", m.lat.mtp_ms);
  s.get("host_launch_ms", m.lat.host_launch_ms);
  s.finish();
  for (const char* k : {"domains", "attention_dies_per_domain", "expert_dies"}) {
    if (!s.has(k)) s.fail(std::string("disagg_ma requires ") + k);
  }
  s.check([&] { m.validate(); });
}

void read_pd(Section& s, pipeline::PdConfig& c) {
  s.get("block_tokens", c.block_tokens);
  s.get("kv_block_bytes", c.kv_block_bytes);
  s.get("transfer_cores", c.transfer_cores);
  s.get("decode_step_ms", c.decode_step_ms);
  s.get("tokens_per_step", c.tokens_per_step);
  s.get("backpressure_deadline_ms", c.backpressure_deadline_ms);
  s.get("transfer_timeout_ms", c.transfer_timeout_ms);
  s.get("completion_poll_us", c.completion_poll_us);
  s.get("scale_out_startup_us", c.scale_out_startup_us);
  s.get("scale_out_bandwidth_gbps", c.scale_out_bandwidth_gbps);
  auto pre = s.list("prefill");
  auto dec = s.list("decode");
  if (pre.empty()) s.fail("needs at least one [[pd.prefill]] entry");
  if (dec.empty()) s.fail("needs at least one [[pd.decode]] entry");
  c.prefill.clear();
  for (auto& p : pre) {
    pipeline::PrefillTeSpec t;
    p.get("dp_groups", t.dp_groups);
    p.get("batch_limit", t.batch_limit);
    p.get("kv_blocks", t.kv_blocks);
    p.get("profile", t.profile.name);
    if (t.profile.name == "scale_out") {
      t.profile.scale_out = true;
    } else if (t.profile.name != "supernode") {
      p.fail(*p.node("profile"), "profile must be \"supernode\" or \"scale_out\"");
    }
    p.get("fixed_ms", t.profile.fixed_ms);
    p.get("per_token_ms", t.profile.per_token_ms);
    p.finish();
    c.prefill.push_back(t);
  }
  c.decode.clear();
  for (auto& d : dec) {
    pipeline::DecodeTeSpec t;
    d.get("dp_groups", t.dp_groups);
    d.get("batch_limit", t.batch_limit);
    d.get("kv_blocks", t.kv_blocks);
    d.finish();
    c.decode.push_back(t);
  }
  s.finish();
  s.check([&] { c.validate(); });
}

void read_workload(Section& s, pipeline::WorkloadSpec& w) {
  s.get("count", w.count);
  std::string arrival = "fixed";
  s.get("arrival", arrival);
  if (arrival == "poisson") {
    w.arrival = pipeline::WorkloadSpec::Arrival::poisson;
  } else if (arrival == "fixed") {
    w.arrival = pipeline::WorkloadSpec::Arrival::fixed;
  } else {
    s.fail(*s.node("arrival"), "arrival must be \"poisson\" or \"fixed\"");
  }
  s.get("rate_per_s", w.rate_per_s);
  s.get("prompt_min", w.prompt_min);
  s.get("prompt_max", w.prompt_max);
  s.get("output_min", w.output_min);
  s.get("output_max", w.output_max);
  s.get("prefix_groups", w.prefix_groups);
  int id = 0;
  for (auto& r : s.list("requests")) {
    pipeline::WorkloadRequest q;
    q.id = id++;
    r.get("id", q.id);
    r.get("arrival_ms", q.arrival_ms);
    r.get("prompt_len", q.prompt_len);
    r.get("max_output", q.max_output);
    r.get("prefix_hash", q.prefix_hash);
    r.finish();
    w.requests.push_back(q);
  }
  s.finish();
  s.check([&] { pipeline::generate_workload(w, 0); });
}

void read_eplb(Section& s, EplbSpec& e) {
  e.trace = s.path("trace");
  if (e.trace.empty()) s.fail("trace is required");
  s.get("slice_ms", e.slice_ms);
  s.get("layers", e.layers);
  s.get("experts", e.experts);
  s.get("nodes", e.nodes);
  s.get("redundant_per_node", e.redundant_per_node);
  s.get("budget", e.budget);
  s.finish();
  if (!(e.slice_ms > 0) || e.layers < 0 || e.experts < 0 || e.nodes < 1 || e.redundant_per_node < 0 ||
      e.budget < 0) {
    s.fail("slice_ms and nodes must be positive; counts must be >= 0");
  }
}

void read_reliability(Section& s, ReliabilitySpec& r) {
  s.get("control_to_te_ms", r.heartbeat.control_to_te_ms);
  s.get("te_to_dp_ms", r.heartbeat.te_to_dp_ms);
  s.get("miss_threshold", r.heartbeat.miss_threshold);
  std::string stage = reliability::stage_name(r.policy.stage);
  s.get("stage", stage);
  if (stage == "fine_grained") {
    r.policy.stage = reliability::RecoveryStage::fine_grained;
  } else if (stage == "pd_failover") {
    r.policy.stage = reliability::RecoveryStage::pd_failover;
  } else if (stage == "restart_world") {
    r.policy.stage = reliability::RecoveryStage::restart_world;
  } else {
    s.fail(*s.node("stage"), "stage must be fine_grained, pd_failover or restart_world");
  }
  s.get("kill_p_to_preserve_d", r.policy.kill_p_to_preserve_d);
  s.get("min_replicas_per_expert", r.policy.min_replicas_per_expert);
  s.get("te_restart_ms", r.costs.te_restart_ms);
  s.get("expert_reload_ms", r.costs.expert_reload_ms);
  s.get("rollback_signal_ms", r.costs.rollback_signal_ms);
  s.get("mask_ms", r.costs.mask_ms);
  s.get("experts", r.experts);
  s.get("decode_nodes", r.decode_nodes);
  s.get("slots_per_node", r.slots_per_node);
  s.get("redundant", r.redundant);
  s.get("decode_groups", r.decode_run.groups);
  s.get("requests_per_group", r.decode_run.requests_per_group);
  s.get("iterations", r.decode_run.iterations);
  s.get("iteration_ms", r.decode_run.iteration_ms);
  s.get("blocks_per_request", r.decode_run.blocks_per_request);
  s.get("detect_ms", r.decode_run.detect_ms);
  s.finish();
  s.check([&] {
    r.heartbeat.validate();
    r.policy.validate();
    reliability::ExpertLayout::build(r.experts, r.decode_nodes, r.slots_per_node, r.redundant);
  });
}

RunConfig parse_root(Section& root) {
  RunConfig c;
  c.source = root.file();
  root.get("name", c.name);
  if (c.name.empty()) c.name = fs::path(c.source).stem().string();
  std::string dep;
  root.get("deployment", dep);
  if (dep.empty()) root.fail("deployment is required (colocated_pd, disagg_pd or disagg_ma)");
  if (dep == "colocated_pd") {
    c.deployment = Deployment::colocated_pd;
  } else if (dep == "disagg_pd") {
    c.deployment = Deployment::disagg_pd;
  } else if (dep == "disagg_ma") {
    c.deployment = Deployment::disagg_ma;
  } else {
    root.fail(*root.node("deployment"), "unknown deployment '" + dep + "'");
  }
  root.get("seed", c.seed);
  c.faults = root.path("faults");

  if (auto s = root.sub("topology")) {
    s->get("chips", c.topology.chips);
    s->get("dies_per_chip", c.topology.dies_per_chip);
    s->get("cores_per_die", c.topology.cores_per_die);
    s->finish();
    if (c.topology.chips < 1 || c.topology.dies_per_chip < 1 || c.topology.cores_per_die < 1) {
      s->fail("chips, dies_per_chip and cores_per_die must be >= 1");
    }
  }
  if (auto s = root.sub("latency")) read_latency(*s, c.latency);
  if (auto s = root.sub("mtp")) read_mtp(*s, c.mtp);
  c.mtp.seed = c.seed;
  if (auto s = root.sub("scheduler")) {
    s->get("weight_prefix_hit", c.scheduler.weight_prefix_hit);
    s->get("weight_length", c.scheduler.weight_length);
    s->get("weight_load", c.scheduler.weight_load);
    s->finish();
    s->check([&] { c.scheduler.validate(); });
  }
  if (auto s = root.sub("decode")) {
    pipeline::DecodeDeployment d;
    d.dies = c.topology.dies();
    d.dies_per_chip = c.topology.dies_per_chip;
    d.mtp = c.mtp;
    d.seed = c.seed;
    read_decode(*s, d);
    c.decode = d;
  }
  if (auto s = root.sub("ma")) {
    pipeline::MaConfig m;
    read_ma(*s, m);
    c.ma = m;
  }
  if (auto s = root.sub("pd")) {
    pipeline::PdConfig p;
    p.colocated = c.deployment == Deployment::colocated_pd;
    p.tokens_per_step = pipeline::expected_tokens_per_step(c.mtp);
    p.cost = c.scheduler;
    p.latency = c.latency;
    read_pd(*s, p);
    c.pd = p;
  }
  if (auto s = root.sub("workload")) read_workload(*s, c.workload);
  if (auto s = root.sub("eplb")) {
    EplbSpec e;
    read_eplb(*s, e);
    c.eplb = e;
  }
  c.reliability.decode_run.mtp = c.mtp;
  c.reliability.decode_run.seed = c.seed;
  if (auto s = root.sub("reliability")) read_reliability(*s, c.reliability);
  root.finish();
  root.check([&] { c.validate(); });
  return c;
}

}  // namespace

void RunConfig::validate() const {
  const int dies = topology.dies();
  switch (deployment) {
    case Deployment::disagg_ma:
      if (!ma) throw ConfigError("disagg_ma requires an [ma] section");
      if (ma->domains * ma->attention_dies_per_domain + ma->expert_dies > dies) {
        throw ConfigError("attention and expert dies exceed the topology's " + std::to_string(dies) + " dies");
      }
      break;
    case Deployment::colocated_pd:
    case Deployment::disagg_pd:
      if (!pd && !decode) throw ConfigError(std::string(deployment_name(deployment)) + " requires [pd] or [decode]");
      if (pd && pd->prefill_dies() + pd->decode_dies() > dies) {
        throw ConfigError("PD groups exceed the topology's " + std::to_string(dies) + " dies");
      }
      if (decode && decode->dies > dies) {
        throw ConfigError("decode dies exceed the topology's " + std::to_string(dies) + " dies");
      }
      if (decode && decode->dies_per_chip != topology.dies_per_chip) {
        throw ConfigError("decode.dies_per_chip disagrees with topology.dies_per_chip");
      }
      break;
  }
}

RunConfig parse_config(std::string_view text, const std::string& source) {
  Docs docs;
  const auto& t = docs.parse(text, source);
  Section root(t, source, "", docs);
  return parse_root(root);
}

RunConfig load_config(const std::string& path) {
  Docs docs;
  const auto& t = docs.load(path, "");
  Section root(t, path, "", docs);
  return parse_root(root);
}

}  // namespace podsim::cli
