// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "podsim/cli/config.hpp"
#include "podsim/cli/run.hpp"
#include "podsim/core/error.hpp"
#include "podsim/eplb/eplb.hpp"
#include "podsim/fabric/calibration.hpp"
#include "podsim/reliability/reliability.hpp"

namespace {

using namespace podsim;
using cli::ExitCode;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("podsim");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("SIM_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
}

struct RunArgs {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "out";
  std::string faults;
  int parallel = 1;
};

// One seed into one directory. Returns the exit code for that run.
int run_one(cli::RunConfig cfg, const std::vector<reliability::FaultEvent>& faults, const std::string& dir) {
  const auto r = cli::simulate(cfg, faults);
  cli::write_bundle(r, dir);
  if (r.deadlock) {
    std::cerr << "deadlock in " << dir << ": no pending events, unfinished requests\n"
              << r.stuck_actors.dump(2) << "\n";
    return ExitCode::kDeadlock;
  }
  spdlog::info("wrote {}", dir);
  return ExitCode::kOk;
}

int cmd_run(const RunArgs& a) {
  auto cfg = cli::load_config(a.config);
  if (a.seed_set) {
    // Re-derive the seed-dependent pieces.
    cfg.seed = a.seed;
    cfg.mtp.seed = cfg.seed;
    if (cfg.decode) {
      cfg.decode->seed = cfg.seed;
      cfg.decode->mtp.seed = cfg.seed;
    }
    cfg.reliability.decode_run.seed = cfg.seed;
    cfg.reliability.decode_run.mtp.seed = cfg.seed;
  }
  std::string faults_path = a.faults.empty() ? cfg.faults : a.faults;
  std::vector<reliability::FaultEvent> faults;
  if (!faults_path.empty()) faults = reliability::read_fault_schedule_file(faults_path);

  if (a.parallel <= 1) return run_one(cfg, faults, a.out);

  std::vector<int> codes(a.parallel, ExitCode::kOk);
  std::vector<std::string> errors(a.parallel);
  std::vector<std::thread> pool;
  for (int i = 0; i < a.parallel; ++i) {
    pool.emplace_back([&, i] {
      auto c = cfg;
      c.seed = cfg.seed + static_cast<std::uint64_t>(i);
      c.mtp.seed = c.seed;
      if (c.decode) {
        c.decode->seed = c.seed;
        c.decode->mtp.seed = c.seed;
      }
      c.reliability.decode_run.seed = c.seed;
      c.reliability.decode_run.mtp.seed = c.seed;
      try {
        codes[i] = run_one(c, faults, (std::filesystem::path(a.out) / ("seed-" + std::to_string(c.seed))).string());
      } catch (const std::exception& e) {
        errors[i] = e.what();
        codes[i] = ExitCode::kFailure;
      }
    });
  }
  for (auto& t : pool) t.join();
  int worst = ExitCode::kOk;
  for (int i = 0; i < a.parallel; ++i) {
    if (!errors[i].empty()) std::cerr << "seed " << cfg.seed + i << ": " << errors[i] << "\n";
    worst = std::max(worst, codes[i]);
  }
  return worst;
}

int cmd_report(const std::string& dir, const std::string& format) {
  const auto results = cli::read_bundle(dir);
  cli::ReportFormat f = cli::ReportFormat::table;
  if (format == "json") f = cli::ReportFormat::json;
  if (format == "csv") f = cli::ReportFormat::csv;
  std::cout << cli::render_report(results, f);
  return ExitCode::kOk;
}

struct EplbArgs {
  std::string trace;
  int budget = 8;
  int nodes = 8;
  int redundant_per_node = 1;
  double slice_ms = 1.0;
  int layers = 0;
  int experts = 0;
  std::string out;
};

int cmd_eplb(const EplbArgs& a) {
  const auto trace = eplb::read_routing_trace(a.trace);
  int layers = a.layers;
  int experts = a.experts;
  for (const auto& r : trace) {
    if (a.layers == 0) layers = std::max(layers, r.layer + 1);
    if (a.experts == 0) experts = std::max(experts, r.expert + 1);
  }
  if (layers == 0 || experts == 0) throw ConfigError("trace " + a.trace + " has no records");
  const auto load = eplb::collect_load(trace, from_ms(a.slice_ms), layers, experts);
  const auto report = eplb::analyze(load, a.nodes, a.redundant_per_node, a.budget).dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << report;
  } else {
    std::ofstream(a.out) << report;
  }
  return ExitCode::kOk;
}

int cmd_calibrate(const std::string& samples_path) {
  const auto samples = fabric::read_latency_samples(samples_path);
  const auto r = fabric::calibrate(samples, fabric::LatencyModel{});
  const fabric::FabricOptions opts;
  nlohmann::json j = {
      {"mem_startup_us", r.model.mem_startup_us},
      {"bandwidth_gbps", r.model.bandwidth_gbps},
      {"core_efficiency", r.model.core_efficiency},
      {"rmse_us", r.rmse_us},
      {"max_abs_err_us", r.max_abs_err_us},
      {"predict_us",
       {{"1MB_2cores", fabric::predict_send_latency_us(r.model, opts, 1 << 20, 2)},
        {"9MB_2cores", fabric::predict_send_latency_us(r.model, opts, 9 << 20, 2)},
        {"9MB_48cores", fabric::predict_send_latency_us(r.model, opts, 9 << 20, 48)}}}};
  std::cout << j.dump(2) << "\n";
  return ExitCode::kOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"podsim: discrete-event simulator for disaggregated LLM serving on a scale-up pod"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run a simulation and write a result bundle");
  run_cmd->add_option("--config", run.config, "TOML run configuration")->required();
  run_cmd->add_option("--seed", run.seed, "Override the configured seed");
  run_cmd->add_option("--out", run.out, "Output directory")->capture_default_str();
  run_cmd->add_option("--faults", run.faults, "JSON fault schedule");
  run_cmd->add_option("--parallel", run.parallel, "Run N consecutive seeds concurrently")
      ->check(CLI::Range(1, 1024));

  std::string report_dir;
  std::string format = "table";
  auto* report_cmd = app.add_subcommand("report", "Render a result bundle");
  report_cmd->add_option("dir", report_dir, "Result directory")->required();
  report_cmd->add_option("--format", format)->check(CLI::IsMember({"table", "json", "csv"}))->capture_default_str();

  EplbArgs ea;
  auto* eplb_cmd = app.add_subcommand("eplb", "Expert placement tools");
  eplb_cmd->require_subcommand(1);
  auto* analyze_cmd = eplb_cmd->add_subcommand("analyze", "Replica selection and placement from a routing trace");
  analyze_cmd->add_option("--trace", ea.trace, "CSV routing trace (time_ns,layer,token,expert)")->required();
  analyze_cmd->add_option("--budget", ea.budget, "Redundant replicas per layer")->required();
  analyze_cmd->add_option("--nodes", ea.nodes)->capture_default_str();
  analyze_cmd->add_option("--redundant-per-node", ea.redundant_per_node)->capture_default_str();
  analyze_cmd->add_option("--slice-ms", ea.slice_ms)->capture_default_str();
  analyze_cmd->add_option("--layers", ea.layers, "0 infers from the trace");
  analyze_cmd->add_option("--experts", ea.experts, "0 infers from the trace");
  analyze_cmd->add_option("--out", ea.out, "Write JSON here instead of stdout");

  std::string samples = "data/sendrecv_anchors.csv";
  auto* cal_cmd = app.add_subcommand("calibrate", "Fit the memory-path latency model to measured points");
  cal_cmd->add_option("--samples", samples, "CSV bytes,cores,latency_us")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ExitCode::kOk : ExitCode::kConfigError;
  }

  try {
    if (*run_cmd) {
      run.seed_set = run_cmd->count("--seed") > 0;
      return cmd_run(run);
    }
    if (*report_cmd) return cmd_report(report_dir, format);
    if (*analyze_cmd) return cmd_eplb(ea);
    if (*cal_cmd) return cmd_calibrate(samples);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ExitCode::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ExitCode::kFailure;
  }
  return ExitCode::kOk;
}
