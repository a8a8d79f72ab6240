// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "podsim/cli/config.hpp"
#include "podsim/pipeline/throughput.hpp"
#include "podsim/reliability/reliability.hpp"

namespace podsim::cli {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kDeadlock = 3 };

struct RunResult {
  nlohmann::json results;                     // results.json
  std::vector<pipeline::KernelStats> breakdown;
  std::map<std::string, std::string> files;   // other artifacts by file name
  bool deadlock = false;
  nlohmann::json stuck_actors = nlohmann::json::array();
};

/// Runs the configured deployment plus any EPLB analysis and fault handling.
/// Deterministic in (config, seed, faults).
RunResult simulate(const RunConfig& cfg, const std::vector<reliability::FaultEvent>& faults);

/// Writes results.json, breakdown.csv, breakdown.txt and the other artifacts.
void write_bundle(const RunResult& r, const std::string& dir);

enum class ReportFormat { table, json, csv };

/// Reads `dir/results.json`; throws ConfigError when it is missing or broken.
nlohmann::json read_bundle(const std::string& dir);
std::string render_report(const nlohmann::json& results, ReportFormat f);

}  // namespace podsim::cli
