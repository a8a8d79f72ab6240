// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace podsim::pipeline {

enum class AcceptanceMode { fixed, bernoulli };

/// Draft i (0-based) is accepted with probability acceptance[i] given that
/// drafts 0..i-1 were accepted. A single value applies to every draft.
struct MtpConfig {
  int num_mtp_layers = 1;
  std::vector<double> acceptance{0.9};
  AcceptanceMode mode = AcceptanceMode::fixed;
  std::uint64_t seed = 0;

  double rate(int draft) const;
  void validate() const;
};

/// 1 + a0 + a0*a1 + ... over the configured drafts.
double expected_tokens_per_step(const MtpConfig& mtp);

struct DecodeStep {
  std::vector<double> tokens;      // per request; fractional in fixed mode
  std::vector<std::string> steps;  // the five phases, in order
  double duration_ms = 0;
};

/// One MTP decode iteration over `batch` requests. Fixed mode returns the
/// expected token count for every request; Bernoulli mode samples the
/// acceptance chain per request from `rng`.
DecodeStep decode_iteration(int batch, const MtpConfig& mtp, double forward_ms, double gap_ms,
                            std::mt19937_64& rng);

/// (forward + gap) / tokens_per_step.
double tpot_ms(double forward_ms, double gap_ms, double tokens_per_step);

/// Mean tokens per step over `iterations` iterations of `batch` requests.
double measured_tokens_per_step(const MtpConfig& mtp, int batch, int iterations);

}  // namespace podsim::pipeline
