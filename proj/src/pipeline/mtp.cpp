// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/pipeline/mtp.hpp"

#include <cmath>

#include "podsim/core/error.hpp"

namespace podsim::pipeline {

double MtpConfig::rate(int draft) const {
  if (acceptance.empty()) return 0.0;
  return acceptance[std::min<std::size_t>(static_cast<std::size_t>(draft), acceptance.size() - 1)];
}

void MtpConfig::validate() const {
  if (num_mtp_layers < 0) throw ConfigError("mtp layers must be >= 0");
  if (num_mtp_layers > 0 && acceptance.empty()) throw ConfigError("mtp acceptance missing");
  for (double a : acceptance) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("mtp acceptance must lie in [0, 1]");
  }
}

double expected_tokens_per_step(const MtpConfig& mtp) {
  mtp.validate();
  double total = 1.0;
  double chain = 1.0;
  for (int i = 0; i < mtp.num_mtp_layers; ++i) {
    chain *= mtp.rate(i);
    total += chain;
  }
  return total;
}

DecodeStep decode_iteration(int batch, const MtpConfig& mtp, double forward_ms, double gap_ms,
                            std::mt19937_64& rng) {
  if (batch < 1) throw ConfigError("decode batch must be non-empty");
  mtp.validate();
  DecodeStep s;
  s.steps = {"mtp_forward", "sample_drafts", "verify", "sample", "accept"};
  s.duration_ms = forward_ms + gap_ms;
  if (mtp.mode == AcceptanceMode::fixed) {
    s.tokens.assign(batch, expected_tokens_per_step(mtp));
    return s;
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int r = 0; r < batch; ++r) {
    double n = 1.0;
    for (int i = 0; i < mtp.num_mtp_layers; ++i) {
      if (u(rng) >= mtp.rate(i)) break;
      n += 1.0;
    }
    s.tokens.push_back(n);
  }
  return s;
}

double tpot_ms(double forward_ms, double gap_ms, double tokens_per_step) {
  if (tokens_per_step <= 0) throw ConfigError("tokens per step must be positive");
  return (forward_ms + gap_ms) / tokens_per_step;
}

double measured_tokens_per_step(const MtpConfig& mtp, int batch, int iterations) {
  std::mt19937_64 rng(mtp.seed);
  double sum = 0;
  for (int i = 0; i < iterations; ++i) {
    for (double t : decode_iteration(batch, mtp, 0, 0, rng).tokens) sum += t;
  }
  return sum / (static_cast<double>(batch) * iterations);
}

}  // namespace podsim::pipeline
