// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "podsim/fabric/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "podsim/core/error.hpp"

namespace podsim::fabric {

namespace {

// Payload-dependent part of the prediction, in bytes, before dividing by the
// multi-core rate: streamed bytes plus the first staging and last drain copy.
double effective_bytes(const LatencyModel& m, const FabricOptions& opts, std::uint64_t bytes) {
  const std::uint64_t chunk = std::min(opts.ring_slot_bytes, opts.staging_bytes);
  const std::uint64_t first = std::min(bytes, chunk);
  const std::uint64_t last = bytes == 0 ? 0 : bytes - (chunk_count(bytes, chunk) - 1) * chunk;
  return static_cast<double>(bytes) +
         static_cast<double>(first + last) / m.local_copy_factor;
}

struct Fit {
  double startup_us;
  double inv_bw;  // ns per byte at one core
  double sse;
};

Fit fit_at(const std::vector<LatencySample>& samples, const LatencyModel& base,
           const FabricOptions& opts, double eff) {
  // latency - poll = 3 * s + x * inv_bw / 1000, with x = bytes_eff / c^eff
  double sxx = 0, sx = 0, sy = 0, sxy = 0;
  const double n = static_cast<double>(samples.size());
  std::vector<double> xs;
  std::vector<double> ys;
  for (const auto& p : samples) {
    const int c = std::clamp(p.cores, 1, base.cores_max);
    const double x = effective_bytes(base, opts, p.bytes) /
                     std::pow(static_cast<double>(c), eff) / 1e3;
    const double y = p.latency_us - base.poll_interval_us;
    xs.push_back(x);
    ys.push_back(y);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double det = n * sxx - sx * sx;
  double a = 0, b = 0;
  if (std::abs(det) > 0) {
    b = (n * sxy - sx * sy) / det;
    a = (sy - b * sx) / n;
  }
  // Startup must stay non-negative; refit the slope through the origin if not.
  if (a < 0) {
    a = 0;
    b = sxx > 0 ? sxy / sxx : 0;
  }
  double sse = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - a - b * xs[i];
    sse += r * r;
  }
  return {a / 3.0, b, sse};
}

}  // namespace

double predict_send_latency_us(const LatencyModel& m, const FabricOptions& opts,
                               std::uint64_t bytes, int cores) {
  return 3.0 * m.mem_startup_us + effective_bytes(m, opts, bytes) / m.mem_rate(cores) / 1e3 +
         m.poll_interval_us;
}

std::vector<LatencySample> read_latency_samples(std::istream& in) {
  std::vector<LatencySample> out;
  std::string line;
  int lineno = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    LatencySample s;
    if (!(row >> s.bytes >> s.cores >> s.latency_us)) {
      throw ConfigError("malformed latency sample", lineno);
    }
    out.push_back(s);
  }
  return out;
}

std::vector<LatencySample> read_latency_samples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  return read_latency_samples(in);
}

CalibrationResult calibrate(const std::vector<LatencySample>& samples, const LatencyModel& base,
                            const FabricOptions& opts) {
  if (samples.size() < 3) throw ConfigError("calibration needs at least 3 samples");
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = 0.05, hi = 1.0;
  double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
  double f1 = fit_at(samples, base, opts, x1).sse;
  double f2 = fit_at(samples, base, opts, x2).sse;
  for (int i = 0; i < 80; ++i) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - phi * (hi - lo);
      f1 = fit_at(samples, base, opts, x1).sse;
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + phi * (hi - lo);
      f2 = fit_at(samples, base, opts, x2).sse;
    }
  }
  const double eff = (lo + hi) / 2.0;
  const Fit fit = fit_at(samples, base, opts, eff);

  CalibrationResult r;
  r.model = base;
  r.model.core_efficiency = eff;
  r.model.mem_startup_us = fit.startup_us;
  r.model.bandwidth_gbps = fit.inv_bw > 0 ? 1.0 / fit.inv_bw
                                          : std::numeric_limits<double>::infinity();
  double sse = 0;
  for (const auto& p : samples) {
    const double e = predict_send_latency_us(r.model, opts, p.bytes, p.cores) - p.latency_us;
    sse += e * e;
    r.max_abs_err_us = std::max(r.max_abs_err_us, std::abs(e));
  }
  r.rmse_us = std::sqrt(sse / static_cast<double>(samples.size()));
  return r;
}

}  // namespace podsim::fabric
