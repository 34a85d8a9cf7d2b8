#pragma once

// Synthetic span and metric generator driven by a cosine-plus-bursts request
// rate schedule over a fixed stage tree.

#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "stlgt/trace_ingest.hpp"

namespace stlgt {

struct Burst {
  std::int64_t start = 0;     // window
  std::int64_t duration = 0;  // windows
  double extra = 0.0;         // req/s

  bool operator==(const Burst&) const = default;
};

struct WorkloadSchedule {
  double r0 = 1.5;
  double amplitude = 0.0;
  double period = 48.0;  // windows
  std::vector<Burst> bursts;

  // r0 + a cos(2 pi t / P) + bursts active at t, clamped at 0.
  double rate_at(std::int64_t t) const;
};

// "start:duration:extra,start:duration:extra"
std::vector<Burst> parse_bursts(const std::string& text);
std::string format_bursts(const std::vector<Burst>& bursts);

// Rectangular bursts spread over n_windows: one every 40-90 windows, lasting
// 3-8 windows, adding 0.8-2.0 x r0.
std::vector<Burst> random_bursts(std::int64_t n_windows, double r0, std::uint64_t seed);

struct TopologyStage {
  std::string parent;
  std::string service;
  double base_latency_ms = 1.0;
  double load_sensitivity = 0.0;
};

struct SyntheticTopology {
  std::string api;
  std::vector<TopologyStage> stages;

  // Single entry stage called by the client, every service appears once and
  // every stage is reachable from the entry.
  void validate() const;
  int root() const;
  std::vector<int> children(int stage) const;
};

SyntheticTopology topology_from_json(const std::string& text);
std::string topology_to_json(const SyntheticTopology& topo);
SyntheticTopology default_topology();

struct SimConfig {
  std::int64_t n_windows = 2000;
  std::int64_t delta_s = 30;
  std::uint64_t seed = 1;
  double latency_sigma = 0.25;  // lognormal sigma of stage self-time; 0 disables
  double failure_rate = 0.01;
  double metric_noise = 0.02;   // 0 disables
  // Rate at which stages run at (1 + sensitivity) x base latency. Fixed per
  // deployment, so raising the schedule's r0 raises latency.
  double reference_rate = 1.5;
};

struct SimOutput {
  std::vector<SpanRecord> spans;
  std::vector<ServiceMetricRow> metrics;
};

// Per window: Poisson(r(t) * delta) traces with uniform start times. A stage
// runs half of its self-time, calls its children in parallel, then runs the
// other half, so end-to-end latency is the critical-path sum of self-times.
SimOutput generate(const SyntheticTopology& topo, const WorkloadSchedule& schedule, const SimConfig& cfg);

void write_spans(std::ostream& out, const std::vector<SpanRecord>& spans);
void write_metrics(std::ostream& out, const std::vector<ServiceMetricRow>& rows);

}  // namespace stlgt
