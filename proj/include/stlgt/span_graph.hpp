#pragma once

// API-induced span graph: stage nodes keyed by (caller, callee), caller/callee
// edges with their reverses, and the per-window feature aggregation.

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "stlgt/tensor.hpp"
#include "stlgt/trace_ingest.hpp"

namespace stlgt {

inline constexpr int kSpanFeatureDim = 3;
inline constexpr int kContextDim = 7;
inline constexpr int kNodeFeatureDim = kMetricDim + kSpanFeatureDim;
inline constexpr int kDefaultTraceCap = 150;
inline constexpr double kLabelQuantile = 0.95;

struct StageKey {
  std::string parent;
  std::string service;

  auto operator<=>(const StageKey&) const = default;
};

struct StageNode {
  StageKey key;
  int index = 0;

  // The service this stage executes on.
  const std::string& mapped_service() const { return key.service; }

  bool operator==(const StageNode&) const = default;
};

struct SpanGraph {
  std::string api;
  std::vector<StageNode> nodes;
  std::set<std::pair<int, int>> forward_edges;  // caller stage -> callee stage
  std::set<std::pair<int, int>> edges;          // forward edges plus reverses

  int size() const { return static_cast<int>(nodes.size()); }
  std::optional<int> index_of(const StageKey& key) const;

  bool operator==(const SpanGraph&) const = default;
};

struct WindowFeatures {
  std::int64_t t = 0;
  Matrix X;      // N x kNodeFeatureDim
  RowVector c;   // 1 x kContextDim
  double y = 0;  // p95 latency, ms
  std::int64_t trace_count = 0;

  bool operator==(const WindowFeatures& o) const {
    return t == o.t && X == o.X && c == o.c && y == o.y && trace_count == o.trace_count;
  }
};

// Builds nodes in first-occurrence order over the given traces and connects
// every (p, s) stage to every (s, u) stage in both directions.
SpanGraph build_span_graph(const std::vector<const WindowedTraces*>& windows, const Mcg& mcg);
SpanGraph build_span_graph(const std::vector<WindowedTraces>& windows, const Mcg& mcg);

// [api_throughput, p50, p90, p99, avg, median, failure_ratio]; latencies in ms,
// throughput in traces per second.
RowVector phi_common(const std::vector<Trace>& traces, std::int64_t delta_s);
RowVector phi_common(const WindowedTraces& w, std::int64_t delta_s);

// [earliest normalized start, latest normalized end, summed normalized duration]
// per trace, averaged over traces containing the stage.
RowVector phi_span(const std::vector<Trace>& traces, const StageKey& key);

double p95_label(const std::vector<Trace>& traces);
double latency_quantile(const std::vector<Trace>& traces, double q);

// Sub-samples to at most `cap` traces (seeded per window) and assembles
// X, c and y. trace_count is the pre-cap count and drives api_throughput.
WindowFeatures assemble_window(const SpanGraph& graph, const WindowedTraces& w, const ServiceMetrics& metrics,
                               std::int64_t delta_s, int cap = kDefaultTraceCap, std::uint64_t seed = 0);

struct FeatureSet {
  std::string api;
  std::int64_t delta_s = 30;
  Mcg mcg;
  SpanGraph graph;
  std::vector<WindowFeatures> windows;  // ascending t, empty windows skipped
};

// Full ingest path for one api. The graph is built from the earliest
// `graph_fraction` of non-empty windows and frozen for the rest.
FeatureSet build_features(const std::vector<SpanRecord>& records, const ServiceMetrics& metrics,
                          const std::string& api, std::int64_t delta_s, int cap, std::uint64_t seed,
                          double graph_fraction = 0.7);

// ---- artifacts -------------------------------------------------------------

inline constexpr int kFeaturesSchemaVersion = 1;

std::string graph_to_json(const SpanGraph& g);
SpanGraph graph_from_json(const std::string& text);

std::string features_to_json(const FeatureSet& fs);
FeatureSet features_from_json(const std::string& text);

}  // namespace stlgt
