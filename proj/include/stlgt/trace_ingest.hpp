#pragma once

// Span and service-metric ingestion: parsing, time windowing, trace grouping
// and the service-level call graph.

#include <Eigen/Dense>

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace stlgt {

// Caller name recorded on entry spans.
inline const std::string kClientService = "client";

inline constexpr int kMetricDim = 6;

enum class SpanStatus { ok, failed };

struct SpanRecord {
  std::string trace_id;
  std::string span_id;
  std::string parent_service;
  std::string service;
  std::string api;
  std::int64_t start_us = 0;
  std::int64_t end_us = 0;
  SpanStatus status = SpanStatus::ok;
  std::size_t line = 0;  // source line, 0 when not parsed from a file

  bool operator==(const SpanRecord&) const = default;
};

struct Trace {
  std::string trace_id;
  std::string api;
  std::vector<SpanRecord> spans;

  std::int64_t start_us() const;
  std::int64_t end_us() const;
  // End-to-end latency: max(end) - min(start) over the spans.
  std::int64_t latency_us() const;
  double latency_ms() const { return static_cast<double>(latency_us()) / 1000.0; }
  bool failed() const;
};

struct Mcg {
  std::vector<std::string> services;  // lexicographic
  std::set<std::pair<std::string, std::string>> edges;

  bool has_edge(const std::string& from, const std::string& to) const {
    return edges.count({from, to}) > 0;
  }
};

struct WindowedTraces {
  std::string api;
  std::int64_t window = 0;
  std::int64_t window_length_us = 0;
  std::vector<Trace> traces;
};

using WindowKey = std::pair<std::string, std::int64_t>;  // (api, window)
using MetricVector = Eigen::Matrix<double, 1, kMetricDim>;

struct ServiceMetricRow {
  std::int64_t window_index = 0;
  std::string service;
  double pod_count = 0;
  double cpu_usage_ratio = 0;
  double memory_usage_ratio = 0;
  double network_rx_bytes = 0;
  double network_tx_bytes = 0;
  double disk_io_bytes = 0;

  MetricVector vector() const;
};

// Per-service metric history with carry-forward lookup.
class ServiceMetrics {
 public:
  void insert(const ServiceMetricRow& row);
  // Most recent row at or before t for the service; zeros if none.
  MetricVector at(const std::string& service, std::int64_t t) const;
  std::size_t row_count() const;
  const std::map<std::string, std::map<std::int64_t, MetricVector>>& rows() const { return rows_; }

 private:
  std::map<std::string, std::map<std::int64_t, MetricVector>> rows_;
};

inline const char* kMetricsHeader =
    "window_index,service,pod_count,cpu_usage_ratio,memory_usage_ratio,network_rx_bytes,network_tx_bytes,"
    "disk_io_bytes";

std::vector<SpanRecord> parse_spans(std::istream& in);
SpanRecord parse_span_line(const std::string& line, std::size_t line_no = 0);
std::string format_span_line(const SpanRecord& rec);

// floor(start_us / (delta_s * 1e6)).
std::int64_t window_of(std::int64_t start_us, std::int64_t delta_s);

// Groups spans into traces (first-seen order) and traces into (api, window)
// buckets keyed by each trace's earliest span start.
std::map<WindowKey, WindowedTraces> group_traces(const std::vector<SpanRecord>& records, std::int64_t delta_s);

Mcg derive_mcg(const std::vector<SpanRecord>& records);

ServiceMetrics load_service_metrics(std::istream& in);
void write_metrics_row(std::ostream& out, const ServiceMetricRow& row);

}  // namespace stlgt
