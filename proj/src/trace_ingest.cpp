#include "stlgt/trace_ingest.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "stlgt/errors.hpp"

namespace stlgt {

namespace {

const std::vector<std::string> kSpanFields = {"trace_id", "span_id", "parent_service", "service",
                                              "api",      "start_us", "end_us",        "status"};

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

double parse_number(const std::string& field, const char* name, std::size_t line) {
  double v = 0.0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw ParseError(std::string("non-numeric ") + name + " '" + field + "'", line);
  }
  return v;
}

}  // namespace

std::int64_t Trace::start_us() const {
  std::int64_t s = std::numeric_limits<std::int64_t>::max();
  for (const auto& sp : spans) s = std::min(s, sp.start_us);
  return s;
}

std::int64_t Trace::end_us() const {
  std::int64_t e = std::numeric_limits<std::int64_t>::min();
  for (const auto& sp : spans) e = std::max(e, sp.end_us);
  return e;
}

std::int64_t Trace::latency_us() const { return end_us() - start_us(); }

bool Trace::failed() const {
  return std::any_of(spans.begin(), spans.end(), [](const SpanRecord& s) { return s.status == SpanStatus::failed; });
}

MetricVector ServiceMetricRow::vector() const {
  MetricVector v;
  v << pod_count, cpu_usage_ratio, memory_usage_ratio, network_rx_bytes, network_tx_bytes, disk_io_bytes;
  return v;
}

void ServiceMetrics::insert(const ServiceMetricRow& row) { rows_[row.service][row.window_index] = row.vector(); }

MetricVector ServiceMetrics::at(const std::string& service, std::int64_t t) const {
  auto svc = rows_.find(service);
  if (svc == rows_.end()) return MetricVector::Zero();
  auto it = svc->second.upper_bound(t);
  if (it == svc->second.begin()) return MetricVector::Zero();
  return std::prev(it)->second;
}

std::size_t ServiceMetrics::row_count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : rows_) n += m.size();
  return n;
}

SpanRecord parse_span_line(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
  }
  if (!j.is_object()) throw ParseError("span record must be a JSON object", line_no);
  for (const auto& f : kSpanFields) {
    if (!j.contains(f)) throw ParseError("missing field '" + f + "'", line_no);
  }
  if (j.size() != kSpanFields.size()) {
    for (const auto& [k, _] : j.items()) {
      if (std::find(kSpanFields.begin(), kSpanFields.end(), k) == kSpanFields.end()) {
        throw ParseError("unknown field '" + k + "'", line_no);
      }
    }
  }
  SpanRecord r;
  r.line = line_no;
  try {
    r.trace_id = j.at("trace_id").get<std::string>();
    r.span_id = j.at("span_id").get<std::string>();
    r.parent_service = j.at("parent_service").get<std::string>();
    r.service = j.at("service").get<std::string>();
    r.api = j.at("api").get<std::string>();
    if (!j.at("start_us").is_number_integer() || !j.at("end_us").is_number_integer()) {
      throw ParseError("start_us/end_us must be integers", line_no);
    }
    r.start_us = j.at("start_us").get<std::int64_t>();
    r.end_us = j.at("end_us").get<std::int64_t>();
    const auto status = j.at("status").get<std::string>();
    if (status == "ok") {
      r.status = SpanStatus::ok;
    } else if (status == "failed") {
      r.status = SpanStatus::failed;
    } else {
      throw ParseError("status must be \"ok\" or \"failed\", got \"" + status + "\"", line_no);
    }
  } catch (const nlohmann::json::type_error& e) {
    throw ParseError(std::string("wrong field type: ") + e.what(), line_no);
  }
  if (r.end_us < r.start_us) {
    throw ValidationError("end_us " + std::to_string(r.end_us) + " < start_us " + std::to_string(r.start_us),
                          line_no);
  }
  if (r.service == kClientService) throw ValidationError("\"client\" is reserved for the caller of entry spans", line_no);
  return r;
}

std::vector<SpanRecord> parse_spans(std::istream& in) {
  std::vector<SpanRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(parse_span_line(line, line_no));
  }
  return out;
}

std::string format_span_line(const SpanRecord& rec) {
  nlohmann::ordered_json j;
  j["trace_id"] = rec.trace_id;
  j["span_id"] = rec.span_id;
  j["parent_service"] = rec.parent_service;
  j["service"] = rec.service;
  j["api"] = rec.api;
  j["start_us"] = rec.start_us;
  j["end_us"] = rec.end_us;
  j["status"] = rec.status == SpanStatus::ok ? "ok" : "failed";
  return j.dump();
}

std::int64_t window_of(std::int64_t start_us, std::int64_t delta_s) {
  if (delta_s <= 0) throw std::invalid_argument("window_of: delta_s must be positive");
  return floor_div(start_us, delta_s * 1'000'000);
}

std::map<WindowKey, WindowedTraces> group_traces(const std::vector<SpanRecord>& records, std::int64_t delta_s) {
  if (delta_s <= 0) throw std::invalid_argument("group_traces: delta_s must be positive");
  std::vector<Trace> traces;
  std::unordered_map<std::string, std::size_t> by_id;
  std::vector<std::unordered_set<std::string>> span_ids;
  for (const auto& r : records) {
    auto [it, inserted] = by_id.try_emplace(r.trace_id, traces.size());
    if (inserted) {
      traces.push_back(Trace{r.trace_id, r.api, {}});
      span_ids.emplace_back();
    }
    Trace& tr = traces[it->second];
    if (tr.api != r.api) {
      throw ValidationError("trace " + r.trace_id + " mixes apis '" + tr.api + "' and '" + r.api + "'", r.line);
    }
    if (!span_ids[it->second].insert(r.span_id).second) {
      throw ValidationError("duplicate span_id " + r.span_id + " in trace " + r.trace_id, r.line);
    }
    tr.spans.push_back(r);
  }
  std::map<WindowKey, WindowedTraces> out;
  for (auto& tr : traces) {
    const std::int64_t t = window_of(tr.start_us(), delta_s);
    auto& bucket = out[{tr.api, t}];
    bucket.api = tr.api;
    bucket.window = t;
    bucket.window_length_us = delta_s * 1'000'000;
    bucket.traces.push_back(std::move(tr));
  }
  return out;
}

Mcg derive_mcg(const std::vector<SpanRecord>& records) {
  std::set<std::string> services;
  Mcg g;
  for (const auto& r : records) {
    services.insert(r.service);
    if (r.parent_service == kClientService) continue;
    services.insert(r.parent_service);
    // Self-invocations cannot be represented; the graph has no self-edges.
    if (r.parent_service != r.service) g.edges.emplace(r.parent_service, r.service);
  }
  g.services.assign(services.begin(), services.end());
  return g;
}

ServiceMetrics load_service_metrics(std::istream& in) {
  ServiceMetrics m;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != kMetricsHeader) throw ParseError("unexpected metrics header '" + line + "'", line_no);
      header_seen = true;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 8) {
      throw ParseError("expected 8 fields, got " + std::to_string(fields.size()), line_no);
    }
    ServiceMetricRow row;
    const double t = parse_number(fields[0], "window_index", line_no);
    if (t != static_cast<double>(static_cast<std::int64_t>(t))) {
      throw ParseError("window_index must be an integer", line_no);
    }
    row.window_index = static_cast<std::int64_t>(t);
    row.service = fields[1];
    if (row.service.empty()) throw ParseError("empty service name", line_no);
    row.pod_count = parse_number(fields[2], "pod_count", line_no);
    row.cpu_usage_ratio = parse_number(fields[3], "cpu_usage_ratio", line_no);
    row.memory_usage_ratio = parse_number(fields[4], "memory_usage_ratio", line_no);
    row.network_rx_bytes = parse_number(fields[5], "network_rx_bytes", line_no);
    row.network_tx_bytes = parse_number(fields[6], "network_tx_bytes", line_no);
    row.disk_io_bytes = parse_number(fields[7], "disk_io_bytes", line_no);
    for (double ratio : {row.cpu_usage_ratio, row.memory_usage_ratio}) {
      if (ratio < 0.0 || ratio > 1.0) throw ValidationError("usage ratio outside [0,1]", line_no);
    }
    m.insert(row);
  }
  if (!header_seen && line_no > 0) throw ParseError("missing metrics header");
  return m;
}

void write_metrics_row(std::ostream& out, const ServiceMetricRow& row) {
  auto num = [](double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
  };
  out << row.window_index << ',' << row.service << ',' << num(row.pod_count) << ',' << num(row.cpu_usage_ratio) << ','
      << num(row.memory_usage_ratio) << ',' << num(row.network_rx_bytes) << ',' << num(row.network_tx_bytes) << ','
      << num(row.disk_io_bytes) << '\n';
}

}  // namespace stlgt
