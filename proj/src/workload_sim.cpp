#include "stlgt/workload_sim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "stlgt/errors.hpp"

namespace stlgt {

double WorkloadSchedule::rate_at(std::int64_t t) const {
  double r = r0;
  if (amplitude != 0.0 && period > 0.0) {
    r += amplitude * std::cos(2.0 * std::numbers::pi * static_cast<double>(t) / period);
  }
  for (const auto& b : bursts) {
    if (t >= b.start && t < b.start + b.duration) r += b.extra;
  }
  return std::max(0.0, r);
}

std::vector<Burst> parse_bursts(const std::string& text) {
  std::vector<Burst> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    Burst b;
    const auto c1 = item.find(':');
    const auto c2 = c1 == std::string::npos ? c1 : item.find(':', c1 + 1);
    if (c2 == std::string::npos) throw ParseError("burst '" + item + "' is not start:duration:extra");
    const std::string a = item.substr(0, c1), d = item.substr(c1 + 1, c2 - c1 - 1), e = item.substr(c2 + 1);
    auto ok = [](auto res, const std::string& s) { return res.ec == std::errc() && res.ptr == s.data() + s.size(); };
    if (!ok(std::from_chars(a.data(), a.data() + a.size(), b.start), a) ||
        !ok(std::from_chars(d.data(), d.data() + d.size(), b.duration), d) ||
        !ok(std::from_chars(e.data(), e.data() + e.size(), b.extra), e) || b.start < 0 || b.duration < 0) {
      throw ParseError("burst '" + item + "' is not start:duration:extra");
    }
    out.push_back(b);
  }
  return out;
}

std::string format_bursts(const std::vector<Burst>& bursts) {
  std::string out;
  for (const auto& b : bursts) {
    if (!out.empty()) out += ',';
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), b.extra);
    out += std::to_string(b.start) + ':' + std::to_string(b.duration) + ':' + std::string(buf, ptr);
  }
  return out;
}

std::vector<Burst> random_bursts(std::int64_t n_windows, double r0, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xB0B5ULL);
  std::uniform_int_distribution<std::int64_t> first(20, 60), gap(40, 90), dur(3, 8);
  std::uniform_real_distribution<double> extra(0.8, 2.0);
  std::vector<Burst> out;
  for (std::int64_t pos = first(rng); pos < n_windows;) {
    Burst b;
    b.start = pos;
    b.duration = dur(rng);
    b.extra = r0 * extra(rng);
    out.push_back(b);
    pos += b.duration + gap(rng);
  }
  return out;
}

// ---- topology --------------------------------------------------------------

int SyntheticTopology::root() const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].parent == kClientService) return static_cast<int>(i);
  }
  throw ValidationError("topology has no stage called by '" + kClientService + "'");
}

std::vector<int> SyntheticTopology::children(int stage) const {
  std::vector<int> out;
  const std::string& svc = stages[static_cast<std::size_t>(stage)].service;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].parent == svc) out.push_back(static_cast<int>(i));
  }
  return out;
}

void SyntheticTopology::validate() const {
  if (api.empty()) throw ValidationError("topology api is empty");
  if (stages.empty()) throw ValidationError("topology has no stages");
  std::set<std::string> services;
  int roots = 0;
  for (const auto& s : stages) {
    if (s.service.empty() || s.service == kClientService) throw ValidationError("invalid stage service '" + s.service + "'");
    if (!services.insert(s.service).second) throw ValidationError("service '" + s.service + "' appears twice");
    if (s.parent == kClientService) ++roots;
    if (!(s.base_latency_ms >= 0.0) || !(s.load_sensitivity >= 0.0)) {
      throw ValidationError("stage '" + s.service + "' needs non-negative latency and sensitivity");
    }
  }
  if (roots != 1) throw ValidationError("topology needs exactly one entry stage");
  // Reachability from the entry rules out cycles and dangling parents.
  std::vector<bool> seen(stages.size(), false);
  std::vector<int> stack{root()};
  std::size_t count = 0;
  while (!stack.empty()) {
    const int s = stack.back();
    stack.pop_back();
    if (seen[static_cast<std::size_t>(s)]) continue;
    seen[static_cast<std::size_t>(s)] = true;
    ++count;
    for (int c : children(s)) stack.push_back(c);
  }
  if (count != stages.size()) throw ValidationError("topology stages unreachable from the entry stage");
}

SyntheticTopology topology_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("topology: ") + e.what());
  }
  SyntheticTopology topo;
  try {
    topo.api = j.at("api").get<std::string>();
    for (const auto& s : j.at("stages")) {
      TopologyStage st;
      st.parent = s.at("parent").get<std::string>();
      st.service = s.at("service").get<std::string>();
      st.base_latency_ms = s.at("base_latency_ms").get<double>();
      st.load_sensitivity = s.value("load_sensitivity", 0.0);
      topo.stages.push_back(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("topology: ") + e.what());
  }
  topo.validate();
  return topo;
}

std::string topology_to_json(const SyntheticTopology& topo) {
  nlohmann::ordered_json j;
  j["api"] = topo.api;
  j["stages"] = nlohmann::ordered_json::array();
  for (const auto& s : topo.stages) {
    nlohmann::ordered_json o;
    o["parent"] = s.parent;
    o["service"] = s.service;
    o["base_latency_ms"] = s.base_latency_ms;
    o["load_sensitivity"] = s.load_sensitivity;
    j["stages"].push_back(o);
  }
  return j.dump(2);
}

SyntheticTopology default_topology() {
  SyntheticTopology t;
  t.api = "compose-post";
  t.stages = {
      {kClientService, "frontend", 2.0, 0.3},
      {"frontend", "auth", 1.0, 0.2},
      {"frontend", "compose", 3.0, 0.6},
      {"compose", "text", 1.5, 0.4},
      {"compose", "media", 2.5, 0.5},
      {"compose", "storage", 4.0, 0.8},
  };
  return t;
}

// ---- generation ------------------------------------------------------------

namespace {

struct TraceBuilder {
  const SyntheticTopology& topo;
  const std::vector<std::vector<int>>& kids;
  std::mt19937_64& rng;
  double load;   // r / r0
  double sigma;
  std::vector<SpanRecord>* out;
  std::string trace_id;
  int next_span = 0;

  std::int64_t self_time_us(const TopologyStage& s) {
    double us = s.base_latency_ms * 1000.0 * (1.0 + s.load_sensitivity * load);
    if (sigma > 0.0) us *= std::lognormal_distribution<double>(0.0, sigma)(rng);
    return std::llround(us);
  }

  // Emits the stage's span and its subtree; returns the span end.
  std::int64_t walk(int stage, std::int64_t begin) {
    const auto& s = topo.stages[static_cast<std::size_t>(stage)];
    const std::int64_t self = self_time_us(s);
    const std::int64_t first_half = self / 2;
    const std::size_t slot = out->size();
    out->push_back(SpanRecord{trace_id, "s" + std::to_string(next_span++), s.parent, s.service, topo.api, begin, 0,
                              SpanStatus::ok, 0});
    const std::int64_t calls_at = begin + first_half;
    std::int64_t resume = calls_at;
    for (int c : kids[static_cast<std::size_t>(stage)]) resume = std::max(resume, walk(c, calls_at));
    const std::int64_t end = resume + (self - first_half);
    (*out)[slot].end_us = end;
    return end;
  }
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

SimOutput generate(const SyntheticTopology& topo, const WorkloadSchedule& schedule, const SimConfig& cfg) {
  topo.validate();
  if (cfg.delta_s <= 0) throw ValidationError("delta_s must be positive");
  if (!(cfg.reference_rate > 0.0)) throw ValidationError("reference_rate must be positive");
  SimOutput out;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::vector<int>> kids;
  for (std::size_t i = 0; i < topo.stages.size(); ++i) kids.push_back(topo.children(static_cast<int>(i)));
  const int root = topo.root();
  const std::int64_t window_us = cfg.delta_s * 1'000'000;
  std::uniform_int_distribution<std::int64_t> offset(0, window_us - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto noise = [&](double scale) {
    return cfg.metric_noise > 0.0 ? std::normal_distribution<double>(0.0, cfg.metric_noise * scale)(rng) : 0.0;
  };

  for (std::int64_t t = 0; t < cfg.n_windows; ++t) {
    const double r = schedule.rate_at(t);
    const double mean_count = r * static_cast<double>(cfg.delta_s);
    const std::int64_t n = mean_count > 0.0 ? std::poisson_distribution<std::int64_t>(mean_count)(rng) : 0;
    std::vector<std::int64_t> starts(static_cast<std::size_t>(n));
    for (auto& s : starts) s = t * window_us + offset(rng);
    std::sort(starts.begin(), starts.end());
    const double load = r / cfg.reference_rate;
    for (std::int64_t i = 0; i < n; ++i) {
      TraceBuilder tb{topo, kids, rng, load, cfg.latency_sigma, &out.spans,
                      "w" + std::to_string(t) + "." + std::to_string(i)};
      const std::size_t first = out.spans.size();
      tb.walk(root, starts[static_cast<std::size_t>(i)]);
      if (cfg.failure_rate > 0.0 && unit(rng) < cfg.failure_rate) {
        const std::size_t span_count = out.spans.size() - first;
        std::uniform_int_distribution<std::size_t> pick(0, span_count - 1);
        out.spans[first + pick(rng)].status = SpanStatus::failed;
      }
    }
    for (const auto& st : topo.stages) {
      ServiceMetricRow row;
      row.window_index = t;
      row.service = st.service;
      row.pod_count = 2.0;
      row.cpu_usage_ratio = clamp01(0.25 * load * (1.0 + st.load_sensitivity) + noise(1.0));
      row.memory_usage_ratio = clamp01(0.4 + 0.05 * load + noise(0.5));
      const double calls = static_cast<double>(n);
      row.network_rx_bytes = std::max(0.0, calls * 2048.0 * (1.0 + noise(1.0)));
      row.network_tx_bytes = std::max(0.0, calls * 8192.0 * (1.0 + noise(1.0)));
      row.disk_io_bytes = std::max(0.0, 5e4 * (1.0 + calls / 100.0) * (1.0 + noise(1.0)));
      out.metrics.push_back(row);
    }
  }
  return out;
}

void write_spans(std::ostream& out, const std::vector<SpanRecord>& spans) {
  for (const auto& s : spans) out << format_span_line(s) << '\n';
}

void write_metrics(std::ostream& out, const std::vector<ServiceMetricRow>& rows) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) write_metrics_row(out, r);
}

}  // namespace stlgt
