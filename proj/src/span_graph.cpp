#include "stlgt/span_graph.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <random>

#include <json.hpp>

#include "stlgt/errors.hpp"
#include "stlgt/quantile.hpp"

namespace stlgt {

std::optional<int> SpanGraph::index_of(const StageKey& key) const {
  for (const auto& n : nodes) {
    if (n.key == key) return n.index;
  }
  return std::nullopt;
}

SpanGraph build_span_graph(const std::vector<const WindowedTraces*>& windows, const Mcg& mcg) {
  SpanGraph g;
  std::map<StageKey, int> vid;
  bool any = false;
  for (const WindowedTraces* w : windows) {
    if (g.api.empty()) g.api = w->api;
    if (w->api != g.api) throw ValidationError("span graph mixes apis '" + g.api + "' and '" + w->api + "'");
    for (const Trace& tr : w->traces) {
      any = true;
      for (const SpanRecord& sp : tr.spans) {
        if (sp.parent_service != kClientService && !mcg.has_edge(sp.parent_service, sp.service)) {
          throw ValidationError("span edge " + sp.parent_service + " -> " + sp.service + " is not in the call graph",
                                sp.line);
        }
        StageKey key{sp.parent_service, sp.service};
        if (vid.count(key)) continue;
        const int idx = static_cast<int>(g.nodes.size());
        vid.emplace(key, idx);
        g.nodes.push_back(StageNode{std::move(key), idx});
      }
    }
  }
  if (!any) throw ValidationError("no traces for api");

  std::map<std::string, std::vector<int>> out;  // caller -> stages it issues
  for (const auto& n : g.nodes) out[n.key.parent].push_back(n.index);
  for (const auto& v : g.nodes) {
    auto it = out.find(v.key.service);
    if (it == out.end()) continue;
    for (int child : it->second) {
      if (child == v.index) continue;
      g.forward_edges.emplace(v.index, child);
      g.edges.emplace(v.index, child);
      g.edges.emplace(child, v.index);
    }
  }
  return g;
}

SpanGraph build_span_graph(const std::vector<WindowedTraces>& windows, const Mcg& mcg) {
  std::vector<const WindowedTraces*> ptrs;
  ptrs.reserve(windows.size());
  for (const auto& w : windows) ptrs.push_back(&w);
  return build_span_graph(ptrs, mcg);
}

double latency_quantile(const std::vector<Trace>& traces, double q) {
  if (traces.empty()) throw ValidationError("latency quantile of an empty window");
  std::vector<double> lat;
  lat.reserve(traces.size());
  for (const auto& tr : traces) lat.push_back(tr.latency_ms());
  return quantile(std::move(lat), q);
}

double p95_label(const std::vector<Trace>& traces) { return latency_quantile(traces, kLabelQuantile); }

RowVector phi_common(const std::vector<Trace>& traces, std::int64_t delta_s) {
  if (traces.empty()) throw ValidationError("trace-common features of an empty window");
  std::vector<double> lat;
  lat.reserve(traces.size());
  std::size_t failed = 0;
  for (const auto& tr : traces) {
    lat.push_back(tr.latency_ms());
    failed += tr.failed() ? 1 : 0;
  }
  std::sort(lat.begin(), lat.end());
  const double n = static_cast<double>(lat.size());
  double total = 0.0;
  for (double l : lat) total += l;
  RowVector c(kContextDim);
  c << n / static_cast<double>(delta_s), quantile_sorted(lat, 0.5), quantile_sorted(lat, 0.9),
      quantile_sorted(lat, 0.99), total / n, quantile_sorted(lat, 0.5), static_cast<double>(failed) / n;
  return c;
}

RowVector phi_common(const WindowedTraces& w, std::int64_t delta_s) { return phi_common(w.traces, delta_s); }

RowVector phi_span(const std::vector<Trace>& traces, const StageKey& key) {
  RowVector acc = RowVector::Zero(kSpanFeatureDim);
  int matched = 0;
  for (const auto& tr : traces) {
    const std::int64_t t0 = tr.start_us();
    const double life = static_cast<double>(tr.end_us() - t0);
    double first = 0, last = 0, dur = 0;
    bool hit = false;
    for (const auto& sp : tr.spans) {
      if (sp.parent_service != key.parent || sp.service != key.service) continue;
      if (life <= 0.0) {
        // Instantaneous trace: the stage fills the whole lifetime.
        first = 0.0;
        last = 1.0;
        dur = 1.0;
        hit = true;
        break;
      }
      const double s = static_cast<double>(sp.start_us - t0) / life;
      const double e = static_cast<double>(sp.end_us - t0) / life;
      if (!hit) {
        first = s;
        last = e;
        dur = 0.0;
        hit = true;
      }
      first = std::min(first, s);
      last = std::max(last, e);
      dur += static_cast<double>(sp.end_us - sp.start_us) / life;
    }
    if (!hit) continue;
    acc(0) += first;
    acc(1) += last;
    acc(2) += dur;
    ++matched;
  }
  if (matched > 0) acc /= static_cast<double>(matched);
  return acc;
}

WindowFeatures assemble_window(const SpanGraph& graph, const WindowedTraces& w, const ServiceMetrics& metrics,
                               std::int64_t delta_s, int cap, std::uint64_t seed) {
  if (w.traces.empty()) throw ValidationError("window " + std::to_string(w.window) + " has no traces");
  if (cap < 1) throw std::invalid_argument("trace cap must be >= 1");
  std::vector<Trace> sampled;
  if (static_cast<int>(w.traces.size()) > cap) {
    std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(w.window) * 0x9E3779B97F4A7C15ull));
    std::sample(w.traces.begin(), w.traces.end(), std::back_inserter(sampled), cap, rng);
  } else {
    sampled = w.traces;
  }
  WindowFeatures f;
  f.t = w.window;
  f.trace_count = static_cast<std::int64_t>(w.traces.size());
  f.c = phi_common(sampled, delta_s);
  f.c(0) = static_cast<double>(f.trace_count) / static_cast<double>(delta_s);
  f.y = p95_label(sampled);
  f.X.resize(graph.size(), kNodeFeatureDim);
  for (const auto& node : graph.nodes) {
    f.X.row(node.index) << metrics.at(node.mapped_service(), w.window), phi_span(sampled, node.key);
  }
  return f;
}

FeatureSet build_features(const std::vector<SpanRecord>& records, const ServiceMetrics& metrics,
                          const std::string& api, std::int64_t delta_s, int cap, std::uint64_t seed,
                          double graph_fraction) {
  if (graph_fraction <= 0.0 || graph_fraction > 1.0) throw std::invalid_argument("graph_fraction must be in (0, 1]");
  FeatureSet fs;
  fs.api = api;
  fs.delta_s = delta_s;
  fs.mcg = derive_mcg(records);
  auto grouped = group_traces(records, delta_s);
  std::vector<const WindowedTraces*> windows;
  for (const auto& [key, w] : grouped) {
    if (key.first == api && !w.traces.empty()) windows.push_back(&w);
  }
  if (windows.empty()) throw ValidationError("no traces for api '" + api + "'");
  const auto n_graph = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(graph_fraction * static_cast<double>(windows.size()))));
  fs.graph = build_span_graph(std::vector<const WindowedTraces*>(windows.begin(), windows.begin() + n_graph), fs.mcg);
  fs.windows.reserve(windows.size());
  for (const WindowedTraces* w : windows) fs.windows.push_back(assemble_window(fs.graph, *w, metrics, delta_s, cap, seed));
  return fs;
}

// ---- artifacts -------------------------------------------------------------

std::string graph_to_json(const SpanGraph& g) {
  nlohmann::ordered_json j;
  j["api"] = g.api;
  j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : g.nodes) {
    j["nodes"].push_back({{"index", n.index}, {"parent", n.key.parent}, {"service", n.key.service}});
  }
  j["edges"] = nlohmann::ordered_json::array();
  for (const auto& [a, b] : g.forward_edges) j["edges"].push_back({a, b});
  return j.dump(2);
}

SpanGraph graph_from_json(const std::string& text) {
  SpanGraph g;
  try {
    const auto j = nlohmann::json::parse(text);
    g.api = j.at("api").get<std::string>();
    for (const auto& n : j.at("nodes")) {
      const int idx = n.at("index").get<int>();
      if (idx != static_cast<int>(g.nodes.size())) throw ValidationError("graph node indices must be dense and ordered");
      g.nodes.push_back(StageNode{{n.at("parent").get<std::string>(), n.at("service").get<std::string>()}, idx});
    }
    for (const auto& e : j.at("edges")) {
      const int a = e.at(0).get<int>(), b = e.at(1).get<int>();
      if (a < 0 || b < 0 || a >= g.size() || b >= g.size() || a == b) throw ValidationError("bad graph edge");
      g.forward_edges.emplace(a, b);
      g.edges.emplace(a, b);
      g.edges.emplace(b, a);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("graph artifact: ") + e.what());
  }
  return g;
}

std::string features_to_json(const FeatureSet& fs) {
  nlohmann::ordered_json j;
  j["schema_version"] = kFeaturesSchemaVersion;
  j["api"] = fs.api;
  j["delta_s"] = fs.delta_s;
  j["node_count"] = fs.graph.size();
  j["d_in"] = kNodeFeatureDim;
  j["d_c"] = kContextDim;
  j["windows"] = nlohmann::ordered_json::array();
  for (const auto& w : fs.windows) {
    nlohmann::ordered_json jw;
    jw["t"] = w.t;
    jw["X"] = std::vector<double>(w.X.data(), w.X.data() + w.X.size());
    jw["c"] = std::vector<double>(w.c.data(), w.c.data() + w.c.size());
    jw["y"] = w.y;
    jw["trace_count"] = w.trace_count;
    j["windows"].push_back(std::move(jw));
  }
  return j.dump();
}

FeatureSet features_from_json(const std::string& text) {
  FeatureSet fs;
  try {
    const auto j = nlohmann::json::parse(text);
    const int version = j.at("schema_version").get<int>();
    if (version != kFeaturesSchemaVersion) {
      throw ParseError("unsupported features schema_version " + std::to_string(version));
    }
    fs.api = j.at("api").get<std::string>();
    fs.delta_s = j.at("delta_s").get<std::int64_t>();
    const auto n = j.at("node_count").get<Eigen::Index>();
    const auto d_in = j.at("d_in").get<Eigen::Index>();
    const auto d_c = j.at("d_c").get<Eigen::Index>();
    if (d_in != kNodeFeatureDim || d_c != kContextDim) throw ValidationError("feature dimensions do not match");
    for (const auto& jw : j.at("windows")) {
      WindowFeatures w;
      w.t = jw.at("t").get<std::int64_t>();
      const auto x = jw.at("X").get<std::vector<double>>();
      const auto c = jw.at("c").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(x.size()) != n * d_in || static_cast<Eigen::Index>(c.size()) != d_c) {
        throw ValidationError("window " + std::to_string(w.t) + " has wrong feature sizes");
      }
      w.X = Eigen::Map<const Matrix>(x.data(), n, d_in);
      w.c = Eigen::Map<const RowVector>(c.data(), d_c);
      w.y = jw.at("y").get<double>();
      w.trace_count = jw.at("trace_count").get<std::int64_t>();
      fs.windows.push_back(std::move(w));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("features artifact: ") + e.what());
  }
  return fs;
}

}  // namespace stlgt
