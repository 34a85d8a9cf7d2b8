#include <algorithm>
#include <random>
#include <sstream>

#include "doctest.h"
#include "stlgt/errors.hpp"
#include "stlgt/span_graph.hpp"
#include "support.hpp"

using namespace stlgt;
using stlgt::test::span;

namespace {

WindowedTraces window_of_traces(const std::vector<SpanRecord>& recs, std::int64_t delta_s = 30) {
  auto g = group_traces(recs, delta_s);
  WindowedTraces all;
  all.api = "api";
  for (auto& [_, w] : g) {
    for (auto& tr : w.traces) all.traces.push_back(tr);
  }
  return all;
}

Trace trace_with_latency_ms(const std::string& id, double ms, bool failed = false) {
  return Trace{id, "api",
               {span(id, "r", "client", "A", 0, static_cast<std::int64_t>(ms * 1000.0), "api",
                     failed ? SpanStatus::failed : SpanStatus::ok)}};
}

}  // namespace

TEST_CASE("three-stage chain") {
  const std::vector<SpanRecord> recs = {span("t", "1", "client", "A", 0, 100), span("t", "2", "A", "B", 10, 90),
                                        span("t", "3", "B", "C", 20, 80)};
  const SpanGraph g = build_span_graph({window_of_traces(recs)}, derive_mcg(recs));
  REQUIRE(g.size() == 3);
  CHECK(g.nodes[0].key == StageKey{"client", "A"});
  CHECK(g.nodes[1].key == StageKey{"A", "B"});
  CHECK(g.nodes[2].key == StageKey{"B", "C"});
  CHECK(g.forward_edges == std::set<std::pair<int, int>>{{0, 1}, {1, 2}});
  CHECK(g.edges == std::set<std::pair<int, int>>{{0, 1}, {1, 0}, {1, 2}, {2, 1}});
}

TEST_CASE("root-only trace") {
  const std::vector<SpanRecord> recs = {span("t", "1", "client", "A", 0, 100)};
  const SpanGraph g = build_span_graph({window_of_traces(recs)}, derive_mcg(recs));
  CHECK(g.size() == 1);
  CHECK(g.edges.empty());
}

TEST_CASE("second trace appends a new stage") {
  const std::vector<SpanRecord> recs = {span("t1", "1", "client", "A", 0, 100), span("t1", "2", "A", "B", 10, 90),
                                        span("t1", "3", "B", "C", 20, 80), span("t2", "1", "client", "A", 200, 300),
                                        span("t2", "2", "A", "C", 210, 290)};
  const SpanGraph g = build_span_graph({window_of_traces(recs)}, derive_mcg(recs));
  REQUIRE(g.size() == 4);
  CHECK(g.nodes[3].key == StageKey{"A", "C"});
  CHECK(g.forward_edges.count({0, 3}) == 1);
  CHECK(g.edges.count({3, 0}) == 1);
  // (A,C) calls nothing, so C's callees (B,C) gains no edge from it.
  CHECK(g.forward_edges == std::set<std::pair<int, int>>{{0, 1}, {0, 3}, {1, 2}});
}

TEST_CASE("span graph errors") {
  CHECK_THROWS_WITH_AS(build_span_graph(std::vector<WindowedTraces>{}, Mcg{}), "no traces for api", ValidationError);
  const std::vector<SpanRecord> recs = {span("t", "1", "client", "A", 0, 100), span("t", "2", "A", "B", 10, 90)};
  CHECK_THROWS_AS(build_span_graph({window_of_traces(recs)}, Mcg{}), ValidationError);
  // Self-invocations never enter the call graph.
  const std::vector<SpanRecord> self = {span("t", "1", "client", "A", 0, 100), span("t", "2", "A", "A", 10, 90)};
  CHECK_THROWS_AS(build_span_graph({window_of_traces(self)}, derive_mcg(self)), ValidationError);
}

TEST_CASE("randomized graphs match an independent construction") {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 100; ++rep) {
    const auto recs = stlgt::test::random_trace_set(rng, 15);
    const Mcg mcg = derive_mcg(recs);
    const WindowedTraces w = window_of_traces(recs);
    const SpanGraph g = build_span_graph({w}, mcg);

    std::vector<StageKey> order;
    for (const auto& tr : w.traces) {
      for (const auto& sp : tr.spans) {
        StageKey k{sp.parent_service, sp.service};
        if (std::find(order.begin(), order.end(), k) == order.end()) order.push_back(k);
      }
    }
    REQUIRE(g.size() == static_cast<int>(order.size()));
    std::set<std::string> services;
    for (int i = 0; i < g.size(); ++i) {
      CHECK(g.nodes[static_cast<std::size_t>(i)].key == order[static_cast<std::size_t>(i)]);
      CHECK(g.nodes[static_cast<std::size_t>(i)].index == i);
      CHECK(g.nodes[static_cast<std::size_t>(i)].mapped_service() == order[static_cast<std::size_t>(i)].service);
      services.insert(order[static_cast<std::size_t>(i)].service);
    }
    CHECK(g.size() >= static_cast<int>(services.size()));

    std::set<std::pair<int, int>> want;
    for (int i = 0; i < g.size(); ++i) {
      for (int j = 0; j < g.size(); ++j) {
        if (i != j && order[static_cast<std::size_t>(i)].service == order[static_cast<std::size_t>(j)].parent) {
          want.emplace(i, j);
        }
      }
    }
    CHECK(g.forward_edges == want);
    for (auto [a, b] : g.edges) {
      CHECK(a != b);
      CHECK(g.edges.count({b, a}) == 1);
    }
    for (auto [a, b] : g.forward_edges) {
      CHECK(mcg.has_edge(g.nodes[static_cast<std::size_t>(a)].mapped_service(),
                         g.nodes[static_cast<std::size_t>(b)].mapped_service()));
    }
    CHECK(build_span_graph({w}, mcg) == g);
  }
}

TEST_CASE("phi_common") {
  SUBCASE("four traces") {
    std::vector<Trace> t = {trace_with_latency_ms("a", 10), trace_with_latency_ms("b", 20, true),
                            trace_with_latency_ms("c", 30), trace_with_latency_ms("d", 40)};
    const RowVector c = phi_common(t, 30);
    REQUIRE(c.size() == 7);
    CHECK(c(0) == doctest::Approx(4.0 / 30.0));
    CHECK(c(1) == doctest::Approx(25.0));
    CHECK(c(2) == doctest::Approx(37.0));
    CHECK(c(3) == doctest::Approx(39.7));
    CHECK(c(4) == doctest::Approx(25.0));
    CHECK(c(5) == doctest::Approx(25.0));
    CHECK(c(6) == doctest::Approx(0.25));
  }
  SUBCASE("single trace") {
    const RowVector c = phi_common({trace_with_latency_ms("a", 50)}, 30);
    RowVector want(7);
    want << 1.0 / 30.0, 50, 50, 50, 50, 50, 0;
    CHECK((c - want).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("all failed") {
    CHECK(phi_common({trace_with_latency_ms("a", 5, true), trace_with_latency_ms("b", 6, true)}, 30)(6) == 1.0);
  }
  SUBCASE("empty") { CHECK_THROWS_AS(phi_common(std::vector<Trace>{}, 30), ValidationError); }
}

TEST_CASE("phi_span") {
  const StageKey key{"A", "B"};
  SUBCASE("one matching span") {
    Trace t{"t", "api", {span("t", "1", "client", "A", 100, 200), span("t", "2", "A", "B", 120, 150)}};
    const RowVector u = phi_span({t}, key);
    CHECK(u(0) == doctest::Approx(0.2));
    CHECK(u(1) == doctest::Approx(0.5));
    CHECK(u(2) == doctest::Approx(0.3));
  }
  SUBCASE("two matching spans") {
    Trace t{"t", "api",
            {span("t", "1", "client", "A", 100, 200), span("t", "2", "A", "B", 120, 150),
             span("t", "3", "A", "B", 160, 180)}};
    const RowVector u = phi_span({t}, key);
    CHECK(u(0) == doctest::Approx(0.2));
    CHECK(u(1) == doctest::Approx(0.8));
    CHECK(u(2) == doctest::Approx(0.5));
  }
  SUBCASE("averaged over matching traces only") {
    Trace a{"a", "api", {span("a", "1", "client", "A", 100, 200), span("a", "2", "A", "B", 120, 150)}};
    Trace b{"b", "api", {span("b", "1", "client", "A", 0, 100), span("b", "2", "A", "B", 0, 100)}};
    Trace c{"c", "api", {span("c", "1", "client", "A", 0, 100)}};
    const RowVector u = phi_span({a, b, c}, key);
    CHECK(u(0) == doctest::Approx(0.1));
    CHECK(u(1) == doctest::Approx(0.75));
    CHECK(u(2) == doctest::Approx(0.65));
  }
  SUBCASE("unobserved node") {
    Trace t{"t", "api", {span("t", "1", "client", "A", 100, 200)}};
    CHECK(phi_span({t}, key) == RowVector::Zero(3));
  }
  SUBCASE("zero-length trace") {
    Trace t{"t", "api", {span("t", "1", "client", "A", 100, 100), span("t", "2", "A", "B", 100, 100)}};
    RowVector want(3);
    want << 0, 1, 1;
    CHECK(phi_span({t}, key) == want);
  }
}

TEST_CASE("phi_span bounds on random traces") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const auto recs = stlgt::test::random_trace_set(rng, 8);
    const WindowedTraces w = window_of_traces(recs);
    const SpanGraph g = build_span_graph({w}, derive_mcg(recs));
    for (const auto& node : g.nodes) {
      std::size_t s_max = 0;
      for (const auto& tr : w.traces) {
        s_max = std::max<std::size_t>(s_max, static_cast<std::size_t>(std::count_if(
                                                 tr.spans.begin(), tr.spans.end(), [&](const SpanRecord& s) {
                                                   return s.parent_service == node.key.parent &&
                                                          s.service == node.key.service;
                                                 })));
      }
      const RowVector u = phi_span(w.traces, node.key);
      CHECK(u(0) >= 0.0);
      CHECK(u(0) <= 1.0);
      CHECK(u(1) >= 0.0);
      CHECK(u(1) <= 1.0);
      CHECK(u(2) >= 0.0);
      CHECK(u(2) <= static_cast<double>(s_max) + 1e-12);
    }
  }
}

TEST_CASE("p95 label") {
  std::vector<Trace> t;
  for (int i = 1; i <= 100; ++i) t.push_back(trace_with_latency_ms(std::to_string(i), i));
  CHECK(p95_label(t) == doctest::Approx(95.05));
  CHECK(p95_label({trace_with_latency_ms("a", 7), trace_with_latency_ms("b", 7)}) == doctest::Approx(7.0));
  CHECK(p95_label({trace_with_latency_ms("a", 1), trace_with_latency_ms("b", 1000)}) == doctest::Approx(950.05));
  CHECK_THROWS_AS(p95_label({}), ValidationError);
}

TEST_CASE("assemble_window") {
  SUBCASE("single node concatenates metrics and span features") {
    const std::vector<SpanRecord> recs = {span("t", "1", "client", "A", 0, 0)};
    WindowedTraces w = window_of_traces(recs);
    const SpanGraph g = build_span_graph({w}, derive_mcg(recs));
    ServiceMetrics m;
    m.insert({0, "A", 2, 0.5, 0.4, 100, 200, 50});
    const WindowFeatures f = assemble_window(g, w, m, 30);
    Matrix want(1, 9);
    want << 2, 0.5, 0.4, 100, 200, 50, 0, 1, 1;
    CHECK(f.X == want);
    CHECK(f.trace_count == 1);
  }
  SUBCASE("cap keeps the pre-cap count") {
    std::vector<SpanRecord> recs;
    for (int i = 0; i < 5; ++i) {
      recs.push_back(span("t" + std::to_string(i), "1", "client", "A", i * 1000, i * 1000 + (i + 1) * 1000));
    }
    WindowedTraces w = window_of_traces(recs);
    const SpanGraph g = build_span_graph({w}, derive_mcg(recs));
    const WindowFeatures f = assemble_window(g, w, ServiceMetrics{}, 30, 1, 42);
    CHECK(f.trace_count == 5);
    CHECK(f.c(0) == doctest::Approx(5.0 / 30.0));
    // one trace: every latency statistic collapses onto it
    CHECK(f.c(1) == f.c(3));
    CHECK(f.y == f.c(1));
    const WindowFeatures again = assemble_window(g, w, ServiceMetrics{}, 30, 1, 42);
    CHECK(again == f);
  }
  SUBCASE("empty window") {
    WindowedTraces w;
    SpanGraph g;
    CHECK_THROWS_AS(assemble_window(g, w, ServiceMetrics{}, 30), ValidationError);
  }
}

TEST_CASE("build_features freezes the graph and stays deterministic") {
  std::mt19937_64 rng(8);
  auto recs = stlgt::test::random_trace_set(rng, 60);
  const auto a = build_features(recs, ServiceMetrics{}, "api", 30, 3, 9, 0.5);
  const auto b = build_features(recs, ServiceMetrics{}, "api", 30, 3, 9, 0.5);
  CHECK(a.graph == b.graph);
  REQUIRE(a.windows.size() == b.windows.size());
  for (std::size_t i = 0; i < a.windows.size(); ++i) {
    CHECK(a.windows[i] == b.windows[i]);
    CHECK(a.windows[i].X.rows() == a.graph.size());
    CHECK(a.windows[i].X.allFinite());
    if (i > 0) CHECK(a.windows[i].t > a.windows[i - 1].t);
  }
  CHECK_THROWS_AS(build_features(recs, ServiceMetrics{}, "other", 30, 3, 9), ValidationError);
}

TEST_CASE("graph and feature artifacts round-trip") {
  std::mt19937_64 rng(12);
  auto recs = stlgt::test::random_trace_set(rng, 40);
  ServiceMetrics m;
  m.insert({0, "s0", 2, 0.123456789012345, 0.4, 1.0 / 3.0, 200, 50});
  const auto fs = build_features(recs, m, "api", 30, 150, 1);
  const SpanGraph g = graph_from_json(graph_to_json(fs.graph));
  CHECK(g == fs.graph);
  const auto back = features_from_json(features_to_json(fs));
  CHECK(back.api == fs.api);
  CHECK(back.delta_s == fs.delta_s);
  REQUIRE(back.windows.size() == fs.windows.size());
  for (std::size_t i = 0; i < fs.windows.size(); ++i) CHECK(back.windows[i] == fs.windows[i]);
  CHECK_THROWS(graph_from_json("{"));
  CHECK_THROWS(features_from_json(R"({"schema_version": 99})"));
}
