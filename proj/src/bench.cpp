#include "stlgt/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace stlgt {

std::set<std::pair<int, int>> random_tree_edges(int n, std::mt19937_64& rng) {
  std::set<std::pair<int, int>> edges;
  for (int i = 1; i < n; ++i) {
    const int parent = std::uniform_int_distribution<int>(0, i - 1)(rng);
    edges.emplace(parent, i);
    edges.emplace(i, parent);
  }
  return edges;
}

std::int64_t analytic_mixing_macs(Mixing variant, std::int64_t n, std::int64_t d) {
  // linear: K^T V and Q (K^T V) are n d^2 each, K^T 1 and Q (K^T 1) are n d each.
  // dense: Q K^T and softmax(.) V are n^2 d each.
  return variant == Mixing::linear ? n * (2 * d * d + 2 * d) : 2 * n * n * d;
}

namespace {

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

std::int64_t counted_mixing_macs(Mixing variant, int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tape tape(false);
  Var q = tape.constant(random_matrix(n, d, rng));
  Var k = tape.constant(random_matrix(n, d, rng));
  Var v = tape.constant(random_matrix(n, d, rng));
  OpCounter counter;
  if (variant == Mixing::linear) {
    linear_global_mix(q, k, v);
  } else {
    dense_global_mix(q, k, v);
  }
  return counter.macs();
}

const VariantSummary* BenchReport::summary(Mixing v) const {
  for (const auto& s : summaries) {
    if (s.variant == v) return &s;
  }
  return nullptr;
}

std::optional<double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) return std::nullopt;
  return sxy / sxx;
}

BenchReport bench_forward(const BenchConfig& cfg, std::ostream* progress) {
  BenchReport report;
  for (Mixing variant : cfg.variants) {
    std::vector<double> xs, ys;
    for (int n : cfg.ns) {
      std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(n));
      // Graph operators and inputs are prepared outside the timed region.
      const GraphOperators ops = GraphOperators::from_edges(n, random_tree_edges(n, rng));
      ModelConfig mc;
      mc.encoder.d = mc.decoder.d = cfg.d;
      mc.encoder.mixing = variant;
      mc.decoder.L = cfg.L;
      mc.decoder.H = cfg.H;
      const Model model(mc, cfg.seed);
      std::vector<WindowFeatures> windows(static_cast<std::size_t>(cfg.L));
      std::vector<const WindowFeatures*> history;
      for (auto& w : windows) {
        w.X = random_matrix(n, mc.encoder.d_in, rng);
        w.c = random_matrix(1, mc.encoder.d_c, rng);
        history.push_back(&w);
      }

      BenchPoint pt;
      pt.variant = variant;
      pt.n = n;
      {
        OpCounter counter;
        Tape tape(false);
        model.forward(tape, ops, history);
        pt.forward_macs = counter.macs();
      }
      pt.mixing_macs = counted_mixing_macs(variant, n, cfg.d, cfg.seed);
      pt.analytic_macs = analytic_mixing_macs(variant, n, cfg.d);

      for (int i = 0; i < cfg.warmup; ++i) {
        Tape tape(false);
        model.forward(tape, ops, history);
      }
      std::vector<double> ms;
      ms.reserve(static_cast<std::size_t>(cfg.repeats));
      for (int i = 0; i < cfg.repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Tape tape(false);
        model.forward(tape, ops, history);
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      pt.runs = cfg.repeats;
      if (!ms.empty()) {
        pt.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
        auto mid = ms.begin() + static_cast<std::ptrdiff_t>(ms.size() / 2);
        std::nth_element(ms.begin(), mid, ms.end());
        pt.median_ms = *mid;
        if (ms.size() % 2 == 0) pt.median_ms = 0.5 * (pt.median_ms + *std::max_element(ms.begin(), mid));
      }
      if (progress) {
        *progress << to_string(variant) << " N=" << n << " median " << pt.median_ms << " ms, mean " << pt.mean_ms
                  << " ms\n";
      }
      xs.push_back(n);
      ys.push_back(pt.median_ms);
      report.points.push_back(pt);
    }
    VariantSummary s;
    s.variant = variant;
    const bool timed = std::all_of(ys.begin(), ys.end(), [](double y) { return y > 0.0; });
    if (xs.size() >= 2 && timed) {
      s.slope = loglog_slope(xs, ys);
      s.growth_ratio = ys.back() / ys.front();
    }
    report.summaries.push_back(s);
  }
  return report;
}

void write_bench_csv(std::ostream& out, const BenchReport& report) {
  out << "variant,n,median_ms,mean_ms,runs,forward_macs,mixing_macs,analytic_mixing_macs\n";
  for (const auto& p : report.points) {
    out << to_string(p.variant) << ',' << p.n << ',' << p.median_ms << ',' << p.mean_ms << ',' << p.runs << ','
        << p.forward_macs << ',' << p.mixing_macs << ',' << p.analytic_macs << '\n';
  }
}

}  // namespace stlgt
