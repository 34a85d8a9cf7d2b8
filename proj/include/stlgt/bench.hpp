#pragma once

// Batch-1 forward latency sweep over graph size for the two global mixing
// operators, plus exact multiply-accumulate counts of the mixing stage.

#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "stlgt/model.hpp"

namespace stlgt {

// Random labelled tree over n nodes, both directions: |E| = 2 (n - 1).
std::set<std::pair<int, int>> random_tree_edges(int n, std::mt19937_64& rng);

// Multiply-accumulates of the global mixing stage alone.
std::int64_t analytic_mixing_macs(Mixing variant, std::int64_t n, std::int64_t d);
std::int64_t counted_mixing_macs(Mixing variant, int n, int d, std::uint64_t seed = 1);

struct BenchConfig {
  std::vector<int> ns{32, 64, 128, 256, 512, 1024};
  std::vector<Mixing> variants{Mixing::linear, Mixing::dense};
  int d = 32;
  int repeats = 1000;
  int warmup = 50;
  int L = 12;
  int H = 6;
  std::uint64_t seed = 7;
};

struct BenchPoint {
  Mixing variant = Mixing::linear;
  int n = 0;
  double median_ms = 0.0;
  double mean_ms = 0.0;
  int runs = 0;
  std::int64_t forward_macs = 0;    // counted, whole forward
  std::int64_t mixing_macs = 0;     // counted, mixing stage
  std::int64_t analytic_macs = 0;   // closed form, mixing stage
};

struct VariantSummary {
  Mixing variant = Mixing::linear;
  std::optional<double> slope;         // least squares of log time on log N
  std::optional<double> growth_ratio;  // time(N_max) / time(N_min)
};

struct BenchReport {
  std::vector<BenchPoint> points;
  std::vector<VariantSummary> summaries;

  const VariantSummary* summary(Mixing v) const;
};

std::optional<double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

BenchReport bench_forward(const BenchConfig& cfg, std::ostream* progress = nullptr);

void write_bench_csv(std::ostream& out, const BenchReport& report);

}  // namespace stlgt
