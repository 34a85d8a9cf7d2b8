#pragma once

// Independent reference implementations used by the tests. Nothing here calls
// into the code under test except to read parameter values.

#include <algorithm>
#include <complex>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "stlgt/tensor.hpp"

namespace stlgt::test {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Largest |analytic - numeric| over a tensor divided by the tensor's largest
// gradient magnitude (either side), never by less than `floor`.
inline double tensor_rel_error(const Matrix& analytic, const Matrix& numeric, double floor = 1e-12) {
  const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), floor});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

// Central differences at step h carry roundoff near eps * |loss| / h, about
// 2e-11 |loss| at h = 1e-5, so gradients below ~1e-6 |loss| cannot be
// resolved to 1e-4 relative. Use this as the floor for whole-model checks.
inline double fd_resolution_floor(double loss) { return 1e-6 * std::max(1.0, std::abs(loss)); }

// Central finite differences of loss() against each parameter entry.
// `loss` builds a fresh forward pass on the given tape and returns a 1x1 Var.
inline std::map<std::string, double> gradcheck(ParameterStore& params, const std::function<Var(Tape&)>& loss,
                                               double step = 1e-5, double floor = 1e-12) {
  params.zero_grad();
  {
    Tape tape(true);
    Var l = loss(tape);
    tape.backward(l);
  }
  std::map<std::string, double> out;
  for (auto& [name, p] : params.all()) {
    Matrix numeric(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double keep = p.value.data()[i];
      p.value.data()[i] = keep + step;
      Tape t1(false);
      const double up = loss(t1).scalar();
      p.value.data()[i] = keep - step;
      Tape t2(false);
      const double down = loss(t2).scalar();
      p.value.data()[i] = keep;
      numeric.data()[i] = (up - down) / (2.0 * step);
    }
    out[name] = tensor_rel_error(p.grad, numeric, floor);
  }
  return out;
}

// Nudges every parameter off the initial point. Zero-initialised biases can
// leave a ReLU input at exactly 0, where central differences straddle the kink.
inline void jitter_params(ParameterStore& params, std::mt19937_64& rng, double scale = 0.05) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [_, p] : params.all()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += u(rng);
  }
}

inline double max_error(const std::map<std::string, double>& errs) {
  double m = 0.0;
  for (const auto& [k, v] : errs) m = std::max(m, v);
  return m;
}

// Explicit all-pairs form of normalized linear attention:
//   z_i = (v_i + (1/N) sum_j (q_i . k_j) v_j) / (1 + (1/N) q_i . sum_j k_j)
inline Matrix dense_sum_linear_mix(const Matrix& q, const Matrix& k, const Matrix& v) {
  const Eigen::Index n = q.rows();
  Matrix z(n, v.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd num = v.row(i);
    double den = 1.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      double dot = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) dot += q(i, c) * k(j, c);
      num += dot / static_cast<double>(n) * v.row(j);
      den += dot / static_cast<double>(n);
    }
    z.row(i) = num / den;
  }
  return z;
}

// Complex DFT by definition, magnitudes for bins 0..T/2 of each column.
inline Matrix naive_dft_magnitudes(const Matrix& x) {
  const Eigen::Index T = x.rows();
  Matrix out(T / 2 + 1, x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index f = 0; f <= T / 2; ++f) {
      std::complex<double> acc = 0.0;
      for (Eigen::Index t = 0; t < T; ++t) {
        acc += x(t, c) * std::polar(1.0, -2.0 * M_PI * static_cast<double>(f * t) / static_cast<double>(T));
      }
      out(f, c) = std::abs(acc);
    }
  }
  return out;
}

}  // namespace stlgt::test

#include "stlgt/trace_ingest.hpp"

namespace stlgt::test {

inline SpanRecord span(const std::string& trace, const std::string& id, const std::string& parent,
                       const std::string& service, std::int64_t start, std::int64_t end,
                       const std::string& api = "api", SpanStatus status = SpanStatus::ok) {
  return SpanRecord{trace, id, parent, service, api, start, end, status, 0};
}

// Random call trees over services s0..s{m-1}: each trace walks a random
// subtree of a fixed random service tree; some stages are invoked twice.
inline std::vector<SpanRecord> random_trace_set(std::mt19937_64& rng, int n_traces = 20, int m = 7) {
  std::vector<int> parent(static_cast<std::size_t>(m), -1);
  for (int i = 1; i < m; ++i) parent[static_cast<std::size_t>(i)] = std::uniform_int_distribution<int>(0, i - 1)(rng);
  auto name = [](int i) { return "s" + std::to_string(i); };
  std::bernoulli_distribution keep(0.7), twice(0.15);
  std::vector<SpanRecord> out;
  for (int t = 0; t < n_traces; ++t) {
    const std::string tid = "t" + std::to_string(t);
    const std::int64_t base = std::uniform_int_distribution<std::int64_t>(0, 120'000'000)(rng);
    int next = 0;
    std::function<void(int, std::int64_t, std::int64_t)> walk = [&](int s, std::int64_t b, std::int64_t e) {
      const std::string caller = parent[static_cast<std::size_t>(s)] < 0 ? kClientService
                                                                          : name(parent[static_cast<std::size_t>(s)]);
      const int reps = twice(rng) ? 2 : 1;
      for (int r = 0; r < reps; ++r) {
        out.push_back(span(tid, "x" + std::to_string(next++), caller, name(s), b, e));
        for (int c = 0; c < m; ++c) {
          if (parent[static_cast<std::size_t>(c)] != s || !keep(rng)) continue;
          const std::int64_t len = e - b;
          const std::int64_t cb = b + std::uniform_int_distribution<std::int64_t>(0, len / 2)(rng);
          const std::int64_t ce = cb + std::uniform_int_distribution<std::int64_t>(0, (e - cb))(rng);
          walk(c, cb, ce);
        }
      }
    };
    walk(0, base, base + std::uniform_int_distribution<std::int64_t>(0, 50'000)(rng));
  }
  return out;
}

}  // namespace stlgt::test

#include "stlgt/train.hpp"

namespace stlgt::test {

// Consecutive windows over an n-node graph with a smooth label.
inline std::vector<WindowFeatures> synthetic_windows(int count, int nodes, std::mt19937_64& rng,
                                                     std::int64_t t0 = 0) {
  std::normal_distribution<double> noise(0.0, 0.3);
  std::vector<WindowFeatures> out;
  for (int i = 0; i < count; ++i) {
    WindowFeatures w;
    w.t = t0 + i;
    const double phase = static_cast<double>(w.t) / 5.0;
    w.X = random_matrix(nodes, kNodeFeatureDim, rng, 0.0, 1.0);
    w.X.col(1).array() += std::sin(phase);
    w.c = random_matrix(1, kContextDim, rng, 0.0, 1.0);
    w.c(0) += std::sin(phase);
    w.y = 20.0 + 4.0 * std::sin(phase) + noise(rng);
    w.trace_count = 10;
    out.push_back(std::move(w));
  }
  return out;
}

inline RunConfig tiny_run_config() {
  RunConfig cfg;
  cfg.model.encoder.d = cfg.model.decoder.d = 4;
  cfg.model.decoder.L = 4;
  cfg.model.decoder.H = 2;
  cfg.model.decoder.B = 1;
  cfg.model.decoder.K = 2;
  cfg.train.max_epochs = 3;
  cfg.train.batch_size = 8;
  return cfg;
}

// A chain graph over n stages.
inline SpanGraph chain_graph(int n) {
  SpanGraph g;
  g.api = "api";
  for (int i = 0; i < n; ++i) {
    g.nodes.push_back(StageNode{{i == 0 ? kClientService : "s" + std::to_string(i - 1), "s" + std::to_string(i)}, i});
    if (i > 0) {
      g.forward_edges.emplace(i - 1, i);
      g.edges.emplace(i - 1, i);
      g.edges.emplace(i, i - 1);
    }
  }
  return g;
}

struct QuantileFit {
  double fitted = 0.0;     // ms
  double empirical = 0.0;  // ms
  double spread = 0.0;     // population std of the draws
};

// Output-bias-only model trained with pinball loss on `draws` i.i.d.
// lognormal labels; every other parameter is frozen and the head weights are
// zero, so the forecast is the denormalized bias.
inline QuantileFit bias_only_quantile_fit(int draws, double q, std::uint64_t seed, double lr = 3e-3,
                                          int epochs = 12, int batch = 32) {
  std::mt19937_64 rng(seed);
  std::lognormal_distribution<double> lat(std::log(20.0), 0.4);
  RunConfig cfg;
  cfg.model.encoder.d = cfg.model.decoder.d = 2;
  cfg.model.decoder.L = 1;
  cfg.model.decoder.H = 1;
  cfg.model.decoder.B = 0;
  cfg.model.decoder.K = 1;
  cfg.train.q = q;
  cfg.train.lr = lr;
  cfg.train.max_epochs = epochs;
  cfg.train.batch_size = batch;
  cfg.train.seed = seed;

  // one leading window supplies the history of the first target
  std::vector<WindowFeatures> windows;
  std::vector<double> ys;
  for (int i = 0; i <= draws; ++i) {
    WindowFeatures w;
    w.t = i;
    w.X = Matrix::Zero(1, kNodeFeatureDim);
    w.c = RowVector::Zero(kContextDim);
    w.y = lat(rng);
    if (i > 0) ys.push_back(w.y);
    windows.push_back(std::move(w));
  }
  Model model(cfg.model, seed);
  model.params().at("dec.head.W").value.setZero();
  std::set<std::string> frozen;
  for (const auto& [name, _] : model.params().all()) {
    if (name != "dec.head.b") frozen.insert(name);
  }
  const Normalizer norm = Normalizer::fit(windows);
  const GraphOperators ops = GraphOperators::from_edges(1, {});
  train(model, norm, ops, windows, {}, cfg.train, frozen);

  QuantileFit fit;
  fit.fitted = norm.denorm_y(model.params().at("dec.head.b").value(0, 0));
  std::vector<double> sorted = ys;
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  fit.empirical = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
  double mean = 0.0;
  for (double y : ys) mean += y;
  mean /= static_cast<double>(ys.size());
  double var = 0.0;
  for (double y : ys) var += (y - mean) * (y - mean);
  fit.spread = std::sqrt(var / static_cast<double>(ys.size()));
  return fit;
}

}  // namespace stlgt::test
