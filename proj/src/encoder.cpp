#include "stlgt/encoder.hpp"

#include <cmath>
#include <iostream>
#include <vector>

#include "stlgt/errors.hpp"

namespace stlgt {

namespace {

std::string block_prefix(int b) { return "enc.block" + std::to_string(b) + "."; }

}  // namespace

Mixing parse_mixing(const std::string& s) {
  if (s == "linear") return Mixing::linear;
  if (s == "dense") return Mixing::dense;
  throw std::invalid_argument("mixing must be linear|dense, got '" + s + "'");
}

std::string to_string(Mixing m) { return m == Mixing::linear ? "linear" : "dense"; }

GraphOperators GraphOperators::from_edges(int n, const std::set<std::pair<int, int>>& edges) {
  if (n < 1) throw ValidationError("graph operators need at least one node");
  std::vector<Eigen::Triplet<double>> a_hat;
  std::vector<double> degree(static_cast<std::size_t>(n), 1.0);
  for (int i = 0; i < n; ++i) a_hat.emplace_back(i, i, 1.0);
  for (const auto& [i, j] : edges) {
    if (i < 0 || j < 0 || i >= n || j >= n || i == j) throw ValidationError("invalid graph edge");
    a_hat.emplace_back(i, j, 1.0);
    degree[static_cast<std::size_t>(i)] += 1.0;
  }
  std::vector<Eigen::Triplet<double>> p, s;
  p.reserve(a_hat.size());
  s.reserve(a_hat.size());
  for (const auto& e : a_hat) {
    const double di = degree[static_cast<std::size_t>(e.row())];
    const double dj = degree[static_cast<std::size_t>(e.col())];
    p.emplace_back(e.row(), e.col(), 1.0 / di);
    s.emplace_back(e.row(), e.col(), 1.0 / std::sqrt(di * dj));
  }
  GraphOperators ops;
  ops.n = n;
  ops.P.resize(n, n);
  ops.P.setFromTriplets(p.begin(), p.end());
  ops.S.resize(n, n);
  ops.S.setFromTriplets(s.begin(), s.end());
  return ops;
}

double clamp_rho(double rho) {
  if (rho >= 0.0 && rho <= 1.0) return rho;
  const double clamped = rho < 0.0 ? 0.0 : 1.0;
  std::cerr << "warning: rho " << rho << " outside [0,1], clamped to " << clamped << '\n';
  return clamped;
}

void init_encoder_params(ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng) {
  const int d = cfg.d;
  auto weight = [&](const std::string& name, int rows, int cols) {
    store.add(name, xavier_uniform(rows, cols, rows, cols, rng));
  };
  auto zeros = [&](const std::string& name, int rows, int cols) { store.add(name, Matrix::Zero(rows, cols)); };

  weight("enc.in.W", cfg.d_in, d);
  zeros("enc.in.b", 1, d);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string p = block_prefix(b);
    weight(p + "Wq", d, d);
    weight(p + "Wk", d, d);
    weight(p + "Wv", d, d);
    weight(p + "Wl", d, d);
    weight(p + "f1.W", 2 * d, d);
    zeros(p + "f1.b", 1, d);
    weight(p + "f2.W", d, d);
    zeros(p + "f2.b", 1, d);
    store.add(p + "ln.gamma", Matrix::Ones(1, d));
    zeros(p + "ln.beta", 1, d);
  }
  weight("enc.readout.w", d, 1);
  weight("enc.ctx.W", cfg.d_c, d);
  zeros("enc.ctx.b", 1, d);
  weight("enc.out.W", 2 * d, d);
  zeros("enc.out.b", 1, d);
}

Var input_mlp(Var x, Var w_in, Var b_in) { return relu(add_row(matmul(x, w_in), b_in)); }

Qkv qkv(Var h0, Var w_q, Var w_k, Var w_v, double eps) {
  Var q = relu(matmul(h0, w_q));
  Var k = relu(matmul(h0, w_k));
  Var v = matmul(h0, w_v);
  return {frobenius_normalize(q, eps), frobenius_normalize(k, eps), v};
}

std::pair<Var, Var> premix(Var k, Var v, const Sparse& p, double rho) {
  rho = clamp_rho(rho);
  Var k_bar = add(scale(k, 1.0 - rho), scale(spmm(p, k), rho));
  Var v_bar = add(scale(v, 1.0 - rho), scale(spmm(p, v), rho));
  return {k_bar, v_bar};
}

Var linear_global_mix(Var q, Var k, Var v) {
  const double inv_n = 1.0 / static_cast<double>(q.rows());
  Var k_sum = sum_rows(k);                       // 1 x d
  Var kv = matmul(transpose(k), v);              // d x d
  Var denom = add_scalar(scale(matmul(q, transpose(k_sum)), inv_n), 1.0);  // N x 1
  // With ReLU'd queries and keys every entry is >= 1.
  if (denom.value().minCoeff() <= 0.0) throw NumericFault("linear_global_mix: non-positive normalizer");
  Var num = add(v, scale(matmul(q, kv), inv_n));
  return div_rows(num, denom);
}

Var dense_global_mix(Var q, Var k, Var v) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  return matmul(softmax_rows(scores), v);
}

Var gcn_branch(Var h0, const Sparse& s, Var w_l) { return matmul(spmm(s, h0), w_l); }

Var fuse(Var h0, Var z_global, Var z_local, const FuseParams& p) {
  Var z = concat_cols(z_global, z_local);
  Var hidden = relu(add_row(matmul(z, p.w1), p.b1));
  Var delta = add_row(matmul(hidden, p.w2), p.b2);
  return layer_norm_rows(add(h0, delta), p.ln_gamma, p.ln_beta);
}

Var pool_weights(Var h, Var w_r) { return softmax_rows(transpose(matmul(h, w_r))); }

Var readout(Var h, Var c, const ReadoutParams& p) {
  Var g_node = matmul(pool_weights(h, p.w_r), h);  // 1 x d
  Var c_bar = relu(add_row(matmul(c, p.w_c), p.b_c));
  return relu(add_row(matmul(concat_cols(g_node, c_bar), p.w_g), p.b_g));
}

Var encode_window(Tape& tape, const ParameterStore& params, const EncoderConfig& cfg, const GraphOperators& ops,
                  const Matrix& x, const RowVector& c) {
  if (x.rows() != ops.n || x.cols() != cfg.d_in) {
    throw ShapeError("encode_window: features " + shape_str(x) + " for a graph of " + std::to_string(ops.n) +
                     " nodes and d_in " + std::to_string(cfg.d_in));
  }
  auto P = [&](const std::string& name) { return tape.param(params.at(name)); };
  Var h = input_mlp(tape.constant(x), P("enc.in.W"), P("enc.in.b"));
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string pre = block_prefix(b);
    Qkv a = qkv(h, P(pre + "Wq"), P(pre + "Wk"), P(pre + "Wv"), cfg.eps);
    Var k = a.k, v = a.v;
    if (cfg.premix) std::tie(k, v) = premix(a.k, a.v, ops.P, cfg.rho);
    Var z_global = cfg.mixing == Mixing::linear ? linear_global_mix(a.q, k, v) : dense_global_mix(a.q, k, v);
    Var z_local = gcn_branch(h, ops.S, P(pre + "Wl"));
    h = fuse(h, z_global, z_local,
             FuseParams{P(pre + "f1.W"), P(pre + "f1.b"), P(pre + "f2.W"), P(pre + "f2.b"), P(pre + "ln.gamma"),
                        P(pre + "ln.beta")});
  }
  Matrix c_row = c;
  return readout(h, tape.constant(std::move(c_row)),
                 ReadoutParams{P("enc.readout.w"), P("enc.ctx.W"), P("enc.ctx.b"), P("enc.out.W"), P("enc.out.b")});
}

}  // namespace stlgt
