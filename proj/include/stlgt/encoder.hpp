#pragma once

// Spatial encoder: maps one window's node features and trace-common context
// to a window embedding g (1 x d).
//
//   H0 = relu(X W_in + b_in)
//   Q = relu(H0 W_Q), K = relu(H0 W_K), V = H0 W_V, Q~ = Q/(|Q|_F+eps), K~ = K/(|K|_F+eps)
//   K_ = (1-rho) K~ + rho P K~,  V_ = (1-rho) V + rho P V          (P = D^-1 (A+I))
//   Z_G = diag(1 + Q~ K_^T 1 / N)^-1 (V_ + Q~ (K_^T V_) / N)       (no N x N term)
//   Z_L = S H0 W_L                                                  (S = D^-1/2 (A+I) D^-1/2)
//   H   = LN(H0 + relu([Z_G | Z_L] W_f1 + b_f1) W_f2 + b_f2)
//   g   = relu([softmax(H w_r)^T H | relu(c W_c + b_c)] W_g + b_g)

#include <random>
#include <set>
#include <string>
#include <utility>

#include "stlgt/span_graph.hpp"
#include "stlgt/tensor.hpp"

namespace stlgt {

enum class Mixing { linear, dense };

Mixing parse_mixing(const std::string& s);
std::string to_string(Mixing m);

// Time-invariant propagation operators of one span graph.
struct GraphOperators {
  int n = 0;
  Sparse P;  // row-stochastic D^-1 (A + I)
  Sparse S;  // symmetric D^-1/2 (A + I) D^-1/2

  static GraphOperators from_edges(int n, const std::set<std::pair<int, int>>& edges);
  static GraphOperators from_graph(const SpanGraph& g) { return from_edges(g.size(), g.edges); }
};

struct EncoderConfig {
  int d_in = kNodeFeatureDim;
  int d_c = kContextDim;
  int d = 32;
  double rho = 0.5;
  Mixing mixing = Mixing::linear;
  int blocks = 1;
  double eps = 1e-8;
  bool premix = true;  // false skips the pre-mixing step entirely
};

// Clamps rho into [0, 1], warning on stderr when it had to.
double clamp_rho(double rho);

void init_encoder_params(ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng);

Var input_mlp(Var x, Var w_in, Var b_in);

struct Qkv {
  Var q;  // Frobenius-normalized
  Var k;  // Frobenius-normalized
  Var v;
};

Qkv qkv(Var h0, Var w_q, Var w_k, Var w_v, double eps);

std::pair<Var, Var> premix(Var k, Var v, const Sparse& p, double rho);

// Streaming all-pair mixing via d x d and d-sized summaries.
Var linear_global_mix(Var q, Var k, Var v);

// Standard attention alternative: softmax_rows(Q K^T / sqrt(d)) V.
Var dense_global_mix(Var q, Var k, Var v);

Var gcn_branch(Var h0, const Sparse& s, Var w_l);

struct FuseParams {
  Var w1, b1, w2, b2, ln_gamma, ln_beta;
};

Var fuse(Var h0, Var z_global, Var z_local, const FuseParams& p);

struct ReadoutParams {
  Var w_r;  // d x 1
  Var w_c, b_c, w_g, b_g;
};

// Attention pooling over nodes fused with the trace-common context.
Var readout(Var h, Var c, const ReadoutParams& p);

// Attention-pool weights (1 x N) used by readout.
Var pool_weights(Var h, Var w_r);

Var encode_window(Tape& tape, const ParameterStore& params, const EncoderConfig& cfg, const GraphOperators& ops,
                  const Matrix& x, const RowVector& c);

}  // namespace stlgt
