#pragma once

// Temporal decoder over the last L window embeddings G (L x d).
//
//   U0 = [G; 0_{H x d}] W_ts + b_ts                  (T = L + H rows)
//   U(b+1) = U(b) + TimesBlock(U(b)),  b < B
//   y_hat[h] = U(B)[L + h] W_out + b_out
//
// TimesBlock picks the K strongest non-DC frequency bins of U, folds U into a
// (ceil(T/p) x p) grid per period p = ceil(T/f), applies a shared conv3x3 ->
// GELU -> conv3x3 block, unfolds, truncates to T and mixes the K results with
// softmax weights over their amplitudes.

#include <random>
#include <string>
#include <vector>

#include "stlgt/tensor.hpp"

namespace stlgt {

enum class DecoderKind { timesnet, linear };

DecoderKind parse_decoder(const std::string& s);
std::string to_string(DecoderKind k);

struct DecoderConfig {
  int d = 32;
  int L = 12;
  int H = 6;
  int B = 2;
  int K = 3;
  DecoderKind kind = DecoderKind::timesnet;

  int T() const { return L + H; }
};

void validate(const DecoderConfig& cfg);
void init_decoder_params(ParameterStore& store, const DecoderConfig& cfg, std::mt19937_64& rng);

struct Period {
  int bin = 0;
  int period = 0;
  double amplitude = 0.0;
};

// Top-K bins by channel-mean amplitude, DC excluded, ties to the lower bin.
std::vector<Period> detect_periods(const Matrix& u, int k);

Var extend_and_embed(Var g, int horizon, Var w_ts, Var b_ts);

struct ConvBlock {
  Var w1, b1, w2, b2;
};

// Softmax weights (1 x K) over the amplitudes of the given bins of u.
Var period_weights(Var u, const std::vector<Period>& periods);

Var period_branch(Var u, int period, const ConvBlock& conv);
Var times_block(Var u, int k, const ConvBlock& conv);

Var decode(Tape& tape, const ParameterStore& params, const DecoderConfig& cfg, Var u0);

Var predict_head(Var u_bar, int history, int horizon, Var w_out, Var b_out);  // horizon x 1

// G (L x d) -> predictions (H x 1) for either decoder kind.
Var decoder_forward(Tape& tape, const ParameterStore& params, const DecoderConfig& cfg, Var g);

}  // namespace stlgt
