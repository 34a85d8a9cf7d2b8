#include "stlgt/decoder.hpp"

#include <algorithm>
#include <numeric>

#include "stlgt/dft.hpp"
#include "stlgt/errors.hpp"

namespace stlgt {

namespace {

std::string block_prefix(int b) { return "dec.tb" + std::to_string(b) + "."; }

}  // namespace

DecoderKind parse_decoder(const std::string& s) {
  if (s == "timesnet") return DecoderKind::timesnet;
  if (s == "linear") return DecoderKind::linear;
  throw std::invalid_argument("decoder must be timesnet|linear, got '" + s + "'");
}

std::string to_string(DecoderKind k) { return k == DecoderKind::timesnet ? "timesnet" : "linear"; }

void validate(const DecoderConfig& cfg) {
  if (cfg.L < 1 || cfg.H < 1) throw std::invalid_argument("decoder needs L >= 1 and H >= 1");
  if (cfg.B < 0) throw std::invalid_argument("decoder block count must be >= 0");
  if (cfg.kind == DecoderKind::timesnet && cfg.B > 0 && (cfg.K < 1 || cfg.K > cfg.T() / 2)) {
    throw std::invalid_argument("K must be in [1, floor((L+H)/2)], got " + std::to_string(cfg.K));
  }
}

void init_decoder_params(ParameterStore& store, const DecoderConfig& cfg, std::mt19937_64& rng) {
  validate(cfg);
  const int d = cfg.d;
  if (cfg.kind == DecoderKind::linear) {
    store.add("dec.linear.W", xavier_uniform(cfg.L * d, cfg.H, cfg.L * d, cfg.H, rng));
    store.add("dec.linear.b", Matrix::Zero(1, cfg.H));
    return;
  }
  store.add("dec.ts.W", xavier_uniform(d, d, d, d, rng));
  store.add("dec.ts.b", Matrix::Zero(1, d));
  for (int b = 0; b < cfg.B; ++b) {
    const std::string p = block_prefix(b);
    store.add(p + "conv1.W", xavier_uniform(9 * d, d, 9 * d, 9 * d, rng));
    store.add(p + "conv1.b", Matrix::Zero(1, d));
    store.add(p + "conv2.W", xavier_uniform(9 * d, d, 9 * d, 9 * d, rng));
    store.add(p + "conv2.b", Matrix::Zero(1, d));
  }
  store.add("dec.head.W", xavier_uniform(d, 1, d, 1, rng));
  store.add("dec.head.b", Matrix::Zero(1, 1));
}

std::vector<Period> detect_periods(const Matrix& u, int k) {
  const Eigen::Index length = u.rows();
  if (k < 1 || k > length / 2) {
    throw std::invalid_argument("detect_periods: K must be in [1, " + std::to_string(length / 2) + "]");
  }
  Eigen::VectorXd amp = bin_mean_amplitude(u);
  // Amplitudes carry rounding error on the order of eps * length * max|u|.
  // Within `tol` two bins count as tied (an impulse has a flat spectrum, a
  // constant series an all-zero one) and the lower bin wins; otherwise noise
  // would pick the period.
  const double tol = 1e-12 * static_cast<double>(length) * (u.size() ? u.cwiseAbs().maxCoeff() : 0.0);
  amp = (amp.array() > tol).select(amp, 0.0);
  std::vector<int> left(static_cast<std::size_t>(amp.size() - 1));
  std::iota(left.begin(), left.end(), 1);
  std::vector<Period> out;
  for (int i = 0; i < k; ++i) {
    double top = 0.0;
    for (int f : left) top = std::max(top, amp(f));
    const auto pick = std::find_if(left.begin(), left.end(), [&](int f) { return amp(f) >= top - tol; });
    const int f = *pick;
    left.erase(pick);
    const int period = static_cast<int>((length + f - 1) / f);
    out.push_back(Period{f, period, amp(f)});
  }
  return out;
}

Var extend_and_embed(Var g, int horizon, Var w_ts, Var b_ts) {
  Var padded = pad_rows(g, g.rows() + horizon);
  return add_row(matmul(padded, w_ts), b_ts);
}

Var period_weights(Var u, const std::vector<Period>& periods) {
  Tape& t = *u.tape;
  Var mags = rdft_magnitude(u);  // bins x d
  Var amp = scale(matmul(mags, t.constant(Matrix::Ones(u.cols(), 1))), 1.0 / static_cast<double>(u.cols()));
  std::vector<Eigen::Index> rows;
  for (const auto& p : periods) rows.push_back(p.bin);
  return softmax_rows(transpose(gather_rows(amp, rows)));
}

Var period_branch(Var u, int period, const ConvBlock& conv) {
  const Eigen::Index length = u.rows();
  const Eigen::Index grid_rows = (length + period - 1) / period;
  Var grid = pad_rows(u, grid_rows * period);
  Var h = gelu(conv3x3(grid, grid_rows, period, conv.w1, conv.b1));
  h = conv3x3(h, grid_rows, period, conv.w2, conv.b2);
  return slice_rows(h, 0, length);
}

Var times_block(Var u, int k, const ConvBlock& conv) {
  const std::vector<Period> periods = detect_periods(u.value(), k);
  Var weights = period_weights(u, periods);
  Var out{};
  for (std::size_t i = 0; i < periods.size(); ++i) {
    Var branch = scale_by(period_branch(u, periods[i].period, conv), slice_cols(weights, static_cast<Eigen::Index>(i), 1));
    out = i == 0 ? branch : add(out, branch);
  }
  return out;
}

Var decode(Tape& tape, const ParameterStore& params, const DecoderConfig& cfg, Var u0) {
  Var u = u0;
  for (int b = 0; b < cfg.B; ++b) {
    const std::string p = block_prefix(b);
    ConvBlock conv{tape.param(params.at(p + "conv1.W")), tape.param(params.at(p + "conv1.b")),
                   tape.param(params.at(p + "conv2.W")), tape.param(params.at(p + "conv2.b"))};
    u = add(u, times_block(u, cfg.K, conv));
  }
  return u;
}

Var predict_head(Var u_bar, int history, int horizon, Var w_out, Var b_out) {
  return add_row(matmul(slice_rows(u_bar, history, horizon), w_out), b_out);
}

Var decoder_forward(Tape& tape, const ParameterStore& params, const DecoderConfig& cfg, Var g) {
  if (g.rows() != cfg.L || g.cols() != cfg.d) {
    throw ShapeError("decoder_forward: expected " + std::to_string(cfg.L) + "x" + std::to_string(cfg.d) +
                     " embeddings, got " + shape_str(g.value()));
  }
  auto P = [&](const std::string& name) { return tape.param(params.at(name)); };
  if (cfg.kind == DecoderKind::linear) {
    Var flat = reshape(g, 1, static_cast<Eigen::Index>(cfg.L) * cfg.d);
    return transpose(add_row(matmul(flat, P("dec.linear.W")), P("dec.linear.b")));
  }
  Var u0 = extend_and_embed(g, cfg.H, P("dec.ts.W"), P("dec.ts.b"));
  Var u_bar = decode(tape, params, cfg, u0);
  return predict_head(u_bar, cfg.L, cfg.H, P("dec.head.W"), P("dec.head.b"));
}

}  // namespace stlgt
