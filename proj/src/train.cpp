#include "stlgt/train.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>

#include "stlgt/errors.hpp"

namespace stlgt {

double pinball(double y, double y_hat, double q) {
  const double u = y - y_hat;
  return std::max(q * u, (q - 1.0) * u);
}

double batch_loss(const Matrix& pred, const Matrix& target, double q) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("batch_loss: " + shape_str(pred) + " vs " + shape_str(target));
  }
  if (pred.size() == 0) throw ShapeError("batch_loss: empty batch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    for (Eigen::Index j = 0; j < pred.cols(); ++j) total += pinball(target(i, j), pred(i, j), q);
  }
  return total / static_cast<double>(pred.size());
}

Var pinball_loss(Var pred, const Matrix& target, double q) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("pinball_loss: " + shape_str(pred.value()) + " vs " + shape_str(target));
  }
  // q relu(u) + (1 - q) relu(-u) with u = y - y_hat
  Var u = sub(pred.tape->constant(target), pred);
  Var under = scale(relu(u), q);
  Var over = scale(relu(scale(u, -1.0)), 1.0 - q);
  return mean(add(under, over));
}

// ---- normalizer ------------------------------------------------------------

namespace {

void column_stats(const Matrix& rows, RowVector& mean, RowVector& std_dev) {
  mean = rows.colwise().mean();
  const Matrix centered = rows.rowwise() - mean;
  std_dev = (centered.array().square().colwise().sum() / static_cast<double>(rows.rows())).sqrt().matrix();
  std_dev = std_dev.cwiseMax(Normalizer::kStdFloor);
}

}  // namespace

Normalizer Normalizer::fit(const std::vector<WindowFeatures>& windows) {
  if (windows.empty()) throw ValidationError("cannot fit a normalizer on an empty training split");
  const Eigen::Index n = windows.front().X.rows();
  const Eigen::Index dx = windows.front().X.cols();
  const Eigen::Index dc = windows.front().c.cols();
  Matrix xs(n * static_cast<Eigen::Index>(windows.size()), dx);
  Matrix cs(static_cast<Eigen::Index>(windows.size()), dc);
  Matrix ys(static_cast<Eigen::Index>(windows.size()), 1);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    if (w.X.rows() != n || w.X.cols() != dx || w.c.cols() != dc) throw ShapeError("normalizer: ragged windows");
    const auto r = static_cast<Eigen::Index>(i);
    xs.middleRows(r * n, n) = w.X;
    cs.row(r) = w.c;
    ys(r, 0) = w.y;
  }
  Normalizer out;
  column_stats(xs, out.x_mean, out.x_std);
  column_stats(cs, out.c_mean, out.c_std);
  RowVector ym, ysd;
  column_stats(ys, ym, ysd);
  out.y_mean = ym(0);
  out.y_std = ysd(0);
  return out;
}

WindowFeatures Normalizer::apply(const WindowFeatures& w) const {
  WindowFeatures out = w;
  out.X = ((w.X.rowwise() - x_mean).array().rowwise() / x_std.array()).matrix();
  out.c = ((w.c - c_mean).array() / c_std.array()).matrix();
  out.y = norm_y(w.y);
  return out;
}

WindowFeatures Normalizer::invert(const WindowFeatures& w) const {
  WindowFeatures out = w;
  out.X = ((w.X.array().rowwise() * x_std.array()).matrix().rowwise() + x_mean);
  out.c = (w.c.array() * c_std.array()).matrix() + c_mean;
  out.y = denorm_y(w.y);
  return out;
}

void Normalizer::store(Checkpoint& ckpt) const {
  ckpt.tensors["norm.x_mean"] = x_mean;
  ckpt.tensors["norm.x_std"] = x_std;
  ckpt.tensors["norm.c_mean"] = c_mean;
  ckpt.tensors["norm.c_std"] = c_std;
  Matrix y(1, 2);
  y << y_mean, y_std;
  ckpt.tensors["norm.y"] = y;
}

Normalizer Normalizer::load(const Checkpoint& ckpt) {
  auto get = [&](const std::string& name) -> const Matrix& {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ValidationError("checkpoint lacks '" + name + "'");
    return it->second;
  };
  Normalizer n;
  n.x_mean = get("norm.x_mean");
  n.x_std = get("norm.x_std");
  n.c_mean = get("norm.c_mean");
  n.c_std = get("norm.c_std");
  const Matrix& y = get("norm.y");
  if (y.size() != 2) throw ValidationError("norm.y must hold mean and std");
  n.y_mean = y(0, 0);
  n.y_std = y(0, 1);
  return n;
}

// ---- samples and splits ----------------------------------------------------

namespace {

std::vector<Sample> samples_quiet(const std::vector<WindowFeatures>& windows, int history, int horizon) {
  std::vector<Sample> out;
  const std::size_t n = windows.size();
  const auto L = static_cast<std::size_t>(history);
  const auto H = static_cast<std::size_t>(horizon);
  std::size_t run_start = 0;
  for (std::size_t i = 0; i <= n; ++i) {
    const bool breaks = i == n || (i > 0 && windows[i].t != windows[i - 1].t + 1);
    if (i > 0 && i < n && windows[i].t <= windows[i - 1].t) {
      throw ValidationError("make_samples: windows must be sorted by t");
    }
    if (!breaks) continue;
    // run is [run_start, i)
    for (std::size_t end = run_start + L; end + H <= i; ++end) {
      Sample s;
      for (std::size_t k = end - L; k < end; ++k) s.history.push_back(k);
      for (std::size_t k = end; k < end + H; ++k) s.target.push_back(k);
      s.origin = windows[end - 1].t;
      out.push_back(std::move(s));
    }
    run_start = i;
  }
  return out;
}

}  // namespace

std::vector<Sample> make_samples(const std::vector<WindowFeatures>& windows, int history, int horizon) {
  if (history < 1 || horizon < 1) throw std::invalid_argument("make_samples: L and H must be >= 1");
  auto out = samples_quiet(windows, history, horizon);
  if (out.empty()) {
    std::cerr << "warning: no run of " << history + horizon << " consecutive windows among " << windows.size()
              << "; no samples\n";
  }
  return out;
}

Split chronological_split(const std::vector<WindowFeatures>& windows, double train_frac, double val_frac) {
  if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0 + 1e-12) {
    throw ValidationError("invalid split fractions");
  }
  const auto n = windows.size();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_frac));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_frac)));
  Split s;
  s.train.assign(windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(windows.begin() + static_cast<std::ptrdiff_t>(n_train),
               windows.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(windows.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), windows.end());
  return s;
}

// ---- optimizer -------------------------------------------------------------

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(ParameterStore& params, const std::set<std::string>& frozen) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto& [name, p] : params.all()) {
    if (frozen.count(name)) continue;
    if (p.grad.size() == 0) p.zero_grad();
    auto [it, fresh] = state_.try_emplace(name);
    Moments& st = it->second;
    if (fresh) {
      st.m = Matrix::Zero(p.value.rows(), p.value.cols());
      st.v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    st.m = b1_ * st.m + (1.0 - b1_) * p.grad;
    st.v = b2_ * st.v + (1.0 - b2_) * p.grad.cwiseProduct(p.grad);
    p.value *= 1.0 - lr_ * wd_;
    p.value.array() -= lr_ * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps_);
  }
}

double clip_grad_norm(ParameterStore& params, double max_norm, const std::set<std::string>& frozen) {
  double sq = 0.0;
  for (const auto& [name, p] : params.all()) {
    if (!frozen.count(name) && p.grad.size() > 0) sq += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, p] : params.all()) {
      if (!frozen.count(name) && p.grad.size() > 0) p.grad *= s;
    }
  }
  return norm;
}

// ---- evaluation ------------------------------------------------------------

namespace {

std::vector<WindowFeatures> normalize_all(const Normalizer& norm, const std::vector<WindowFeatures>& windows) {
  std::vector<WindowFeatures> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(norm.apply(w));
  return out;
}

void check_windows(const GraphOperators& ops, const ModelConfig& cfg, const std::vector<WindowFeatures>& windows) {
  for (const auto& w : windows) {
    if (w.X.rows() != ops.n || w.X.cols() != cfg.encoder.d_in || w.c.cols() != cfg.encoder.d_c) {
      throw ValidationError("window t=" + std::to_string(w.t) + " has features " + shape_str(w.X) +
                            " but the model expects " + std::to_string(ops.n) + "x" +
                            std::to_string(cfg.encoder.d_in));
    }
  }
}

EvalResult summarize(std::vector<std::int64_t> origins, Matrix pred, Matrix target, double q) {
  EvalResult r;
  const Eigen::Index h = pred.cols();
  r.pinball_per_h.assign(static_cast<std::size_t>(h), std::numeric_limits<double>::quiet_NaN());
  r.mae_per_h = r.pinball_per_h;
  r.origins = std::move(origins);
  if (pred.rows() > 0) {
    for (Eigen::Index j = 0; j < h; ++j) {
      r.pinball_per_h[static_cast<std::size_t>(j)] = batch_loss(pred.col(j), target.col(j), q);
      r.mae_per_h[static_cast<std::size_t>(j)] = (pred.col(j) - target.col(j)).cwiseAbs().mean();
    }
    r.pinball = batch_loss(pred, target, q);
    r.mae = (pred - target).cwiseAbs().mean();
  }
  r.predictions = std::move(pred);
  r.targets = std::move(target);
  return r;
}

}  // namespace

EvalResult evaluate(const Model& model, const Normalizer& norm, const GraphOperators& ops,
                    const std::vector<WindowFeatures>& windows, double q) {
  const auto& dc = model.config().decoder;
  check_windows(ops, model.config(), windows);
  const auto samples = samples_quiet(windows, dc.L, dc.H);
  Matrix pred(static_cast<Eigen::Index>(samples.size()), dc.H);
  Matrix target(pred.rows(), dc.H);
  std::vector<std::int64_t> origins;
  std::vector<std::optional<RowVector>> cache(windows.size());
  for (std::size_t s = 0; s < samples.size(); ++s) {
    Matrix g(dc.L, dc.d);
    for (std::size_t k = 0; k < samples[s].history.size(); ++k) {
      const std::size_t idx = samples[s].history[k];
      if (!cache[idx]) cache[idx] = model.embed_value(ops, norm.apply(windows[idx]));
      g.row(static_cast<Eigen::Index>(k)) = *cache[idx];
    }
    const Eigen::VectorXd z = model.decode_value(g);
    const auto r = static_cast<Eigen::Index>(s);
    for (int h = 0; h < dc.H; ++h) {
      pred(r, h) = norm.denorm_y(z(h));
      target(r, h) = windows[samples[s].target[static_cast<std::size_t>(h)]].y;
    }
    origins.push_back(samples[s].origin);
  }
  return summarize(std::move(origins), std::move(pred), std::move(target), q);
}

EvalResult evaluate_persistence(const std::vector<WindowFeatures>& windows, int history, int horizon, double q) {
  const auto samples = samples_quiet(windows, history, horizon);
  Matrix pred(static_cast<Eigen::Index>(samples.size()), horizon);
  Matrix target(pred.rows(), horizon);
  std::vector<std::int64_t> origins;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    pred.row(r).setConstant(windows[samples[s].history.back()].y);
    for (int h = 0; h < horizon; ++h) target(r, h) = windows[samples[s].target[static_cast<std::size_t>(h)]].y;
    origins.push_back(samples[s].origin);
  }
  return summarize(std::move(origins), std::move(pred), std::move(target), q);
}

// ---- training --------------------------------------------------------------

TrainReport train(Model& model, const Normalizer& norm, const GraphOperators& ops,
                  const std::vector<WindowFeatures>& train_windows, const std::vector<WindowFeatures>& val_windows,
                  const TrainConfig& cfg, const std::set<std::string>& frozen) {
  if (train_windows.empty()) throw ValidationError("empty training split");
  const ModelConfig& mc = model.config();
  const auto& dc = mc.decoder;
  check_windows(ops, mc, train_windows);
  check_windows(ops, mc, val_windows);
  const std::vector<WindowFeatures> tr = normalize_all(norm, train_windows);
  const auto samples = make_samples(tr, dc.L, dc.H);
  if (samples.empty()) throw ValidationError("training split yields no complete samples");
  const bool have_val = !samples_quiet(val_windows, dc.L, dc.H).empty();

  TrainReport report;
  std::mt19937_64 rng(cfg.seed);
  AdamW opt(cfg.lr, cfg.weight_decay);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ParameterStore best = model.params();
  int since_best = 0;
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t nb = std::min(batch, order.size() - b0);
      Tape tape(true);
      std::map<std::size_t, Var> emb;
      std::vector<Var> preds;
      Matrix target(static_cast<Eigen::Index>(nb), dc.H);
      try {
        for (std::size_t i = 0; i < nb; ++i) {
          const Sample& s = samples[order[b0 + i]];
          std::vector<Var> rows;
          for (std::size_t idx : s.history) {
            auto it = emb.find(idx);
            if (it == emb.end()) it = emb.emplace(idx, model.embed(tape, ops, tr[idx])).first;
            rows.push_back(it->second);
          }
          preds.push_back(transpose(decoder_forward(tape, model.params(), dc, stack_rows(rows))));
          for (int h = 0; h < dc.H; ++h) {
            target(static_cast<Eigen::Index>(i), h) = tr[s.target[static_cast<std::size_t>(h)]].y;
          }
        }
        Var loss = pinball_loss(stack_rows(preds), target, cfg.q);
        if (!std::isfinite(loss.scalar())) throw NumericFault("non-finite loss");
        loss_sum += loss.scalar() * static_cast<double>(nb);
        model.params().zero_grad();
        tape.backward(loss);
      } catch (const NumericFault& e) {
        throw NumericFault("training aborted at epoch " + std::to_string(epoch) + ", batch starting at sample " +
                           std::to_string(b0) + ": " + e.what());
      }
      clip_grad_norm(model.params(), cfg.clip_norm, frozen);
      opt.step(model.params(), frozen);
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_pinball = loss_sum / static_cast<double>(order.size());
    if (have_val) {
      EvalResult ev = evaluate(model, norm, ops, val_windows, cfg.q);
      st.val_pinball = ev.pinball;
      st.val_mae = ev.mae;
      report.epochs.push_back(st);
      if (ev.mae < report.best_val_mae) {
        report.best_val_mae = ev.mae;
        report.best_epoch = epoch;
        report.best_val = std::move(ev);
        best = model.params();
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        report.early_stopped = true;
        break;
      }
    } else {
      st.val_pinball = st.val_mae = std::numeric_limits<double>::quiet_NaN();
      report.epochs.push_back(st);
      report.best_epoch = epoch;
      best = model.params();
    }
  }

  for (auto& [name, p] : model.params().all()) p.value = best.at(name).value;
  if (have_val && report.best_epoch < 0) {
    report.best_val = evaluate(model, norm, ops, val_windows, cfg.q);
    report.best_val_mae = report.best_val.mae;
    report.best_epoch = 0;
  }
  return report;
}

ForecastSeries predict(const Model& model, const Normalizer& norm, const GraphOperators& ops,
                       const std::vector<WindowFeatures>& last_windows, const std::string& version) {
  const auto& dc = model.config().decoder;
  if (static_cast<int>(last_windows.size()) < dc.L) {
    throw ValidationError("predict needs " + std::to_string(dc.L) + " windows, got " +
                          std::to_string(last_windows.size()));
  }
  const std::vector<WindowFeatures> hist(last_windows.end() - dc.L, last_windows.end());
  check_windows(ops, model.config(), hist);
  Matrix g(dc.L, dc.d);
  for (int k = 0; k < dc.L; ++k) g.row(k) = model.embed_value(ops, norm.apply(hist[static_cast<std::size_t>(k)]));
  const Eigen::VectorXd z = model.decode_value(g);
  ForecastSeries out;
  out.origin = hist.back().t;
  out.model_version = version;
  for (int h = 0; h < dc.H; ++h) out.y_ms.push_back(norm.denorm_y(z(h)));
  return out;
}

// ---- persistence -----------------------------------------------------------

namespace {
constexpr const char* kCfgPrefix = "cfg.";
}

Checkpoint make_checkpoint(const TrainedModel& tm) {
  Checkpoint ck;
  ck.meta["format"] = "stlgt-model";
  ck.meta["api"] = tm.api;
  ck.meta["node_count"] = std::to_string(tm.node_count);
  ck.meta["graph"] = graph_to_json(tm.graph);
  for (const auto& [k, v] : tm.config.to_map()) ck.meta[kCfgPrefix + k] = v;
  for (const auto& [name, p] : tm.model.params().all()) ck.tensors[name] = p.value;
  tm.norm.store(ck);
  return ck;
}

TrainedModel restore_model(const Checkpoint& ckpt) {
  auto meta = [&](const std::string& key) -> const std::string& {
    auto it = ckpt.meta.find(key);
    if (it == ckpt.meta.end()) throw ValidationError("checkpoint meta lacks '" + key + "'");
    return it->second;
  };
  if (meta("format") != "stlgt-model") throw ValidationError("not a model checkpoint");
  std::map<std::string, std::string> kv;
  const std::string prefix = kCfgPrefix;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.rfind(prefix, 0) == 0) kv[k.substr(prefix.size())] = v;
  }
  TrainedModel tm;
  tm.config = run_config_from_map(kv);
  tm.api = meta("api");
  tm.node_count = std::stoi(meta("node_count"));
  tm.graph = graph_from_json(meta("graph"));
  if (tm.graph.size() != tm.node_count) throw ValidationError("checkpoint graph disagrees with node_count");
  ParameterStore store;
  for (const auto& [name, value] : ckpt.tensors) {
    if (name.rfind("norm.", 0) != 0) store.add(name, value);
  }
  tm.model = Model(tm.config.model, std::move(store));
  tm.norm = Normalizer::load(ckpt);
  return tm;
}

}  // namespace stlgt
