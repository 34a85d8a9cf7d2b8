#pragma once

#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "stlgt/checkpoint.hpp"
#include "stlgt/model.hpp"

namespace stlgt {

// psi_q(y - y_hat) = max(q u, (q - 1) u)
double pinball(double y, double y_hat, double q);
// Mean pinball over all entries; shapes must match.
double batch_loss(const Matrix& pred, const Matrix& target, double q);
Var pinball_loss(Var pred, const Matrix& target, double q);

// z-score statistics of node features, context and label, fitted on the
// training split.
class Normalizer {
 public:
  static constexpr double kStdFloor = 1e-8;

  Normalizer() = default;
  static Normalizer fit(const std::vector<WindowFeatures>& windows);

  WindowFeatures apply(const WindowFeatures& w) const;
  WindowFeatures invert(const WindowFeatures& w) const;
  double norm_y(double y_ms) const { return (y_ms - y_mean) / y_std; }
  double denorm_y(double z) const { return z * y_std + y_mean; }

  void store(Checkpoint& ckpt) const;
  static Normalizer load(const Checkpoint& ckpt);

  RowVector x_mean, x_std, c_mean, c_std;
  double y_mean = 0.0;
  double y_std = 1.0;
};

// History / target window indices of one training example.
struct Sample {
  std::vector<std::size_t> history;  // L indices, oldest first
  std::vector<std::size_t> target;   // H indices
  std::int64_t origin = 0;           // t of the last history window
};

// Sliding samples within runs of consecutive t. Warns when nothing fits.
std::vector<Sample> make_samples(const std::vector<WindowFeatures>& windows, int history, int horizon);

struct Split {
  std::vector<WindowFeatures> train, val, test;
};

// Chronological split on window index ranges (train first).
Split chronological_split(const std::vector<WindowFeatures>& windows, double train_frac, double val_frac);

// Decoupled weight decay: theta *= (1 - lr * wd), then the bias-corrected
// Adam step.
class AdamW {
 public:
  explicit AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(ParameterStore& params, const std::set<std::string>& frozen = {});
  long steps() const { return t_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// Scales gradients so their global norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(ParameterStore& params, double max_norm, const std::set<std::string>& frozen = {});

struct EpochStats {
  int epoch = 0;
  double train_pinball = 0.0;  // normalized label space
  double val_pinball = 0.0;    // ms
  double val_mae = 0.0;        // ms, averaged over horizons
};

struct EvalResult {
  std::vector<double> pinball_per_h;  // ms
  std::vector<double> mae_per_h;      // ms
  double pinball = std::numeric_limits<double>::quiet_NaN();
  double mae = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::int64_t> origins;
  Matrix predictions;  // samples x H, ms
  Matrix targets;      // samples x H, ms

  std::size_t samples() const { return origins.size(); }
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_val_mae = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  EvalResult best_val;  // validation predictions of the returned parameters
};

// Trains `model` in place on raw (unnormalized) windows and leaves it at the
// best validation epoch. Parameters named in `frozen` are never updated.
TrainReport train(Model& model, const Normalizer& norm, const GraphOperators& ops,
                  const std::vector<WindowFeatures>& train_windows, const std::vector<WindowFeatures>& val_windows,
                  const TrainConfig& cfg, const std::set<std::string>& frozen = {});

EvalResult evaluate(const Model& model, const Normalizer& norm, const GraphOperators& ops,
                    const std::vector<WindowFeatures>& windows, double q);

// y_hat[t+h] = y[t] over the same samples as evaluate().
EvalResult evaluate_persistence(const std::vector<WindowFeatures>& windows, int history, int horizon, double q);

struct ForecastSeries {
  std::int64_t origin = 0;
  std::vector<double> y_ms;
  std::string model_version;
};

ForecastSeries predict(const Model& model, const Normalizer& norm, const GraphOperators& ops,
                       const std::vector<WindowFeatures>& last_windows, const std::string& version = "");

// ---- persistence -----------------------------------------------------------

struct TrainedModel {
  RunConfig config;
  Model model;
  Normalizer norm;
  SpanGraph graph;  // operators are rebuilt from it on load
  std::string api;
  int node_count = 0;
};

Checkpoint make_checkpoint(const TrainedModel& tm);
TrainedModel restore_model(const Checkpoint& ckpt);

}  // namespace stlgt
