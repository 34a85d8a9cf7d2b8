#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include "stlgt/decoder.hpp"
#include "stlgt/encoder.hpp"
#include "stlgt/span_graph.hpp"

namespace stlgt {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
};

// Encoder + decoder parameters and the forward pass over L normalized windows.
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed);
  // Adopts existing parameters; names and shapes must match a fresh model.
  Model(const ModelConfig& cfg, ParameterStore params);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  Var embed(Tape& tape, const GraphOperators& ops, const WindowFeatures& w) const;
  // history: L windows, oldest first. Returns H x 1.
  Var forward(Tape& tape, const GraphOperators& ops, const std::vector<const WindowFeatures*>& history) const;

  // Tape-free helpers for inference.
  RowVector embed_value(const GraphOperators& ops, const WindowFeatures& w) const;
  Eigen::VectorXd decode_value(const Matrix& g) const;

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

struct TrainConfig {
  double q = 0.95;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int max_epochs = 40;
  int patience = 6;
  double train_frac = 0.70;
  double val_frac = 0.15;
  double test_frac = 0.15;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
};

// Every tunable of a run, read from a flat `key = value` file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::int64_t delta_s = 30;
  int cap = kDefaultTraceCap;
  double graph_frac = 0.70;

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
  void validate() const;
};

RunConfig parse_run_config(std::istream& in);
RunConfig run_config_from_map(const std::map<std::string, std::string>& kv);

}  // namespace stlgt
