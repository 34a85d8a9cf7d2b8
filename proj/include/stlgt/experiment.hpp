#pragma once

// Whole-pipeline helpers: simulate -> features -> split -> train -> evaluate.

#include <ostream>
#include <string>
#include <vector>

#include "stlgt/train.hpp"
#include "stlgt/workload_sim.hpp"

namespace stlgt {

// Default desk-scale workload: 2000 windows of 30 s, cosine load with random
// rectangular bursts.
struct Workload {
  SyntheticTopology topology = default_topology();
  WorkloadSchedule schedule;
  SimConfig sim;
};

Workload default_workload(std::uint64_t seed);

FeatureSet features_from_sim(const SimOutput& sim, const std::string& api, const RunConfig& cfg);

struct ExperimentResult {
  std::string label;
  RunConfig config;
  TrainReport report;
  TrainedModel model;
  EvalResult test;
  EvalResult persistence;
  double train_seconds = 0.0;
};

// Chronological split, normalizer on the training split, training with early
// stopping, then test-split evaluation of the model and the persistence
// baseline over identical samples.
ExperimentResult run_experiment(const FeatureSet& features, const RunConfig& cfg, const std::string& label = "stlgt");

struct Variant {
  std::string label;
  RunConfig config;
};

// The full model followed by its rho = 0 and linear-decoder ablations.
std::vector<Variant> ablation_variants(const RunConfig& base);

void write_training_csv(std::ostream& out, const TrainReport& report);
// One row per (model, horizon) plus a "mean" row per model.
void write_summary_csv(std::ostream& out, const std::vector<ExperimentResult>& results);

}  // namespace stlgt
