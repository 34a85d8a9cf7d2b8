#include "stlgt/experiment.hpp"

#include <chrono>

#include "stlgt/errors.hpp"

namespace stlgt {

Workload default_workload(std::uint64_t seed) {
  Workload w;
  w.sim.seed = seed;
  w.sim.n_windows = 2000;
  w.sim.delta_s = 30;
  w.schedule.r0 = 1.5;
  w.schedule.amplitude = 0.75;
  w.schedule.period = 48.0;
  w.schedule.bursts = random_bursts(w.sim.n_windows, w.schedule.r0, seed);
  return w;
}

FeatureSet features_from_sim(const SimOutput& sim, const std::string& api, const RunConfig& cfg) {
  ServiceMetrics metrics;
  for (const auto& row : sim.metrics) metrics.insert(row);
  return build_features(sim.spans, metrics, api, cfg.delta_s, cfg.cap, cfg.train.seed, cfg.graph_frac);
}

ExperimentResult run_experiment(const FeatureSet& features, const RunConfig& cfg, const std::string& label) {
  cfg.validate();
  ExperimentResult res;
  res.label = label;
  res.config = cfg;
  const Split split = chronological_split(features.windows, cfg.train.train_frac, cfg.train.val_frac);
  const GraphOperators ops = GraphOperators::from_graph(features.graph);

  res.model.config = cfg;
  res.model.api = features.api;
  res.model.graph = features.graph;
  res.model.node_count = features.graph.size();
  res.model.norm = Normalizer::fit(split.train);
  res.model.model = Model(cfg.model, cfg.train.seed);

  const auto t0 = std::chrono::steady_clock::now();
  res.report = train(res.model.model, res.model.norm, ops, split.train, split.val, cfg.train);
  res.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  res.test = evaluate(res.model.model, res.model.norm, ops, split.test, cfg.train.q);
  res.persistence = evaluate_persistence(split.test, cfg.model.decoder.L, cfg.model.decoder.H, cfg.train.q);
  if (res.test.samples() == 0) throw ValidationError("test split yields no complete samples");
  return res;
}

std::vector<Variant> ablation_variants(const RunConfig& base) {
  RunConfig no_struct = base;
  no_struct.model.encoder.rho = 0.0;
  RunConfig lin = base;
  lin.model.decoder.kind = DecoderKind::linear;
  return {{"stlgt", base}, {"stlgt_rho0", no_struct}, {"stlgt_linear_decoder", lin}};
}

void write_training_csv(std::ostream& out, const TrainReport& report) {
  out << "epoch,train_pinball,val_pinball,val_mae\n";
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << e.train_pinball << ',' << e.val_pinball << ',' << e.val_mae << '\n';
  }
}

void write_summary_csv(std::ostream& out, const std::vector<ExperimentResult>& results) {
  out << "model,horizon,pinball,mae,samples\n";
  auto rows = [&](const std::string& name, const EvalResult& ev) {
    for (std::size_t h = 0; h < ev.pinball_per_h.size(); ++h) {
      out << name << ',' << h + 1 << ',' << ev.pinball_per_h[h] << ',' << ev.mae_per_h[h] << ',' << ev.samples()
          << '\n';
    }
    out << name << ",mean," << ev.pinball << ',' << ev.mae << ',' << ev.samples() << '\n';
  };
  for (const auto& r : results) rows(r.label, r.test);
  if (!results.empty()) rows("persistence", results.front().persistence);
}

}  // namespace stlgt
