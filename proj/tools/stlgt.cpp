// stlgt: simulate -> ingest -> build-graph -> train -> predict, plus bench and e2e.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stlgt/bench.hpp"
#include "stlgt/checkpoint.hpp"
#include "stlgt/errors.hpp"
#include "stlgt/experiment.hpp"

namespace fs = std::filesystem;
using namespace stlgt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitAcceptance = 2;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + p.string());
  return out;
}

std::vector<SpanRecord> load_spans(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open " + p.string());
  return parse_spans(in);
}

ServiceMetrics load_metrics(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open " + p.string());
  return load_service_metrics(in);
}

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  return parse_run_config(in);
}

// Runs one named stage, prefixing any failure with the stage name.
template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw ValidationError("stage '" + name + "': " + e.what());
  } catch (const ParseError& e) {
    throw ParseError("stage '" + name + "': " + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error("stage '" + name + "': " + e.what());
  }
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("bad integer '" + item + "' in list");
    }
  }
  return out;
}

void print_eval(std::ostream& os, const std::string& name, const EvalResult& ev) {
  os << name << ": mean pinball " << ev.pinball << " ms, MAE " << ev.mae << " ms over " << ev.samples()
     << " samples\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tail-latency forecasting over API span graphs"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate synthetic spans and service metrics");
  std::string sim_topology, sim_bursts = "random", sim_out;
  double sim_r0 = 1.5, sim_amp = 0.75, sim_period = 48.0, sim_sigma = 0.25, sim_fail = 0.01, sim_ref = 1.5;
  std::int64_t sim_windows = 2000, sim_delta = 30;
  std::uint64_t sim_seed = 1;
  sim->add_option("--topology", sim_topology, "Topology JSON {api, stages:[{parent, service, base_latency_ms, "
                                               "load_sensitivity}]}; built-in six-stage tree when omitted");
  sim->add_option("--r0", sim_r0, "Baseline request rate (req/s)")->capture_default_str();
  sim->add_option("--amp", sim_amp, "Cosine amplitude (req/s)")->capture_default_str();
  sim->add_option("--period", sim_period, "Cosine period in windows")->capture_default_str();
  sim->add_option("--bursts", sim_bursts, "start:duration:extra,... | random | none")->capture_default_str();
  sim->add_option("--windows", sim_windows, "Number of windows")->capture_default_str();
  sim->add_option("--delta-s", sim_delta, "Window length in seconds")->capture_default_str();
  sim->add_option("--seed", sim_seed, "Random seed")->capture_default_str();
  sim->add_option("--latency-sigma", sim_sigma, "Lognormal sigma of stage self-time (0 = no noise)")
      ->capture_default_str();
  sim->add_option("--failure-rate", sim_fail, "Fraction of failed traces")->capture_default_str();
  sim->add_option("--reference-rate", sim_ref, "Rate (req/s) at which stages run at (1 + sensitivity) x base")
      ->capture_default_str();
  sim->add_option("--out", sim_out, "Output directory (spans.jsonl, metrics.csv, topology.json)")->required();

  // ingest
  auto* ing = app.add_subcommand("ingest", "Validate spans and metrics, report windows and the call graph");
  std::string ing_spans, ing_metrics, ing_out;
  std::int64_t ing_delta = 30;
  ing->add_option("--spans", ing_spans, "Span JSONL file")->required();
  ing->add_option("--metrics", ing_metrics, "Service metrics CSV");
  ing->add_option("--delta-s", ing_delta, "Window length in seconds")->capture_default_str();
  ing->add_option("--out", ing_out, "Optional directory for mcg.json");

  // build-graph
  auto* bg = app.add_subcommand("build-graph", "Build the API span graph and per-window features");
  std::string bg_spans, bg_metrics, bg_api, bg_out;
  std::int64_t bg_delta = 30;
  int bg_cap = kDefaultTraceCap;
  std::uint64_t bg_seed = 1;
  double bg_frac = 0.7;
  bg->add_option("--spans", bg_spans, "Span JSONL file")->required();
  bg->add_option("--metrics", bg_metrics, "Service metrics CSV")->required();
  bg->add_option("--api", bg_api, "API name; required when the spans hold several");
  bg->add_option("--delta-s", bg_delta, "Window length in seconds")->capture_default_str();
  bg->add_option("--cap", bg_cap, "Max traces per window")->capture_default_str();
  bg->add_option("--seed", bg_seed, "Sub-sampling seed")->capture_default_str();
  bg->add_option("--graph-frac", bg_frac, "Fraction of leading windows the graph is built from")
      ->capture_default_str();
  bg->add_option("--out", bg_out, "Output directory (graph.json, features.json)")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train on a features directory and write a checkpoint");
  std::string tr_features, tr_graph, tr_config, tr_out, tr_report;
  tr->add_option("--features", tr_features, "Directory holding features.json")->required();
  tr->add_option("--graph", tr_graph, "Graph JSON (default <features>/graph.json)");
  tr->add_option("--config", tr_config, "key = value config file");
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--report", tr_report, "Training report CSV (default <out>.train.csv)");

  // predict
  auto* pr = app.add_subcommand("predict", "Forecast the next H p95 latencies from the L windows ending at --t");
  std::string pr_ckpt, pr_features;
  std::int64_t pr_t = 0;
  pr->add_option("--ckpt", pr_ckpt, "Checkpoint path")->required();
  pr->add_option("--features", pr_features, "Directory holding features.json")->required();
  pr->add_option("--t", pr_t, "Origin window index")->required();

  // bench
  auto* be = app.add_subcommand("bench", "Batch-1 forward latency over graph sizes");
  std::string be_variant = "both", be_n = "32,64,128,256,512,1024", be_out;
  BenchConfig bcfg;
  be->add_option("--variant", be_variant, "linear | dense | both")->capture_default_str();
  be->add_option("--n", be_n, "Comma-separated graph sizes")->capture_default_str();
  be->add_option("--d", bcfg.d, "Hidden width")->capture_default_str();
  be->add_option("--repeats", bcfg.repeats, "Timed runs per point")->capture_default_str();
  be->add_option("--warmup", bcfg.warmup, "Untimed warm-up runs per point")->capture_default_str();
  be->add_option("--seed", bcfg.seed, "Graph and weight seed")->capture_default_str();
  be->add_option("--out", be_out, "CSV report path");

  // e2e
  auto* e2e = app.add_subcommand("e2e", "Simulate, build features, train and evaluate against persistence");
  std::uint64_t e2e_seed = 1;
  std::string e2e_out, e2e_config, e2e_decoder, e2e_mixing;
  double e2e_rho = -1.0;
  bool e2e_ablations = false, e2e_keep = false;
  e2e->add_option("--seed", e2e_seed, "Seed for simulation, sampling and initialisation")->capture_default_str();
  e2e->add_option("--out", e2e_out, "Output directory")->required();
  e2e->add_option("--config", e2e_config, "key = value config file");
  e2e->add_option("--decoder", e2e_decoder, "timesnet | linear");
  e2e->add_option("--mixing", e2e_mixing, "linear | dense");
  e2e->add_option("--rho", e2e_rho, "Structure pre-mixing strength in [0, 1]");
  e2e->add_flag("--ablations", e2e_ablations, "Also train the rho=0 and linear-decoder variants");
  e2e->add_flag("--keep-data", e2e_keep, "Write the simulated spans and metrics too");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) {
      SyntheticTopology topo = sim_topology.empty() ? default_topology() : topology_from_json(read_file(sim_topology));
      WorkloadSchedule sched;
      sched.r0 = sim_r0;
      sched.amplitude = sim_amp;
      sched.period = sim_period;
      if (sim_bursts == "random") {
        sched.bursts = random_bursts(sim_windows, sim_r0, sim_seed);
      } else if (sim_bursts != "none") {
        sched.bursts = parse_bursts(sim_bursts);
      }
      SimConfig sc;
      sc.n_windows = sim_windows;
      sc.delta_s = sim_delta;
      sc.seed = sim_seed;
      sc.latency_sigma = sim_sigma;
      sc.failure_rate = sim_fail;
      sc.reference_rate = sim_ref;
      const SimOutput out = generate(topo, sched, sc);
      const fs::path dir(sim_out);
      auto spans = open_out(dir / "spans.jsonl");
      write_spans(spans, out.spans);
      auto metrics = open_out(dir / "metrics.csv");
      write_metrics(metrics, out.metrics);
      open_out(dir / "topology.json") << topology_to_json(topo) << '\n';
      open_out(dir / "bursts.txt") << format_bursts(sched.bursts) << '\n';
      std::cout << "wrote " << out.spans.size() << " spans and " << out.metrics.size() << " metric rows to " << sim_out
                << '\n';
    } else if (ing->parsed()) {
      const auto records = load_spans(ing_spans);
      const auto grouped = group_traces(records, ing_delta);
      const Mcg mcg = derive_mcg(records);
      std::map<std::string, std::pair<std::size_t, std::size_t>> per_api;  // windows, traces
      for (const auto& [key, w] : grouped) {
        per_api[key.first].first += 1;
        per_api[key.first].second += w.traces.size();
      }
      std::cout << records.size() << " spans, " << mcg.services.size() << " services, " << mcg.edges.size()
                << " call edges\n";
      for (const auto& [api, c] : per_api) std::cout << "api " << api << ": " << c.second << " traces in " << c.first << " windows\n";
      if (!ing_metrics.empty()) std::cout << load_metrics(ing_metrics).row_count() << " metric rows\n";
      if (!ing_out.empty()) {
        nlohmann::ordered_json j;
        j["services"] = mcg.services;
        j["edges"] = nlohmann::ordered_json::array();
        for (const auto& [a, b] : mcg.edges) j["edges"].push_back({a, b});
        open_out(fs::path(ing_out) / "mcg.json") << j.dump(2) << '\n';
      }
    } else if (bg->parsed()) {
      const auto records = load_spans(bg_spans);
      if (bg_api.empty()) {
        std::set<std::string> apis;
        for (const auto& r : records) apis.insert(r.api);
        if (apis.size() != 1) throw ValidationError("spans hold " + std::to_string(apis.size()) + " apis; pass --api");
        bg_api = *apis.begin();
      }
      const FeatureSet fset = build_features(records, load_metrics(bg_metrics), bg_api, bg_delta, bg_cap, bg_seed, bg_frac);
      const fs::path dir(bg_out);
      open_out(dir / "graph.json") << graph_to_json(fset.graph) << '\n';
      open_out(dir / "features.json") << features_to_json(fset) << '\n';
      std::cout << "api " << fset.api << ": " << fset.graph.size() << " stage nodes, " << fset.graph.forward_edges.size()
                << " edges, " << fset.windows.size() << " windows\n";
    } else if (tr->parsed()) {
      FeatureSet fset = features_from_json(read_file(fs::path(tr_features) / "features.json"));
      fset.graph = graph_from_json(read_file(tr_graph.empty() ? fs::path(tr_features) / "graph.json" : fs::path(tr_graph)));
      RunConfig cfg = load_config(tr_config);
      cfg.delta_s = fset.delta_s;
      const ExperimentResult res = run_experiment(fset, cfg);
      save_checkpoint(tr_out, make_checkpoint(res.model));
      auto report = open_out(tr_report.empty() ? tr_out + ".train.csv" : tr_report);
      write_training_csv(report, res.report);
      std::cout << "best epoch " << res.report.best_epoch << " of " << res.report.epochs.size() << ", val MAE "
                << res.report.best_val_mae << " ms\n";
      print_eval(std::cout, "test", res.test);
      print_eval(std::cout, "persistence", res.persistence);
    } else if (pr->parsed()) {
      const TrainedModel tm = restore_model(load_checkpoint(pr_ckpt));
      const FeatureSet fset = features_from_json(read_file(fs::path(pr_features) / "features.json"));
      const int L = tm.config.model.decoder.L;
      std::vector<WindowFeatures> hist;
      for (const auto& w : fset.windows) {
        if (w.t > pr_t - L && w.t <= pr_t) hist.push_back(w);
      }
      if (static_cast<int>(hist.size()) != L) {
        throw ValidationError("windows " + std::to_string(pr_t - L + 1) + ".." + std::to_string(pr_t) +
                              " are not all present in the features");
      }
      if (fset.api != tm.api) throw ValidationError("features are for api '" + fset.api + "', model for '" + tm.api + "'");
      const ForecastSeries f =
          predict(tm.model, tm.norm, GraphOperators::from_graph(tm.graph), hist, fs::path(pr_ckpt).filename().string());
      nlohmann::ordered_json j;
      j["origin"] = f.origin;
      j["model_version"] = f.model_version;
      j["y_ms"] = f.y_ms;
      std::cout << j.dump() << '\n';
    } else if (be->parsed()) {
      bcfg.ns = parse_int_list(be_n);
      if (be_variant == "both") {
        bcfg.variants = {Mixing::linear, Mixing::dense};
      } else {
        bcfg.variants = {parse_mixing(be_variant)};
      }
      const BenchReport rep = bench_forward(bcfg, &std::cerr);
      if (!be_out.empty()) {
        auto out = open_out(be_out);
        write_bench_csv(out, rep);
      } else {
        write_bench_csv(std::cout, rep);
      }
      for (const auto& s : rep.summaries) {
        std::cout << to_string(s.variant) << ": slope ";
        if (s.slope) std::cout << *s.slope; else std::cout << "n/a";
        std::cout << ", growth ";
        if (s.growth_ratio) std::cout << *s.growth_ratio; else std::cout << "n/a";
        std::cout << '\n';
      }
    } else if (e2e->parsed()) {
      RunConfig cfg = load_config(e2e_config);
      cfg.train.seed = e2e_seed;
      if (!e2e_decoder.empty()) cfg.model.decoder.kind = parse_decoder(e2e_decoder);
      if (!e2e_mixing.empty()) cfg.model.encoder.mixing = parse_mixing(e2e_mixing);
      if (e2e->count("--rho")) cfg.model.encoder.rho = clamp_rho(e2e_rho);
      cfg.validate();
      const Workload ws = default_workload(e2e_seed);
      const fs::path dir(e2e_out);
      fs::create_directories(dir);
      const SimOutput simout = stage("simulate", [&] { return generate(ws.topology, ws.schedule, ws.sim); });
      if (e2e_keep) {
        auto spans = open_out(dir / "spans.jsonl");
        write_spans(spans, simout.spans);
        auto metrics = open_out(dir / "metrics.csv");
        write_metrics(metrics, simout.metrics);
      }
      const FeatureSet fset = stage("build-graph", [&] { return features_from_sim(simout, ws.topology.api, cfg); });
      open_out(dir / "graph.json") << graph_to_json(fset.graph) << '\n';

      std::vector<ExperimentResult> results;
      auto variants = ablation_variants(cfg);
      if (!e2e_ablations) variants.resize(1);
      for (const auto& v : variants) {
        results.push_back(stage("train " + v.label, [&] { return run_experiment(fset, v.config, v.label); }));
      }
      save_checkpoint(dir / "model.ckpt", make_checkpoint(results.front().model));
      auto report = open_out(dir / "training.csv");
      write_training_csv(report, results.front().report);
      auto summary = open_out(dir / "summary.csv");
      write_summary_csv(summary, results);
      for (const auto& r : results) {
        print_eval(std::cout, r.label, r.test);
        std::cout << "  trained " << r.report.epochs.size() << " epochs in " << r.train_seconds << " s\n";
      }
      print_eval(std::cout, "persistence", results.front().persistence);
      const bool pass = results.front().test.pinball < results.front().persistence.pinball;
      std::cout << (pass ? "PASS" : "FAIL") << ": model pinball " << results.front().test.pinball
                << (pass ? " < " : " >= ") << "persistence " << results.front().persistence.pinball << '\n';
      return pass ? kExitOk : kExitAcceptance;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
  return kExitOk;
}
