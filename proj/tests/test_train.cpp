#include <sstream>

#include "doctest.h"
#include "stlgt/errors.hpp"
#include "stlgt/train.hpp"
#include "support.hpp"

using namespace stlgt;
using stlgt::test::random_matrix;

namespace {

struct Fixture {
  RunConfig cfg = stlgt::test::tiny_run_config();
  SpanGraph graph = stlgt::test::chain_graph(3);
  GraphOperators ops = GraphOperators::from_graph(graph);
  std::vector<WindowFeatures> windows;
  Split split;
  Normalizer norm;

  explicit Fixture(int n = 80, std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    windows = stlgt::test::synthetic_windows(n, graph.size(), rng);
    split = chronological_split(windows, 0.7, 0.15);
    norm = Normalizer::fit(split.train);
  }
};

bool same_params(const ParameterStore& a, const ParameterStore& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, p] : a.all()) {
    if (!b.contains(name) || b.at(name).value != p.value) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("pinball values") {
  CHECK(pinball(3.0, 3.0, 0.95) == 0.0);
  CHECK(pinball(2.0, 0.0, 0.95) == doctest::Approx(1.9));
  CHECK(pinball(-2.0, 0.0, 0.95) == doctest::Approx(0.1));
  CHECK(pinball(1.0, 4.0, 0.5) == 1.5);
  CHECK(pinball(4.0, 1.0, 0.5) == 1.5);
}

TEST_CASE("pinball asymmetry ratio is q / (1 - q)") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1e-3, 100.0);
  for (double q : {0.95, 0.9, 0.5, 0.25}) {
    for (int i = 0; i < 200; ++i) {
      const double delta = u(rng);
      CHECK(pinball(delta, 0.0, q) / pinball(-delta, 0.0, q) == doctest::Approx(q / (1.0 - q)).epsilon(1e-12));
    }
  }
  CHECK(pinball(2.0, 0.0, 0.95) / pinball(-2.0, 0.0, 0.95) == doctest::Approx(19.0).epsilon(1e-14));
}

TEST_CASE("batch_loss") {
  CHECK(batch_loss(Matrix::Ones(3, 2), Matrix::Ones(3, 2), 0.95) == 0.0);
  Matrix p(1, 1), t(1, 1);
  p << 0.0;
  t << 2.0;
  CHECK(batch_loss(p, t, 0.95) == doctest::Approx(1.9));
  Matrix p2(1, 2), t2(1, 2);
  p2 << 0.0, 0.0;
  t2 << 2.0, -2.0;
  CHECK(batch_loss(p2, t2, 0.95) == doctest::Approx(1.0));
  CHECK_THROWS_AS(batch_loss(Matrix::Ones(2, 2), Matrix::Ones(2, 3), 0.95), ShapeError);
  CHECK_THROWS_AS(batch_loss(Matrix(0, 0), Matrix(0, 0), 0.95), ShapeError);

  // the differentiable loss agrees with the scalar one
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(5, 3, rng), b = random_matrix(5, 3, rng);
  Tape tape(false);
  CHECK(pinball_loss(tape.constant(a), b, 0.9).scalar() == doctest::Approx(batch_loss(a, b, 0.9)).epsilon(1e-14));
}

TEST_CASE("pinball loss gradient") {
  std::mt19937_64 rng(3);
  ParameterStore ps;
  ps.add("p", random_matrix(4, 3, rng));
  const Matrix target = random_matrix(4, 3, rng);
  const auto errs = stlgt::test::gradcheck(ps, [&](Tape& t) { return pinball_loss(t.param(ps.at("p")), target, 0.95); });
  CHECK(stlgt::test::max_error(errs) < 1e-6);
}

TEST_CASE("whole-model gradients through encoder, decoder and pinball loss") {
  for (Mixing mixing : {Mixing::linear, Mixing::dense}) {
    for (DecoderKind kind : {DecoderKind::timesnet, DecoderKind::linear}) {
      CAPTURE(to_string(mixing));
      CAPTURE(to_string(kind));
      std::mt19937_64 rng(8);
      ModelConfig mc;
      mc.encoder.d = mc.decoder.d = 3;
      mc.encoder.mixing = mixing;
      mc.decoder.kind = kind;
      mc.decoder.L = 4;
      mc.decoder.H = 2;
      mc.decoder.B = 1;
      mc.decoder.K = 1;
      Model model(mc, 8);
      stlgt::test::jitter_params(model.params(), rng);
      const auto ops = GraphOperators::from_graph(stlgt::test::chain_graph(4));
      const auto windows = stlgt::test::synthetic_windows(4, 4, rng);
      std::vector<const WindowFeatures*> hist;
      for (const auto& w : windows) hist.push_back(&w);
      const Matrix target = random_matrix(2, 1, rng);
      auto loss = [&](Tape& t) { return pinball_loss(model.forward(t, ops, hist), target, 0.95); };
      Tape probe(false);
      const double floor = stlgt::test::fd_resolution_floor(loss(probe).scalar());
      const auto errs = stlgt::test::gradcheck(model.params(), loss, 1e-5, floor);
      CHECK(errs.size() == model.params().size());
      CHECK(stlgt::test::max_error(errs) < 1e-4);
    }
  }
}

TEST_CASE("make_samples") {
  std::mt19937_64 rng(4);
  CHECK(make_samples(stlgt::test::synthetic_windows(18, 1, rng), 12, 6).size() == 1);
  CHECK(make_samples(stlgt::test::synthetic_windows(19, 1, rng), 12, 6).size() == 2);
  CHECK(make_samples(stlgt::test::synthetic_windows(17, 1, rng), 12, 6).empty());

  auto w = stlgt::test::synthetic_windows(40, 1, rng);
  w.erase(w.begin() + 10);  // t = 10 missing
  const auto samples = make_samples(w, 4, 2);
  CHECK(samples.size() == (10 - 6 + 1) + (29 - 6 + 1));
  for (const auto& s : samples) {
    std::vector<std::int64_t> ts;
    for (auto i : s.history) ts.push_back(w[i].t);
    for (auto i : s.target) ts.push_back(w[i].t);
    for (std::size_t k = 1; k < ts.size(); ++k) CHECK(ts[k] == ts[k - 1] + 1);
    CHECK(s.origin == w[s.history.back()].t);
  }

  std::swap(w[3], w[4]);
  CHECK_THROWS_AS(make_samples(w, 4, 2), ValidationError);
}

TEST_CASE("chronological split has no leakage") {
  std::mt19937_64 rng(5);
  for (int n : {20, 101, 1000}) {
    const auto w = stlgt::test::synthetic_windows(n, 1, rng);
    const Split s = chronological_split(w, 0.7, 0.15);
    CHECK(s.train.size() == static_cast<std::size_t>(n * 7 / 10));
    CHECK(s.val.size() == static_cast<std::size_t>(std::floor(n * 0.15)));
    CHECK(s.train.size() + s.val.size() + s.test.size() == static_cast<std::size_t>(n));
    CHECK(s.train.back().t < s.val.front().t);
    CHECK(s.val.back().t < s.test.front().t);
  }
  CHECK_THROWS_AS(chronological_split({}, 0.9, 0.2), ValidationError);
}

TEST_CASE("normalizer") {
  Fixture f;
  for (const auto& w : f.windows) {
    const WindowFeatures back = f.norm.invert(f.norm.apply(w));
    CHECK((back.X - w.X).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((back.c - w.c).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(back.y - w.y) < 1e-9);
  }
  // statistics come from the training split only
  double mean = 0.0;
  for (const auto& w : f.split.train) mean += w.y;
  mean /= static_cast<double>(f.split.train.size());
  CHECK(f.norm.y_mean == doctest::Approx(mean).epsilon(1e-12));

  // a constant column keeps a floored std and maps to zero
  auto w = f.split.train;
  for (auto& x : w) x.X.col(0).setConstant(4.0);
  const Normalizer n2 = Normalizer::fit(w);
  CHECK(n2.x_std(0) == Normalizer::kStdFloor);
  CHECK(n2.apply(w[0]).X.col(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(Normalizer::fit({}), ValidationError);
}

TEST_CASE("AdamW") {
  std::mt19937_64 rng(6);
  ParameterStore ps;
  ps.add("a", random_matrix(3, 2, rng));
  ps.add("b", random_matrix(1, 2, rng));
  for (auto& [_, p] : ps.all()) p.grad = random_matrix(p.value.rows(), p.value.cols(), rng);
  const ParameterStore before = ps;

  SUBCASE("lr = 0 leaves weights bit-identical") {
    AdamW opt(0.0, 0.0);
    for (int i = 0; i < 5; ++i) opt.step(ps);
    CHECK(same_params(ps, before));
    AdamW decayed(0.0, 0.5);
    decayed.step(ps);
    CHECK(same_params(ps, before));
  }
  SUBCASE("first step moves each weight by lr against its gradient sign") {
    AdamW opt(0.01, 0.0);
    opt.step(ps);
    for (const auto& [name, p] : ps.all()) {
      const Matrix& g = before.at(name).grad;
      const Matrix want = before.at(name).value.array() - 0.01 * g.array() / (g.array().abs() + 1e-8);
      CHECK((p.value - want).cwiseAbs().maxCoeff() < 1e-15);
    }
  }
  SUBCASE("weight decay is applied to the weights directly") {
    for (auto& [_, p] : ps.all()) p.grad.setZero();
    AdamW opt(0.1, 0.5);
    opt.step(ps);
    for (const auto& [name, p] : ps.all()) {
      CHECK((p.value - before.at(name).value * (1.0 - 0.1 * 0.5)).cwiseAbs().maxCoeff() < 1e-15);
    }
  }
  SUBCASE("frozen parameters never move") {
    AdamW opt(0.1, 0.5);
    opt.step(ps, {"a"});
    CHECK(ps.at("a").value == before.at("a").value);
    CHECK(ps.at("b").value != before.at("b").value);
  }
}

TEST_CASE("gradient clipping") {
  ParameterStore ps;
  ps.add("a", Matrix::Zero(1, 2)).grad = (Matrix(1, 2) << 3.0, 0.0).finished();
  ps.add("b", Matrix::Zero(1, 1)).grad = (Matrix(1, 1) << 4.0).finished();
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(ps.grad_norm() == doctest::Approx(1.0));
  ps.at("a").grad << 3.0, 0.0;
  ps.at("b").grad << 4.0;
  CHECK(clip_grad_norm(ps, 1.0, {"b"}) == doctest::Approx(3.0));
  CHECK(ps.at("b").grad(0, 0) == 4.0);
  CHECK(ps.at("a").grad(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("training is deterministic for a fixed seed") {
  Fixture f;
  Model a(f.cfg.model, 7), b(f.cfg.model, 7);
  const auto ra = train(a, f.norm, f.ops, f.split.train, f.split.val, f.cfg.train);
  const auto rb = train(b, f.norm, f.ops, f.split.train, f.split.val, f.cfg.train);
  REQUIRE(ra.epochs.size() == rb.epochs.size());
  for (std::size_t i = 0; i < ra.epochs.size(); ++i) {
    CHECK(ra.epochs[i].train_pinball == rb.epochs[i].train_pinball);
    CHECK(ra.epochs[i].val_mae == rb.epochs[i].val_mae);
  }
  CHECK(same_params(a.params(), b.params()));
}

TEST_CASE("training with lr = 0 and no decay leaves the model untouched") {
  Fixture f;
  f.cfg.train.lr = 0.0;
  f.cfg.train.weight_decay = 0.0;
  Model m(f.cfg.model, 1);
  const ParameterStore before = m.params();
  train(m, f.norm, f.ops, f.split.train, f.split.val, f.cfg.train);
  CHECK(same_params(m.params(), before));
}

TEST_CASE("training reduces the loss and restores the best epoch") {
  Fixture f(200);
  f.cfg.train.max_epochs = 8;
  f.cfg.train.lr = 3e-3;
  Model m(f.cfg.model, 2);
  const auto r = train(m, f.norm, f.ops, f.split.train, f.split.val, f.cfg.train);
  REQUIRE(r.epochs.size() >= 2);
  CHECK(r.epochs.back().train_pinball < r.epochs.front().train_pinball);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : r.epochs) best = std::min(best, e.val_mae);
  CHECK(r.best_val_mae == best);
  // the returned parameters reproduce the best validation predictions
  const EvalResult ev = evaluate(m, f.norm, f.ops, f.split.val, f.cfg.train.q);
  CHECK(ev.predictions == r.best_val.predictions);
  CHECK(ev.mae == r.best_val_mae);
}

TEST_CASE("early stopping honours patience") {
  Fixture f;
  f.cfg.train.lr = 0.0;  // validation MAE never improves after epoch 1
  f.cfg.train.weight_decay = 0.0;
  f.cfg.train.max_epochs = 20;
  f.cfg.train.patience = 3;
  Model m(f.cfg.model, 1);
  const auto r = train(m, f.norm, f.ops, f.split.train, f.split.val, f.cfg.train);
  CHECK(r.early_stopped);
  CHECK(r.best_epoch == 1);
  CHECK(r.epochs.size() == 4);
}

TEST_CASE("training errors") {
  Fixture f;
  Model m(f.cfg.model, 1);
  CHECK_THROWS_AS(train(m, f.norm, f.ops, {}, f.split.val, f.cfg.train), ValidationError);
  auto bad = f.split.train;
  bad[10].y = std::numeric_limits<double>::quiet_NaN();
  try {
    train(m, f.norm, f.ops, bad, f.split.val, f.cfg.train);
    FAIL("expected NumericFault");
  } catch (const NumericFault& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
  const GraphOperators wrong = GraphOperators::from_edges(5, {});
  CHECK_THROWS_AS(train(m, f.norm, wrong, f.split.train, f.split.val, f.cfg.train), ValidationError);
}

TEST_CASE("bias-only model settles on the empirical quantile") {
  const auto fit = stlgt::test::bias_only_quantile_fit(10000, 0.95, 1);
  INFO("fitted " << fit.fitted << " empirical " << fit.empirical << " spread " << fit.spread);
  CHECK(std::abs(fit.fitted - fit.empirical) <= 0.02 * fit.spread);
}

TEST_CASE("persistence baseline") {
  Fixture f;
  const auto ev = evaluate_persistence(f.windows, 4, 2, 0.95);
  CHECK(ev.samples() == f.windows.size() - 5);
  for (std::size_t s = 0; s < ev.samples(); ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    CHECK(ev.predictions(r, 0) == f.windows[s + 3].y);
    CHECK(ev.predictions(r, 1) == f.windows[s + 3].y);
    CHECK(ev.targets(r, 1) == f.windows[s + 5].y);
  }
  CHECK(ev.pinball == doctest::Approx(batch_loss(ev.predictions, ev.targets, 0.95)));
}

TEST_CASE("predict") {
  Fixture f(120);
  f.cfg.train.max_epochs = 2;
  Model m(f.cfg.model, 4);
  const auto r = train(m, f.norm, f.ops, f.split.train, f.split.val, f.cfg.train);
  const int L = f.cfg.model.decoder.L;

  SUBCASE("length H and origin") {
    const auto fc = predict(m, f.norm, f.ops, f.windows, "v1");
    CHECK(fc.y_ms.size() == static_cast<std::size_t>(f.cfg.model.decoder.H));
    CHECK(fc.origin == f.windows.back().t);
    CHECK(fc.model_version == "v1");
  }
  SUBCASE("reproduces the validation predictions") {
    for (std::size_t s = 0; s < r.best_val.samples(); ++s) {
      std::vector<WindowFeatures> hist(f.split.val.begin() + static_cast<std::ptrdiff_t>(s),
                                       f.split.val.begin() + static_cast<std::ptrdiff_t>(s) + L);
      const auto fc = predict(m, f.norm, f.ops, hist);
      CHECK(fc.origin == r.best_val.origins[s]);
      for (std::size_t h = 0; h < fc.y_ms.size(); ++h) {
        CHECK(fc.y_ms[h] == r.best_val.predictions(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(h)));
      }
    }
  }
  SUBCASE("label scale acts affinely") {
    Normalizer wide = f.norm;
    wide.y_std *= 2.0;
    const auto a = predict(m, f.norm, f.ops, f.windows);
    const auto b = predict(m, wide, f.ops, f.windows);
    for (std::size_t h = 0; h < a.y_ms.size(); ++h) {
      CHECK(b.y_ms[h] - f.norm.y_mean == doctest::Approx(2.0 * (a.y_ms[h] - f.norm.y_mean)).epsilon(1e-12));
    }
  }
  SUBCASE("inputs at the training means give a bias-determined constant") {
    WindowFeatures mean_window = f.windows[0];
    mean_window.X = f.norm.x_mean.replicate(f.graph.size(), 1);
    mean_window.c = f.norm.c_mean;
    std::vector<WindowFeatures> hist(static_cast<std::size_t>(L), mean_window);
    const auto a = predict(m, f.norm, f.ops, hist);
    const Model zero_weights = [&] {
      Model z = m;
      return z;
    }();
    Matrix g(L, f.cfg.model.decoder.d);
    const RowVector e = m.embed_value(f.ops, f.norm.apply(mean_window));
    for (int k = 0; k < L; ++k) g.row(k) = e;
    const Eigen::VectorXd z = zero_weights.decode_value(g);
    for (std::size_t h = 0; h < a.y_ms.size(); ++h) CHECK(a.y_ms[h] == f.norm.denorm_y(z(static_cast<Eigen::Index>(h))));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(predict(m, f.norm, f.ops, std::vector<WindowFeatures>(f.windows.begin(), f.windows.begin() + 2)),
                    ValidationError);
    const GraphOperators other = GraphOperators::from_edges(4, {});
    CHECK_THROWS_AS(predict(m, f.norm, other, f.windows), ValidationError);
  }
}

TEST_CASE("checkpoint round-trip keeps predictions bit-identical") {
  Fixture f;
  f.cfg.train.max_epochs = 1;
  TrainedModel tm;
  tm.config = f.cfg;
  tm.model = Model(f.cfg.model, 9);
  tm.norm = f.norm;
  tm.graph = f.graph;
  tm.api = "api";
  tm.node_count = f.graph.size();
  train(tm.model, tm.norm, f.ops, f.split.train, f.split.val, f.cfg.train);

  const TrainedModel back = restore_model(decode_checkpoint(encode_checkpoint(make_checkpoint(tm))));
  CHECK(back.graph == tm.graph);
  CHECK(back.api == "api");
  CHECK(back.config.to_map() == tm.config.to_map());
  CHECK(same_params(back.model.params(), tm.model.params()));
  const auto a = predict(tm.model, tm.norm, f.ops, f.windows);
  const auto b = predict(back.model, back.norm, GraphOperators::from_graph(back.graph), f.windows);
  CHECK(a.y_ms == b.y_ms);

  Checkpoint broken = make_checkpoint(tm);
  broken.meta["node_count"] = "7";
  CHECK_THROWS_AS(restore_model(broken), ValidationError);
  Checkpoint missing = make_checkpoint(tm);
  missing.tensors.erase("dec.head.b");
  CHECK_THROWS(restore_model(missing));
  Checkpoint reshaped = make_checkpoint(tm);
  reshaped.tensors["enc.in.W"] = Matrix::Zero(2, 2);
  CHECK_THROWS(restore_model(reshaped));
}

TEST_CASE("run config parsing") {
  std::istringstream in("# tiny\nd = 8\nrho=0.25  # inline\n\nmixing = dense\ndecoder = linear\nmax_epochs = 5\n");
  const RunConfig cfg = parse_run_config(in);
  CHECK(cfg.model.encoder.d == 8);
  CHECK(cfg.model.decoder.d == 8);
  CHECK(cfg.model.encoder.rho == 0.25);
  CHECK(cfg.model.encoder.mixing == Mixing::dense);
  CHECK(cfg.model.decoder.kind == DecoderKind::linear);
  CHECK(cfg.train.max_epochs == 5);
  CHECK(cfg.train.lr == 1e-3);
  CHECK(run_config_from_map(cfg.to_map()).to_map() == cfg.to_map());

  std::istringstream unknown("d = 8\nwidth = 3\n");
  try {
    parse_run_config(unknown);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  std::istringstream garbage("d = eight\n");
  CHECK_THROWS_AS(parse_run_config(garbage), ParseError);
  std::istringstream no_eq("d 8\n");
  CHECK_THROWS_AS(parse_run_config(no_eq), ParseError);
  std::istringstream fractions("train_frac = 0.8\n");
  CHECK_THROWS_AS(parse_run_config(fractions), ValidationError);
  std::istringstream bad_q("q = 1\n");
  CHECK_THROWS_AS(parse_run_config(bad_q), ValidationError);
}
