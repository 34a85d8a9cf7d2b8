#include "stlgt/model.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "stlgt/errors.hpp"

namespace stlgt {

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.encoder.d != cfg_.decoder.d) throw std::invalid_argument("encoder and decoder widths differ");
  std::mt19937_64 rng(seed);
  init_encoder_params(params_, cfg_.encoder, rng);
  init_decoder_params(params_, cfg_.decoder, rng);
}

Model::Model(const ModelConfig& cfg, ParameterStore params) : Model(cfg, 0) {
  for (auto& [name, fresh] : params_.all()) {
    if (!params.contains(name)) throw ValidationError("missing parameter '" + name + "'");
    const Matrix& v = params.at(name).value;
    if (v.rows() != fresh.value.rows() || v.cols() != fresh.value.cols()) {
      throw ValidationError("parameter '" + name + "' has shape " + shape_str(v) + ", expected " +
                            shape_str(fresh.value));
    }
    fresh.value = v;
  }
  if (params.size() != params_.size()) throw ValidationError("unexpected extra parameters");
}

Var Model::embed(Tape& tape, const GraphOperators& ops, const WindowFeatures& w) const {
  return encode_window(tape, params_, cfg_.encoder, ops, w.X, w.c);
}

Var Model::forward(Tape& tape, const GraphOperators& ops, const std::vector<const WindowFeatures*>& history) const {
  if (static_cast<int>(history.size()) != cfg_.decoder.L) {
    throw ShapeError("forward: expected " + std::to_string(cfg_.decoder.L) + " windows, got " +
                     std::to_string(history.size()));
  }
  std::vector<Var> rows;
  rows.reserve(history.size());
  for (const WindowFeatures* w : history) rows.push_back(embed(tape, ops, *w));
  return decoder_forward(tape, params_, cfg_.decoder, stack_rows(rows));
}

RowVector Model::embed_value(const GraphOperators& ops, const WindowFeatures& w) const {
  Tape tape(false);
  return embed(tape, ops, w).value();
}

Eigen::VectorXd Model::decode_value(const Matrix& g) const {
  Tape tape(false);
  return decoder_forward(tape, params_, cfg_.decoder, tape.constant(g)).value().col(0);
}

// ---- configuration ---------------------------------------------------------

namespace {

template <typename T>
T parse_as(const std::string& key, const std::string& value) {
  T out{};
  const char* b = value.data();
  const char* e = b + value.size();
  auto [ptr, ec] = std::from_chars(b, e, out);
  if (ec != std::errc() || ptr != e) throw ParseError("config key '" + key + "': bad value '" + value + "'");
  return out;
}

std::string num(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto& enc = model.encoder;
  auto& dec = model.decoder;
  if (key == "d") {
    enc.d = dec.d = parse_as<int>(key, value);
  } else if (key == "rho") {
    enc.rho = clamp_rho(parse_as<double>(key, value));
  } else if (key == "mixing") {
    enc.mixing = parse_mixing(value);
  } else if (key == "encoder_blocks") {
    enc.blocks = parse_as<int>(key, value);
  } else if (key == "L") {
    dec.L = parse_as<int>(key, value);
  } else if (key == "H") {
    dec.H = parse_as<int>(key, value);
  } else if (key == "B") {
    dec.B = parse_as<int>(key, value);
  } else if (key == "K") {
    dec.K = parse_as<int>(key, value);
  } else if (key == "decoder") {
    dec.kind = parse_decoder(value);
  } else if (key == "q") {
    train.q = parse_as<double>(key, value);
  } else if (key == "lr") {
    train.lr = parse_as<double>(key, value);
  } else if (key == "weight_decay") {
    train.weight_decay = parse_as<double>(key, value);
  } else if (key == "batch_size") {
    train.batch_size = parse_as<int>(key, value);
  } else if (key == "max_epochs") {
    train.max_epochs = parse_as<int>(key, value);
  } else if (key == "patience") {
    train.patience = parse_as<int>(key, value);
  } else if (key == "train_frac") {
    train.train_frac = parse_as<double>(key, value);
  } else if (key == "val_frac") {
    train.val_frac = parse_as<double>(key, value);
  } else if (key == "test_frac") {
    train.test_frac = parse_as<double>(key, value);
  } else if (key == "seed") {
    train.seed = parse_as<std::uint64_t>(key, value);
  } else if (key == "clip_norm") {
    train.clip_norm = parse_as<double>(key, value);
  } else if (key == "delta_s") {
    delta_s = parse_as<std::int64_t>(key, value);
  } else if (key == "cap") {
    cap = parse_as<int>(key, value);
  } else if (key == "graph_frac") {
    graph_frac = parse_as<double>(key, value);
  } else {
    throw ParseError("unknown config key '" + key + "'");
  }
}

std::map<std::string, std::string> RunConfig::to_map() const {
  const auto& enc = model.encoder;
  const auto& dec = model.decoder;
  return {
      {"d", std::to_string(enc.d)},
      {"rho", num(enc.rho)},
      {"mixing", to_string(enc.mixing)},
      {"encoder_blocks", std::to_string(enc.blocks)},
      {"L", std::to_string(dec.L)},
      {"H", std::to_string(dec.H)},
      {"B", std::to_string(dec.B)},
      {"K", std::to_string(dec.K)},
      {"decoder", to_string(dec.kind)},
      {"q", num(train.q)},
      {"lr", num(train.lr)},
      {"weight_decay", num(train.weight_decay)},
      {"batch_size", std::to_string(train.batch_size)},
      {"max_epochs", std::to_string(train.max_epochs)},
      {"patience", std::to_string(train.patience)},
      {"train_frac", num(train.train_frac)},
      {"val_frac", num(train.val_frac)},
      {"test_frac", num(train.test_frac)},
      {"seed", std::to_string(train.seed)},
      {"clip_norm", num(train.clip_norm)},
      {"delta_s", std::to_string(delta_s)},
      {"cap", std::to_string(cap)},
      {"graph_frac", num(graph_frac)},
  };
}

void RunConfig::validate() const {
  if (model.encoder.d < 1) throw ValidationError("d must be >= 1");
  if (model.encoder.blocks < 1) throw ValidationError("encoder_blocks must be >= 1");
  stlgt::validate(model.decoder);
  if (!(train.q > 0.0 && train.q < 1.0)) throw ValidationError("q must be in (0, 1)");
  if (train.batch_size < 1 || train.max_epochs < 0 || train.patience < 1) {
    throw ValidationError("batch_size and patience must be >= 1, max_epochs >= 0");
  }
  const double total = train.train_frac + train.val_frac + train.test_frac;
  if (std::abs(total - 1.0) > 1e-9 || train.train_frac <= 0 || train.val_frac < 0 || train.test_frac < 0) {
    throw ValidationError("split fractions must be non-negative and sum to 1");
  }
  if (delta_s <= 0 || cap < 1) throw ValidationError("delta_s and cap must be positive");
  if (!(graph_frac > 0.0 && graph_frac <= 1.0)) throw ValidationError("graph_frac must be in (0, 1]");
}

RunConfig run_config_from_map(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [k, v] : kv) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace stlgt
