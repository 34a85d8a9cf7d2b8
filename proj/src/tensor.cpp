#include "stlgt/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

#include "stlgt/dft.hpp"
#include "stlgt/errors.hpp"

namespace stlgt {

namespace {

thread_local OpCounter* g_counter = nullptr;

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

std::string shapes(const Matrix& a, const Matrix& b) { return shape_str(a) + " vs " + shape_str(b); }

void accumulate(Tape& t, int id, const Matrix& g) {
  if (!t.needs_grad(id)) return;
  t.grad(id) += g;
}

}  // namespace

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << '[' << m.rows() << 'x' << m.cols() << ']';
  return os.str();
}

// ---- ParameterStore --------------------------------------------------------

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  Parameter p{name, std::move(init), {}};
  p.zero_grad();
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

double ParameterStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& [_, p] : params_) sq += p.grad.squaredNorm();
  return std::sqrt(sq);
}

// ---- Var / Tape ------------------------------------------------------------

const Matrix& Var::value() const { return tape->value(id); }

double Var::scalar() const {
  const Matrix& v = value();
  require(v.size() == 1, "scalar", "expected 1x1, got " + shape_str(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  OpCounter::note_elements(value.size());
  nodes_.push_back(Node{"constant", {}, std::move(value), {}, {}, nullptr});
  needs_grad_.push_back(false);
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Parameter& p) {
  nodes_.push_back(Node{"param:" + p.name, {}, p.value, {}, {}, record_ ? const_cast<Parameter*>(&p) : nullptr});
  needs_grad_.push_back(record_);
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(std::string op, std::vector<int> inputs, Matrix value, Backward backward) {
  if (!value.allFinite()) throw NumericFault(op + ": non-finite output " + shape_str(value));
  OpCounter::note_elements(value.size());
  bool needs = false;
  if (record_) {
    for (int in : inputs) needs = needs || needs_grad_[static_cast<std::size_t>(in)];
  }
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(value), {},
                        needs ? std::move(backward) : Backward{}, nullptr});
  needs_grad_.push_back(needs);
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
  if (!record_) throw std::logic_error("backward: tape is not recording");
  const Matrix& v = value(loss.id);
  if (v.size() != 1) throw ShapeError("backward: loss must be 1x1, got " + shape_str(v));
  grad(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      if (n.param->grad.size() == 0) {
        n.param->grad = n.grad;
      } else {
        n.param->grad += n.grad;
      }
    } else if (n.backward) {
      // The rule reads this node's grad through the tape; keep it alive.
      n.backward(*this);
    }
  }
  clear();
}

void Tape::clear() {
  nodes_.clear();
  needs_grad_.clear();
}

// ---- OpCounter -------------------------------------------------------------

OpCounter::OpCounter() : prev_(g_counter) { g_counter = this; }
OpCounter::~OpCounter() { g_counter = prev_; }

void OpCounter::add_macs(std::int64_t n) {
  if (g_counter) g_counter->macs_ += n;
}

void OpCounter::note_elements(std::int64_t n) {
  if (g_counter && n > g_counter->peak_elements_) g_counter->peak_elements_ = n;
}

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols() == B.rows(), "matmul", shapes(A, B));
  OpCounter::add_macs(A.rows() * A.cols() * B.cols());
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Matrix out = A * B;
  int self = static_cast<int>(t.size());
  return t.push("matmul", {ia, ib}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.needs_grad(ib)) tp.grad(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

Var spmm(const Sparse& s, Var x) {
  const Matrix& X = x.value();
  require(s.cols() == X.rows(), "spmm",
          "[" + std::to_string(s.rows()) + "x" + std::to_string(s.cols()) + "] vs " + shape_str(X));
  OpCounter::add_macs(s.nonZeros() * X.cols());
  Tape& t = *x.tape;
  const int ix = x.id;
  Matrix out = s * X;
  int self = static_cast<int>(t.size());
  // The operator is time-invariant and outlives the tape.
  const Sparse* sp = &s;
  return t.push("spmm", {ix}, std::move(out), [=](Tape& tp) {
    tp.grad(ix) += sp->transpose() * tp.grad(self);
  });
}

Var add(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.rows() == B.rows() && A.cols() == B.cols(), "add", shapes(A, B));
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  int self = static_cast<int>(t.size());
  return t.push("add", {ia, ib}, A + B, [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, ia, g);
    accumulate(tp, ib, g);
  });
}

Var sub(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.rows() == B.rows() && A.cols() == B.cols(), "sub", shapes(A, B));
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  int self = static_cast<int>(t.size());
  return t.push("sub", {ia, ib}, A - B, [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, ia, g);
    if (tp.needs_grad(ib)) tp.grad(ib) -= g;
  });
}

Var add_row(Var a, Var row) {
  const Matrix& A = a.value();
  const Matrix& R = row.value();
  require(R.rows() == 1 && R.cols() == A.cols(), "add_row", shapes(A, R));
  Tape& t = *a.tape;
  const int ia = a.id, ir = row.id;
  Matrix out = A.rowwise() + R.row(0);
  int self = static_cast<int>(t.size());
  return t.push("add_row", {ia, ir}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    accumulate(tp, ia, g);
    if (tp.needs_grad(ir)) tp.grad(ir) += g.colwise().sum();
  });
}

Var mul(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.rows() == B.rows() && A.cols() == B.cols(), "mul", shapes(A, B));
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  int self = static_cast<int>(t.size());
  return t.push("mul", {ia, ib}, A.cwiseProduct(B), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia) += g.cwiseProduct(tp.value(ib));
    if (tp.needs_grad(ib)) tp.grad(ib) += g.cwiseProduct(tp.value(ia));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id;
  int self = static_cast<int>(t.size());
  return t.push("scale", {ia}, a.value() * s, [=](Tape& tp) { tp.grad(ia) += tp.grad(self) * s; });
}

Var scale_by(Var a, Var s) {
  const Matrix& S = s.value();
  require(S.size() == 1, "scale_by", "scale must be 1x1, got " + shape_str(S));
  Tape& t = *a.tape;
  const int ia = a.id, is = s.id;
  int self = static_cast<int>(t.size());
  return t.push("scale_by", {ia, is}, a.value() * S(0, 0), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia) += g * tp.value(is)(0, 0);
    if (tp.needs_grad(is)) tp.grad(is)(0, 0) += g.cwiseProduct(tp.value(ia)).sum();
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id;
  int self = static_cast<int>(t.size());
  Matrix out = a.value().array() + s;
  return t.push("add_scalar", {ia}, std::move(out), [=](Tape& tp) { tp.grad(ia) += tp.grad(self); });
}

Var div_rows(Var a, Var d) {
  const Matrix& A = a.value();
  const Matrix& D = d.value();
  require(D.cols() == 1 && D.rows() == A.rows(), "div_rows", shapes(A, D));
  Tape& t = *a.tape;
  const int ia = a.id, id = d.id;
  Matrix out = D.col(0).cwiseInverse().asDiagonal() * A;
  int self = static_cast<int>(t.size());
  return t.push("div_rows", {ia, id}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    const Matrix& Dv = tp.value(id);
    if (tp.needs_grad(ia)) tp.grad(ia) += Dv.col(0).cwiseInverse().asDiagonal() * g;
    if (tp.needs_grad(id)) {
      const Matrix& Av = tp.value(ia);
      Matrix& gd = tp.grad(id);
      for (Eigen::Index i = 0; i < Av.rows(); ++i) {
        gd(i, 0) -= g.row(i).dot(Av.row(i)) / (Dv(i, 0) * Dv(i, 0));
      }
    }
  });
}

Var concat_cols(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.rows() == B.rows(), "concat_cols", shapes(A, B));
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  const Eigen::Index ca = A.cols(), cb = B.cols();
  Matrix out(A.rows(), ca + cb);
  out << A, B;
  int self = static_cast<int>(t.size());
  return t.push("concat_cols", {ia, ib}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia) += g.leftCols(ca);
    if (tp.needs_grad(ib)) tp.grad(ib) += g.rightCols(cb);
  });
}

Var concat_rows(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols() == B.cols(), "concat_rows", shapes(A, B));
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  const Eigen::Index ra = A.rows(), rb = B.rows();
  Matrix out(ra + rb, A.cols());
  out << A, B;
  int self = static_cast<int>(t.size());
  return t.push("concat_rows", {ia, ib}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia) += g.topRows(ra);
    if (tp.needs_grad(ib)) tp.grad(ib) += g.bottomRows(rb);
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  Matrix out = a.value().transpose();
  int self = static_cast<int>(t.size());
  return t.push("transpose", {ia}, std::move(out),
                [=](Tape& tp) { tp.grad(ia) += tp.grad(self).transpose(); });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  Matrix out = a.value().cwiseMax(0.0);
  int self = static_cast<int>(t.size());
  return t.push("relu", {ia}, std::move(out), [=](Tape& tp) {
    // Gradient is 0 at exactly 0.
    tp.grad(ia).array() += tp.grad(self).array() * (tp.value(ia).array() > 0.0).cast<double>();
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  Matrix out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  int self = static_cast<int>(t.size());
  return t.push("gelu", {ia}, std::move(out), [=](Tape& tp) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    Matrix d = tp.value(ia).unaryExpr([](double x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    tp.grad(ia) += tp.grad(self).cwiseProduct(d);
  });
}

Var softmax_rows(Var a) {
  const Matrix& A = a.value();
  Tape& t = *a.tape;
  const int ia = a.id;
  Matrix out(A.rows(), A.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const double m = A.row(i).maxCoeff();
    out.row(i) = (A.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  int self = static_cast<int>(t.size());
  return t.push("softmax_rows", {ia}, std::move(out), [=](Tape& tp) {
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(ia);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double dot = g.row(i).dot(y.row(i));
      ga.row(i) += y.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
  });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  const Matrix& A = a.value();
  const Matrix& G = gamma.value();
  const Matrix& Bt = beta.value();
  require(G.rows() == 1 && G.cols() == A.cols() && Bt.rows() == 1 && Bt.cols() == A.cols(),
          "layer_norm_rows", shapes(A, G));
  Tape& t = *a.tape;
  const int ia = a.id, ig = gamma.id, ib = beta.id;
  const Eigen::Index n = A.cols();
  Matrix normed(A.rows(), n);
  Eigen::VectorXd inv_std(A.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const double mu = A.row(i).mean();
    const RowVector centered = A.row(i).array() - mu;
    const double var = centered.squaredNorm() / static_cast<double>(n);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    normed.row(i) = centered * inv_std(i);
  }
  Matrix out = (normed.array().rowwise() * G.row(0).array()).rowwise() + Bt.row(0).array();
  int self = static_cast<int>(t.size());
  return t.push("layer_norm_rows", {ia, ig, ib}, std::move(out),
                [=, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& tp) {
                  const Matrix& g = tp.grad(self);
                  if (tp.needs_grad(ig)) tp.grad(ig) += g.cwiseProduct(normed).colwise().sum();
                  if (tp.needs_grad(ib)) tp.grad(ib) += g.colwise().sum();
                  if (!tp.needs_grad(ia)) return;
                  const RowVector gam = tp.value(ig).row(0);
                  Matrix& ga = tp.grad(ia);
                  for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const RowVector dy = g.row(i).cwiseProduct(gam);
                    const double m1 = dy.mean();
                    const double m2 = dy.dot(normed.row(i)) / static_cast<double>(n);
                    ga.row(i) += inv_std(i) * ((dy.array() - m1) - normed.row(i).array() * m2).matrix();
                  }
                });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  OpCounter::add_macs(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  int self = static_cast<int>(t.size());
  return t.push("sum", {ia}, std::move(out), [=](Tape& tp) {
    tp.grad(ia).array() += tp.grad(self)(0, 0);
  });
}

Var mean(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  const double n = static_cast<double>(a.value().size());
  require(n > 0, "mean", "empty tensor");
  Matrix out(1, 1);
  out(0, 0) = a.value().mean();
  int self = static_cast<int>(t.size());
  return t.push("mean", {ia}, std::move(out), [=](Tape& tp) {
    tp.grad(ia).array() += tp.grad(self)(0, 0) / n;
  });
}

Var sum_rows(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  OpCounter::add_macs(a.value().size());
  Matrix out = a.value().colwise().sum();
  int self = static_cast<int>(t.size());
  return t.push("sum_rows", {ia}, std::move(out), [=](Tape& tp) {
    tp.grad(ia).rowwise() += tp.grad(self).row(0);
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& A = a.value();
  require(rows * cols == A.size(), "reshape", shape_str(A) + " to " + std::to_string(rows) + "x" +
                                                  std::to_string(cols));
  Tape& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index r0 = A.rows(), c0 = A.cols();
  Matrix out = Eigen::Map<const Matrix>(A.data(), rows, cols);
  int self = static_cast<int>(t.size());
  return t.push("reshape", {ia}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    tp.grad(ia) += Eigen::Map<const Matrix>(g.data(), r0, c0);
  });
}

Var pad_rows(Var a, Eigen::Index total_rows) {
  const Matrix& A = a.value();
  require(total_rows >= A.rows(), "pad_rows", shape_str(A) + " to " + std::to_string(total_rows) + " rows");
  Tape& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index r0 = A.rows();
  Matrix out = Matrix::Zero(total_rows, A.cols());
  out.topRows(r0) = A;
  int self = static_cast<int>(t.size());
  return t.push("pad_rows", {ia}, std::move(out),
                [=](Tape& tp) { tp.grad(ia) += tp.grad(self).topRows(r0); });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  const Matrix& A = a.value();
  require(begin >= 0 && count >= 0 && begin + count <= A.rows(), "slice_rows",
          shape_str(A) + " rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ")");
  Tape& t = *a.tape;
  const int ia = a.id;
  Matrix out = A.middleRows(begin, count);
  int self = static_cast<int>(t.size());
  return t.push("slice_rows", {ia}, std::move(out),
                [=](Tape& tp) { tp.grad(ia).middleRows(begin, count) += tp.grad(self); });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  const Matrix& A = a.value();
  require(begin >= 0 && count >= 0 && begin + count <= A.cols(), "slice_cols",
          shape_str(A) + " cols [" + std::to_string(begin) + ", +" + std::to_string(count) + ")");
  Tape& t = *a.tape;
  const int ia = a.id;
  Matrix out = A.middleCols(begin, count);
  int self = static_cast<int>(t.size());
  return t.push("slice_cols", {ia}, std::move(out),
                [=](Tape& tp) { tp.grad(ia).middleCols(begin, count) += tp.grad(self); });
}

Var gather_rows(Var a, const std::vector<Eigen::Index>& rows) {
  const Matrix& A = a.value();
  Tape& t = *a.tape;
  const int ia = a.id;
  Matrix out(static_cast<Eigen::Index>(rows.size()), A.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] >= 0 && rows[k] < A.rows(), "gather_rows", "row index out of range");
    out.row(static_cast<Eigen::Index>(k)) = A.row(rows[k]);
  }
  int self = static_cast<int>(t.size());
  return t.push("gather_rows", {ia}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(ia);
    for (std::size_t k = 0; k < rows.size(); ++k) ga.row(rows[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

Var frobenius_norm(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  OpCounter::add_macs(a.value().size());
  const double n = a.value().norm();
  Matrix out(1, 1);
  out(0, 0) = n;
  int self = static_cast<int>(t.size());
  return t.push("frobenius_norm", {ia}, std::move(out), [=](Tape& tp) {
    if (n > 0.0) tp.grad(ia) += tp.value(ia) * (tp.grad(self)(0, 0) / n);
  });
}

Var frobenius_normalize(Var a, double eps) {
  Tape& t = *a.tape;
  const int ia = a.id;
  OpCounter::add_macs(a.value().size());
  const double n = a.value().norm();
  const double denom = n + eps;
  Matrix out = a.value() / denom;
  int self = static_cast<int>(t.size());
  return t.push("frobenius_normalize", {ia}, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(ia);
    ga += g / denom;
    if (n > 0.0) {
      const Matrix& A = tp.value(ia);
      ga -= A * (g.cwiseProduct(A).sum() / (n * denom * denom));
    }
  });
}

Var conv3x3(Var x, Eigen::Index grid_rows, Eigen::Index grid_cols, Var w, Var b) {
  const Matrix& X = x.value();
  const Matrix& W = w.value();
  const Matrix& Bv = b.value();
  const Eigen::Index cin = X.cols();
  require(X.rows() == grid_rows * grid_cols, "conv3x3",
          shape_str(X) + " is not a " + std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
  require(W.rows() == 9 * cin, "conv3x3", "weight " + shape_str(W) + " for " + std::to_string(cin) + " channels");
  require(Bv.rows() == 1 && Bv.cols() == W.cols(), "conv3x3", "bias " + shape_str(Bv) + " vs weight " + shape_str(W));
  const Eigen::Index cells = grid_rows * grid_cols;
  Matrix patches = Matrix::Zero(cells, 9 * cin);
  for (Eigen::Index r = 0; r < grid_rows; ++r) {
    for (Eigen::Index c = 0; c < grid_cols; ++c) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const Eigen::Index rr = r + dy, cc = c + dx;
          if (rr < 0 || rr >= grid_rows || cc < 0 || cc >= grid_cols) continue;
          const Eigen::Index tap = (dy + 1) * 3 + (dx + 1);
          patches.block(r * grid_cols + c, tap * cin, 1, cin) = X.row(rr * grid_cols + cc);
        }
      }
    }
  }
  OpCounter::add_macs(cells * 9 * cin * W.cols());
  Matrix out = (patches * W).rowwise() + Bv.row(0);
  Tape& t = *x.tape;
  const int ix = x.id, iw = w.id, ib = b.id;
  int self = static_cast<int>(t.size());
  return t.push("conv3x3", {ix, iw, ib}, std::move(out),
                [=, patches = std::move(patches)](Tape& tp) {
                  const Matrix& g = tp.grad(self);
                  if (tp.needs_grad(iw)) tp.grad(iw).noalias() += patches.transpose() * g;
                  if (tp.needs_grad(ib)) tp.grad(ib) += g.colwise().sum();
                  if (!tp.needs_grad(ix)) return;
                  const Matrix dpatch = g * tp.value(iw).transpose();
                  Matrix& gx = tp.grad(ix);
                  for (Eigen::Index r = 0; r < grid_rows; ++r) {
                    for (Eigen::Index c = 0; c < grid_cols; ++c) {
                      for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                          const Eigen::Index rr = r + dy, cc = c + dx;
                          if (rr < 0 || rr >= grid_rows || cc < 0 || cc >= grid_cols) continue;
                          const Eigen::Index tap = (dy + 1) * 3 + (dx + 1);
                          gx.row(rr * grid_cols + cc) += dpatch.block(r * grid_cols + c, tap * cin, 1, cin);
                        }
                      }
                    }
                  }
                });
}

Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Var stack_rows(const std::vector<Var>& rows) {
  require(!rows.empty(), "stack_rows", "no inputs");
  Tape& t = *rows.front().tape;
  const Eigen::Index cols = rows.front().cols();
  Eigen::Index total = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var& r : rows) {
    require(r.cols() == cols, "stack_rows", shapes(rows.front().value(), r.value()));
    offsets.push_back(total);
    ids.push_back(r.id);
    total += r.rows();
  }
  Matrix out(total, cols);
  for (std::size_t k = 0; k < rows.size(); ++k) out.middleRows(offsets[k], rows[k].rows()) = rows[k].value();
  int self = static_cast<int>(t.size());
  return t.push("stack_rows", ids, std::move(out), [=](Tape& tp) {
    const Matrix& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.needs_grad(ids[k])) continue;
      tp.grad(ids[k]) += g.middleRows(offsets[k], tp.value(ids[k]).rows());
    }
  });
}

Var rdft_magnitude(Var x) {
  const Matrix& X = x.value();
  require(X.rows() >= 2, "rdft_magnitude", "series needs at least 2 steps, got " + shape_str(X));
  Matrix re, im;
  rdft(X, re, im);
  Matrix mag = rdft_magnitudes(X);
  Tape& t = *x.tape;
  const int ix = x.id;
  const Eigen::Index length = X.rows();
  int self = static_cast<int>(t.size());
  return t.push("rdft_magnitude", {ix}, std::move(mag),
                [=, re = std::move(re), im = std::move(im)](Tape& tp) {
                  const Matrix& g = tp.grad(self);
                  const Matrix& m = tp.value(self);
                  // d|X_f|/dx_t = (Re_f cos - Im_f sin) / |X_f|; zero where |X_f| = 0.
                  Matrix gre = Matrix::Zero(m.rows(), m.cols());
                  Matrix gim = Matrix::Zero(m.rows(), m.cols());
                  for (Eigen::Index f = 0; f < m.rows(); ++f) {
                    for (Eigen::Index c = 0; c < m.cols(); ++c) {
                      if (m(f, c) <= 0.0) continue;
                      gre(f, c) = g(f, c) * re(f, c) / m(f, c);
                      gim(f, c) = g(f, c) * im(f, c) / m(f, c);
                    }
                  }
                  const DftTwiddles<double> tw(length);
                  tp.grad(ix) += tw.cos_table.transpose() * gre - tw.sin_table.transpose() * gim;
                });
}

}  // namespace stlgt
