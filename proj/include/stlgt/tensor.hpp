#pragma once

// Dense reverse-mode differentiation over row-major Eigen matrices.
//
// Every value is a rank-2 tensor (vectors are 1 x n or n x 1, scalars 1 x 1).
// A Tape owns the values produced during one forward pass; when recording is
// enabled each op also stores a backward rule. Tapes are never shared between
// threads, parameters are only read during the forward pass.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace stlgt {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using SparseX = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;
using Sparse = SparseX<double>;

std::string shape_str(const Matrix& m);

// A named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
};

// Ordered name -> parameter map. Iteration order is lexicographic and is the
// canonical order for checkpoints and optimizer state.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  std::map<std::string, Parameter>& all() { return params_; }
  const std::map<std::string, Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  double grad_norm() const;

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

// Handle to a value on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  struct Node {
    std::string op;
    std::vector<int> inputs;
    Matrix value;
    Matrix grad;
    Backward backward;       // empty for leaves and when not recording
    Parameter* param = nullptr;
  };

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value);
  // A recording tape accumulates gradients into `p` on backward().
  Var param(const Parameter& p);

  // Appends an op result. `backward` is dropped when not recording.
  Var push(std::string op, std::vector<int> inputs, Matrix value, Backward backward);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Matrix& grad(int id);
  bool needs_grad(int id) const { return needs_grad_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  // Reverse sweep from a 1x1 loss. Parameter gradients are accumulated into
  // Parameter::grad; the tape is cleared afterwards.
  void backward(Var loss);
  void clear();

 private:
  bool record_;
  std::deque<Node> nodes_;  // stable addresses: value() references survive later pushes
  std::vector<bool> needs_grad_;
};

// Scoped multiply-accumulate and peak-intermediate accounting. While an
// OpCounter is alive on a thread, matmul/spmm/reductions add to it.
class OpCounter {
 public:
  OpCounter();
  ~OpCounter();
  OpCounter(const OpCounter&) = delete;
  OpCounter& operator=(const OpCounter&) = delete;

  std::int64_t macs() const { return macs_; }
  std::int64_t peak_elements() const { return peak_elements_; }

  static void add_macs(std::int64_t n);
  static void note_elements(std::int64_t n);

 private:
  std::int64_t macs_ = 0;
  std::int64_t peak_elements_ = 0;
  OpCounter* prev_;
};

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
Var spmm(const Sparse& s, Var x);          // constant sparse left operand
Var add(Var a, Var b);                     // same shape
Var sub(Var a, Var b);
Var add_row(Var a, Var row);               // broadcast a 1 x c row over a
Var mul(Var a, Var b);                     // elementwise
Var scale(Var a, double s);
Var scale_by(Var a, Var s);                // s is 1x1
Var add_scalar(Var a, double s);
Var div_rows(Var a, Var d);                // a: r x c, d: r x 1
Var concat_cols(Var a, Var b);
Var concat_rows(Var a, Var b);
Var transpose(Var a);
Var relu(Var a);
Var gelu(Var a);
Var softmax_rows(Var a);
Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);
Var sum(Var a);                            // 1x1
Var mean(Var a);                           // 1x1
Var sum_rows(Var a);                       // 1 x c, sums over rows
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var pad_rows(Var a, Eigen::Index total_rows);   // zero rows appended
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
Var gather_rows(Var a, const std::vector<Eigen::Index>& rows);
Var frobenius_norm(Var a);                 // 1x1

// Divides a by (||a||_F + eps).
Var frobenius_normalize(Var a, double eps);

// 3x3 convolution, stride 1, zero padding, over a (rows x cols) grid whose
// cells are stored row-major as the rows of x (rows*cols x c_in).
// w: (9*c_in) x c_out with tap index (dy+1)*3+(dx+1) major, b: 1 x c_out.
Var conv3x3(Var x, Eigen::Index grid_rows, Eigen::Index grid_cols, Var w, Var b);

// Glorot-uniform initializer: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out, std::mt19937_64& rng);

Var stack_rows(const std::vector<Var>& rows);  // all inputs share a column count

// Magnitudes |DFT| of each column for bins 0..floor(T/2): (floor(T/2)+1) x c.
Var rdft_magnitude(Var x);

}  // namespace stlgt
