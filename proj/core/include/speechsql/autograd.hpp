#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Graphs are built eagerly by the op functions below and released
// when the last Var referencing them goes away.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace speechsql::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

/// A named, persistent tensor. Trainable parameters receive gradients;
/// non-trainable ones (batch-norm running statistics) are only saved/loaded.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Node {
  Matrix value;
  Matrix grad;
  const Matrix* external = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  const Matrix& val() const { return external ? *external : value; }
  Matrix& ensure_grad() {
    if (grad.size() == 0) grad = Matrix::Zero(val().rows(), val().cols());
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->val(); }
  const Matrix& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->val().rows(); }
  Eigen::Index cols() const { return node_->val().cols(); }
  double scalar() const { return node_->val()(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Runs reverse accumulation from a scalar root (seed gradient 1).
void backward(const Var& root);

/// Per-forward-pass state: parameter leaves, train/eval mode, dropout RNG.
/// A Context binds each Parameter to exactly one leaf so that gradients from
/// every use are summed before being harvested.
class Context {
 public:
  explicit Context(bool training = false, std::uint64_t seed = 0, bool grad = true);

  Var param(Parameter& p);
  bool training() const { return training_; }
  bool grad_enabled() const { return grad_; }
  std::mt19937_64& rng() { return rng_; }

  /// Adds every leaf gradient into its Parameter::grad (allocating if needed).
  void accumulate_grads();

 private:
  bool training_;
  bool grad_;
  std::mt19937_64 rng_;
  std::unordered_map<Parameter*, Var> leaves_;
  std::vector<Parameter*> order_;
};

// ---- leaves -------------------------------------------------------------
Var constant(Matrix value);
Var variable(Matrix value);  // leaf that requires grad

// ---- linear algebra -----------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast 1 x c over rows
Var linear(const Var& x, const Var& w, const Var& b);  // x w + b

// ---- elementwise nonlinearities ----------------------------------------
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
/// Gradient passes only where lo <= a <= hi.
Var clamp(const Var& a, double lo, double hi);

// ---- shape --------------------------------------------------------------
Var hcat(const std::vector<Var>& parts);
Var vcat(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, const std::vector<int>& rows);
/// out.flat[i] = a.flat[index[i]] (row-major flattening), shaped rows x cols.
Var gather_elements(const Var& a, std::vector<int> index, Eigen::Index rows,
                    Eigen::Index cols);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);

// ---- reductions ---------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a, Eigen::Index valid_rows = -1);  // 1 x c
Var max_rows(const Var& a, Eigen::Index valid_rows = -1);   // 1 x c
Var sum_cols(const Var& a);                                 // r x 1
Var pick(const Var& a, Eigen::Index r, Eigen::Index c);      // 1 x 1

// ---- normalization / probability ---------------------------------------
/// Row-wise softmax; entries with mask[j] == false get probability 0.
Var softmax_rows(const Var& a, const std::vector<bool>& col_mask = {});
Var log_softmax_rows(const Var& a);
/// Row-vector log-softmax restricted to legal entries. Illegal entries hold
/// -infinity and never receive gradient.
Var masked_log_softmax(const Var& row, const std::vector<bool>& legal);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Rows scaled to unit L2 norm; all-zero rows stay zero.
Var normalize_rows(const Var& a, double eps = 1e-12);
Var dropout(Context& ctx, const Var& a, double rate);

// ---- fused blocks -------------------------------------------------------
/// One LSTM step for a batch of rows. Gates ordered (input, forget, cell,
/// output). Returns [h' | c'] of width 2H.
Var lstm_cell(const Var& x, const Var& h, const Var& c, const Var& wx,
              const Var& wh, const Var& b);

struct AttentionTrace {
  std::vector<Matrix> probs;  // one (lq x lk) matrix per head
};

/// Multi-head scaled dot-product attention. key_valid marks usable key rows
/// (empty = all). A query row with no valid key produces a zero output.
/// scale <= 0 selects 1/sqrt(head_dim).
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              const std::vector<bool>& key_valid = {}, double scale = 0.0,
              AttentionTrace* trace = nullptr);

/// Layout of a batch of feature maps stored as a (channels, batch*h*w) matrix.
struct MapShape {
  int batch = 1;
  int height = 1;
  int width = 1;
};

struct ConvGeometry {
  int kernel_h = 3;
  int kernel_w = 3;
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 1;
  int pad_w = 1;

  int out_h(int in_h) const { return (in_h + 2 * pad_h - kernel_h) / stride_h + 1; }
  int out_w(int in_w) const { return (in_w + 2 * pad_w - kernel_w) / stride_w + 1; }
};

/// weight: (c_out, c_in*kh*kw); bias: (c_out, 1).
Var conv2d(const Var& x, const MapShape& in, const Var& weight, const Var& bias,
           const ConvGeometry& geo, MapShape* out);

/// Adjoint of conv2d. weight: (c_in, c_out*kh*kw); bias: (c_out, 1).
/// `out` must hold the desired output height/width (batch is copied); they
/// must map back onto `in` under `geo`.
Var conv_transpose2d(const Var& x, const MapShape& in, const Var& weight,
                     const Var& bias, const ConvGeometry& geo, const MapShape& out);

/// Batch normalization over the columns of a (channels, N) matrix.
/// Training mode normalizes with batch statistics and updates running
/// statistics in place; inference mode uses the running statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Matrix& running_mean,
               Matrix& running_var, bool training, double momentum = 0.1,
               double eps = 1e-5);

}  // namespace speechsql::ag
