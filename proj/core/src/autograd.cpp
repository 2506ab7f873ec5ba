#include "speechsql/autograd.hpp"

#include "speechsql/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace speechsql::ag {

namespace {

using BackwardFn = std::function<void(Node&)>;

Var make(Matrix value, std::vector<NodePtr> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void check(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kShapeMismatch, what);
}

void accumulate(const NodePtr& n, const Matrix& g) {
  if (n->requires_grad) n->ensure_grad() += g;
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void backward(const Var& root) {
  if (!root.requires_grad()) return;
  check(root.rows() == 1 && root.cols() == 1, "backward root must be a scalar");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Context::Context(bool training, std::uint64_t seed, bool grad)
    : training_(training), grad_(grad), rng_(seed) {}

Var Context::param(Parameter& p) {
  auto it = leaves_.find(&p);
  if (it != leaves_.end()) return it->second;
  auto node = std::make_shared<Node>();
  node->external = &p.value;
  node->requires_grad = grad_ && p.trainable;
  Var v(node);
  leaves_.emplace(&p, v);
  order_.push_back(&p);
  return v;
}

void Context::accumulate_grads() {
  for (Parameter* p : order_) {
    const Var& leaf = leaves_.at(p);
    if (!leaf.requires_grad() || leaf.grad().size() == 0) continue;
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    p->grad += leaf.grad();
  }
}

Var constant(Matrix value) { return make(std::move(value), {}, nullptr); }

Var variable(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(node);
}

Var matmul(const Var& a, const Var& b) {
  check(a.cols() == b.rows(), "matmul inner dimensions differ");
  return make(a.value() * b.value(), {a.node(), b.node()}, [](Node& n) {
    const auto& a = n.inputs[0];
    const auto& b = n.inputs[1];
    if (a->requires_grad) a->ensure_grad().noalias() += n.grad * b->val().transpose();
    if (b->requires_grad) b->ensure_grad().noalias() += a->val().transpose() * n.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  check(a.cols() == b.cols(), "matmul_nt widths differ");
  return make(a.value() * b.value().transpose(), {a.node(), b.node()}, [](Node& n) {
    const auto& a = n.inputs[0];
    const auto& b = n.inputs[1];
    if (a->requires_grad) a->ensure_grad().noalias() += n.grad * b->val();
    if (b->requires_grad) b->ensure_grad().noalias() += n.grad.transpose() * a->val();
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a.node()},
              [](Node& n) { accumulate(n.inputs[0], n.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add shapes differ");
  return make(a.value() + b.value(), {a.node(), b.node()}, [](Node& n) {
    accumulate(n.inputs[0], n.grad);
    accumulate(n.inputs[1], n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "sub shapes differ");
  return make(a.value() - b.value(), {a.node(), b.node()}, [](Node& n) {
    accumulate(n.inputs[0], n.grad);
    if (n.inputs[1]->requires_grad) n.inputs[1]->ensure_grad() -= n.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "mul shapes differ");
  return make(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& n) {
    const auto& a = n.inputs[0];
    const auto& b = n.inputs[1];
    if (a->requires_grad) a->ensure_grad() += n.grad.cwiseProduct(b->val());
    if (b->requires_grad) b->ensure_grad() += n.grad.cwiseProduct(a->val());
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a.node()}, [s](Node& n) { accumulate(n.inputs[0], n.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
  check(row.rows() == 1 && row.cols() == a.cols(), "add_row expects a matching 1 x c row");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a.node(), row.node()}, [](Node& n) {
    accumulate(n.inputs[0], n.grad);
    if (n.inputs[1]->requires_grad) n.inputs[1]->ensure_grad() += n.grad.colwise().sum();
  });
}

Var linear(const Var& x, const Var& w, const Var& b) { return add_row(matmul(x, w), b); }

Var relu(const Var& a) {
  return make(a.value().cwiseMax(0.0), {a.node()}, [](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad() += (in->val().array() > 0.0).select(n.grad, 0.0);
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make(out, {a.node()}, [](Node& n) {
    accumulate(n.inputs[0], (n.grad.array() * (1.0 - n.value.array().square())).matrix());
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr(&sigmoid_scalar);
  return make(out, {a.node()}, [](Node& n) {
    accumulate(n.inputs[0],
               (n.grad.array() * n.value.array() * (1.0 - n.value.array())).matrix());
  });
}

Var log(const Var& a) {
  return make(a.value().array().log().matrix(), {a.node()}, [](Node& n) {
    accumulate(n.inputs[0], (n.grad.array() / n.inputs[0]->val().array()).matrix());
  });
}

Var exp(const Var& a) {
  return make(a.value().array().exp().matrix(), {a.node()}, [](Node& n) {
    accumulate(n.inputs[0], n.grad.cwiseProduct(n.value));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  return make(a.value().cwiseMax(lo).cwiseMin(hi), {a.node()}, [lo, hi](Node& n) {
    const Matrix& x = n.inputs[0]->val();
    Matrix g = n.grad;
    for (Eigen::Index i = 0; i < g.size(); ++i)
      if (x.data()[i] < lo || x.data()[i] > hi) g.data()[i] = 0.0;
    accumulate(n.inputs[0], g);
  });
}

Var hcat(const std::vector<Var>& parts) {
  check(!parts.empty(), "hcat of nothing");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    check(p.rows() == rows, "hcat row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<NodePtr> inputs;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    inputs.push_back(p.node());
  }
  return make(std::move(out), std::move(inputs), [](Node& n) {
    Eigen::Index at = 0;
    for (const auto& in : n.inputs) {
      const auto w = in->val().cols();
      if (in->requires_grad) in->ensure_grad() += n.grad.middleCols(at, w);
      at += w;
    }
  });
}

Var vcat(const std::vector<Var>& parts) {
  check(!parts.empty(), "vcat of nothing");
  Eigen::Index cols = parts[0].cols(), rows = 0;
  for (const auto& p : parts) {
    check(p.cols() == cols, "vcat column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<NodePtr> inputs;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    inputs.push_back(p.node());
  }
  return make(std::move(out), std::move(inputs), [](Node& n) {
    Eigen::Index at = 0;
    for (const auto& in : n.inputs) {
      const auto h = in->val().rows();
      if (in->requires_grad) in->ensure_grad() += n.grad.middleRows(at, h);
      at += h;
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  check(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows out of range");
  return make(a.value().middleRows(start, count), {a.node()}, [start, count](Node& n) {
    if (n.inputs[0]->requires_grad)
      n.inputs[0]->ensure_grad().middleRows(start, count) += n.grad;
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols out of range");
  return make(a.value().middleCols(start, count), {a.node()}, [start, count](Node& n) {
    if (n.inputs[0]->requires_grad)
      n.inputs[0]->ensure_grad().middleCols(start, count) += n.grad;
  });
}

Var gather_rows(const Var& a, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    check(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  return make(std::move(out), {a.node()}, [rows](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Matrix& g = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}

Var gather_elements(const Var& a, std::vector<int> index, Eigen::Index rows, Eigen::Index cols) {
  check(static_cast<Eigen::Index>(index.size()) == rows * cols, "gather_elements size mismatch");
  Matrix out(rows, cols);
  const double* src = a.value().data();
  const auto total = a.value().size();
  double* dst = out.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    check(index[i] >= 0 && index[i] < total, "gather_elements index out of range");
    dst[i] = src[index[i]];
  }
  return make(std::move(out), {a.node()}, [index = std::move(index)](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    double* g = n.inputs[0]->ensure_grad().data();
    const double* up = n.grad.data();
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += up[i];
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  check(rows * cols == a.value().size(), "reshape size mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make(std::move(out), {a.node()}, [](Node& n) {
    const auto& in = n.inputs[0];
    if (in->requires_grad)
      in->ensure_grad() += Eigen::Map<const Matrix>(n.grad.data(), in->val().rows(), in->val().cols());
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a.node()}, [](Node& n) {
    const auto& in = n.inputs[0];
    if (in->requires_grad) in->ensure_grad().array() += n.grad(0, 0);
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_rows(const Var& a, Eigen::Index valid_rows) {
  const Eigen::Index r = valid_rows < 0 ? a.rows() : valid_rows;
  check(r >= 1 && r <= a.rows(), "mean_rows needs at least one valid row");
  Matrix out = a.value().topRows(r).colwise().mean();
  return make(std::move(out), {a.node()}, [r](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad().topRows(r).rowwise() += n.grad.row(0) / static_cast<double>(r);
  });
}

Var max_rows(const Var& a, Eigen::Index valid_rows) {
  const Eigen::Index r = valid_rows < 0 ? a.rows() : valid_rows;
  check(r >= 1 && r <= a.rows(), "max_rows needs at least one valid row");
  Matrix out(1, a.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(a.cols()));
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    Eigen::Index best = 0;
    a.value().col(c).head(r).maxCoeff(&best);
    arg[static_cast<std::size_t>(c)] = best;
    out(0, c) = a.value()(best, c);
  }
  return make(std::move(out), {a.node()}, [arg = std::move(arg)](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    Matrix& g = in->ensure_grad();
    for (std::size_t c = 0; c < arg.size(); ++c)
      g(arg[c], static_cast<Eigen::Index>(c)) += n.grad(0, static_cast<Eigen::Index>(c));
  });
}

Var sum_cols(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return make(std::move(out), {a.node()}, [](Node& n) {
    const auto& in = n.inputs[0];
    if (in->requires_grad) in->ensure_grad().colwise() += n.grad.col(0);
  });
}

Var pick(const Var& a, Eigen::Index r, Eigen::Index c) {
  check(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), "pick out of range");
  Matrix out(1, 1);
  out(0, 0) = a.value()(r, c);
  return make(std::move(out), {a.node()}, [r, c](Node& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->ensure_grad()(r, c) += n.grad(0, 0);
  });
}

namespace {

// Softmax of one row over allowed entries; disallowed entries get 0.
void softmax_row(const double* in, double* out, Eigen::Index n, const std::vector<bool>& mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j)
    if (mask.empty() || mask[static_cast<std::size_t>(j)]) mx = std::max(mx, in[j]);
  if (!std::isfinite(mx)) {
    std::fill(out, out + n, 0.0);
    return;
  }
  double total = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const bool ok = mask.empty() || mask[static_cast<std::size_t>(j)];
    out[j] = ok ? std::exp(in[j] - mx) : 0.0;
    total += out[j];
  }
  for (Eigen::Index j = 0; j < n; ++j) out[j] /= total;
}

}  // namespace

Var softmax_rows(const Var& a, const std::vector<bool>& col_mask) {
  check(col_mask.empty() || static_cast<Eigen::Index>(col_mask.size()) == a.cols(),
        "softmax mask width mismatch");
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    softmax_row(a.value().row(i).data(), out.row(i).data(), a.cols(), col_mask);
  return make(std::move(out), {a.node()}, [](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    const Matrix& p = n.value;
    Eigen::VectorXd dot = (n.grad.cwiseProduct(p)).rowwise().sum();
    Matrix g = p.cwiseProduct(n.grad);
    g -= (p.array().colwise() * dot.array()).matrix();
    in->ensure_grad() += g;
  });
}

Var log_softmax_rows(const Var& a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mx = a.value().row(i).maxCoeff();
    const double lse = mx + std::log((a.value().row(i).array() - mx).exp().sum());
    out.row(i) = a.value().row(i).array() - lse;
  }
  return make(std::move(out), {a.node()}, [](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    Matrix p = n.value.array().exp().matrix();
    Eigen::VectorXd gs = n.grad.rowwise().sum();
    Matrix g = n.grad - (p.array().colwise() * gs.array()).matrix();
    in->ensure_grad() += g;
  });
}

Var masked_log_softmax(const Var& row, const std::vector<bool>& legal) {
  check(row.rows() == 1 && static_cast<Eigen::Index>(legal.size()) == row.cols(),
        "masked_log_softmax expects a 1 x n row and n mask entries");
  const Eigen::Index n = row.cols();
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j)
    if (legal[static_cast<std::size_t>(j)]) mx = std::max(mx, row.value()(0, j));
  check(std::isfinite(mx), "masked_log_softmax with no legal entry");
  double total = 0.0;
  for (Eigen::Index j = 0; j < n; ++j)
    if (legal[static_cast<std::size_t>(j)]) total += std::exp(row.value()(0, j) - mx);
  const double lse = mx + std::log(total);
  Matrix out(1, n);
  for (Eigen::Index j = 0; j < n; ++j)
    out(0, j) = legal[static_cast<std::size_t>(j)] ? row.value()(0, j) - lse
                                                   : -std::numeric_limits<double>::infinity();
  return make(std::move(out), {row.node()}, [legal](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    double gs = 0.0;
    for (Eigen::Index j = 0; j < n.grad.cols(); ++j)
      if (legal[static_cast<std::size_t>(j)]) gs += n.grad(0, j);
    Matrix& g = in->ensure_grad();
    for (Eigen::Index j = 0; j < n.grad.cols(); ++j)
      if (legal[static_cast<std::size_t>(j)]) g(0, j) += n.grad(0, j) - std::exp(n.value(0, j)) * gs;
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  check(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 && bias.cols() == x.cols(),
        "layer_norm gain/bias must be 1 x width");
  const Eigen::Index r = x.rows(), c = x.cols();
  Matrix xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make(std::move(out), {x.node(), gain.node(), bias.node()},
              [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                const auto& x = n.inputs[0];
                const auto& gain = n.inputs[1];
                const auto& bias = n.inputs[2];
                if (gain->requires_grad) gain->ensure_grad() += n.grad.cwiseProduct(xhat).colwise().sum();
                if (bias->requires_grad) bias->ensure_grad() += n.grad.colwise().sum();
                if (!x->requires_grad) return;
                const double c = static_cast<double>(xhat.cols());
                Matrix dxhat = n.grad.array().rowwise() * gain->val().row(0).array();
                Matrix& g = x->ensure_grad();
                for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                  const double s1 = dxhat.row(i).sum();
                  const double s2 = dxhat.row(i).dot(xhat.row(i));
                  g.row(i) += (inv_std(i) / c) *
                              (c * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2).matrix();
                }
              });
}

Var normalize_rows(const Var& a, double eps) {
  const Eigen::Index r = a.rows();
  Eigen::VectorXd norms = a.value().rowwise().norm();
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < r; ++i) {
    if (norms(i) > eps) out.row(i) /= norms(i);
    else out.row(i).setZero();
  }
  return make(std::move(out), {a.node()}, [norms = std::move(norms), eps](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    Matrix& g = in->ensure_grad();
    for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
      if (norms(i) <= eps) continue;
      const double d = n.grad.row(i).dot(n.value.row(i));
      g.row(i) += (n.grad.row(i) - d * n.value.row(i)) / norms(i);
    }
  });
}

Var dropout(Context& ctx, const Var& a, double rate) {
  if (!ctx.training() || rate <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(ctx.rng()) ? s : 0.0;
  Matrix out = a.value().cwiseProduct(mask);
  return make(std::move(out), {a.node()}, [mask = std::move(mask)](Node& n) {
    accumulate(n.inputs[0], n.grad.cwiseProduct(mask));
  });
}

Var lstm_cell(const Var& x, const Var& h, const Var& c, const Var& wx, const Var& wh,
              const Var& b) {
  const Eigen::Index hid = h.cols();
  check(wx.rows() == x.cols() && wx.cols() == 4 * hid, "lstm wx shape");
  check(wh.rows() == hid && wh.cols() == 4 * hid, "lstm wh shape");
  check(b.rows() == 1 && b.cols() == 4 * hid, "lstm bias shape");
  check(c.cols() == hid && c.rows() == h.rows() && x.rows() == h.rows(), "lstm state shape");
  Matrix z = x.value() * wx.value() + h.value() * wh.value();
  z.rowwise() += b.value().row(0);
  Matrix gates(z.rows(), z.cols());
  gates.leftCols(2 * hid) = z.leftCols(2 * hid).unaryExpr(&sigmoid_scalar);
  gates.middleCols(2 * hid, hid) = z.middleCols(2 * hid, hid).array().tanh().matrix();
  gates.rightCols(hid) = z.rightCols(hid).unaryExpr(&sigmoid_scalar);
  Matrix out(z.rows(), 2 * hid);
  const auto i_g = gates.leftCols(hid).array();
  const auto f_g = gates.middleCols(hid, hid).array();
  const auto g_g = gates.middleCols(2 * hid, hid).array();
  const auto o_g = gates.rightCols(hid).array();
  Matrix c_new = (f_g * c.value().array() + i_g * g_g).matrix();
  Matrix tanh_c = c_new.array().tanh().matrix();
  out.leftCols(hid) = (o_g * tanh_c.array()).matrix();
  out.rightCols(hid) = c_new;
  return make(std::move(out), {x.node(), h.node(), c.node(), wx.node(), wh.node(), b.node()},
              [gates = std::move(gates), tanh_c = std::move(tanh_c), hid](Node& n) {
                const auto& x = n.inputs[0];
                const auto& h = n.inputs[1];
                const auto& c = n.inputs[2];
                const auto& wx = n.inputs[3];
                const auto& wh = n.inputs[4];
                const auto& b = n.inputs[5];
                const auto i_g = gates.leftCols(hid).array();
                const auto f_g = gates.middleCols(hid, hid).array();
                const auto g_g = gates.middleCols(2 * hid, hid).array();
                const auto o_g = gates.rightCols(hid).array();
                const auto dh = n.grad.leftCols(hid).array();
                Matrix dc = n.grad.rightCols(hid);
                dc.array() += dh * o_g * (1.0 - tanh_c.array().square());
                Matrix dz(gates.rows(), 4 * hid);
                dz.leftCols(hid) = (dc.array() * g_g * i_g * (1.0 - i_g)).matrix();
                dz.middleCols(hid, hid) = (dc.array() * c->val().array() * f_g * (1.0 - f_g)).matrix();
                dz.middleCols(2 * hid, hid) = (dc.array() * i_g * (1.0 - g_g.square())).matrix();
                dz.rightCols(hid) = (dh * tanh_c.array() * o_g * (1.0 - o_g)).matrix();
                if (x->requires_grad) x->ensure_grad().noalias() += dz * wx->val().transpose();
                if (h->requires_grad) h->ensure_grad().noalias() += dz * wh->val().transpose();
                if (c->requires_grad) c->ensure_grad() += (dc.array() * f_g).matrix();
                if (wx->requires_grad) wx->ensure_grad().noalias() += x->val().transpose() * dz;
                if (wh->requires_grad) wh->ensure_grad().noalias() += h->val().transpose() * dz;
                if (b->requires_grad) b->ensure_grad() += dz.colwise().sum();
              });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads,
              const std::vector<bool>& key_valid, double scale, AttentionTrace* trace) {
  check(q.cols() == k.cols() && k.cols() == v.cols() && k.rows() == v.rows(),
        "attention q/k/v shapes disagree");
  check(heads >= 1 && q.cols() % heads == 0, "attention width not divisible by heads");
  check(key_valid.empty() || static_cast<Eigen::Index>(key_valid.size()) == k.rows(),
        "attention key mask length");
  const Eigen::Index dk = q.cols() / heads;
  const double s = scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(dk));
  const Eigen::Index lq = q.rows(), lk = k.rows();
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(lq, q.cols());
  for (int h = 0; h < heads; ++h) {
    Matrix scores = (q.value().middleCols(h * dk, dk) * k.value().middleCols(h * dk, dk).transpose()) * s;
    Matrix p(lq, lk);
    for (Eigen::Index i = 0; i < lq; ++i) softmax_row(scores.row(i).data(), p.row(i).data(), lk, key_valid);
    out.middleCols(h * dk, dk).noalias() = p * v.value().middleCols(h * dk, dk);
    probs[static_cast<std::size_t>(h)] = std::move(p);
  }
  if (trace) trace->probs = probs;
  return make(std::move(out), {q.node(), k.node(), v.node()},
              [probs = std::move(probs), dk, s](Node& n) {
                const auto& q = n.inputs[0];
                const auto& k = n.inputs[1];
                const auto& v = n.inputs[2];
                for (std::size_t h = 0; h < probs.size(); ++h) {
                  const Eigen::Index off = static_cast<Eigen::Index>(h) * dk;
                  const Matrix& p = probs[h];
                  const Matrix d_out = n.grad.middleCols(off, dk);
                  if (v->requires_grad) v->ensure_grad().middleCols(off, dk).noalias() += p.transpose() * d_out;
                  if (!q->requires_grad && !k->requires_grad) continue;
                  Matrix dp = d_out * v->val().middleCols(off, dk).transpose();
                  Eigen::VectorXd dot = dp.cwiseProduct(p).rowwise().sum();
                  Matrix ds = p.cwiseProduct(dp);
                  ds -= (p.array().colwise() * dot.array()).matrix();
                  ds *= s;
                  if (q->requires_grad) q->ensure_grad().middleCols(off, dk).noalias() += ds * k->val().middleCols(off, dk);
                  if (k->requires_grad) k->ensure_grad().middleCols(off, dk).noalias() += ds.transpose() * q->val().middleCols(off, dk);
                }
              });
}

namespace {

// Unfolds one sample (channels, h*w) into (channels*kh*kw, oh*ow).
Matrix im2col(const double* src, int channels, int h, int w, const ConvGeometry& g) {
  const int oh = g.out_h(h), ow = g.out_w(w);
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(channels) * g.kernel_h * g.kernel_w,
                             static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < channels; ++c) {
    const double* plane = src + static_cast<std::ptrdiff_t>(c) * h * w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        double* row = cols.row((static_cast<Eigen::Index>(c) * g.kernel_h + ki) * g.kernel_w + kj).data();
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride_h - g.pad_h + ki;
          if (iy < 0 || iy >= h) continue;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * g.stride_w - g.pad_w + kj;
            if (ix >= 0 && ix < w) row[y * ow + x] = plane[iy * w + ix];
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatters (channels*kh*kw, oh*ow) back onto (channels, h*w).
void col2im(const Matrix& cols, double* dst, int channels, int h, int w, const ConvGeometry& g) {
  const int oh = g.out_h(h), ow = g.out_w(w);
  for (int c = 0; c < channels; ++c) {
    double* plane = dst + static_cast<std::ptrdiff_t>(c) * h * w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = cols.row((static_cast<Eigen::Index>(c) * g.kernel_h + ki) * g.kernel_w + kj).data();
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride_h - g.pad_h + ki;
          if (iy < 0 || iy >= h) continue;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * g.stride_w - g.pad_w + kj;
            if (ix >= 0 && ix < w) plane[iy * w + ix] += row[y * ow + x];
          }
        }
      }
    }
  }
}

// Copies sample b of a (channels, batch*hw) matrix into a contiguous block.
Matrix sample_block(const Matrix& m, int b, Eigen::Index hw) { return m.middleCols(b * hw, hw); }

}  // namespace

Var conv2d(const Var& x, const MapShape& in, const Var& weight, const Var& bias,
           const ConvGeometry& geo, MapShape* out_shape) {
  const int c_in = static_cast<int>(x.rows());
  const Eigen::Index in_hw = static_cast<Eigen::Index>(in.height) * in.width;
  check(x.cols() == in.batch * in_hw, "conv2d input does not match its MapShape");
  check(weight.cols() == static_cast<Eigen::Index>(c_in) * geo.kernel_h * geo.kernel_w,
        "conv2d weight width must be c_in*kh*kw");
  check(bias.rows() == weight.rows() && bias.cols() == 1, "conv2d bias must be c_out x 1");
  const int oh = geo.out_h(in.height), ow = geo.out_w(in.width);
  check(oh >= 1 && ow >= 1, "conv2d output would be empty");
  const Eigen::Index out_hw = static_cast<Eigen::Index>(oh) * ow;
  const Eigen::Index c_out = weight.rows();
  Matrix out(c_out, in.batch * out_hw);
  std::vector<Matrix> cols(static_cast<std::size_t>(in.batch));
  for (int b = 0; b < in.batch; ++b) {
    Matrix block = sample_block(x.value(), b, in_hw);
    cols[static_cast<std::size_t>(b)] = im2col(block.data(), c_in, in.height, in.width, geo);
    auto dst = out.middleCols(b * out_hw, out_hw);
    dst.noalias() = weight.value() * cols[static_cast<std::size_t>(b)];
    dst.colwise() += bias.value().col(0);
  }
  if (out_shape) *out_shape = MapShape{in.batch, oh, ow};
  return make(std::move(out), {x.node(), weight.node(), bias.node()},
              [cols = std::move(cols), in, geo, c_in, in_hw, out_hw](Node& n) {
                const auto& x = n.inputs[0];
                const auto& w = n.inputs[1];
                const auto& bias = n.inputs[2];
                for (int b = 0; b < in.batch; ++b) {
                  const Matrix d_out = n.grad.middleCols(b * out_hw, out_hw);
                  if (w->requires_grad) w->ensure_grad().noalias() += d_out * cols[static_cast<std::size_t>(b)].transpose();
                  if (bias->requires_grad) bias->ensure_grad().col(0) += d_out.rowwise().sum();
                  if (x->requires_grad) {
                    Matrix dcols = w->val().transpose() * d_out;
                    Matrix dblock = Matrix::Zero(c_in, in_hw);
                    col2im(dcols, dblock.data(), c_in, in.height, in.width, geo);
                    x->ensure_grad().middleCols(b * in_hw, in_hw) += dblock;
                  }
                }
              });
}

Var conv_transpose2d(const Var& x, const MapShape& in, const Var& weight, const Var& bias,
                     const ConvGeometry& geo, const MapShape& out) {
  const Eigen::Index c_in = x.rows();
  const Eigen::Index in_hw = static_cast<Eigen::Index>(in.height) * in.width;
  check(x.cols() == in.batch * in_hw, "conv_transpose2d input does not match its MapShape");
  check(weight.rows() == c_in, "conv_transpose2d weight rows must be c_in");
  const Eigen::Index k = static_cast<Eigen::Index>(geo.kernel_h) * geo.kernel_w;
  check(weight.cols() % k == 0, "conv_transpose2d weight width must be c_out*kh*kw");
  const int c_out = static_cast<int>(weight.cols() / k);
  check(bias.rows() == c_out && bias.cols() == 1, "conv_transpose2d bias must be c_out x 1");
  check(geo.out_h(out.height) == in.height && geo.out_w(out.width) == in.width,
        "conv_transpose2d output size does not invert the geometry");
  const Eigen::Index out_hw = static_cast<Eigen::Index>(out.height) * out.width;
  Matrix result = Matrix::Zero(c_out, in.batch * out_hw);
  for (int b = 0; b < in.batch; ++b) {
    Matrix cols = weight.value().transpose() * x.value().middleCols(b * in_hw, in_hw);
    Matrix block = Matrix::Zero(c_out, out_hw);
    col2im(cols, block.data(), c_out, out.height, out.width, geo);
    block.colwise() += bias.value().col(0);
    result.middleCols(b * out_hw, out_hw) = block;
  }
  return make(std::move(result), {x.node(), weight.node(), bias.node()},
              [in, out, geo, c_out, in_hw, out_hw](Node& n) {
                const auto& x = n.inputs[0];
                const auto& w = n.inputs[1];
                const auto& bias = n.inputs[2];
                for (int b = 0; b < in.batch; ++b) {
                  Matrix d_out = n.grad.middleCols(b * out_hw, out_hw);
                  if (bias->requires_grad) bias->ensure_grad().col(0) += d_out.rowwise().sum();
                  Matrix dcols = im2col(d_out.data(), c_out, out.height, out.width, geo);
                  if (x->requires_grad) x->ensure_grad().middleCols(b * in_hw, in_hw).noalias() += w->val() * dcols;
                  if (w->requires_grad) w->ensure_grad().noalias() += x->val().middleCols(b * in_hw, in_hw) * dcols.transpose();
                }
              });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Matrix& running_mean,
               Matrix& running_var, bool training, double momentum, double eps) {
  const Eigen::Index c = x.rows(), n = x.cols();
  check(gamma.rows() == c && gamma.cols() == 1 && beta.rows() == c && beta.cols() == 1,
        "batch_norm gamma/beta must be c x 1");
  check(running_mean.rows() == c && running_var.rows() == c, "batch_norm running stats shape");
  Eigen::VectorXd mu(c), inv_std(c);
  if (training) {
    for (Eigen::Index i = 0; i < c; ++i) {
      mu(i) = x.value().row(i).mean();
      const double var = (x.value().row(i).array() - mu(i)).square().mean();
      inv_std(i) = 1.0 / std::sqrt(var + eps);
      const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
      running_mean(i, 0) = (1.0 - momentum) * running_mean(i, 0) + momentum * mu(i);
      running_var(i, 0) = (1.0 - momentum) * running_var(i, 0) + momentum * unbiased;
    }
  } else {
    for (Eigen::Index i = 0; i < c; ++i) {
      mu(i) = running_mean(i, 0);
      inv_std(i) = 1.0 / std::sqrt(running_var(i, 0) + eps);
    }
  }
  Matrix xhat = (x.value().colwise() - mu).array().colwise() * inv_std.array();
  Matrix out = xhat.array().colwise() * gamma.value().col(0).array();
  out.colwise() += beta.value().col(0);
  return make(std::move(out), {x.node(), gamma.node(), beta.node()},
              [xhat = std::move(xhat), inv_std = std::move(inv_std), training](Node& nd) {
                const auto& x = nd.inputs[0];
                const auto& gamma = nd.inputs[1];
                const auto& beta = nd.inputs[2];
                if (gamma->requires_grad) gamma->ensure_grad().col(0) += nd.grad.cwiseProduct(xhat).rowwise().sum();
                if (beta->requires_grad) beta->ensure_grad().col(0) += nd.grad.rowwise().sum();
                if (!x->requires_grad) return;
                Matrix dxhat = nd.grad.array().colwise() * gamma->val().col(0).array();
                Matrix& g = x->ensure_grad();
                if (!training) {
                  g += (dxhat.array().colwise() * inv_std.array()).matrix();
                  return;
                }
                const double m = static_cast<double>(xhat.cols());
                for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                  const double s1 = dxhat.row(i).sum();
                  const double s2 = dxhat.row(i).dot(xhat.row(i));
                  g.row(i) += (inv_std(i) / m) * (m * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2).matrix();
                }
              });
}

}  // namespace speechsql::ag
