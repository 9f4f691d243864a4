#include "sstx/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace sstx {

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

}  // namespace detail

namespace {

thread_local int no_grad_depth = 0;
std::atomic<std::uint64_t> next_seq{1};

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

std::string dims(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

void require_finite(const char* op, const char* what, const Matrix& m) {
  if (kernels::all_finite(m)) return;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c)
      if (!std::isfinite(m(r, c))) {
        std::ostringstream os;
        os << op << ": non-finite " << what << " " << m(r, c) << " at (" << r << ", " << c
           << ") of " << dims(m);
        throw NumericError(os.str());
      }
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + dims(a) + " vs " + dims(b));
}

// Grad buffer of n, zero-initialised on first touch.
Matrix& grad_buffer(Node& n) {
  if (!n.has_grad) {
    n.grad.setZero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename Expr>
void accumulate(Node& n, const Expr& g) {
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

}  // namespace

struct TensorAccess {
  static Node& node(const Tensor& t) {
    if (!t.node_) throw ContractError("use of an undefined tensor");
    return *t.node_;
  }
  static const std::shared_ptr<Node>& ptr(const Tensor& t) {
    if (!t.node_) throw ContractError("use of an undefined tensor");
    return t.node_;
  }

  static Tensor make(const char* op, Matrix value, const std::vector<const Tensor*>& inputs,
                     BackwardFn fn) {
    for (const Tensor* in : inputs) require_finite(op, "input", node(*in).value);
    require_finite(op, "output", value);
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->seq = next_seq.fetch_add(1, std::memory_order_relaxed);
    n->op = op;
    bool needs = false;
    if (grad_enabled())
      for (const Tensor* in : inputs) needs = needs || node(*in).requires_grad;
    if (needs) {
      n->requires_grad = true;
      for (const Tensor* in : inputs) n->inputs.push_back(ptr(*in));
      n->backward = std::move(fn);
    }
    return Tensor(std::move(n));
  }
};

namespace {
using A = TensorAccess;
}

bool grad_enabled() { return no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor(Matrix value, bool requires_grad) {
  require_finite("tensor", "value", value);
  node_ = std::make_shared<Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->seq = next_seq.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Matrix::Constant(1, 1, v), requires_grad);
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

const Matrix& Tensor::value() const { return A::node(*this).value; }

Matrix& Tensor::mutable_value() {
  Node& n = A::node(*this);
  if (!n.inputs.empty()) throw ContractError("mutable_value on a non-leaf tensor");
  return n.value;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(*this));
  return value()(0, 0);
}

bool Tensor::requires_grad() const { return A::node(*this).requires_grad; }
bool Tensor::is_leaf() const { return A::node(*this).inputs.empty(); }
bool Tensor::has_grad() const { return A::node(*this).has_grad; }

const Matrix& Tensor::grad() const {
  const Node& n = A::node(*this);
  if (!n.has_grad) throw ContractError("tensor has no gradient");
  return n.grad;
}

void Tensor::zero_grad() {
  Node& n = A::node(*this);
  n.has_grad = false;
  n.grad.resize(0, 0);
}

const char* Tensor::op_name() const { return A::node(*this).op; }

Tensor Tensor::clone() const { return Tensor(value(), requires_grad()); }

std::string shape_string(const Tensor& t) { return dims(t.value()); }

// --- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Matrix out = av * bv;
  return A::make("matmul", std::move(out), {&a, &b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) grad_buffer(x).noalias() += self.grad * y.value.transpose();
    if (y.requires_grad) grad_buffer(y).noalias() += x.value.transpose() * self.grad;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() == bv.rows() && av.cols() == bv.cols()) {
    return A::make("add", av + bv, {&a, &b}, [](Node& self) {
      accumulate(*self.inputs[0], self.grad);
      accumulate(*self.inputs[1], self.grad);
    });
  }
  if (bv.rows() == 1 && bv.cols() == av.cols()) {
    Matrix out = av.rowwise() + bv.row(0);
    return A::make("add", std::move(out), {&a, &b}, [](Node& self) {
      accumulate(*self.inputs[0], self.grad);
      accumulate(*self.inputs[1], self.grad.colwise().sum());
    });
  }
  shape_error("add", av, bv);
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("multiply", av, bv);
  return A::make("multiply", av.cwiseProduct(bv), {&a, &b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    accumulate(x, self.grad.cwiseProduct(y.value));
    accumulate(y, self.grad.cwiseProduct(x.value));
  });
}

Tensor scale(const Tensor& a, double factor) {
  return A::make("scale", a.value() * factor, {&a},
                 [factor](Node& self) { accumulate(*self.inputs[0], self.grad * factor); });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  const Matrix& av = a.value();
  if (rows * cols != av.size())
    throw DimensionError("reshape: cannot view " + dims(av) + " as [" + std::to_string(rows) +
                         "x" + std::to_string(cols) + "]");
  Matrix out = Eigen::Map<const Matrix>(av.data(), rows, cols);
  return A::make("reshape", std::move(out), {&a}, [](Node& self) {
    Node& x = *self.inputs[0];
    accumulate(x, Eigen::Map<const Matrix>(self.grad.data(), x.value.rows(), x.value.cols()));
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return A::make("transpose", std::move(out), {&a},
                 [](Node& self) { accumulate(*self.inputs[0], self.grad.transpose()); });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ContractError("concat: axis must be 0 or 1");
  Index rows = 0;
  Index cols = 0;
  const Matrix& first = parts[0].value();
  for (const Tensor& p : parts) {
    const Matrix& pv = p.value();
    if (axis == 0) {
      if (pv.cols() != first.cols()) shape_error("concat", first, pv);
      rows += pv.rows();
      cols = pv.cols();
    } else {
      if (pv.rows() != first.rows()) shape_error("concat", first, pv);
      cols += pv.cols();
      rows = pv.rows();
    }
  }
  Matrix out(rows, cols);
  Index offset = 0;
  for (const Tensor& p : parts) {
    const Matrix& pv = p.value();
    if (axis == 0) {
      out.middleRows(offset, pv.rows()) = pv;
      offset += pv.rows();
    } else {
      out.middleCols(offset, pv.cols()) = pv;
      offset += pv.cols();
    }
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  return A::make("concat", std::move(out), inputs, [axis](Node& self) {
    Index off = 0;
    for (auto& in : self.inputs) {
      if (axis == 0) {
        accumulate(*in, self.grad.middleRows(off, in->value.rows()));
        off += in->value.rows();
      } else {
        accumulate(*in, self.grad.middleCols(off, in->value.cols()));
        off += in->value.cols();
      }
    }
  });
}

Tensor slice(const Tensor& a, int axis, Index start, Index length) {
  const Matrix& av = a.value();
  const Index extent = axis == 0 ? av.rows() : av.cols();
  if ((axis != 0 && axis != 1) || start < 0 || length < 1 || start + length > extent)
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on axis " + std::to_string(axis) +
                         " out of bounds for " + dims(av));
  Matrix out = axis == 0 ? Matrix(av.middleRows(start, length)) : Matrix(av.middleCols(start, length));
  return A::make("slice", std::move(out), {&a}, [axis, start, length](Node& self) {
    Node& x = *self.inputs[0];
    if (!x.requires_grad) return;
    if (axis == 0)
      grad_buffer(x).middleRows(start, length) += self.grad;
    else
      grad_buffer(x).middleCols(start, length) += self.grad;
  });
}

Tensor relu(const Tensor& a) {
  return A::make("relu", a.value().cwiseMax(0.0), {&a}, [](Node& self) {
    Node& x = *self.inputs[0];
    accumulate(x, (x.value.array() > 0.0).select(self.grad, 0.0).matrix());
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Matrix& xv = x.value();
  const Index n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n) shape_error("layer_norm", xv, gain.value());
  if (bias.rows() != 1 || bias.cols() != n) shape_error("layer_norm", xv, bias.value());
  auto normalized = std::make_shared<Matrix>(xv.rows(), n);
  auto rstd = std::make_shared<Eigen::VectorXd>(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    (*rstd)(r) = 1.0 / std::sqrt(var + eps);
    normalized->row(r) = (xv.row(r).array() - mu) * (*rstd)(r);
  }
  Matrix out = (normalized->array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  return A::make("layer_norm", std::move(out), {&x, &gain, &bias},
                 [normalized, rstd](Node& self) {
                   Node& xn = *self.inputs[0];
                   Node& gn = *self.inputs[1];
                   Node& bn = *self.inputs[2];
                   const Matrix& xhat = *normalized;
                   accumulate(gn, self.grad.cwiseProduct(xhat).colwise().sum());
                   accumulate(bn, self.grad.colwise().sum());
                   if (!xn.requires_grad) return;
                   Matrix dxhat = self.grad.array().rowwise() * gn.value.row(0).array();
                   const double inv_n = 1.0 / static_cast<double>(xhat.cols());
                   Matrix dx(xhat.rows(), xhat.cols());
                   for (Index r = 0; r < xhat.rows(); ++r) {
                     const double m1 = dxhat.row(r).sum() * inv_n;
                     const double m2 = dxhat.row(r).dot(xhat.row(r)) * inv_n;
                     dx.row(r) = (*rstd)(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                   }
                   accumulate(xn, dx);
                 });
}

Tensor softmax_rows(const Tensor& a) {
  Matrix out = kernels::softmax_rows(a.value());
  return A::make("softmax_rows", std::move(out), {&a}, [](Node& self) {
    const Matrix& y = self.value;
    Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
    accumulate(*self.inputs[0], y.cwiseProduct(self.grad - dots.replicate(1, y.cols())));
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  Matrix out = kernels::log_softmax_rows(a.value());
  return A::make("log_softmax_rows", std::move(out), {&a}, [](Node& self) {
    Matrix p = self.value.array().exp();
    Eigen::VectorXd sums = self.grad.rowwise().sum();
    accumulate(*self.inputs[0], self.grad - p.cwiseProduct(sums.replicate(1, p.cols())));
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows())
      throw ContractError("embedding_lookup: id " + std::to_string(ids[i]) + " out of range for " +
                          dims(tv));
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> rows(ids.begin(), ids.end());
  return A::make("embedding_lookup", std::move(out), {&table},
                 [rows = std::move(rows)](Node& self) {
                   Node& t = *self.inputs[0];
                   if (!t.requires_grad) return;
                   Matrix& g = grad_buffer(t);
                   for (std::size_t i = 0; i < rows.size(); ++i)
                     g.row(rows[i]) += self.grad.row(static_cast<Index>(i));
                 });
}

Tensor sum(const Tensor& a) {
  return A::make("sum", Matrix::Constant(1, 1, a.value().sum()), {&a}, [](Node& self) {
    Node& x = *self.inputs[0];
    accumulate(x, Matrix::Constant(x.value.rows(), x.value.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.size());
  return A::make("mean", Matrix::Constant(1, 1, a.value().sum() / n), {&a}, [n](Node& self) {
    Node& x = *self.inputs[0];
    accumulate(x, Matrix::Constant(x.value.rows(), x.value.cols(), self.grad(0, 0) / n));
  });
}

Tensor detach(const Tensor& a) { return Tensor(a.value(), false); }

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<Matrix>(a.rows(), a.cols());
  for (Index i = 0; i < mask->size(); ++i)
    mask->data()[i] = rng.uniform() >= rate ? keep_scale : 0.0;
  return A::make("dropout", a.value().cwiseProduct(*mask), {&a},
                 [mask](Node& self) { accumulate(*self.inputs[0], self.grad.cwiseProduct(*mask)); });
}

Tensor select_rows(const Tensor& a, const Tensor& b, std::span<const std::uint8_t> take_b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("select_rows", av, bv);
  if (static_cast<Index>(take_b.size()) != av.rows())
    throw DimensionError("select_rows: mask length " + std::to_string(take_b.size()) +
                         " vs rows " + std::to_string(av.rows()));
  Matrix out = av;
  for (Index r = 0; r < av.rows(); ++r)
    if (take_b[static_cast<std::size_t>(r)]) out.row(r) = bv.row(r);
  std::vector<std::uint8_t> mask(take_b.begin(), take_b.end());
  return A::make("select_rows", std::move(out), {&a, &b}, [mask = std::move(mask)](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    for (Index r = 0; r < self.grad.rows(); ++r) {
      Node& target = mask[static_cast<std::size_t>(r)] ? y : x;
      if (target.requires_grad) grad_buffer(target).row(r) += self.grad.row(r);
    }
  });
}

Tensor sparsemax_rows(const Tensor& a) {
  Matrix out = kernels::sparsemax_rows(a.value());
  return A::make("sparsemax_rows", std::move(out), {&a}, [](Node& self) {
    const Matrix& p = self.value;
    Matrix dx = Matrix::Zero(p.rows(), p.cols());
    for (Index r = 0; r < p.rows(); ++r) {
      double total = 0.0;
      Index support = 0;
      for (Index c = 0; c < p.cols(); ++c)
        if (p(r, c) > 0.0) {
          total += self.grad(r, c);
          ++support;
        }
      const double avg = total / static_cast<double>(support);
      for (Index c = 0; c < p.cols(); ++c)
        if (p(r, c) > 0.0) dx(r, c) = self.grad(r, c) - avg;
    }
    accumulate(*self.inputs[0], dx);
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> pad_mask) {
  const Matrix& lv = logits.value();
  if (static_cast<Index>(targets.size()) != lv.rows() || pad_mask.size() != targets.size())
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets, " +
                         std::to_string(pad_mask.size()) + " mask entries for logits " + dims(lv));
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (pad_mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= lv.cols())
      throw ContractError("cross_entropy: target " + std::to_string(targets[i]) +
                          " out of range for vocabulary " + std::to_string(lv.cols()));
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: degenerate batch, every position is padding");
  Matrix logp = kernels::log_softmax_rows(lv);
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (!pad_mask[i]) total -= logp(static_cast<Index>(i), targets[i]);
  const double denom = static_cast<double>(count);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> pad(pad_mask.begin(), pad_mask.end());
  auto probs = std::make_shared<Matrix>(logp.array().exp().matrix());
  return A::make("cross_entropy", Matrix::Constant(1, 1, total / denom), {&logits},
                 [probs, tgt = std::move(tgt), pad = std::move(pad), denom](Node& self) {
                   Node& x = *self.inputs[0];
                   if (!x.requires_grad) return;
                   const double g = self.grad(0, 0) / denom;
                   Matrix& dx = grad_buffer(x);
                   for (std::size_t i = 0; i < tgt.size(); ++i) {
                     if (pad[i]) continue;
                     const auto r = static_cast<Index>(i);
                     dx.row(r) += g * probs->row(r);
                     dx(r, tgt[i]) -= g;
                   }
                 });
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttentionLayout& layout) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  const Index B = layout.batch;
  const Index Tq = layout.query_len;
  const Index Tk = layout.key_len;
  const Index H = layout.heads;
  if (qv.rows() != B * Tq || kv.rows() != B * Tk || vv.rows() != B * Tk)
    throw DimensionError("attention: rows " + dims(qv) + ", " + dims(kv) + ", " + dims(vv) +
                         " do not match layout batch " + std::to_string(B) + " x (" +
                         std::to_string(Tq) + ", " + std::to_string(Tk) + ")");
  if (kv.cols() != qv.cols() || vv.cols() != qv.cols()) shape_error("attention", qv, kv);
  if (H < 1 || qv.cols() % H != 0)
    throw DimensionError("attention: width " + std::to_string(qv.cols()) +
                         " not divisible by heads " + std::to_string(H));
  if (!layout.key_valid.empty() && static_cast<Index>(layout.key_valid.size()) != B * Tk)
    throw DimensionError("attention: key mask length mismatch");
  const Index dh = qv.cols() / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(static_cast<std::size_t>(B * H));
  Matrix out(B * Tq, qv.cols());
  for (Index b = 0; b < B; ++b) {
    for (Index h = 0; h < H; ++h) {
      auto qb = qv.block(b * Tq, h * dh, Tq, dh);
      auto kb = kv.block(b * Tk, h * dh, Tk, dh);
      auto vb = vv.block(b * Tk, h * dh, Tk, dh);
      Matrix p = (qb * kb.transpose()) * inv_sqrt;
      for (Index i = 0; i < Tq; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < Tk; ++j)
          if (layout.allowed(b, i, j)) m = std::max(m, p(i, j));
        if (m == -std::numeric_limits<double>::infinity())
          throw ContractError("attention: query " + std::to_string(i) + " of sequence " +
                              std::to_string(b) + " has every key masked");
        double z = 0.0;
        for (Index j = 0; j < Tk; ++j) {
          p(i, j) = layout.allowed(b, i, j) ? std::exp(p(i, j) - m) : 0.0;
          z += p(i, j);
        }
        p.row(i) /= z;
      }
      out.block(b * Tq, h * dh, Tq, dh).noalias() = p * vb;
      probs->push_back(std::move(p));
    }
  }
  return A::make("attention", std::move(out), {&q, &k, &v},
                 [probs, B, Tq, Tk, H, dh, inv_sqrt](Node& self) {
                   Node& qn = *self.inputs[0];
                   Node& kn = *self.inputs[1];
                   Node& vn = *self.inputs[2];
                   Matrix dq = Matrix::Zero(qn.value.rows(), qn.value.cols());
                   Matrix dk = Matrix::Zero(kn.value.rows(), kn.value.cols());
                   Matrix dv = Matrix::Zero(vn.value.rows(), vn.value.cols());
                   for (Index b = 0; b < B; ++b) {
                     for (Index h = 0; h < H; ++h) {
                       const Matrix& p = (*probs)[static_cast<std::size_t>(b * H + h)];
                       auto go = self.grad.block(b * Tq, h * dh, Tq, dh);
                       auto qb = qn.value.block(b * Tq, h * dh, Tq, dh);
                       auto kb = kn.value.block(b * Tk, h * dh, Tk, dh);
                       auto vb = vn.value.block(b * Tk, h * dh, Tk, dh);
                       dv.block(b * Tk, h * dh, Tk, dh).noalias() += p.transpose() * go;
                       Matrix dp = go * vb.transpose();
                       Eigen::VectorXd dots = dp.cwiseProduct(p).rowwise().sum();
                       Matrix ds = p.cwiseProduct(dp - dots.replicate(1, Tk)) * inv_sqrt;
                       dq.block(b * Tq, h * dh, Tq, dh).noalias() += ds * kb;
                       dk.block(b * Tk, h * dh, Tk, dh).noalias() += ds.transpose() * qb;
                     }
                   }
                   accumulate(qn, dq);
                   accumulate(kn, dk);
                   accumulate(vn, dv);
                 });
}

// --- backward ----------------------------------------------------------------

void backward(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_string(loss));
  Node* root = &A::node(loss);
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs)
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  for (Node* n : order)
    if (!n->inputs.empty()) n->has_grad = false;

  accumulate(*root, Matrix::Constant(1, 1, 1.0));
  for (Node* n : order)
    if (n->backward && n->has_grad) n->backward(*n);
}

// --- gradient checking -----------------------------------------------------

GradCheckResult grad_check(const ScalarFunction& f, std::span<const Tensor> point, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  for (const Tensor& t : point)
    if (!t.is_leaf() || !t.requires_grad())
      throw ContractError("grad_check: point tensors must be leaves that require grad");

  for (Tensor t : point) t.zero_grad();
  const Tensor out = f(point);
  if (out.rows() != 1 || out.cols() != 1)
    throw ContractError("grad_check: function output must be scalar, got " + shape_string(out));
  backward(out);

  std::vector<Matrix> analytic;
  for (const Tensor& t : point)
    analytic.push_back(t.has_grad() ? t.grad() : Matrix::Zero(t.rows(), t.cols()));

  auto eval = [&] {
    NoGradGuard guard;
    const Tensor y = f(point);
    if (y.rows() != 1 || y.cols() != 1)
      throw ContractError("grad_check: function output must be scalar");
    return y.item();
  };

  GradCheckResult result;
  for (std::size_t ti = 0; ti < point.size(); ++ti) {
    Tensor t = point[ti];
    Matrix& values = t.mutable_value();
    for (Index i = 0; i < values.size(); ++i) {
      const double original = values.data()[i];
      values.data()[i] = original + step;
      const double plus = eval();
      values.data()[i] = original - step;
      const double minus = eval();
      values.data()[i] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[ti].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_relative_error) result = {rel, ti, i, a, numeric};
    }
  }
  return result;
}

}  // namespace sstx
