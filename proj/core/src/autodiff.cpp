#include "afn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace afn::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.value = p.value;
  n.needs_grad = !inference_;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Matrix value, std::initializer_list<int> parents, BackwardFn fn) {
  return record(std::move(value), std::vector<int>(parents), std::move(fn));
}

Var Tape::record(Matrix value, const std::vector<int>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) {
    if (nodes_[static_cast<size_t>(p)].needs_grad) {
      n.needs_grad = true;
      break;
    }
  }
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_ready) {
    n.grad.setZero(n.value.rows(), n.value.cols());
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw std::invalid_argument("backward: loss must be a 1x1 scalar");
  }
  const int root = loss.id();
  if (!nodes_[static_cast<size_t>(root)].needs_grad) return;
  grad(root)(0, 0) += 1.0;
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad || !n.grad_ready) continue;
    if (n.param != nullptr) {
      auto [it, inserted] = param_grads_.try_emplace(n.param, n.grad);
      if (!inserted) it->second += n.grad;
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

const Matrix* Tape::param_grad(const Parameter& p) const {
  auto it = param_grads_.find(&p);
  return it == param_grads_.end() ? nullptr : &it->second;
}

void Tape::accumulate(const ParamList& params) const {
  for (Parameter* p : params) {
    if (const Matrix* g = param_grad(*p)) p->grad += *g;
  }
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) += g;
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) -= g;
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: expected 1 x cols row");
  }
  Tape& t = a.tape();
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.record(std::move(out), {ia, ir}, [ia, ir](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw std::invalid_argument("mul_col: expected rows x 1 column");
  }
  Tape& t = a.tape();
  const int ia = a.id(), ic = col.id();
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return t.record(std::move(out), {ia, ic}, [ia, ic](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) {
      t.grad(ia).array() += g.array().colwise() * t.value(ic).col(0).array();
    }
    if (t.needs_grad(ic)) {
      t.grad(ic) += g.cwiseProduct(t.value(ia)).rowwise().sum();
    }
  });
}

Var scale(const Var& a, double s) {
  Tape& t = a.tape();
  const int ia = a.id();
  return t.record(a.value() * s, {ia}, [ia, s](Tape& t, int self) {
    t.grad(ia) += t.grad(self) * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().array() + s;
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) { t.grad(ia) += t.grad(self); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var tanh(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().array().tanh();
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.grad(ia).array() += t.grad(self).array() * (1.0 - y.array().square());
  });
}

Var sigmoid(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.grad(ia).array() += t.grad(self).array() * y.array() * (1.0 - y.array());
  });
}

Var exp(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().array().exp();
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad(ia).array() += t.grad(self).array() * t.value(self).array();
  });
}

Var log(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().array().log();
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad(ia).array() += t.grad(self).array() / t.value(ia).array();
  });
}

Var softplus(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
  });
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix s = t.value(ia).unaryExpr([](double x) {
      if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
      const double e = std::exp(x);
      return e / (1.0 + e);
    });
    t.grad(ia) += t.grad(self).cwiseProduct(s);
  });
}

Var square(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().array().square();
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad(ia).array() += 2.0 * t.grad(self).array() * t.value(ia).array();
  });
}

Var elu(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return x > 0 ? x : std::expm1(x); });
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(self);
    const Matrix d = x.binaryExpr(y, [](double xi, double yi) { return xi > 0 ? 1.0 : yi + 1.0; });
    t.grad(ia) += t.grad(self).cwiseProduct(d);
  });
}

Var sum(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().rowwise().sum();
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad(ia).colwise() += t.grad(self).col(0);
  });
}

Var row_norm(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value().rowwise().norm();
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix& n = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (n(i, 0) > 0.0) ga.row(i) += (g(i, 0) / n(i, 0)) * x.row(i);
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    offsets.push_back(cols);
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  for (size_t k = 0; k < parts.size(); ++k) {
    out.middleCols(offsets[k], parts[k].cols()) = parts[k].value();
  }
  return t.record(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    for (size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      Matrix& gk = t.grad(ids[k]);
      gk += g.middleCols(offsets[k], gk.cols());
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    offsets.push_back(rows);
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  for (size_t k = 0; k < parts.size(); ++k) {
    out.middleRows(offsets[k], parts[k].rows()) = parts[k].value();
  }
  return t.record(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    for (size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      Matrix& gk = t.grad(ids[k]);
      gk += g.middleRows(offsets[k], gk.rows());
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  Tape& t = a.tape();
  const int ia = a.id();
  return t.record(a.value().middleCols(start, count), {ia}, [ia, start, count](Tape& t, int self) {
    t.grad(ia).middleCols(start, count) += t.grad(self);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  Tape& t = a.tape();
  const int ia = a.id();
  return t.record(a.value().middleRows(start, count), {ia}, [ia, start, count](Tape& t, int self) {
    t.grad(ia).middleRows(start, count) += t.grad(self);
  });
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  Tape& t = a.tape();
  const int ia = a.id();
  const Matrix& src = a.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= src.rows()) throw std::out_of_range("gather_rows");
    out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var pick(const Var& a, std::span<const int> cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows()) {
    throw std::invalid_argument("pick: one column index per row required");
  }
  Tape& t = a.tape();
  const int ia = a.id();
  const Matrix& src = a.value();
  Matrix out(src.rows(), 1);
  for (Eigen::Index i = 0; i < src.rows(); ++i) out(i, 0) = src(i, cols[static_cast<size_t>(i)]);
  std::vector<int> idx(cols.begin(), cols.end());
  return t.record(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (size_t i = 0; i < idx.size(); ++i) {
      ga(static_cast<Eigen::Index>(i), idx[i]) += g(static_cast<Eigen::Index>(i), 0);
    }
  });
}

Var stop_gradient(const Var& a) { return a.tape().constant(a.value()); }

Var softmax_rows(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const Vector dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = g;
    d.colwise() -= dot;
    t.grad(ia) += d.cwiseProduct(y);
  });
}

Var log_softmax_rows(const Var& a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    const double lse = mx + std::log((out.row(i).array() - mx).exp().sum());
    out.row(i).array() -= lse;
  }
  return t.record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const Vector gs = g.rowwise().sum();
    Matrix p = y.array().exp();
    p.array().colwise() *= gs.array();
    t.grad(ia) += g - p;
  });
}

Var sq_dist(const Var& z, const Var& c) {
  if (z.cols() != c.cols()) throw std::invalid_argument("sq_dist: dimension mismatch");
  Tape& t = z.tape();
  const int iz = z.id(), ic = c.id();
  const Matrix& zv = z.value();
  const Matrix& cv = c.value();
  Matrix out = (-2.0 * zv * cv.transpose());
  out.colwise() += zv.rowwise().squaredNorm();
  out.rowwise() += cv.rowwise().squaredNorm().transpose();
  out = out.cwiseMax(0.0);
  return t.record(std::move(out), {iz, ic}, [iz, ic](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& zv = t.value(iz);
    const Matrix& cv = t.value(ic);
    // d/dz_i = 2 sum_k g_ik (z_i - c_k); d/dc_k = 2 sum_i g_ik (c_k - z_i)
    if (t.needs_grad(iz)) {
      Matrix& gz = t.grad(iz);
      gz += 2.0 * (zv.array().colwise() * g.rowwise().sum().array()).matrix();
      gz.noalias() -= 2.0 * g * cv;
    }
    if (t.needs_grad(ic)) {
      Matrix& gc = t.grad(ic);
      gc += 2.0 * (cv.array().colwise() * g.colwise().sum().transpose().array()).matrix();
      gc.noalias() -= 2.0 * g.transpose() * zv;
    }
  });
}

AttentionResult additive_attention(const Var& keys, const Var& values, const Var& query,
                                   const Var& v, Eigen::Index batch, Eigen::Index length) {
  const Eigen::Index attn = keys.cols();
  const Eigen::Index hidden = values.cols();
  if (length < 1 || keys.rows() < length * batch || values.rows() < length * batch) {
    throw std::invalid_argument("additive_attention: not enough key blocks");
  }
  if (query.rows() != batch || query.cols() != attn || v.rows() != attn || v.cols() != 1) {
    throw std::invalid_argument("additive_attention: query/v shape mismatch");
  }
  Tape& t = keys.tape();
  const Matrix& K = keys.value();
  const Matrix& V = values.value();
  const Matrix& Q = query.value();

  // score(b, s) = v . tanh(K_s[b] + Q[b]), one block of `batch` rows per step
  Matrix weights(batch, length);
  for (Eigen::Index s = 0; s < length; ++s) {
    weights.col(s) = (K.middleRows(s * batch, batch) + Q).array().tanh().matrix() * v.value();
  }
  const Vector mx = weights.rowwise().maxCoeff();
  weights = (weights.colwise() - mx).array().exp();
  const Vector norm = weights.rowwise().sum();
  weights.array().colwise() /= norm.array();
  Matrix context = Matrix::Zero(batch, hidden);
  for (Eigen::Index s = 0; s < length; ++s) {
    context += weights.col(s).asDiagonal() * V.middleRows(s * batch, batch);
  }

  const int ik = keys.id(), ival = values.id(), iq = query.id(), iv = v.id();
  Var out = t.record(context, {ik, ival, iq, iv},
                     [ik, ival, iq, iv, batch, length, weights](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& K = t.value(ik);
    const Matrix& V = t.value(ival);
    const Matrix& Q = t.value(iq);
    const Matrix& vm = t.value(iv);
    const bool gk = t.needs_grad(ik), gval = t.needs_grad(ival), gq = t.needs_grad(iq),
               gv = t.needs_grad(iv);
    // d context / d weight_s = V_s; softmax backward gives d score.
    Matrix dw(batch, length);
    for (Eigen::Index s = 0; s < length; ++s) {
      dw.col(s) = (g.array() * V.middleRows(s * batch, batch).array()).rowwise().sum();
    }
    const Vector wdot = (dw.array() * weights.array()).rowwise().sum();
    const Matrix de = weights.array() * (dw.colwise() - wdot).array();
    for (Eigen::Index s = 0; s < length; ++s) {
      if (gval) t.grad(ival).middleRows(s * batch, batch) += weights.col(s).asDiagonal() * g;
      const Matrix th = (K.middleRows(s * batch, batch) + Q).array().tanh();
      if (gv) t.grad(iv) += th.transpose() * de.col(s);
      if (!gk && !gq) continue;
      const Matrix dpre = de.col(s).asDiagonal() *
                          ((1.0 - th.array().square()).rowwise() * vm.col(0).transpose().array()).matrix();
      if (gk) t.grad(ik).middleRows(s * batch, batch) += dpre;
      if (gq) t.grad(iq) += dpre;
    }
  });
  return {out, std::move(weights)};
}

}  // namespace afn::ad
