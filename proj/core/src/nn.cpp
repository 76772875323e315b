#include "afn/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace afn::nn {

Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix w(fan_in, fan_out);
  for (Eigen::Index j = 0; j < fan_out; ++j) {
    for (Eigen::Index i = 0; i < fan_in; ++i) w(i, j) = dist(rng);
  }
  return w;
}

Dense::Dense(std::string name, Eigen::Index in, Eigen::Index out, Rng& rng)
    : weight_(name + ".weight", xavier_uniform(in, out, rng)),
      bias_(name + ".bias", Matrix::Zero(1, out)) {}

Var Dense::operator()(Tape& tape, const Var& x) const {
  return ad::add_row(ad::matmul(x, tape.param(weight_)), tape.param(bias_));
}

void Dense::collect(ParamList& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Mlp::Mlp(const std::string& name, Eigen::Index in, const std::vector<int>& hidden,
         Eigen::Index out, Activation hidden_act, Rng& rng)
    : act_(hidden_act) {
  Eigen::Index prev = in;
  for (size_t i = 0; i < hidden.size(); ++i) {
    layers_.emplace_back(name + "." + std::to_string(i), prev, hidden[i], rng);
    prev = hidden[i];
  }
  layers_.emplace_back(name + "." + std::to_string(hidden.size()), prev, out, rng);
}

Var Mlp::operator()(Tape& tape, const Var& x) const {
  Var h = x;
  for (size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](tape, h);
    if (i + 1 < layers_.size()) h = apply_activation(h, act_);
  }
  return h;
}

void Mlp::collect(ParamList& out) {
  for (Dense& l : layers_) l.collect(out);
}

LstmCell::LstmCell(const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng)
    : wx_(name + ".wx", xavier_uniform(in, 4 * hidden, rng)),
      wh_(name + ".wh", xavier_uniform(hidden, 4 * hidden, rng)),
      bias_(name + ".bias", Matrix::Zero(1, 4 * hidden)),
      hidden_(hidden) {
  // forget-gate bias of 1
  bias_.value.middleCols(hidden, hidden).setOnes();
}

LstmState LstmCell::step(Tape& tape, const Var& x, const LstmState& prev) const {
  Var gates = ad::add_row(
      ad::add(ad::matmul(x, tape.param(wx_)), ad::matmul(prev.h, tape.param(wh_))),
      tape.param(bias_));
  Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden_));
  Var f = ad::sigmoid(ad::slice_cols(gates, hidden_, hidden_));
  Var g = ad::tanh(ad::slice_cols(gates, 2 * hidden_, hidden_));
  Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden_, hidden_));
  Var c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
  Var h = ad::mul(o, ad::tanh(c));
  return {h, c};
}

LstmState LstmCell::zero_state(Tape& tape, Eigen::Index batch) const {
  return {tape.constant(Matrix::Zero(batch, hidden_)), tape.constant(Matrix::Zero(batch, hidden_))};
}

void LstmCell::collect(ParamList& out) {
  out.push_back(&wx_);
  out.push_back(&wh_);
  out.push_back(&bias_);
}

Var apply_activation(const Var& x, Activation act) {
  switch (act) {
    case Activation::kNone: return x;
    case Activation::kTanh: return ad::tanh(x);
    case Activation::kElu: return ad::elu(x);
    case Activation::kSigmoid: return ad::sigmoid(x);
  }
  return x;
}

void zero_grad(const ParamList& params) {
  for (Parameter* p : params) p->zero_grad();
}

double grad_norm(const ParamList& params) {
  double s = 0.0;
  for (const Parameter* p : params) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

void Adam::step(const ParamList& params, double lr_scale) {
  ++t_;
  double clip = 1.0;
  if (cfg_.clip_norm > 0.0) {
    const double n = grad_norm(params);
    if (n > cfg_.clip_norm) clip = cfg_.clip_norm / n;
  }
  const double lr = cfg_.learning_rate * lr_scale;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* p : params) {
    auto [it, inserted] = moments_.try_emplace(p);
    Moments& mo = it->second;
    if (inserted) {
      mo.m = Matrix::Zero(p->value.rows(), p->value.cols());
      mo.v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    const Matrix g = p->grad * clip;
    mo.m = cfg_.beta1 * mo.m + (1.0 - cfg_.beta1) * g;
    mo.v = cfg_.beta2 * mo.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    p->value.array() -=
        lr * (mo.m.array() / bc1) / ((mo.v.array() / bc2).sqrt() + cfg_.epsilon);
    p->zero_grad();
  }
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw std::runtime_error("matrix_from_json: data length does not match shape");
  }
  Matrix m(rows, cols);
  size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = data[k++].get<double>();
  }
  return m;
}

nlohmann::json to_json(const ParamList& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const Parameter* p : params) j[p->name] = matrix_to_json(p->value);
  return j;
}

void from_json(const nlohmann::json& j, const ParamList& params) {
  for (Parameter* p : params) {
    if (!j.contains(p->name)) throw std::runtime_error("weight bundle missing " + p->name);
    Matrix m = matrix_from_json(j.at(p->name));
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw std::runtime_error("weight bundle shape mismatch for " + p->name);
    }
    p->value = std::move(m);
    p->zero_grad();
  }
}

}  // namespace afn::nn
