// Small neural-network building blocks on top of the autodiff tape.

#pragma once

#include "afn/autodiff.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace afn::nn {

using ad::Matrix;
using ad::Parameter;
using ad::ParamList;
using ad::Tape;
using ad::Var;

using Rng = std::mt19937_64;

enum class Activation { kNone, kTanh, kElu, kSigmoid };

Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng);

class Dense {
 public:
  Dense() = default;
  Dense(std::string name, Eigen::Index in, Eigen::Index out, Rng& rng);

  Var operator()(Tape& tape, const Var& x) const;

  Eigen::Index in() const { return weight_.value.rows(); }
  Eigen::Index out() const { return weight_.value.cols(); }
  void collect(ParamList& out);
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
};

/// Stack of dense layers: hidden layers use `hidden_act`, the last layer is linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, Eigen::Index in, const std::vector<int>& hidden, Eigen::Index out,
      Activation hidden_act, Rng& rng);

  Var operator()(Tape& tape, const Var& x) const;
  void collect(ParamList& out);
  Eigen::Index in() const { return layers_.front().in(); }
  Eigen::Index out() const { return layers_.back().out(); }

 private:
  std::vector<Dense> layers_;
  Activation act_ = Activation::kTanh;
};

struct LstmState {
  Var h;
  Var c;
};

/// Single LSTM layer with gate order (input, forget, cell, output).
class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng);

  LstmState step(Tape& tape, const Var& x, const LstmState& prev) const;
  LstmState zero_state(Tape& tape, Eigen::Index batch) const;
  Eigen::Index hidden() const { return hidden_; }
  Eigen::Index in() const { return wx_.value.rows(); }
  void collect(ParamList& out);

 private:
  Parameter wx_;
  Parameter wh_;
  Parameter bias_;
  Eigen::Index hidden_ = 0;
};

Var apply_activation(const Var& x, Activation act);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;  // global gradient norm clip; <= 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update to every parameter and zeroes their gradients.
  void step(const ParamList& params, double lr_scale = 1.0);
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
  };
  AdamConfig cfg_;
  std::map<const Parameter*, Moments> moments_;
  std::int64_t t_ = 0;
};

void zero_grad(const ParamList& params);
double grad_norm(const ParamList& params);

// Weight bundles are flat name -> matrix maps.
nlohmann::json to_json(const ParamList& params);
/// Copies values by name; throws if a name is missing or shapes disagree.
void from_json(const nlohmann::json& j, const ParamList& params);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace afn::nn
