#include "afn/ifm.hpp"

#include "afn/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace afn::ifm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

Matrix onehot_rows(const std::vector<tm::Condition>& conds, int rho) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(conds.size()), rho);
  for (size_t i = 0; i < conds.size(); ++i) out(static_cast<Eigen::Index>(i), conds[i].discrete) = 1.0;
  return out;
}

int argmax(const RowVector& r) {
  Eigen::Index k = 0;
  r.maxCoeff(&k);
  return static_cast<int>(k);
}

}  // namespace

Ablation Ablation::from_name(const std::string& name) {
  Ablation a;
  if (name == "none" || name.empty()) return a;
  if (name == "tm") a.tm = false;
  else if (name == "al") a.attention = false;
  else if (name == "df") a.damping = false;
  else if (name == "fft") a.fft = false;
  else throw ConfigError("unknown ablation '" + name + "' (expected none|tm|al|df|fft)");
  return a;
}

std::string Ablation::name() const {
  if (!tm) return "tm";
  if (!attention) return "al";
  if (!damping) return "df";
  if (!fft) return "fft";
  return "none";
}

ModelConfig ModelConfig::defaults(int d) {
  ModelConfig c;
  c.vae.d = d;
  c.vae.rho = c.tm.rho;
  c.vae.m = d > 16 ? 16 : std::max(1, d / 2);
  return c;
}

ModelConfig ModelConfig::desk(int d) {
  ModelConfig c = defaults(d);
  c.tm.dmm_hidden = {64, 32};
  c.tm.max_windows = 8000;
  c.tm.M = 5;
  c.vae.encoder_hidden = {64, 64, 128};
  c.vae.decoder_hidden = {128, 64, 64};
  c.lstm_hidden = 32;
  c.damping_hidden = {16, 8};
  c.train.vae_warmup_epochs = 15;
  c.train.stage_a_epochs = 8;
  c.train.stage_b_epochs = 20;
  c.train.stage_c_epochs = 8;
  c.train.crop_length = 32;
  c.train.crops_per_series = 2;
  return c;
}

void ModelConfig::validate() const {
  if (vae.d < 2) throw ConfigError("model: need d >= 2");
  if (vae.m >= vae.d) throw ConfigError("model: latent dimension m must be below d");
  if (vae.rho != tm.rho) throw ConfigError("model: vae.rho must equal tm.rho");
  if (lstm_hidden < 1) throw ConfigError("model: lstm_hidden must be positive");
  if (var_floor <= 0.0) throw ConfigError("model: var_floor must be positive");
  if (train.batch_size < 1) throw ConfigError("model: batch_size must be positive");
  if (train.fft_horizon < 1) throw ConfigError("model: fft_horizon must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"tm", tm.to_json()},
          {"vae", vae.to_json()},
          {"lstm_hidden", lstm_hidden},
          {"damping_hidden", damping_hidden},
          {"eta", eta},
          {"tau_w", tau_w},
          {"damping_reg", damping_reg},
          {"var_floor", var_floor},
          {"ablation", ablation.name()},
          {"train",
           {{"batch_size", train.batch_size},
            {"vae_warmup_epochs", train.vae_warmup_epochs},
            {"stage_a_epochs", train.stage_a_epochs},
            {"stage_b_epochs", train.stage_b_epochs},
            {"stage_c_epochs", train.stage_c_epochs},
            {"damping_warmup_epochs", train.damping_warmup_epochs},
            {"learning_rate", train.learning_rate},
            {"fft_lr_scale", train.fft_lr_scale},
            {"fft_horizon", train.fft_horizon},
            {"crop_length", train.crop_length},
            {"crops_per_series", train.crops_per_series},
            {"seed", train.seed}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("tm")) c.tm = tm::TmConfig::from_json(j.at("tm"));
  if (j.contains("vae")) {
    c.vae = som::ConvaeConfig::from_json(j.at("vae"));
  } else {
    throw ConfigError("model config needs a 'vae' section with at least d");
  }
  c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
  c.damping_hidden = j.value("damping_hidden", c.damping_hidden);
  c.eta = j.value("eta", c.eta);
  c.tau_w = j.value("tau_w", c.tau_w);
  c.damping_reg = j.value("damping_reg", c.damping_reg);
  c.var_floor = j.value("var_floor", c.var_floor);
  c.ablation = Ablation::from_name(j.value("ablation", std::string("none")));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.vae_warmup_epochs = t.value("vae_warmup_epochs", c.train.vae_warmup_epochs);
    c.train.stage_a_epochs = t.value("stage_a_epochs", c.train.stage_a_epochs);
    c.train.stage_b_epochs = t.value("stage_b_epochs", c.train.stage_b_epochs);
    c.train.stage_c_epochs = t.value("stage_c_epochs", c.train.stage_c_epochs);
    c.train.damping_warmup_epochs = t.value("damping_warmup_epochs", c.train.damping_warmup_epochs);
    c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
    c.train.fft_lr_scale = t.value("fft_lr_scale", c.train.fft_lr_scale);
    c.train.fft_horizon = t.value("fft_horizon", c.train.fft_horizon);
    c.train.crop_length = t.value("crop_length", c.train.crop_length);
    c.train.crops_per_series = t.value("crops_per_series", c.train.crops_per_series);
    c.train.seed = t.value("seed", c.train.seed);
  }
  c.validate();
  return c;
}

// ---- model ------------------------------------------------------------------

AfnModel::AfnModel(const ModelConfig& cfg, std::optional<tm::TransitionModel> tm, NormStats norm,
                   std::vector<std::string> feature_names)
    : cfg_(cfg), tm_(std::move(tm)), vae_(cfg.vae), norm_(std::move(norm)),
      feature_names_(std::move(feature_names)) {
  cfg_.validate();
  if (cfg_.ablation.tm && !tm_) throw PreconditionError("model needs a transition model unless TM is ablated");
  if (!cfg_.ablation.tm) tm_.reset();
  if (static_cast<int>(feature_names_.size()) != cfg_.vae.d) {
    throw PreconditionError("model: feature names do not match d");
  }
  nn::Rng rng(cfg_.train.seed ^ 0x1F4A3C5Dull);
  const int H = cfg_.lstm_hidden, m = cfg_.vae.m;
  lstm_ = nn::LstmCell("ifm.lstm", 2 * m + cfg_.vae.rho, H, rng);
  key_ = nn::Dense("ifm.att.key", H, H, rng);
  query_ = nn::Dense("ifm.att.query", H, H, rng);
  score_ = ad::Parameter("ifm.att.score", nn::xavier_uniform(H, 1, rng));
  const int feat = cfg_.ablation.attention ? 2 * H : H;
  mean_head_ = nn::Dense("ifm.head.mean", feat, m, rng);
  var_head_ = nn::Dense("ifm.head.var", feat, m, rng);
  damp_ = nn::Mlp("ifm.damp", 2 * cfg_.tm.K, cfg_.damping_hidden, 1, nn::Activation::kTanh, rng);
}

const tm::TransitionModel& AfnModel::tm() const {
  if (!tm_) throw UnsupportedError("transition module is ablated");
  return *tm_;
}

tm::TransitionModel& AfnModel::tm() {
  if (!tm_) throw UnsupportedError("transition module is ablated");
  return *tm_;
}

int AfnModel::min_history() const { return tm_ ? tm_->tau() : 1; }

tm::Condition AfnModel::fixed_condition() const {
  tm::Condition c;
  c.distribution = RowVector::Zero(rho());
  c.distribution(0) = 1.0;
  c.discrete = 0;
  return c;
}

RowVector AfnModel::onehot(int condition) const {
  RowVector r = RowVector::Zero(rho());
  r(condition) = 1.0;
  return r;
}

ConditionTrack AfnModel::condition_track(const Matrix& x_norm) const {
  ConditionTrack t;
  const Eigen::Index T = x_norm.rows();
  if (!tm_) {
    t.pis = Matrix::Zero(T, cfg_.tm.K);
    t.pi_hat_next = Matrix::Zero(T, cfg_.tm.K);
    t.conditions.assign(static_cast<size_t>(T), fixed_condition());
  } else {
    t.pis = tm_->pi_path(x_norm);
    t.pi_hat_next = tm_->dmm_predict(tm_->dmm_inputs(t.pis));
    const Matrix dist = tm_->condition_dist(t.pis);
    t.conditions.resize(static_cast<size_t>(T));
    for (Eigen::Index s = 0; s < T; ++s) {
      t.conditions[static_cast<size_t>(s)] = {dist.row(s), argmax(dist.row(s))};
    }
  }
  t.onehot = onehot_rows(t.conditions, rho());
  return t;
}

std::vector<tm::Condition> AfnModel::rollout_conditions(const ConditionTrack& track, int h) const {
  std::vector<tm::Condition> out;
  if (!tm_) {
    out.assign(static_cast<size_t>(h), fixed_condition());
    return out;
  }
  const int order = tm_->config().markov_order;
  Matrix hist = track.pis.bottomRows(std::min<Eigen::Index>(order, track.pis.rows()));
  for (int k = 0; k < h; ++k) {
    const Matrix inputs = tm_->dmm_inputs(hist);
    const RowVector next = tm_->dmm_predict(Matrix(inputs.bottomRows(1))).row(0);
    out.push_back(tm_->condition_of(next));
    hist.conservativeResize(hist.rows() + 1, Eigen::NoChange);
    hist.bottomRows(1) = next;
    if (hist.rows() > order) hist = Matrix(hist.bottomRows(order));
  }
  return out;
}

double AfnModel::damping(const tm::PiVector& pi, const RowVector& pi_hat_next) const {
  if (!cfg_.ablation.damping_active()) return 1.0;
  if (pi.K() != cfg_.tm.K || pi_hat_next.size() != cfg_.tm.K) {
    throw PreconditionError("damping: pi dimension mismatch");
  }
  Tape tape(true);
  return damping(tape, tape.constant(pi.proportions), tape.constant(pi_hat_next)).scalar();
}

Var AfnModel::damping(Tape& tape, const Var& pis, const Var& pi_hat_next) const {
  const Var parts[] = {pis, pi_hat_next};
  return ad::sigmoid(damp_(tape, ad::concat_cols(parts)));
}

Var AfnModel::lstm_input(Tape& tape, const Var& z, const Var& centroids, const Var& cond) const {
  Var q = ad::exp(som::log_soft_assign(z, centroids, cfg_.vae.alpha));
  Var zq = ad::matmul(q, centroids);
  const Var parts[] = {z, zq, cond};
  return ad::concat_cols(parts);
}

nn::LstmState AfnModel::lstm_step(Tape& tape, const Var& x, const nn::LstmState& s) const {
  return lstm_.step(tape, x, s);
}

nn::LstmState AfnModel::lstm_zero(Tape& tape, Eigen::Index batch) const { return lstm_.zero_state(tape, batch); }

Var AfnModel::attention_keys(Tape& tape, const Var& hidden) const { return key_(tape, hidden); }

Var AfnModel::attention_query(Tape& tape, const Var& hidden) const { return query_(tape, hidden); }

ad::AttentionResult AfnModel::attend(Tape& tape, const Var& keys, const Var& values, const Var& query,
                                     Eigen::Index batch, Eigen::Index length) const {
  return ad::additive_attention(keys, values, query, tape.param(score_), batch, length);
}

std::pair<Var, Var> AfnModel::head(Tape& tape, const Var& features) const {
  Var mean = mean_head_(tape, features);
  Var var = ad::add_scalar(ad::softplus(var_head_(tape, features)), cfg_.var_floor);
  return {mean, var};
}

ad::ParamList AfnModel::tm_params() { return tm_ ? tm_->params() : ad::ParamList{}; }

ad::ParamList AfnModel::vae_params() { return vae_.params(); }

ad::ParamList AfnModel::forecaster_params() {
  ad::ParamList p;
  lstm_.collect(p);
  if (cfg_.ablation.attention) {
    key_.collect(p);
    query_.collect(p);
    p.push_back(&score_);
  }
  mean_head_.collect(p);
  var_head_.collect(p);
  return p;
}

ad::ParamList AfnModel::damping_params() {
  ad::ParamList p;
  damp_.collect(p);
  return p;
}

ad::ParamList AfnModel::params() {
  ad::ParamList p = tm_params();
  for (auto* q : vae_params()) p.push_back(q);
  for (auto* q : forecaster_params()) p.push_back(q);
  for (auto* q : damping_params()) p.push_back(q);
  return p;
}

nlohmann::json AfnModel::to_json() const {
  auto& self = const_cast<AfnModel&>(*this);
  ad::ParamList own = self.vae_params();
  for (auto* q : self.forecaster_params()) own.push_back(q);
  for (auto* q : self.damping_params()) own.push_back(q);
  return {{"config", cfg_.to_json()},
          {"norm_stats", norm_.to_json()},
          {"feature_names", feature_names_},
          {"tm", tm_ ? tm_->to_json() : nlohmann::json(nullptr)},
          {"weights", nn::to_json(own)}};
}

AfnModel AfnModel::from_json(const nlohmann::json& j) {
  const ModelConfig cfg = ModelConfig::from_json(j.at("config"));
  std::optional<tm::TransitionModel> tm;
  if (!j.at("tm").is_null()) tm = tm::TransitionModel::from_json(j.at("tm"));
  AfnModel model(cfg, std::move(tm), NormStats::from_json(j.at("norm_stats")),
                 j.at("feature_names").get<std::vector<std::string>>());
  ad::ParamList own = model.vae_params();
  for (auto* q : model.forecaster_params()) own.push_back(q);
  for (auto* q : model.damping_params()) own.push_back(q);
  nn::from_json(j.at("weights"), own);
  return model;
}

// ---- losses -----------------------------------------------------------------

Var gaussian_nll(const Var& target, const Var& mean, const Var& var) {
  const double m = static_cast<double>(target.cols());
  Var sq = ad::square(ad::sub(target, mean));
  Var ratio = ad::mul(sq, ad::exp(ad::neg(ad::log(var))));
  Var per = ad::add(ad::log(var), ratio);
  return ad::add_scalar(ad::scale(ad::row_sum(per), 0.5), 0.5 * m * kLog2Pi);
}

Var pred_loss(const Var& nll, const Var& damping, double batch) {
  return ad::scale(ad::sum(ad::mul(nll, damping)), 1.0 / batch);
}

double pred_loss(const Matrix& nll, const Matrix& damping) {
  if (nll.rows() != damping.rows() || nll.cols() != damping.cols()) {
    throw PreconditionError("pred_loss: shape mismatch");
  }
  return nll.cwiseProduct(damping).sum();
}

double forecast_fine_tune_loss(const RowVector& x_next, const RowVector& x_hat_next) {
  if (x_next.size() != x_hat_next.size()) throw PreconditionError("forecast loss: shape mismatch");
  return (x_next - x_hat_next).norm();
}

namespace {

struct Unroll {
  std::vector<nn::LstmState> states;
  Var hidden;  // steps*B x H
  Var keys;
  Var mean;    // steps*B x m
  Var var;
  Matrix last_weights;  // B x steps
};

Unroll unroll(Tape& tape, const AfnModel& model, const Var& inputs, Eigen::Index B, Eigen::Index steps) {
  Unroll u;
  nn::LstmState s = model.lstm_zero(tape, B);
  std::vector<Var> hs;
  hs.reserve(static_cast<size_t>(steps));
  for (Eigen::Index t = 0; t < steps; ++t) {
    s = model.lstm_step(tape, ad::slice_rows(inputs, t * B, B), s);
    u.states.push_back(s);
    hs.push_back(s.h);
  }
  u.hidden = ad::concat_rows(hs);
  Var features = u.hidden;
  if (model.ablation().attention) {
    u.keys = model.attention_keys(tape, u.hidden);
    Var queries = model.attention_query(tape, u.hidden);
    std::vector<Var> ctx;
    ctx.reserve(static_cast<size_t>(steps));
    for (Eigen::Index t = 0; t < steps; ++t) {
      auto r = model.attend(tape, u.keys, u.hidden, ad::slice_rows(queries, t * B, B), B, t + 1);
      ctx.push_back(r.context);
      if (t + 1 == steps) u.last_weights = std::move(r.weights);
    }
    const Var parts[] = {u.hidden, ad::concat_rows(ctx)};
    features = ad::concat_cols(parts);
  }
  std::tie(u.mean, u.var) = model.head(tape, features);
  return u;
}

struct RollStep {
  nn::LstmState state;
  Var mean;
  Matrix weights;
};

RollStep roll_step(Tape& tape, const AfnModel& model, const Unroll& u, const Var& z, const Var& centroids,
                   const Var& cond, const nn::LstmState& s, Eigen::Index B, Eigen::Index history) {
  RollStep r;
  r.state = model.lstm_step(tape, model.lstm_input(tape, z, centroids, cond), s);
  Var features = r.state.h;
  if (model.ablation().attention) {
    auto a = model.attend(tape, u.keys, u.hidden, model.attention_query(tape, r.state.h), B, history);
    r.weights = std::move(a.weights);
    const Var parts[] = {r.state.h, a.context};
    features = ad::concat_cols(parts);
  }
  r.mean = model.head(tape, features).first;
  return r;
}

}  // namespace

PredictionTrace AfnModel::trace(const Matrix& x_norm) const {
  const Eigen::Index T = x_norm.rows();
  if (T < 2 || T < min_history()) throw PreconditionError("trace: history too short");
  const ConditionTrack track = condition_track(x_norm);
  Tape tape(true);
  Var C = tape.constant(track.onehot);
  Var z = vae_.encode(tape, tape.constant(x_norm), C, nullptr).mean;
  Var mu = vae_.centroids(tape);
  Unroll u = unroll(tape, *this, lstm_input(tape, z, mu, C), 1, T - 1);
  PredictionTrace p;
  p.target = z.value().bottomRows(T - 1);
  p.mean = u.mean.value();
  p.var = u.var.value();
  p.nll = gaussian_nll(tape.constant(p.target), u.mean, u.var).value();
  if (cfg_.ablation.damping_active()) {
    p.damping = damping(tape, tape.constant(track.pis.topRows(T - 1)),
                        tape.constant(track.pi_hat_next.topRows(T - 1)))
                    .value();
  } else {
    p.damping = Matrix::Ones(T - 1, 1);
  }
  return p;
}

Batch make_batch(const AfnModel& model, const std::vector<Matrix>& x_norm,
                 const std::vector<ConditionTrack>& tracks, const std::vector<size_t>& idx,
                 const std::vector<Eigen::Index>& offsets, Eigen::Index length, nn::Rng* eps_rng,
                 int cut, int horizon) {
  if (idx.empty()) throw PreconditionError("make_batch: empty batch");
  if (!offsets.empty() && offsets.size() != idx.size()) throw PreconditionError("make_batch: one offset per series");
  Batch b;
  b.batch = static_cast<Eigen::Index>(idx.size());
  b.length = length > 0 ? length : x_norm[idx.front()].rows();
  auto offset_of = [&](size_t bi) { return offsets.empty() ? Eigen::Index{0} : offsets[bi]; };
  std::vector<Matrix> xs, cs, ps, hs;
  for (size_t bi = 0; bi < idx.size(); ++bi) {
    const size_t i = idx[bi];
    const Eigen::Index o = offset_of(bi);
    if (o < 0 || o + b.length > x_norm[i].rows()) throw PreconditionError("make_batch: segment out of range");
    xs.push_back(x_norm[i].middleRows(o, b.length));
    cs.push_back(tracks[i].onehot.middleRows(o, b.length));
    ps.push_back(tracks[i].pis.middleRows(o, b.length));
    hs.push_back(tracks[i].pi_hat_next.middleRows(o, b.length));
  }
  b.x = som::stack_time_major(xs);
  b.cond = som::stack_time_major(cs);
  b.pis = som::stack_time_major(ps);
  b.pi_hat_next = som::stack_time_major(hs);
  if (model.has_tm()) {
    const auto& tmm = model.tm();
    const Eigen::Index first = tmm.tau() - 1;
    std::vector<RowVector> ins, outs;
    for (size_t bi = 0; bi < idx.size(); ++bi) {
      const ConditionTrack& tr = tracks[idx[bi]];
      const Eigen::Index o = offset_of(bi);
      const Matrix inputs = tmm.dmm_inputs(tr.pis);
      for (Eigen::Index s = std::max(first, o); s + 1 < o + b.length; ++s) {
        ins.push_back(inputs.row(s));
        outs.push_back(tr.pis.row(s + 1));
      }
    }
    b.tm_inputs.resize(static_cast<Eigen::Index>(ins.size()), tmm.K() * tmm.config().markov_order);
    b.tm_targets.resize(static_cast<Eigen::Index>(outs.size()), tmm.K());
    for (size_t r = 0; r < ins.size(); ++r) {
      b.tm_inputs.row(static_cast<Eigen::Index>(r)) = ins[r];
      b.tm_targets.row(static_cast<Eigen::Index>(r)) = outs[r];
    }
  }
  if (eps_rng != nullptr) {
    std::normal_distribution<double> n01;
    b.eps.resize(b.x.rows(), model.m());
    for (Eigen::Index i = 0; i < b.eps.size(); ++i) b.eps.data()[i] = n01(*eps_rng);
  }
  if (cut >= 0 && horizon > 0) {
    if (cut + horizon >= b.length) throw PreconditionError("make_batch: cut + horizon beyond segment");
    b.cut = cut;
    b.horizon = horizon;
    b.roll_cond.resize(horizon * b.batch, model.rho());
    for (Eigen::Index bi = 0; bi < b.batch; ++bi) {
      const ConditionTrack& full = tracks[idx[static_cast<size_t>(bi)]];
      ConditionTrack head;
      head.pis = full.pis.topRows(offset_of(static_cast<size_t>(bi)) + cut + 1);
      const auto roll = model.rollout_conditions(head, horizon);
      for (int k = 0; k < horizon; ++k) {
        b.roll_cond.row(k * b.batch + bi) = model.onehot(roll[static_cast<size_t>(k)].discrete);
      }
    }
  }
  return b;
}

AfnLossVars afn_loss(Tape& tape, const AfnModel& model, const Batch& b, const LossTerms& terms) {
  const ModelConfig& cfg = model.config();
  const Eigen::Index B = b.batch, L = b.length;
  const double inv_b = 1.0 / static_cast<double>(B);
  const som::ConvaeSomModel& vae = model.convae();

  Var X = tape.constant(b.x);
  Var C = tape.constant(b.cond);
  som::EncodeVars e = vae.encode(tape, X, C, b.eps.size() > 0 ? &b.eps : nullptr);
  Var x_hat = vae.decode(tape, e.z, C);
  Var mu = vae.centroids(tape);

  AfnLossVars out;
  som::TdpsomInputs tin{X, e.mean, e.log_var, e.z, x_hat, mu, B, L};
  out.tdpsom = som::tdpsom_loss(tin, vae);

  Var zero = tape.constant(Matrix::Zero(1, 1));
  out.transition = zero;
  out.pred = zero;
  out.forecasting = zero;
  out.damping_reg = zero;

  if (terms.transition && model.has_tm() && b.tm_inputs.rows() > 0) {
    const tm::TransitionModel& tmm = model.tm();
    Var target = tape.constant(b.tm_targets);
    Var pi_hat = tmm.dmm_forward(tape, tape.constant(b.tm_inputs));
    Var c_true = ad::stop_gradient(tmm.cond_forward(tape, target));
    Var c_pred = tmm.cond_forward(tape, pi_hat);
    out.transition = ad::scale(tm::transition_losses(target, pi_hat, c_true, c_pred).transition, inv_b);
  }

  const bool want_fft = terms.forecasting && b.cut >= 0 && b.horizon > 0;
  if (terms.pred || want_fft) {
    const Eigen::Index steps = L - 1;
    Unroll u = unroll(tape, model, model.lstm_input(tape, ad::stop_gradient(e.mean), mu, C), B, steps);
    if (terms.pred) {
      Var target = ad::stop_gradient(ad::slice_rows(e.mean, B, steps * B));
      Var nll = gaussian_nll(target, u.mean, u.var);
      Var D;
      if (cfg.ablation.damping_active()) {
        D = model.damping(tape, tape.constant(b.pis.topRows(steps * B)),
                          tape.constant(b.pi_hat_next.topRows(steps * B)));
        out.damping_reg = ad::scale(ad::sum(ad::log(D)), -inv_b);
      } else {
        D = tape.constant(Matrix::Ones(steps * B, 1));
      }
      out.pred = pred_loss(nll, D, static_cast<double>(B));
    }
    if (want_fft) {
      const Eigen::Index cut = b.cut;
      Var z = ad::slice_rows(u.mean, cut * B, B);
      Var rc = tape.constant(b.roll_cond);
      nn::LstmState s = u.states[static_cast<size_t>(cut)];
      std::vector<Var> errs;
      for (int k = 0; k < b.horizon; ++k) {
        Var ck = ad::slice_rows(rc, k * B, B);
        if (k > 0) {
          RollStep r = roll_step(tape, model, u, z, mu, ad::slice_rows(rc, (k - 1) * B, B), s, B, cut + 1);
          s = r.state;
          z = r.mean;
        }
        Var xk = vae.decode(tape, z, ck);
        Var truth = ad::slice_rows(X, (cut + 1 + k) * B, B);
        errs.push_back(ad::sum(ad::row_norm(ad::sub(truth, xk))));
      }
      Var total = errs.front();
      for (size_t i = 1; i < errs.size(); ++i) total = ad::add(total, errs[i]);
      out.forecasting = ad::scale(total, inv_b);
    }
  }

  out.total = ad::add(ad::add(ad::add(out.tdpsom.total, ad::scale(out.transition, cfg.tau_w)),
                              ad::scale(out.pred, cfg.eta)),
                      out.forecasting);
  out.objective = ad::add(out.total, ad::scale(out.damping_reg, cfg.eta * cfg.damping_reg));
  return out;
}

AfnLossValues values_of(const AfnLossVars& v) {
  AfnLossValues r;
  r.som = v.tdpsom.som.scalar();
  r.commit = v.tdpsom.commit.scalar();
  r.reconstruction = v.tdpsom.reconstruction.scalar();
  r.smoothness = v.tdpsom.smoothness.scalar();
  r.tdpsom = v.tdpsom.total.scalar();
  r.transition = v.transition.scalar();
  r.pred = v.pred.scalar();
  r.forecasting = v.forecasting.scalar();
  r.total = v.total.scalar();
  r.damping_reg = v.damping_reg.scalar();
  return r;
}

nlohmann::json AfnLossValues::to_json() const {
  return {{"som", som},           {"commit", commit},   {"reconstruction", reconstruction},
          {"smoothness", smoothness}, {"tdpsom", tdpsom}, {"transition", transition},
          {"pred", pred},         {"forecasting", forecasting}, {"total", total},
          {"damping_reg", damping_reg}};
}

// ---- training ---------------------------------------------------------------

namespace {

AfnLossValues& operator+=(AfnLossValues& a, const AfnLossValues& b) {
  a.som += b.som;
  a.commit += b.commit;
  a.reconstruction += b.reconstruction;
  a.smoothness += b.smoothness;
  a.tdpsom += b.tdpsom;
  a.transition += b.transition;
  a.pred += b.pred;
  a.forecasting += b.forecasting;
  a.total += b.total;
  a.damping_reg += b.damping_reg;
  return a;
}

AfnLossValues scaled(AfnLossValues a, double s) {
  a.som *= s;
  a.commit *= s;
  a.reconstruction *= s;
  a.smoothness *= s;
  a.tdpsom *= s;
  a.transition *= s;
  a.pred *= s;
  a.forecasting *= s;
  a.total *= s;
  a.damping_reg *= s;
  return a;
}

}  // namespace

TrainResult train_afn(const TimeSeriesSet& train_raw, const ModelConfig& cfg_in,
                      std::optional<tm::TransitionModel> pretrained, const EpochCallback& on_epoch) {
  ModelConfig cfg = cfg_in;
  cfg.validate();
  train_raw.validate();
  if (train_raw.dims() != cfg.vae.d) throw PreconditionError("train_afn: data has a different d than the config");
  auto [train, stats] = zscore_fit_apply(train_raw);

  std::optional<tm::TransitionModel> tmm;
  if (cfg.ablation.tm) {
    if (pretrained) {
      tmm = std::move(pretrained);
    } else {
      tm::TmConfig tcfg = cfg.tm;
      tcfg.seed = cfg.train.seed;
      tmm = tm::pretrain_tm(train, tcfg);
    }
  }
  TrainResult result{AfnModel(cfg, std::move(tmm), stats, train.feature_names), std::nullopt, {}};
  AfnModel& model = result.model;

  const Eigen::Index T = train.length();
  const int h = cfg.train.fft_horizon;
  if (T < model.min_history() + 2) throw PreconditionError("train_afn: series too short for the transition history");
  const Eigen::Index W = cfg.train.crop_length > 0 ? std::min<Eigen::Index>(cfg.train.crop_length, T) : T;
  if (W < 2) throw PreconditionError("train_afn: crop_length must be >= 2");
  const int last_cut = static_cast<int>(W) - 1 - h;
  const int first_cut = std::max(0, last_cut / 2);
  const bool fft_possible = last_cut >= 0;

  std::vector<ConditionTrack> tracks(train.size());
  auto refresh_tracks = [&] {
    for (size_t i = 0; i < train.size(); ++i) tracks[i] = model.condition_track(train.values[i]);
  };
  refresh_tracks();

  nn::Rng rng(cfg.train.seed ^ 0xA5F0C3E1ull);
  const nn::AdamConfig adam{cfg.train.learning_rate};
  nn::Adam tm_opt(adam), vae_opt(adam), fc_opt(adam), damp_opt(adam);
  // only the DMM learns jointly; the conditional network keeps its pretrained map
  const ad::ParamList tm_p = model.has_tm() ? model.tm().dmm_params() : ad::ParamList{};
  const ad::ParamList vae_net_p = model.convae().network_params();
  const ad::ParamList vae_p = model.vae_params();
  const ad::ParamList fc_p = model.forecaster_params();
  const ad::ParamList damp_p = model.damping_params();

  const int per_series = std::max(1, cfg.train.crops_per_series);
  std::vector<std::pair<size_t, Eigen::Index>> order;

  struct Stage {
    std::string name;
    int epochs;
    LossTerms terms;
    bool recon_only;
    bool train_forecaster;
    double lr_scale;
  };

  auto run_stage = [&](const Stage& st) {
    for (int epoch = 0; epoch < st.epochs; ++epoch) {
      order.clear();
      std::uniform_int_distribution<Eigen::Index> start(0, T - W);
      for (size_t i = 0; i < train.size(); ++i) {
        for (int c = 0; c < per_series; ++c) order.emplace_back(i, W == T ? 0 : start(rng));
      }
      std::shuffle(order.begin(), order.end(), rng);
      const bool train_damp =
          st.train_forecaster && cfg.ablation.damping_active() &&
          (st.name != "B" || epoch >= cfg.train.damping_warmup_epochs);
      AfnLossValues acc;
      int batches = 0;
      for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.train.batch_size)) {
        const size_t bn = std::min<size_t>(static_cast<size_t>(cfg.train.batch_size), order.size() - b0);
        std::vector<size_t> idx(bn);
        std::vector<Eigen::Index> offsets(bn);
        for (size_t k = 0; k < bn; ++k) std::tie(idx[k], offsets[k]) = order[b0 + k];
        int cut = -1;
        if (st.terms.forecasting && fft_possible) {
          std::uniform_int_distribution<int> pick(first_cut, last_cut);
          cut = pick(rng);
        }
        Batch batch = make_batch(model, train.values, tracks, idx, offsets, W, &rng, cut, h);
        Tape tape;
        AfnLossVars l = afn_loss(tape, model, batch, st.terms);
        Var objective = st.recon_only ? l.tdpsom.reconstruction : l.objective;
        if (!std::isfinite(objective.scalar())) {
          throw TrainingError("train_afn: loss diverged in stage " + st.name + " epoch " + std::to_string(epoch));
        }
        tape.backward(objective);
        const double lr = st.lr_scale;
        if (st.recon_only) {
          tape.accumulate(vae_net_p);
          vae_opt.step(vae_net_p, lr);
        } else {
          tape.accumulate(vae_p);
          vae_opt.step(vae_p, lr);
          if (st.terms.transition && !tm_p.empty()) {
            tape.accumulate(tm_p);
            tm_opt.step(tm_p, lr);
          }
          if (st.train_forecaster) {
            tape.accumulate(fc_p);
            fc_opt.step(fc_p, lr);
          }
          if (train_damp) {
            tape.accumulate(damp_p);
            damp_opt.step(damp_p, lr);
          }
        }
        acc += values_of(l);
        ++batches;
      }
      if (st.terms.transition && model.has_tm()) refresh_tracks();
      StageLog log{st.name, epoch, scaled(acc, 1.0 / std::max(1, batches))};
      result.log.push_back(log);
      if (on_epoch) on_epoch(log);
    }
  };

  run_stage({"A0", cfg.train.vae_warmup_epochs, {false, false, false}, true, false, 1.0});

  // centroids on a principal-component grid over the warmed-up latent cloud
  {
    std::vector<Matrix> zs;
    Eigen::Index rows = 0;
    const size_t total = train.size() * static_cast<size_t>(T);
    const size_t step = std::max<size_t>(1, (total + 4999) / 5000);
    for (size_t i = 0; i < train.size(); i += step) {
      zs.push_back(model.convae().encode_mean(train.values[i], tracks[i].onehot));
      rows += zs.back().rows();
    }
    Matrix cloud(rows, model.m());
    Eigen::Index r = 0;
    for (const Matrix& z : zs) {
      cloud.middleRows(r, z.rows()) = z;
      r += z.rows();
    }
    model.convae().init_centroids_pca(cloud);
  }

  const bool use_tr = cfg.ablation.tm;
  run_stage({"A", cfg.train.stage_a_epochs, {use_tr, false, false}, false, false, 1.0});
  run_stage({"B", cfg.train.stage_b_epochs, {use_tr, true, false}, false, true, 1.0});
  if (cfg.ablation.fft && fft_possible && cfg.train.stage_c_epochs > 0) {
    result.before_fft = model;
    run_stage({"C", cfg.train.stage_c_epochs, {use_tr, true, true}, false, true, cfg.train.fft_lr_scale});
  }
  return result;
}

// ---- inference --------------------------------------------------------------

Forecast forecast(const AfnModel& model, const Matrix& raw_history, int h) {
  if (h < 1) throw PreconditionError("forecast: horizon must be >= 1");
  if (raw_history.cols() != model.d()) throw PreconditionError("forecast: history has the wrong number of features");
  const Eigen::Index T = raw_history.rows();
  if (T < model.min_history()) {
    throw PreconditionError("forecast: need at least tau = " + std::to_string(model.min_history()) +
                            " history steps, got " + std::to_string(T));
  }
  if (!raw_history.allFinite()) throw PreconditionError("forecast: history contains NaN");
  const Matrix x = model.norm_stats().apply(raw_history);
  const ConditionTrack track = model.condition_track(x);
  const auto roll = model.rollout_conditions(track, h);

  Tape tape(true);
  const som::ConvaeSomModel& vae = model.convae();
  Var C = tape.constant(track.onehot);
  Var z = vae.encode(tape, tape.constant(x), C, nullptr).mean;
  Var mu = vae.centroids(tape);
  Unroll u = unroll(tape, model, model.lstm_input(tape, z, mu, C), 1, T);

  Forecast f;
  f.history_length = static_cast<int>(T);
  f.horizon = h;
  f.grid_width = vae.config().grid_width;
  f.has_attention = model.ablation().attention;
  f.feature_names = model.feature_names();
  f.latent_path.resize(T + h, model.m());
  f.latent_path.topRows(T) = z.value();
  f.x_hat.resize(h, model.d());
  if (f.has_attention) {
    f.attention.resize(h, T);
    f.attention.row(0) = u.last_weights.row(0);
  }

  Var zk = ad::slice_rows(u.mean, T - 1, 1);
  nn::LstmState s = u.states.back();
  for (int k = 0; k < h; ++k) {
    if (k > 0) {
      Var prev_c = tape.constant(model.onehot(roll[static_cast<size_t>(k - 1)].discrete));
      RollStep r = roll_step(tape, model, u, zk, mu, prev_c, s, 1, T);
      s = r.state;
      zk = r.mean;
      if (f.has_attention) f.attention.row(k) = r.weights.row(0);
    }
    f.latent_path.row(T + k) = zk.value().row(0);
    f.x_hat.row(k) = vae.decode(RowVector(zk.value().row(0)), model.onehot(roll[static_cast<size_t>(k)].discrete));
  }
  f.x_hat = model.norm_stats().invert(f.x_hat);
  f.node_path = som::som_assign_rows(f.latent_path, vae.centroids());
  f.conditions = track.conditions;
  f.conditions.insert(f.conditions.end(), roll.begin(), roll.end());
  return f;
}

const Matrix& attention_weights(const Forecast& f) {
  if (!f.has_attention) throw UnsupportedError("attention layer is ablated in this model");
  return f.attention;
}

Matrix persistence_forecast(const Matrix& history, int h) {
  if (history.rows() < 1 || h < 1) throw PreconditionError("persistence: empty history or horizon");
  return history.bottomRows(1).replicate(h, 1);
}

nlohmann::json Forecast::to_json() const {
  auto rows = [](const Matrix& m) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      nlohmann::json r = nlohmann::json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
      a.push_back(std::move(r));
    }
    return a;
  };
  nlohmann::json nodes = nlohmann::json::array();
  for (int k : node_path) nodes.push_back({k / grid_width, k % grid_width});
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : conditions) {
    conds.push_back({{"discrete", c.discrete},
                     {"distribution", std::vector<double>(c.distribution.data(),
                                                          c.distribution.data() + c.distribution.size())}});
  }
  return {{"history_length", history_length},
          {"horizon", horizon},
          {"feature_names", feature_names},
          {"x_hat", rows(x_hat)},
          {"latent_path", rows(latent_path)},
          {"node_path", nodes},
          {"attention", has_attention ? rows(attention) : nlohmann::json(nullptr)},
          {"conditions", conds}};
}

}  // namespace afn::ifm
