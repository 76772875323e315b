// Forecasting module: attention LSTM over ConVAE-SOM latents, damping
// network, joint loss and the staged trainer, plus autoregressive rollout.

#pragma once

#include "afn/autodiff.hpp"
#include "afn/convae_som.hpp"
#include "afn/data.hpp"
#include "afn/nn.hpp"
#include "afn/transition.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace afn::ifm {

using ad::Matrix;
using ad::RowVector;
using ad::Tape;
using ad::Var;

/// Component switches; `false` removes the component.
struct Ablation {
  bool tm = true;
  bool attention = true;
  bool damping = true;
  bool fft = true;

  /// "none", "tm", "al", "df" or "fft".
  static Ablation from_name(const std::string& name);
  std::string name() const;
  bool damping_active() const { return tm && damping; }
};

struct TrainConfig {
  int batch_size = 128;
  int vae_warmup_epochs = 5;
  int stage_a_epochs = 10;
  int stage_b_epochs = 20;
  int stage_c_epochs = 10;
  int damping_warmup_epochs = 3;  // damping net frozen for the first Stage B epochs
  double learning_rate = 1e-3;
  double fft_lr_scale = 0.1;
  int fft_horizon = 6;
  /// Training sequences are random crops of this many steps (0 = full length).
  int crop_length = 0;
  /// Crops drawn per series and epoch.
  int crops_per_series = 1;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  tm::TmConfig tm;
  som::ConvaeConfig vae;
  int lstm_hidden = 100;
  std::vector<int> damping_hidden{100, 10};
  double eta = 10.0;    // L_Pred weight
  double tau_w = 75.0;  // L_Transition weight
  /// Weight of -sum log D added to the training objective so the damping
  /// factor cannot shrink to zero; not part of L_AFN.
  double damping_reg = 1.0;
  double var_floor = 1e-4;
  Ablation ablation;
  TrainConfig train;

  /// Architecture widths of the reference model for `d` features.
  static ModelConfig defaults(int d);
  /// Reduced widths that train in about a minute on one core.
  static ModelConfig desk(int d);

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Per-series transition context in normalized space.
struct ConditionTrack {
  Matrix pis;          // T x K (empty when the TM is ablated)
  Matrix pi_hat_next;  // T x K, DMM prediction for the following step
  Matrix onehot;       // T x rho
  std::vector<tm::Condition> conditions;
};

/// Teacher-forced one-step predictions along a history.
struct PredictionTrace {
  Matrix target;   // (T-1) x m latent means z_{t+1}
  Matrix mean;     // (T-1) x m
  Matrix var;      // (T-1) x m
  Matrix nll;      // (T-1) x 1
  Matrix damping;  // (T-1) x 1
};

class AfnModel {
 public:
  AfnModel(const ModelConfig& cfg, std::optional<tm::TransitionModel> tm, NormStats norm,
           std::vector<std::string> feature_names);

  const ModelConfig& config() const { return cfg_; }
  const Ablation& ablation() const { return cfg_.ablation; }
  bool has_tm() const { return tm_.has_value(); }
  const tm::TransitionModel& tm() const;
  tm::TransitionModel& tm();
  const som::ConvaeSomModel& convae() const { return vae_; }
  som::ConvaeSomModel& convae() { return vae_; }
  const NormStats& norm_stats() const { return norm_; }
  const std::vector<std::string>& feature_names() const { return feature_names_; }
  int d() const { return cfg_.vae.d; }
  int m() const { return cfg_.vae.m; }
  int rho() const { return cfg_.vae.rho; }
  /// Shortest history a forecast accepts.
  int min_history() const;

  /// Conditions for every step of a normalized series.
  ConditionTrack condition_track(const Matrix& x_norm) const;
  /// Rolls the DMM forward from the last row of `track` for `h` steps.
  std::vector<tm::Condition> rollout_conditions(const ConditionTrack& track, int h) const;
  tm::Condition fixed_condition() const;
  RowVector onehot(int condition) const;

  /// Damping factor in (0,1); exactly 1 when damping or the TM is ablated.
  double damping(const tm::PiVector& pi, const RowVector& pi_hat_next) const;
  Var damping(Tape& tape, const Var& pis, const Var& pi_hat_next) const;

  PredictionTrace trace(const Matrix& x_norm) const;

  // ---- building blocks used by the trainer and the rollout ---------------
  Var lstm_input(Tape& tape, const Var& z, const Var& centroids, const Var& cond) const;
  nn::LstmState lstm_step(Tape& tape, const Var& x, const nn::LstmState& s) const;
  nn::LstmState lstm_zero(Tape& tape, Eigen::Index batch) const;
  Var attention_keys(Tape& tape, const Var& hidden) const;
  Var attention_query(Tape& tape, const Var& hidden) const;
  ad::AttentionResult attend(Tape& tape, const Var& keys, const Var& values, const Var& query,
                             Eigen::Index batch, Eigen::Index length) const;
  /// Gaussian head: returns {mean, variance}.
  std::pair<Var, Var> head(Tape& tape, const Var& features) const;

  ad::ParamList tm_params();
  ad::ParamList vae_params();
  ad::ParamList forecaster_params();
  ad::ParamList damping_params();
  ad::ParamList params();

  nlohmann::json to_json() const;
  static AfnModel from_json(const nlohmann::json& j);

 private:
  ModelConfig cfg_;
  std::optional<tm::TransitionModel> tm_;
  som::ConvaeSomModel vae_;
  nn::LstmCell lstm_;
  nn::Dense key_;
  nn::Dense query_;
  ad::Parameter score_;
  nn::Dense mean_head_;
  nn::Dense var_head_;
  nn::Mlp damp_;
  NormStats norm_;
  std::vector<std::string> feature_names_;
};

/// Per-row diagonal Gaussian negative log-likelihood, n x 1.
Var gaussian_nll(const Var& target, const Var& mean, const Var& var);
/// sum_t nll_t * damping_t / batch.
Var pred_loss(const Var& nll, const Var& damping, double batch);
double pred_loss(const Matrix& nll, const Matrix& damping);
/// ||x_next - x_hat_next||_2.
double forecast_fine_tune_loss(const RowVector& x_next, const RowVector& x_hat_next);

/// Which terms of the joint loss are switched on.
struct LossTerms {
  bool transition = true;
  bool pred = true;
  bool forecasting = true;
};

/// One minibatch of equal-length normalized segments stacked time-major.
struct Batch {
  Eigen::Index batch = 0;
  Eigen::Index length = 0;
  Matrix x;            // (length*batch) x d
  Matrix cond;         // (length*batch) x rho one-hot
  Matrix pis;          // (length*batch) x K
  Matrix pi_hat_next;  // (length*batch) x K
  Matrix tm_inputs;    // transition rows: DMM inputs
  Matrix tm_targets;   // transition rows: next pi
  Matrix eps;          // (length*batch) x m reparameterization noise, empty = eval
  int cut = -1;        // forecasting cut point, rows 0..cut are history
  Matrix roll_cond;    // (h*batch) x rho, conditions of steps cut+1..cut+h
  int horizon = 0;
};

/// Builds a batch of segments [offsets[b], offsets[b] + length) of the
/// selected series (empty offsets and length 0 mean whole series). `cut` is
/// relative to the segment start; `eps_rng` null leaves eps empty.
Batch make_batch(const AfnModel& model, const std::vector<Matrix>& x_norm,
                 const std::vector<ConditionTrack>& tracks, const std::vector<size_t>& idx,
                 const std::vector<Eigen::Index>& offsets, Eigen::Index length, nn::Rng* eps_rng,
                 int cut, int horizon);

struct AfnLossVars {
  som::TdpsomLossVars tdpsom;
  Var transition;
  Var pred;
  Var forecasting;
  Var total;           // L_AFN
  Var damping_reg;     // -sum log D / batch (zero when inactive)
  Var objective;       // total + eta * damping_reg * weight
};

struct AfnLossValues {
  double som = 0.0, commit = 0.0, reconstruction = 0.0, smoothness = 0.0, tdpsom = 0.0;
  double transition = 0.0, pred = 0.0, forecasting = 0.0, total = 0.0, damping_reg = 0.0;

  nlohmann::json to_json() const;
};

/// L_AFN = L_T-DPSOM + tau_w * L_Transition + eta * L_Pred + L_Forecasting,
/// evaluated in that order; disabled or ablated terms are constant zero.
AfnLossVars afn_loss(Tape& tape, const AfnModel& model, const Batch& batch, const LossTerms& terms);
AfnLossValues values_of(const AfnLossVars& v);

struct StageLog {
  std::string stage;
  int epoch = 0;
  AfnLossValues mean_loss;
};

struct TrainResult {
  AfnModel model;
  /// Snapshot taken before forecasting fine-tuning.
  std::optional<AfnModel> before_fft;
  std::vector<StageLog> log;
};

using EpochCallback = std::function<void(const StageLog&)>;

/// Fits z-score statistics on `train_raw`, pretrains the TM when none is
/// given (and the TM is not ablated), then runs the staged schedule.
TrainResult train_afn(const TimeSeriesSet& train_raw, const ModelConfig& cfg,
                      std::optional<tm::TransitionModel> pretrained = std::nullopt,
                      const EpochCallback& on_epoch = {});

struct Forecast {
  int history_length = 0;
  int horizon = 0;
  Matrix x_hat;        // h x d, raw scale
  Matrix latent_path;  // (T+h) x m
  std::vector<int> node_path;  // linear node index, T+h
  int grid_width = 8;
  bool has_attention = false;
  Matrix attention;    // h x T
  std::vector<tm::Condition> conditions;  // T+h
  std::vector<std::string> feature_names;

  nlohmann::json to_json() const;
};

/// Eval-mode rollout from a raw (T x d) history.
Forecast forecast(const AfnModel& model, const Matrix& raw_history, int h);

/// h x T attention matrix; UnsupportedError when attention is ablated.
const Matrix& attention_weights(const Forecast& f);

/// Last-value persistence over `h` steps.
Matrix persistence_forecast(const Matrix& history, int h);

}  // namespace afn::ifm
