// Transition module: windowed behaviour clustering summarized into
// pi-vectors, a feed-forward Markov model that predicts the next pi-vector,
// and a conditional network that discretizes pi-vectors into conditions.

#pragma once

#include "afn/autodiff.hpp"
#include "afn/data.hpp"
#include "afn/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace afn::tm {

using ad::Matrix;
using ad::RowVector;

/// Proportion of each behaviour cluster over the last M windows.
struct PiVector {
  RowVector proportions;

  int K() const { return static_cast<int>(proportions.size()); }
  /// Entries >= 0 and sum within 1e-9 of 1.
  bool valid() const;
};

struct Condition {
  RowVector distribution;  // rho-simplex
  int discrete = 0;        // argmax, lowest index on ties
};

/// Per-feature mean, population std and OLS slope of rows [start, start + C).
RowVector window_summary(const Matrix& series, Eigen::Index start, int C);

/// Assigns a length-C window of a series to one of K behaviour clusters.
class WindowClusterer {
 public:
  virtual ~WindowClusterer() = default;
  virtual int K() const = 0;
  virtual int window_length() const = 0;
  /// Cluster of the window covering rows [end - C + 1, end].
  virtual int assign(const Matrix& series, Eigen::Index end) const = 0;
  virtual nlohmann::json to_json() const = 0;
};

/// Nearest-centroid clustering of standardized window summaries.
class CentroidWindowClusterer final : public WindowClusterer {
 public:
  CentroidWindowClusterer(int C, RowVector summary_mean, RowVector summary_std, Matrix centroids);

  int K() const override { return static_cast<int>(centroids_.rows()); }
  int window_length() const override { return C_; }
  int assign(const Matrix& series, Eigen::Index end) const override;
  nlohmann::json to_json() const override;
  const Matrix& centroids() const { return centroids_; }

 private:
  int C_;
  RowVector mean_;
  RowVector std_;
  Matrix centroids_;
};

std::shared_ptr<const WindowClusterer> window_clusterer_from_json(const nlohmann::json& j);

/// k-means over every length-C window summary of the training set
/// (subsampled to `max_windows`, deterministic given seed).
std::shared_ptr<const CentroidWindowClusterer> fit_window_clusters(const TimeSeriesSet& train, int K,
                                                                   int C, std::uint64_t seed,
                                                                   int max_windows = 20000);

/// pi-vector from cluster assignments by exact counting.
PiVector pi_from_assignments(std::span<const int> assignments, int K);

/// pi-vector of the M windows ending at rows t-1, t-2, ..., t-M of `series`
/// (each of length C), i.e. a summary of the history strictly before row t.
/// Throws PreconditionError when t < C + M.
PiVector summarize_history(const Matrix& series, Eigen::Index t, int C, int M,
                           const WindowClusterer& cm);

struct TmConfig {
  int K = 5;
  int rho = 3;
  int C = 4;
  int M = 9;
  int markov_order = 1;
  std::vector<int> dmm_hidden{500, 128};
  std::vector<int> cond_hidden{16};
  // pretraining
  int batch_size = 128;
  int cond_warmup_epochs = 3;
  int mse_warmup_epochs = 2;
  int epochs = 6;
  double learning_rate = 1e-3;
  int max_windows = 20000;
  std::uint64_t seed = 0;

  int tau() const { return C + M; }
  nlohmann::json to_json() const;
  static TmConfig from_json(const nlohmann::json& j);
};

struct TransitionLosses {
  double mse = 0.0;
  double conditional = 0.0;
  double transition = 0.0;  // mse + conditional
};

/// Sums over rows (one row per step): ||pi_true - pi_hat||_2 and
/// -(1/rho) sum c_true . log c_pred.
TransitionLosses transition_losses(const Matrix& pi_true, const Matrix& pi_hat,
                                   const Matrix& c_true, const Matrix& c_pred);

struct TransitionLossVars {
  ad::Var mse;
  ad::Var conditional;
  ad::Var transition;
};

/// Tape version of transition_losses; `c_true` should already be a constant.
TransitionLossVars transition_losses(const ad::Var& pi_true, const ad::Var& pi_hat,
                                     const ad::Var& c_true, const ad::Var& c_pred);

class TransitionModel {
 public:
  TransitionModel(const TmConfig& cfg, std::shared_ptr<const WindowClusterer> clusters);

  const TmConfig& config() const { return cfg_; }
  int K() const { return cfg_.K; }
  int rho() const { return cfg_.rho; }
  int tau() const { return cfg_.tau(); }
  const WindowClusterer& clusters() const { return *clusters_; }

  /// Pi-vector for every row s of a series, summarizing history up to and
  /// including s (summarize_history at t = s + 1). Rows before tau - 1 reuse
  /// the first available vector.
  Matrix pi_path(const Matrix& series) const;
  /// Stacks [pi_s, pi_{s-1}, ...] for the configured Markov order (earlier
  /// rows are clamped to row 0).
  Matrix dmm_inputs(const Matrix& pis) const;

  Matrix dmm_predict(const Matrix& inputs) const;
  PiVector dmm_predict(const PiVector& prev) const;
  Matrix condition_dist(const Matrix& pis) const;
  Condition condition_of(const RowVector& pi) const;

  /// Softmax outputs on a tape.
  ad::Var dmm_forward(ad::Tape& tape, const ad::Var& inputs) const;
  ad::Var cond_forward(ad::Tape& tape, const ad::Var& pis) const;
  ad::Var cond_logits(ad::Tape& tape, const ad::Var& pis) const;

  ad::ParamList params();
  ad::ParamList dmm_params();
  ad::ParamList cond_params();

  nlohmann::json to_json() const;
  static TransitionModel from_json(const nlohmann::json& j);

 private:
  TmConfig cfg_;
  std::shared_ptr<const WindowClusterer> clusters_;
  nn::Mlp dmm_;
  nn::Mlp cond_;
};

struct PretrainReport {
  std::vector<double> epoch_loss;  // mean L_Transition per step, index 0 = before training
};

/// Fits window clusters, warm-starts the conditional network on rho-means
/// labels of the training pi-vectors, then trains the DMM on L_MSE alone
/// and finally both networks on L_Transition. `train` should be normalized.
TransitionModel pretrain_tm(const TimeSeriesSet& train, const TmConfig& cfg,
                            PretrainReport* report = nullptr);

}  // namespace afn::tm
