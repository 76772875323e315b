// Condition-aware VAE with a self-organizing-map latent space.

#pragma once

#include "afn/autodiff.hpp"
#include "afn/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <vector>

namespace afn::som {

using ad::Matrix;
using ad::RowVector;
using ad::Tape;
using ad::Var;

/// Rectangular grid of centroids with 4-adjacency. Node k sits at
/// (k / width, k % width).
struct SomGrid {
  int height = 8;
  int width = 8;
  Matrix centroids;  // (height * width) x m

  int size() const { return height * width; }
  int index(int row, int col) const { return row * width + col; }
  int row_of(int k) const { return k / width; }
  int col_of(int k) const { return k % width; }
  std::vector<int> neighbors(int k) const;
  bool adjacent(int a, int b) const;
};

struct NodeAssignment {
  int index = 0;
  int row = 0;
  int col = 0;
  RowVector centroid;
};

/// Nearest centroid by Euclidean distance; lowest linear index wins ties.
NodeAssignment som_assign(const RowVector& z, const SomGrid& grid);
/// Row-wise nearest centroid indices.
std::vector<int> som_assign_rows(const Matrix& z, const Matrix& centroids);

/// Grid-adjacent mean centroid distance over non-adjacent mean distance.
double topology_ratio(const SomGrid& grid);

/// Student-t soft assignment q(k | z) with `alpha` degrees of freedom.
Matrix soft_assign(const Matrix& z, const Matrix& centroids, double alpha);
/// Tape version returning log q.
Var log_soft_assign(const Var& z, const Var& centroids, double alpha);

struct LatentCode {
  RowVector mean;
  RowVector log_var;
  RowVector z;
};

struct LossWeights {
  double beta = 0.1;   // SOM
  double gamma = 0.3;  // commitment
  double theta = 0.1;  // reconstruction
  double kappa = 1.0;  // smoothness
};

struct ConvaeConfig {
  int d = 8;
  int rho = 3;
  int m = 16;
  std::vector<int> encoder_hidden{500, 500, 2000};
  std::vector<int> decoder_hidden{2000, 500, 500};
  int grid_height = 8;
  int grid_width = 8;
  double alpha = 10.0;
  /// Observation noise std of the Gaussian decoder likelihood.
  double obs_noise_std = 0.2;
  LossWeights weights;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ConvaeConfig from_json(const nlohmann::json& j);
};

struct EncodeVars {
  Var mean;
  Var log_var;
  Var z;
};

class ConvaeSomModel {
 public:
  ConvaeSomModel() = default;
  explicit ConvaeSomModel(const ConvaeConfig& cfg);

  const ConvaeConfig& config() const { return cfg_; }
  int latent_dim() const { return cfg_.m; }
  SomGrid grid() const;
  const Matrix& centroids() const { return centroids_.value; }
  ad::Parameter& centroid_param() { return centroids_; }
  const ad::Parameter& centroid_param() const { return centroids_; }

  /// x: 1 x d, c: 1 x rho. With `rng` the code is sampled, otherwise z = mean.
  LatentCode encode(const RowVector& x, const RowVector& c, nn::Rng* rng = nullptr) const;
  /// Row-wise eval-mode encoding; returns the means.
  Matrix encode_mean(const Matrix& x, const Matrix& c) const;
  RowVector decode(const RowVector& z, const RowVector& c) const;
  Matrix decode(const Matrix& z, const Matrix& c) const;

  /// `eps` holds standard-normal noise of the latent shape; nullptr means eval mode.
  EncodeVars encode(Tape& tape, const Var& x, const Var& c, const Matrix* eps) const;
  Var decode(Tape& tape, const Var& z, const Var& c) const;
  Var centroids(Tape& tape) const { return tape.param(centroids_); }

  /// Lays the centroids on a regular grid spanned by the top two principal
  /// directions of `latents` (+-2 standard deviations).
  void init_centroids_pca(const Matrix& latents);

  ad::ParamList params();
  ad::ParamList network_params();

  nlohmann::json to_json() const;
  static ConvaeSomModel from_json(const nlohmann::json& j);

 private:
  ConvaeConfig cfg_;
  nn::Mlp encoder_;
  nn::Mlp decoder_;
  ad::Parameter centroids_;
};

/// Analytic KL(N(mean, exp(log_var)) || N(0, I)) per row, n x 1.
Var gaussian_kl(const Var& mean, const Var& log_var);

struct TdpsomLossVars {
  Var som;
  Var commit;
  Var reconstruction;
  Var smoothness;
  Var total;
  std::vector<int> assignments;  // winning node per row
  Var log_q;                     // rows x nodes
};

struct TdpsomInputs {
  Var x;        // (length * batch) x d, time-major
  Var mean;     // latent means
  Var log_var;
  Var z;        // latent used for reconstruction
  Var x_hat;    // decoder output
  Var centroids;
  Eigen::Index batch = 0;
  Eigen::Index length = 0;
};

/// Sub-losses summed over every step of every sequence and divided by the
/// batch size; `total` = beta*som + gamma*commit + theta*reconstruction +
/// kappa*smoothness evaluated in that order.
TdpsomLossVars tdpsom_loss(const TdpsomInputs& in, const ConvaeSomModel& model);

struct TdpsomLossValues {
  double som = 0.0;
  double commit = 0.0;
  double reconstruction = 0.0;
  double smoothness = 0.0;
  double total = 0.0;
};

/// Evaluates tdpsom_loss on `segments`, each a contiguous (length x d) block
/// with a per-step condition (length x rho). All segments must share length.
TdpsomLossValues tdpsom_loss(const ConvaeSomModel& model, const std::vector<Matrix>& segments,
                             const std::vector<Matrix>& conditions);

/// Stacks equal-length blocks time-major: row s * n + b holds blocks[b].row(s).
Matrix stack_time_major(const std::vector<Matrix>& blocks);

}  // namespace afn::som
