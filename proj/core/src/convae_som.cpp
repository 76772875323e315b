#include "afn/convae_som.hpp"

#include "afn/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace afn::som {

std::vector<int> SomGrid::neighbors(int k) const {
  std::vector<int> out;
  const int r = row_of(k), c = col_of(k);
  if (r > 0) out.push_back(index(r - 1, c));
  if (c > 0) out.push_back(index(r, c - 1));
  if (c + 1 < width) out.push_back(index(r, c + 1));
  if (r + 1 < height) out.push_back(index(r + 1, c));
  return out;
}

bool SomGrid::adjacent(int a, int b) const {
  return std::abs(row_of(a) - row_of(b)) + std::abs(col_of(a) - col_of(b)) == 1;
}

NodeAssignment som_assign(const RowVector& z, const SomGrid& grid) {
  if (z.size() != grid.centroids.cols()) throw PreconditionError("som_assign: latent dimension mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid.size(); ++k) {
    const double dist = (grid.centroids.row(k) - z).squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = k;
    }
  }
  return {best, grid.row_of(best), grid.col_of(best), grid.centroids.row(best)};
}

std::vector<int> som_assign_rows(const Matrix& z, const Matrix& centroids) {
  std::vector<int> out(static_cast<size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
      const double dist = (centroids.row(k) - z.row(i)).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<int>(k);
      }
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

double topology_ratio(const SomGrid& grid) {
  double adj = 0.0, non = 0.0;
  long n_adj = 0, n_non = 0;
  for (int a = 0; a < grid.size(); ++a) {
    for (int b = a + 1; b < grid.size(); ++b) {
      const double dist = (grid.centroids.row(a) - grid.centroids.row(b)).norm();
      if (grid.adjacent(a, b)) {
        adj += dist;
        ++n_adj;
      } else {
        non += dist;
        ++n_non;
      }
    }
  }
  if (n_adj == 0 || n_non == 0 || non == 0.0) throw PreconditionError("topology_ratio: grid too small");
  return (adj / n_adj) / (non / n_non);
}

Matrix soft_assign(const Matrix& z, const Matrix& centroids, double alpha) {
  Tape tape(true);
  return log_soft_assign(tape.constant(z), tape.constant(centroids), alpha).value().array().exp();
}

Var log_soft_assign(const Var& z, const Var& centroids, double alpha) {
  Var d = ad::sq_dist(z, centroids);
  Var s = ad::scale(ad::log(ad::add_scalar(ad::scale(d, 1.0 / alpha), 1.0)), -(alpha + 1.0) / 2.0);
  return ad::log_softmax_rows(s);
}

nlohmann::json ConvaeConfig::to_json() const {
  return {{"d", d},
          {"rho", rho},
          {"m", m},
          {"encoder_hidden", encoder_hidden},
          {"decoder_hidden", decoder_hidden},
          {"grid_height", grid_height},
          {"grid_width", grid_width},
          {"alpha", alpha},
          {"obs_noise_std", obs_noise_std},
          {"beta", weights.beta},
          {"gamma", weights.gamma},
          {"theta", weights.theta},
          {"kappa", weights.kappa},
          {"seed", seed}};
}

ConvaeConfig ConvaeConfig::from_json(const nlohmann::json& j) {
  ConvaeConfig c;
  c.d = j.value("d", c.d);
  c.rho = j.value("rho", c.rho);
  c.m = j.value("m", c.m);
  c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
  c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
  c.grid_height = j.value("grid_height", c.grid_height);
  c.grid_width = j.value("grid_width", c.grid_width);
  c.alpha = j.value("alpha", c.alpha);
  c.obs_noise_std = j.value("obs_noise_std", c.obs_noise_std);
  c.weights.beta = j.value("beta", c.weights.beta);
  c.weights.gamma = j.value("gamma", c.weights.gamma);
  c.weights.theta = j.value("theta", c.weights.theta);
  c.weights.kappa = j.value("kappa", c.weights.kappa);
  c.seed = j.value("seed", c.seed);
  if (c.d < 1 || c.rho < 1 || c.m < 1) throw ConfigError("convae: d, rho and m must be positive");
  if (c.grid_height < 1 || c.grid_width < 1) throw ConfigError("convae: empty grid");
  if (c.alpha <= 0.0) throw ConfigError("convae: alpha must be positive");
  if (c.obs_noise_std <= 0.0) throw ConfigError("convae: obs_noise_std must be positive");
  return c;
}

ConvaeSomModel::ConvaeSomModel(const ConvaeConfig& cfg) : cfg_(cfg) {
  nn::Rng rng(cfg_.seed ^ 0x5E1F0A9Eull);
  encoder_ = nn::Mlp("vae.enc", cfg_.d + cfg_.rho, cfg_.encoder_hidden, 2 * cfg_.m, nn::Activation::kElu, rng);
  decoder_ = nn::Mlp("vae.dec", cfg_.m + cfg_.rho, cfg_.decoder_hidden, cfg_.d, nn::Activation::kElu, rng);
  std::normal_distribution<double> n01(0.0, 0.1);
  Matrix mu(cfg_.grid_height * cfg_.grid_width, cfg_.m);
  for (Eigen::Index i = 0; i < mu.size(); ++i) mu.data()[i] = n01(rng);
  centroids_ = ad::Parameter("som.centroids", mu);
}

SomGrid ConvaeSomModel::grid() const {
  return {cfg_.grid_height, cfg_.grid_width, centroids_.value};
}

EncodeVars ConvaeSomModel::encode(Tape& tape, const Var& x, const Var& c, const Matrix* eps) const {
  const Var parts[] = {x, c};
  Var out = encoder_(tape, ad::concat_cols(parts));
  EncodeVars e;
  e.mean = ad::slice_cols(out, 0, cfg_.m);
  e.log_var = ad::slice_cols(out, cfg_.m, cfg_.m);
  if (eps == nullptr) {
    e.z = e.mean;
  } else {
    Var sd = ad::exp(ad::scale(e.log_var, 0.5));
    e.z = ad::add(e.mean, ad::mul(sd, tape.constant(*eps)));
  }
  return e;
}

Var ConvaeSomModel::decode(Tape& tape, const Var& z, const Var& c) const {
  const Var parts[] = {z, c};
  return decoder_(tape, ad::concat_cols(parts));
}

LatentCode ConvaeSomModel::encode(const RowVector& x, const RowVector& c, nn::Rng* rng) const {
  if (!x.allFinite()) throw PreconditionError("encode: input contains NaN or infinity");
  if (x.size() != cfg_.d || c.size() != cfg_.rho) throw PreconditionError("encode: shape mismatch");
  Tape tape(true);
  Matrix eps;
  if (rng != nullptr) {
    std::normal_distribution<double> n01;
    eps.resize(1, cfg_.m);
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = n01(*rng);
  }
  EncodeVars e = encode(tape, tape.constant(x), tape.constant(c), rng ? &eps : nullptr);
  return {e.mean.value().row(0), e.log_var.value().row(0), e.z.value().row(0)};
}

Matrix ConvaeSomModel::encode_mean(const Matrix& x, const Matrix& c) const {
  if (!x.allFinite()) throw PreconditionError("encode: input contains NaN or infinity");
  Tape tape(true);
  return encode(tape, tape.constant(x), tape.constant(c), nullptr).mean.value();
}

RowVector ConvaeSomModel::decode(const RowVector& z, const RowVector& c) const {
  return decode(Matrix(z), Matrix(c)).row(0);
}

Matrix ConvaeSomModel::decode(const Matrix& z, const Matrix& c) const {
  if (z.cols() != cfg_.m || c.cols() != cfg_.rho || z.rows() != c.rows()) {
    throw PreconditionError("decode: shape mismatch");
  }
  Tape tape(true);
  return decode(tape, tape.constant(z), tape.constant(c)).value();
}

void ConvaeSomModel::init_centroids_pca(const Matrix& latents) {
  if (latents.rows() < 2 || latents.cols() != cfg_.m) throw PreconditionError("pca init: need >= 2 latents");
  const RowVector mean = latents.colwise().mean();
  const Matrix centered = latents.rowwise() - mean;
  const Matrix cov = centered.transpose() * centered / static_cast<double>(latents.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Eigen::Index m = cfg_.m;
  // eigenvalues ascending
  RowVector v1 = es.eigenvectors().col(m - 1).transpose();
  RowVector v2 = m > 1 ? RowVector(es.eigenvectors().col(m - 2).transpose()) : RowVector::Zero(m);
  const double s1 = std::sqrt(std::max(es.eigenvalues()(m - 1), 1e-12));
  const double s2 = m > 1 ? std::sqrt(std::max(es.eigenvalues()(m - 2), 1e-12)) : 0.0;
  const int H = cfg_.grid_height, W = cfg_.grid_width;
  auto lin = [](int i, int n) { return n == 1 ? 0.0 : -2.0 + 4.0 * i / (n - 1); };
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      centroids_.value.row(r * W + c) = mean + lin(r, H) * s1 * v1 + lin(c, W) * s2 * v2;
    }
  }
}

ad::ParamList ConvaeSomModel::params() {
  ad::ParamList p = network_params();
  p.push_back(&centroids_);
  return p;
}

ad::ParamList ConvaeSomModel::network_params() {
  ad::ParamList p;
  encoder_.collect(p);
  decoder_.collect(p);
  return p;
}

nlohmann::json ConvaeSomModel::to_json() const {
  auto& self = const_cast<ConvaeSomModel&>(*this);
  return {{"config", cfg_.to_json()}, {"weights", nn::to_json(self.params())}};
}

ConvaeSomModel ConvaeSomModel::from_json(const nlohmann::json& j) {
  ConvaeSomModel m(ConvaeConfig::from_json(j.at("config")));
  nn::from_json(j.at("weights"), m.params());
  return m;
}

Var gaussian_kl(const Var& mean, const Var& log_var) {
  // 0.5 * sum(exp(lv) + mu^2 - 1 - lv)
  Var inner = ad::sub(ad::add(ad::exp(log_var), ad::square(mean)), ad::add_scalar(log_var, 1.0));
  return ad::scale(ad::row_sum(inner), 0.5);
}

TdpsomLossVars tdpsom_loss(const TdpsomInputs& in, const ConvaeSomModel& model) {
  const ConvaeConfig& cfg = model.config();
  const Eigen::Index B = in.batch, L = in.length;
  if (B < 1 || L < 2) throw PreconditionError("tdpsom_loss: need contiguous segments of length >= 2");
  if (in.mean.rows() != B * L || in.x.rows() != B * L) {
    throw PreconditionError("tdpsom_loss: rows must equal batch * length");
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  const SomGrid grid{cfg.grid_height, cfg.grid_width, in.centroids.value()};
  const int nodes = grid.size();

  TdpsomLossVars out;
  out.assignments = som_assign_rows(in.mean.value(), in.centroids.value());

  // SOM: neighbourhood mass with the latent held fixed
  Matrix mask = Matrix::Zero(B * L, nodes);
  for (Eigen::Index r = 0; r < B * L; ++r) {
    const int k = out.assignments[static_cast<size_t>(r)];
    mask(r, k) = 1.0;
    for (int nb : grid.neighbors(k)) mask(r, nb) = 1.0;
  }
  Tape& tape = in.mean.tape();
  Var q_fixed = ad::exp(log_soft_assign(ad::stop_gradient(in.mean), in.centroids, cfg.alpha));
  Var mass = ad::row_sum(ad::mul(q_fixed, tape.constant(mask)));
  out.som = ad::scale(ad::sum(ad::log(mass)), -inv_b);

  Var winners = ad::gather_rows(in.centroids, out.assignments);
  out.commit = ad::scale(ad::sum(ad::square(ad::sub(in.mean, winners))), inv_b);

  const double sx = cfg.obs_noise_std;
  Var sse = ad::scale(ad::sum(ad::square(ad::sub(in.x, in.x_hat))), 0.5 / (sx * sx));
  Var kl = ad::sum(gaussian_kl(in.mean, in.log_var));
  out.reconstruction = ad::scale(ad::add(sse, kl), inv_b);

  out.log_q = log_soft_assign(in.mean, in.centroids, cfg.alpha);
  Var next = ad::slice_rows(out.log_q, B, B * (L - 1));
  std::vector<int> prev(out.assignments.begin(), out.assignments.begin() + B * (L - 1));
  out.smoothness = ad::scale(ad::sum(ad::pick(next, prev)), -inv_b);

  const LossWeights& w = cfg.weights;
  out.total = ad::add(ad::add(ad::add(ad::scale(out.som, w.beta), ad::scale(out.commit, w.gamma)),
                              ad::scale(out.reconstruction, w.theta)),
                      ad::scale(out.smoothness, w.kappa));
  return out;
}

Matrix stack_time_major(const std::vector<Matrix>& blocks) {
  if (blocks.empty()) throw PreconditionError("stack_time_major: no blocks");
  const Eigen::Index n = static_cast<Eigen::Index>(blocks.size());
  const Eigen::Index L = blocks.front().rows(), c = blocks.front().cols();
  Matrix out(L * n, c);
  for (Eigen::Index b = 0; b < n; ++b) {
    const Matrix& m = blocks[static_cast<size_t>(b)];
    if (m.rows() != L || m.cols() != c) throw PreconditionError("stack_time_major: blocks differ in shape");
    for (Eigen::Index s = 0; s < L; ++s) out.row(s * n + b) = m.row(s);
  }
  return out;
}

TdpsomLossValues tdpsom_loss(const ConvaeSomModel& model, const std::vector<Matrix>& segments,
                             const std::vector<Matrix>& conditions) {
  if (segments.size() != conditions.size() || segments.empty()) {
    throw PreconditionError("tdpsom_loss: one condition block per segment required");
  }
  for (size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].rows() != segments.front().rows() || conditions[i].rows() != segments[i].rows()) {
      throw PreconditionError("tdpsom_loss: segments must be contiguous blocks of equal length");
    }
  }
  Tape tape(true);
  TdpsomInputs in;
  in.batch = static_cast<Eigen::Index>(segments.size());
  in.length = segments.front().rows();
  in.x = tape.constant(stack_time_major(segments));
  Var c = tape.constant(stack_time_major(conditions));
  EncodeVars e = model.encode(tape, in.x, c, nullptr);
  in.mean = e.mean;
  in.log_var = e.log_var;
  in.z = e.z;
  in.x_hat = model.decode(tape, e.z, c);
  in.centroids = model.centroids(tape);
  TdpsomLossVars l = tdpsom_loss(in, model);
  return {l.som.scalar(), l.commit.scalar(), l.reconstruction.scalar(), l.smoothness.scalar(),
          l.total.scalar()};
}

}  // namespace afn::som
