#include "afn/transition.hpp"

#include "afn/cluster.hpp"
#include "afn/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace afn::tm {

namespace {

RowVector row_of(const std::vector<double>& v) {
  return Eigen::Map<const RowVector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> vec_of(const RowVector& r) { return {r.data(), r.data() + r.size()}; }

int argmax(const RowVector& r) {
  Eigen::Index k = 0;
  r.maxCoeff(&k);
  return static_cast<int>(k);
}

}  // namespace

bool PiVector::valid() const {
  return proportions.size() > 0 && (proportions.array() >= 0.0).all() &&
         std::abs(proportions.sum() - 1.0) <= 1e-9;
}

RowVector window_summary(const Matrix& series, Eigen::Index start, int C) {
  if (C < 2 || start < 0 || start + C > series.rows()) throw PreconditionError("window out of range");
  const Eigen::Index d = series.cols();
  const auto w = series.middleRows(start, C);
  RowVector out(3 * d);
  const RowVector mean = w.colwise().mean();
  const double tm = (C - 1) / 2.0;
  double den = 0.0;
  for (int i = 0; i < C; ++i) den += (i - tm) * (i - tm);
  for (Eigen::Index j = 0; j < d; ++j) {
    double var = 0.0, num = 0.0;
    for (int i = 0; i < C; ++i) {
      const double dv = w(i, j) - mean(j);
      var += dv * dv;
      num += (i - tm) * dv;
    }
    out(j) = mean(j);
    out(d + j) = std::sqrt(var / C);
    out(2 * d + j) = num / den;
  }
  return out;
}

CentroidWindowClusterer::CentroidWindowClusterer(int C, RowVector summary_mean,
                                                 RowVector summary_std, Matrix centroids)
    : C_(C), mean_(std::move(summary_mean)), std_(std::move(summary_std)),
      centroids_(std::move(centroids)) {
  if (centroids_.rows() < 2) throw PreconditionError("window clusterer needs K >= 2");
  if (!centroids_.allFinite()) throw PreconditionError("window centroids must be finite");
}

int CentroidWindowClusterer::assign(const Matrix& series, Eigen::Index end) const {
  RowVector s = window_summary(series, end - C_ + 1, C_);
  s = ((s - mean_).array() / std_.array()).matrix();
  return cluster::nearest(centroids_, s);
}

nlohmann::json CentroidWindowClusterer::to_json() const {
  return {{"kind", "centroid"},
          {"C", C_},
          {"summary_mean", vec_of(mean_)},
          {"summary_std", vec_of(std_)},
          {"centroids", nn::matrix_to_json(centroids_)}};
}

std::shared_ptr<const WindowClusterer> window_clusterer_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "centroid") throw SchemaError("unknown window clusterer kind");
  return std::make_shared<CentroidWindowClusterer>(
      j.at("C").get<int>(), row_of(j.at("summary_mean").get<std::vector<double>>()),
      row_of(j.at("summary_std").get<std::vector<double>>()),
      nn::matrix_from_json(j.at("centroids")));
}

std::shared_ptr<const CentroidWindowClusterer> fit_window_clusters(const TimeSeriesSet& train, int K,
                                                                   int C, std::uint64_t seed,
                                                                   int max_windows) {
  if (K < 2) throw PreconditionError("fit_window_clusters: K must be >= 2");
  if (C < 2) throw PreconditionError("fit_window_clusters: C must be >= 2");
  const Eigen::Index T = train.length();
  const Eigen::Index per_series = std::max<Eigen::Index>(0, T - C + 1);
  const auto total = static_cast<Eigen::Index>(train.size()) * per_series;
  if (total < 10 * K) throw PreconditionError("fit_window_clusters: need at least 10*K windows");

  std::vector<std::pair<size_t, Eigen::Index>> windows;
  windows.reserve(static_cast<size_t>(total));
  for (size_t i = 0; i < train.size(); ++i) {
    for (Eigen::Index s = 0; s < per_series; ++s) windows.emplace_back(i, s);
  }
  std::mt19937_64 rng(seed);
  if (max_windows > 0 && static_cast<Eigen::Index>(windows.size()) > max_windows) {
    std::shuffle(windows.begin(), windows.end(), rng);
    windows.resize(static_cast<size_t>(max_windows));
    std::sort(windows.begin(), windows.end());
  }
  const Eigen::Index dim = 3 * train.dims();
  Matrix summaries(static_cast<Eigen::Index>(windows.size()), dim);
  for (size_t w = 0; w < windows.size(); ++w) {
    summaries.row(static_cast<Eigen::Index>(w)) =
        window_summary(train.values[windows[w].first], windows[w].second, C);
  }
  const RowVector mean = summaries.colwise().mean();
  RowVector sd = ((summaries.rowwise() - mean).array().square().colwise().mean()).sqrt();
  if ((sd.array() <= 1e-12).all()) throw ClusteringError("fit_window_clusters: all windows identical");
  for (Eigen::Index j = 0; j < dim; ++j) {
    if (sd(j) <= 1e-12) sd(j) = 1.0;
  }
  const Matrix standardized = (summaries.rowwise() - mean).array().rowwise() / sd.array();
  auto km = cluster::kmeans(standardized, K, rng());
  return std::make_shared<CentroidWindowClusterer>(C, mean, sd, std::move(km.centroids));
}

PiVector pi_from_assignments(std::span<const int> assignments, int K) {
  if (assignments.empty()) throw PreconditionError("pi: no assignments");
  PiVector pi{RowVector::Zero(K)};
  for (int a : assignments) {
    if (a < 0 || a >= K) throw PreconditionError("pi: assignment out of range");
    pi.proportions(a) += 1.0;
  }
  pi.proportions /= static_cast<double>(assignments.size());
  return pi;
}

PiVector summarize_history(const Matrix& series, Eigen::Index t, int C, int M,
                           const WindowClusterer& cm) {
  if (cm.window_length() != C) throw PreconditionError("summarize_history: window length mismatch");
  if (t < C + M) {
    throw PreconditionError("summarize_history: need t >= tau = " + std::to_string(C + M) +
                            " steps of history, got " + std::to_string(t));
  }
  if (t > series.rows()) throw PreconditionError("summarize_history: t beyond series end");
  std::vector<int> assignments;
  assignments.reserve(static_cast<size_t>(M));
  for (int k = 1; k <= M; ++k) assignments.push_back(cm.assign(series, t - k));
  return pi_from_assignments(assignments, cm.K());
}

nlohmann::json TmConfig::to_json() const {
  return {{"K", K},
          {"rho", rho},
          {"C", C},
          {"M", M},
          {"markov_order", markov_order},
          {"dmm_hidden", dmm_hidden},
          {"cond_hidden", cond_hidden},
          {"batch_size", batch_size},
          {"cond_warmup_epochs", cond_warmup_epochs},
          {"mse_warmup_epochs", mse_warmup_epochs},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"max_windows", max_windows},
          {"seed", seed}};
}

TmConfig TmConfig::from_json(const nlohmann::json& j) {
  TmConfig c;
  c.K = j.value("K", c.K);
  c.rho = j.value("rho", c.rho);
  c.C = j.value("C", c.C);
  c.M = j.value("M", c.M);
  c.markov_order = j.value("markov_order", c.markov_order);
  c.dmm_hidden = j.value("dmm_hidden", c.dmm_hidden);
  c.cond_hidden = j.value("cond_hidden", c.cond_hidden);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.cond_warmup_epochs = j.value("cond_warmup_epochs", c.cond_warmup_epochs);
  c.mse_warmup_epochs = j.value("mse_warmup_epochs", c.mse_warmup_epochs);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.max_windows = j.value("max_windows", c.max_windows);
  c.seed = j.value("seed", c.seed);
  if (c.K < 2) throw ConfigError("tm: K must be >= 2");
  if (c.rho < 2) throw ConfigError("tm: rho must be >= 2");
  if (c.C < 2 || c.M < 1) throw ConfigError("tm: need C >= 2 and M >= 1");
  if (c.markov_order < 1) throw ConfigError("tm: markov_order must be >= 1");
  return c;
}

TransitionLosses transition_losses(const Matrix& pi_true, const Matrix& pi_hat, const Matrix& c_true,
                                   const Matrix& c_pred) {
  if (pi_true.rows() != pi_hat.rows() || pi_true.cols() != pi_hat.cols() ||
      c_true.rows() != c_pred.rows() || c_true.cols() != c_pred.cols()) {
    throw PreconditionError("transition_losses: shape mismatch");
  }
  TransitionLosses l;
  l.mse = (pi_true - pi_hat).rowwise().norm().sum();
  const double rho = static_cast<double>(c_true.cols());
  double ce = 0.0;
  for (Eigen::Index i = 0; i < c_true.rows(); ++i) {
    for (Eigen::Index j = 0; j < c_true.cols(); ++j) {
      if (c_true(i, j) > 0.0) ce -= c_true(i, j) * std::log(c_pred(i, j));
    }
  }
  l.conditional = ce / rho;
  l.transition = l.mse + l.conditional;
  return l;
}

TransitionLossVars transition_losses(const ad::Var& pi_true, const ad::Var& pi_hat,
                                     const ad::Var& c_true, const ad::Var& c_pred) {
  TransitionLossVars l;
  l.mse = ad::sum(ad::row_norm(ad::sub(pi_true, pi_hat)));
  const double rho = static_cast<double>(c_true.cols());
  l.conditional = ad::scale(ad::sum(ad::mul(c_true, ad::log(c_pred))), -1.0 / rho);
  l.transition = ad::add(l.mse, l.conditional);
  return l;
}

TransitionModel::TransitionModel(const TmConfig& cfg, std::shared_ptr<const WindowClusterer> clusters)
    : cfg_(cfg), clusters_(std::move(clusters)) {
  if (!clusters_) throw PreconditionError("transition model needs a window clusterer");
  if (clusters_->K() != cfg_.K) throw PreconditionError("clusterer K does not match config K");
  if (clusters_->window_length() != cfg_.C) throw PreconditionError("clusterer C does not match config C");
  if (cfg_.rho < 2) throw PreconditionError("rho must be >= 2");
  nn::Rng rng(cfg_.seed ^ 0x7D1A5EEDull);
  dmm_ = nn::Mlp("tm.dmm", cfg_.K * cfg_.markov_order, cfg_.dmm_hidden, cfg_.K, nn::Activation::kTanh, rng);
  cond_ = nn::Mlp("tm.cond", cfg_.K, cfg_.cond_hidden, cfg_.rho, nn::Activation::kTanh, rng);
}

Matrix TransitionModel::pi_path(const Matrix& series) const {
  const Eigen::Index T = series.rows();
  const Eigen::Index first = tau() - 1;
  if (T < tau()) {
    throw PreconditionError("pi_path: series needs at least tau = " + std::to_string(tau()) + " steps");
  }
  Matrix out(T, cfg_.K);
  for (Eigen::Index s = first; s < T; ++s) {
    out.row(s) = summarize_history(series, s + 1, cfg_.C, cfg_.M, *clusters_).proportions;
  }
  for (Eigen::Index s = 0; s < first; ++s) out.row(s) = out.row(first);
  return out;
}

Matrix TransitionModel::dmm_inputs(const Matrix& pis) const {
  const int order = cfg_.markov_order;
  Matrix out(pis.rows(), cfg_.K * order);
  for (Eigen::Index s = 0; s < pis.rows(); ++s) {
    for (int o = 0; o < order; ++o) {
      out.block(s, o * cfg_.K, 1, cfg_.K) = pis.row(std::max<Eigen::Index>(0, s - o));
    }
  }
  return out;
}

ad::Var TransitionModel::dmm_forward(ad::Tape& tape, const ad::Var& inputs) const {
  return ad::softmax_rows(dmm_(tape, inputs));
}

ad::Var TransitionModel::cond_logits(ad::Tape& tape, const ad::Var& pis) const {
  return cond_(tape, pis);
}

ad::Var TransitionModel::cond_forward(ad::Tape& tape, const ad::Var& pis) const {
  return ad::softmax_rows(cond_(tape, pis));
}

Matrix TransitionModel::dmm_predict(const Matrix& inputs) const {
  ad::Tape tape(true);
  return dmm_forward(tape, tape.constant(inputs)).value();
}

PiVector TransitionModel::dmm_predict(const PiVector& prev) const {
  if (prev.K() != cfg_.K) throw PreconditionError("dmm_predict: pi dimension mismatch");
  return {dmm_predict(dmm_inputs(prev.proportions)).row(0)};
}

Matrix TransitionModel::condition_dist(const Matrix& pis) const {
  ad::Tape tape(true);
  return cond_forward(tape, tape.constant(pis)).value();
}

Condition TransitionModel::condition_of(const RowVector& pi) const {
  if (pi.size() != cfg_.K) throw PreconditionError("condition_of: pi dimension mismatch");
  Condition c;
  c.distribution = condition_dist(pi).row(0);
  c.discrete = argmax(c.distribution);
  return c;
}

ad::ParamList TransitionModel::params() {
  ad::ParamList p;
  dmm_.collect(p);
  cond_.collect(p);
  return p;
}

ad::ParamList TransitionModel::dmm_params() {
  ad::ParamList p;
  dmm_.collect(p);
  return p;
}

ad::ParamList TransitionModel::cond_params() {
  ad::ParamList p;
  cond_.collect(p);
  return p;
}

nlohmann::json TransitionModel::to_json() const {
  auto& self = const_cast<TransitionModel&>(*this);
  return {{"config", cfg_.to_json()},
          {"clusters", clusters_->to_json()},
          {"weights", nn::to_json(self.params())}};
}

TransitionModel TransitionModel::from_json(const nlohmann::json& j) {
  TransitionModel tm(TmConfig::from_json(j.at("config")), window_clusterer_from_json(j.at("clusters")));
  nn::from_json(j.at("weights"), tm.params());
  return tm;
}

namespace {

struct PiPairs {
  Matrix inputs;   // dmm inputs at s
  Matrix current;  // pi_s
  Matrix next;     // pi_{s+1}
};

PiPairs collect_pairs(const TransitionModel& tm, const TimeSeriesSet& train) {
  std::vector<Matrix> ins, curs, nexts;
  Eigen::Index rows = 0;
  for (const Matrix& series : train.values) {
    const Matrix pis = tm.pi_path(series);
    const Matrix inputs = tm.dmm_inputs(pis);
    const Eigen::Index first = tm.tau() - 1;
    const Eigen::Index n = series.rows() - 1 - first;
    if (n <= 0) continue;
    ins.push_back(inputs.middleRows(first, n));
    curs.push_back(pis.middleRows(first, n));
    nexts.push_back(pis.middleRows(first + 1, n));
    rows += n;
  }
  if (rows == 0) throw PreconditionError("pretrain_tm: series too short for tau");
  PiPairs p;
  p.inputs.resize(rows, ins.front().cols());
  p.current.resize(rows, tm.K());
  p.next.resize(rows, tm.K());
  Eigen::Index r = 0;
  for (size_t k = 0; k < ins.size(); ++k) {
    const Eigen::Index n = ins[k].rows();
    p.inputs.middleRows(r, n) = ins[k];
    p.current.middleRows(r, n) = curs[k];
    p.next.middleRows(r, n) = nexts[k];
    r += n;
  }
  return p;
}

Matrix take_rows(const Matrix& m, std::span<const Eigen::Index> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

double mean_transition_loss(const TransitionModel& tm, const PiPairs& pairs) {
  const Matrix pred = tm.dmm_predict(pairs.inputs);
  const auto l = transition_losses(pairs.next, pred, tm.condition_dist(pairs.next),
                                   tm.condition_dist(pred));
  return l.transition / static_cast<double>(pairs.next.rows());
}

}  // namespace

TransitionModel pretrain_tm(const TimeSeriesSet& train, const TmConfig& cfg, PretrainReport* report) {
  if (train.length() <= cfg.tau()) throw PreconditionError("pretrain_tm: need tau < T");
  auto clusters = fit_window_clusters(train, cfg.K, cfg.C, cfg.seed, cfg.max_windows);
  TransitionModel tm(cfg, clusters);
  const PiPairs pairs = collect_pairs(tm, train);
  const Eigen::Index n = pairs.next.rows();

  std::vector<double> history;
  history.push_back(mean_transition_loss(tm, pairs));

  nn::Rng rng(cfg.seed ^ 0xB00B5ull);
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  // rho-means labels of the observed pi-vectors seed the conditional network
  const auto km = cluster::kmeans(pairs.current, cfg.rho, cfg.seed ^ 0xC0DEull);
  std::vector<int> labels = km.labels;

  nn::Adam cond_opt({cfg.learning_rate * 5.0});
  nn::Adam dmm_opt({cfg.learning_rate});
  ad::ParamList cond_p = tm.cond_params();
  ad::ParamList dmm_p = tm.dmm_params();
  nn::Adam joint_opt({cfg.learning_rate});

  const int total_epochs = cfg.cond_warmup_epochs + cfg.mse_warmup_epochs + cfg.epochs;
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const bool cond_warm = epoch < cfg.cond_warmup_epochs;
    const bool mse_warm = !cond_warm && epoch < cfg.cond_warmup_epochs + cfg.mse_warmup_epochs;
    for (Eigen::Index b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const Eigen::Index bn = std::min<Eigen::Index>(cfg.batch_size, n - b0);
      std::span<const Eigen::Index> idx(order.data() + b0, static_cast<size_t>(bn));
      ad::Tape tape;
      if (cond_warm) {
        std::vector<int> y(static_cast<size_t>(bn));
        for (Eigen::Index i = 0; i < bn; ++i) y[static_cast<size_t>(i)] = labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
        ad::Var logp = ad::log_softmax_rows(tm.cond_logits(tape, tape.constant(take_rows(pairs.current, idx))));
        ad::Var loss = ad::scale(ad::sum(ad::pick(logp, y)), -1.0 / static_cast<double>(bn));
        tape.backward(loss);
        tape.accumulate(cond_p);
        cond_opt.step(cond_p);
        continue;
      }
      ad::Var inputs = tape.constant(take_rows(pairs.inputs, idx));
      ad::Var target = tape.constant(take_rows(pairs.next, idx));
      ad::Var pred = tm.dmm_forward(tape, inputs);
      ad::Var loss;
      if (mse_warm) {
        loss = ad::sum(ad::row_norm(ad::sub(target, pred)));
      } else {
        ad::Var c_true = ad::stop_gradient(tm.cond_forward(tape, target));
        ad::Var c_pred = tm.cond_forward(tape, pred);
        loss = transition_losses(target, pred, c_true, c_pred).transition;
      }
      loss = ad::scale(loss, 1.0 / static_cast<double>(bn));
      if (!std::isfinite(loss.scalar())) {
        throw TrainingError("pretrain_tm: loss diverged at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      // The conditional network stays at its warm start: trained on both
      // sides of L_Conditional it collapses to a single confident condition.
      tape.accumulate(dmm_p);
      (mse_warm ? dmm_opt : joint_opt).step(dmm_p);
    }
    const double l = mean_transition_loss(tm, pairs);
    if (!std::isfinite(l)) throw TrainingError("pretrain_tm: loss diverged at epoch " + std::to_string(epoch));
    history.push_back(l);
  }
  if (report) report->epoch_loss = std::move(history);
  return tm;
}

}  // namespace afn::tm
