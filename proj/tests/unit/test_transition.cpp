#include "afn/error.hpp"
#include "afn/metrics.hpp"
#include "afn/transition.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace afn;
using ad::Matrix;
using ad::RowVector;

namespace {

Matrix rnd(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  return m;
}

Matrix simplex_rows(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Matrix m = rnd(r, c, seed).array().exp();
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) /= m.row(i).sum();
  return m;
}

// K = 2 windows of length 2 with d = 1, split by the window mean.
std::shared_ptr<const tm::CentroidWindowClusterer> mean_split_clusterer() {
  Matrix centroids = Matrix::Zero(2, 3);
  centroids(0, 0) = -1.0;
  centroids(1, 0) = 1.0;
  return std::make_shared<tm::CentroidWindowClusterer>(2, RowVector::Zero(3), RowVector::Ones(3), centroids);
}

}  // namespace

TEST(WindowSummary, MeanStdSlope) {
  Matrix s(5, 2);
  s << 1, 4, 2, 4, 4, 4, 7, 4, 0, 0;
  const RowVector w = tm::window_summary(s, 0, 4);
  EXPECT_DOUBLE_EQ(w(0), 3.5);
  EXPECT_DOUBLE_EQ(w(1), 4.0);
  EXPECT_NEAR(w(2), std::sqrt((6.25 + 2.25 + 0.25 + 12.25) / 4.0), 1e-12);
  EXPECT_DOUBLE_EQ(w(3), 0.0);
  // OLS slope of (0,1),(1,2),(2,4),(3,7)
  EXPECT_NEAR(w(4), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(w(5), 0.0);
  EXPECT_THROW(tm::window_summary(s, 2, 4), PreconditionError);
}

TEST(PiVector, CountsAssignments) {
  const std::vector<int> a{0, 2, 2, 1, 2};
  const auto pi = tm::pi_from_assignments(a, 4);
  EXPECT_TRUE(pi.valid());
  EXPECT_DOUBLE_EQ(pi.proportions(2), 0.6);
  EXPECT_DOUBLE_EQ(pi.proportions(3), 0.0);
  EXPECT_THROW(tm::pi_from_assignments(std::vector<int>{4}, 4), PreconditionError);
}

TEST(SummarizeHistory, UsesWindowsStrictlyBeforeT) {
  const auto cm = mean_split_clusterer();
  Matrix s(8, 1);
  s << -1, -1, -1, 1, 1, 1, 1, 100;
  // windows ending at rows 6,5,4: means 1, 1, 1 -> all cluster 1; row 7 unseen
  auto pi = tm::summarize_history(s, 7, 2, 3, *cm);
  EXPECT_DOUBLE_EQ(pi.proportions(1), 1.0);
  // windows ending at 4,3,2: means 1, 0, -1 -> cluster 1, tie (lowest), cluster 0
  pi = tm::summarize_history(s, 5, 2, 3, *cm);
  EXPECT_NEAR(pi.proportions(0), 2.0 / 3.0, 1e-12);
  EXPECT_THROW(tm::summarize_history(s, 4, 2, 3, *cm), PreconditionError);
}

TEST(TransitionLosses, ValuesAndTapeAgree) {
  const Matrix pt = simplex_rows(6, 4, 1), ph = simplex_rows(6, 4, 2);
  Matrix ct = Matrix::Zero(6, 3);
  for (int i = 0; i < 6; ++i) ct(i, i % 3) = 1.0;
  const Matrix cp = simplex_rows(6, 3, 3);
  const auto l = tm::transition_losses(pt, ph, ct, cp);
  double mse = 0.0, ce = 0.0;
  for (int i = 0; i < 6; ++i) {
    mse += std::sqrt((pt.row(i) - ph.row(i)).squaredNorm());
    ce -= std::log(cp(i, i % 3));
  }
  EXPECT_NEAR(l.mse, mse, 1e-12);
  EXPECT_NEAR(l.conditional, ce / 3.0, 1e-12);
  EXPECT_EQ(l.transition, l.mse + l.conditional);
  ad::Tape t(true);
  const auto v = tm::transition_losses(t.constant(pt), t.constant(ph), t.constant(ct), t.constant(cp));
  EXPECT_NEAR(v.mse.scalar(), l.mse, 1e-12);
  EXPECT_NEAR(v.conditional.scalar(), l.conditional, 1e-12);
  EXPECT_EQ(v.transition.scalar(), v.mse.scalar() + v.conditional.scalar());
}

TEST(TransitionModel, GradientsOfBothLosses) {
  tm::TmConfig cfg;
  cfg.K = 2;
  cfg.rho = 2;
  cfg.C = 2;
  cfg.M = 2;
  cfg.dmm_hidden = {4};
  cfg.cond_hidden = {3};
  tm::TransitionModel model(cfg, mean_split_clusterer());
  const Matrix prev = simplex_rows(5, 2, 4), next = simplex_rows(5, 2, 5);
  Matrix ct = Matrix::Zero(5, 2);
  for (int i = 0; i < 5; ++i) ct(i, (i * 7) % 2) = 1.0;
  auto loss = [&](int which) {
    return [&, which](ad::Tape& t) {
      ad::Var ph = model.dmm_forward(t, t.constant(model.dmm_inputs(prev)));
      ad::Var cp = model.cond_forward(t, ph);
      auto l = tm::transition_losses(t.constant(next), ph, t.constant(ct), cp);
      return which == 0 ? l.mse : which == 1 ? l.conditional : l.transition;
    };
  };
  for (int w = 0; w < 3; ++w) EXPECT_LT(afn::testing::gradient_rel_error(loss(w), model.params()), 1e-4) << w;
}

TEST(TransitionModel, PathAndConditions) {
  tm::TmConfig cfg;
  cfg.K = 2;
  cfg.rho = 2;
  cfg.C = 2;
  cfg.M = 3;
  cfg.dmm_hidden = {4};
  tm::TransitionModel model(cfg, mean_split_clusterer());
  const Matrix s = rnd(12, 1, 6);
  const Matrix pis = model.pi_path(s);
  for (Eigen::Index r = 0; r < pis.rows(); ++r) EXPECT_TRUE(tm::PiVector{pis.row(r)}.valid());
  for (Eigen::Index r = cfg.tau() - 1; r < 12; ++r) {
    EXPECT_EQ(pis.row(r), tm::summarize_history(s, r + 1, 2, 3, model.clusters()).proportions);
  }
  for (Eigen::Index r = 0; r < cfg.tau() - 1; ++r) EXPECT_EQ(pis.row(r), pis.row(cfg.tau() - 1));
  const auto next = model.dmm_predict(tm::PiVector{pis.row(11)});
  EXPECT_TRUE(next.valid());
  const auto c = model.condition_of(pis.row(11));
  EXPECT_NEAR(c.distribution.sum(), 1.0, 1e-12);
  Eigen::Index am;
  c.distribution.maxCoeff(&am);
  EXPECT_EQ(c.discrete, am);
  const auto back = tm::TransitionModel::from_json(model.to_json());
  EXPECT_EQ(back.condition_dist(pis), model.condition_dist(pis));
  EXPECT_EQ(back.pi_path(s), pis);
}

TEST(TransitionModel, PretrainRecoversRegimes) {
  const auto set = generate_synthetic(benchmark_synth_config(60, 91, 4, 3, 0.95, 2));
  const auto [norm, stats] = zscore_fit_apply(set);
  tm::TmConfig cfg;
  cfg.K = 5;
  cfg.rho = 3;
  cfg.M = 5;
  cfg.dmm_hidden = {32};
  cfg.epochs = 3;
  cfg.seed = 1;
  tm::PretrainReport rep;
  const auto model = tm::pretrain_tm(norm, cfg, &rep);
  ASSERT_GE(rep.epoch_loss.size(), 2u);
  EXPECT_LT(rep.epoch_loss.back(), rep.epoch_loss.front());
  std::vector<int> truth, found;
  for (size_t i = 0; i < norm.size(); ++i) {
    const Matrix pis = model.pi_path(norm.values[i]);
    const Matrix dist = model.condition_dist(pis);
    for (Eigen::Index t = cfg.tau(); t < pis.rows(); ++t) {
      Eigen::Index k;
      dist.row(t).maxCoeff(&k);
      found.push_back(static_cast<int>(k));
      truth.push_back((*set.regime_labels)[i][static_cast<size_t>(t)]);
    }
  }
  EXPECT_GT(metrics::adjusted_mutual_information(truth, found), 0.2);
}

TEST(TmConfig, ValidationAndJson) {
  tm::TmConfig c;
  c.K = 7;
  EXPECT_EQ(tm::TmConfig::from_json(c.to_json()).K, 7);
  auto j = c.to_json();
  j["rho"] = 1;
  EXPECT_THROW(tm::TmConfig::from_json(j), ConfigError);
}
