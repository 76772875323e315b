#include "afn/error.hpp"
#include "afn/ifm.hpp"
#include "gradcheck.hpp"
#include "model_fixtures.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace afn;
using ad::Matrix;
using ad::RowVector;
using afn::testing::gradient_rel_error;
using afn::testing::by_prefix;
using afn::testing::join;
using afn::testing::tiny_config;
using afn::testing::tiny_model;
using afn::testing::fixture;

namespace {

Matrix rnd(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  return m;
}

}  // namespace

TEST(IfmLoss, TotalIsExactSumInOrder) {
  auto model = tiny_model();
  const auto f = fixture(model);
  ad::Tape t(true);
  const auto v = ifm::values_of(ifm::afn_loss(t, model, f.batch, {}));
  const auto& c = model.config();
  EXPECT_GT(v.transition, 0.0);
  EXPECT_GT(v.forecasting, 0.0);
  EXPECT_EQ(v.total, v.tdpsom + c.tau_w * v.transition + c.eta * v.pred + v.forecasting);
  const auto& w = c.vae.weights;
  EXPECT_EQ(v.tdpsom, w.beta * v.som + w.gamma * v.commit + w.theta * v.reconstruction + w.kappa * v.smoothness);
}

TEST(IfmLoss, DisabledTermsAreZero) {
  auto model = tiny_model();
  const auto f = fixture(model);
  ad::Tape t(true);
  const auto v = ifm::values_of(ifm::afn_loss(t, model, f.batch, {false, false, false}));
  EXPECT_EQ(v.transition, 0.0);
  EXPECT_EQ(v.pred, 0.0);
  EXPECT_EQ(v.forecasting, 0.0);
  EXPECT_EQ(v.total, v.tdpsom);
}

TEST(IfmLoss, GradientsOfEveryTerm) {
  auto model = tiny_model();
  const auto f = fixture(model);
  const auto vae = model.vae_params();
  const ad::ParamList centroid = by_prefix(vae, "som.");
  const ad::ParamList decoder = by_prefix(vae, "vae.dec");
  const ad::ParamList fore = model.forecaster_params();
  const ad::ParamList damp = model.damping_params();
  const ad::ParamList dmm = model.tm().dmm_params();
  ASSERT_FALSE(centroid.empty());
  ASSERT_FALSE(decoder.empty());

  using Pick = std::function<ad::Var(const ifm::AfnLossVars&)>;
  auto loss = [&](Pick pick) {
    return [&, pick](ad::Tape& t) { return pick(ifm::afn_loss(t, model, f.batch, {})); };
  };
  // Stop-gradient inputs (latent targets, condition labels, the SOM
  // neighbourhood) are excluded from each parameter set.
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.tdpsom.commit; }), vae), 1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.tdpsom.reconstruction; }), vae), 1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.tdpsom.smoothness; }), vae), 1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.tdpsom.som; }), centroid), 1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.transition; }), dmm), 1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.pred; }), join({fore, damp, centroid})), 1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.damping_reg; }), damp), 1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.forecasting; }), join({fore, decoder, centroid})),
            1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.total; }), join({fore, damp, dmm, decoder, centroid})),
            1e-4);
  EXPECT_LT(gradient_rel_error(loss([](const auto& v) { return v.objective; }), join({fore, damp, dmm, decoder, centroid})),
            1e-4);
}

TEST(IfmLoss, PredLossMovesCentroids) {
  auto model = tiny_model();
  const auto f = fixture(model);
  ad::Tape t;
  auto v = ifm::afn_loss(t, model, f.batch, {false, true, false});
  t.backward(v.pred);
  const Matrix* g = t.param_grad(model.convae().centroid_param());
  ASSERT_NE(g, nullptr);
  EXPECT_GT(g->norm(), 0.0);
}

TEST(IfmLoss, PredLossIsLinearInDamping) {
  const Matrix nll = rnd(6, 1, 3).cwiseAbs();
  const Matrix D = rnd(6, 1, 4).array().abs().min(1.0);
  EXPECT_EQ(ifm::pred_loss(nll, D * 0.5), 0.5 * ifm::pred_loss(nll, D));
  EXPECT_EQ(ifm::pred_loss(nll, D * 4.0), 4.0 * ifm::pred_loss(nll, D));
  ad::Tape t(true);
  const double a = ifm::pred_loss(t.constant(nll), t.constant(D), 2.0).scalar();
  const double b = ifm::pred_loss(t.constant(nll), t.constant(D * 2.0), 2.0).scalar();
  EXPECT_EQ(b, 2.0 * a);
  EXPECT_EQ(a, ifm::pred_loss(nll, D) / 2.0);
}

TEST(IfmLoss, GaussianNllMatchesDensity) {
  const Matrix y = rnd(3, 2, 5), mu = rnd(3, 2, 6), var = rnd(3, 2, 7).array().exp();
  ad::Tape t(true);
  const Matrix nll = ifm::gaussian_nll(t.constant(y), t.constant(mu), t.constant(var)).value();
  for (int i = 0; i < 3; ++i) {
    double logp = 0.0;
    for (int j = 0; j < 2; ++j) {
      logp += -0.5 * std::log(2.0 * M_PI * var(i, j)) - (y(i, j) - mu(i, j)) * (y(i, j) - mu(i, j)) / (2.0 * var(i, j));
    }
    EXPECT_NEAR(nll(i, 0), -logp, 1e-12);
  }
}

TEST(IfmLoss, FineTuneLossIsEuclidean) {
  RowVector a(3), b(3);
  a << 1, 2, 3;
  b << 1, 5, 7;
  EXPECT_DOUBLE_EQ(ifm::forecast_fine_tune_loss(a, b), 5.0);
}

TEST(Damping, RangeAndAblation) {
  const auto model = tiny_model();
  RowVector p(2), q(2);
  p << 0.25, 0.75;
  q << 0.5, 0.5;
  const double d = model.damping(tm::PiVector{p}, q);
  EXPECT_GT(d, 0.0);
  EXPECT_LT(d, 1.0);
  ifm::Ablation df;
  df.damping = false;
  EXPECT_EQ(tiny_model(df).damping(tm::PiVector{p}, q), 1.0);
  ifm::Ablation no_tm;
  no_tm.tm = false;
  EXPECT_EQ(tiny_model(no_tm).damping(tm::PiVector{p}, q), 1.0);
}

TEST(Forecast, NodePathAndAttentionAreConsistent) {
  const auto model = tiny_model();
  const Matrix hist = rnd(9, 3, 11);
  const auto f = ifm::forecast(model, hist, 3);
  ASSERT_EQ(f.x_hat.rows(), 3);
  ASSERT_EQ(f.latent_path.rows(), 12);
  ASSERT_EQ(f.node_path.size(), 12u);
  ASSERT_EQ(f.conditions.size(), 12u);
  const som::SomGrid g = model.convae().grid();
  for (size_t t = 0; t < f.node_path.size(); ++t) {
    EXPECT_EQ(f.node_path[t], som::som_assign(f.latent_path.row(static_cast<Eigen::Index>(t)), g).index);
  }
  const auto& a = ifm::attention_weights(f);
  ASSERT_EQ(a.rows(), 3);
  ASSERT_EQ(a.cols(), 9);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(a.row(k).sum(), 1.0, 1e-12);
  // conditions of the history come from the TM track
  const auto track = model.condition_track(model.norm_stats().apply(hist));
  for (size_t t = 0; t < 9; ++t) EXPECT_EQ(f.conditions[t].discrete, track.conditions[t].discrete);
  const auto j = f.to_json();
  EXPECT_EQ(j.at("node_path").size(), 12u);
  EXPECT_EQ(j.at("node_path")[0].size(), 2u);
}

TEST(Forecast, Preconditions) {
  const auto model = tiny_model();
  EXPECT_THROW(ifm::forecast(model, rnd(3, 3, 1), 2), PreconditionError);
  EXPECT_THROW(ifm::forecast(model, rnd(9, 2, 1), 2), PreconditionError);
  EXPECT_THROW(ifm::forecast(model, rnd(9, 3, 1), 0), PreconditionError);
  Matrix nan = rnd(9, 3, 1);
  nan(2, 1) = NAN;
  EXPECT_THROW(ifm::forecast(model, nan, 2), PreconditionError);
  ifm::Ablation al;
  al.attention = false;
  const auto f = ifm::forecast(tiny_model(al), rnd(9, 3, 1), 2);
  EXPECT_THROW(ifm::attention_weights(f), UnsupportedError);
  EXPECT_TRUE(f.to_json().at("attention").is_null());
}

TEST(Forecast, Persistence) {
  const Matrix h = rnd(5, 3, 2);
  const Matrix p = ifm::persistence_forecast(h, 4);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(p.row(k), h.row(4));
}

TEST(AfnModel, JsonRoundTripIsExact) {
  const auto model = tiny_model();
  const auto back = ifm::AfnModel::from_json(model.to_json());
  const Matrix h = rnd(9, 3, 3);
  EXPECT_EQ(ifm::forecast(back, h, 3).to_json().dump(), ifm::forecast(model, h, 3).to_json().dump());
}

TEST(Ablation, Names) {
  for (const char* n : {"none", "tm", "al", "df", "fft"}) EXPECT_EQ(ifm::Ablation::from_name(n).name(), n);
  EXPECT_THROW(ifm::Ablation::from_name("xyz"), ConfigError);
}

TEST(TrainAfn, SmallRunIsDeterministic) {
  const auto set = generate_synthetic(benchmark_synth_config(12, 30, 3, 2, 0.9, 4));
  ifm::ModelConfig cfg = tiny_config();
  cfg.tm.epochs = 1;
  cfg.tm.cond_warmup_epochs = 1;
  cfg.tm.mse_warmup_epochs = 1;
  cfg.train.batch_size = 4;
  cfg.train.vae_warmup_epochs = 1;
  cfg.train.stage_a_epochs = 1;
  cfg.train.stage_b_epochs = 2;
  cfg.train.stage_c_epochs = 1;
  cfg.train.damping_warmup_epochs = 1;
  cfg.train.fft_horizon = 2;
  cfg.train.crop_length = 12;
  int epochs = 0;
  const auto a = ifm::train_afn(set, cfg, std::nullopt, [&](const ifm::StageLog&) { ++epochs; });
  const auto b = ifm::train_afn(set, cfg);
  EXPECT_GE(epochs, 5);
  ASSERT_TRUE(a.before_fft.has_value());
  EXPECT_EQ(a.model.to_json().dump(), b.model.to_json().dump());
  EXPECT_NE(a.model.to_json().dump(), a.before_fft->to_json().dump());
  for (const auto& l : a.log) EXPECT_TRUE(std::isfinite(l.mean_loss.total)) << l.stage;
}
