#include "afn/audit.hpp"
#include "afn/cluster.hpp"
#include "afn/error.hpp"
#include "afn/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace afn;

namespace {

std::vector<double> csv_numbers(const std::string& s) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos < s.size()) {
    size_t next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    out.push_back(std::stod(s.substr(pos, next - pos)));
    pos = next + 1;
  }
  return out;
}

// 2 + 0.1 t + sin(2 pi t / 7) + 0.3 cos(1.3 t), t = 0..23
const std::vector<double> kSeries = csv_numbers(
    "2.3,2.962081131055406,2.9178612861711395,2.516104047857516,2.106671262272555,1.8180483755365835,"
    "1.8343551437007648,2.415683519360666,3.413536205239861,4.069206813777987,3.7061177735526174,"
    "2.6174819299325285,1.9268188002630322,2.40723803837302,3.638905741087577,4.520575973412212,"
    "4.463749914430531,3.835659279838779,3.3177448715851865,3.1974179671450353,3.412244314230562,"
    "3.9314842172356537,4.697600136780999,5.291380590886829");

// Runs test written out directly from run counts.
double runs_p(const std::vector<int>& bits) {
  double n1 = 0, n2 = 0, runs = 1;
  for (size_t i = 0; i < bits.size(); ++i) {
    (bits[i] ? n1 : n2) += 1;
    if (i > 0 && bits[i] != bits[i - 1]) runs += 1;
  }
  const double n = n1 + n2;
  const double mu = 2 * n1 * n2 / n + 1;
  const double var = 2 * n1 * n2 * (2 * n1 * n2 - n) / (n * n * (n - 1));
  return std::erfc(std::abs(runs - mu) / std::sqrt(var) / std::sqrt(2.0));
}

}  // namespace

TEST(RunsTest, MatchesReferenceImplementation) {
  // statsmodels runstest_1samp(cutoff='median', correction=False)
  const std::vector<double> x{3.1, 1.2, 4.4, 0.5, 2.7, 5.9, 0.1, 3.3, 4.8, 1.9, 2.2, 6.1, 0.7, 3.9};
  EXPECT_NEAR(audit::runs_test(x), 0.09510827950772373, 1e-12);
}

TEST(RunsTest, BinaryMatchesDirectFormula) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<int> b(5 + rng() % 30);
    for (auto& v : b) v = static_cast<int>(rng() % 2);
    b[0] = 0;
    b[1] = 1;
    EXPECT_NEAR(audit::runs_test_binary(b), runs_p(b), 1e-12);
  }
}

TEST(RunsTest, DegenerateInputs) {
  EXPECT_THROW(audit::runs_test(std::vector<double>(12, 1.0)), DomainError);
  EXPECT_THROW(audit::runs_test(std::vector<double>{1, 2, 3}), PreconditionError);
  EXPECT_THROW(audit::runs_test_binary(std::vector<int>{1, 1, 1}), DomainError);
}

TEST(RunsTest, UniformPValuesUnderIidNoise) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n01;
  double s = 0.0;
  const int reps = 4000;
  for (int r = 0; r < reps; ++r) {
    std::vector<double> x(200);
    for (auto& v : x) v = n01(rng);
    s += audit::runs_test(x);
  }
  EXPECT_NEAR(s / reps, 0.5, 0.02);
}

TEST(Acf, MatchesReferenceImplementation) {
  std::vector<double> y(20);
  for (int t = 0; t < 20; ++t) y[static_cast<size_t>(t)] = std::sin(t * 0.7) + t * 0.05;
  const auto r = audit::acf(y, 4);
  const double ref[] = {1.0, 0.6622193284304512, 0.08909736421541184, -0.4331958102901422, -0.6743839000344878};
  for (int k = 0; k <= 4; ++k) EXPECT_NEAR(r[static_cast<size_t>(k)], ref[k], 1e-12);
}

TEST(Acf, RatioCountsSignificantLags) {
  std::vector<double> y(20);
  for (int t = 0; t < 20; ++t) y[static_cast<size_t>(t)] = std::sin(t * 0.7) + t * 0.05;
  // bound 2/sqrt(20) = 0.447: lags 1 and 4 exceed it
  EXPECT_DOUBLE_EQ(audit::acf_ratio(y, 4), 0.5);
  EXPECT_THROW(audit::acf_ratio(y, 20), PreconditionError);
}

TEST(Decompose, OddPeriodMatchesReference) {
  const auto c = audit::decompose(kSeries, 7);
  const auto trend = csv_numbers(
      "2.3507316066562804,2.367257823707804,2.431751405734155,2.596229338249419,2.7662312990630045,"
      "2.839204251585858,2.8547428836896365,2.936583297214244,3.111329328889517,3.2694778671998534,"
      "3.3258411672930737,3.3443470967625255,3.4443846598557624,3.6258988265531915,3.7694711516756976,"
      "3.8112680768397085,3.8365572430352497,3.954790196814721");
  for (size_t i = 0; i < trend.size(); ++i) EXPECT_NEAR(c.trend[i + 3], trend[i], 1e-12);
  const auto seas = csv_numbers(
      "-0.047274902244678736,0.805981299049191,1.0068771744268097,0.31441801401152825,"
      "-0.43526605643828836,-0.884447458897571,-0.7602880699069908");
  for (size_t t = 0; t < kSeries.size(); ++t) EXPECT_NEAR(c.seasonal[t], seas[t % 7], 1e-12);
  for (size_t t = 0; t < kSeries.size(); ++t) EXPECT_NEAR(c.trend[t] + c.seasonal[t] + c.residual[t], kSeries[t], 1e-12);
}

TEST(Decompose, EvenPeriodMatchesReference) {
  const auto c = audit::decompose(kSeries, 4);
  const auto trend = csv_numbers(
      "2.649845524055085,2.482675337399302,2.2042329751506515,2.0562421412797485,2.2070476930885556,"
      "2.651800615739644,3.1671657492513012,3.4263608793042653,3.2657460050036446,2.8721602324559203,"
      "2.6560126314721693,2.885497882849,3.4405010275548973,3.936170072009055,4.074577618504476,"
      "3.8690377590332803,3.572204808224887,3.4527447253744996,3.6372047506985856,4.071431986815787");
  for (size_t i = 0; i < trend.size(); ++i) EXPECT_NEAR(c.trend[i + 2], trend[i], 1e-12);
  const double seas[] = {-0.05764689871508103, -0.02379903789096429, 0.08151569864709043, -6.976204104509193e-05};
  for (size_t t = 0; t < kSeries.size(); ++t) EXPECT_NEAR(c.seasonal[t], seas[t % 4], 1e-12);
}

TEST(Decompose, MultiplicativeSeasonalMatchesReference) {
  const auto c = audit::decompose(kSeries, 7, audit::DecompositionModel::kMultiplicative);
  const double seas[] = {0.9753784011888531, 1.2505744762196453, 1.3210712928904447, 1.1106206068644755,
                         0.8625497423403387, 0.7195492161907221, 0.7602562643055207};
  for (size_t t = 0; t < kSeries.size(); ++t) EXPECT_NEAR(c.seasonal[t], seas[t % 7], 1e-12);
  for (size_t t = 0; t < kSeries.size(); ++t) EXPECT_NEAR(c.trend[t] * c.seasonal[t] * c.residual[t], kSeries[t], 1e-12);
}

TEST(Decompose, LinearTrendIsExtrapolatedExactly) {
  std::vector<double> y(30);
  for (int t = 0; t < 30; ++t) y[static_cast<size_t>(t)] = 1.0 + 0.5 * t;
  const auto c = audit::decompose(y, 7);
  for (int t = 0; t < 30; ++t) EXPECT_NEAR(c.trend[static_cast<size_t>(t)], y[static_cast<size_t>(t)], 1e-9);
}

TEST(ExplainedVariance, SharesOfEnergy) {
  audit::Components c{{1, 1}, {1, -1}, {0, 2}};
  const std::vector<double> orig{2, 2};
  const auto ev = audit::explained_variance(c, orig);
  EXPECT_DOUBLE_EQ(ev.trend, 25.0);
  EXPECT_DOUBLE_EQ(ev.seasonal, 25.0);
  EXPECT_DOUBLE_EQ(ev.residual, 50.0);
  EXPECT_DOUBLE_EQ(ev.residual_std, 1.0);
}

TEST(Audit, IidPanelLooksRandom) {
  auto cfg = benchmark_synth_config(100, 91, 4, 1, 1.0, 3, false);
  const auto set = generate_synthetic(cfg);
  audit::AuditConfig ac;
  ac.repeats = 100;
  const auto rep = audit::audit_dataset(set, ac);
  EXPECT_GT(rep.runs_p_mean, 0.4);
  EXPECT_LT(rep.acf_ratio_mean, 0.15);
  const auto again = audit::audit_dataset(set, ac);
  EXPECT_EQ(rep.to_json(), again.to_json());
}

TEST(Metrics, AmiMatchesReferenceImplementation) {
  // sklearn adjusted_mutual_info_score / mutual_info_score
  const std::vector<int> a{0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 0, 1};
  const std::vector<int> b{0, 0, 1, 1, 1, 2, 2, 2, 0, 0, 0, 1};
  EXPECT_NEAR(metrics::adjusted_mutual_information(a, b), 0.278968861620883, 1e-10);
  EXPECT_NEAR(metrics::mutual_information(a, b), 0.4716171704676137, 1e-12);
  const std::vector<int> c{0, 1, 0, 1, 2, 2, 1, 0, 3, 3, 3, 1, 0, 2, 2, 1};
  const std::vector<int> e{1, 1, 0, 0, 2, 2, 1, 0, 3, 2, 3, 1, 1, 2, 0, 1};
  EXPECT_NEAR(metrics::adjusted_mutual_information(c, e), 0.3665915062169498, 1e-10);
}

TEST(Metrics, AmiProperties) {
  std::mt19937_64 rng(8);
  std::vector<int> a(300), perm{3, 0, 2, 1};
  for (auto& v : a) v = static_cast<int>(rng() % 4);
  std::vector<int> relabel(a.size());
  for (size_t i = 0; i < a.size(); ++i) relabel[i] = perm[static_cast<size_t>(a[i])];
  EXPECT_NEAR(metrics::adjusted_mutual_information(a, relabel), 1.0, 1e-12);
  std::vector<int> b(a.size());
  for (auto& v : b) v = static_cast<int>(rng() % 5);
  EXPECT_NEAR(metrics::adjusted_mutual_information(a, b), 0.0, 0.02);
  EXPECT_NEAR(metrics::adjusted_mutual_information(a, b), metrics::adjusted_mutual_information(b, a), 1e-12);
}

TEST(Metrics, Pearson) {
  const std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8.5}, z{5, 5, 5, 5};
  const auto r = metrics::pearson(x, y);
  ASSERT_TRUE(r.has_value());
  EXPECT_NEAR(*r, 0.9983814394570298, 1e-10);
  EXPECT_FALSE(metrics::pearson(x, z).has_value());
}

TEST(KMeans, ConvergesToLloydFixedPoint) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd pts(90, 2);
  for (int i = 0; i < 90; ++i) {
    pts(i, 0) = n01(rng) * 0.3 + (i % 3) * 4.0;
    pts(i, 1) = n01(rng) * 0.3 - (i % 3) * 2.0;
  }
  const auto res = cluster::kmeans(pts, 3, 1);
  double inertia = 0.0;
  for (int i = 0; i < 90; ++i) {
    const int l = res.labels[static_cast<size_t>(i)];
    EXPECT_EQ(l, cluster::nearest(res.centroids, pts.row(i)));
    inertia += (pts.row(i) - res.centroids.row(l)).squaredNorm();
    EXPECT_EQ(l, res.labels[static_cast<size_t>(i % 3)]);
  }
  EXPECT_NEAR(res.inertia, inertia, 1e-9);
  for (int k = 0; k < 3; ++k) {
    Eigen::RowVectorXd m = Eigen::RowVectorXd::Zero(2);
    int n = 0;
    for (int i = 0; i < 90; ++i) {
      if (res.labels[static_cast<size_t>(i)] == k) {
        m += pts.row(i);
        ++n;
      }
    }
    EXPECT_TRUE((m / n).isApprox(res.centroids.row(k), 1e-12));
  }
}

TEST(KMeans, TooFewDistinctPoints) {
  Eigen::MatrixXd pts = Eigen::MatrixXd::Ones(5, 2);
  EXPECT_THROW(cluster::kmeans(pts, 2, 0), ClusteringError);
  Eigen::MatrixXd c(2, 1);
  c << 0, 2;
  EXPECT_EQ(cluster::nearest(c, Eigen::RowVectorXd::Constant(1, 1.0)), 0);
}
