#include "afn/data.hpp"
#include "afn/error.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

using namespace afn;

namespace {

TimeSeriesSet parse(const std::string& text, const std::vector<std::string>& schema, CsvOptions opts = {}) {
  std::istringstream in(text);
  return parse_csv(in, schema, opts);
}

}  // namespace

TEST(Csv, KeepsSchemaOrderAndSortsTimestamps) {
  const auto set = parse(
      "timestamp,b,series_id,a,extra\n"
      "2,20,s1,2,9\n"
      "10,30,s1,3,9\n"
      "1,10,s1,1,9\n"
      "1,5,s0,7,9\n"
      "2,6,s0,8,9\n"
      "10,7,s0,9,9\n",
      {"a", "b"});
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set.feature_names, (std::vector<std::string>{"a", "b"}));
  const int s1 = set.series_ids[0] == "s1" ? 0 : 1;
  // numeric ordering puts 10 last
  EXPECT_EQ(set.values[static_cast<size_t>(s1)](2, 0), 3.0);
  EXPECT_EQ(set.values[static_cast<size_t>(s1)](0, 1), 10.0);
}

TEST(Csv, ImputesForwardThenBackward) {
  const auto set = parse("series_id,timestamp,a\ns,1,\ns,2,4\ns,3,\ns,4,6\n", {"a"});
  const Matrix& v = set.values[0];
  EXPECT_EQ(v(0, 0), 4.0);
  EXPECT_EQ(v(2, 0), 4.0);
  EXPECT_EQ(v(3, 0), 6.0);
}

TEST(Csv, Errors) {
  EXPECT_THROW(parse("", {"a"}), SchemaError);
  EXPECT_THROW(parse("series_id,timestamp,b\ns,1,2\n", {"a"}), SchemaError);
  EXPECT_THROW(parse("series_id,timestamp,a\ns,1,abc\n", {"a"}), ParseError);
  EXPECT_THROW(parse("series_id,timestamp,a\ns,1,\ns,2,\n", {"a"}), ParseError);
  EXPECT_THROW(parse("series_id,timestamp,a\ns,1,2\ns,2,\n", {"a"}, {false, LengthPolicy::kTruncate}), ParseError);
}

TEST(Csv, UnequalLengthsTruncate) {
  const auto set = parse("series_id,timestamp,a\nx,1,1\nx,2,2\nx,3,3\ny,1,4\ny,2,5\n", {"a"});
  EXPECT_EQ(set.length(), 2);
  EXPECT_NO_THROW(set.validate());
}

TEST(Csv, WriteReadRoundTrip) {
  const auto set = generate_synthetic(benchmark_synth_config(3, 20, 4, 2, 0.9, 5));
  const auto path = (std::filesystem::temp_directory_path() / "afn_roundtrip.csv").string();
  write_csv(set, path);
  const auto back = load_csv(path, set.feature_names);
  std::remove(path.c_str());
  ASSERT_EQ(back.size(), set.size());
  for (size_t i = 0; i < set.size(); ++i) {
    const size_t j = static_cast<size_t>(
        std::find(back.series_ids.begin(), back.series_ids.end(), set.series_ids[i]) - back.series_ids.begin());
    ASSERT_LT(j, back.size());
    EXPECT_TRUE(back.values[j].isApprox(set.values[i], 1e-12));
  }
}

TEST(Zscore, RoundTripAndMoments) {
  const auto set = generate_synthetic(benchmark_synth_config(6, 30, 5, 3, 0.9, 2));
  const auto [norm, stats] = zscore_fit_apply(set);
  // pooled moments of the normalized panel
  for (int j = 0; j < 5; ++j) {
    double s = 0.0, s2 = 0.0, n = 0.0;
    for (const auto& m : norm.values) {
      s += m.col(j).sum();
      s2 += m.col(j).squaredNorm();
      n += static_cast<double>(m.rows());
    }
    EXPECT_NEAR(s / n, 0.0, 1e-12);
    EXPECT_NEAR(s2 / n, 1.0, 1e-12);
  }
  const auto back = stats.invert(norm);
  for (size_t i = 0; i < set.size(); ++i) EXPECT_LT((back.values[i] - set.values[i]).cwiseAbs().maxCoeff(), 1e-9);
  const auto js = NormStats::from_json(stats.to_json());
  EXPECT_EQ(js.mean, stats.mean);
  EXPECT_EQ(js.std, stats.std);
}

TEST(Zscore, ConstantFeatureKeepsUnitStd) {
  TimeSeriesSet set;
  set.feature_names = {"a", "b"};
  set.series_ids = {"s"};
  Matrix m(4, 2);
  m << 1, 5, 2, 5, 3, 5, 4, 5;
  set.values = {m};
  const auto st = fit_zscore(set);
  EXPECT_EQ(st.std(1), 1.0);
}

TEST(Split, PartitionsSeries) {
  const auto set = generate_synthetic(benchmark_synth_config(10, 15, 3, 2, 0.9, 3));
  const auto sp = split(set, 0.75, 11);
  EXPECT_EQ(sp.train.size(), 8u);  // round(7.5)
  EXPECT_EQ(sp.test.size(), 2u);
  std::set<std::string> all(sp.train.series_ids.begin(), sp.train.series_ids.end());
  all.insert(sp.test.series_ids.begin(), sp.test.series_ids.end());
  EXPECT_EQ(all.size(), 10u);
  const auto again = split(set, 0.75, 11);
  EXPECT_EQ(again.train.series_ids, sp.train.series_ids);
  EXPECT_THROW(split(set, 1.0, 1), PreconditionError);
}

TEST(Synth, DeterministicAndValid) {
  const auto cfg = benchmark_synth_config(5, 40, 8, 3, 0.95, 7);
  const auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  ASSERT_TRUE(a.regime_labels.has_value());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.values[i], b.values[i]);
  EXPECT_NO_THROW(a.validate());
  for (const auto& l : *a.regime_labels) {
    for (int r : l) EXPECT_TRUE(r >= 0 && r < 3);
  }
  const auto rt = SynthConfig::from_json(cfg.to_json());
  const auto c = generate_synthetic(rt);
  EXPECT_EQ(c.values[0], a.values[0]);
}

TEST(Synth, StayProbabilityMatchesTransitions) {
  const auto set = generate_synthetic(benchmark_synth_config(200, 91, 4, 3, 0.9, 9));
  double stay = 0.0, total = 0.0;
  for (const auto& l : *set.regime_labels) {
    for (size_t t = 1; t < l.size(); ++t) {
      stay += l[t] == l[t - 1] ? 1.0 : 0.0;
      total += 1.0;
    }
  }
  EXPECT_NEAR(stay / total, 0.9, 0.01);
}

TEST(Synth, NullFeatureIgnoresRegime) {
  auto cfg = benchmark_synth_config(300, 40, 4, 2, 0.5, 4);
  const auto set = generate_synthetic(cfg);
  ASSERT_FALSE(cfg.null_features.empty());
  const int j = cfg.null_features.front();
  double m[2] = {0, 0}, n[2] = {0, 0};
  for (size_t i = 0; i < set.size(); ++i) {
    for (Eigen::Index t = 0; t < set.length(); ++t) {
      const int r = (*set.regime_labels)[i][static_cast<size_t>(t)];
      m[r] += set.values[i](t, j);
      n[r] += 1.0;
    }
  }
  EXPECT_NEAR(m[0] / n[0], m[1] / n[1], 0.05);
}

TEST(Synth, ConfigValidation) {
  auto cfg = benchmark_synth_config(5, 10, 3, 2, 0.9, 1);
  cfg.transition[0][0] = 0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = benchmark_synth_config(5, 10, 3, 2, 0.9, 1);
  cfg.null_features = {3};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = benchmark_synth_config(5, 10, 3, 1, 1.0, 1);
  EXPECT_NO_THROW(cfg.validate());
}
