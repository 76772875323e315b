#include "afn/audit.hpp"

#include "afn/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace afn::audit {

namespace {

bool is_constant(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); });
}

double median(std::span<const double> x) {
  std::vector<double> v(x.begin(), x.end());
  const size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2));
  return 0.5 * (lo + hi);
}

double ols_slope(std::span<const double> y) {
  const double n = static_cast<double>(y.size());
  const double tm = (n - 1.0) / 2.0;
  const double ym = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    num += (static_cast<double>(i) - tm) * (y[i] - ym);
    den += (static_cast<double>(i) - tm) * (static_cast<double>(i) - tm);
  }
  return den > 0.0 ? num / den : 0.0;
}

double sum_sq(std::span<const double> x) {
  return std::inner_product(x.begin(), x.end(), x.begin(), 0.0);
}

}  // namespace

double runs_test_binary(std::span<const int> bits) {
  if (bits.size() < 2) throw DomainError("runs test: need at least 2 values");
  double n1 = 0.0, n2 = 0.0, runs = 1.0;
  for (size_t i = 0; i < bits.size(); ++i) {
    (bits[i] != 0 ? n1 : n2) += 1.0;
    if (i > 0 && (bits[i] != 0) != (bits[i - 1] != 0)) runs += 1.0;
  }
  if (n1 == 0.0 || n2 == 0.0) throw DomainError("runs test: only one category present");
  const double n = n1 + n2;
  const double mu = 2.0 * n1 * n2 / n + 1.0;
  const double var = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n * n * (n - 1.0));
  if (var <= 0.0) return 1.0;
  const double z = (runs - mu) / std::sqrt(var);
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

double runs_test(std::span<const double> series) {
  if (series.size() < 10) throw PreconditionError("runs test: need at least 10 values");
  if (is_constant(series)) throw DomainError("runs test: constant series");
  const double med = median(series);
  std::vector<int> bits;
  bits.reserve(series.size());
  for (double v : series) {
    if (v > med) bits.push_back(1);
    else if (v < med) bits.push_back(0);
  }
  return runs_test_binary(bits);
}

std::vector<double> acf(std::span<const double> series, int max_lags) {
  const size_t T = series.size();
  if (max_lags < 1 || static_cast<size_t>(max_lags) >= T) {
    throw PreconditionError("acf: need 1 <= max_lags < T");
  }
  if (is_constant(series)) throw DomainError("acf: constant series");
  const double mean = std::accumulate(series.begin(), series.end(), 0.0) / static_cast<double>(T);
  double c0 = 0.0;
  for (double v : series) c0 += (v - mean) * (v - mean);
  std::vector<double> r(static_cast<size_t>(max_lags) + 1);
  r[0] = 1.0;
  for (int k = 1; k <= max_lags; ++k) {
    double ck = 0.0;
    for (size_t t = static_cast<size_t>(k); t < T; ++t) {
      ck += (series[t] - mean) * (series[t - static_cast<size_t>(k)] - mean);
    }
    r[static_cast<size_t>(k)] = ck / c0;
  }
  return r;
}

double acf_ratio(std::span<const double> series, int max_lags) {
  const auto r = acf(series, max_lags);
  const double bound = 2.0 / std::sqrt(static_cast<double>(series.size()));
  int hits = 0;
  for (int k = 1; k <= max_lags; ++k) {
    if (std::abs(r[static_cast<size_t>(k)]) > bound) ++hits;
  }
  return static_cast<double>(hits) / max_lags;
}

Components decompose(std::span<const double> series, int period, DecompositionModel model) {
  const auto T = static_cast<int>(series.size());
  if (period < 1) throw PreconditionError("decompose: period must be >= 1");
  if (T < 2 * period) throw PreconditionError("decompose: need T >= 2 * period");
  const bool mult = model == DecompositionModel::kMultiplicative;
  if (mult && std::any_of(series.begin(), series.end(), [](double v) { return v <= 0.0; })) {
    throw DomainError("decompose: multiplicative model needs strictly positive values");
  }

  Components c;
  c.trend.assign(static_cast<size_t>(T), 0.0);
  // centred moving average; even periods use the 2 x period filter
  const int half = period / 2;
  std::vector<double> w;
  if (period % 2 == 1) {
    w.assign(static_cast<size_t>(period), 1.0 / period);
  } else {
    w.assign(static_cast<size_t>(period) + 1, 1.0 / period);
    w.front() = w.back() = 0.5 / period;
  }
  const int lo = half, hi = T - 1 - half;
  for (int t = lo; t <= hi; ++t) {
    double s = 0.0;
    for (int k = -half; k <= half; ++k) s += w[static_cast<size_t>(k + half)] * series[static_cast<size_t>(t + k)];
    c.trend[static_cast<size_t>(t)] = s;
  }
  if (period > 1) {
    const int span_len = std::min(period, hi - lo + 1);
    std::span<const double> head(c.trend.data() + lo, static_cast<size_t>(span_len));
    std::span<const double> tail(c.trend.data() + hi - span_len + 1, static_cast<size_t>(span_len));
    const double s_head = ols_slope(head), s_tail = ols_slope(tail);
    const double head_mean = std::accumulate(head.begin(), head.end(), 0.0) / span_len;
    const double tail_mean = std::accumulate(tail.begin(), tail.end(), 0.0) / span_len;
    const double head_center = lo + (span_len - 1) / 2.0;
    const double tail_center = hi - (span_len - 1) / 2.0;
    for (int t = 0; t < lo; ++t) c.trend[static_cast<size_t>(t)] = head_mean + s_head * (t - head_center);
    for (int t = hi + 1; t < T; ++t) c.trend[static_cast<size_t>(t)] = tail_mean + s_tail * (t - tail_center);
  }
  if (mult && std::any_of(c.trend.begin(), c.trend.end(), [](double v) { return v <= 0.0; })) {
    throw DomainError("decompose: extrapolated trend is non-positive");
  }

  std::vector<double> phase_sum(static_cast<size_t>(period), 0.0), phase_n(static_cast<size_t>(period), 0.0);
  for (int t = lo; t <= hi; ++t) {
    const double detr = mult ? series[static_cast<size_t>(t)] / c.trend[static_cast<size_t>(t)]
                             : series[static_cast<size_t>(t)] - c.trend[static_cast<size_t>(t)];
    phase_sum[static_cast<size_t>(t % period)] += detr;
    phase_n[static_cast<size_t>(t % period)] += 1.0;
  }
  std::vector<double> phase(static_cast<size_t>(period));
  for (int p = 0; p < period; ++p) {
    phase[static_cast<size_t>(p)] = phase_n[static_cast<size_t>(p)] > 0 ? phase_sum[static_cast<size_t>(p)] / phase_n[static_cast<size_t>(p)] : (mult ? 1.0 : 0.0);
  }
  const double centre = std::accumulate(phase.begin(), phase.end(), 0.0) / period;
  for (double& v : phase) v = mult ? v / centre : v - centre;

  c.seasonal.resize(static_cast<size_t>(T));
  c.residual.resize(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    const auto i = static_cast<size_t>(t);
    c.seasonal[i] = phase[static_cast<size_t>(t % period)];
    c.residual[i] = mult ? series[i] / (c.trend[i] * c.seasonal[i])
                         : series[i] - c.trend[i] - c.seasonal[i];
  }
  return c;
}

ExplainedVariance explained_variance(const Components& c, std::span<const double> original) {
  const size_t n = original.size();
  if (c.trend.size() != n || c.seasonal.size() != n || c.residual.size() != n) {
    throw PreconditionError("explained_variance: length mismatch");
  }
  const double total = sum_sq(original);
  if (!(total > 0.0)) throw DomainError("explained_variance: zero-energy series");
  ExplainedVariance ev;
  ev.trend = 100.0 * sum_sq(c.trend) / total;
  ev.seasonal = 100.0 * sum_sq(c.seasonal) / total;
  ev.residual = 100.0 * sum_sq(c.residual) / total;
  const double rm = std::accumulate(c.residual.begin(), c.residual.end(), 0.0) / static_cast<double>(n);
  double v = 0.0;
  for (double r : c.residual) v += (r - rm) * (r - rm);
  ev.residual_std = std::sqrt(v / static_cast<double>(n));
  return ev;
}

nlohmann::json AuditReport::to_json() const {
  return {{"runs_p_mean", runs_p_mean},
          {"runs_p_std", runs_p_std},
          {"acf_ratio_mean", acf_ratio_mean},
          {"acf_ratio_std", acf_ratio_std},
          {"explained_variance",
           {{"trend", explained_variance.trend},
            {"seasonal", explained_variance.seasonal},
            {"residual", explained_variance.residual}}},
          {"residual_std", explained_variance.residual_std},
          {"n_samples", n_samples},
          {"sample_length", sample_length},
          {"repeats", repeats},
          {"skipped", skipped}};
}

AuditReport audit_dataset(const TimeSeriesSet& set, const AuditConfig& cfg) {
  if (set.size() == 0) throw PreconditionError("audit: empty dataset");
  if (cfg.n < 1 || cfg.repeats < 1) throw PreconditionError("audit: n and repeats must be >= 1");
  const auto T = static_cast<int>(set.length());
  if (cfg.sample_length > T) throw PreconditionError("audit: sample_length exceeds series length");
  const Eigen::Index d = set.dims();

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<size_t> pick_series(0, set.size() - 1);
  std::uniform_int_distribution<int> pick_offset(0, T - cfg.sample_length);

  AuditReport rep;
  rep.n_samples = cfg.n;
  rep.sample_length = cfg.sample_length;
  rep.repeats = cfg.repeats;

  std::vector<double> runs_per_repeat, acf_per_repeat;
  std::vector<double> slice(static_cast<size_t>(cfg.sample_length));
  for (int r = 0; r < cfg.repeats; ++r) {
    double runs_sum = 0.0, acf_sum = 0.0;
    int runs_n = 0, acf_n = 0;
    for (int s = 0; s < cfg.n; ++s) {
      const Matrix& m = set.values[pick_series(rng)];
      const int off = pick_offset(rng);
      double p_acc = 0.0, a_acc = 0.0;
      int p_cnt = 0, a_cnt = 0;
      for (Eigen::Index j = 0; j < d; ++j) {
        for (int t = 0; t < cfg.sample_length; ++t) slice[static_cast<size_t>(t)] = m(off + t, j);
        try {
          p_acc += runs_test(slice);
          ++p_cnt;
        } catch (const DomainError&) {
        }
        try {
          a_acc += acf_ratio(slice, std::min(cfg.max_lags, cfg.sample_length - 1));
          ++a_cnt;
        } catch (const DomainError&) {
        }
      }
      if (p_cnt == 0 || a_cnt == 0) {
        ++rep.skipped;
        continue;
      }
      runs_sum += p_acc / p_cnt;
      acf_sum += a_acc / a_cnt;
      ++runs_n;
      ++acf_n;
    }
    if (runs_n > 0) {
      runs_per_repeat.push_back(runs_sum / runs_n);
      acf_per_repeat.push_back(acf_sum / acf_n);
    }
  }
  auto mean_std = [](const std::vector<double>& v) -> std::pair<double, double> {
    if (v.empty()) return {0.0, 0.0};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size()))};
  };
  std::tie(rep.runs_p_mean, rep.runs_p_std) = mean_std(runs_per_repeat);
  std::tie(rep.acf_ratio_mean, rep.acf_ratio_std) = mean_std(acf_per_repeat);

  if (T >= 2 * cfg.period) {
    ExplainedVariance acc;
    int count = 0;
    std::vector<double> col(static_cast<size_t>(T));
    for (const Matrix& m : set.values) {
      for (Eigen::Index j = 0; j < d; ++j) {
        for (int t = 0; t < T; ++t) col[static_cast<size_t>(t)] = m(t, j);
        try {
          const auto ev = explained_variance(decompose(col, cfg.period), col);
          acc.trend += ev.trend;
          acc.seasonal += ev.seasonal;
          acc.residual += ev.residual;
          acc.residual_std += ev.residual_std;
          ++count;
        } catch (const DomainError&) {
        }
      }
    }
    if (count > 0) {
      acc.trend /= count;
      acc.seasonal /= count;
      acc.residual /= count;
      acc.residual_std /= count;
    }
    rep.explained_variance = acc;
  }
  return rep;
}

}  // namespace afn::audit
