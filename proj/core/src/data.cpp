#include "afn/data.hpp"

#include "afn/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace afn {

namespace {

const char* const kTable1Names[] = {
    "total_time_spent",      "late_night_games",  "cash_added",           "cash_games_played",
    "win_percentage",        "deposit_limit_requests", "invalid_declarations", "drop_adherence",
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NaN" || cell == "nan" || cell == "NA" || cell == "null";
}

std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

void impute_column(Matrix& m, Eigen::Index col) {
  const Eigen::Index T = m.rows();
  // forward fill
  for (Eigen::Index t = 1; t < T; ++t) {
    if (std::isnan(m(t, col)) && !std::isnan(m(t - 1, col))) m(t, col) = m(t - 1, col);
  }
  // back fill the leading gap
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    if (std::isnan(m(t, col)) && !std::isnan(m(t + 1, col))) m(t, col) = m(t + 1, col);
  }
}

}  // namespace

std::vector<std::string> default_feature_names(int d) {
  std::vector<std::string> names;
  for (int j = 0; j < d; ++j) {
    if (j < static_cast<int>(std::size(kTable1Names))) {
      names.emplace_back(kTable1Names[j]);
    } else {
      names.push_back("feature_" + std::to_string(j));
    }
  }
  return names;
}

int TimeSeriesSet::feature_index(const std::string& name) const {
  auto it = std::find(feature_names.begin(), feature_names.end(), name);
  return it == feature_names.end() ? -1 : static_cast<int>(it - feature_names.begin());
}

TimeSeriesSet TimeSeriesSet::subset(const std::vector<size_t>& idx) const {
  TimeSeriesSet out;
  out.feature_names = feature_names;
  out.sampling_period = sampling_period;
  if (regime_labels) out.regime_labels.emplace();
  for (size_t i : idx) {
    out.series_ids.push_back(series_ids.at(i));
    out.values.push_back(values.at(i));
    if (regime_labels) out.regime_labels->push_back(regime_labels->at(i));
  }
  return out;
}

void TimeSeriesSet::validate() const {
  if (series_ids.size() != values.size()) throw PreconditionError("series id count != series count");
  const Eigen::Index T = length();
  for (const Matrix& m : values) {
    if (m.rows() != T || m.cols() != dims()) throw PreconditionError("series shapes differ");
    if (!m.allFinite()) throw PreconditionError("series contain non-finite values");
  }
  if (regime_labels) {
    if (regime_labels->size() != values.size()) throw PreconditionError("label count mismatch");
    for (const auto& l : *regime_labels) {
      if (static_cast<Eigen::Index>(l.size()) != T) throw PreconditionError("label length mismatch");
      for (int r : l) {
        if (r < 0) throw PreconditionError("negative regime label");
      }
    }
  }
}

Matrix NormStats::apply(const Matrix& x) const {
  Matrix z = x;
  z.rowwise() -= mean.transpose();
  z.array().rowwise() /= std.transpose().array();
  return z;
}

Matrix NormStats::invert(const Matrix& z) const {
  Matrix x = z;
  x.array().rowwise() *= std.transpose().array();
  x.rowwise() += mean.transpose();
  return x;
}

TimeSeriesSet NormStats::apply(const TimeSeriesSet& set) const {
  TimeSeriesSet out = set;
  for (Matrix& m : out.values) m = apply(m);
  return out;
}

TimeSeriesSet NormStats::invert(const TimeSeriesSet& set) const {
  TimeSeriesSet out = set;
  for (Matrix& m : out.values) m = invert(m);
  return out;
}

nlohmann::json NormStats::to_json() const {
  return {{"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
          {"std", std::vector<double>(std.data(), std.data() + std.size())}};
}

NormStats NormStats::from_json(const nlohmann::json& j) {
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("std").get<std::vector<double>>();
  if (m.size() != s.size()) throw SchemaError("norm stats: mean/std length mismatch");
  NormStats n;
  n.mean = Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
  n.std = Eigen::Map<const Vector>(s.data(), static_cast<Eigen::Index>(s.size()));
  return n;
}

NormStats fit_zscore(const TimeSeriesSet& set) {
  if (set.length() < 2) throw PreconditionError("zscore: need T >= 2");
  const Eigen::Index d = set.dims();
  Vector sum = Vector::Zero(d);
  double count = 0.0;
  for (const Matrix& m : set.values) {
    sum += m.colwise().sum().transpose();
    count += static_cast<double>(m.rows());
  }
  NormStats st;
  st.mean = sum / count;
  Vector sq = Vector::Zero(d);
  for (const Matrix& m : set.values) {
    sq += (m.rowwise() - st.mean.transpose()).array().square().matrix().colwise().sum().transpose();
  }
  st.std = (sq / count).array().sqrt();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (!(st.std(j) > 1e-12)) {
      std::cerr << "warning: feature '" << set.feature_names[static_cast<size_t>(j)]
                << "' is constant; using std = 1\n";
      st.std(j) = 1.0;
    }
  }
  return st;
}

std::pair<TimeSeriesSet, NormStats> zscore_fit_apply(const TimeSeriesSet& set) {
  NormStats st = fit_zscore(set);
  return {st.apply(set), st};
}

TimeSeriesSet parse_csv(std::istream& in, const std::vector<std::string>& schema,
                        const CsvOptions& opts) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("csv: empty input, header row required");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);
  auto col_of = [&](const std::string& name) -> size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("csv: missing column '" + name + "'");
    return static_cast<size_t>(it - header.begin());
  };
  const size_t id_col = col_of("series_id");
  const size_t ts_col = col_of("timestamp");
  std::vector<size_t> feat_cols;
  for (const auto& f : schema) feat_cols.push_back(col_of(f));

  struct Row {
    std::string ts;
    std::vector<double> v;
  };
  std::map<std::string, std::vector<Row>> by_series;
  std::vector<std::string> order;
  long row_no = 0;
  while (std::getline(in, line)) {
    ++row_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() < header.size()) {
      throw ParseError("csv: row " + std::to_string(row_no) + " has too few cells", row_no);
    }
    Row r;
    r.ts = trim(cells[ts_col]);
    for (size_t k = 0; k < feat_cols.size(); ++k) {
      const std::string cell = trim(cells[feat_cols[k]]);
      if (is_missing(cell)) {
        r.v.push_back(std::nan(""));
        continue;
      }
      auto v = parse_double(cell);
      if (!v) {
        throw ParseError("csv: non-numeric value '" + cell + "' in column '" + schema[k] +
                             "' at row " + std::to_string(row_no),
                         row_no);
      }
      r.v.push_back(*v);
    }
    const std::string id = trim(cells[id_col]);
    auto [it, inserted] = by_series.try_emplace(id);
    if (inserted) order.push_back(id);
    it->second.push_back(std::move(r));
  }
  if (order.empty()) throw SchemaError("csv: no data rows");

  size_t min_len = std::numeric_limits<size_t>::max(), max_len = 0;
  for (auto& [id, rows] : by_series) {
    const bool numeric = std::all_of(rows.begin(), rows.end(),
                                     [](const Row& r) { return parse_double(r.ts).has_value(); });
    std::stable_sort(rows.begin(), rows.end(), [numeric](const Row& a, const Row& b) {
      if (numeric) return *parse_double(a.ts) < *parse_double(b.ts);
      return a.ts < b.ts;
    });
    min_len = std::min(min_len, rows.size());
    max_len = std::max(max_len, rows.size());
  }
  const size_t T = opts.length_policy == LengthPolicy::kTruncate ? min_len : max_len;
  const auto d = static_cast<Eigen::Index>(schema.size());

  TimeSeriesSet set;
  set.feature_names = schema;
  for (const auto& id : order) {
    const auto& rows = by_series.at(id);
    Matrix m = Matrix::Constant(static_cast<Eigen::Index>(T), d, std::nan(""));
    for (size_t t = 0; t < std::min(T, rows.size()); ++t) {
      for (Eigen::Index j = 0; j < d; ++j) m(static_cast<Eigen::Index>(t), j) = rows[t].v[static_cast<size_t>(j)];
    }
    if (opts.impute) {
      for (Eigen::Index j = 0; j < d; ++j) impute_column(m, j);
    }
    if (!m.allFinite()) {
      throw ParseError("csv: series '" + id + "' has missing values that could not be imputed", 0);
    }
    set.series_ids.push_back(id);
    set.values.push_back(std::move(m));
  }
  return set;
}

TimeSeriesSet load_csv(const std::string& path, const std::vector<std::string>& schema,
                       const CsvOptions& opts) {
  std::ifstream in(path);
  if (!in) throw SchemaError("csv: cannot open " + path);
  return parse_csv(in, schema, opts);
}

void write_csv(const TimeSeriesSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "series_id,timestamp";
  for (const auto& f : set.feature_names) out << ',' << f;
  out << '\n';
  out.precision(17);
  for (size_t i = 0; i < set.size(); ++i) {
    const Matrix& m = set.values[i];
    for (Eigen::Index t = 0; t < m.rows(); ++t) {
      out << set.series_ids[i] << ',' << t;
      for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << m(t, j);
      out << '\n';
    }
  }
}

Split split(const TimeSeriesSet& set, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw PreconditionError("split: ratio must be in (0, 1)");
  const size_t N = set.size();
  if (N < 2) throw PreconditionError("split: need at least 2 series");
  std::vector<size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_train = static_cast<size_t>(std::llround(ratio * static_cast<double>(N)));
  n_train = std::clamp<size_t>(n_train, 1, N - 1);
  std::vector<size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<size_t> te(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  return {set.subset(tr), set.subset(te)};
}

void SynthConfig::validate() const {
  if (N <= 0 || T <= 0 || d <= 0) throw ConfigError("synth: N, T, d must be positive");
  if (R < 1) throw ConfigError("synth: R must be >= 1");
  if (static_cast<int>(transition.size()) != R) throw ConfigError("synth: transition must be R x R");
  for (const auto& row : transition) {
    if (static_cast<int>(row.size()) != R) throw ConfigError("synth: transition must be R x R");
    double s = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) throw ConfigError("synth: negative transition probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("synth: transition rows must sum to 1");
  }
  if (static_cast<int>(regimes.size()) != R) throw ConfigError("synth: need one RegimeParams per regime");
  for (const auto& rp : regimes) {
    if (static_cast<int>(rp.mean.size()) != d) throw ConfigError("synth: regime mean must have d entries");
    if (rp.seasonal_period < 1) throw ConfigError("synth: seasonal period must be >= 1");
  }
  if (noise_std < 0.0) throw ConfigError("synth: noise_std must be >= 0");
  for (int j : null_features) {
    if (j < 0 || j >= d) throw ConfigError("synth: null feature index out of range");
  }
  if (!feature_names.empty() && static_cast<int>(feature_names.size()) != d) {
    throw ConfigError("synth: feature_names must have d entries");
  }
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json regs = nlohmann::json::array();
  for (const auto& r : regimes) {
    regs.push_back({{"mean", r.mean},
                    {"noise_scale", r.noise_scale},
                    {"trend", r.trend},
                    {"seasonal_amplitude", r.seasonal_amplitude},
                    {"seasonal_period", r.seasonal_period}});
  }
  return {{"N", N},           {"T", T},         {"d", d},
          {"R", R},           {"regime_transition_matrix", transition},
          {"regimes", regs},  {"noise_std", noise_std},
          {"seed", seed},     {"feature_names", feature_names},
          {"null_features", null_features}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    c.N = j.at("N").get<int>();
    c.T = j.at("T").get<int>();
    c.d = j.at("d").get<int>();
    c.R = j.at("R").get<int>();
    c.transition = j.at("regime_transition_matrix").get<std::vector<std::vector<double>>>();
    for (const auto& r : j.at("regimes")) {
      RegimeParams p;
      p.mean = r.at("mean").get<std::vector<double>>();
      p.noise_scale = r.value("noise_scale", 1.0);
      p.trend = r.value("trend", 0.0);
      p.seasonal_amplitude = r.value("seasonal_amplitude", 0.0);
      p.seasonal_period = r.value("seasonal_period", 7);
      c.regimes.push_back(std::move(p));
    }
    c.noise_std = j.value("noise_std", 0.5);
    c.seed = j.value("seed", std::uint64_t{0});
    c.feature_names = j.value("feature_names", std::vector<std::string>{});
    c.null_features = j.value("null_features", std::vector<int>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

SynthConfig load_synth_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open synth config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  return SynthConfig::from_json(j);
}

TimeSeriesSet generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> first(0, cfg.R - 1);
  constexpr double kTwoPi = 6.283185307179586;

  TimeSeriesSet set;
  set.feature_names = cfg.feature_names.empty() ? default_feature_names(cfg.d) : cfg.feature_names;
  set.regime_labels.emplace();
  for (int i = 0; i < cfg.N; ++i) {
    std::vector<int> path(static_cast<size_t>(cfg.T));
    int r = first(rng);
    for (int t = 0; t < cfg.T; ++t) {
      if (t > 0) {
        const double u = unif(rng);
        double acc = 0.0;
        int next = cfg.R - 1;
        for (int k = 0; k < cfg.R; ++k) {
          acc += cfg.transition[static_cast<size_t>(r)][static_cast<size_t>(k)];
          if (u < acc) {
            next = k;
            break;
          }
        }
        r = next;
      }
      path[static_cast<size_t>(t)] = r;
    }
    Matrix m(cfg.T, cfg.d);
    for (int t = 0; t < cfg.T; ++t) {
      const RegimeParams& rp = cfg.regimes[static_cast<size_t>(path[static_cast<size_t>(t)])];
      const double season =
          rp.seasonal_amplitude * std::sin(kTwoPi * t / static_cast<double>(rp.seasonal_period));
      for (int j = 0; j < cfg.d; ++j) {
        if (std::find(cfg.null_features.begin(), cfg.null_features.end(), j) !=
            cfg.null_features.end()) {
          m(t, j) = cfg.regimes.front().mean[static_cast<size_t>(j)] + cfg.noise_std * gauss(rng);
          continue;
        }
        m(t, j) = rp.mean[static_cast<size_t>(j)] + rp.trend * t + season +
                  cfg.noise_std * rp.noise_scale * gauss(rng);
      }
    }
    set.series_ids.push_back("s" + std::to_string(i));
    set.values.push_back(std::move(m));
    set.regime_labels->push_back(std::move(path));
  }
  return set;
}

SynthConfig benchmark_synth_config(int N, int T, int d, int R, double stay, std::uint64_t seed,
                                   bool null_feature) {
  SynthConfig c;
  c.N = N;
  c.T = T;
  c.d = d;
  c.R = R;
  c.seed = seed;
  c.noise_std = 1.0;
  c.transition.assign(static_cast<size_t>(R), std::vector<double>(static_cast<size_t>(R), 0.0));
  for (int a = 0; a < R; ++a) {
    for (int b = 0; b < R; ++b) {
      c.transition[static_cast<size_t>(a)][static_cast<size_t>(b)] =
          R == 1 ? 1.0 : (a == b ? stay : (1.0 - stay) / (R - 1));
    }
  }
  constexpr double kPi = 3.141592653589793;
  for (int r = 0; r < R; ++r) {
    RegimeParams p;
    p.mean.resize(static_cast<size_t>(d));
    const double level = R == 1 ? 0.0 : static_cast<double>(r) / (R - 1);
    for (int j = 0; j < d; ++j) {
      // time features move less than money/desperation features
      const double weight = j < 2 ? 0.4 : 1.0;
      const double shape = 1.5 * std::cos(2.0 * kPi * j * (r + 1) / d);
      p.mean[static_cast<size_t>(j)] = 10.0 + 6.0 * level * weight + shape;
    }
    p.noise_scale = 1.0;
    p.trend = 0.01 * (r + 1);
    p.seasonal_amplitude = 1.0 + 0.5 * (r % 2);
    p.seasonal_period = 7;
    c.regimes.push_back(std::move(p));
  }
  if (null_feature) c.null_features.push_back(d - 1);
  return c;
}

}  // namespace afn
