#include "afn/explain.hpp"

#include "afn/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace afn::explain {

namespace {

// v(S) for every mask in [first, first + count): mean of f over the background
// with the features in S replaced by x.
std::vector<double> coalition_values(const BatchFn& f, const RowVector& x, const Matrix& background,
                                     std::span<const std::uint32_t> masks) {
  const Eigen::Index B = background.rows(), d = x.size();
  std::vector<double> out;
  out.reserve(masks.size());
  const size_t chunk = std::max<size_t>(1, static_cast<size_t>(65536 / std::max<Eigen::Index>(1, B)));
  for (size_t start = 0; start < masks.size(); start += chunk) {
    const size_t n = std::min(chunk, masks.size() - start);
    Matrix rows(static_cast<Eigen::Index>(n) * B, d);
    for (size_t s = 0; s < n; ++s) {
      const std::uint32_t mask = masks[start + s];
      auto block = rows.middleRows(static_cast<Eigen::Index>(s) * B, B);
      block = background;
      for (Eigen::Index j = 0; j < d; ++j) {
        if (mask & (1u << j)) block.col(j).setConstant(x(j));
      }
    }
    const Vector v = f(rows);
    if (v.size() != rows.rows()) throw PreconditionError("shapley: value function returned the wrong size");
    for (size_t s = 0; s < n; ++s) out.push_back(v.segment(static_cast<Eigen::Index>(s) * B, B).mean());
  }
  return out;
}

void check_inputs(const RowVector& x, const Matrix& background) {
  if (background.rows() < 1) throw PreconditionError("shapley: empty background");
  if (background.cols() != x.size()) throw PreconditionError("shapley: background width mismatch");
  if (x.size() < 1 || x.size() > 20) throw PreconditionError("shapley: need 1 <= d <= 20");
}

}  // namespace

Vector exact_shapley(const BatchFn& f, const RowVector& x, const Matrix& background) {
  check_inputs(x, background);
  const int d = static_cast<int>(x.size());
  const std::uint32_t n_masks = 1u << d;
  std::vector<std::uint32_t> masks(n_masks);
  std::iota(masks.begin(), masks.end(), 0u);
  const std::vector<double> v = coalition_values(f, x, background, masks);

  // weight(|S|) = |S|! (d - |S| - 1)! / d!
  std::vector<double> w(static_cast<size_t>(d));
  for (int s = 0; s < d; ++s) {
    w[static_cast<size_t>(s)] = std::exp(std::lgamma(s + 1.0) + std::lgamma(d - s + 0.0) - std::lgamma(d + 1.0));
  }
  Vector phi = Vector::Zero(d);
  for (std::uint32_t mask = 0; mask < n_masks; ++mask) {
    const int size = std::popcount(mask);
    for (int i = 0; i < d; ++i) {
      if (mask & (1u << i)) continue;
      phi(i) += w[static_cast<size_t>(size)] * (v[mask | (1u << i)] - v[mask]);
    }
  }
  return phi;
}

Vector sampled_shapley(const BatchFn& f, const RowVector& x, const Matrix& background, int permutations,
                       std::uint64_t seed) {
  check_inputs(x, background);
  if (permutations < 1) throw PreconditionError("shapley: need at least one permutation");
  const int d = static_cast<int>(x.size());
  std::mt19937_64 rng(seed);
  std::vector<int> order(static_cast<size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  Vector phi = Vector::Zero(d);
  int used = 0;
  while (used < permutations) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int pass = 0; pass < 2 && used < permutations; ++pass, ++used) {
      if (pass == 1) std::reverse(order.begin(), order.end());
      std::vector<std::uint32_t> masks(static_cast<size_t>(d + 1), 0u);
      for (int k = 0; k < d; ++k) masks[static_cast<size_t>(k + 1)] = masks[static_cast<size_t>(k)] | (1u << order[static_cast<size_t>(k)]);
      const std::vector<double> v = coalition_values(f, x, background, masks);
      for (int k = 0; k < d; ++k) phi(order[static_cast<size_t>(k)]) += v[static_cast<size_t>(k + 1)] - v[static_cast<size_t>(k)];
    }
  }
  return phi / static_cast<double>(used);
}

std::vector<ShapEntry> top_entries(const Vector& values, const std::vector<std::string>& names, int k) {
  if (static_cast<size_t>(values.size()) != names.size()) throw PreconditionError("top_entries: size mismatch");
  std::vector<int> idx(names.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return std::abs(values(a)) > std::abs(values(b)); });
  std::vector<ShapEntry> out;
  for (int i = 0; i < std::min<int>(k, static_cast<int>(idx.size())); ++i) {
    out.push_back({names[static_cast<size_t>(idx[static_cast<size_t>(i)])], values(idx[static_cast<size_t>(i)])});
  }
  return out;
}

nlohmann::json ShapTable::to_json() const {
  nlohmann::json nodes_j = nlohmann::json::object();
  for (int k = 0; k < height * width; ++k) {
    const NodeShap& n = nodes[static_cast<size_t>(k)];
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : n.top) entries.push_back({{"feature", e.feature}, {"value", e.value}});
    nodes_j[std::to_string(k / width) + "," + std::to_string(k % width)] = {
        {"top", entries},
        {"representative", std::vector<double>(n.representative.data(), n.representative.data() + n.representative.size())},
        {"decoded", n.decoded}};
  }
  return {{"height", height}, {"width", width}, {"feature_names", feature_names}, {"nodes", nodes_j}};
}

ShapTable ShapTable::from_json(const nlohmann::json& j) {
  ShapTable t;
  t.height = j.at("height").get<int>();
  t.width = j.at("width").get<int>();
  t.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  if (t.height < 1 || t.width < 1) throw ConfigError("shap table: empty grid");
  t.nodes.resize(static_cast<size_t>(t.height * t.width));
  for (int k = 0; k < t.height * t.width; ++k) {
    const auto& n = j.at("nodes").at(std::to_string(k / t.width) + "," + std::to_string(k % t.width));
    NodeShap& out = t.nodes[static_cast<size_t>(k)];
    for (const auto& e : n.at("top")) out.top.push_back({e.at("feature").get<std::string>(), e.at("value").get<double>()});
    const auto rep = n.at("representative").get<std::vector<double>>();
    out.representative = Eigen::Map<const RowVector>(rep.data(), static_cast<Eigen::Index>(rep.size()));
    out.decoded = n.at("decoded").get<bool>();
  }
  return t;
}

ShapTable fit_som_shap(const ifm::AfnModel& model, const TimeSeriesSet& train_raw, const ShapOptions& opts) {
  if (train_raw.size() == 0) throw PreconditionError("fit_som_shap: empty training set");
  if (train_raw.dims() != model.d()) throw PreconditionError("fit_som_shap: feature count mismatch");
  const auto& vae = model.convae();
  const som::SomGrid grid = vae.grid();
  if (!grid.centroids.allFinite()) throw TrainingError("fit_som_shap: model has non-finite centroids");
  const int K = grid.size(), d = model.d();

  // scan a deterministic subsample of series
  const size_t T = static_cast<size_t>(train_raw.length());
  const size_t stride = std::max<size_t>(1, (train_raw.size() * T + opts.max_points - 1) / opts.max_points);
  std::vector<RowVector> raw, lat;
  std::vector<int> cond, node;
  for (size_t i = 0; i < train_raw.size(); i += stride) {
    const Matrix x = model.norm_stats().apply(train_raw.values[i]);
    const ifm::ConditionTrack track = model.condition_track(x);
    const Matrix z = vae.encode_mean(x, track.onehot);
    const std::vector<int> nodes = som::som_assign_rows(z, grid.centroids);
    for (Eigen::Index s = 0; s < z.rows(); ++s) {
      raw.push_back(train_raw.values[i].row(s));
      lat.push_back(z.row(s));
      cond.push_back(track.conditions[static_cast<size_t>(s)].discrete);
      node.push_back(nodes[static_cast<size_t>(s)]);
    }
  }
  std::vector<int> cond_count(static_cast<size_t>(model.rho()), 0);
  for (int c : cond) ++cond_count[static_cast<size_t>(c)];
  const int mode_cond = static_cast<int>(std::max_element(cond_count.begin(), cond_count.end()) - cond_count.begin());

  std::vector<std::vector<size_t>> members(static_cast<size_t>(K));
  for (size_t p = 0; p < node.size(); ++p) members[static_cast<size_t>(node[p])].push_back(p);

  // background stratified by node: round-robin over shuffled members
  std::mt19937_64 rng(opts.seed ^ 0xB4C6D00Dull);
  std::vector<std::vector<size_t>> pools = members;
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
  const int n_bg = std::min<int>(opts.background_size, static_cast<int>(raw.size()));
  Matrix background(n_bg, d);
  {
    std::vector<size_t> cursor(static_cast<size_t>(K), 0);
    int filled = 0;
    while (filled < n_bg) {
      for (int k = 0; k < K && filled < n_bg; ++k) {
        auto& c = cursor[static_cast<size_t>(k)];
        if (c < pools[static_cast<size_t>(k)].size()) background.row(filled++) = raw[pools[static_cast<size_t>(k)][c++]];
      }
    }
  }

  ShapTable table;
  table.height = grid.height;
  table.width = grid.width;
  table.feature_names = model.feature_names();
  table.nodes.resize(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    NodeShap& ns = table.nodes[static_cast<size_t>(k)];
    int c = mode_cond;
    const auto& mem = members[static_cast<size_t>(k)];
    if (!mem.empty()) {
      size_t best = mem.front();
      double best_d = std::numeric_limits<double>::infinity();
      for (size_t p : mem) {
        const double dist = (lat[p] - grid.centroids.row(k)).squaredNorm();
        if (dist < best_d) {
          best_d = dist;
          best = p;
        }
      }
      ns.representative = raw[best];
      c = cond[best];
    } else {
      const RowVector xn = vae.decode(RowVector(grid.centroids.row(k)), model.onehot(c));
      ns.representative = model.norm_stats().invert(Matrix(xn)).row(0);
      ns.decoded = true;
    }
    const RowVector onehot = model.onehot(c);
    const BatchFn f = [&](const Matrix& rows) -> Vector {
      const Matrix xn = model.norm_stats().apply(rows);
      const Matrix z = vae.encode_mean(xn, onehot.replicate(rows.rows(), 1));
      return som::soft_assign(z, grid.centroids, vae.config().alpha).col(k);
    };
    const Vector phi = d <= opts.exact_max_d
                           ? exact_shapley(f, ns.representative, background)
                           : sampled_shapley(f, ns.representative, background, opts.permutations,
                                             opts.seed + static_cast<std::uint64_t>(k));
    ns.top = top_entries(phi, table.feature_names, opts.top_k);
  }
  return table;
}

std::vector<int> attention_points(const Vector& agg, double quantile) {
  if (agg.size() == 0) throw PreconditionError("attention_points: empty attention");
  std::vector<int> out;
  if (quantile <= 0.0) {
    out.resize(static_cast<size_t>(agg.size()));
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  std::vector<double> sorted(agg.data(), agg.data() + agg.size());
  std::sort(sorted.begin(), sorted.end());
  const double pos = std::min(quantile, 1.0) * static_cast<double>(sorted.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double thr = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  for (Eigen::Index t = 0; t < agg.size(); ++t) {
    if (agg(t) > thr) out.push_back(static_cast<int>(t));
  }
  if (out.empty()) {
    Eigen::Index best = 0;
    agg.maxCoeff(&best);  // first occurrence
    out.push_back(static_cast<int>(best));
  }
  return out;
}

std::vector<int> attention_points(const ifm::Forecast& f, double quantile) {
  const Matrix& a = ifm::attention_weights(f);
  return attention_points(Vector(a.colwise().mean().transpose()), quantile);
}

void sort_ranking(FeatureRanking& r) {
  std::stable_sort(r.begin(), r.end(), [](const RankedFeature& a, const RankedFeature& b) {
    if (a.mean_shap != b.mean_shap) return a.mean_shap > b.mean_shap;
    if (a.acceleration != b.acceleration) return a.acceleration > b.acceleration;
    return a.feature < b.feature;
  });
}

FeatureRanking rank_features(const ifm::Forecast& f, const Matrix& raw_history, const ShapTable& table,
                             std::span<const int> attentive_steps) {
  if (attentive_steps.empty()) throw PreconditionError("rank_features: no attentive steps");
  const Eigen::Index T = raw_history.rows();
  std::map<std::string, double> shap_sum;
  for (int t : attentive_steps) {
    if (t < 0 || t >= T || static_cast<size_t>(t) >= f.node_path.size()) {
      throw PreconditionError("rank_features: attentive step outside the history");
    }
    const int k = f.node_path[static_cast<size_t>(t)];
    if (k < 0 || static_cast<size_t>(k) >= table.nodes.size()) throw PreconditionError("rank_features: node not in table");
    for (const auto& e : table.nodes[static_cast<size_t>(k)].top) shap_sum[e.feature] += std::abs(e.value);
  }
  FeatureRanking out;
  const double n = static_cast<double>(attentive_steps.size());
  for (const auto& [name, total] : shap_sum) {
    const auto it = std::find(table.feature_names.begin(), table.feature_names.end(), name);
    if (it == table.feature_names.end()) throw PreconditionError("rank_features: unknown feature " + name);
    const Eigen::Index j = it - table.feature_names.begin();
    double acc = 0.0;
    int cnt = 0;
    for (int t : attentive_steps) {
      const Eigen::Index lo = std::max<Eigen::Index>(0, t - 1), hi = std::min<Eigen::Index>(T - 1, t + 1);
      for (Eigen::Index s = lo; s < hi; ++s) {
        acc += std::abs(raw_history(s + 1, j) - raw_history(s, j));
        ++cnt;
      }
    }
    out.push_back({name, total / n, cnt > 0 ? acc / cnt : 0.0});
  }
  sort_ranking(out);
  return out;
}

std::vector<std::string> dominant_feature_map(const ShapTable& table) {
  std::vector<std::string> out;
  out.reserve(table.nodes.size());
  for (const auto& n : table.nodes) out.push_back(n.top.empty() ? std::string() : n.top.front().feature);
  return out;
}

nlohmann::json ranking_to_json(const FeatureRanking& r) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& e : r) {
    a.push_back({{"feature", e.feature}, {"mean_shap", e.mean_shap}, {"acceleration", e.acceleration}});
  }
  return a;
}

}  // namespace afn::explain
