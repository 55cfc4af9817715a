#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "csf/common.hpp"
#include "csf/random.hpp"
#include "csf/survival_data.hpp"
#include "csf/threading.hpp"

namespace csf {

struct ForestConfig {
  int num_trees = 2000;
  int mtry = 0;  // 0 resolves to min(p, ceil(sqrt(p)) + 20)
  int min_node_size = 5;
  double sample_fraction = 0.5;
  double honesty_fraction = 0.5;
  double child_balance = 0.05;
  int ci_group_size = 2;
  std::uint64_t seed = 42;
  int threads = 1;

  int resolved_mtry(int p) const {
    if (mtry > 0) return std::min(mtry, p);
    const int m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(p)))) + 20;
    return std::min(p, m);
  }

  void validate(int n, int p) const {
    if (num_trees < 1) throw fit_error("num_trees must be >= 1");
    if (p < 1) throw fit_error("no features");
    if (min_node_size < 1) throw fit_error("min_node_size must be >= 1");
    if (n < 2 * min_node_size) throw fit_error("too few samples: need at least 2*min_node_size");
    if (!(child_balance > 0.0 && child_balance < 0.5)) throw fit_error("child_balance must lie in (0, 0.5)");
    if (ci_group_size < 1) throw fit_error("ci_group_size must be >= 1");
    if (num_trees % ci_group_size != 0) throw fit_error("num_trees must be divisible by ci_group_size");
    const double max_sf = ci_group_size >= 2 ? 0.5 : 1.0;
    if (!(sample_fraction > 0.0 && sample_fraction <= max_sf))
      throw fit_error("sample_fraction out of range (little bags require <= 0.5)");
    if (!(honesty_fraction >= 0.0 && honesty_fraction < 1.0))
      throw fit_error("honesty_fraction must lie in [0, 1)");
  }
};

// Training features, column-major for fast split scans.
struct FeatureMatrix {
  int n = 0;
  int p = 0;
  std::vector<double> col;  // size p*n, feature j at [j*n, (j+1)*n)

  FeatureMatrix() = default;
  FeatureMatrix(int n_, int p_) : n(n_), p(p_), col(static_cast<std::size_t>(n_) * p_) {}

  double at(int i, int j) const { return col[static_cast<std::size_t>(j) * n + i]; }
  double& at(int i, int j) { return col[static_cast<std::size_t>(j) * n + i]; }

  void fill_row(int i, std::vector<double>& out) const {
    out.resize(p);
    for (int j = 0; j < p; ++j) out[j] = at(i, j);
  }

  static FeatureMatrix from_dataset(const SurvivalDataset& ds) {
    FeatureMatrix m(ds.n(), ds.p);
    for (int i = 0; i < ds.n(); ++i)
      for (int j = 0; j < ds.p; ++j) m.at(i, j) = ds.samples[i].x[j];
    return m;
  }

  // Features (X, W): treatment appended as the last column.
  static FeatureMatrix with_arm(const SurvivalDataset& ds) {
    FeatureMatrix m(ds.n(), ds.p + 1);
    for (int i = 0; i < ds.n(); ++i) {
      for (int j = 0; j < ds.p; ++j) m.at(i, j) = ds.samples[i].x[j];
      m.at(i, ds.p) = static_cast<double>(ds.samples[i].w);
    }
    return m;
  }
};

// feature >= 0: internal node, children in left/right.
// feature == -1: leaf, [left, right) indexes into leaf_items.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = 0;
  int right = 0;
};

struct Tree {
  std::vector<TreeNode> nodes;
  std::vector<int> leaf_items;
  std::vector<int> split_sample;
  std::vector<int> leaf_sample;
  std::vector<int> subsample_sorted;
  int bag_id = 0;

  bool contains(int i) const {
    return std::binary_search(subsample_sorted.begin(), subsample_sorted.end(), i);
  }

  int route(const double* x) const {
    int t = 0;
    while (nodes[t].feature >= 0) t = x[nodes[t].feature] <= nodes[t].threshold ? nodes[t].left : nodes[t].right;
    return t;
  }

  int route_row(const FeatureMatrix& X, int i) const {
    int t = 0;
    while (nodes[t].feature >= 0) t = X.at(i, nodes[t].feature) <= nodes[t].threshold ? nodes[t].left : nodes[t].right;
    return t;
  }

  int leaf_begin(int node) const { return nodes[node].left; }
  int leaf_end(int node) const { return nodes[node].right; }
};

struct Forest {
  ForestConfig config;
  int n = 0;
  int p = 0;
  std::vector<Tree> trees;

  int num_bags() const { return config.ci_group_size >= 1 ? config.num_trees / config.ci_group_size : 0; }
};

struct ForestWeights {
  std::vector<std::pair<int, double>> pairs;  // (training index, weight), index-sorted
  int contributing_trees = 0;
};

// Node-level solve of sum(a - tau*b) = 0 followed by influence relabeling:
// rho_i = (a_i - tau_node*b_i) / sum_node(b).  Regression trees use b == 1,
// weighted problems fold their weights into both a and b upfront.
class SolveSplitter {
public:
  SolveSplitter(const std::vector<double>* a, const std::vector<double>* b) : a_(a), b_(b) {}

  void begin_tree(const std::vector<int>&, std::vector<double>&) const {}

  bool relabel(const std::vector<int>& node, const std::vector<double>&, std::vector<double>& rho) const {
    double sum_a = 0.0, sum_b = 0.0;
    for (const int i : node) {
      sum_a += (*a_)[i];
      sum_b += (*b_)[i];
    }
    if (!(std::fabs(sum_b) > 0.0)) return false;
    const double tau = sum_a / sum_b;
    for (const int i : node) rho[i] = ((*a_)[i] - tau * (*b_)[i]) / sum_b;
    return true;
  }

private:
  const std::vector<double>* a_;
  const std::vector<double>* b_;
};

namespace detail {

struct GrowScratch {
  std::vector<double> rho;
  std::vector<double> tree_ctx;
  std::vector<int> feat_draw;
  std::vector<int> feat_scratch;
  std::vector<std::pair<double, double>> scan;  // (feature value, rho)
  std::vector<int> node_buf;
};

struct SplitDecision {
  int feature = -1;
  double threshold = 0.0;
};

inline bool best_split(const FeatureMatrix& X, const std::vector<int>& node,
                       const std::vector<double>& rho, const ForestConfig& cfg, Rng& rng,
                       GrowScratch& s, SplitDecision& out) {
  const int m = static_cast<int>(node.size());
  const int c_min = std::max(cfg.min_node_size,
                             static_cast<int>(std::ceil(cfg.child_balance * m)));
  const int mtry = cfg.resolved_mtry(X.p);
  rng.sample_indices(X.p, mtry, s.feat_draw, s.feat_scratch);
  if (2 * c_min > m) return false;

  double total = 0.0, sumsq = 0.0;
  for (const int i : node) {
    total += rho[i];
    sumsq += rho[i] * rho[i];
  }
  const double no_split = total * total / m;
  // Relative margin keeps float noise on effectively constant rho from
  // fabricating splits; genuine signal clears it by many orders.
  double best = no_split + 1e-10 * sumsq + 1e-300;
  bool found = false;

  for (const int f : s.feat_draw) {
    s.scan.clear();
    for (const int i : node) s.scan.emplace_back(X.at(i, f), rho[i]);
    std::sort(s.scan.begin(), s.scan.end(),
              [](const auto& l, const auto& r) { return l.first < r.first; });
    double cum = 0.0;
    for (int k = 0; k + 1 < m; ++k) {
      cum += s.scan[k].second;
      if (s.scan[k].first == s.scan[k + 1].first) continue;
      const int nl = k + 1;
      if (nl < c_min || m - nl < c_min) continue;
      const double rest = total - cum;
      const double gain = cum * cum / nl + rest * rest / (m - nl);
      if (gain > best) {
        best = gain;
        found = true;
        const double lo = s.scan[k].first, hi = s.scan[k + 1].first;
        double thr = lo + 0.5 * (hi - lo);
        if (!(thr < hi)) thr = lo;
        out.feature = f;
        out.threshold = thr;
      }
    }
  }
  return found;
}

template <typename TSplitter>
void build_node(const FeatureMatrix& X, const TSplitter& splitter, const ForestConfig& cfg,
                Rng& rng, Tree& tree, std::vector<int>& node, GrowScratch& s) {
  const int self = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  const int m = static_cast<int>(node.size());
  bool split_ok = false;
  SplitDecision dec;
  if (m >= 2 * cfg.min_node_size && splitter.relabel(node, s.tree_ctx, s.rho))
    split_ok = best_split(X, node, s.rho, cfg, rng, s, dec);
  if (!split_ok) return;  // leaf; honest items attached later

  std::vector<int> left, right;
  left.reserve(node.size());
  right.reserve(node.size());
  for (const int i : node) (X.at(i, dec.feature) <= dec.threshold ? left : right).push_back(i);
  node.clear();
  node.shrink_to_fit();

  tree.nodes[self].feature = dec.feature;
  tree.nodes[self].threshold = dec.threshold;
  tree.nodes[self].left = static_cast<int>(tree.nodes.size());
  build_node(X, splitter, cfg, rng, tree, left, s);
  tree.nodes[self].right = static_cast<int>(tree.nodes.size());
  build_node(X, splitter, cfg, rng, tree, right, s);
}

inline void attach_honest_items(const FeatureMatrix& X, Tree& tree) {
  const int num_nodes = static_cast<int>(tree.nodes.size());
  std::vector<int> counts(num_nodes, 0);
  std::vector<int> leaf_of(tree.leaf_sample.size());
  for (std::size_t k = 0; k < tree.leaf_sample.size(); ++k) {
    const int node = tree.route_row(X, tree.leaf_sample[k]);
    leaf_of[k] = node;
    ++counts[node];
  }
  std::vector<int> offset(num_nodes, 0);
  int total = 0;
  for (int t = 0; t < num_nodes; ++t) {
    if (tree.nodes[t].feature >= 0) continue;
    tree.nodes[t].left = total;
    offset[t] = total;
    total += counts[t];
    tree.nodes[t].right = total;
  }
  tree.leaf_items.resize(total);
  for (std::size_t k = 0; k < tree.leaf_sample.size(); ++k)
    tree.leaf_items[offset[leaf_of[k]]++] = tree.leaf_sample[k];
}

}  // namespace detail

// Grows an honest, subsampled ensemble.  Trees come in little bags of
// ci_group_size: each bag draws one half-sample of ceil(n/2) points and its
// trees subsample from that shared pool, which is what the between-bag
// variance estimator later exploits.  With ci_group_size == 1 trees subsample
// from the full data directly.
template <typename TSplitter>
Forest grow_forest(const FeatureMatrix& X, const TSplitter& splitter, const ForestConfig& cfg) {
  cfg.validate(X.n, X.p);
  const int n = X.n;
  Forest forest;
  forest.config = cfg;
  forest.n = n;
  forest.p = X.p;
  forest.trees.resize(cfg.num_trees);

  const int group = std::max(1, cfg.ci_group_size);
  const int num_bags = cfg.num_trees / group;
  const int half = (n + 1) / 2;
  const int sub = std::max(1, static_cast<int>(std::ceil(cfg.sample_fraction * n)));

  std::vector<std::vector<int>> bag_pool(num_bags);
  for (int g = 0; g < num_bags; ++g) {
    if (group >= 2) {
      Rng rng(derive_seed(cfg.seed, 0x6261671eULL, static_cast<std::uint64_t>(g)));
      std::vector<int> scratch;
      rng.sample_indices(n, half, bag_pool[g], scratch);
    }
  }

  parallel_for(cfg.threads, cfg.num_trees, [&](int b) {
    Tree& tree = forest.trees[b];
    tree.bag_id = b / group;
    Rng rng(derive_seed(cfg.seed, 0x74726565ULL, static_cast<std::uint64_t>(b)));

    std::vector<int> subsample, scratch;
    if (group >= 2) {
      const std::vector<int>& pool = bag_pool[tree.bag_id];
      const int take = std::min(sub, static_cast<int>(pool.size()));
      std::vector<int> pick;
      rng.sample_indices(static_cast<int>(pool.size()), take, pick, scratch);
      subsample.resize(take);
      for (int k = 0; k < take; ++k) subsample[k] = pool[pick[k]];
    } else {
      rng.sample_indices(n, std::min(sub, n), subsample, scratch);
    }

    const int split_n = static_cast<int>(std::ceil(cfg.honesty_fraction * subsample.size()));
    tree.split_sample.assign(subsample.begin(), subsample.begin() + split_n);
    tree.leaf_sample.assign(subsample.begin() + split_n, subsample.end());
    tree.subsample_sorted = subsample;
    std::sort(tree.subsample_sorted.begin(), tree.subsample_sorted.end());

    detail::GrowScratch s;
    s.rho.assign(n, 0.0);
    splitter.begin_tree(tree.split_sample, s.tree_ctx);
    std::vector<int> root = tree.split_sample;
    if (root.empty()) {
      tree.nodes.emplace_back();
    } else {
      detail::build_node(X, splitter, cfg, rng, tree, root, s);
    }
    detail::attach_honest_items(X, tree);
  });

  return forest;
}

// Unnormalized leaf-mass accumulation shared by the weight functions.
struct WeightAccumulator {
  std::vector<double> w;
  std::vector<int> touched;

  void reset(int n) {
    if (static_cast<int>(w.size()) != n) w.assign(n, 0.0);
    for (const int i : touched) w[i] = 0.0;
    touched.clear();
  }

  void add(int i, double v) {
    if (w[i] == 0.0) touched.push_back(i);
    w[i] += v;
  }
};

// exclude >= 0 restricts to trees whose subsample omits that training index.
inline int accumulate_weights(const Forest& forest, const double* x, int exclude,
                              WeightAccumulator& acc) {
  acc.reset(forest.n);
  int contributing = 0;
  for (const Tree& tree : forest.trees) {
    if (exclude >= 0 && tree.contains(exclude)) continue;
    const int leaf = tree.route(x);
    const int b = tree.leaf_begin(leaf), e = tree.leaf_end(leaf);
    if (b == e) continue;
    ++contributing;
    const double mass = 1.0 / (e - b);
    for (int k = b; k < e; ++k) acc.add(tree.leaf_items[k], mass);
  }
  return contributing;
}

inline ForestWeights finalize_weights(WeightAccumulator& acc, int contributing) {
  ForestWeights out;
  out.contributing_trees = contributing;
  if (contributing == 0) return out;
  std::sort(acc.touched.begin(), acc.touched.end());
  out.pairs.reserve(acc.touched.size());
  const double inv = 1.0 / contributing;
  for (const int i : acc.touched) out.pairs.emplace_back(i, acc.w[i] * inv);
  return out;
}

inline ForestWeights forest_weights(const Forest& forest, const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != forest.p) throw parse_error("query dimension mismatch");
  WeightAccumulator acc;
  const int c = accumulate_weights(forest, x.data(), -1, acc);
  return finalize_weights(acc, c);
}

// Out-of-bag kernel for training row i: averages only trees that never saw i.
inline ForestWeights oob_weights(const Forest& forest, const FeatureMatrix& X, int i) {
  std::vector<double> x;
  X.fill_row(i, x);
  WeightAccumulator acc;
  const int c = accumulate_weights(forest, x.data(), i, acc);
  if (c == 0) throw fit_error("no out-of-bag trees for sample " + std::to_string(i));
  return finalize_weights(acc, c);
}

}  // namespace csf
