#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "csf/common.hpp"
#include "csf/dr_score.hpp"
#include "csf/forest.hpp"
#include "csf/nuisance.hpp"
#include "csf/random.hpp"
#include "csf/survival_data.hpp"
#include "csf/threading.hpp"

namespace csf {

struct CsfOptions {
  ForestConfig cart;  // the effect forest; cart.seed is the master seed
  NuisanceOptions nuisance;

  CsfOptions() {
    cart.num_trees = 2000;
    cart.min_node_size = 5;
  }
};

struct CatePrediction {
  double tau_hat = 0.0;
  double v_hat = 0.0;
  double sigma_hat = -1.0;  // < 0 when variance was not requested
  double lower = 0.0;
  double upper = 0.0;
  bool degenerate_variance = false;
};

// Fitted estimator.  Rows are the training indices the forest and score
// parts are defined over; for the IPCW baseline these are the complete cases
// and row_map points back into the original dataset.
struct CsfModel {
  std::string method = "csf";
  double t_max = 0.0;
  int p = 0;
  Forest forest;
  ScoreParts parts;
  std::vector<double> e_model;        // per model row, for projection scores
  std::vector<double> ipcw_weights;   // per model row, ipcw method only
  std::vector<int> row_map;           // model row -> original dataset row
  NuisanceSet nuisances;              // csf: full set; ipcw: grid + censoring curves
  LeafStatCache cache;                // derived from forest + parts

  int rows() const { return parts.n(); }
  void rebuild_cache() { cache.build(forest, parts.a, parts.b); }
};

// Node relabeling for the effect forest: solve the node, then propagate the
// per-sample influence values rho_i = (a_i - tau_node * b_i) / sum_node(b).
inline bool relabel_node(const std::vector<int>& node, const ScoreParts& parts,
                         std::vector<double>& rho) {
  const SolveSplitter splitter(&parts.a, &parts.b);
  std::vector<double> ctx;
  return splitter.relabel(node, ctx, rho);
}

namespace detail {

inline void require_fittable(const SurvivalDataset& ds) {
  if (ds.n() == 0) throw fit_error("empty dataset");
  if (!(ds.t_max > 0.0)) throw fit_error("dataset has no horizon; run truncate_and_recode first");
  int n1 = 0;
  for (const auto& s : ds.samples) n1 += s.w;
  if (n1 == 0 || n1 == ds.n()) throw fit_error("both treatment arms are required");
}

}  // namespace detail

inline CsfModel fit_csf(const SurvivalDataset& ds, const CsfOptions& opts,
                        const NuisanceSet* precomputed = nullptr) {
  detail::require_fittable(ds);
  const std::uint64_t master = opts.cart.seed;

  CsfModel model;
  model.method = "csf";
  model.t_max = ds.t_max;
  model.p = ds.p;

  if (precomputed) {
    model.nuisances = *precomputed;
  } else {
    NuisanceOptions nopt = opts.nuisance;
    nopt.forest.seed = master;
    nopt.forest.threads = opts.cart.threads;
    model.nuisances = assemble_nuisances(ds, nopt);
  }

  model.parts = compute_score_parts(ds, model.nuisances);
  double sum_b = 0.0;
  for (const double b : model.parts.b) sum_b += b;
  if (sum_b == 0.0) throw fit_error("no identification: score denominators sum to zero at the root");

  const FeatureMatrix X = FeatureMatrix::from_dataset(ds);
  ForestConfig cart = opts.cart;
  cart.seed = derive_seed(master, seed_tag::cart);
  const SolveSplitter splitter(&model.parts.a, &model.parts.b);
  model.forest = grow_forest(X, splitter, cart);

  model.e_model = model.nuisances.e_hat;
  model.row_map.resize(ds.n());
  for (int i = 0; i < ds.n(); ++i) model.row_map[i] = i;
  model.rebuild_cache();
  return model;
}

// Complete-case causal forest with inverse-censoring weights: every sum the
// forest evaluates (node solves, relabeling, kernel solves) carries the
// weight through the (a, b) parts.  Censoring curves are shared with the
// main estimator when a precomputed nuisance set is supplied.
inline CsfModel fit_ipcw_cf(const SurvivalDataset& ds, const CsfOptions& opts,
                            const NuisanceSet* precomputed = nullptr) {
  detail::require_fittable(ds);
  const std::uint64_t master = opts.cart.seed;
  const int n = ds.n();

  CsfModel model;
  model.method = "ipcw";
  model.t_max = ds.t_max;
  model.p = ds.p;

  NuisanceSet& nu = model.nuisances;
  if (precomputed) {
    nu.grid = precomputed->grid;
    nu.n = precomputed->n;
    nu.s_c = precomputed->s_c;
    nu.clamp_floor = precomputed->clamp_floor;
    nu.e_clamp = precomputed->e_clamp;
  } else {
    NuisanceOptions nopt = opts.nuisance;
    nu.grid = build_time_grid(ds, nopt.grid_cap);
    nu.n = n;
    nu.clamp_floor = nopt.clamp_floor;
    nu.e_clamp = nopt.e_clamp;
    ForestConfig cfg = nopt.forest;
    cfg.threads = opts.cart.threads;
    cfg.seed = derive_seed(master, seed_tag::censoring);
    if (!fit_conditional_survival(ds, SurvivalTarget::censoring, nu.grid, cfg, nu.s_c))
      nu.warnings.push_back("no censoring events; censoring survival fixed at 1");
  }

  const int K = nu.grid.size();
  std::vector<int> complete;
  for (int i = 0; i < n; ++i)
    if (ds.samples[i].delta == 1) complete.push_back(i);
  if (complete.empty()) throw fit_error("no complete cases: every sample is censored");
  const int m = static_cast<int>(complete.size());

  std::vector<double> k_w(m);
  for (int r = 0; r < m; ++r) {
    const int i = complete[r];
    const int g = nu.grid.lookup(ds.samples[i].u);
    double sc = g >= 0 ? nu.s_c[ds.samples[i].w][static_cast<std::size_t>(i) * K + g] : 1.0;
    if (sc < nu.clamp_floor) sc = nu.clamp_floor;
    k_w[r] = 1.0 / sc;
  }

  FeatureMatrix Xsub(m, ds.p);
  for (int r = 0; r < m; ++r)
    for (int j = 0; j < ds.p; ++j) Xsub.at(r, j) = ds.samples[complete[r]].x[j];

  std::vector<double> e_r(m), m_r(m);
  if (precomputed) {
    for (int r = 0; r < m; ++r) {
      e_r[r] = precomputed->e_hat[complete[r]];
      m_r[r] = precomputed->m_hat[complete[r]];
    }
  } else {
    ForestConfig cfg = opts.nuisance.forest;
    cfg.threads = opts.cart.threads;
    std::vector<double> aw(m), au(m);
    for (int r = 0; r < m; ++r) {
      aw[r] = k_w[r] * ds.samples[complete[r]].w;
      au[r] = k_w[r] * ds.samples[complete[r]].u;
    }
    int n1 = 0;
    for (const int i : complete) n1 += ds.samples[i].w;
    if (n1 == 0 || n1 == m) throw fit_error("complete cases cover a single treatment arm");

    cfg.seed = derive_seed(master, seed_tag::ipcw_e);
    {
      const SolveSplitter sp(&aw, &k_w);
      const Forest f = grow_forest(Xsub, sp, cfg);
      LeafStatCache cache;
      cache.build(f, aw, k_w);
      parallel_chunks(cfg.threads, m, [&](int begin, int end) {
        std::vector<double> x;
        for (int r = begin; r < end; ++r) {
          Xsub.fill_row(r, x);
          double e = predict_ratio(f, cache, x.data(), r).value();
          e = std::min(std::max(e, nu.e_clamp), 1.0 - nu.e_clamp);
          e_r[r] = e;
        }
      });
    }
    cfg.seed = derive_seed(master, seed_tag::ipcw_m);
    {
      const SolveSplitter sp(&au, &k_w);
      const Forest f = grow_forest(Xsub, sp, cfg);
      LeafStatCache cache;
      cache.build(f, au, k_w);
      parallel_chunks(cfg.threads, m, [&](int begin, int end) {
        std::vector<double> x;
        for (int r = begin; r < end; ++r) {
          Xsub.fill_row(r, x);
          m_r[r] = predict_ratio(f, cache, x.data(), r).value();
        }
      });
    }
  }

  model.parts.a.resize(m);
  model.parts.b.resize(m);
  for (int r = 0; r < m; ++r) {
    const auto& s = ds.samples[complete[r]];
    const double c = static_cast<double>(s.w) - e_r[r];
    model.parts.a[r] = k_w[r] * (c * (s.u - m_r[r]));
    model.parts.b[r] = k_w[r] * (c * c);
  }
  double sum_b = 0.0;
  for (const double b : model.parts.b) sum_b += b;
  if (sum_b == 0.0) throw fit_error("no identification: score denominators sum to zero at the root");

  ForestConfig cart = opts.cart;
  cart.seed = derive_seed(master, seed_tag::cart);
  const SolveSplitter splitter(&model.parts.a, &model.parts.b);
  model.forest = grow_forest(Xsub, splitter, cart);

  model.e_model = e_r;
  model.ipcw_weights = k_w;
  model.row_map = complete;
  model.rebuild_cache();
  return model;
}

inline CatePrediction predict_tau(const CsfModel& model, const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != model.p) throw parse_error("query dimension mismatch");
  const RatioPrediction r = predict_ratio(model.forest, model.cache, x.data());
  if (r.trees == 0) throw fit_error("no tree places this point in a non-empty leaf");
  if (r.den == 0.0) throw fit_error("no identification at query point");
  CatePrediction out;
  out.tau_hat = r.num / r.den;
  out.v_hat = r.den / r.trees;
  return out;
}

// Variance of the kernel estimate via the grouped-tree (little bags)
// decomposition: between-bag variance of bag-mean scores, debiased by the
// pooled within-bag variance, rescaled by the solve Jacobian V_hat.
inline double estimate_variance(const CsfModel& model, const std::vector<double>& x,
                                bool* degenerate = nullptr) {
  const int k = model.forest.config.ci_group_size;
  if (k < 2) throw fit_error("variance requires ci_group_size >= 2");
  if (static_cast<int>(x.size()) != model.p) throw parse_error("query dimension mismatch");

  const int num_bags = model.forest.num_bags();
  std::vector<double> bag_sum(num_bags, 0.0), bag_sumsq(num_bags, 0.0);
  std::vector<int> bag_cnt(num_bags, 0);
  std::vector<double> abar_t, bbar_t;
  std::vector<int> bag_t;
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < model.forest.trees.size(); ++t) {
    const Tree& tree = model.forest.trees[t];
    const int leaf = tree.route(x.data());
    if (tree.leaf_begin(leaf) == tree.leaf_end(leaf)) continue;
    const double ab = model.cache.abar[t][leaf];
    const double bb = model.cache.bbar[t][leaf];
    abar_t.push_back(ab);
    bbar_t.push_back(bb);
    bag_t.push_back(tree.bag_id);
    num += ab;
    den += bb;
  }
  if (abar_t.empty()) throw fit_error("no tree places this point in a non-empty leaf");
  if (den == 0.0) throw fit_error("no identification at query point");
  const double tau = num / den;
  const double v_hat = den / static_cast<double>(abar_t.size());

  for (std::size_t t = 0; t < abar_t.size(); ++t) {
    const double psi = abar_t[t] - tau * bbar_t[t];
    bag_sum[bag_t[t]] += psi;
    bag_sumsq[bag_t[t]] += psi * psi;
    ++bag_cnt[bag_t[t]];
  }

  double grand = 0.0;
  int s = 0, trees_used = 0;
  for (int g = 0; g < num_bags; ++g) {
    if (bag_cnt[g] != k) continue;  // only complete bags enter the decomposition
    ++s;
    trees_used += k;
    grand += bag_sum[g];
  }
  if (s < 2) throw fit_error("variance unavailable: fewer than 2 complete little bags");
  grand /= trees_used;

  double between = 0.0, within = 0.0;
  for (int g = 0; g < num_bags; ++g) {
    if (bag_cnt[g] != k) continue;
    const double mean_g = bag_sum[g] / k;
    const double d = mean_g - grand;
    between += d * d;
    within += bag_sumsq[g] - k * mean_g * mean_g;
  }
  between /= (s - 1);
  within /= static_cast<double>(s) * (k - 1);

  double h = between - within / k;
  const bool degen = h <= 0.0;
  if (degen) h = 0.0;
  if (degenerate) *degenerate = degen;
  return h / (v_hat * v_hat);
}

inline CatePrediction predict_with_ci(const CsfModel& model, const std::vector<double>& x,
                                      double level) {
  if (!(level >= 0.0 && level < 1.0)) throw parse_error("confidence level must lie in [0, 1)");
  CatePrediction out = predict_tau(model, x);
  bool degen = false;
  const double var = estimate_variance(model, x, &degen);
  out.sigma_hat = std::sqrt(var);
  out.degenerate_variance = degen;
  const double z = level == 0.0 ? 0.0 : normal_quantile(0.5 * (1.0 + level));
  out.lower = out.tau_hat - z * out.sigma_hat;
  out.upper = out.tau_hat + z * out.sigma_hat;
  return out;
}

// Out-of-bag effect predictions for every model row.
inline std::vector<double> oob_predict_tau(const CsfModel& model, const SurvivalDataset& ds) {
  const int m = model.rows();
  std::vector<double> out(m);
  parallel_chunks(model.forest.config.threads, m, [&](int begin, int end) {
    for (int r = begin; r < end; ++r) {
      const auto& x = ds.samples[model.row_map[r]].x;
      out[r] = predict_ratio(model.forest, model.cache, x.data(), r).value();
    }
  });
  return out;
}

}  // namespace csf
