#pragma once

#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "csf/common.hpp"
#include "csf/forest.hpp"
#include "csf/random.hpp"
#include "csf/survival_data.hpp"
#include "csf/threading.hpp"

namespace csf {

namespace seed_tag {
inline constexpr std::uint64_t propensity = 0x70726f70ULL;
inline constexpr std::uint64_t censoring = 0x63656e73ULL;
inline constexpr std::uint64_t failure = 0x6661696cULL;
inline constexpr std::uint64_t cart = 0x63617274ULL;
inline constexpr std::uint64_t ipcw_e = 0x69652e65ULL;
inline constexpr std::uint64_t ipcw_m = 0x69652e6dULL;
}  // namespace seed_tag

// Cross-fit nuisance components on a shared time grid.  Curves are stored
// per sample, row-major over grid points; value at grid index -1 (before the
// first point) is implicitly 1 for survival curves and q_zero for Q.
struct NuisanceSet {
  TimeGrid grid;
  int n = 0;
  std::vector<double> e_hat;  // clamped propensity per sample
  std::vector<double> m_hat;  // E[T ^ t_max | X_i] estimate per sample
  std::array<std::vector<double>, 2> s_c;     // censoring survival, per arm, n*K
  std::array<std::vector<double>, 2> s_t;     // failure survival, per arm, n*K
  std::array<std::vector<double>, 2> q;       // expected capped survival given T > t_k
  std::array<std::vector<double>, 2> q_zero;  // Q_w(0 | X_i) = E[T ^ t_max | X_i, w]
  double clamp_floor = 0.05;
  double e_clamp = 0.01;
  std::vector<std::string> warnings;

  int grid_size() const { return grid.size(); }
  const double* s_c_row(int w, int i) const { return s_c[w].data() + static_cast<std::size_t>(i) * grid.size(); }
  const double* s_t_row(int w, int i) const { return s_t[w].data() + static_cast<std::size_t>(i) * grid.size(); }
  const double* q_row(int w, int i) const { return q[w].data() + static_cast<std::size_t>(i) * grid.size(); }
};

struct NuisanceOptions {
  ForestConfig forest;  // defaults below are applied when fields are left at 0
  int grid_cap = 512;
  double clamp_floor = 0.05;
  double e_clamp = 0.01;

  NuisanceOptions() {
    forest.num_trees = 500;
    forest.min_node_size = 15;
    forest.mtry = 0;
  }
};

// Per-tree honest leaf means of two response vectors; prediction at x is
// sum over contributing trees of mean(a) divided by the same sum of mean(b).
struct LeafStatCache {
  std::vector<std::vector<double>> abar, bbar;

  void build(const Forest& forest, const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t B = forest.trees.size();
    abar.assign(B, {});
    bbar.assign(B, {});
    for (std::size_t t = 0; t < B; ++t) {
      const Tree& tree = forest.trees[t];
      abar[t].assign(tree.nodes.size(), 0.0);
      bbar[t].assign(tree.nodes.size(), 0.0);
      for (std::size_t nd = 0; nd < tree.nodes.size(); ++nd) {
        if (tree.nodes[nd].feature >= 0) continue;
        const int lb = tree.nodes[nd].left, le = tree.nodes[nd].right;
        if (lb == le) continue;
        double sa = 0.0, sb = 0.0;
        for (int k = lb; k < le; ++k) {
          const int i = tree.leaf_items[k];
          sa += a[i];
          sb += b[i];
        }
        abar[t][nd] = sa / (le - lb);
        bbar[t][nd] = sb / (le - lb);
      }
    }
  }
};

struct RatioPrediction {
  double num = 0.0;  // sum over trees of leaf mean(a)
  double den = 0.0;  // sum over trees of leaf mean(b)
  int trees = 0;

  double value() const {
    if (trees == 0 || den == 0.0) throw fit_error("prediction undefined: no usable trees or zero denominator");
    return num / den;
  }
};

inline RatioPrediction predict_ratio(const Forest& forest, const LeafStatCache& cache,
                                     const double* x, int exclude = -1) {
  RatioPrediction out;
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    const Tree& tree = forest.trees[t];
    if (exclude >= 0 && tree.contains(exclude)) continue;
    const int leaf = tree.route(x);
    if (tree.leaf_begin(leaf) == tree.leaf_end(leaf)) continue;
    out.num += cache.abar[t][leaf];
    out.den += cache.bbar[t][leaf];
    ++out.trees;
  }
  return out;
}

// Split objective for conditional survival trees: each tree recentres its own
// split sample by the pooled cumulative hazard of the target event and runs
// CART on the resulting residuals event_i - Lambda(U_i).  Using only the
// tree's split sample keeps out-of-bag curves independent of the held-out row.
class SurvivalCurveSplitter {
public:
  SurvivalCurveSplitter(int n, int grid_size, const std::vector<int>* u_idx, const std::vector<int>* event)
      : n_(n), grid_size_(grid_size), u_idx_(u_idx), event_(event) {}

  void begin_tree(const std::vector<int>& split_sample, std::vector<double>& ctx) const {
    ctx.assign(n_, 0.0);
    std::vector<double> dn(grid_size_, 0.0), exits(grid_size_, 0.0);
    double at_risk = 0.0;
    for (const int i : split_sample) {
      const int g = (*u_idx_)[i];
      if (g < 0) continue;
      at_risk += 1.0;
      exits[g] += 1.0;
      if ((*event_)[i]) dn[g] += 1.0;
    }
    std::vector<double> lambda(grid_size_, 0.0);
    double cum = 0.0, y = at_risk;
    for (int k = 0; k < grid_size_; ++k) {
      if (y > 0.0) cum += dn[k] / y;
      lambda[k] = cum;
      y -= exits[k];
    }
    for (const int i : split_sample) {
      const int g = (*u_idx_)[i];
      ctx[i] = static_cast<double>((*event_)[i]) - (g >= 0 ? lambda[g] : 0.0);
    }
  }

  bool relabel(const std::vector<int>& node, const std::vector<double>& ctx, std::vector<double>& rho) const {
    double sum = 0.0;
    for (const int i : node) sum += ctx[i];
    const double m = static_cast<double>(node.size());
    const double mean = sum / m;
    for (const int i : node) rho[i] = (ctx[i] - mean) / m;
    return true;
  }

private:
  int n_;
  int grid_size_;
  const std::vector<int>* u_idx_;
  const std::vector<int>* event_;
};

struct KmScratch {
  std::vector<double> dn, exits;
};

// Kernel-weighted Kaplan-Meier over the grid.  Weights come in as the dense
// accumulator from the forest (scaling is irrelevant to the product-limit
// form).  Risk sets carry the last value forward once they empty out.
inline void weighted_km(const WeightAccumulator& acc, const std::vector<int>& u_idx,
                        const std::vector<int>& event, int grid_size, KmScratch& s, double* out) {
  s.dn.assign(grid_size, 0.0);
  s.exits.assign(grid_size, 0.0);
  double at_risk = 0.0;
  for (const int i : acc.touched) {
    const int g = u_idx[i];
    if (g < 0) continue;
    const double wt = acc.w[i];
    at_risk += wt;
    s.exits[g] += wt;
    if (event[i]) s.dn[g] += wt;
  }
  double surv = 1.0, y = at_risk;
  for (int k = 0; k < grid_size; ++k) {
    if (y > 0.0 && s.dn[k] > 0.0) {
      double factor = 1.0 - s.dn[k] / y;
      if (factor < 0.0) factor = 0.0;
      surv *= factor;
    }
    out[k] = surv;
    y -= s.exits[k];
  }
}

// Expected capped failure time given survival past each grid point, by
// right-endpoint discretization of the survival-curve integral.
inline void derive_q(const double* s_row, const TimeGrid& grid, double t_max, double* q_out,
                     double& q_zero_out) {
  const int K = grid.size();
  double tail = 0.0;
  for (int k = K - 1; k >= 0; --k) {
    const double tk = grid.points[k];
    double qv;
    if (s_row[k] > 0.0) {
      qv = tk + tail / s_row[k];
    } else {
      qv = tk;
    }
    if (qv < tk) qv = tk;
    if (qv > t_max) qv = t_max;
    q_out[k] = qv;
    if (k > 0) tail += s_row[k - 1] * (tk - grid.points[k - 1]);
  }
  double q0 = grid.points[0] + tail;  // S = 1 on [0, t_0)
  if (q0 > t_max) q0 = t_max;
  if (q0 < 0.0) q0 = 0.0;
  q_zero_out = q0;
}

inline double derive_m(double e_hat, double q1_zero, double q0_zero) {
  return e_hat * q1_zero + (1.0 - e_hat) * q0_zero;
}

struct HazardTerms {
  double integral_level = 0.0;  // sum over t_k <= u of h_k / S^C(t_k)
  double integral_q = 0.0;      // same sum weighted by (Q(t_k) - m_hat)
  int clamped = 0;              // grid points at or below u where the floor bound
};

// Discrete censoring-hazard sums up to grid index u_idx (inclusive);
// u_idx == -1 means u precedes the grid and both sums are empty.
inline HazardTerms derive_hazard_terms(const double* s_c_row, int u_idx, const double* q_row,
                                       double m_hat, double clamp_floor) {
  HazardTerms out;
  double prev = 1.0;
  for (int k = 0; k <= u_idx; ++k) {
    double sk = s_c_row[k];
    if (sk < clamp_floor) {
      sk = clamp_floor;
      ++out.clamped;
    }
    const double h = (prev - sk) / prev;
    const double r = h / sk;
    out.integral_level += r;
    out.integral_q += r * (q_row[k] - m_hat);
    prev = sk;
  }
  return out;
}

inline std::vector<int> map_to_grid(const SurvivalDataset& ds, const TimeGrid& grid) {
  std::vector<int> u_idx(ds.n());
  for (int i = 0; i < ds.n(); ++i) u_idx[i] = grid.lookup(ds.samples[i].u);
  return u_idx;
}

inline std::vector<double> fit_propensity(const SurvivalDataset& ds, ForestConfig cfg,
                                          double e_clamp = 0.01) {
  const int n = ds.n();
  int n1 = 0;
  for (const auto& s : ds.samples) n1 += s.w;
  if (n1 == 0 || n1 == n) throw fit_error("propensity fit requires both treatment arms");

  const FeatureMatrix X = FeatureMatrix::from_dataset(ds);
  std::vector<double> w_resp(n), ones(n, 1.0);
  for (int i = 0; i < n; ++i) w_resp[i] = static_cast<double>(ds.samples[i].w);

  const SolveSplitter splitter(&w_resp, &ones);
  const Forest forest = grow_forest(X, splitter, cfg);
  LeafStatCache cache;
  cache.build(forest, w_resp, ones);

  std::vector<double> e_hat(n);
  parallel_chunks(cfg.threads, n, [&](int begin, int end) {
    std::vector<double> x;
    for (int i = begin; i < end; ++i) {
      X.fill_row(i, x);
      double e = predict_ratio(forest, cache, x.data(), i).value();
      if (e < e_clamp) e = e_clamp;
      if (e > 1.0 - e_clamp) e = 1.0 - e_clamp;
      e_hat[i] = e;
    }
  });
  return e_hat;
}

enum class SurvivalTarget { censoring, failure };

// Out-of-bag conditional survival curves for each sample, evaluated at both
// treatment arms.  One forest with (X, W) features serves both arms: the
// query vector carries w in its last coordinate.  Returns false (curves set
// to 1) when the target event never occurs.
inline bool fit_conditional_survival(const SurvivalDataset& ds, SurvivalTarget target,
                                     const TimeGrid& grid, ForestConfig cfg,
                                     std::array<std::vector<double>, 2>& curves) {
  const int n = ds.n();
  const int K = grid.size();
  const std::vector<int> u_idx = map_to_grid(ds, grid);
  std::vector<int> event(n);
  long total_events = 0;
  for (int i = 0; i < n; ++i) {
    const int is_event = target == SurvivalTarget::censoring ? 1 - ds.samples[i].delta : ds.samples[i].delta;
    event[i] = is_event;
    total_events += is_event;
  }
  curves[0].assign(static_cast<std::size_t>(n) * K, 1.0);
  curves[1].assign(static_cast<std::size_t>(n) * K, 1.0);
  if (total_events == 0) return false;

  const FeatureMatrix XW = FeatureMatrix::with_arm(ds);
  const SurvivalCurveSplitter splitter(n, K, &u_idx, &event);
  const Forest forest = grow_forest(XW, splitter, cfg);

  parallel_chunks(cfg.threads, n, [&](int begin, int end) {
    WeightAccumulator acc;
    KmScratch km;
    std::vector<double> x;
    for (int i = begin; i < end; ++i) {
      XW.fill_row(i, x);
      for (int w = 0; w < 2; ++w) {
        x[XW.p - 1] = static_cast<double>(w);
        const int c = accumulate_weights(forest, x.data(), i, acc);
        if (c == 0) throw fit_error("no out-of-bag trees for sample " + std::to_string(i));
        weighted_km(acc, u_idx, event, K, km, curves[w].data() + static_cast<std::size_t>(i) * K);
      }
    }
  });
  return true;
}

inline NuisanceSet assemble_nuisances(const SurvivalDataset& ds, const NuisanceOptions& opts,
                                      const TimeGrid* shared_grid = nullptr) {
  if (ds.n() == 0) throw fit_error("cannot fit nuisances on empty dataset");
  if (!(ds.t_max > 0.0)) throw fit_error("dataset has no horizon; run truncate_and_recode first");

  NuisanceSet nu;
  nu.n = ds.n();
  nu.clamp_floor = opts.clamp_floor;
  nu.e_clamp = opts.e_clamp;
  nu.grid = shared_grid ? *shared_grid : build_time_grid(ds, opts.grid_cap);
  const int K = nu.grid.size();

  ForestConfig cfg = opts.forest;
  cfg.seed = derive_seed(opts.forest.seed, seed_tag::propensity);
  nu.e_hat = fit_propensity(ds, cfg, opts.e_clamp);

  cfg.seed = derive_seed(opts.forest.seed, seed_tag::censoring);
  if (!fit_conditional_survival(ds, SurvivalTarget::censoring, nu.grid, cfg, nu.s_c))
    nu.warnings.push_back("no censoring events; censoring survival fixed at 1");

  cfg.seed = derive_seed(opts.forest.seed, seed_tag::failure);
  if (!fit_conditional_survival(ds, SurvivalTarget::failure, nu.grid, cfg, nu.s_t))
    nu.warnings.push_back("no failure events; failure survival fixed at 1");

  for (int w = 0; w < 2; ++w) {
    nu.q[w].assign(nu.s_t[w].size(), 0.0);
    nu.q_zero[w].assign(nu.n, 0.0);
    for (int i = 0; i < nu.n; ++i)
      derive_q(nu.s_t_row(w, i), nu.grid, ds.t_max, nu.q[w].data() + static_cast<std::size_t>(i) * K,
               nu.q_zero[w][i]);
  }

  nu.m_hat.resize(nu.n);
  for (int i = 0; i < nu.n; ++i) nu.m_hat[i] = derive_m(nu.e_hat[i], nu.q_zero[1][i], nu.q_zero[0][i]);
  return nu;
}

inline DiagnosticsReport diagnose(const SurvivalDataset& ds, const NuisanceSet& nu) {
  DiagnosticsReport rep;
  const int n = ds.n();
  if (n == 0 || nu.n != n) throw fit_error("diagnose: nuisances do not match dataset");
  double e_lo = 1.0, e_hi = 0.0, floor_c = 1.0;
  int events = 0, at_horizon = 0;
  const std::vector<int> u_idx = map_to_grid(ds, nu.grid);
  for (int i = 0; i < n; ++i) {
    e_lo = std::min(e_lo, nu.e_hat[i]);
    e_hi = std::max(e_hi, nu.e_hat[i]);
    const int g = u_idx[i];
    const double sc = g >= 0 ? nu.s_c_row(ds.samples[i].w, i)[g] : 1.0;
    floor_c = std::min(floor_c, sc);
    events += ds.samples[i].delta;
    if (ds.samples[i].u == ds.t_max) ++at_horizon;
  }
  rep.propensity_min = e_lo;
  rep.propensity_max = e_hi;
  rep.censoring_floor = floor_c;
  rep.event_rate = static_cast<double>(events) / n;
  rep.horizon_mass = static_cast<double>(at_horizon) / n;
  if (e_lo < 0.01 || e_hi > 0.99)
    rep.warnings.push_back("propensity estimates at the overlap clamp; identification is fragile");
  if (floor_c < nu.clamp_floor)
    rep.warnings.push_back("censoring survival below clamp floor at some observed times");
  return rep;
}

}  // namespace csf
