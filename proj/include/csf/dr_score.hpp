#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "csf/common.hpp"
#include "csf/nuisance.hpp"
#include "csf/survival_data.hpp"

namespace csf {

// Per-sample decomposition psi_tau(i) = a_i - tau * b_i of the doubly robust
// score.  Linearity in tau is what lets nodes and kernels solve in closed
// form: tau = sum(a) / sum(b) over any weighting.
struct ScoreParts {
  std::vector<double> a;
  std::vector<double> b;
  long clamped_points = 0;  // grid evaluations where the censoring floor bound

  int n() const { return static_cast<int>(a.size()); }
};

struct ConstantEffectEstimate {
  double tau_hat = 0.0;
  double std_err = 0.0;
  int n_effective = 0;
};

// Complete-data score for a constant effect tau; the censored-data score
// reduces to this when the censoring survival is identically 1.
inline double robinson_score(double t, int w, double tau, double e_hat, double m_hat) {
  const double c = static_cast<double>(w) - e_hat;
  return c * (t - m_hat - tau * c);
}

struct SampleScore {
  double a = 0.0;
  double b = 0.0;
  int clamped = 0;
};

// Score parts for one observation from its own-arm curves.  u_raw is the
// observed time, u_idx its grid index; q_zero covers u before the first grid
// point, where Q(0) applies and the hazard sums are empty.
inline SampleScore score_parts_for_sample(double u_raw, int u_idx, int delta, int w, double e_hat,
                                          double m_hat, const double* s_c_row, const double* q_row,
                                          double q_zero, double clamp_floor) {
  SampleScore out;
  double s_u = u_idx >= 0 ? s_c_row[u_idx] : 1.0;
  if (s_u < clamp_floor) {
    s_u = clamp_floor;
    ++out.clamped;
  }
  const double q_u = u_idx >= 0 ? q_row[u_idx] : q_zero;
  const double center = delta ? u_raw : q_u;

  const HazardTerms haz = derive_hazard_terms(s_c_row, u_idx, q_row, m_hat, clamp_floor);
  out.clamped += haz.clamped;

  const double c = static_cast<double>(w) - e_hat;
  out.a = c * ((center - m_hat) / s_u - haz.integral_q);
  out.b = c * c * (1.0 / s_u - haz.integral_level);
  return out;
}

inline ScoreParts compute_score_parts(const SurvivalDataset& ds, const NuisanceSet& nu) {
  const int n = ds.n();
  if (nu.n != n) throw fit_error("score parts: nuisances fitted on a different sample count");
  const std::vector<int> u_idx = map_to_grid(ds, nu.grid);
  ScoreParts parts;
  parts.a.resize(n);
  parts.b.resize(n);
  for (int i = 0; i < n; ++i) {
    const auto& s = ds.samples[i];
    const SampleScore sc =
        score_parts_for_sample(s.u, u_idx[i], s.delta, s.w, nu.e_hat[i], nu.m_hat[i],
                               nu.s_c_row(s.w, i), nu.q_row(s.w, i), nu.q_zero[s.w][i], nu.clamp_floor);
    if (!std::isfinite(sc.a) || !std::isfinite(sc.b))
      throw fit_error("non-finite score for sample " + std::to_string(i));
    parts.a[i] = sc.a;
    parts.b[i] = sc.b;
    parts.clamped_points += sc.clamped;
  }
  return parts;
}

// Inverse probability of censoring weight; empty for censored samples, which
// the complete-case estimator drops.
inline std::optional<double> ipcw_weight(const SurvivalDataset& ds, const NuisanceSet& nu, int i) {
  const auto& s = ds.samples[i];
  if (s.delta == 0) return std::nullopt;
  const int g = nu.grid.lookup(s.u);
  double sc = g >= 0 ? nu.s_c_row(s.w, i)[g] : 1.0;
  if (sc < nu.clamp_floor) sc = nu.clamp_floor;
  return 1.0 / sc;
}

inline ConstantEffectEstimate solve_constant_tau(const ScoreParts& parts) {
  double sum_a = 0.0, sum_b = 0.0;
  int n_eff = 0;
  for (int i = 0; i < parts.n(); ++i) {
    sum_a += parts.a[i];
    sum_b += parts.b[i];
    if (parts.a[i] != 0.0 || parts.b[i] != 0.0) ++n_eff;
  }
  if (sum_b == 0.0) throw fit_error("constant-effect solve: sum of score denominators is zero (no identification)");
  ConstantEffectEstimate est;
  est.tau_hat = sum_a / sum_b;
  est.n_effective = n_eff;
  double ss = 0.0;
  for (int i = 0; i < parts.n(); ++i) {
    const double r = parts.a[i] - est.tau_hat * parts.b[i];
    ss += r * r;
  }
  est.std_err = std::sqrt(ss) / std::fabs(sum_b);
  return est;
}

inline void write_score_parts_csv(const ScoreParts& parts, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open file for writing: " + path);
  out << "i,a,b\n";
  for (int i = 0; i < parts.n(); ++i)
    out << i << "," << format_double(parts.a[i]) << "," << format_double(parts.b[i]) << "\n";
}

}  // namespace csf
