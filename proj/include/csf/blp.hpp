#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "csf/common.hpp"
#include "csf/csf_estimator.hpp"

namespace csf {

// Doubly robust projection scores: out-of-bag effect prediction plus the
// score residual rescaled by the treatment variance e(1-e).  Regressing
// these on covariates gives the best linear projection of the CATE.
inline std::vector<double> compute_gamma(const CsfModel& model, const SurvivalDataset& ds) {
  const int m = model.rows();
  std::vector<double> gamma(m);
  parallel_chunks(model.forest.config.threads, m, [&](int begin, int end) {
    for (int r = begin; r < end; ++r) {
      const auto& x = ds.samples[model.row_map[r]].x;
      const double tau = predict_ratio(model.forest, model.cache, x.data(), r).value();
      const double e = model.e_model[r];
      gamma[r] = tau + (model.parts.a[r] - tau * model.parts.b[r]) / (e * (1.0 - e));
    }
  });
  return gamma;
}

enum class HcVariant { hc0, hc1, hc3 };

struct BlpResult {
  std::vector<std::string> terms;      // "(intercept)" then covariate names
  std::vector<double> estimates;       // beta0 then beta
  std::vector<double> std_errs;
  int n = 0;

  double beta0() const { return estimates[0]; }
};

// OLS of gamma on (1, A) with heteroskedasticity-robust sandwich errors.
inline BlpResult best_linear_projection(const std::vector<double>& gamma,
                                        const std::vector<std::vector<double>>& covariates,
                                        const std::vector<std::string>& names = {},
                                        HcVariant hc = HcVariant::hc3) {
  const int n = static_cast<int>(gamma.size());
  const int q = covariates.empty() ? 0 : static_cast<int>(covariates[0].size());
  const int k = q + 1;
  if (n <= k) throw fit_error("projection needs more samples than coefficients");
  if (!covariates.empty() && static_cast<int>(covariates.size()) != n)
    throw fit_error("projection covariates and scores disagree in length");

  Eigen::MatrixXd X(n, k);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    for (int j = 0; j < q; ++j) X(i, j + 1) = covariates[i][j];
    y(i) = gamma[i];
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < k) throw fit_error("singular projection design (collinear covariates)");
  const Eigen::VectorXd beta = qr.solve(y);
  const Eigen::VectorXd resid = y - X * beta;

  const Eigen::MatrixXd xtx_inv = (X.transpose() * X).ldlt().solve(Eigen::MatrixXd::Identity(k, k));
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd xi = X.row(i).transpose();
    double r2 = resid(i) * resid(i);
    if (hc == HcVariant::hc3) {
      double lever = 1.0 - xi.dot(xtx_inv * xi);
      if (lever < 1e-12) lever = 1e-12;
      r2 /= lever * lever;
    }
    meat += r2 * xi * xi.transpose();
  }
  if (hc == HcVariant::hc1) meat *= static_cast<double>(n) / (n - k);
  const Eigen::MatrixXd cov = xtx_inv * meat * xtx_inv;

  BlpResult out;
  out.n = n;
  out.terms.push_back("(intercept)");
  for (int j = 0; j < q; ++j)
    out.terms.push_back(j < static_cast<int>(names.size()) ? names[j] : "a" + std::to_string(j + 1));
  for (int j = 0; j < k; ++j) {
    out.estimates.push_back(beta(j));
    out.std_errs.push_back(std::sqrt(std::max(0.0, cov(j, j))));
  }
  return out;
}

}  // namespace csf
