#pragma once

#include <Eigen/Dense>

#include <vector>

namespace cpgg {

struct MeanStd {
  double mean = 0, std = 0;  // std is the sample (n-1) deviation; 0 for n < 2
};
MeanStd mean_std(const std::vector<double>& v);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

/// 1-Wasserstein distance between two empirical distributions on the line,
/// the integral of |F_a - F_b|. Sample sizes may differ.
double wasserstein1(std::vector<double> a, std::vector<double> b);

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased
};
Moments moments(const std::vector<Eigen::VectorXd>& rows);

/// ||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2).
double frechet_distance(const Moments& a, const Moments& b);

/// Rank-statistic ROC AUC; tied scores share their average rank, which is
/// the same as giving tied pairs half credit. Needs both classes.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Fraction with (probability >= threshold) == label.
double accuracy(const std::vector<double>& probabilities, const std::vector<int>& labels, double threshold = 0.5);

/// 1 - SS_res / SS_tot; NaN when the target has zero variance.
double r_squared(const std::vector<double>& prediction, const std::vector<double>& target);
double mean_abs_error(const std::vector<double>& prediction, const std::vector<double>& target);

}  // namespace cpgg
