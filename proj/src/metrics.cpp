#include "cpgg/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cpgg {

namespace {

void require_same(size_t a, size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": length mismatch");
  if (a == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}

}  // namespace

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return out;
  double ss = 0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return out;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  require_same(x.size(), y.size(), "pearson");
  const double mx = mean_std(x).mean, my = mean_std(y).mean;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein1: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<double> all(a);
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  const auto na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double total = 0;
  size_t ia = 0, ib = 0;
  for (size_t k = 0; k + 1 < all.size(); ++k) {
    while (ia < a.size() && a[ia] <= all[k]) ++ia;
    while (ib < b.size() && b[ib] <= all[k]) ++ib;
    total += std::abs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb) * (all[k + 1] - all[k]);
  }
  return total;
}

Moments moments(const std::vector<Eigen::VectorXd>& rows) {
  if (rows.size() < 2) throw std::invalid_argument("moments need at least two rows");
  const Eigen::Index d = rows.front().size();
  Moments m{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, d)};
  for (const auto& r : rows) m.mean += r;
  m.mean /= static_cast<double>(rows.size());
  for (const auto& r : rows) m.cov += (r - m.mean) * (r - m.mean).transpose();
  m.cov /= static_cast<double>(rows.size() - 1);
  return m;
}

double frechet_distance(const Moments& a, const Moments& b) {
  if (a.mean.size() != b.mean.size()) throw std::invalid_argument("frechet: dimension mismatch");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.cov);
  const Eigen::VectorXd root = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sa = ea.eigenvectors() * root.asDiagonal() * ea.eigenvectors().transpose();
  const Eigen::MatrixXd inner = sa * b.cov * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double cross = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require_same(scores.size(), labels.size(), "auc");
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return scores[i] < scores[j]; });
  double rank_sum = 0;
  size_t pos = 0;
  for (size_t i = 0; i < idx.size();) {
    size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based ranks i+1..j
    for (size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) {
        rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc needs both classes");
  const auto p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * n);
}

double accuracy(const std::vector<double>& probabilities, const std::vector<int>& labels, double threshold) {
  require_same(probabilities.size(), labels.size(), "accuracy");
  size_t hit = 0;
  for (size_t i = 0; i < labels.size(); ++i) hit += (probabilities[i] >= threshold ? 1 : 0) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double r_squared(const std::vector<double>& prediction, const std::vector<double>& target) {
  require_same(prediction.size(), target.size(), "r_squared");
  const double m = mean_std(target).mean;
  double res = 0, tot = 0;
  for (size_t i = 0; i < target.size(); ++i) {
    res += (target[i] - prediction[i]) * (target[i] - prediction[i]);
    tot += (target[i] - m) * (target[i] - m);
  }
  if (tot == 0) return std::numeric_limits<double>::quiet_NaN();
  return 1.0 - res / tot;
}

double mean_abs_error(const std::vector<double>& prediction, const std::vector<double>& target) {
  require_same(prediction.size(), target.size(), "mae");
  double s = 0;
  for (size_t i = 0; i < target.size(); ++i) s += std::abs(prediction[i] - target[i]);
  return s / static_cast<double>(target.size());
}

}  // namespace cpgg
