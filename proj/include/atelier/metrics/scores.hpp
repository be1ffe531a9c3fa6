// SPDX-License-Identifier: Apache-2.0
#pragma once

// Inception Score, Frechet distance between Gaussian summaries, and
// R-precision. The IS and FID formulas are the standard external
// definitions:
//
//   IS  = exp( mean_n KL(p(y|x_n) || p(y)) ),  p(y) = row mean
//   FID = |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "atelier/core/tensor.hpp"

namespace atelier::metrics {

// Reference values published for the pretrained generator. Documentation
// only: nothing at desk scale is compared against them.
namespace reference {
struct GeneratorScores {
  const char* dataset;
  double is_mean, is_pm, r_precision_pct, r_precision_pm_pct, fid;
};
inline constexpr GeneratorScores kCub{"CUB", 4.71, 0.06, 76.58, 0.53, 11.91};
inline constexpr GeneratorScores kCoco{"COCO", 32.43, 0.58, 92.23, 0.37, 24.24};

struct StyleTransferLosses {
  const char* model;
  double observed_style, observed_content, unobserved_style, unobserved_content;
};
// Model A trained on paintings; model B on textures and painter-by-numbers.
inline constexpr StyleTransferLosses kModelA{"A", 7.48e5, 6.74e4, 1.07e6, 6.48e4};
inline constexpr StyleTransferLosses kModelB{"B", 2.08e4, 8.92e4, 9.95e5, 7.54e4};
}  // namespace reference

inline constexpr double kLogEps = 1e-12;

// probs: N x K, rows non-negative and summing to 1 within 1e-6.
inline void validate_probabilities(const Tensor& probs) {
  require(probs.rank() == 2 && probs.dim(0) >= 1 && probs.dim(1) >= 1, "class probabilities must be a non-empty N x K matrix");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = probs[i * k + j];
      require(std::isfinite(p) && p >= 0.0, "class probabilities must be finite and non-negative (row " + std::to_string(i) + ")");
      s += p;
    }
    require(std::abs(s - 1.0) <= 1e-6, "class probability row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
}

inline double inception_score(const Tensor& probs) {
  validate_probabilities(probs);
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<double> marginal(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) marginal[j] += probs[i * k + j] / static_cast<double>(n);
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double p = probs[i * k + j];
      if (p > 0.0) kl += p * (std::log(std::max(p, kLogEps)) - std::log(std::max(marginal[j], kLogEps)));
    }
  // Clamp tiny excursions from rounding back into the provable range.
  return std::clamp(std::exp(kl / static_cast<double>(n)), 1.0, static_cast<double>(k));
}

struct MeanError {
  double mean = 0.0;
  double std_err = 0.0;  // standard error over splits, 0 for a single split

  nlohmann::json to_json() const { return {{"mean", mean}, {"std_err", std_err}}; }
};

inline MeanError mean_and_error(const std::vector<double>& xs) {
  require(!xs.empty(), "mean_and_error: empty sample");
  MeanError r;
  for (double x : xs) r.mean += x / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std_err = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  }
  return r;
}

// IS over `splits` contiguous blocks of rows, reduced in block order.
inline MeanError inception_score_splits(const Tensor& probs, std::size_t splits) {
  validate_probabilities(probs);
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  require(splits >= 1 && splits <= n, "inception_score_splits: need 1 <= splits <= rows");
  std::vector<double> scores;
  for (std::size_t s = 0; s < splits; ++s) {
    const std::size_t lo = s * n / splits, hi = (s + 1) * n / splits;
    Tensor block({hi - lo, k});
    std::copy(probs.data() + lo * k, probs.data() + hi * k, block.data());
    scores.push_back(inception_score(block));
  }
  return mean_and_error(scores);
}

// ---------------------------------------------------------------------------
// Gaussian summaries and FID

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  void validate() const {
    require(mean.size() >= 1 && cov.rows() == mean.size() && cov.cols() == mean.size(),
            "gaussian summary: covariance must be D x D with D = mean length");
    require(mean.allFinite() && cov.allFinite(), "gaussian summary: non-finite entries");
    require((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-10, "gaussian summary: covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    require(es.eigenvalues().minCoeff() >= -1e-8,
            "gaussian summary: covariance is not positive semi-definite (min eigenvalue " +
                std::to_string(es.eigenvalues().minCoeff()) + ")");
  }
};

// Rows of `samples` (N x D) are observations; the covariance is unbiased.
inline GaussianSummary fit_gaussian(const Tensor& samples) {
  require(samples.rank() == 2 && samples.dim(0) >= 2, "fit_gaussian: need an N x D matrix with N >= 2");
  const auto n = static_cast<Eigen::Index>(samples.dim(0)), d = static_cast<Eigen::Index>(samples.dim(1));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(samples.data(), n, d);
  GaussianSummary g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  return g;
}

// Symmetric PSD square root by eigendecomposition (negative eigenvalues
// from rounding are clipped to 0).
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline double fid(const GaussianSummary& a, const GaussianSummary& b) {
  a.validate();
  b.validate();
  require(a.dim() == b.dim(), "fid: dimension mismatch " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd cross = psd_sqrt(ra * b.cov * ra);
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
  return d < 0.0 ? 0.0 : d;
}

// ---------------------------------------------------------------------------
// R-precision

// One query: the true caption ranks first only if its similarity is
// strictly greater than every distractor's (the true caption loses ties).
template <class Query>
bool r_precision_hit(const Query& query, const std::string& truth, const std::vector<std::string>& distractors,
                     const std::function<double(const Query&, const std::string&)>& similarity) {
  require(!distractors.empty(), "r_precision: need R >= 2 candidates");
  std::set<std::string> seen{truth};
  for (const auto& d : distractors)
    if (!seen.insert(d).second) throw Error("invalid_argument", "r_precision: duplicate candidate '" + d + "'");
  const double t = similarity(query, truth);
  return std::all_of(distractors.begin(), distractors.end(), [&](const auto& d) { return t > similarity(query, d); });
}

template <class Query>
struct RQuery {
  Query query;
  std::string truth;
  std::vector<std::string> distractors;
};

// Mean hit rate over queries with its standard error over `batches`
// contiguous query batches.
template <class Query>
MeanError r_precision(const std::vector<RQuery<Query>>& queries,
                      const std::function<double(const Query&, const std::string&)>& similarity,
                      std::size_t batches = 1) {
  require(!queries.empty(), "r_precision: no queries");
  require(batches >= 1 && batches <= queries.size(), "r_precision: need 1 <= batches <= queries");
  std::vector<double> rates;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t lo = b * queries.size() / batches, hi = (b + 1) * queries.size() / batches;
    double hits = 0.0;
    for (std::size_t i = lo; i < hi; ++i)
      hits += r_precision_hit(queries[i].query, queries[i].truth, queries[i].distractors, similarity) ? 1.0 : 0.0;
    rates.push_back(hits / static_cast<double>(hi - lo));
  }
  MeanError r = mean_and_error(rates);
  if (batches == 1) r.mean = rates[0];
  return r;
}

inline constexpr std::size_t kDefaultR = 100;

}  // namespace atelier::metrics
