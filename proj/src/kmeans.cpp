// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>
#include <random>

#include "mqlrec/rqvae.hpp"

namespace mqlrec {
namespace {

int nearest(const Matrix& centroids, Eigen::Index count, const auto& point) {
  int best = 0;
  double best_d = 0.0;
  for (Eigen::Index k = 0; k < count; ++k) {
    const double d = (point - centroids.row(k)).squaredNorm();
    if (k == 0 || d < best_d) {
      best = static_cast<int>(k);
      best_d = d;
    }
  }
  return best;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int k, int iterations, std::uint64_t seed) {
  if (k < 1) throw InvalidArgument("kmeans: k must be >= 1");
  const Eigen::Index n = points.rows();
  const Eigen::Index dim = points.cols();
  if (n == 0) throw InvalidArgument("kmeans: no points");

  // Canonical row order.
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto row_less = [&](Eigen::Index a, Eigen::Index b) {
    const auto ra = points.row(a);
    const auto rb = points.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  };
  std::stable_sort(order.begin(), order.end(), row_less);
  Matrix sorted(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) sorted.row(i) = points.row(order[i]);

  std::mt19937_64 rng(seed);
  KMeansResult res;
  res.centroids.resize(k, dim);

  // k-means++ seeding.
  std::vector<double> d2(n);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  res.centroids.row(0) = sorted.row(first(rng));
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (sorted.row(i) - res.centroids.row(0)).squaredNorm();
  int chosen = 1;
  while (chosen < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    if (!(total > 0.0)) break;  // every point already coincides with a centre
    std::uniform_real_distribution<double> uniform(0.0, total);
    const double target = uniform(rng);
    double cumulative = 0.0;
    Eigen::Index pick = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      cumulative += d2[i];
      pick = i;
      if (cumulative > target) break;
    }
    res.centroids.row(chosen) = sorted.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (sorted.row(i) - res.centroids.row(chosen)).squaredNorm());
    }
    ++chosen;
  }
  if (chosen < k) {
    res.padded = true;
    const double scale = std::max(1e-12, std::sqrt(sorted.squaredNorm() / static_cast<double>(n * dim)));
    std::normal_distribution<double> jitter(0.0, 1e-3 * scale);
    for (int c = chosen; c < k; ++c) {
      res.centroids.row(c) = res.centroids.row(c % chosen);
      for (Eigen::Index j = 0; j < dim; ++j) res.centroids(c, j) += jitter(rng);
    }
  }

  // Lloyd iterations; an empty cluster keeps its previous centre.
  std::vector<int> assign(n);
  for (int it = 0; it < iterations; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) assign[i] = nearest(res.centroids, k, sorted.row(i));
    Matrix sums = Matrix::Zero(k, dim);
    std::vector<long> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[i]) += sorted.row(i);
      ++counts[assign[i]];
    }
    bool moved = false;
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      const RowVector mean = sums.row(c) / static_cast<double>(counts[c]);
      if (mean != res.centroids.row(c)) moved = true;
      res.centroids.row(c) = mean;
    }
    if (!moved) break;
  }

  res.assignment.assign(n, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    res.assignment[order[i]] = nearest(res.centroids, k, sorted.row(i));
  }
  return res;
}

}  // namespace mqlrec
