/*
 * Copyright 2026 The FASL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Embedding-space clustering for diversity and hybrid acquisition. All
// distances are Euclidean on the rows of an EmbeddingMatrix.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fasl/encoder.hpp"
#include "fasl/error.hpp"
#include "fasl/random.hpp"

namespace fasl {

struct Clustering {
  // Row index -> cluster id in [0, k).
  std::vector<std::size_t> assignment;
  // One member row index per cluster.
  std::vector<std::size_t> representatives;
  // Objective after every iteration (WCSS for k-means, total distance to the
  // medoid for k-medoids). Empty for single link.
  std::vector<double> cost_history;

  std::size_t k() const noexcept { return representatives.size(); }
};

// k-medoids and single link evaluate O(n^2) distances without storing the
// matrix. Larger inputs are rejected.
inline constexpr std::size_t kMaxPairwiseRows = 20000;
// Up to this many points k-medoids stores the distance matrix and refines
// with PAM swaps.
inline constexpr std::size_t kMaxSwapRows = 2000;

namespace detail {

inline void check_cluster_input(const EmbeddingMatrix& x, std::size_t k) {
  require(k >= 1, "k must be at least 1");
  if (k > static_cast<std::size_t>(x.rows())) {
    throw Error(ErrorCode::invalid_argument, "cannot form " + std::to_string(k) +
                                                 " clusters from " + std::to_string(x.rows()) +
                                                 " points");
  }
}

inline double distance(const EmbeddingMatrix& x, std::size_t i, std::size_t j) {
  return (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
}

// Medoid of `members`: the member with the smallest distance sum; ties go to
// `prefer` if it is tied for best, else to the lowest index.
inline std::size_t medoid_of(const EmbeddingMatrix& x, const std::vector<std::size_t>& members,
                             std::size_t prefer = std::numeric_limits<std::size_t>::max(),
                             double* best_cost = nullptr) {
  std::size_t best = members.front();
  double best_sum = std::numeric_limits<double>::infinity();
  double prefer_sum = std::numeric_limits<double>::infinity();
  for (auto i : members) {
    double s = 0.0;
    for (auto j : members) s += distance(x, i, j);
    if (i == prefer) prefer_sum = s;
    if (s < best_sum || (s == best_sum && i < best)) {
      best_sum = s;
      best = i;
    }
  }
  if (prefer_sum == best_sum) best = prefer;
  if (best_cost) *best_cost = best_sum;
  return best;
}

}  // namespace detail

// Lloyd's k-means with k-means++ seeding. Each cluster's representative is
// the member closest to its centroid.
inline Clustering kmeans(const EmbeddingMatrix& x, std::size_t k, std::uint64_t seed,
                         std::size_t max_iter = 100) {
  detail::check_cluster_input(x, k);
  const auto n = static_cast<std::size_t>(x.rows());
  const Eigen::Index dim = x.cols();
  Rng rng = make_rng(seed);

  EmbeddingMatrix centroids(static_cast<Eigen::Index>(k), dim);
  {
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = uniform_index(rng, n);
    centroids.row(0) = x.row(static_cast<Eigen::Index>(first));
    for (std::size_t c = 1; c < k; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = (x.row(static_cast<Eigen::Index>(i)) -
                          centroids.row(static_cast<Eigen::Index>(c - 1)))
                             .squaredNorm();
        d2[i] = std::min(d2[i], d);
        total += d2[i];
      }
      std::size_t pick = 0;
      if (total > 0.0) {
        const double target = uniform01(rng) * total;
        double acc = 0.0;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          acc += d2[i];
          if (acc > target && d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      } else {
        pick = uniform_index(rng, n);
      }
      centroids.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(pick));
    }
  }

  Clustering out;
  out.assignment.assign(n, k);  // k marks "unassigned"
  auto sq = [&](std::size_t i, std::size_t c) {
    return (x.row(static_cast<Eigen::Index>(i)) - centroids.row(static_cast<Eigen::Index>(c)))
        .squaredNorm();
  };

  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    std::vector<std::size_t> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq(i, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = sq(i, c);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      next[i] = best;
    }
    // Empty clusters take the point farthest from the largest cluster's centroid.
    std::vector<std::size_t> sizes(k, 0);
    for (auto c : next) ++sizes[c];
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] != 0) continue;
      const auto largest = static_cast<std::size_t>(
          std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (next[i] != largest) continue;
        const double d = sq(i, largest);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      next[far] = c;
      --sizes[largest];
      sizes[c] = 1;
      centroids.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(far));
    }
    const bool converged = next == out.assignment;
    out.assignment = std::move(next);

    centroids.setZero();
    for (std::size_t i = 0; i < n; ++i) {
      centroids.row(static_cast<Eigen::Index>(out.assignment[i])) += x.row(static_cast<Eigen::Index>(i));
    }
    for (std::size_t c = 0; c < k; ++c) centroids.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(sizes[c]);
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) wcss += sq(i, out.assignment[i]);
    out.cost_history.push_back(wcss);
    if (converged) break;
  }

  out.representatives.assign(k, n);
  std::vector<double> best(k, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = out.assignment[i];
    const double d = sq(i, c);
    if (d < best[c]) {
      best[c] = d;
      out.representatives[c] = i;
    }
  }
  return out;
}

// k-medoids with the Park-Jun initialization (the k points with the smallest
// normalized distance sums) and alternating assignment / medoid update,
// followed for inputs of at most kMaxSwapRows points by PAM swaps (best
// medoid / non-medoid exchange per pass, evaluated as in FastPAM1) until no
// exchange lowers the cost. Medoids are always input rows. `seed` is
// accepted for interface symmetry; the procedure is deterministic.
inline Clustering kmedoids(const EmbeddingMatrix& x, std::size_t k, std::uint64_t /*seed*/,
                           std::size_t max_iter = 100) {
  detail::check_cluster_input(x, k);
  const auto n = static_cast<std::size_t>(x.rows());
  if (n > kMaxPairwiseRows) {
    throw Error(ErrorCode::invalid_argument,
                "k-medoids supports at most " + std::to_string(kMaxPairwiseRows) + " points");
  }

  // Distances in row blocks via the Gram matrix.
  const Eigen::VectorXd norms = x.rowwise().squaredNorm();
  auto for_each_block = [&](auto&& visit) {
    constexpr Eigen::Index kBlock = 512;
    for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(n); start += kBlock) {
      const Eigen::Index rows = std::min<Eigen::Index>(kBlock, static_cast<Eigen::Index>(n) - start);
      Eigen::MatrixXd d = -2.0 * (x.middleRows(start, rows) * x.transpose());
      d.colwise() += norms.segment(start, rows);
      d.rowwise() += norms.transpose();
      d = d.cwiseMax(0.0).cwiseSqrt();
      visit(start, d);
    }
  };
  std::vector<double> row_sums(n, 0.0);
  for_each_block([&](Eigen::Index start, const Eigen::MatrixXd& d) {
    for (Eigen::Index r = 0; r < d.rows(); ++r) row_sums[static_cast<std::size_t>(start + r)] = d.row(r).sum();
  });
  std::vector<double> v(n, 0.0);
  for_each_block([&](Eigen::Index start, const Eigen::MatrixXd& d) {
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
      const double s = row_sums[static_cast<std::size_t>(start + r)];
      if (s <= 0.0) continue;
      for (Eigen::Index j = 0; j < d.cols(); ++j) v[static_cast<std::size_t>(j)] += d(r, j) / s;
    }
  });
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<std::size_t> medoids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));

  Clustering out;
  auto assign = [&]() {
    std::vector<std::size_t> a(n);
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = detail::distance(x, i, medoids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = detail::distance(x, i, medoids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      a[i] = best;
      cost += best_d;
    }
    // A medoid always belongs to its own cluster, even with duplicate points.
    for (std::size_t c = 0; c < k; ++c) a[medoids[c]] = c;
    out.assignment = std::move(a);
    return cost;
  };

  out.cost_history.push_back(assign());
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < n; ++i) members[out.assignment[i]].push_back(i);
    std::vector<std::size_t> next(k);
    for (std::size_t c = 0; c < k; ++c) next[c] = detail::medoid_of(x, members[c], medoids[c]);
    if (next == medoids) break;
    medoids = std::move(next);
    out.cost_history.push_back(assign());
  }

  if (n <= kMaxSwapRows && k < n) {
    Eigen::MatrixXd dist(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for_each_block([&](Eigen::Index start, const Eigen::MatrixXd& d) { dist.middleRows(start, d.rows()) = d; });
    std::vector<double> d1(n), d2(n), delta(k);
    std::vector<std::size_t> c1(n);
    std::vector<char> is_medoid(n, 0);
    for (std::size_t iter = 0; iter < max_iter; ++iter) {
      std::fill(is_medoid.begin(), is_medoid.end(), 0);
      for (auto m : medoids) is_medoid[m] = 1;
      std::vector<double> removal(k, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        d1[i] = d2[i] = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double d = dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(medoids[c]));
          if (d < d1[i]) {
            d2[i] = d1[i];
            d1[i] = d;
            c1[i] = c;
          } else if (d < d2[i]) {
            d2[i] = d;
          }
        }
        if (k > 1) removal[c1[i]] += d2[i] - d1[i];
      }
      double best_gain = -1e-12 * std::max(1.0, out.cost_history.back());
      std::size_t best_c = k, best_h = n;
      for (std::size_t h = 0; h < n; ++h) {
        if (is_medoid[h]) continue;
        delta = removal;
        double shared = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = dist(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(i));
          if (k == 1) {
            // Every point moves to h.
            shared += d - d1[i];
          } else if (d < d1[i]) {
            shared += d - d1[i];
            delta[c1[i]] += d1[i] - d2[i];
          } else if (d < d2[i]) {
            delta[c1[i]] += d - d2[i];
          }
        }
        for (std::size_t c = 0; c < k; ++c) {
          const double change = delta[c] + shared;
          if (change < best_gain) {
            best_gain = change;
            best_c = c;
            best_h = h;
          }
        }
      }
      if (best_c == k) break;
      medoids[best_c] = best_h;
      out.cost_history.push_back(assign());
    }
  }
  out.representatives = medoids;
  return out;
}

// Single-link agglomerative clustering: repeatedly merge the two clusters
// with the smallest inter-point distance until k remain. Implemented as
// Prim's minimum spanning tree followed by Kruskal-order merging of its edges
// (ties by lowest index pair). Cluster ids are ordered by their lowest
// member; each representative is the cluster medoid.
inline Clustering single_link(const EmbeddingMatrix& x, std::size_t k) {
  detail::check_cluster_input(x, k);
  const auto n = static_cast<std::size_t>(x.rows());
  if (n > kMaxPairwiseRows) {
    throw Error(ErrorCode::invalid_argument,
                "single link supports at most " + std::to_string(kMaxPairwiseRows) + " points");
  }
  struct Edge {
    double w;
    std::size_t a, b;
  };
  std::vector<Edge> edges;
  edges.reserve(n);
  {
    std::vector<char> in_tree(n, 0);
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> parent(n, 0);
    std::size_t current = 0;
    in_tree[0] = 1;
    for (std::size_t step = 1; step < n; ++step) {
      std::size_t next = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (in_tree[j]) continue;
        const double d = detail::distance(x, current, j);
        if (d < best[j] || (d == best[j] && current < parent[j])) {
          best[j] = d;
          parent[j] = current;
        }
        if (next == n || best[j] < best[next]) next = j;
      }
      in_tree[next] = 1;
      edges.push_back({best[next], std::min(next, parent[next]), std::max(next, parent[next])});
      current = next;
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) {
    if (l.w != r.w) return l.w < r.w;
    if (l.a != r.a) return l.a < r.a;
    return l.b < r.b;
  });

  std::vector<std::size_t> uf(n);
  std::iota(uf.begin(), uf.end(), std::size_t{0});
  auto find = [&](std::size_t i) {
    while (uf[i] != i) {
      uf[i] = uf[uf[i]];
      i = uf[i];
    }
    return i;
  };
  std::size_t components = n;
  for (const auto& e : edges) {
    if (components == k) break;
    const auto ra = find(e.a), rb = find(e.b);
    if (ra == rb) continue;
    uf[std::max(ra, rb)] = std::min(ra, rb);
    --components;
  }

  Clustering out;
  out.assignment.assign(n, 0);
  std::vector<std::size_t> id_of_root(n, n);
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = find(i);
    if (id_of_root[r] == n) {
      id_of_root[r] = members.size();
      members.emplace_back();
    }
    out.assignment[i] = id_of_root[r];
    members[id_of_root[r]].push_back(i);
  }
  for (const auto& m : members) out.representatives.push_back(detail::medoid_of(x, m));
  return out;
}

}  // namespace fasl
