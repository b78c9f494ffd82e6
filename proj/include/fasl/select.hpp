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

// Acquisition strategies: map the unlabeled candidates (with their
// posteriors and embeddings) and the labeled set to a batch of ids.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "fasl/cluster.hpp"
#include "fasl/encoder.hpp"
#include "fasl/error.hpp"
#include "fasl/fsl.hpp"
#include "fasl/random.hpp"

namespace fasl {

enum class StrategyId {
  random,
  least_confidence,
  margin,
  entropy,
  kmeans,
  kmedoids,
  single_link,
  kmeans_margin,
  kmedoids_margin,
  kmedoids_least,
  kmedoids_entropy,
  cal,
};

inline constexpr std::array<StrategyId, 12> kAllStrategies = {
    StrategyId::random,          StrategyId::least_confidence, StrategyId::margin,
    StrategyId::entropy,         StrategyId::kmeans,           StrategyId::kmedoids,
    StrategyId::single_link,     StrategyId::kmeans_margin,    StrategyId::kmedoids_margin,
    StrategyId::kmedoids_least,  StrategyId::kmedoids_entropy, StrategyId::cal,
};

inline std::string_view to_string(StrategyId s) {
  switch (s) {
    case StrategyId::random: return "random";
    case StrategyId::least_confidence: return "least_confidence";
    case StrategyId::margin: return "margin";
    case StrategyId::entropy: return "entropy";
    case StrategyId::kmeans: return "kmeans";
    case StrategyId::kmedoids: return "kmedoids";
    case StrategyId::single_link: return "single_link";
    case StrategyId::kmeans_margin: return "kmeans+margin";
    case StrategyId::kmedoids_margin: return "kmedoids+margin";
    case StrategyId::kmedoids_least: return "kmedoids+least";
    case StrategyId::kmedoids_entropy: return "kmedoids+entropy";
    case StrategyId::cal: return "cal";
  }
  return "?";
}

inline StrategyId parse_strategy(std::string_view s) {
  for (auto id : kAllStrategies) {
    if (to_string(id) == s) return id;
  }
  if (s == "least") return StrategyId::least_confidence;
  throw ValidationError("unknown strategy '" + std::string(s) + "'");
}

inline std::size_t strategy_index(StrategyId s) { return static_cast<std::size_t>(s); }

enum class UncertaintyKind { least_confidence, margin, entropy };

// Higher = more uncertain. least confidence: -P(top); margin:
// -(P(top1) - P(top2)); entropy: -sum p ln p.
inline double uncertainty_score(std::span<const double> p, UncertaintyKind kind) {
  switch (kind) {
    case UncertaintyKind::least_confidence:
      return -*std::max_element(p.begin(), p.end());
    case UncertaintyKind::margin: {
      double first = -1.0, second = -1.0;
      for (double v : p) {
        if (v > first) {
          second = first;
          first = v;
        } else if (v > second) {
          second = v;
        }
      }
      if (p.size() < 2) second = 0.0;
      return -(first - second);
    }
    case UncertaintyKind::entropy: {
      double h = 0.0;
      for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
      }
      return h;
    }
  }
  return 0.0;
}

inline std::optional<UncertaintyKind> uncertainty_of(StrategyId s) {
  switch (s) {
    case StrategyId::least_confidence:
    case StrategyId::kmedoids_least: return UncertaintyKind::least_confidence;
    case StrategyId::margin:
    case StrategyId::kmeans_margin:
    case StrategyId::kmedoids_margin: return UncertaintyKind::margin;
    case StrategyId::entropy:
    case StrategyId::kmedoids_entropy: return UncertaintyKind::entropy;
    default: return std::nullopt;
  }
}

inline bool needs_posteriors(StrategyId s) {
  return uncertainty_of(s).has_value() || s == StrategyId::cal;
}
inline bool needs_embeddings(StrategyId s) {
  return s != StrategyId::random && s != StrategyId::least_confidence &&
         s != StrategyId::margin && s != StrategyId::entropy;
}

// KL(p || q) with both distributions clamped to eps inside the log.
inline double kl_divergence(std::span<const double> p, std::span<const double> q,
                            double eps = 1e-12) {
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] <= 0.0) continue;
    kl += p[j] * (std::log(std::max(p[j], eps)) - std::log(std::max(q[j], eps)));
  }
  return std::max(kl, 0.0);
}

enum class CalDirection { neighbor_to_candidate, candidate_to_neighbor };
enum class CalNeighborSource { posterior, gold };

struct SelectionConfig {
  std::size_t batch_k = 16;
  bool randomize_2k = true;
  std::size_t cal_neighbors = 10;
  CalDirection cal_direction = CalDirection::neighbor_to_candidate;
  CalNeighborSource cal_source = CalNeighborSource::posterior;
  std::uint64_t seed = 0;
};

// Non-owning view of the selection state. Rows of `embeddings` and
// `posteriors` align with `ids` (the unlabeled candidates); the labeled_*
// members describe the annotated set and are used by CAL.
struct PoolState {
  std::vector<std::string> ids;
  const EmbeddingMatrix* embeddings = nullptr;
  const PosteriorMatrix* posteriors = nullptr;

  std::vector<std::string> labeled_ids;
  const EmbeddingMatrix* labeled_embeddings = nullptr;
  const PosteriorMatrix* labeled_posteriors = nullptr;
  std::vector<std::size_t> labeled_gold;
  std::size_t n_labels = 0;
};

// Filled when 2k-randomization ran: the ranked top-2k candidate set the batch
// was drawn from.
struct SelectionTrace {
  bool randomized = false;
  std::vector<std::string> candidate_set;
  std::vector<double> scores;  // per candidate row, for score-ranked strategies
};

namespace detail {

// Candidate rows ordered by descending score, ties by ascending id.
inline std::vector<std::size_t> rank_rows(const std::vector<double>& scores,
                                          const std::vector<std::string>& ids) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  return order;
}

inline std::vector<double> uncertainty_scores(const PosteriorMatrix& p, UncertaintyKind kind) {
  std::vector<double> s(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    s[static_cast<std::size_t>(i)] =
        uncertainty_score(std::span<const double>(p.row(i).data(), static_cast<std::size_t>(p.cols())), kind);
  }
  return s;
}

// Indices of the `count` nearest labeled rows for every candidate row; ties
// go to the lower labeled index.
inline std::vector<std::vector<std::size_t>> nearest_labeled(const EmbeddingMatrix& candidates,
                                                             const EmbeddingMatrix& labeled,
                                                             std::size_t count) {
  const auto n = static_cast<std::size_t>(candidates.rows());
  const auto m = static_cast<std::size_t>(labeled.rows());
  count = std::min(count, m);
  std::vector<std::vector<std::size_t>> out(n);
  const Eigen::VectorXd lnorm = labeled.rowwise().squaredNorm();
  constexpr Eigen::Index kBlock = 1024;
  std::vector<std::size_t> order(m);
  for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(n); start += kBlock) {
    const Eigen::Index rows = std::min<Eigen::Index>(kBlock, static_cast<Eigen::Index>(n) - start);
    Eigen::MatrixXd d = -2.0 * (candidates.middleRows(start, rows) * labeled.transpose());
    d.rowwise() += lnorm.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count),
                        order.end(), [&](std::size_t a, std::size_t b) {
                          const double da = d(r, static_cast<Eigen::Index>(a));
                          const double db = d(r, static_cast<Eigen::Index>(b));
                          if (da != db) return da < db;
                          return a < b;
                        });
      out[static_cast<std::size_t>(start + r)].assign(order.begin(),
                                                      order.begin() + static_cast<std::ptrdiff_t>(count));
    }
  }
  return out;
}

}  // namespace detail

// Average KL divergence between each candidate and its labeled neighborhood.
inline std::vector<double> cal_scores(const PoolState& state, const SelectionConfig& config) {
  if (state.labeled_ids.empty() || !state.labeled_embeddings ||
      state.labeled_embeddings->rows() == 0) {
    throw ValidationError(
        "cal needs labeled examples to form neighborhoods; annotate a first batch with another "
        "strategy");
  }
  require(config.cal_neighbors >= 1, "cal_neighbors must be at least 1");
  const auto neighbors =
      detail::nearest_labeled(*state.embeddings, *state.labeled_embeddings, config.cal_neighbors);
  const auto& cand = *state.posteriors;
  const auto n_labels = static_cast<std::size_t>(cand.cols());
  std::vector<double> one_hot(n_labels, 0.0);
  std::vector<double> scores(state.ids.size(), 0.0);
  for (std::size_t i = 0; i < state.ids.size(); ++i) {
    std::span<const double> q(cand.row(static_cast<Eigen::Index>(i)).data(), n_labels);
    double total = 0.0;
    for (auto nb : neighbors[i]) {
      std::span<const double> p;
      if (config.cal_source == CalNeighborSource::gold) {
        std::fill(one_hot.begin(), one_hot.end(), 0.0);
        one_hot.at(state.labeled_gold.at(nb)) = 1.0;
        p = one_hot;
      } else {
        require(state.labeled_posteriors != nullptr, "cal needs posteriors for labeled examples");
        p = std::span<const double>(state.labeled_posteriors->row(static_cast<Eigen::Index>(nb)).data(),
                                    n_labels);
      }
      total += config.cal_direction == CalDirection::neighbor_to_candidate ? kl_divergence(p, q)
                                                                           : kl_divergence(q, p);
    }
    scores[i] = total / static_cast<double>(neighbors[i].size());
  }
  return scores;
}

inline std::vector<std::string> select(const PoolState& state, StrategyId strategy,
                                       const SelectionConfig& config,
                                       SelectionTrace* trace = nullptr) {
  const std::size_t k = config.batch_k;
  require(k >= 1, "batch_k must be at least 1");
  const std::size_t n = state.ids.size();
  if (k > n) {
    throw ValidationError("requested " + std::to_string(k) + " instances but only " +
                          std::to_string(n) + " unlabeled remain");
  }
  {
    std::unordered_set<std::string> labeled(state.labeled_ids.begin(), state.labeled_ids.end());
    std::unordered_set<std::string> seen;
    for (const auto& id : state.ids) {
      if (labeled.count(id)) fail("candidate '" + id + "' is already labeled");
      if (!seen.insert(id).second) fail("duplicate candidate id '" + id + "'");
    }
  }
  if (needs_posteriors(strategy)) {
    require(state.posteriors && static_cast<std::size_t>(state.posteriors->rows()) == n,
            std::string(to_string(strategy)) + " needs one posterior per candidate");
  }
  if (needs_embeddings(strategy)) {
    require(state.embeddings && static_cast<std::size_t>(state.embeddings->rows()) == n,
            std::string(to_string(strategy)) + " needs one embedding per candidate");
  }
  Rng rng = make_rng(config.seed);
  std::vector<std::string> out;

  auto take_ranked = [&](const std::vector<double>& scores) {
    const auto order = detail::rank_rows(scores, state.ids);
    if (trace) trace->scores = scores;
    if (config.randomize_2k && n >= 2 * k) {
      std::vector<std::size_t> top(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(2 * k));
      auto picks = sample_without_replacement(rng, top.size(), k);
      std::sort(picks.begin(), picks.end());
      for (auto p : picks) out.push_back(state.ids[top[p]]);
      if (trace) {
        trace->randomized = true;
        trace->candidate_set.clear();
        for (auto r : top) trace->candidate_set.push_back(state.ids[r]);
      }
    } else {
      for (std::size_t i = 0; i < k; ++i) out.push_back(state.ids[order[i]]);
    }
  };

  switch (strategy) {
    case StrategyId::random: {
      for (auto i : sample_without_replacement(rng, n, k)) out.push_back(state.ids[i]);
      break;
    }
    case StrategyId::least_confidence:
    case StrategyId::margin:
    case StrategyId::entropy:
      take_ranked(detail::uncertainty_scores(*state.posteriors, *uncertainty_of(strategy)));
      break;
    case StrategyId::cal:
      take_ranked(cal_scores(state, config));
      break;
    case StrategyId::kmeans:
    case StrategyId::kmedoids:
    case StrategyId::single_link: {
      Clustering c = strategy == StrategyId::kmeans     ? kmeans(*state.embeddings, k, config.seed)
                     : strategy == StrategyId::kmedoids ? kmedoids(*state.embeddings, k, config.seed)
                                                        : single_link(*state.embeddings, k);
      for (auto r : c.representatives) out.push_back(state.ids[r]);
      break;
    }
    case StrategyId::kmeans_margin:
    case StrategyId::kmedoids_margin:
    case StrategyId::kmedoids_least:
    case StrategyId::kmedoids_entropy: {
      const Clustering c = strategy == StrategyId::kmeans_margin
                               ? kmeans(*state.embeddings, k, config.seed)
                               : kmedoids(*state.embeddings, k, config.seed);
      const auto scores = detail::uncertainty_scores(*state.posteriors, *uncertainty_of(strategy));
      if (trace) trace->scores = scores;
      std::vector<std::size_t> best(k, n);
      for (std::size_t i = 0; i < n; ++i) {
        auto& b = best[c.assignment[i]];
        if (b == n || scores[i] > scores[b] || (scores[i] == scores[b] && state.ids[i] < state.ids[b])) {
          b = i;
        }
      }
      for (auto r : best) out.push_back(state.ids[r]);
      break;
    }
  }
  return out;
}

}  // namespace fasl
